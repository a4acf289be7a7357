//! End-to-end model assembly: backbone (+ optional adapters) -> preliminary
//! decoder -> concatenated latent -> entropy model -> receiver-side decoder.
//! One pipeline is trained per (task, lambda, mode).

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::adaptation::{inject_adapters, AdapterPlan, AdapterSet};
use crate::backbone::{build_backbone, AdapterHook, Backbone, BackboneConfig, NoAdapters};
use crate::codec::{pack_bitstream, unpack_bitstream, BitstreamHeader, DualSpatialModel};
use crate::error::{IcmError, Result};
use crate::lc_decoder::{Decoder, DecoderConfig, DecoderVariant};
use crate::nn::{Graph, ParamStore, Var};
use crate::prelim::{PrelimDecoder, TASK_FEATURE_CHANNELS};
use crate::synth::SyntheticScene;
use crate::task::{TaskId, TaskSpec};

/// Backbone-training ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FullFt,
    DoraFt,
    Fixed,
    Scratch,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::FullFt => "full_ft",
            TrainMode::DoraFt => "dora_ft",
            TrainMode::Fixed => "fixed",
            TrainMode::Scratch => "scratch",
        }
    }

    /// Legend names used in plots and reports.
    pub fn display_name(&self) -> &'static str {
        match self {
            TrainMode::FullFt => "Full FT",
            TrainMode::DoraFt => "DoRA FT",
            TrainMode::Fixed => "Fixed Pre-trained",
            TrainMode::Scratch => "Scratch",
        }
    }

    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "full_ft" => Ok(TrainMode::FullFt),
            "dora_ft" => Ok(TrainMode::DoraFt),
            "fixed" => Ok(TrainMode::Fixed),
            "scratch" => Ok(TrainMode::Scratch),
            other => Err(IcmError::Config(format!("unknown mode: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub task: TaskId,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub backbone_seed: u64,
    pub mode: TrainMode,
    /// Adapter plan; required for dora_ft, rejected otherwise.
    pub adapter: Option<AdapterPlan>,
    pub decoder: String, // "lc" | "full"
    pub seed: u64,
}

impl PipelineConfig {
    pub fn dora(task: TaskId) -> PipelineConfig {
        PipelineConfig {
            task,
            num_classes: crate::synth::MAX_SHAPE_CLASSES + 1,
            backbone: BackboneConfig::default(),
            backbone_seed: 0,
            mode: TrainMode::DoraFt,
            adapter: Some(AdapterPlan::qkv(
                crate::adaptation::AdapterKind::Dora,
                8,
                task.as_str(),
            )),
            decoder: "lc".into(),
            seed: 0,
        }
    }

    pub fn with_mode(mut self, mode: TrainMode) -> PipelineConfig {
        self.mode = mode;
        if mode != TrainMode::DoraFt {
            self.adapter = None;
        }
        self
    }

    pub fn decoder_variant(&self) -> Result<DecoderVariant> {
        match self.decoder.as_str() {
            "lc" => Ok(DecoderVariant::Lc),
            "full" => Ok(DecoderVariant::Full),
            other => Err(IcmError::Config(format!("unknown decoder: {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, &self.adapter) {
            (TrainMode::DoraFt, None) => {
                return Err(IcmError::Config("dora_ft requires an adapter plan".into()))
            }
            (TrainMode::DoraFt, Some(plan)) => plan.validate()?,
            (_, Some(_)) => {
                return Err(IcmError::Config(format!(
                    "mode {} must not carry an adapter plan",
                    self.mode.as_str()
                )))
            }
            _ => {}
        }
        self.decoder_variant()?;
        self.backbone.validate()
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub spec: TaskSpec,
    pub backbone: Backbone,
    pub adapters: Option<AdapterSet>,
    pub prelim: PrelimDecoder,
    pub codec: DualSpatialModel,
    pub decoder: Decoder,
}

impl Pipeline {
    pub fn latent_channels(&self) -> usize {
        TASK_FEATURE_CHANNELS + self.spec.channels
    }

    fn hook(&self) -> &dyn AdapterHook {
        match &self.adapters {
            Some(set) => set,
            None => &NoAdapters,
        }
    }

    /// Assemble a pipeline. `pretrained` supplies backbone weights for the
    /// full_ft / dora_ft / fixed arms; scratch ignores it and starts random.
    pub fn build(
        config: PipelineConfig,
        pretrained: Option<(&Backbone, &ParamStore)>,
    ) -> Result<(Pipeline, ParamStore)> {
        config.validate()?;
        let (mut backbone, mut store) = build_backbone(config.backbone.clone(), config.backbone_seed)?;
        match config.mode {
            TrainMode::Scratch => {
                backbone.set_frozen(&mut store, false);
            }
            mode => {
                let (src_bb, src_store) = pretrained.ok_or_else(|| {
                    IcmError::Config(format!(
                        "mode {} requires a pretrained backbone",
                        mode.as_str()
                    ))
                })?;
                if src_bb.config != config.backbone {
                    return Err(IcmError::IncompatibleModel(
                        "pretrained backbone config mismatch".into(),
                    ));
                }
                for id in src_store.ids() {
                    let name = src_store.name(id).to_string();
                    if !name.starts_with(crate::backbone::PREFIX) {
                        continue;
                    }
                    let dst = store.id(&name).ok_or_else(|| {
                        IcmError::IncompatibleModel(format!("missing backbone param {name}"))
                    })?;
                    *store.value_mut(dst) = src_store.value(id).clone();
                }
                backbone.pretrain_fingerprint = src_bb.pretrain_fingerprint.clone();
                backbone.set_frozen(&mut store, mode != TrainMode::FullFt);
            }
        }

        let adapters = match &config.adapter {
            Some(plan) => Some(inject_adapters(&backbone, plan, config.seed, &mut store)?),
            None => None,
        };

        let spec = TaskSpec::for_task(config.task, config.num_classes);
        let prelim = PrelimDecoder::build(
            spec.clone(),
            config.backbone.final_channels(),
            config.seed,
            &mut store,
        )?;
        let latent_channels = TASK_FEATURE_CHANNELS + spec.channels;
        let codec = DualSpatialModel::build(latent_channels, config.seed, &mut store)?;
        let dec_cfg = match config.decoder_variant()? {
            DecoderVariant::Lc => DecoderConfig::lc(latent_channels),
            DecoderVariant::Full => DecoderConfig::full(latent_channels),
        };
        let decoder = Decoder::build(dec_cfg, spec.clone(), config.seed, &mut store)?;
        Ok((
            Pipeline { config, spec, backbone, adapters, prelim, codec, decoder },
            store,
        ))
    }

    /// Encoder-side graph up to the concatenated latent (task features ++
    /// preliminary prediction), plus the bicubic-upsampled preliminary
    /// prediction for intermediate supervision.
    pub fn latent_var(
        &self,
        g: &Graph,
        store: &mut ParamStore,
        images: Var,
        train: bool,
    ) -> Result<(Var, Var)> {
        let feats = self.backbone.forward(g, store, images, self.hook())?;
        let out = self.prelim.forward(g, store, feats, train)?;
        let latent = g.concat(&[out.task_features, out.prelim_pred], 1);
        Ok((latent, out.upsampled_pred))
    }

    /// Eval path: deterministic rounded latent for a batch of images.
    pub fn rounded_latent(
        &self,
        store: &mut ParamStore,
        images: &ArrayD<f64>,
    ) -> Result<ArrayD<f64>> {
        let g = Graph::new();
        let x = g.constant(images.clone());
        let (latent, _) = self.latent_var(&g, store, x, false)?;
        Ok(g.value(latent).mapv(f64::round))
    }

    /// Receiver side on a rounded latent: decoder prediction (N, ch, H, W).
    pub fn predict_from_latent(
        &self,
        store: &ParamStore,
        yhat: &ArrayD<f64>,
    ) -> Result<ArrayD<f64>> {
        let g = Graph::new();
        let latent = g.constant(yhat.clone());
        let pred = self.decoder.forward(&g, store, latent)?;
        Ok(g.value(pred))
    }

    /// End-to-end round-mode prediction and the estimated bpp.
    pub fn predict(
        &self,
        store: &mut ParamStore,
        images: &ArrayD<f64>,
    ) -> Result<(ArrayD<f64>, f64)> {
        let yhat = self.rounded_latent(store, images)?;
        let (h, w) = (images.shape()[2], images.shape()[3]);
        let bpp = self.codec.estimate_rate_bpp(store, &yhat, (h, w))?;
        Ok((self.predict_from_latent(store, &yhat)?, bpp))
    }

    /// Compress one image (1, 3, H, W) to a standalone bitstream.
    pub fn compress(
        &self,
        store: &mut ParamStore,
        image: &ArrayD<f64>,
        lambda_index: u8,
    ) -> Result<Vec<u8>> {
        let s = image.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(IcmError::Shape("compress expects a single (1, 3, H, W) image".into()));
        }
        let (h, w) = (s[2], s[3]);
        if h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(IcmError::Argument("image too large for the header".into()));
        }
        let yhat = self.rounded_latent(store, image)?;
        let payload = self.codec.encode(store, &yhat)?;
        let header = BitstreamHeader {
            task: self.spec.id,
            lambda_index,
            image_h: h as u16,
            image_w: w as u16,
            channels: self.latent_channels() as u16,
            cdf_hash: self.codec.cdf_hash(store),
        };
        pack_bitstream(&header, &payload)
    }

    /// Decompress a bitstream into a prediction; also returns the header and
    /// the actual payload bits-per-pixel.
    pub fn decompress(
        &self,
        store: &ParamStore,
        bytes: &[u8],
    ) -> Result<(ArrayD<f64>, BitstreamHeader, f64)> {
        let (header, payload) = unpack_bitstream(bytes)?;
        if header.task != self.spec.id {
            return Err(IcmError::IncompatibleModel(format!(
                "bitstream is for task {}, model is {}",
                header.task.as_str(),
                self.spec.id.as_str()
            )));
        }
        if header.cdf_hash != self.codec.cdf_hash(store) {
            return Err(IcmError::IncompatibleModel("CDF-table hash mismatch".into()));
        }
        if header.channels as usize != self.latent_channels() {
            return Err(IcmError::IncompatibleModel("latent channel mismatch".into()));
        }
        let (h, w) = (header.image_h as usize, header.image_w as usize);
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(IcmError::CorruptStream("bad image dims in header".into()));
        }
        let yhat = self.codec.decode(store, payload, h / 16, w / 16)?;
        let pred = self.predict_from_latent(store, &yhat)?;
        let bpp = (payload.len() * 8) as f64 / (h * w) as f64;
        Ok((pred, header, bpp))
    }
}

/// Stack scene images into an (N, 3, H, W) batch tensor.
pub fn batch_images(scenes: &[&SyntheticScene]) -> ArrayD<f64> {
    let (h, w) = (scenes[0].image.shape()[1], scenes[0].image.shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[scenes.len(), 3, h, w]));
    for (n, sc) in scenes.iter().enumerate() {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[n, c, y, x]] = sc.image[[c, y, x]];
                }
            }
        }
    }
    out
}
