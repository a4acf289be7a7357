//! Shared feature extractor: a small 4-stage hierarchical vision transformer
//! (patch-embed stride 4, then three 2x merges) giving a 16x output stride.
//! After pretext pretraining it is frozen and serves every downstream task.

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ckpt::{self, param_hash};
use crate::error::{IcmError, Result};
use crate::nn::layers::{sample_to_tokens, tokens_to_sample, Conv2d, LayerNorm, Linear};
use crate::nn::{Adam, Graph, ParamId, ParamStore, Var};
use crate::synth::{self, SyntheticScene};

pub const STAGES: usize = 4;
pub const OUTPUT_STRIDE: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub num_heads: usize,
    pub patch_size: usize,
    pub merge_factor: usize,
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![32, 64, 96, 128],
            stage_depths: vec![1, 1, 1, 1],
            num_heads: 4,
            patch_size: 4,
            merge_factor: 2,
            input_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != STAGES || self.stage_depths.len() != STAGES {
            return Err(IcmError::Config(format!(
                "backbone needs exactly {STAGES} stages, got {} channels / {} depths",
                self.stage_channels.len(),
                self.stage_depths.len()
            )));
        }
        if self.patch_size != 4 || self.merge_factor != 2 {
            return Err(IcmError::Config(
                "patch_size must be 4 and merge_factor 2 (16x total stride)".into(),
            ));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.stage_depths.iter().any(|&d| d == 0) {
            return Err(IcmError::Config("stage sizes must be positive".into()));
        }
        if self.num_heads == 0 || self.stage_channels.iter().any(|&c| c % self.num_heads != 0) {
            return Err(IcmError::Config(
                "num_heads must divide every stage channel count".into(),
            ));
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.stage_channels[STAGES - 1]
    }
}

/// Adapter injection point: given a projection's key and its frozen base
/// weight, optionally return a replacement effective-weight node.
pub trait AdapterHook {
    fn effective_weight(&self, g: &Graph, store: &ParamStore, key: &str, base: ParamId)
        -> Option<Var>;
}

/// No-op hook (frozen backbone as-is).
pub struct NoAdapters;
impl AdapterHook for NoAdapters {
    fn effective_weight(&self, _: &Graph, _: &ParamStore, _: &str, _: ParamId) -> Option<Var> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub key: String, // "s{stage}.b{block}"
    pub dim: usize,
    pub heads: usize,
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        key: String,
        dim: usize,
        heads: usize,
        trainable: bool,
    ) -> Self {
        let name = format!("{prefix}.{key}");
        TransformerBlock {
            key,
            dim,
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, trainable),
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true, trainable),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true, trainable),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true, trainable),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true, trainable),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, trainable),
            up: Linear::new(store, rng, &format!("{name}.up"), dim, 4 * dim, true, trainable),
            down: Linear::new(store, rng, &format!("{name}.down"), 4 * dim, dim, true, trainable),
        }
    }

    fn proj(
        &self,
        g: &Graph,
        store: &ParamStore,
        hook: &dyn AdapterHook,
        target: &str,
        lin: &Linear,
        x: Var,
    ) -> Var {
        let key = format!("{}.{}", self.key, target);
        match hook.effective_weight(g, store, &key, lin.w) {
            Some(w) => lin.forward_with_weight(g, store, x, w),
            None => lin.forward(g, store, x),
        }
    }

    /// Pre-norm block on (T, C) tokens.
    pub fn forward(&self, g: &Graph, store: &ParamStore, hook: &dyn AdapterHook, x: Var) -> Var {
        let h = self.ln1.forward(g, store, x);
        let q = self.proj(g, store, hook, "q", &self.q, h);
        let k = self.proj(g, store, hook, "k", &self.k, h);
        let v = self.proj(g, store, hook, "v", &self.v, h);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = g.slice(q, 1, hd * dh, dh);
            let kh = g.slice(k, 1, hd * dh, dh);
            let vh = g.slice(v, 1, hd * dh, dh);
            let scores = g.mul_scalar(g.matmul(qh, g.transpose(kh)), scale);
            let attn = g.softmax(scores, 1);
            head_outs.push(g.matmul(attn, vh));
        }
        let cat = g.concat(&head_outs, 1);
        let attn_out = self.o.forward(g, store, cat);
        let x = g.add(x, attn_out);

        let h2 = self.ln2.forward(g, store, x);
        let up = self.proj(g, store, hook, "up", &self.up, h2);
        let act = g.gelu(up);
        let down = self.proj(g, store, hook, "down", &self.down, act);
        g.add(x, down)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretextTaskConfig {
    pub h: usize,
    pub w: usize,
    pub k_shapes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub data_seed: u64,
}

impl Default for PretextTaskConfig {
    fn default() -> Self {
        PretextTaskConfig {
            h: 64,
            w: 64,
            k_shapes: synth::MAX_SHAPE_CLASSES,
            n_train: 200,
            n_val: 50,
            batch_size: 8,
            lr: 1e-3,
            data_seed: 1234,
        }
    }
}

#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub seed: u64,
    pub frozen: bool,
    pub pretrain_fingerprint: Option<String>,
    pub patch_embed: Conv2d,
    pub cpe: Vec<Conv2d>, // depthwise positional conv per stage
    pub stages: Vec<Vec<TransformerBlock>>,
    pub merges: Vec<Conv2d>,
}

pub const PREFIX: &str = "backbone";

impl Backbone {
    /// Deterministic construction: same (config, seed) gives bitwise-identical
    /// parameters.
    pub fn build(
        config: BackboneConfig,
        seed: u64,
        store: &mut ParamStore,
        trainable: bool,
    ) -> Result<Backbone> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0B0_0001);
        let c = &config.stage_channels;
        let patch_embed = Conv2d::new(
            store,
            &mut rng,
            &format!("{PREFIX}.patch"),
            config.input_channels,
            c[0],
            config.patch_size,
            config.patch_size,
            0,
            1,
            true,
            trainable,
        );
        let mut cpe = Vec::new();
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for s in 0..STAGES {
            cpe.push(Conv2d::new(
                store,
                &mut rng,
                &format!("{PREFIX}.s{s}.cpe"),
                c[s],
                c[s],
                3,
                1,
                1,
                c[s],
                true,
                trainable,
            ));
            let mut blocks = Vec::new();
            for b in 0..config.stage_depths[s] {
                blocks.push(TransformerBlock::new(
                    store,
                    &mut rng,
                    PREFIX,
                    format!("s{s}.b{b}"),
                    c[s],
                    config.num_heads,
                    trainable,
                ));
            }
            stages.push(blocks);
            if s + 1 < STAGES {
                // two 2x merges (after stages 0 and 1) give the 16x output
                // stride with a stride-4 patch embed; the stage-2 -> stage-3
                // transition is a channel projection at constant resolution
                let c_in = if s < 2 { 4 * c[s] } else { c[s] };
                merges.push(Conv2d::new(
                    store,
                    &mut rng,
                    &format!("{PREFIX}.merge{s}"),
                    c_in,
                    c[s + 1],
                    1,
                    1,
                    0,
                    1,
                    true,
                    trainable,
                ));
            }
        }
        Ok(Backbone {
            config,
            seed,
            frozen: false,
            pretrain_fingerprint: None,
            patch_embed,
            cpe,
            stages,
            merges,
        })
    }

    /// Features at stride 16 with `stage_channels[3]` channels.
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        image: Var,
        hook: &dyn AdapterHook,
    ) -> Result<Var> {
        let s = g.shape(image);
        if s.len() != 4 || s[1] != self.config.input_channels {
            return Err(IcmError::Shape(format!("expected (N, {}, H, W) image, got {s:?}", self.config.input_channels)));
        }
        if s[2] % OUTPUT_STRIDE != 0 || s[3] % OUTPUT_STRIDE != 0 {
            return Err(IcmError::Shape(format!(
                "image dims must be divisible by {OUTPUT_STRIDE}, got {}x{}",
                s[2], s[3]
            )));
        }
        let n = s[0];
        let mut x = self.patch_embed.forward(g, store, image);
        for stage in 0..STAGES {
            // positional encoding via residual depthwise conv
            let pe = self.cpe[stage].forward(g, store, x);
            x = g.add(x, pe);
            let xs = g.shape(x);
            let (c, h, w) = (xs[1], xs[2], xs[3]);
            let mut samples = Vec::with_capacity(n);
            for ni in 0..n {
                let mut t = sample_to_tokens(g, x, ni);
                for block in &self.stages[stage] {
                    t = block.forward(g, store, hook, t);
                }
                samples.push(tokens_to_sample(g, t, c, h, w));
            }
            x = g.concat(&samples, 0);
            if stage + 1 < STAGES {
                let packed = if stage < 2 {
                    g.space_to_depth(x, self.config.merge_factor)
                } else {
                    x
                };
                x = self.merges[stage].forward(g, store, packed);
            }
        }
        Ok(x)
    }

    pub fn param_hash(&self, store: &ParamStore) -> String {
        param_hash(store, PREFIX)
    }

    pub fn set_frozen(&mut self, store: &mut ParamStore, frozen: bool) {
        self.frozen = frozen;
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| store.name(id).starts_with(PREFIX))
            .collect();
        for id in ids {
            store.set_trainable(id, !frozen);
        }
    }
}

/// Build a fresh backbone with its own store.
pub fn build_backbone(config: BackboneConfig, seed: u64) -> Result<(Backbone, ParamStore)> {
    let mut store = ParamStore::new();
    let bb = Backbone::build(config, seed, &mut store, true)?;
    Ok((bb, store))
}

/// Pure-array feature extraction (eval path).
pub fn extract_features(
    backbone: &Backbone,
    store: &ParamStore,
    image: &ArrayD<f64>,
) -> Result<ArrayD<f64>> {
    let g = Graph::new();
    let x = g.constant(image.clone());
    let f = backbone.forward(&g, store, x, &NoAdapters)?;
    Ok(g.value(f))
}

/// Scene category for the pretext task: class of the salient object.
pub fn scene_category(scene: &SyntheticScene) -> usize {
    let h = scene.semseg.shape()[0];
    let w = scene.semseg.shape()[1];
    let mut counts = [0usize; synth::MAX_SHAPE_CLASSES + 1];
    for y in 0..h {
        for x in 0..w {
            if scene.saliency[[y, x]] > 0.5 {
                counts[scene.semseg[[y, x]] as usize] += 1;
            }
        }
    }
    let best = counts
        .iter()
        .enumerate()
        .skip(1)
        .max_by_key(|(_, &c)| c)
        .map(|(i, _)| i)
        .unwrap_or(1);
    best - 1
}

fn images_batch(scenes: &[&SyntheticScene]) -> ArrayD<f64> {
    let h = scenes[0].image.shape()[1];
    let w = scenes[0].image.shape()[2];
    let mut out = ArrayD::zeros(IxDyn(&[scenes.len(), 3, h, w]));
    for (i, s) in scenes.iter().enumerate() {
        out.slice_mut(ndarray::s![i, .., .., ..]).assign(
            &s.image.view().into_dimensionality::<ndarray::Ix3>().unwrap(),
        );
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: u64,
    pub initial_val_accuracy: f64,
    pub final_val_accuracy: f64,
    pub fingerprint: String,
}

fn pretext_accuracy(
    backbone: &Backbone,
    store: &ParamStore,
    head: &Linear,
    scenes: &[SyntheticScene],
) -> Result<f64> {
    let mut correct = 0usize;
    for s in scenes {
        let g = Graph::new();
        let img = g.constant(images_batch(&[s]));
        let feat = backbone.forward(&g, store, img, &NoAdapters)?;
        let pooled = g.mean_axes(feat, &[2, 3]);
        let fs = g.shape(pooled);
        let flat = g.reshape(pooled, &[fs[0], fs[1]]);
        let logits = head.forward(&g, store, flat);
        let v = g.value(logits);
        let row = v.as_slice().unwrap();
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == scene_category(s) {
            correct += 1;
        }
    }
    Ok(correct as f64 / scenes.len() as f64)
}

/// Train the backbone on the synthetic-scene category pretext, then freeze it
/// and stamp the pretrain fingerprint.
pub fn pretrain_backbone(
    backbone: &mut Backbone,
    store: &mut ParamStore,
    pretext: &PretextTaskConfig,
    steps: i64,
    seed: u64,
) -> Result<PretrainReport> {
    if backbone.frozen {
        return Err(IcmError::Argument("backbone is already frozen".into()));
    }
    if steps < 0 {
        return Err(IcmError::Argument(format!("steps must be >= 0, got {steps}")));
    }
    let split = synth::make_split(pretext.n_train, pretext.n_val, pretext.data_seed)?;
    let train: Vec<SyntheticScene> = split
        .train
        .iter()
        .map(|r| synth::generate_scene(r.seed, pretext.h, pretext.w, pretext.k_shapes))
        .collect::<Result<_>>()?;
    let val: Vec<SyntheticScene> = split
        .val
        .iter()
        .map(|r| synth::generate_scene(r.seed, pretext.h, pretext.w, pretext.k_shapes))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_1234);
    let head = Linear::new(
        store,
        &mut rng,
        "pretext.head",
        backbone.config.final_channels(),
        pretext.k_shapes,
        true,
        true,
    );
    let initial = pretext_accuracy(backbone, store, &head, &val)?;

    let mut opt = Adam::new(1e-6);
    for step in 0..steps as u64 {
        store.zero_grads();
        let idx: Vec<usize> = (0..pretext.batch_size)
            .map(|_| rng.gen_range(0..train.len()))
            .collect();
        let scenes: Vec<&SyntheticScene> = idx.iter().map(|&i| &train[i]).collect();
        let labels: Vec<i64> = scenes.iter().map(|s| scene_category(s) as i64).collect();
        let g = Graph::new();
        let img = g.constant(images_batch(&scenes));
        let feat = backbone.forward(&g, store, img, &NoAdapters)?;
        let pooled = g.mean_axes(feat, &[2, 3]);
        let fs = g.shape(pooled);
        let flat = g.reshape(pooled, &[fs[0], fs[1]]);
        let logits = head.forward(&g, store, flat);
        let labels_arr = ArrayD::from_shape_vec(IxDyn(&[labels.len()]), labels).unwrap();
        let loss = g.cross_entropy(logits, labels_arr, -1);
        let grads = g.backward(loss);
        g.apply_grads(&grads, store);
        opt.step(store, pretext.lr);
        let _ = step;
    }

    let final_acc = pretext_accuracy(backbone, store, &head, &val)?;
    backbone.set_frozen(store, true);
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(pretext)?);
    hasher.update(seed.to_le_bytes());
    hasher.update(backbone.param_hash(store).as_bytes());
    let fingerprint = ckpt::hex_string(&hasher.finalize());
    backbone.pretrain_fingerprint = Some(fingerprint.clone());
    Ok(PretrainReport {
        steps: steps as u64,
        initial_val_accuracy: initial,
        final_val_accuracy: final_acc,
        fingerprint,
    })
}

/// Save only the backbone params plus config/fingerprint metadata.
pub fn save_backbone(path: &std::path::Path, backbone: &Backbone, store: &ParamStore) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "backbone",
        "config": backbone.config,
        "seed": backbone.seed,
        "frozen": backbone.frozen,
        "fingerprint": backbone.pretrain_fingerprint,
    });
    ckpt::save_params(path, store, PREFIX, meta)
}

/// Load a frozen backbone checkpoint into a fresh store.
pub fn load_backbone(path: &std::path::Path) -> Result<(Backbone, ParamStore)> {
    let loaded = ckpt::load_params(path)?;
    if loaded.meta["kind"] != "backbone" {
        return Err(IcmError::IncompatibleModel("not a backbone checkpoint".into()));
    }
    let config: BackboneConfig = serde_json::from_value(loaded.meta["config"].clone())?;
    let seed = loaded.meta["seed"].as_u64().unwrap_or(0);
    let mut store = ParamStore::new();
    let mut bb = Backbone::build(config, seed, &mut store, true)?;
    ckpt::restore_into(&mut store, &loaded)?;
    bb.set_frozen(&mut store, true);
    bb.pretrain_fingerprint = loaded.meta["fingerprint"].as_str().map(|s| s.to_string());
    Ok((bb, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            stage_channels: vec![8, 16, 24, 32],
            stage_depths: vec![1, 1, 1, 1],
            num_heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn build_is_deterministic() {
        let (b1, s1) = build_backbone(BackboneConfig::default(), 0).unwrap();
        let (b2, s2) = build_backbone(BackboneConfig::default(), 0).unwrap();
        assert_eq!(b1.param_hash(&s1), b2.param_hash(&s2));
        let (b3, s3) = build_backbone(BackboneConfig::default(), 1).unwrap();
        assert_ne!(b1.param_hash(&s1), b3.param_hash(&s3));
    }

    #[test]
    fn three_stage_config_rejected() {
        let cfg = BackboneConfig {
            stage_channels: vec![32, 64, 96],
            stage_depths: vec![1, 1, 1],
            ..Default::default()
        };
        assert!(matches!(build_backbone(cfg, 0), Err(IcmError::Config(_))));
    }

    #[test]
    fn output_shape_is_stride_16() {
        let (bb, store) = build_backbone(small_config(), 3).unwrap();
        let img = ArrayD::zeros(IxDyn(&[1, 3, 64, 64]));
        let f = extract_features(&bb, &store, &img).unwrap();
        assert_eq!(f.shape(), &[1, 32, 4, 4]);
        assert!(f.iter().all(|v| v.is_finite()));
        // and for a second size
        let img2 = ArrayD::zeros(IxDyn(&[1, 3, 32, 48]));
        let f2 = extract_features(&bb, &store, &img2).unwrap();
        assert_eq!(f2.shape(), &[1, 32, 2, 3]);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let (bb, store) = build_backbone(small_config(), 3).unwrap();
        let img = ArrayD::zeros(IxDyn(&[1, 3, 60, 64]));
        assert!(matches!(
            extract_features(&bb, &store, &img),
            Err(IcmError::Shape(_))
        ));
    }

    #[test]
    fn frozen_forward_is_pure() {
        let (mut bb, mut store) = build_backbone(small_config(), 5).unwrap();
        bb.set_frozen(&mut store, true);
        let scene = synth::generate_scene(9, 64, 64, 4).unwrap();
        let img = images_batch(&[&scene]);
        let f1 = extract_features(&bb, &store, &img).unwrap();
        let f2 = extract_features(&bb, &store, &img).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn pretrain_zero_steps_is_noop_but_freezes() {
        let (mut bb, mut store) = build_backbone(small_config(), 7).unwrap();
        let before = bb.param_hash(&store);
        let cfg = PretextTaskConfig { n_train: 4, n_val: 2, ..Default::default() };
        let report = pretrain_backbone(&mut bb, &mut store, &cfg, 0, 0).unwrap();
        assert_eq!(bb.param_hash(&store), before);
        assert!(bb.frozen);
        assert!(bb.pretrain_fingerprint.is_some());
        assert_eq!(report.steps, 0);
        // negative steps rejected, and re-pretraining a frozen backbone too
        let (mut bb2, mut store2) = build_backbone(small_config(), 7).unwrap();
        assert!(pretrain_backbone(&mut bb2, &mut store2, &cfg, -1, 0).is_err());
        assert!(pretrain_backbone(&mut bb, &mut store, &cfg, 1, 0).is_err());
    }

    #[test]
    fn pretrain_fingerprint_is_reproducible() {
        let cfg = PretextTaskConfig { n_train: 4, n_val: 2, ..Default::default() };
        let (mut b1, mut s1) = build_backbone(small_config(), 7).unwrap();
        let r1 = pretrain_backbone(&mut b1, &mut s1, &cfg, 3, 11).unwrap();
        let (mut b2, mut s2) = build_backbone(small_config(), 7).unwrap();
        let r2 = pretrain_backbone(&mut b2, &mut s2, &cfg, 3, 11).unwrap();
        assert_eq!(r1.fingerprint, r2.fingerprint);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.icmc");
        let cfg = PretextTaskConfig { n_train: 4, n_val: 2, ..Default::default() };
        let (mut bb, mut store) = build_backbone(small_config(), 2).unwrap();
        pretrain_backbone(&mut bb, &mut store, &cfg, 2, 0).unwrap();
        save_backbone(&path, &bb, &store).unwrap();
        let (bb2, store2) = load_backbone(&path).unwrap();
        assert_eq!(bb.param_hash(&store), bb2.param_hash(&store2));
        assert_eq!(bb.pretrain_fingerprint, bb2.pretrain_fingerprint);
        assert!(bb2.frozen);
    }
}
