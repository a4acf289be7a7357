//! Rate-accuracy training: L = R + lambda * (L_task + mu * L_prelim), Adam
//! with polynomial learning-rate decay, and the four backbone ablation arms
//! (full fine-tuning, DoRA adapters, fixed backbone, training from scratch).

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{IcmError, Result};
use crate::nn::{Adam, Graph, ParamStore, Var};
use crate::pipeline::{batch_images, Pipeline, PipelineConfig, TrainMode};
use crate::synth::{generate_scene, make_split, SyntheticScene};
use crate::task::{LossKind, TaskSpec};

/// Intermediate-supervision weight on the preliminary-prediction loss.
pub const INTER_SUP_WEIGHT: f64 = 1.0;
/// Positive-class weight cap for the boundary/saliency BCE.
pub const POS_WEIGHT_CAP: f64 = 50.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pipeline: PipelineConfig,
    pub lambda: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub inter_sup: bool,
    pub seed: u64,
    pub image_size: (usize, usize),
    pub k_shapes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub log_interval: usize,
}

impl TrainConfig {
    pub fn desk_default(pipeline: PipelineConfig, lambda: f64) -> TrainConfig {
        TrainConfig {
            pipeline,
            lambda,
            iterations: 5000,
            batch_size: 2,
            lr: 2e-5,
            weight_decay: 1e-6,
            poly_power: 0.9,
            inter_sup: true,
            seed: 0,
            image_size: (64, 64),
            k_shapes: 4,
            n_train: 200,
            n_val: 32,
            log_interval: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(IcmError::Config("lambda must be > 0".into()));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(IcmError::Config("iterations and batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 || self.poly_power <= 0.0 {
            return Err(IcmError::Config("lr and poly_power must be > 0".into()));
        }
        self.pipeline.validate()
    }
}

/// Polynomial decay: lr0 * (1 - step/iterations)^p.
pub fn poly_lr(step: usize, lr0: f64, iterations: usize, power: f64) -> Result<f64> {
    if step > iterations {
        return Err(IcmError::Argument(format!(
            "step {step} out of range 0..={iterations}"
        )));
    }
    Ok(lr0 * (1.0 - step as f64 / iterations as f64).powf(power))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rate_bpp: f64,
    pub task_final: f64,
    pub task_prelim: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// total = rate + lambda * (final + mu * prelim); prelim drops out when
    /// intermediate supervision is off.
    pub fn compose(
        rate_bpp: f64,
        task_final: f64,
        task_prelim: f64,
        lambda: f64,
        inter_sup: bool,
    ) -> LossBreakdown {
        let prelim_term = if inter_sup { INTER_SUP_WEIGHT * task_prelim } else { 0.0 };
        LossBreakdown {
            rate_bpp,
            task_final,
            task_prelim,
            total: rate_bpp + lambda * (task_final + prelim_term),
        }
    }

    pub fn is_consistent(&self, lambda: f64, inter_sup: bool) -> bool {
        let re = LossBreakdown::compose(self.rate_bpp, self.task_final, self.task_prelim, lambda, inter_sup);
        (re.total - self.total).abs() <= 1e-6
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub rate_bpp: f64,
    pub task_final: f64,
    pub task_prelim: f64,
    pub total: f64,
}

pub struct TrainReport {
    pub log: Vec<LogRecord>,
    pub first: LossBreakdown,
    pub last: LossBreakdown,
    pub ckpt_path: PathBuf,
    pub log_path: PathBuf,
}

/// Per-batch labels for one task, extracted from scenes.
fn stack_scalar(scenes: &[&SyntheticScene], get: impl Fn(&SyntheticScene, usize, usize) -> f64) -> ArrayD<f64> {
    let (h, w) = (scenes[0].semseg.shape()[0], scenes[0].semseg.shape()[1]);
    ArrayD::from_shape_fn(IxDyn(&[scenes.len(), 1, h, w]), |i| {
        get(scenes[i[0]], i[2], i[3])
    })
}

/// Differentiable task loss between a (N, ch, H, W) prediction node and the
/// scene labels.
pub fn task_loss_var(
    g: &Graph,
    pred: Var,
    scenes: &[&SyntheticScene],
    spec: &TaskSpec,
) -> Result<Var> {
    let (h, w) = (scenes[0].semseg.shape()[0], scenes[0].semseg.shape()[1]);
    match spec.loss {
        LossKind::CrossEntropy => {
            let labels = ArrayD::from_shape_fn(IxDyn(&[scenes.len(), h, w]), |i| {
                scenes[i[0]].semseg[[i[1], i[2]]]
            });
            if labels.iter().all(|&l| l == crate::metrics::IGNORE_LABEL) {
                return Err(IcmError::EmptyLabel("all labels ignored".into()));
            }
            Ok(g.cross_entropy(pred, labels, crate::metrics::IGNORE_LABEL))
        }
        LossKind::L1 => {
            let target = stack_scalar(scenes, |s, y, x| s.depth[[y, x]]);
            let mask = ArrayD::from_elem(target.raw_dim(), 1.0);
            Ok(g.l1_masked(pred, target, mask))
        }
        LossKind::Cosine => {
            let target = ArrayD::from_shape_fn(IxDyn(&[scenes.len(), 3, h, w]), |i| {
                scenes[i[0]].normals[[i[1], i[2], i[3]]]
            });
            Ok(g.cosine_loss(pred, target))
        }
        LossKind::WeightedBce => {
            let target = match spec.id {
                crate::task::TaskId::Boundary => stack_scalar(scenes, |s, y, x| s.boundary[[y, x]]),
                _ => stack_scalar(scenes, |s, y, x| s.saliency[[y, x]]),
            };
            let pos = target.iter().filter(|&&v| v > 0.5).count();
            if pos == 0 {
                return Err(IcmError::EmptyLabel("no positive pixels in batch".into()));
            }
            let neg = target.len() - pos;
            let w_pos = (neg as f64 / pos as f64).min(POS_WEIGHT_CAP);
            let weight = target.mapv(|v| if v > 0.5 { w_pos } else { 1.0 });
            Ok(g.weighted_bce(pred, target, weight))
        }
    }
}

/// The trainable-parameter set each mode allows gradients on.
pub fn expected_trainable_prefixes(mode: TrainMode) -> Vec<&'static str> {
    let mut v = vec!["prelim.", "codec.", "lcdec."];
    match mode {
        TrainMode::FullFt | TrainMode::Scratch => v.push("backbone."),
        TrainMode::DoraFt => v.push("adapter."),
        TrainMode::Fixed => {}
    }
    v
}

fn batch_for_step<'a>(
    scenes: &'a [SyntheticScene],
    step: usize,
    batch_size: usize,
) -> Vec<&'a SyntheticScene> {
    (0..batch_size)
        .map(|i| &scenes[(step * batch_size + i) % scenes.len()])
        .collect()
}

/// One differentiable training step; returns (loss node, breakdown).
fn step_loss(
    pipeline: &Pipeline,
    g: &Graph,
    store: &mut ParamStore,
    batch: &[&SyntheticScene],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Var, LossBreakdown)> {
    let images = g.constant(batch_images(batch));
    let (latent, prelim_up) = pipeline.latent_var(g, store, images, true)?;
    // additive-uniform-noise quantization surrogate, seeded per step
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9));
    let noise = ArrayD::from_shape_fn(IxDyn(&g.shape(latent)), |_| rng.gen_range(-0.5..0.5));
    let yhat = g.add(latent, g.constant(noise));

    let (h, w) = cfg.image_size;
    let rate = pipeline.codec.rate_bpp_var(g, store, yhat, (h, w))?;
    let final_pred = pipeline.decoder.forward(g, store, yhat)?;
    let final_loss = task_loss_var(g, final_pred, batch, &pipeline.spec)?;
    let prelim_loss = task_loss_var(g, prelim_up, batch, &pipeline.spec)?;

    let mut task_term = final_loss;
    if cfg.inter_sup {
        task_term = g.add(task_term, g.mul_scalar(prelim_loss, INTER_SUP_WEIGHT));
    }
    let total = g.add(rate, g.mul_scalar(task_term, cfg.lambda));
    let breakdown = LossBreakdown::compose(
        g.scalar_value(rate),
        g.scalar_value(final_loss),
        g.scalar_value(prelim_loss),
        cfg.lambda,
        cfg.inter_sup,
    );
    Ok((total, breakdown))
}

/// Train one pipeline; writes a JSONL log and a checkpoint of the trainable
/// parts (plus non-trainable statistics of trained heads; the frozen backbone
/// is referenced by fingerprint in the metadata, not duplicated).
pub fn train(
    pipeline: &Pipeline,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let split = make_split(cfg.n_train, cfg.n_val, cfg.seed)?;
    let scenes: Vec<SyntheticScene> = split
        .train
        .iter()
        .map(|r| generate_scene(r.seed, cfg.image_size.0, cfg.image_size.1, cfg.k_shapes))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(cfg.weight_decay);
    let mut log = Vec::new();
    let mut first: Option<LossBreakdown> = None;
    let mut last: Option<LossBreakdown> = None;
    for step in 0..cfg.iterations {
        let batch = batch_for_step(&scenes, step, cfg.batch_size);
        let g = Graph::new();
        let (total, breakdown) = step_loss(pipeline, &g, store, &batch, cfg, step)?;
        if !breakdown.total.is_finite() {
            return Err(IcmError::Numerical(format!(
                "non-finite loss at step {step}: {breakdown:?}"
            )));
        }
        store.zero_grads();
        let grads = g.backward(total);
        g.apply_grads(&grads, store);
        let lr = poly_lr(step, cfg.lr, cfg.iterations, cfg.poly_power)?;
        adam.step(store, lr);

        if first.is_none() {
            first = Some(breakdown);
        }
        last = Some(breakdown);
        if step % cfg.log_interval == 0 || step + 1 == cfg.iterations {
            log.push(LogRecord {
                step,
                lr,
                rate_bpp: breakdown.rate_bpp,
                task_final: breakdown.task_final,
                task_prelim: breakdown.task_prelim,
                total: breakdown.total,
            });
        }
    }

    let log_path = out_dir.join("train_log.jsonl");
    let mut text = String::new();
    for rec in &log {
        text.push_str(&serde_json::to_string(rec)?);
        text.push('\n');
    }
    std::fs::write(&log_path, text)?;

    let ckpt_path = out_dir.join("model.icmc");
    save_checkpoint(pipeline, store, cfg, &ckpt_path)?;
    Ok(TrainReport {
        log,
        first: first.unwrap(),
        last: last.unwrap(),
        ckpt_path,
        log_path,
    })
}

/// Checkpoint layout: every non-backbone parameter (trained heads, adapters,
/// codec, decoder, BN statistics); the backbone itself only when it was
/// trainable. Frozen backbones are referenced by hash + fingerprint.
pub fn save_checkpoint(
    pipeline: &Pipeline,
    store: &ParamStore,
    cfg: &TrainConfig,
    path: &Path,
) -> Result<()> {
    let backbone_trained = !pipeline.backbone.frozen;
    let meta = serde_json::json!({
        "kind": "pipeline",
        "train_config": cfg,
        "backbone_included": backbone_trained,
        "backbone_hash": crate::ckpt::param_hash(store, crate::backbone::PREFIX),
        "backbone_fingerprint": pipeline.backbone.pretrain_fingerprint,
    });
    crate::ckpt::save_params_where(
        path,
        store,
        |name, _| backbone_trained || !name.starts_with(crate::backbone::PREFIX),
        meta,
    )
}

/// Restore a checkpoint produced by `save_checkpoint` into a freshly built
/// pipeline store (backbone weights come from the pretrained source when the
/// checkpoint does not include them).
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<serde_json::Value> {
    let loaded = crate::ckpt::load_params(path)?;
    if loaded.meta["kind"] != "pipeline" {
        return Err(IcmError::IncompatibleModel("not a pipeline checkpoint".into()));
    }
    crate::ckpt::restore_into(store, &loaded)?;
    Ok(loaded.meta)
}

/// Rebuild a trained pipeline from a training checkpoint. Modes that reuse a
/// pretrained backbone (everything except scratch) need the original backbone
/// file, since frozen backbones are not duplicated into checkpoints.
pub fn load_trained_pipeline(
    ckpt: &Path,
    backbone: Option<&Path>,
) -> Result<(Pipeline, ParamStore, TrainConfig)> {
    let pre = match backbone {
        Some(p) => Some(crate::backbone::load_backbone(p)?),
        None => None,
    };
    let pre_ref = pre.as_ref().map(|(b, s)| (b, s));

    // peek the metadata first to build the right architecture
    let loaded = crate::ckpt::load_params(ckpt)?;
    if loaded.meta["kind"] != "pipeline" {
        return Err(IcmError::IncompatibleModel("not a pipeline checkpoint".into()));
    }
    let cfg: TrainConfig = serde_json::from_value(loaded.meta["train_config"].clone())
        .map_err(|e| IcmError::IncompatibleModel(format!("bad checkpoint metadata: {e}")))?;
    if cfg.pipeline.mode != TrainMode::Scratch && pre_ref.is_none() {
        return Err(IcmError::Config(format!(
            "mode {} needs the pretrained backbone file",
            cfg.pipeline.mode.as_str()
        )));
    }
    let (pipe, mut store) = Pipeline::build(cfg.pipeline.clone(), pre_ref)?;
    load_checkpoint(&mut store, ckpt)?;
    if let Some(expect) = loaded.meta["backbone_hash"].as_str() {
        let got = crate::ckpt::param_hash(&store, crate::backbone::PREFIX);
        if got != expect {
            return Err(IcmError::IncompatibleModel(
                "backbone weights do not match the ones this model was trained with".into(),
            ));
        }
    }
    Ok((pipe, store, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, pretrain_backbone, BackboneConfig, PretextTaskConfig};
    use crate::task::TaskId;

    fn tiny_backbone_cfg() -> BackboneConfig {
        BackboneConfig {
            stage_channels: vec![8, 12, 16, 20],
            stage_depths: vec![1, 1, 1, 1],
            num_heads: 2,
            ..Default::default()
        }
    }

    fn pretrained_tiny() -> (crate::backbone::Backbone, ParamStore) {
        let (mut bb, mut store) = build_backbone(tiny_backbone_cfg(), 0).unwrap();
        let px = PretextTaskConfig { n_train: 8, n_val: 4, batch_size: 4, ..Default::default() };
        pretrain_backbone(&mut bb, &mut store, &px, 2, 0).unwrap();
        (bb, store)
    }

    fn tiny_cfg(mode: TrainMode, lambda: f64, iterations: usize, seed: u64) -> TrainConfig {
        let mut pcfg = PipelineConfig::dora(TaskId::Semseg).with_mode(mode);
        if mode == TrainMode::DoraFt {
            pcfg.adapter = Some(crate::adaptation::AdapterPlan::qkv(
                crate::adaptation::AdapterKind::Dora,
                2,
                "semseg",
            ));
        }
        pcfg.backbone = tiny_backbone_cfg();
        pcfg.seed = seed;
        let mut cfg = TrainConfig::desk_default(pcfg, lambda);
        cfg.iterations = iterations;
        cfg.n_train = 8;
        cfg.n_val = 4;
        cfg.seed = seed;
        cfg.log_interval = 1;
        cfg
    }

    #[test]
    fn poly_lr_examples_and_errors() {
        assert_eq!(poly_lr(0, 2e-5, 100, 0.9).unwrap(), 2e-5);
        assert_eq!(poly_lr(100, 2e-5, 100, 0.9).unwrap(), 0.0);
        assert!((poly_lr(50, 1.0, 100, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(poly_lr(101, 1.0, 100, 0.9), Err(IcmError::Argument(_))));
    }

    #[test]
    fn loss_composition_examples() {
        let b = LossBreakdown::compose(0.5, 2.0, 1.0, 1.0, true);
        assert_eq!(b.total, 3.5);
        assert!(b.is_consistent(1.0, true));
        let no_sup = LossBreakdown::compose(0.5, 2.0, 1.0, 1.0, false);
        assert_eq!(no_sup.total, 2.5);
        let rate_only = LossBreakdown::compose(0.5, 2.0, 1.0, 0.0, true);
        assert_eq!(rate_only.total, 0.5);
    }

    #[test]
    fn task_loss_examples() {
        let g = Graph::new();
        let scene = generate_scene(3, 16, 16, 4).unwrap();
        let scenes = [&scene];
        // semseg: near-one-hot logits at the labels -> loss near 0
        let nc = crate::synth::MAX_SHAPE_CLASSES + 1;
        let spec = TaskSpec::for_task(TaskId::Semseg, nc);
        let logits = ArrayD::from_shape_fn(IxDyn(&[1, nc, 16, 16]), |i| {
            if scene.semseg[[i[2], i[3]]] == i[1] as i64 { 20.0 } else { -20.0 }
        });
        let l = task_loss_var(&g, g.constant(logits), &scenes, &spec).unwrap();
        assert!(g.scalar_value(l) <= 1e-3);
        // depth: pred == label -> 0
        let dspec = TaskSpec::for_task(TaskId::Depth, 0);
        let d = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16, 16]), |i| scene.depth[[i[2], i[3]]]);
        let l = task_loss_var(&g, g.constant(d), &scenes, &dspec).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
        // normals: pred = -label -> 1 - (-1) = 2
        let nspec = TaskSpec::for_task(TaskId::Normal, 0);
        let n = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |i| {
            -scene.normals[[i[1], i[2], i[3]]]
        });
        let l = task_loss_var(&g, g.constant(n), &scenes, &nspec).unwrap();
        assert!((g.scalar_value(l) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = tiny_cfg(TrainMode::DoraFt, -0.5, 10, 0);
        assert!(matches!(cfg.validate(), Err(IcmError::Config(_))));
        // dora plan on a fixed-mode pipeline is a mode/flag inconsistency
        let mut pcfg = PipelineConfig::dora(TaskId::Semseg);
        pcfg.mode = TrainMode::Fixed;
        assert!(matches!(pcfg.validate(), Err(IcmError::Config(_))));
        let mut pcfg = PipelineConfig::dora(TaskId::Semseg);
        pcfg.adapter = None;
        assert!(matches!(pcfg.validate(), Err(IcmError::Config(_))));
    }

    #[test]
    fn fixed_mode_backbone_hash_unchanged_and_dora_w0_grads_zero() {
        let (bb, bstore) = pretrained_tiny();
        for mode in [TrainMode::Fixed, TrainMode::DoraFt] {
            let cfg = tiny_cfg(mode, 0.1, 3, 1);
            let (pipe, mut store) = Pipeline::build(cfg.pipeline.clone(), Some((&bb, &bstore))).unwrap();
            let before = crate::ckpt::param_hash(&store, crate::backbone::PREFIX);
            let dir = tempfile::tempdir().unwrap();
            train(&pipe, &mut store, &cfg, dir.path()).unwrap();
            assert_eq!(before, crate::ckpt::param_hash(&store, crate::backbone::PREFIX));
            // frozen leaves accumulate exactly-zero gradients
            for id in store.ids() {
                if store.name(id).starts_with("backbone.") {
                    assert!(store.grad(id).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn mode_trainable_sets_are_exact() {
        let (bb, bstore) = pretrained_tiny();
        for mode in [TrainMode::FullFt, TrainMode::DoraFt, TrainMode::Fixed, TrainMode::Scratch] {
            let cfg = tiny_cfg(mode, 0.1, 1, 2);
            let pre = if mode == TrainMode::Scratch { None } else { Some((&bb, &bstore)) };
            let (_pipe, store) = Pipeline::build(cfg.pipeline.clone(), pre).unwrap();
            let allowed = expected_trainable_prefixes(mode);
            for id in store.ids() {
                let name = store.name(id);
                let in_allowed = allowed.iter().any(|p| name.starts_with(p));
                // BN running stats are never trainable regardless of prefix
                let is_stat = name.ends_with(".rmean") || name.ends_with(".rvar");
                assert_eq!(
                    store.is_trainable(id),
                    in_allowed && !is_stat,
                    "{mode:?}: {name}"
                );
            }
        }
    }

    #[test]
    fn first_steps_are_bitwise_deterministic() {
        let (bb, bstore) = pretrained_tiny();
        let run = || {
            let cfg = tiny_cfg(TrainMode::Fixed, 0.1, 3, 7);
            let (pipe, mut store) = Pipeline::build(cfg.pipeline.clone(), Some((&bb, &bstore))).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let report = train(&pipe, &mut store, &cfg, dir.path()).unwrap();
            (
                serde_json::to_string(&report.log).unwrap(),
                crate::ckpt::param_hash(&store, ""),
            )
        };
        let (l1, h1) = run();
        let (l2, h2) = run();
        assert_eq!(l1, l2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn log_components_recompose_total() {
        let (bb, bstore) = pretrained_tiny();
        let cfg = tiny_cfg(TrainMode::DoraFt, 0.5, 3, 3);
        let (pipe, mut store) = Pipeline::build(cfg.pipeline.clone(), Some((&bb, &bstore))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = train(&pipe, &mut store, &cfg, dir.path()).unwrap();
        assert_eq!(report.log.len(), 3);
        for rec in &report.log {
            let b = LossBreakdown {
                rate_bpp: rec.rate_bpp,
                task_final: rec.task_final,
                task_prelim: rec.task_prelim,
                total: rec.total,
            };
            assert!(b.is_consistent(cfg.lambda, cfg.inter_sup));
        }
        // log file round trip
        let text = std::fs::read_to_string(&report.log_path).unwrap();
        assert_eq!(text.lines().count(), 3);
        // checkpoint excludes the frozen backbone but keeps everything else
        let loaded = crate::ckpt::load_params(&report.ckpt_path).unwrap();
        assert!(loaded.arrays.iter().all(|(n, ..)| !n.starts_with("backbone.")));
        assert!(loaded.arrays.iter().any(|(n, ..)| n.starts_with("adapter.")));
        assert!(loaded.arrays.iter().any(|(n, ..)| n.ends_with(".rmean")));
        assert_eq!(loaded.meta["backbone_included"], false);
    }
}
