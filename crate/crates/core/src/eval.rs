//! Validation-set evaluation and rate-accuracy sweeps: one trained model per
//! lambda, evaluated into RD points (bits per pixel vs task metric).

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{IcmError, Result};
use crate::metrics;
use crate::nn::ParamStore;
use crate::pipeline::{batch_images, Pipeline};
use crate::synth::{generate_scene, make_split, SyntheticScene};
use crate::task::MetricKind;
use crate::training::{train, TrainConfig, TrainReport};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub higher_is_better: bool,
    pub bpp_est: f64,
    pub bpp_actual: f64,
    pub n_images: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Round-mode evaluation over a set of scenes: task metric plus estimated and
/// actual (entropy-coded) bits per pixel, averaged over images.
pub fn evaluate_pipeline(
    pipeline: &Pipeline,
    store: &mut ParamStore,
    scenes: &[SyntheticScene],
) -> Result<EvalSummary> {
    if scenes.is_empty() {
        return Err(IcmError::Argument("evaluation needs at least one scene".into()));
    }
    let (h, w) = (scenes[0].semseg.shape()[0], scenes[0].semseg.shape()[1]);
    let mut bpp_est_sum = 0.0;
    let mut bpp_actual_sum = 0.0;
    let mut preds_i: Vec<ArrayD<i64>> = Vec::new();
    let mut labels_i: Vec<ArrayD<i64>> = Vec::new();
    let mut preds_f: Vec<ArrayD<f64>> = Vec::new();
    let mut labels_f: Vec<ArrayD<f64>> = Vec::new();
    let mut masks_f: Vec<ArrayD<f64>> = Vec::new();

    for scene in scenes {
        let images = batch_images(&[scene]);
        let yhat = pipeline.rounded_latent(store, &images)?;
        bpp_est_sum += pipeline.codec.estimate_rate_bpp(store, &yhat, (h, w))?;
        let payload = pipeline.codec.encode(store, &yhat)?;
        bpp_actual_sum += (payload.len() * 8) as f64 / (h * w) as f64;
        let pred = pipeline.predict_from_latent(store, &yhat)?; // (1, ch, H, W)

        match pipeline.spec.metric {
            MetricKind::Miou => {
                let nc = pipeline.spec.num_classes;
                let cls = ArrayD::from_shape_fn(IxDyn(&[h, w]), |i| {
                    let mut best = (0usize, f64::MIN);
                    for c in 0..nc {
                        let v = pred[[0, c, i[0], i[1]]];
                        if v > best.1 {
                            best = (c, v);
                        }
                    }
                    best.0 as i64
                });
                preds_i.push(cls);
                labels_i.push(scene.semseg.clone());
            }
            MetricKind::Rmse => {
                let p = ArrayD::from_shape_fn(IxDyn(&[h, w]), |i| pred[[0, 0, i[0], i[1]]]);
                preds_f.push(p);
                labels_f.push(scene.depth.clone());
                masks_f.push(ArrayD::from_elem(IxDyn(&[h, w]), 1.0));
            }
            MetricKind::MeanAngularError => {
                let p = ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |i| {
                    pred[[0, i[0], i[1], i[2]]]
                });
                preds_f.push(p);
                labels_f.push(scene.normals.clone());
            }
            MetricKind::MaxF | MetricKind::OdsF => {
                let p = ArrayD::from_shape_fn(IxDyn(&[h, w]), |i| {
                    sigmoid(pred[[0, 0, i[0], i[1]]])
                });
                preds_f.push(p);
                labels_f.push(match pipeline.spec.metric {
                    MetricKind::OdsF => scene.boundary.clone(),
                    _ => scene.saliency.clone(),
                });
            }
        }
    }

    let value = match pipeline.spec.metric {
        MetricKind::Miou => metrics::miou(&preds_i, &labels_i, pipeline.spec.num_classes)?,
        MetricKind::Rmse => metrics::rmse(&preds_f, &labels_f, &masks_f)?,
        MetricKind::MeanAngularError => metrics::mean_angular_error(&preds_f, &labels_f)?,
        MetricKind::MaxF => metrics::max_f_measure(&preds_f, &labels_f)?,
        MetricKind::OdsF => metrics::ods_f_measure(&preds_f, &labels_f, 1)?,
    };
    let n = scenes.len();
    Ok(EvalSummary {
        task: pipeline.spec.id.as_str().to_string(),
        metric: pipeline.spec.metric.as_str().to_string(),
        value,
        higher_is_better: pipeline.spec.metric.higher_is_better(),
        bpp_est: bpp_est_sum / n as f64,
        bpp_actual: bpp_actual_sum / n as f64,
        n_images: n,
    })
}

/// Validation scenes for a training config.
pub fn val_scenes(cfg: &TrainConfig) -> Result<Vec<SyntheticScene>> {
    let split = make_split(cfg.n_train, cfg.n_val, cfg.seed)?;
    split
        .val
        .iter()
        .map(|r| generate_scene(r.seed, cfg.image_size.0, cfg.image_size.1, cfg.k_shapes))
        .collect()
}

/// One row of the rate-accuracy table. CSV column order is fixed:
/// lambda,bpp_est,bpp_actual,metric,task,mode,seed
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RDPoint {
    pub lambda: f64,
    pub bpp_est: f64,
    pub bpp_actual: f64,
    pub metric: f64,
    pub task: String,
    pub mode: String,
    pub seed: u64,
}

pub const RDPOINT_CSV_HEADER: &str = "lambda,bpp_est,bpp_actual,metric,task,mode,seed";

pub fn rd_points_to_csv(points: &[RDPoint]) -> String {
    let mut out = String::from(RDPOINT_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.lambda, p.bpp_est, p.bpp_actual, p.metric, p.task, p.mode, p.seed
        ));
    }
    out
}

pub fn rd_points_from_csv(text: &str) -> Result<Vec<RDPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RDPOINT_CSV_HEADER => {}
        _ => return Err(IcmError::Data("bad RD CSV header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(IcmError::Data(format!("bad RD CSV row {}", i + 2)));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| IcmError::Data(format!("bad number '{s}' in RD CSV row {}", i + 2)))
        };
        out.push(RDPoint {
            lambda: num(f[0])?,
            bpp_est: num(f[1])?,
            bpp_actual: num(f[2])?,
            metric: num(f[3])?,
            task: f[4].to_string(),
            mode: f[5].to_string(),
            seed: f[6]
                .trim()
                .parse::<u64>()
                .map_err(|_| IcmError::Data(format!("bad seed in RD CSV row {}", i + 2)))?,
        });
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(IcmError::Argument("spearman needs two equal-length series, n >= 2".into()));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(IcmError::Numerical("constant series in spearman".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

pub struct SweepOutcome {
    pub points: Vec<RDPoint>,
    pub reports: Vec<TrainReport>,
    /// Spearman rho between lambda and mean bpp_actual, if computable.
    pub spearman_lambda_bpp: Option<f64>,
}

/// Train one model per lambda (sharing the pretrained backbone) and evaluate
/// each on the validation split.
pub fn run_sweep(
    base_cfg: &TrainConfig,
    lambdas: &[f64],
    pretrained: Option<(&crate::backbone::Backbone, &ParamStore)>,
    out_dir: &Path,
) -> Result<SweepOutcome> {
    if lambdas.len() < 2 {
        return Err(IcmError::Config("sweep needs at least two lambda values".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    // one independent training run per lambda, in parallel
    let results: Vec<Result<(RDPoint, TrainReport)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = lambdas
            .iter()
            .enumerate()
            .map(|(li, &lambda)| {
                scope.spawn(move || -> Result<(RDPoint, TrainReport)> {
                    let mut cfg = base_cfg.clone();
                    cfg.lambda = lambda;
                    let (pipe, mut store) = Pipeline::build(cfg.pipeline.clone(), pretrained)?;
                    let run_dir = out_dir.join(format!("lambda_{li}"));
                    let report = train(&pipe, &mut store, &cfg, &run_dir)?;
                    let scenes = val_scenes(&cfg)?;
                    let summary = evaluate_pipeline(&pipe, &mut store, &scenes)?;
                    let point = RDPoint {
                        lambda,
                        bpp_est: summary.bpp_est,
                        bpp_actual: summary.bpp_actual,
                        metric: summary.value,
                        task: summary.task,
                        mode: cfg.pipeline.mode.as_str().to_string(),
                        seed: cfg.seed,
                    };
                    Ok((point, report))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(IcmError::Numerical("sweep worker panicked".into()))))
            .collect()
    });
    let mut points = Vec::new();
    let mut reports = Vec::new();
    for r in results {
        let (p, rep) = r?;
        points.push(p);
        reports.push(rep);
    }
    let ls: Vec<f64> = points.iter().map(|p| p.lambda).collect();
    let bs: Vec<f64> = points.iter().map(|p| p.bpp_actual).collect();
    let rho = spearman(&ls, &bs).ok();
    std::fs::write(out_dir.join("rd_points.csv"), rd_points_to_csv(&points))?;
    std::fs::write(
        out_dir.join("rd_points.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "points": points,
            "spearman_lambda_bpp": rho,
            "entropy_model": "checkerboard dual-spatial (anchor prior + conv context)",
        }))?,
    )?;
    Ok(SweepOutcome { points, reports, spearman_lambda_bpp: rho })
}
