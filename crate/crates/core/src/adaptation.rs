//! Weight-decomposed (DoRA) and plain (LoRA) low-rank adapters: the frozen
//! base weight W0 is reparametrized as W' = m * (W0 + BA) / ||W0 + BA||_c,
//! with the magnitude row-vector m and the low-rank factors B, A trainable.

use ndarray::{Array2, ArrayD, Ix2, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::backbone::{AdapterHook, Backbone};
use crate::error::{IcmError, Result};
use crate::nn::{Graph, ParamId, ParamStore, Var};

/// Epsilon added inside the column norm during training for
/// differentiability. Explicit merge uses exact arithmetic and errors on a
/// zero column instead.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Dora,
    Lora,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Query,
    Key,
    Value,
    UpProj,
    DownProj,
}

impl Target {
    pub const ALL: [Target; 5] = [
        Target::Query,
        Target::Key,
        Target::Value,
        Target::UpProj,
        Target::DownProj,
    ];

    /// Suffix used in block projection keys ("s0.b0.q" etc).
    pub fn key_suffix(&self) -> &'static str {
        match self {
            Target::Query => "q",
            Target::Key => "k",
            Target::Value => "v",
            Target::UpProj => "up",
            Target::DownProj => "down",
        }
    }

    pub fn parse(s: &str) -> Result<Target> {
        match s {
            "query" | "q" => Ok(Target::Query),
            "key" | "k" => Ok(Target::Key),
            "value" | "v" => Ok(Target::Value),
            "up_proj" | "up" => Ok(Target::UpProj),
            "down_proj" | "down" => Ok(Target::DownProj),
            other => Err(IcmError::Config(format!("unknown adapter target: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterPlan {
    pub kind: AdapterKind,
    pub rank: usize,
    pub targets: Vec<Target>,
    pub task: String,
    /// Propagate gradients through the column norm (DoRA only).
    #[serde(default = "default_true")]
    pub grad_through_norm: bool,
}

fn default_true() -> bool {
    true
}

impl AdapterPlan {
    pub fn qkv(kind: AdapterKind, rank: usize, task: &str) -> AdapterPlan {
        AdapterPlan {
            kind,
            rank,
            targets: vec![Target::Query, Target::Key, Target::Value],
            task: task.to_string(),
            grad_through_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(IcmError::Config("adapter plan has no targets".into()));
        }
        if self.rank == 0 {
            return Err(IcmError::Config("adapter rank must be >= 1".into()));
        }
        Ok(())
    }
}

// ---- standalone matrix forms (exact arithmetic, used by merge and tests) ----

/// Euclidean norm of each column: entry j is ||M[:, j]||.
pub fn column_norms(m: &Array2<f64>) -> Array2<f64> {
    let k = m.ncols();
    let mut out = Array2::zeros((1, k));
    for j in 0..k {
        out[[0, j]] = m.column(j).dot(&m.column(j)).sqrt();
    }
    out
}

/// One adapted projection in explicit matrix form.
#[derive(Debug, Clone)]
pub struct DoRAAdapter {
    pub w0: Array2<f64>,
    pub m: Array2<f64>, // (1, k)
    pub b: Array2<f64>, // (d, r)
    pub a: Array2<f64>, // (r, k)
    pub rank: usize,
}

impl DoRAAdapter {
    /// Identity initialization: m = ||W0||_c, B = 0, A small random.
    pub fn init(w0: Array2<f64>, rank: usize, rng: &mut ChaCha8Rng) -> DoRAAdapter {
        let (d, k) = w0.dim();
        let m = column_norms(&w0);
        let b = Array2::zeros((d, rank));
        let bound = (1.0 / d as f64).sqrt();
        let a = Array2::from_shape_fn((rank, k), |_| rng.gen_range(-bound..bound));
        DoRAAdapter { w0, m, b, a, rank }
    }

    /// W' = m * (W0 + BA) / ||W0 + BA||_c, exact; errors on a zero column.
    pub fn effective_weight(&self) -> Result<Array2<f64>> {
        let dir = &self.w0 + &self.b.dot(&self.a);
        let norms = column_norms(&dir);
        for (j, &n) in norms.row(0).iter().enumerate() {
            if n == 0.0 {
                return Err(IcmError::Singularity(format!("column {j} of W0 + BA is zero")));
            }
        }
        let mut out = dir;
        for j in 0..out.ncols() {
            let s = self.m[[0, j]] / norms[[0, j]];
            out.column_mut(j).mapv_inplace(|v| v * s);
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.w0.nrows() {
            return Err(IcmError::Shape(format!(
                "dora_forward: x has {} cols, W0 has {} rows",
                x.ncols(),
                self.w0.nrows()
            )));
        }
        Ok(x.dot(&self.effective_weight()?))
    }

    /// Deployment merge: a plain linear layer with this weight reproduces the
    /// adapted layer exactly.
    pub fn merge(&self) -> Result<Array2<f64>> {
        self.effective_weight()
    }
}

#[derive(Debug, Clone)]
pub struct LoRAAdapter {
    pub w0: Array2<f64>,
    pub b: Array2<f64>,
    pub a: Array2<f64>,
    pub rank: usize,
    pub scaling: f64,
}

impl LoRAAdapter {
    pub fn init(w0: Array2<f64>, rank: usize, rng: &mut ChaCha8Rng) -> LoRAAdapter {
        let (d, k) = w0.dim();
        let b = Array2::zeros((d, rank));
        let bound = (1.0 / d as f64).sqrt();
        let a = Array2::from_shape_fn((rank, k), |_| rng.gen_range(-bound..bound));
        LoRAAdapter { w0, b, a, rank, scaling: 1.0 }
    }

    pub fn effective_weight(&self) -> Array2<f64> {
        &self.w0 + &(self.b.dot(&self.a) * self.scaling)
    }
}

// ---- graph composition (training path) ----

/// DoRA effective weight as a differentiable graph expression.
/// `w0` must be a constant leaf (frozen); gradients flow to m, b, a only.
pub fn dora_effective_weight_var(
    g: &Graph,
    w0: Var,
    m: Var,
    b: Var,
    a: Var,
    grad_through_norm: bool,
) -> Var {
    let dir = g.add(w0, g.matmul(b, a));
    let sq = g.mul(dir, dir);
    let ss = g.sum_axes(sq, &[0]); // (1, k)
    let mut norm = g.sqrt(g.add_scalar(ss, NORM_EPS));
    if !grad_through_norm {
        norm = g.detach(norm);
    }
    let unit = g.div(dir, norm);
    g.mul(unit, m)
}

pub fn lora_effective_weight_var(g: &Graph, w0: Var, b: Var, a: Var, scaling: f64) -> Var {
    g.add(w0, g.mul_scalar(g.matmul(b, a), scaling))
}

// ---- injection into the backbone ----

#[derive(Debug, Clone)]
struct AdapterParams {
    m: Option<ParamId>,
    b: ParamId,
    a: ParamId,
}

/// The set of adapters injected into one backbone for one task.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub plan: AdapterPlan,
    entries: HashMap<String, AdapterParams>,
}

pub const PREFIX: &str = "adapter";

/// Wrap every targeted projection of every block. The backbone must be
/// frozen; adapter parameters are the only trainable additions.
pub fn inject_adapters(
    backbone: &Backbone,
    plan: &AdapterPlan,
    seed: u64,
    store: &mut ParamStore,
) -> Result<AdapterSet> {
    plan.validate()?;
    if !backbone.frozen {
        return Err(IcmError::Config("inject_adapters requires a frozen backbone".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAD_A901);
    let mut entries = HashMap::new();
    for blocks in &backbone.stages {
        for block in blocks {
            for target in &plan.targets {
                let lin = match target {
                    Target::Query => &block.q,
                    Target::Key => &block.k,
                    Target::Value => &block.v,
                    Target::UpProj => &block.up,
                    Target::DownProj => &block.down,
                };
                let w0 = store
                    .value(lin.w)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .map_err(|_| IcmError::Shape("projection weight must be 2-D".into()))?
                    .to_owned();
                let (d, k) = w0.dim();
                let key = format!("{}.{}", block.key, target.key_suffix());
                let name = format!("{PREFIX}.{key}");
                let bound = (1.0 / d as f64).sqrt();
                let a = ArrayD::from_shape_fn(IxDyn(&[plan.rank, k]), |_| {
                    rng.gen_range(-bound..bound)
                });
                let b = ArrayD::zeros(IxDyn(&[d, plan.rank]));
                let m = match plan.kind {
                    AdapterKind::Dora => {
                        let norms = column_norms(&w0).into_dyn();
                        Some(store.add(&format!("{name}.m"), norms, true))
                    }
                    AdapterKind::Lora => None,
                };
                let b = store.add(&format!("{name}.b"), b, true);
                let a = store.add(&format!("{name}.a"), a, true);
                entries.insert(key, AdapterParams { m, b, a });
            }
        }
    }
    Ok(AdapterSet { plan: plan.clone(), entries })
}

impl AdapterHook for AdapterSet {
    fn effective_weight(
        &self,
        g: &Graph,
        store: &ParamStore,
        key: &str,
        base: ParamId,
    ) -> Option<Var> {
        let entry = self.entries.get(key)?;
        let w0 = g.param(store, base); // frozen -> constant leaf
        let b = g.param(store, entry.b);
        let a = g.param(store, entry.a);
        Some(match self.plan.kind {
            AdapterKind::Dora => {
                let m = g.param(store, entry.m.unwrap());
                dora_effective_weight_var(g, w0, m, b, a, self.plan.grad_through_norm)
            }
            AdapterKind::Lora => lora_effective_weight_var(g, w0, b, a, 1.0),
        })
    }
}

impl AdapterSet {
    /// Closed-form trainable count: per adapted projection k + r(d+k) for
    /// DoRA, r(d+k) for LoRA.
    pub fn closed_form_param_count(&self, backbone: &Backbone) -> usize {
        let mut total = 0;
        for blocks in &backbone.stages {
            for block in blocks {
                let dim = block.dim;
                for target in &self.plan.targets {
                    let (d, k) = match target {
                        Target::Query | Target::Key | Target::Value => (dim, dim),
                        Target::UpProj => (dim, 4 * dim),
                        Target::DownProj => (4 * dim, dim),
                    };
                    total += self.plan.rank * (d + k);
                    if self.plan.kind == AdapterKind::Dora {
                        total += k;
                    }
                }
            }
        }
        total
    }
}

/// (trainable adapter params) / (total backbone base params).
pub fn adapter_param_fraction(store: &ParamStore) -> f64 {
    let adapter = store.count_where(|name, trainable| name.starts_with(PREFIX) && trainable);
    let base = store.count_where(|name, _| name.starts_with(crate::backbone::PREFIX));
    if base == 0 {
        return 0.0;
    }
    adapter as f64 / base as f64
}
