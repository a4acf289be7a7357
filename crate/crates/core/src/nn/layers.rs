use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::store::{ParamId, ParamStore};

pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

/// x: (T, d_in) tokens; weight stored (d_in, d_out), bias (1, d_out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            kaiming_uniform(rng, &[d_in, d_out], d_in),
            trainable,
        );
        let b = bias.then(|| store.add(&format!("{name}.b"), zeros(&[1, d_out]), trainable));
        Linear { w, b }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => g.add(y, g.param(store, b)),
            None => y,
        }
    }

    /// Forward with an explicit weight Var (used by adapter-wrapped projections).
    pub fn forward_with_weight(&self, g: &Graph, store: &ParamStore, x: Var, w: Var) -> Var {
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => g.add(y, g.param(store, b)),
            None => y,
        }
    }
}

/// LayerNorm over the last axis of (T, C) tokens.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), ones(&[1, dim]), trainable);
        let beta = store.add(&format!("{name}.beta"), zeros(&[1, dim]), trainable);
        LayerNorm { gamma, beta, eps: 1e-6 }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let nd = g.shape(x).len();
        let mean = g.mean_axes(x, &[nd - 1]);
        let centered = g.sub(x, mean);
        let var = g.mean_axes(g.mul(centered, centered), &[nd - 1]);
        let std = g.sqrt(g.add_scalar(var, self.eps));
        let norm = g.div(centered, std);
        let scaled = g.mul(norm, g.param(store, self.gamma));
        g.add(scaled, g.param(store, self.beta))
    }
}

/// 2-D convolution layer, weight (C_out, C_in/groups, kh, kw).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
        trainable: bool,
    ) -> Self {
        let fan_in = (c_in / groups) * k * k;
        let w = store.add(
            &format!("{name}.w"),
            kaiming_uniform(rng, &[c_out, c_in / groups, k, k], fan_in),
            trainable,
        );
        let b = bias.then(|| store.add(&format!("{name}.b"), zeros(&[c_out]), trainable));
        Conv2d { w, b, stride, pad, groups }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }
}

/// BatchNorm over (N, C, H, W) with running statistics.
/// Running stats live in the store as non-trainable params so they checkpoint.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, trainable: bool) -> Self {
        BatchNorm2d {
            gamma: store.add(&format!("{name}.gamma"), ones(&[1, c, 1, 1]), trainable),
            beta: store.add(&format!("{name}.beta"), zeros(&[1, c, 1, 1]), trainable),
            running_mean: store.add(&format!("{name}.rmean"), zeros(&[1, c, 1, 1]), false),
            running_var: store.add(&format!("{name}.rvar"), ones(&[1, c, 1, 1]), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &Graph, store: &mut ParamStore, x: Var, train: bool) -> Var {
        let (mean, var) = if train {
            let mean = g.mean_axes(x, &[0, 2, 3]);
            let centered = g.sub(x, mean);
            let var = g.mean_axes(g.mul(centered, centered), &[0, 2, 3]);
            // update running stats outside the graph
            let mv = g.value(mean);
            let vv = g.value(var);
            let m = self.momentum;
            {
                let rm = store.value_mut(self.running_mean);
                *rm = &*rm * (1.0 - m) + &mv * m;
            }
            {
                let rv = store.value_mut(self.running_var);
                *rv = &*rv * (1.0 - m) + &vv * m;
            }
            (mean, var)
        } else {
            (
                g.constant(store.value(self.running_mean).clone()),
                g.constant(store.value(self.running_var).clone()),
            )
        };
        let centered = g.sub(x, mean);
        let std = g.sqrt(g.add_scalar(var, self.eps));
        let norm = g.div(centered, std);
        let scaled = g.mul(norm, g.param(store, self.gamma));
        g.add(scaled, g.param(store, self.beta))
    }
}

/// Slice sample `n` of an (N, C, H, W) map into (H*W, C) tokens.
pub fn sample_to_tokens(g: &Graph, x: Var, n: usize) -> Var {
    let s = g.shape(x);
    let (c, h, w) = (s[1], s[2], s[3]);
    let xs = g.slice(x, 0, n, 1); // (1, C, H, W)
    let flat = g.reshape(xs, &[c, h * w]);
    g.transpose(flat) // (HW, C)
}

/// (H*W, C) tokens back to a (1, C, H, W) map.
pub fn tokens_to_sample(g: &Graph, t: Var, c: usize, h: usize, w: usize) -> Var {
    let tt = g.transpose(t); // (C, HW)
    g.reshape(tt, &[1, c, h, w])
}
