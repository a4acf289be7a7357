//! Two-pass checkerboard conditional entropy model. Anchor positions
//! ((h + w) even) are coded under a per-channel learned Gaussian prior;
//! non-anchor positions under a small conv context net that reads only the
//! decoded anchors (3x3 + 3x3 convs, 5x5 receptive field).

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{IcmError, Result};
use crate::nn::layers::Conv2d;
use crate::nn::{Graph, ParamStore, Var};

use super::range::{
    build_cdf, residual_symbol, symbol_to_residual, RangeDecoder, RangeEncoder, ESCAPE_SYM,
};

pub const PREFIX: &str = "codec";
/// Lower bound on Gaussian scales so quantized CDFs stay well-conditioned.
pub const SCALE_FLOOR: f64 = 0.11;
pub const CONTEXT_HIDDEN: usize = 48;

/// softplus inverse of 1.0, so scales start near 1.
const SCALE_RAW_INIT: f64 = 0.5413248546129181;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Elementwise round (inference / coding).
    Round,
    /// Additive uniform(-0.5, 0.5) noise (training surrogate), seeded.
    Noise { seed: u64 },
}

pub struct LatentBundle {
    pub y: ArrayD<f64>,
    pub yhat: ArrayD<f64>,
    pub mode: QuantizeMode,
}

pub fn quantize(y: &ArrayD<f64>, mode: QuantizeMode) -> Result<LatentBundle> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(IcmError::Numerical("non-finite latent".into()));
    }
    let yhat = match mode {
        QuantizeMode::Round => y.mapv(f64::round),
        QuantizeMode::Noise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51AB_77F1);
            let noise = ArrayD::from_shape_fn(y.raw_dim(), |_| {
                rand::Rng::gen_range(&mut rng, -0.5..0.5)
            });
            y + &noise
        }
    };
    Ok(LatentBundle { y: y.clone(), yhat, mode })
}

pub struct DualSpatialModel {
    pub channels: usize,
    prior_mean: crate::nn::ParamId,
    prior_scale_raw: crate::nn::ParamId,
    ctx1: Conv2d,
    ctx2: Conv2d,
}

impl DualSpatialModel {
    pub fn build(channels: usize, seed: u64, store: &mut ParamStore) -> Result<DualSpatialModel> {
        if channels == 0 {
            return Err(IcmError::Config("latent channels must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE_C001);
        let prior_mean = store.add(
            &format!("{PREFIX}.prior.mean"),
            ArrayD::zeros(IxDyn(&[1, channels, 1, 1])),
            true,
        );
        let prior_scale_raw = store.add(
            &format!("{PREFIX}.prior.scale_raw"),
            ArrayD::from_elem(IxDyn(&[1, channels, 1, 1]), SCALE_RAW_INIT),
            true,
        );
        let ctx1 = Conv2d::new(store, &mut rng, &format!("{PREFIX}.ctx1"), channels, CONTEXT_HIDDEN, 3, 1, 1, 1, true, true);
        let ctx2 = Conv2d::new(store, &mut rng, &format!("{PREFIX}.ctx2"), CONTEXT_HIDDEN, 2 * channels, 3, 1, 1, 1, true, true);
        Ok(DualSpatialModel { channels, prior_mean, prior_scale_raw, ctx1, ctx2 })
    }

    /// (1, 1, H, W) mask with 1 at anchor positions ((h + w) even).
    pub fn anchor_mask(h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |idx| {
            if (idx[2] + idx[3]) % 2 == 0 { 1.0 } else { 0.0 }
        })
    }

    /// Per-element (mean, scale) graph nodes for a (N, C, H, W) latent node.
    /// Anchors use the prior; non-anchors use the context net applied to the
    /// anchor-masked latent, so causality holds by construction.
    pub fn params_var(&self, g: &Graph, store: &ParamStore, yhat: Var) -> Result<(Var, Var)> {
        let s = g.shape(yhat);
        if s.len() != 4 || s[1] != self.channels {
            return Err(IcmError::Shape(format!(
                "expected (N, {}, H, W) latent, got {s:?}",
                self.channels
            )));
        }
        let (h, w) = (s[2], s[3]);
        let mask = g.constant(Self::anchor_mask(h, w));
        let inv_mask = g.constant(Self::anchor_mask(h, w).mapv(|v| 1.0 - v));

        let prior_mean = g.param(store, self.prior_mean);
        let prior_scale = g.clamp_min(
            g.softplus(g.param(store, self.prior_scale_raw)),
            SCALE_FLOOR,
        );

        let anchors_only = g.mul(yhat, mask);
        let hmid = g.gelu(self.ctx1.forward(g, store, anchors_only));
        let ctx_out = self.ctx2.forward(g, store, hmid); // (N, 2C, H, W)
        let ctx_mean = g.slice(ctx_out, 1, 0, self.channels);
        let ctx_scale = g.clamp_min(
            g.softplus(g.slice(ctx_out, 1, self.channels, self.channels)),
            SCALE_FLOOR,
        );

        // broadcast prior over space, context over nothing; combine by mask
        let zeros = g.mul_scalar(yhat, 0.0);
        let prior_mean_b = g.add(zeros, prior_mean);
        let prior_scale_b = g.add(zeros, prior_scale);
        let mean = g.add(g.mul(prior_mean_b, mask), g.mul(ctx_mean, inv_mask));
        let scale = g.add(g.mul(prior_scale_b, mask), g.mul(ctx_scale, inv_mask));
        Ok((mean, scale))
    }

    /// Per-element likelihood in (0, 1]: integral of the Gaussian over the
    /// unit-width quantization bin around yhat.
    pub fn likelihoods_var(&self, g: &Graph, store: &ParamStore, yhat: Var) -> Result<Var> {
        let (mean, scale) = self.params_var(g, store, yhat)?;
        let centered = g.sub(yhat, mean);
        let hi = g.norm_cdf(g.div(g.add_scalar(centered, 0.5), scale));
        let lo = g.norm_cdf(g.div(g.add_scalar(centered, -0.5), scale));
        Ok(g.clamp_min(g.sub(hi, lo), 1e-12))
    }

    /// Differentiable rate estimate: sum of -log2 p over all elements divided
    /// by N * H_img * W_img.
    pub fn rate_bpp_var(
        &self,
        g: &Graph,
        store: &ParamStore,
        yhat: Var,
        image_hw: (usize, usize),
    ) -> Result<Var> {
        let p = self.likelihoods_var(g, store, yhat)?;
        let n = g.shape(yhat)[0];
        let bits = g.mul_scalar(g.sum_all(g.ln(p)), -1.0 / std::f64::consts::LN_2);
        Ok(g.mul_scalar(bits, 1.0 / (n * image_hw.0 * image_hw.1) as f64))
    }

    /// Non-graph convenience wrappers over a concrete latent array.
    pub fn likelihoods(&self, store: &ParamStore, yhat: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let g = Graph::new();
        let v = g.constant(yhat.clone());
        let p = self.likelihoods_var(&g, store, v)?;
        Ok(g.value(p))
    }

    pub fn estimate_rate_bpp(
        &self,
        store: &ParamStore,
        yhat: &ArrayD<f64>,
        image_hw: (usize, usize),
    ) -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(yhat.clone());
        let r = self.rate_bpp_var(&g, store, v, image_hw)?;
        Ok(g.scalar_value(r))
    }

    /// Coding parameters for a rounded latent: exact (mean, scale) arrays the
    /// decoder can reproduce from the anchors alone.
    fn coding_params(
        &self,
        store: &ParamStore,
        anchors_only: &ArrayD<f64>,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
        let g = Graph::new();
        let v = g.constant(anchors_only.clone());
        let (mean, scale) = self.params_var(&g, store, v)?;
        Ok((g.value(mean), g.value(scale)))
    }

    /// Entropy-code a rounded (1, C, H, W) latent. Two raster passes: anchors
    /// under the prior, then non-anchors under the context of the anchors.
    pub fn encode(&self, store: &ParamStore, yhat: &ArrayD<f64>) -> Result<Vec<u8>> {
        let s = yhat.shape().to_vec();
        if s.len() != 4 || s[0] != 1 || s[1] != self.channels {
            return Err(IcmError::Shape(format!("encode expects (1, C, H, W), got {s:?}")));
        }
        if yhat.iter().any(|v| !v.is_finite() || v.fract() != 0.0) {
            return Err(IcmError::Argument("encode requires a round-mode latent".into()));
        }
        let (h, w) = (s[2], s[3]);
        let mask = Self::anchor_mask(h, w);
        let anchors_only = yhat * &mask.broadcast(yhat.raw_dim()).unwrap();
        let (mean, scale) = self.coding_params(store, &anchors_only)?;

        let mut enc = RangeEncoder::new();
        for pass in 0..2 {
            for c in 0..self.channels {
                for y in 0..h {
                    for x in 0..w {
                        let is_anchor = (y + x) % 2 == 0;
                        if (pass == 0) != is_anchor {
                            continue;
                        }
                        let v = yhat[[0, c, y, x]] as i64;
                        let (mu, sg) = (mean[[0, c, y, x]], scale[[0, c, y, x]]);
                        let cdf = build_cdf(mu, sg);
                        let (sym, r) = residual_symbol(v, mu);
                        enc.put_symbol(&cdf, sym);
                        if sym == ESCAPE_SYM {
                            enc.put_escape(r);
                        }
                    }
                }
            }
        }
        Ok(enc.finish())
    }

    /// Inverse of `encode` for a latent of spatial size (h, w).
    pub fn decode(
        &self,
        store: &ParamStore,
        payload: &[u8],
        h: usize,
        w: usize,
    ) -> Result<ArrayD<f64>> {
        let mut dec = RangeDecoder::new(payload)?;
        let mut yhat = ArrayD::zeros(IxDyn(&[1, self.channels, h, w]));

        // pass 1: anchors under the prior
        let zeros = ArrayD::zeros(IxDyn(&[1, self.channels, h, w]));
        let (mean0, scale0) = self.coding_params(store, &zeros)?;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    if (y + x) % 2 != 0 {
                        continue;
                    }
                    let (mu, sg) = (mean0[[0, c, y, x]], scale0[[0, c, y, x]]);
                    let cdf = build_cdf(mu, sg);
                    let sym = dec.get_symbol(&cdf)?;
                    let r = if sym == ESCAPE_SYM {
                        dec.get_escape()?
                    } else {
                        symbol_to_residual(sym)
                    };
                    yhat[[0, c, y, x]] = (mu.round() as i64 + r) as f64;
                }
            }
        }

        // pass 2: non-anchors under the context of the decoded anchors
        let (mean1, scale1) = self.coding_params(store, &yhat)?;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    if (y + x) % 2 == 0 {
                        continue;
                    }
                    let (mu, sg) = (mean1[[0, c, y, x]], scale1[[0, c, y, x]]);
                    let cdf = build_cdf(mu, sg);
                    let sym = dec.get_symbol(&cdf)?;
                    let r = if sym == ESCAPE_SYM {
                        dec.get_escape()?
                    } else {
                        symbol_to_residual(sym)
                    };
                    yhat[[0, c, y, x]] = (mu.round() as i64 + r) as f64;
                }
            }
        }
        Ok(yhat)
    }

    /// Hash of all codec parameters; the quantized CDF tables are a pure
    /// function of these, so this doubles as the CDF-table hash in headers.
    pub fn cdf_hash(&self, store: &ParamStore) -> u64 {
        crate::ckpt::param_hash_u64(store, PREFIX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn toy_model(channels: usize) -> (DualSpatialModel, ParamStore) {
        let mut store = ParamStore::new();
        let m = DualSpatialModel::build(channels, 3, &mut store).unwrap();
        (m, store)
    }

    #[test]
    fn quantize_modes() {
        let y = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 3]), vec![2.4, -1.5, 3.0]).unwrap();
        let b = quantize(&y, QuantizeMode::Round).unwrap();
        assert_eq!(b.yhat.as_slice().unwrap(), &[2.0, -2.0, 3.0]);
        let n1 = quantize(&y, QuantizeMode::Noise { seed: 7 }).unwrap();
        let n2 = quantize(&y, QuantizeMode::Noise { seed: 7 }).unwrap();
        assert_eq!(n1.yhat, n2.yhat);
        for (a, b) in n1.yhat.iter().zip(y.iter()) {
            assert!((a - b).abs() < 0.5);
        }
        let bad = ArrayD::from_elem(IxDyn(&[1]), f64::NAN);
        assert!(quantize(&bad, QuantizeMode::Round).is_err());
    }

    #[test]
    fn likelihood_matches_numerical_integration_at_huge_scale() {
        // direct numerical integration of N(t; 0, sigma) over [-0.5, 0.5]
        let sigma: f64 = 1e6;
        let steps = 10_000;
        let mut integral = 0.0;
        for i in 0..steps {
            let t = -0.5 + (i as f64 + 0.5) / steps as f64;
            integral += (-t * t / (2.0 * sigma * sigma)).exp()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        }
        integral /= steps as f64;

        let (m, mut store) = toy_model(1);
        // force prior scale to sigma: softplus(raw) = sigma -> raw ~= ln(e^sigma - 1) ~ sigma
        *store.value_mut(m.prior_scale_raw) = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), sigma);
        let yhat = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
        let p = m.likelihoods(&store, &yhat).unwrap();
        let anchor_p = p[[0, 0, 0, 0]];
        let rel = (anchor_p - integral).abs() / integral;
        assert!(rel < 1e-6, "likelihood {anchor_p} vs integral {integral}");
    }

    #[test]
    fn likelihood_maximal_at_the_mean() {
        let (m, store) = toy_model(1);
        let mut best = (0i64, f64::MIN);
        for k in -10..=10 {
            let yhat = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), k as f64);
            let p = m.likelihoods(&store, &yhat).unwrap()[[0, 0, 0, 0]];
            if p > best.1 {
                best = (k, p);
            }
        }
        assert_eq!(best.0, 0); // prior mean is 0
    }

    #[test]
    fn anchors_are_causally_isolated_from_non_anchors() {
        let (m, store) = toy_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut yhat = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |_| {
            rng.gen_range(-3i64..=3) as f64
        });
        let p1 = m.likelihoods(&store, &yhat).unwrap();
        // perturb every non-anchor position
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    if (y + x) % 2 == 1 {
                        yhat[[0, c, y, x]] += 2.0;
                    }
                }
            }
        }
        let p2 = m.likelihoods(&store, &yhat).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    if (y + x) % 2 == 0 {
                        assert_eq!(p1[[0, c, y, x]], p2[[0, c, y, x]]);
                    }
                }
            }
        }
    }

    #[test]
    fn rate_closed_form_example() {
        // 256 elements each with p = 1/2 over a 64x64 image -> 0.0625 bpp.
        // Constructed directly from the rate definition.
        let bits = 256.0 * (0.5f64).log2().abs();
        assert_eq!(bits / (64.0 * 64.0), 0.0625);
        // and the model's estimate is non-negative and finite on a real latent
        let (m, store) = toy_model(3);
        let yhat = ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), 1.0);
        let bpp = m.estimate_rate_bpp(&store, &yhat, (64, 64)).unwrap();
        assert!(bpp.is_finite() && bpp > 0.0);
    }

    #[test]
    fn rate_invariant_under_consistent_channel_permutation() {
        let (m, mut store) = toy_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // distinct per-channel priors
        *store.value_mut(m.prior_mean) = ArrayD::from_shape_vec(
            IxDyn(&[1, 3, 1, 1]),
            vec![-1.0, 0.0, 2.0],
        )
        .unwrap();
        // zero the context net so only the (permutable) prior matters
        *store.value_mut(m.ctx2.w) = ArrayD::zeros(store.value(m.ctx2.w).raw_dim());
        *store.value_mut(m.ctx2.b.unwrap()) = ArrayD::zeros(IxDyn(&[6]));
        let yhat = ArrayD::from_shape_fn(IxDyn(&[1, 3, 4, 4]), |_| {
            rng.gen_range(-3i64..=3) as f64
        });
        let r1 = m.estimate_rate_bpp(&store, &yhat, (64, 64)).unwrap();
        // permute channels (0,1,2) -> (2,0,1) in both latent and prior
        let perm = [2usize, 0, 1];
        let mut y2 = yhat.clone();
        let mut mean2 = store.value(m.prior_mean).clone();
        for (dst, &src) in perm.iter().enumerate() {
            for y in 0..4 {
                for x in 0..4 {
                    y2[[0, dst, y, x]] = yhat[[0, src, y, x]];
                }
            }
            mean2[[0, dst, 0, 0]] = store.value(m.prior_mean)[[0, src, 0, 0]];
        }
        *store.value_mut(m.prior_mean) = mean2;
        let r2 = m.estimate_rate_bpp(&store, &y2, (64, 64)).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn round_trip_exact_including_escapes() {
        let (m, store) = toy_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..5 {
            let yhat = ArrayD::from_shape_fn(IxDyn(&[1, 5, 6, 6]), |_| {
                if rng.gen_bool(0.05) {
                    rng.gen_range(-5000i64..=5000) as f64 // escape territory
                } else {
                    rng.gen_range(-10i64..=10) as f64
                }
            });
            let bytes = m.encode(&store, &yhat).unwrap();
            let back = m.decode(&store, &bytes, 6, 6).unwrap();
            assert_eq!(yhat, back, "trial {trial}");
        }
    }

    #[test]
    fn encode_rejects_fractional_latents() {
        let (m, store) = toy_model(1);
        let yhat = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.5);
        assert!(m.encode(&store, &yhat).is_err());
    }

    #[test]
    fn actual_bits_close_to_estimate_on_model_samples() {
        let (m, store) = toy_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // draw from the prior (mean 0, scale ~1) so the model fits the data
        let yhat = ArrayD::from_shape_fn(IxDyn(&[1, 4, 8, 8]), |_| {
            // Box-Muller standard normal, rounded
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()).round()
        });
        let est_bits = m.estimate_rate_bpp(&store, &yhat, (128, 128)).unwrap() * 128.0 * 128.0;
        let actual_bits = (m.encode(&store, &yhat).unwrap().len() * 8) as f64;
        assert!(
            actual_bits <= est_bits * 1.02 + 64.0 * 8.0,
            "actual {actual_bits} vs estimated {est_bits}"
        );
    }

    #[test]
    fn noise_rate_gradients_match_finite_differences() {
        let (m, store) = toy_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y0 = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |_| rng.gen_range(-2.0..2.0));
        let noise = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |_| rng.gen_range(-0.5..0.5));
        let rate_of = |y: &ArrayD<f64>| -> (Graph, Var, Var) {
            let g = Graph::new();
            let yv = g.input(y.clone());
            let yhat = g.add(yv, g.constant(noise.clone()));
            let r = m.rate_bpp_var(&g, &store, yhat, (64, 64)).unwrap();
            (g, r, yv)
        };
        let (g, r, yv) = rate_of(&y0);
        let grads = g.backward(r);
        let gy = grads.get(yv).unwrap().clone();
        let h = 1e-5;
        for i in [0usize, 5, 17, 31] {
            let mut p = y0.clone();
            let mut q = y0.clone();
            p.as_slice_mut().unwrap()[i] += h;
            q.as_slice_mut().unwrap()[i] -= h;
            let (gp, rp, _) = rate_of(&p);
            let (gq, rq, _) = rate_of(&q);
            let fd = (gp.scalar_value(rp) - gq.scalar_value(rq)) / (2.0 * h);
            let an = gy.as_slice().unwrap()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "dy[{i}]: analytic {an} vs fd {fd}");
        }
        // model-parameter gradients exist and are finite
        let mut store2 = store.clone();
        g.apply_grads(&grads, &mut store2);
        let mg = store2.grad(m.prior_mean);
        assert!(mg.iter().any(|&v| v != 0.0) && mg.iter().all(|v| v.is_finite()));
    }
}
