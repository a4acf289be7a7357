//! Per-task preliminary decoders. Each task owns a small Conv-BN-GELU head
//! that turns backbone features into task features at stride 16 plus a
//! low-resolution prediction; a bicubic 16x upsampling of that prediction is
//! supervised against the full-resolution label during training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{IcmError, Result};
use crate::nn::layers::{BatchNorm2d, Conv2d};
use crate::nn::{Graph, ParamStore, Var};
use crate::task::TaskSpec;

/// Width of the task-feature maps fed to the codec, shared across tasks.
pub const TASK_FEATURE_CHANNELS: usize = 64;

/// Output stride of the backbone features / task features.
pub const FEATURE_STRIDE: usize = 16;

pub const PREFIX: &str = "prelim";

struct ConvBnGelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnGelu {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        ConvBnGelu {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), c_in, c_out, 3, 1, 1, 1, true, true),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c_out, true),
        }
    }

    fn forward(&self, g: &Graph, store: &mut ParamStore, x: Var, train: bool) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = self.bn.forward(g, store, y, train);
        g.gelu(y)
    }
}

/// Outputs of one preliminary decoder pass.
pub struct PrelimOutput {
    /// (N, TASK_FEATURE_CHANNELS, H/16, W/16), input to the codec.
    pub task_features: Var,
    /// (N, task channels, H/16, W/16) raw prediction.
    pub prelim_pred: Var,
    /// (N, task channels, H, W) bicubic 16x upsampling of `prelim_pred`.
    pub upsampled_pred: Var,
}

pub struct PrelimDecoder {
    pub spec: TaskSpec,
    unit1: ConvBnGelu,
    unit2: ConvBnGelu,
    head: Conv2d,
}

impl PrelimDecoder {
    pub fn build(
        spec: TaskSpec,
        backbone_channels: usize,
        seed: u64,
        store: &mut ParamStore,
    ) -> Result<PrelimDecoder> {
        if backbone_channels == 0 {
            return Err(IcmError::Config("backbone_channels must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E11_0001);
        let name = format!("{PREFIX}.{}", spec.id.as_str());
        let unit1 = ConvBnGelu::new(store, &mut rng, &format!("{name}.u1"), backbone_channels, TASK_FEATURE_CHANNELS);
        let unit2 = ConvBnGelu::new(store, &mut rng, &format!("{name}.u2"), TASK_FEATURE_CHANNELS, TASK_FEATURE_CHANNELS);
        let head = Conv2d::new(store, &mut rng, &format!("{name}.head"), TASK_FEATURE_CHANNELS, spec.channels, 1, 1, 0, 1, true, true);
        Ok(PrelimDecoder { spec, unit1, unit2, head })
    }

    /// `x`: (N, C_backbone, H/16, W/16) backbone features.
    pub fn forward(
        &self,
        g: &Graph,
        store: &mut ParamStore,
        x: Var,
        train: bool,
    ) -> Result<PrelimOutput> {
        let s = g.shape(x);
        if s.len() != 4 {
            return Err(IcmError::Shape(format!("expected 4-D features, got {s:?}")));
        }
        let f = self.unit1.forward(g, store, x, train);
        let task_features = self.unit2.forward(g, store, f, train);
        let prelim_pred = self.head.forward(g, store, task_features);
        let upsampled_pred = g.bicubic_up(prelim_pred, FEATURE_STRIDE);
        Ok(PrelimOutput { task_features, prelim_pred, upsampled_pred })
    }
}
