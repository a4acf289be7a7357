//! Deterministic synthetic multi-task scenes: layered geometric primitives
//! with mutually consistent labels for all five tasks.

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};

pub const MAX_SHAPE_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Disc,
    Rect,
    Triangle,
    Ellipse,
}

impl ShapeKind {
    fn from_class(c: usize) -> ShapeKind {
        match c {
            0 => ShapeKind::Disc,
            1 => ShapeKind::Rect,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Ellipse,
        }
    }
}

#[derive(Debug, Clone)]
struct Primitive {
    kind: ShapeKind,
    class: usize, // semantic class, 1-based (0 is background)
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    // triangle vertices when kind == Triangle
    verts: [(f64, f64); 3],
    // depth plane: d(x, y) = d0 + sx * x + sy * y (x, y in pixels)
    d0: f64,
    sx: f64,
    sy: f64,
    phase: f64,
}

impl Primitive {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self.kind {
            ShapeKind::Disc => {
                let dx = x - self.cx;
                let dy = y - self.cy;
                dx * dx + dy * dy <= self.ax * self.ax
            }
            ShapeKind::Ellipse => {
                let dx = (x - self.cx) / self.ax;
                let dy = (y - self.cy) / self.ay;
                dx * dx + dy * dy <= 1.0
            }
            ShapeKind::Rect => {
                (x - self.cx).abs() <= self.ax && (y - self.cy).abs() <= self.ay
            }
            ShapeKind::Triangle => {
                let [a, b, c] = self.verts;
                let sign = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
                    (p.0 - r.0) * (q.1 - r.1) - (q.0 - r.0) * (p.1 - r.1)
                };
                let d1 = sign((x, y), a, b);
                let d2 = sign((x, y), b, c);
                let d3 = sign((x, y), c, a);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }

    fn depth(&self, x: f64, y: f64) -> f64 {
        self.d0 + self.sx * x + self.sy * y
    }

    fn normal(&self) -> [f64; 3] {
        // surface z = d0 + sx*x + sy*y, outward normal toward the camera
        let n = [-self.sx, -self.sy, 1.0];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        [n[0] / len, n[1] / len, n[2] / len]
    }
}

/// One rendered scene with all five labels.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: ArrayD<f64>,    // (3, H, W) in [0, 1]
    pub semseg: ArrayD<i64>,   // (H, W), 0 = background
    pub depth: ArrayD<f64>,    // (H, W)
    pub normals: ArrayD<f64>,  // (3, H, W), unit vectors
    pub boundary: ArrayD<f64>, // (H, W), {0, 1}
    pub saliency: ArrayD<f64>, // (H, W), {0, 1}
    pub scene_id: u64,
    pub seed: u64,
}

const CLASS_COLORS: [[f64; 3]; 5] = [
    [0.20, 0.25, 0.30], // background
    [0.85, 0.30, 0.25], // disc
    [0.25, 0.70, 0.35], // rect
    [0.30, 0.40, 0.85], // triangle
    [0.80, 0.75, 0.25], // ellipse
];

pub fn generate_scene(seed: u64, h: usize, w: usize, k_shapes: usize) -> Result<SyntheticScene> {
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(IcmError::Shape(format!(
            "scene dims must be positive multiples of 16, got {h}x{w}"
        )));
    }
    if k_shapes == 0 || k_shapes > MAX_SHAPE_CLASSES {
        return Err(IcmError::Argument(format!(
            "k_shapes must be in 1..={MAX_SHAPE_CLASSES}, got {k_shapes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_prims = rng.gen_range(2..=6usize);
    let max_slope = 0.6 / h.max(w) as f64;

    // background plane
    let bg_sx = rng.gen_range(-max_slope..max_slope);
    let bg_sy = rng.gen_range(-max_slope..max_slope);
    let bg_d0 = 4.0;

    let mut prims = Vec::with_capacity(n_prims);
    for i in 0..n_prims {
        let class = rng.gen_range(0..k_shapes);
        let kind = ShapeKind::from_class(class);
        let cx = rng.gen_range(0.15 * w as f64..0.85 * w as f64);
        let cy = rng.gen_range(0.15 * h as f64..0.85 * h as f64);
        let ax = rng.gen_range(0.08 * w as f64..0.28 * w as f64);
        let ay = rng.gen_range(0.08 * h as f64..0.28 * h as f64);
        let mut verts = [(0.0, 0.0); 3];
        if kind == ShapeKind::Triangle {
            for v in verts.iter_mut() {
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = rng.gen_range(0.5..1.0);
                *v = (cx + ax * r * ang.cos(), cy + ay * r * ang.sin());
            }
        }
        // later layers are strictly nearer so depth agrees with paint order
        let d0 = 3.2 - 0.4 * i as f64 + rng.gen_range(0.0..0.1);
        let sx = rng.gen_range(-max_slope..max_slope);
        let sy = rng.gen_range(-max_slope..max_slope);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        prims.push(Primitive { kind, class: class + 1, cx, cy, ax, ay, verts, d0, sx, sy, phase });
    }

    render(seed, h, w, bg_d0, bg_sx, bg_sy, &prims, &mut rng)
}

/// A single flat frontal rectangle on a flat background (used by tests for the
/// analytic-normal contract).
pub fn flat_rect_scene(seed: u64, h: usize, w: usize) -> Result<SyntheticScene> {
    if h % 16 != 0 || w % 16 != 0 {
        return Err(IcmError::Shape("dims must be multiples of 16".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prim = Primitive {
        kind: ShapeKind::Rect,
        class: 2,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        ax: w as f64 * 0.25,
        ay: h as f64 * 0.25,
        verts: [(0.0, 0.0); 3],
        d0: 2.0,
        sx: 0.0,
        sy: 0.0,
        phase: 0.0,
    };
    render(seed, h, w, 4.0, 0.0, 0.0, &[prim], &mut rng)
}

#[allow(clippy::too_many_arguments)]
fn render(
    seed: u64,
    h: usize,
    w: usize,
    bg_d0: f64,
    bg_sx: f64,
    bg_sy: f64,
    prims: &[Primitive],
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticScene> {
    let mut image = ArrayD::zeros(IxDyn(&[3, h, w]));
    let mut semseg = ArrayD::zeros(IxDyn(&[h, w]));
    let mut depth = ArrayD::zeros(IxDyn(&[h, w]));
    let mut normals = ArrayD::zeros(IxDyn(&[3, h, w]));
    let mut saliency = ArrayD::zeros(IxDyn(&[h, w]));
    let mut top = vec![usize::MAX; h * w];

    let bg_normal = {
        let n = [-bg_sx, -bg_sy, 1.0];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        [n[0] / len, n[1] / len, n[2] / len]
    };

    for y in 0..h {
        for x in 0..w {
            let xf = x as f64;
            let yf = y as f64;
            let mut cls = 0usize;
            let mut d = bg_d0 + bg_sx * xf + bg_sy * yf;
            let mut nrm = bg_normal;
            let mut phase = 0.0;
            for (i, p) in prims.iter().enumerate() {
                if p.contains(xf, yf) {
                    cls = p.class;
                    d = p.depth(xf, yf);
                    nrm = p.normal();
                    top[y * w + x] = i;
                    phase = p.phase;
                }
            }
            semseg[[y, x]] = cls as i64;
            depth[[y, x]] = d;
            for c in 0..3 {
                normals[[c, y, x]] = nrm[c];
            }
            // class texture: base color, stripes, shading by depth
            let base = CLASS_COLORS[cls.min(4)];
            let stripes = 0.12 * ((xf * 0.55 + yf * 0.3 + phase).sin());
            let shade = 1.0 - 0.06 * (d - 2.0);
            let noise = rng.gen_range(-0.02..0.02);
            for c in 0..3 {
                image[[c, y, x]] = (base[c] * shade + stripes + noise).clamp(0.0, 1.0);
            }
        }
    }

    // boundary: 4-neighborhood label transitions
    let mut boundary = ArrayD::zeros(IxDyn(&[h, w]));
    for y in 0..h {
        for x in 0..w {
            let l = semseg[[y, x]];
            let mut edge = false;
            if x + 1 < w && semseg[[y, x + 1]] != l {
                edge = true;
            }
            if y + 1 < h && semseg[[y + 1, x]] != l {
                edge = true;
            }
            if x > 0 && semseg[[y, x - 1]] != l {
                edge = true;
            }
            if y > 0 && semseg[[y - 1, x]] != l {
                edge = true;
            }
            if edge {
                boundary[[y, x]] = 1.0;
            }
        }
    }

    // saliency: visible pixels of the largest visible primitive
    if !prims.is_empty() {
        let mut counts = vec![0usize; prims.len()];
        for &t in &top {
            if t != usize::MAX {
                counts[t] += 1;
            }
        }
        if let Some((best, &cnt)) = counts.iter().enumerate().max_by_key(|(_, &c)| c) {
            if cnt > 0 {
                for y in 0..h {
                    for x in 0..w {
                        if top[y * w + x] == best {
                            saliency[[y, x]] = 1.0;
                        }
                    }
                }
            }
        }
    }

    Ok(SyntheticScene {
        image,
        semseg,
        depth,
        normals,
        boundary,
        saliency,
        scene_id: seed,
        seed,
    })
}

// ---- splits ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SceneRef {
    pub scene_id: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<SceneRef>,
    pub val: Vec<SceneRef>,
}

/// Disjoint train/val manifests derived from one split seed.
pub fn make_split(n_train: usize, n_val: usize, seed: u64) -> Result<SplitManifest> {
    if n_train == 0 || n_val == 0 {
        return Err(IcmError::Argument("split sizes must be >= 1".into()));
    }
    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mk = |i: u64| SceneRef { scene_id: i, seed: base.wrapping_add(i) };
    let train = (0..n_train as u64).map(mk).collect();
    let val = (n_train as u64..(n_train + n_val) as u64).map(mk).collect();
    Ok(SplitManifest { train, val })
}

impl SplitManifest {
    /// JSON-lines serialization: one record per scene with its split tag.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (tag, refs) in [("train", &self.train), ("val", &self.val)] {
            for r in refs {
                out.push_str(&format!(
                    "{{\"split\":\"{tag}\",\"scene_id\":{},\"seed\":{}}}\n",
                    r.scene_id, r.seed
                ));
            }
        }
        out
    }
}
