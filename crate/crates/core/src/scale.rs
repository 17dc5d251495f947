//! Fine-grained scale maps: painting training targets, the per-cell binary
//! cross-entropy and its gradient, and decoding predictions into square
//! scale proposals.
//!
//! Face sizes from `2^5` to `2^11` (at a 2048px long side) are split into
//! ten logarithmic bins per octave, so bin `b` (1-based) covers
//! `(2^(5+(b-1)/10), 2^(5+b/10)]` scaled by `i_max / 2048`.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

pub const NUM_SCALES: usize = 60;
pub const BINS_PER_OCTAVE: f64 = 10.0;
pub const NETWORK_STRIDE: usize = 2;
pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const BCE_EPSILON: f64 = 1e-7;

/// Reference long side the bin boundaries are defined against.
const REFERENCE_SIDE: f64 = 2048.0;
const MIN_LOG2_SIZE: f64 = 5.0;

/// Bin index (1-based) of a face of size `h × w` in an image whose long side
/// is `i_max`.
pub fn encode_scale_index(h: f64, w: f64, i_max: f64) -> Result<usize> {
    if !(h > 0.0 && w > 0.0 && i_max > 0.0) || !(h.is_finite() && w.is_finite() && i_max.is_finite())
    {
        return Err(Error::InvalidArgument(format!(
            "scale index needs positive sizes, got h={h} w={w} i_max={i_max}"
        )));
    }
    let raw = BINS_PER_OCTAVE * ((h.max(w) * REFERENCE_SIDE / i_max).log2() - MIN_LOG2_SIZE);
    // log2 of exact powers of two may land a hair above the integer
    let b = (raw - 1e-9).ceil();
    Ok(b.clamp(1.0, NUM_SCALES as f64) as usize)
}

/// Face size at the logarithmic midpoint of bin `b` (1-based).
pub fn bin_center_size(b: usize, i_max: f64) -> f64 {
    (MIN_LOG2_SIZE + (b as f64 - 0.5) / BINS_PER_OCTAVE).exp2() * i_max / REFERENCE_SIDE
}

/// Ground-truth face in network-input pixels; `(cx, cy)` is the box centre.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFace {
    pub cx: f64,
    pub cy: f64,
    pub h: f64,
    pub w: f64,
    pub keypoints: Option<Vec<(f64, f64)>>,
}

impl GroundTruthFace {
    pub fn new(cx: f64, cy: f64, h: f64, w: f64) -> Self {
        Self {
            cx,
            cy,
            h,
            w,
            keypoints: None,
        }
    }

    pub fn from_rect(r: &Rect) -> Self {
        let (cx, cy) = r.center();
        Self::new(cx, cy, r.height(), r.width())
    }
}

/// Per-cell, per-bin face probability volume. Stored as an `S × H' × W'`
/// tensor so it lines up with the scale head output.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMap {
    probs: Tensor,
    stride: usize,
    i_max: f64,
}

impl ScaleMap {
    pub fn new(probs: Tensor, stride: usize, i_max: f64) -> Result<Self> {
        if stride == 0 || !(i_max > 0.0) {
            return Err(Error::InvalidArgument("scale map needs stride >= 1 and i_max > 0".into()));
        }
        if let Some(v) = probs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "scale map value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            probs,
            stride,
            i_max,
        })
    }

    pub fn zeros(height: usize, width: usize, stride: usize, i_max: f64) -> Self {
        Self {
            probs: Tensor::zeros(NUM_SCALES, height, width),
            stride,
            i_max,
        }
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn i_max(&self) -> f64 {
        self.i_max
    }

    pub fn num_scales(&self) -> usize {
        self.probs.channels()
    }

    pub fn height(&self) -> usize {
        self.probs.height()
    }

    pub fn width(&self) -> usize {
        self.probs.width()
    }

    /// Value at cell `(x, y)` of bin `b` (1-based).
    pub fn get(&self, x: usize, y: usize, b: usize) -> f32 {
        self.probs.at(b - 1, y, x)
    }
}

/// Paints the training target for `faces` on an `height × width` map using
/// the default Gaussian width.
pub fn paint_target(
    faces: &[GroundTruthFace],
    height: usize,
    width: usize,
    stride: usize,
    i_max: f64,
) -> Result<ScaleMap> {
    paint_target_with_sigma(faces, height, width, stride, i_max, DEFAULT_SIGMA)
}

/// Sets each face's host cell `(⌊cx/stride⌋, ⌊cy/stride⌋)` in its bin to 1 and
/// spreads `exp(-(d/r)² / 2σ²)` over cells within distance `r = ⌊b/10⌋` in
/// the same bin. Overlaps combine by maximum; cells off the map are skipped.
pub fn paint_target_with_sigma(
    faces: &[GroundTruthFace],
    height: usize,
    width: usize,
    stride: usize,
    i_max: f64,
    sigma: f64,
) -> Result<ScaleMap> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut map = ScaleMap::zeros(height, width, stride, i_max);
    let (h, w) = (height as i64, width as i64);
    for face in faces {
        let b = encode_scale_index(face.h, face.w, i_max)?;
        let hx = (face.cx / stride as f64).floor() as i64;
        let hy = (face.cy / stride as f64).floor() as i64;
        let r = (b as f64 / BINS_PER_OCTAVE).floor() as i64;
        let mut put = |x: i64, y: i64, v: f32| {
            if x >= 0 && y >= 0 && x < w && y < h {
                let (x, y) = (x as usize, y as usize);
                let old = map.probs.at(b - 1, y, x);
                map.probs.set(b - 1, y, x, old.max(v));
            }
        };
        put(hx, hy, 1.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = (dx * dx + dy * dy) as f64;
                if (dx, dy) == (0, 0) || d2 > (r * r) as f64 {
                    continue;
                }
                let v = (-(d2 / (r * r) as f64) / (2.0 * sigma * sigma)).exp();
                put(hx + dx, hy + dy, v as f32);
            }
        }
    }
    Ok(map)
}

/// Mean binary cross-entropy over all cells. Predictions are clamped to
/// `[ε, 1-ε]`, so a target of exactly 0 or 1 never meets `log 0`.
pub fn scale_bce_loss<F: Float>(pred: &[F], target: &[F]) -> Result<F> {
    check_len(pred, target)?;
    let eps = F::from(BCE_EPSILON).unwrap();
    let one = F::one();
    let mut sum = F::zero();
    for (&q, &p) in pred.iter().zip(target) {
        let q = q.max(eps).min(one - eps);
        if p > F::zero() {
            sum = sum + p * q.ln();
        }
        if p < one {
            sum = sum + (one - p) * (one - q).ln();
        }
    }
    Ok(-sum / F::from(pred.len()).unwrap())
}

/// `∂L/∂pred` of [`scale_bce_loss`]; zero where the clamp is active.
pub fn scale_bce_loss_grad<F: Float>(pred: &[F], target: &[F]) -> Result<Vec<F>> {
    check_len(pred, target)?;
    let eps = F::from(BCE_EPSILON).unwrap();
    let one = F::one();
    let n = F::from(pred.len()).unwrap();
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&q, &p)| {
            if q < eps || q > one - eps {
                F::zero()
            } else {
                -(p / q - (one - p) / (one - q)) / n
            }
        })
        .collect())
}

fn check_len<F>(pred: &[F], target: &[F]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} cells, target has {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Loss between two maps of identical shape, evaluated in double precision.
pub fn scale_map_loss(pred: &ScaleMap, target: &ScaleMap) -> Result<f64> {
    if pred.probs.dims() != target.probs.dims() {
        return Err(Error::Shape(format!(
            "scale maps differ: {:?} vs {:?}",
            pred.probs.dims(),
            target.probs.dims()
        )));
    }
    let p: Vec<f64> = pred.probs.data().iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = target.probs.data().iter().map(|&v| v as f64).collect();
    scale_bce_loss(&p, &t)
}

/// Square face candidate in heatmap coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleProposal {
    pub rect: Rect,
    /// Map value the proposal was decoded from.
    pub score: f64,
    /// Face size in network-input pixels.
    pub scale: f64,
    pub cell: (usize, usize),
    /// 1-based bin index.
    pub bin: usize,
}

/// Every cell at or above `threshold` becomes a square of side
/// `size / stride` centred on the cell centre, clipped to the map. Output is
/// sorted by score, descending; ties keep bin-major, row-major scan order.
pub fn decode_proposals(map: &ScaleMap, threshold: f64) -> Result<Vec<ScaleProposal>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "decode threshold must be in (0, 1], got {threshold}"
        )));
    }
    let (hh, ww) = (map.height(), map.width());
    let stride = map.stride as f64;
    let mut out = Vec::new();
    for bi in 0..map.num_scales() {
        let side = bin_center_size(bi + 1, map.i_max) / stride;
        for (idx, &v) in map.probs.plane(bi).iter().enumerate() {
            if (v as f64) < threshold {
                continue;
            }
            let (y, x) = (idx / ww, idx % ww);
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let rect = Rect::new(
                (cx - side / 2.0).max(0.0),
                (cy - side / 2.0).max(0.0),
                (cx + side / 2.0).min(ww as f64),
                (cy + side / 2.0).min(hh as f64),
            );
            out.push(ScaleProposal {
                rect,
                score: v as f64,
                scale: side * stride,
                cell: (x, y),
                bin: bi + 1,
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}
