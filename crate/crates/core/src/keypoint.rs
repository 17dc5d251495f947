//! Scale-adaptive soft-argmax.
//!
//! Each proposal restricts a softmax over one landmark channel to the
//! heatmap pixels it covers; the keypoint is the expected pixel offset from
//! the proposal's top-left corner, normalized by the proposal size. All of it
//! is differentiable, and the analytic gradients live next to the forward
//! maps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

/// Raw landmark logits, `K × H × W`, in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkHeatmap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LandmarkHeatmap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "heatmap data of length {} does not fit {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("heatmap contains non-finite logits".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims();
        Self::new(c, h, w, t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

/// `K` keypoints normalized to a proposal, each coordinate in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet(pub Vec<(f64, f64)>);

impl KeypointSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if let Some(p) = points
            .iter()
            .find(|p| !(0.0..=1.0).contains(&p.0) || !(0.0..=1.0).contains(&p.1))
        {
            return Err(Error::InvalidArgument(format!(
                "normalized keypoint {p:?} outside [0, 1]²"
            )));
        }
        Ok(Self(points))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.0
    }
}

/// A decoded face in network-input (or image) pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub rect: Rect,
    pub keypoints: Vec<(f64, f64)>,
    pub score: f64,
}

/// The integer pixels a proposal covers: `⌈x1⌉..=⌊x2⌋ × ⌈y1⌉..=⌊y2⌋`,
/// clipped to the heatmap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelWindow {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    origin: (f64, f64),
    extent: (f64, f64),
}

impl PixelWindow {
    pub fn new(rect: &Rect, height: usize, width: usize) -> Result<Self> {
        let (w, h) = (rect.width(), rect.height());
        if !(w > 0.0) {
            return Err(Error::ZeroExtent("width"));
        }
        if !(h > 0.0) {
            return Err(Error::ZeroExtent("height"));
        }
        let lo_x = rect.x1.ceil().max(0.0);
        let lo_y = rect.y1.ceil().max(0.0);
        let hi_x = rect.x2.floor().min(width as f64 - 1.0);
        let hi_y = rect.y2.floor().min(height as f64 - 1.0);
        if lo_x > hi_x || lo_y > hi_y {
            return Err(Error::EmptyWindow);
        }
        Ok(Self {
            x0: lo_x as usize,
            x1: hi_x as usize,
            y0: lo_y as usize,
            y1: hi_y as usize,
            origin: (rect.x1, rect.y1),
            extent: (w, h),
        })
    }

    pub fn cols(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn rows(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.cols() * self.rows()
    }

    /// Normalized x offset of column `i`; 0 when the offset falls outside
    /// `[0, w]`.
    #[inline]
    fn ux(&self, i: usize) -> f64 {
        clipped_offset(i as f64 - self.origin.0, self.extent.0) / self.extent.0
    }

    #[inline]
    fn uy(&self, j: usize) -> f64 {
        clipped_offset(j as f64 - self.origin.1, self.extent.1) / self.extent.1
    }
}

#[inline]
fn clipped_offset(x: f64, limit: f64) -> f64 {
    if (0.0..=limit).contains(&x) {
        x
    } else {
        0.0
    }
}

/// Softmax restricted to a window, stored window-local (row-major).
struct WindowSoftmax {
    window: PixelWindow,
    probs: Vec<f64>,
}

impl WindowSoftmax {
    fn compute(h: &LandmarkHeatmap, rect: &Rect, c: usize) -> Result<Self> {
        if c >= h.channels {
            return Err(Error::InvalidArgument(format!(
                "channel {c} out of range for {} landmark channels",
                h.channels
            )));
        }
        let window = PixelWindow::new(rect, h.height, h.width)?;
        let plane = h.plane(c);
        let rows = || (window.y0..=window.y1).map(|y| &plane[y * h.width + window.x0..=y * h.width + window.x1]);
        let max = rows().flatten().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut probs = Vec::with_capacity(window.area());
        let mut sum = 0.0;
        for &v in rows().flatten() {
            let e = (v - max).exp();
            sum += e;
            probs.push(e);
        }
        for p in &mut probs {
            *p /= sum;
        }
        Ok(Self { window, probs })
    }

    fn expectation(&self) -> (f64, f64) {
        let w = &self.window;
        let (mut ex, mut ey) = (0.0, 0.0);
        for (r, row) in self.probs.chunks(w.cols()).enumerate() {
            let uy = w.uy(w.y0 + r);
            for (col, &p) in row.iter().enumerate() {
                ex += w.ux(w.x0 + col) * p;
                ey += uy * p;
            }
        }
        (ex, ey)
    }

    fn max(&self) -> f64 {
        self.probs.iter().fold(0.0, |m, &p| m.max(p))
    }

    /// Window-local gradient of `gx·Ψx + gy·Ψy` with respect to the logits.
    fn expectation_grad(&self, (gx, gy): (f64, f64)) -> Vec<f64> {
        let w = &self.window;
        let (ex, ey) = self.expectation();
        let mut out = Vec::with_capacity(self.probs.len());
        for (r, row) in self.probs.chunks(w.cols()).enumerate() {
            let dy = gy * (w.uy(w.y0 + r) - ey);
            for (col, &p) in row.iter().enumerate() {
                out.push(p * (gx * (w.ux(w.x0 + col) - ex) + dy));
            }
        }
        out
    }

    fn scatter(&self, local: &[f64], height: usize, width: usize) -> Vec<f64> {
        let w = &self.window;
        let mut full = vec![0.0; height * width];
        for (r, row) in local.chunks(w.cols()).enumerate() {
            let start = (w.y0 + r) * width + w.x0;
            full[start..start + row.len()].copy_from_slice(row);
        }
        full
    }
}

/// Softmax of channel `c` over the proposal's pixels, as a full `H × W`
/// plane that is exactly zero outside the proposal.
pub fn masked_softmax(h: &LandmarkHeatmap, rect: &Rect, c: usize) -> Result<Vec<f64>> {
    let sm = WindowSoftmax::compute(h, rect, c)?;
    Ok(sm.scatter(&sm.probs, h.height, h.width))
}

/// Expected normalized position `(Ψx, Ψy) ∈ [0, 1]²` of channel `c` inside
/// the proposal.
pub fn soft_argmax(h: &LandmarkHeatmap, rect: &Rect, c: usize) -> Result<(f64, f64)> {
    Ok(WindowSoftmax::compute(h, rect, c)?.expectation())
}

/// Gradient of `gx·Ψx + gy·Ψy` with respect to every logit of `h`
/// (`K × H × W`; nonzero only in channel `c` inside the proposal).
pub fn soft_argmax_grad(
    h: &LandmarkHeatmap,
    rect: &Rect,
    c: usize,
    upstream: (f64, f64),
) -> Result<Vec<f64>> {
    let sm = WindowSoftmax::compute(h, rect, c)?;
    let plane = sm.scatter(&sm.expectation_grad(upstream), h.height, h.width);
    let mut full = vec![0.0; h.data.len()];
    let n = h.plane_len();
    full[c * n..(c + 1) * n].copy_from_slice(&plane);
    Ok(full)
}

/// `1/(2K) Σ ||Ψc − Gc||²`
pub fn keypoint_loss(pred: &KeypointSet, gt: &KeypointSet) -> Result<f64> {
    check_k(pred, gt)?;
    let k = pred.len() as f64;
    Ok(pred
        .0
        .iter()
        .zip(&gt.0)
        .map(|(p, g)| (p.0 - g.0).powi(2) + (p.1 - g.1).powi(2))
        .sum::<f64>()
        / (2.0 * k))
}

pub fn keypoint_loss_grad(pred: &KeypointSet, gt: &KeypointSet) -> Result<Vec<(f64, f64)>> {
    check_k(pred, gt)?;
    let k = pred.len() as f64;
    Ok(pred
        .0
        .iter()
        .zip(&gt.0)
        .map(|(p, g)| ((p.0 - g.0) / k, (p.1 - g.1) / k))
        .collect())
}

fn check_k(pred: &KeypointSet, gt: &KeypointSet) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "keypoint counts differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Number of leading channels (left eye, right eye, nose) whose softmax peak
/// adds to the proposal score.
pub const SCORING_CHANNELS: usize = 3;

/// `p_s` plus the peak masked-softmax probability of each scoring channel.
pub fn detection_score(p_s: f64, h: &LandmarkHeatmap, rect: &Rect) -> Result<f64> {
    if h.channels < SCORING_CHANNELS {
        return Err(Error::InvalidArgument(format!(
            "detection score needs >= {SCORING_CHANNELS} landmark channels, got {}",
            h.channels
        )));
    }
    let mut score = p_s;
    for c in 0..SCORING_CHANNELS {
        score += WindowSoftmax::compute(h, rect, c)?.max();
    }
    Ok(score)
}

/// Keypoints and score of one proposal, read in a single pass per channel.
pub fn decode_keypoints(h: &LandmarkHeatmap, rect: &Rect, p_s: f64) -> Result<(KeypointSet, f64)> {
    let mut points = Vec::with_capacity(h.channels);
    let mut score = p_s;
    for c in 0..h.channels {
        let sm = WindowSoftmax::compute(h, rect, c)?;
        points.push(sm.expectation());
        if c < SCORING_CHANNELS {
            score += sm.max();
        }
    }
    Ok((KeypointSet(points), score))
}

/// Maps normalized keypoints back to continuous heatmap coordinates, where
/// cell `i` spans `[i, i + 1)`: the expected cell index is
/// `x1 + Ψx·w`, and its centre sits half a cell further.
pub fn denormalize(kps: &KeypointSet, rect: &Rect) -> Vec<(f64, f64)> {
    kps.0
        .iter()
        .map(|&(px, py)| {
            (
                rect.x1 + px * rect.width() + 0.5,
                rect.y1 + py * rect.height() + 0.5,
            )
        })
        .collect()
}

/// Update rule used by [`fit_heatmap_to_keypoints`]. Implementations turn
/// the 2×A Jacobian of one channel's keypoint (rows `∂Ψx/∂h`, `∂Ψy/∂h`) and
/// the residual `Ψ − G` into a descent direction on the logits.
pub trait LogitStepper: Send + Sync {
    fn name(&self) -> &'static str;

    fn direction(&self, jac_x: &[f64], jac_y: &[f64], residual: (f64, f64), k: usize) -> Vec<f64>;
}

/// Plain gradient of the keypoint loss.
#[derive(Debug, Default)]
pub struct GradientDescent;

impl LogitStepper for GradientDescent {
    fn name(&self) -> &'static str {
        "gradient-descent"
    }

    fn direction(&self, jac_x: &[f64], jac_y: &[f64], (rx, ry): (f64, f64), k: usize) -> Vec<f64> {
        let k = k as f64;
        jac_x
            .iter()
            .zip(jac_y)
            .map(|(jx, jy)| (rx * jx + ry * jy) / k)
            .collect()
    }
}

/// Minimum-norm Gauss-Newton step `Jᵀ(JJᵀ + λI)⁻¹ r`: the gradient
/// direction preconditioned by the 2×2 output-space curvature, so a unit
/// learning rate removes the linearized residual in one step.
#[derive(Debug)]
pub struct GaussNewton {
    pub damping: f64,
}

impl Default for GaussNewton {
    fn default() -> Self {
        Self { damping: 1e-12 }
    }
}

impl LogitStepper for GaussNewton {
    fn name(&self) -> &'static str {
        "gauss-newton"
    }

    fn direction(&self, jac_x: &[f64], jac_y: &[f64], (rx, ry): (f64, f64), _k: usize) -> Vec<f64> {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (a, b, d) = (dot(jac_x, jac_x), dot(jac_x, jac_y), dot(jac_y, jac_y));
        let lambda = self.damping * (a + d).max(f64::MIN_POSITIVE);
        let (a, d) = (a + lambda, d + lambda);
        let det = a * d - b * b;
        if !(det > 0.0) {
            return vec![0.0; jac_x.len()];
        }
        let cx = (d * rx - b * ry) / det;
        let cy = (a * ry - b * rx) / det;
        jac_x.iter().zip(jac_y).map(|(jx, jy)| cx * jx + cy * jy).collect()
    }
}

/// Name → stepper lookup for the fitting demo.
pub struct StepperRegistry {
    entries: BTreeMap<&'static str, Box<dyn LogitStepper>>,
}

impl StepperRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(GaussNewton::default()));
        r.register(Box::new(GradientDescent));
        r
    }

    pub fn register(&mut self, stepper: Box<dyn LogitStepper>) {
        self.entries.insert(stepper.name(), stepper);
    }

    pub fn get(&self, name: &str) -> Result<&dyn LogitStepper> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "stepper",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

pub const DEFAULT_STEPPER: &str = "gauss-newton";

/// Steps before the divergence check starts counting.
const DIVERGENCE_PATIENCE: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub loss: f64,
    pub keypoints: KeypointSet,
    /// Loss before each step, plus the final loss.
    pub losses: Vec<f64>,
}

/// Fits zero-initialized logits so that the soft-argmax of each channel over
/// `rect` lands on `gt`, with the default stepper.
pub fn fit_heatmap_to_keypoints(
    gt: &KeypointSet,
    rect: &Rect,
    steps: usize,
    lr: f64,
) -> Result<FitOutcome> {
    fit_heatmap_with(gt, rect, steps, lr, &GaussNewton::default())
}

pub fn fit_heatmap_with(
    gt: &KeypointSet,
    rect: &Rect,
    steps: usize,
    lr: f64,
    stepper: &dyn LogitStepper,
) -> Result<FitOutcome> {
    if gt.is_empty() {
        return Err(Error::InvalidArgument("no keypoints to fit".into()));
    }
    if let Some(p) = gt.0.iter().find(|p| !(p.0 > 0.0 && p.0 < 1.0 && p.1 > 0.0 && p.1 < 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "fit targets must lie strictly inside (0, 1)², got {p:?}"
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    let height = rect.y2.floor().max(0.0) as usize + 1;
    let width = rect.x2.floor().max(0.0) as usize + 1;
    let k = gt.len();
    let mut h = LandmarkHeatmap::zeros(k, height, width);
    let mut losses = Vec::with_capacity(steps + 1);
    let mut rising = 0;

    let mut pred = current_keypoints(&h, rect)?;
    losses.push(keypoint_loss(&pred, gt)?);
    for step in 0..steps {
        let grads = keypoint_loss_grad(&pred, gt)?;
        for (c, (&p, &g)) in pred.0.iter().zip(&gt.0).enumerate() {
            let sm = WindowSoftmax::compute(&h, rect, c)?;
            let jx = sm.expectation_grad((1.0, 0.0));
            let jy = sm.expectation_grad((0.0, 1.0));
            debug_assert!((grads[c].0 - (p.0 - g.0) / k as f64).abs() < 1e-15);
            let dir = stepper.direction(&jx, &jy, (p.0 - g.0, p.1 - g.1), k);
            let w = sm.window;
            for (r, row) in dir.chunks(w.cols()).enumerate() {
                for (col, d) in row.iter().enumerate() {
                    let (y, x) = (w.y0 + r, w.x0 + col);
                    let v = h.at(c, y, x) - lr * d;
                    h.set(c, y, x, v);
                }
            }
        }
        pred = current_keypoints(&h, rect)?;
        let loss = keypoint_loss(&pred, gt)?;
        rising = if loss > *losses.last().unwrap() { rising + 1 } else { 0 };
        losses.push(loss);
        if rising >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged {
                step: step + 1,
                consecutive: rising,
            });
        }
    }
    Ok(FitOutcome {
        loss: *losses.last().unwrap(),
        keypoints: pred,
        losses,
    })
}

fn current_keypoints(h: &LandmarkHeatmap, rect: &Rect) -> Result<KeypointSet> {
    (0..h.channels)
        .map(|c| soft_argmax(h, rect, c))
        .collect::<Result<Vec<_>>>()
        .map(KeypointSet)
}
