//! Boxes, IoU, greedy NMS and keypoints-to-box inference.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Axis-aligned rectangle `[x1, y1, x2, y2]` with continuous coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// A scored box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub rect: Rect,
    pub score: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Self {
        Self {
            rect: Rect::new(x1, y1, x2, y2),
            score,
        }
    }
}

pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Priority order shared by NMS and its callers: score descending, then
/// `x1`, then `y1` ascending.
pub fn priority_cmp(a: &BBox, b: &BBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.rect.x1.total_cmp(&b.rect.x1))
        .then(a.rect.y1.total_cmp(&b.rect.y1))
}

/// Greedy hard suppression: keep the best remaining box, drop everything
/// whose IoU with it exceeds `iou_threshold`, repeat.
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    nms_indices(boxes, iou_threshold)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}

/// Indices of the boxes [`nms`] keeps, in output order.
pub fn nms_indices(boxes: &[BBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| priority_cmp(&boxes[i], &boxes[j]));
    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[pos] {
            continue;
        }
        kept.push(i);
        for (later, &j) in order.iter().enumerate().skip(pos + 1) {
            if !suppressed[later] && iou(&boxes[i].rect, &boxes[j].rect) > iou_threshold {
                suppressed[later] = true;
            }
        }
    }
    kept
}

/// Canonical five-point face layout in the unit square, in channel order:
/// left eye, right eye, nose, left mouth corner, right mouth corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceTemplate {
    pub points: [(f64, f64); 5],
}

impl Default for FaceTemplate {
    fn default() -> Self {
        Self {
            points: [(0.30, 0.40), (0.70, 0.40), (0.50, 0.62), (0.34, 0.80), (0.66, 0.80)],
        }
    }
}

impl FaceTemplate {
    /// Builds a template from ten floats `[x0, y0, x1, y1, ...]`.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != 10 {
            return Err(Error::InvalidArgument(format!(
                "face template needs 10 values, got {}",
                values.len()
            )));
        }
        let mut points = [(0.0, 0.0); 5];
        for (p, xy) in points.iter_mut().zip(values.chunks(2)) {
            *p = (xy[0], xy[1]);
        }
        let t = Self { points };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for &(x, y) in &self.points {
            if !(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "template point ({x}, {y}) outside the open unit square"
                )));
            }
        }
        let (l, r) = (self.points[0], self.points[1]);
        if (l.0 + r.0 - 1.0).abs() > 1e-9 || (l.1 - r.1).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "template eyes must be mirror images about x = 0.5".into(),
            ));
        }
        Ok(())
    }
}

/// `p ↦ [[a, -b], [b, a]] p + t`: rotation, uniform scale and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.a * x - self.b * y + self.tx,
            self.b * x + self.a * y + self.ty,
        )
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    /// Least-squares fit mapping `src[i]` onto `dst[i]`.
    pub fn fit(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Self> {
        if src.len() != dst.len() || src.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "similarity fit needs matching point lists of length >= 2, got {} and {}",
                src.len(),
                dst.len()
            )));
        }
        let n = src.len() as f64;
        let mean = |pts: &[(f64, f64)]| {
            let (sx, sy) = pts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
            (sx / n, sy / n)
        };
        let (ms, md) = (mean(src), mean(dst));
        let (mut num_a, mut num_b, mut den) = (0.0, 0.0, 0.0);
        for (s, d) in src.iter().zip(dst) {
            let (sx, sy) = (s.0 - ms.0, s.1 - ms.1);
            let (dx, dy) = (d.0 - md.0, d.1 - md.1);
            num_a += sx * dx + sy * dy;
            num_b += sx * dy - sy * dx;
            den += sx * sx + sy * sy;
        }
        if den <= f64::EPSILON {
            return Err(Error::DegenerateKeypoints("source points coincide".into()));
        }
        let (a, b) = (num_a / den, num_b / den);
        Ok(Self {
            a,
            b,
            tx: md.0 - (a * ms.0 - b * ms.1),
            ty: md.1 - (b * ms.0 + a * ms.1),
        })
    }
}

/// Fits the template onto five image-space keypoints and returns the
/// bounding rectangle of the mapped unit square.
pub fn keypoints_to_box(keypoints: &[(f64, f64)], template: &FaceTemplate) -> Result<Rect> {
    if keypoints.len() != 5 {
        return Err(Error::InvalidArgument(format!(
            "box inference needs 5 keypoints, got {}",
            keypoints.len()
        )));
    }
    if keypoints.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::DegenerateKeypoints("non-finite coordinate".into()));
    }
    check_not_collinear(keypoints)?;
    let sim = Similarity::fit(&template.points, keypoints)?;
    let corners = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)].map(|c| sim.apply(c));
    let (mut x1, mut y1) = (f64::INFINITY, f64::INFINITY);
    let (mut x2, mut y2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        x1 = x1.min(x);
        y1 = y1.min(y);
        x2 = x2.max(x);
        y2 = y2.max(y);
    }
    let rect = Rect::new(x1, y1, x2, y2);
    if !rect.is_valid() {
        return Err(Error::DegenerateKeypoints("fitted box has zero extent".into()));
    }
    Ok(rect)
}

/// Rejects point sets whose scatter matrix is rank-deficient (all points on
/// one line, including all-coincident).
fn check_not_collinear(pts: &[(f64, f64)]) -> Result<()> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = (p.0 - mx, p.1 - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let trace = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    // det / trace² is scale-free: 1/4 for isotropic scatter, 0 on a line
    if trace <= 0.0 || det <= 1e-9 * trace * trace {
        return Err(Error::DegenerateKeypoints("keypoints are collinear".into()));
    }
    Ok(())
}
