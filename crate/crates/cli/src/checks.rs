//! Randomized invariant checks against independent oracles (finite
//! differences, brute force, planted ground truth). Shared by `selftest` and
//! the acceptance suite.

use std::time::{Duration, Instant};

use facekp::geometry::{iou, nms_indices, priority_cmp, BBox, FaceTemplate, Rect};
use facekp::keypoint::{
    fit_heatmap_to_keypoints, keypoint_loss, keypoint_loss_grad, masked_softmax, soft_argmax,
    soft_argmax_grad, KeypointSet, LandmarkHeatmap,
};
use facekp::pipeline::{decode_heads, DecodeConfig};
use facekp::scale::{
    decode_proposals, paint_target, scale_bce_loss, scale_bce_loss_grad, GroundTruthFace,
    NETWORK_STRIDE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::synthetic::{planted_heads, three_face_scene};

const FD_STEP: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, 1e-6)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_heatmap(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize, spread: f64) -> LandmarkHeatmap {
    let data = (0..k * h * w).map(|_| rng.gen_range(-spread..spread)).collect();
    LandmarkHeatmap::new(k, h, w, data).expect("sizes agree")
}

/// Random proposal inside an `h × w` map covering at least one whole pixel.
fn random_rect(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Rect {
    loop {
        let x1 = rng.gen_range(-1.0..w as f64 - 1.0);
        let y1 = rng.gen_range(-1.0..h as f64 - 1.0);
        let x2 = x1 + rng.gen_range(0.5..w as f64);
        let y2 = y1 + rng.gen_range(0.5..h as f64);
        let r = Rect::new(x1.max(0.0), y1.max(0.0), x2.min(w as f64), y2.min(h as f64));
        if r.x1.ceil() <= r.x2.floor() && r.y1.ceil() <= r.y2.floor() && r.width() > 0.0 && r.height() > 0.0 {
            return r;
        }
    }
}

/// Worst relative error of `soft_argmax_grad` against central differences of
/// `gx·Ψx + gy·Ψy`, over every logit of every instance.
pub fn soft_argmax_grad_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (h, w) = (rng.gen_range(2..7), rng.gen_range(2..7));
        let mut hm = random_heatmap(&mut rng, 2, h, w, 3.0);
        let rect = random_rect(&mut rng, h, w);
        let c = rng.gen_range(0..2);
        let up = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let f = |hm: &LandmarkHeatmap| {
            let (px, py) = soft_argmax(hm, &rect, c).expect("valid proposal");
            up.0 * px + up.1 * py
        };
        let g = soft_argmax_grad(&hm, &rect, c, up).expect("valid proposal");
        for i in 0..g.len() {
            let orig = hm.data()[i];
            hm.data_mut()[i] = orig + FD_STEP;
            let hi = f(&hm);
            hm.data_mut()[i] = orig - FD_STEP;
            let lo = f(&hm);
            hm.data_mut()[i] = orig;
            worst = worst.max(rel_err(g[i], (hi - lo) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn coord(p: &mut KeypointSet, i: usize, axis: usize) -> &mut f64 {
    if axis == 0 {
        &mut p.0[i].0
    } else {
        &mut p.0[i].1
    }
}

/// Worst relative error of `keypoint_loss_grad` against central differences.
pub fn keypoint_loss_grad_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let k = if rng.gen_bool(0.5) { 5 } else { 19 };
        let mut pts = || KeypointSet((0..k).map(|_| (rng.gen(), rng.gen())).collect());
        let (mut pred, gt) = (pts(), pts());
        let g = keypoint_loss_grad(&pred, &gt).expect("same k");
        for i in 0..k {
            for axis in 0..2 {
                let orig = *coord(&mut pred, i, axis);
                *coord(&mut pred, i, axis) = orig + FD_STEP;
                let hi = keypoint_loss(&pred, &gt).expect("same k");
                *coord(&mut pred, i, axis) = orig - FD_STEP;
                let lo = keypoint_loss(&pred, &gt).expect("same k");
                *coord(&mut pred, i, axis) = orig;
                let analytic = if axis == 0 { g[i].0 } else { g[i].1 };
                worst = worst.max(rel_err(analytic, (hi - lo) / (2.0 * FD_STEP)));
            }
        }
    }
    worst
}

/// Worst relative error of `scale_bce_loss_grad` against central differences,
/// with predictions kept clear of the clamp.
pub fn scale_loss_grad_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.gen_range(1..40);
        let mut pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let target: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        let g = scale_bce_loss_grad(&pred, &target).expect("same length");
        for i in 0..n {
            let orig = pred[i];
            // the loss curves like 1/q near the ends, so the step shrinks there
            let step = 1e-4 * orig.min(1.0 - orig);
            pred[i] = orig + step;
            let hi = scale_bce_loss(&pred, &target).expect("same length");
            pred[i] = orig - step;
            let lo = scale_bce_loss(&pred, &target).expect("same length");
            pred[i] = orig;
            worst = worst.max(rel_err(g[i], (hi - lo) / (2.0 * step)));
        }
    }
    worst
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoftmaxStats {
    pub instances: usize,
    /// Largest `|ΣΦ − 1|` inside the proposal.
    pub max_sum_error: f64,
    /// Largest `|Φ|` outside the proposal; the contract is exact zero.
    pub max_outside: f64,
    pub psi_out_of_range: usize,
    /// Change in Ψ when a constant is added to every logit.
    pub max_shift_error: f64,
    /// Change in Ψ when logits and proposal move together by whole pixels.
    pub max_translation_error: f64,
}

pub fn softmax_contract(instances: usize, seed: u64) -> SoftmaxStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SoftmaxStats {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let hm = random_heatmap(&mut rng, 1, h, w, 20.0);
        let rect = random_rect(&mut rng, h, w);
        let phi = masked_softmax(&hm, &rect, 0).expect("valid proposal");
        let (xs, ys) = (rect.x1.ceil() as usize, rect.y1.ceil() as usize);
        let (xe, ye) = (rect.x2.floor() as usize, rect.y2.floor() as usize);
        let (xe, ye) = (xe.min(w - 1), ye.min(h - 1));
        let mut inside = 0.0;
        for y in 0..h {
            for x in 0..w {
                let v = phi[y * w + x];
                if (xs..=xe).contains(&x) && (ys..=ye).contains(&y) {
                    inside += v;
                } else {
                    s.max_outside = s.max_outside.max(v.abs());
                }
            }
        }
        s.max_sum_error = s.max_sum_error.max((inside - 1.0).abs());

        let psi = soft_argmax(&hm, &rect, 0).expect("valid proposal");
        if !((0.0..=1.0).contains(&psi.0) && (0.0..=1.0).contains(&psi.1)) {
            s.psi_out_of_range += 1;
        }

        let shift = rng.gen_range(-50.0..50.0);
        let shifted = LandmarkHeatmap::new(1, h, w, hm.data().iter().map(|v| v + shift).collect())
            .expect("sizes agree");
        let p2 = soft_argmax(&shifted, &rect, 0).expect("valid proposal");
        s.max_shift_error = s.max_shift_error.max((p2.0 - psi.0).abs().max((p2.1 - psi.1).abs()));

        let (dx, dy) = (rng.gen_range(0..5), rng.gen_range(0..5));
        let mut moved = LandmarkHeatmap::zeros(1, h + dy, w + dx);
        for y in 0..h {
            for x in 0..w {
                moved.set(0, y + dy, x + dx, hm.at(0, y, x));
            }
        }
        let r2 = Rect::new(rect.x1 + dx as f64, rect.y1 + dy as f64, rect.x2 + dx as f64, rect.y2 + dy as f64);
        let p3 = soft_argmax(&moved, &r2, 0).expect("valid proposal");
        s.max_translation_error = s
            .max_translation_error
            .max((p3.0 - psi.0).abs().max((p3.1 - psi.1).abs()));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundtripStats {
    pub faces: usize,
    /// Smallest and largest decoded-size / true-size ratio seen.
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub host_mismatches: usize,
    /// Faces that did not decode to exactly one proposal.
    pub count_mismatches: usize,
}

/// Paints one random face per trial and decodes at 0.99.
pub fn scale_roundtrip(faces: usize, seed: u64) -> RoundtripStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = RoundtripStats {
        faces,
        min_ratio: f64::INFINITY,
        max_ratio: 0.0,
        host_mismatches: 0,
        count_mismatches: 0,
    };
    let stride = NETWORK_STRIDE;
    for _ in 0..faces {
        let i_max = rng.gen_range(64.0..2048.0f64);
        // sizes covering bins 1..=60 without clamping
        let long = (i_max / 64.0) * rng.gen_range(0.0005..6.0f64).exp2();
        let aspect = rng.gen_range(0.5..1.0);
        let (fh, fw) = if rng.gen_bool(0.5) { (long, long * aspect) } else { (long * aspect, long) };
        let side = (i_max / stride as f64).ceil() as usize;
        let cx = rng.gen_range(0.0..i_max);
        let cy = rng.gen_range(0.0..i_max);
        let face = GroundTruthFace::new(cx, cy, fh, fw);
        let map = paint_target(&[face], side, side, stride, i_max).expect("valid face");
        let props = decode_proposals(&map, 0.99).expect("valid threshold");
        if props.len() != 1 {
            s.count_mismatches += 1;
            continue;
        }
        let p = props[0];
        let ratio = p.scale / long;
        s.min_ratio = s.min_ratio.min(ratio);
        s.max_ratio = s.max_ratio.max(ratio);
        let host = ((cx / stride as f64).floor() as usize, (cy / stride as f64).floor() as usize);
        if p.cell != host {
            s.host_mismatches += 1;
        }
    }
    s
}

/// Reference suppression written from the definition: walking boxes in
/// priority order, a box survives iff it overlaps no earlier survivor by
/// more than `t`.
pub fn brute_force_nms(boxes: &[BBox], t: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| priority_cmp(&boxes[i], &boxes[j]));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&boxes[k].rect, &boxes[i].rect) <= t) {
            kept.push(i);
        }
    }
    kept
}

pub fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let x1 = rng.gen_range(0.0..50.0f64).round();
            let y1 = rng.gen_range(0.0..50.0f64).round();
            let w = rng.gen_range(1.0..30.0f64).round();
            let h = rng.gen_range(1.0..30.0f64).round();
            // coarse scores so ties are common
            let score = (rng.gen_range(0.0..1.0f64) * 10.0).round() / 10.0;
            BBox::new(x1, y1, x1 + w, y1 + h, score)
        })
        .collect()
}

/// Number of (set, threshold) pairs where `nms` and the brute force differ.
pub fn nms_mismatches(sets: usize, seed: u64, thresholds: &[f64]) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..sets {
        let n = rng.gen_range(0..40);
        let boxes = random_boxes(&mut rng, n);
        for &t in thresholds {
            if nms_indices(&boxes, t) != brute_force_nms(&boxes, t) {
                bad += 1;
            }
        }
    }
    bad
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStats {
    pub planted: usize,
    pub detections: usize,
    /// Per planted face, IoU with its best detection.
    pub ious: Vec<f64>,
    /// Largest keypoint error in heatmap pixels over matched faces.
    pub max_keypoint_error: f64,
}

/// Runs the decoder on heads planted from [`three_face_scene`].
pub fn synthetic_decode() -> facekp::Result<SyntheticStats> {
    let (faces, hh, hw) = three_face_scene();
    let stride = NETWORK_STRIDE;
    let i_max = (hh.max(hw) * stride) as f64;
    let planted = planted_heads(&faces, hh, hw, stride, i_max, &FaceTemplate::default())?;
    let dets = decode_heads(&planted.scale, &planted.landmarks, &DecodeConfig::default())?;
    let mut ious = Vec::new();
    let mut max_kp = 0.0f64;
    for (f, kps) in faces.iter().zip(&planted.keypoints) {
        let best = dets
            .iter()
            .max_by(|a, b| iou(&a.rect, f).total_cmp(&iou(&b.rect, f)));
        match best {
            Some(d) => {
                ious.push(iou(&d.rect, f));
                for (p, q) in d.keypoints.iter().zip(kps) {
                    let e = (p.0 - q.0).hypot(p.1 - q.1) / stride as f64;
                    max_kp = max_kp.max(e);
                }
            }
            None => ious.push(0.0),
        }
    }
    Ok(SyntheticStats {
        planted: faces.len(),
        detections: dets.len(),
        ious,
        max_keypoint_error: max_kp,
    })
}

/// Fits `targets` random five-point sets on a 32×32 proposal (500 steps,
/// lr 1.0); returns the worst per-coordinate error and the wall time.
pub fn fit_demo(targets: usize, seed: u64) -> facekp::Result<(f64, Duration)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect = Rect::new(0.0, 0.0, 31.0, 31.0);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..targets {
        let gt = KeypointSet(
            (0..5)
                .map(|_| (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)))
                .collect(),
        );
        let out = fit_heatmap_to_keypoints(&gt, &rect, 500, 1.0)?;
        for (p, g) in out.keypoints.0.iter().zip(&gt.0) {
            worst = worst.max((p.0 - g.0).abs()).max((p.1 - g.1).abs());
        }
    }
    Ok((worst, start.elapsed()))
}
