//! Detection and alignment metrics: IoU matching, recall at a false-positive
//! budget (discrete ROC), top-k proposal recall and normalized mean error.

use crate::error::{Error, Result};
use crate::geometry::{iou, priority_cmp, BBox, Rect};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Per ground-truth face: claimed by some detection.
    pub gt_matched: Vec<bool>,
    /// Per detection: index of the face it claimed, or `None` for a false
    /// positive.
    pub det_match: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn is_tp(&self, det: usize) -> bool {
        self.det_match[det].is_some()
    }

    pub fn true_positives(&self) -> usize {
        self.det_match.iter().filter(|m| m.is_some()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.det_match.len() - self.true_positives()
    }
}

/// Walks `dets` in the given order (expected: score descending) and lets each
/// claim the unmatched face with the highest IoU, provided it reaches
/// `iou_thresh`. Equal IoUs resolve to the lower face index.
pub fn match_detections(dets: &[BBox], gts: &[Rect], iou_thresh: f64) -> MatchResult {
    let mut gt_matched = vec![false; gts.len()];
    let mut det_match = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let o = iou(&d.rect, gt);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
        }
        det_match.push(best.map(|(g, _)| g));
    }
    MatchResult {
        gt_matched,
        det_match,
    }
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageDetections {
    pub detections: Vec<BBox>,
    pub ground_truth: Vec<Rect>,
}

/// Scored TP/FP outcomes pooled over a corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusMatches {
    /// `(score, is_true_positive)`, sorted by score descending.
    pub outcomes: Vec<(f64, bool)>,
    pub num_gt: usize,
}

impl CorpusMatches {
    pub fn from_images(images: &[ImageDetections], iou_thresh: f64) -> Self {
        let mut outcomes = Vec::new();
        let mut num_gt = 0;
        for img in images {
            let mut dets = img.detections.clone();
            dets.sort_by(priority_cmp);
            let m = match_detections(&dets, &img.ground_truth, iou_thresh);
            outcomes.extend(dets.iter().enumerate().map(|(i, d)| (d.score, m.is_tp(i))));
            num_gt += img.ground_truth.len();
        }
        outcomes.sort_by(|a, b| b.0.total_cmp(&a.0));
        Self { outcomes, num_gt }
    }
}

/// Recall at the loosest global score threshold whose cumulative false
/// positives stay within `fp_budget`. Detections sharing a score enter
/// together.
pub fn recall_at_fp(corpus: &CorpusMatches, fp_budget: usize) -> Result<f64> {
    if corpus.num_gt == 0 {
        return Err(Error::InvalidArgument("recall needs at least one ground-truth face".into()));
    }
    let (mut tp, mut fp, mut best_tp) = (0usize, 0usize, 0usize);
    let mut i = 0;
    let o = &corpus.outcomes;
    while i < o.len() {
        let mut j = i;
        while j < o.len() && o[j].0 == o[i].0 {
            if o[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if fp > fp_budget {
            break;
        }
        best_tp = tp;
        i = j;
    }
    Ok(best_tp as f64 / corpus.num_gt as f64)
}

/// Fraction of faces covered (IoU ≥ `iou_thresh`) by at least one of their
/// image's `k` best proposals.
pub fn topk_recall(
    proposals: &[Vec<BBox>],
    gts: &[Vec<Rect>],
    k: usize,
    iou_thresh: f64,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if proposals.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} proposal lists for {} images",
            proposals.len(),
            gts.len()
        )));
    }
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("recall needs at least one ground-truth face".into()));
    }
    let mut hit = 0;
    for (props, faces) in proposals.iter().zip(gts) {
        let mut sorted = props.clone();
        sorted.sort_by(priority_cmp);
        sorted.truncate(k);
        hit += faces
            .iter()
            .filter(|f| sorted.iter().any(|p| iou(&p.rect, f) >= iou_thresh))
            .count();
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmeNorm {
    /// `sqrt(w · h)` of the ground-truth box.
    FaceSize,
    /// Distance between the two eye centres (channels 0 and 1).
    InterOcular,
}

impl NmeNorm {
    pub fn name(&self) -> &'static str {
        match self {
            NmeNorm::FaceSize => "face_size",
            NmeNorm::InterOcular => "inter_ocular",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSample {
    pub pred: Vec<(f64, f64)>,
    pub gt: Vec<(f64, f64)>,
    pub gt_box: Rect,
}

/// Mean over faces of the mean per-keypoint Euclidean error divided by the
/// face's normalizer.
pub fn nme(samples: &[AlignmentSample], norm: NmeNorm) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("NME needs at least one face".into()));
    }
    let mut total = 0.0;
    for s in samples {
        if s.pred.len() != s.gt.len() || s.gt.is_empty() {
            return Err(Error::Shape(format!(
                "predicted {} keypoints, ground truth has {}",
                s.pred.len(),
                s.gt.len()
            )));
        }
        let d = match norm {
            NmeNorm::FaceSize => (s.gt_box.width() * s.gt_box.height()).max(0.0).sqrt(),
            NmeNorm::InterOcular => {
                if s.gt.len() < 2 {
                    return Err(Error::InvalidArgument("inter-ocular NME needs both eyes".into()));
                }
                let (l, r) = (s.gt[0], s.gt[1]);
                (l.0 - r.0).hypot(l.1 - r.1)
            }
        };
        if !(d > 0.0) {
            return Err(Error::InvalidArgument(format!("{} normalizer is zero", norm.name())));
        }
        let err: f64 = s
            .pred
            .iter()
            .zip(&s.gt)
            .map(|(p, g)| (p.0 - g.0).hypot(p.1 - g.1))
            .sum::<f64>()
            / s.gt.len() as f64;
        total += err / d;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64, s: f64) -> BBox {
        BBox::new(x1, y1, x2, y2, s)
    }

    #[test]
    fn exact_detections_all_match() {
        let gts = vec![Rect::new(0.0, 0.0, 10.0, 10.0), Rect::new(20.0, 20.0, 30.0, 30.0)];
        let dets: Vec<_> = gts.iter().map(|r| BBox { rect: *r, score: 1.0 }).collect();
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!(m.true_positives(), 2);
        assert_eq!(m.false_positives(), 0);
        assert!(m.gt_matched.iter().all(|&x| x));
    }

    #[test]
    fn one_detection_claims_one_face() {
        let gts = vec![Rect::new(0.0, 0.0, 10.0, 10.0), Rect::new(1.0, 0.0, 11.0, 10.0)];
        let m = match_detections(&[b(0.5, 0.0, 10.5, 10.0, 0.9)], &gts, 0.5);
        assert_eq!(m.gt_matched.iter().filter(|&&x| x).count(), 1);
        assert_eq!(m.det_match, vec![Some(0)]);
    }

    #[test]
    fn recall_simple_cases() {
        let gts = vec![Rect::new(0.0, 0.0, 10.0, 10.0)];
        let perfect = ImageDetections {
            detections: vec![b(0.0, 0.0, 10.0, 10.0, 0.9)],
            ground_truth: gts.clone(),
        };
        let c = CorpusMatches::from_images(&[perfect], 0.5);
        for budget in [0, 1, 50] {
            assert_eq!(recall_at_fp(&c, budget).unwrap(), 1.0);
        }
        let junk = ImageDetections {
            detections: (0..10).map(|i| b(100.0 + i as f64, 0.0, 110.0 + i as f64, 10.0, 0.5)).collect(),
            ground_truth: gts,
        };
        let c = CorpusMatches::from_images(&[junk], 0.5);
        assert_eq!(recall_at_fp(&c, 50).unwrap(), 0.0);
        assert!(recall_at_fp(&CorpusMatches::default(), 1).is_err());
    }

    #[test]
    fn equal_scores_enter_together() {
        let c = CorpusMatches {
            outcomes: vec![(0.9, true), (0.8, true), (0.8, false), (0.7, true)],
            num_gt: 4,
        };
        assert_eq!(recall_at_fp(&c, 0).unwrap(), 0.25);
        assert_eq!(recall_at_fp(&c, 1).unwrap(), 0.75);
    }

    #[test]
    fn topk_cases() {
        let gts = vec![vec![Rect::new(0.0, 0.0, 10.0, 10.0)]];
        let props = vec![vec![b(50.0, 50.0, 60.0, 60.0, 0.9), b(0.0, 0.0, 10.0, 10.0, 0.8)]];
        assert_eq!(topk_recall(&props, &gts, 1, 0.5).unwrap(), 0.0);
        assert_eq!(topk_recall(&props, &gts, 2, 0.5).unwrap(), 1.0);
        assert_eq!(topk_recall(&props, &gts, 100, 0.5).unwrap(), 1.0);
        assert!(topk_recall(&props, &gts, 0, 0.5).is_err());
    }

    #[test]
    fn nme_cases() {
        let gt = vec![(30.0, 40.0), (70.0, 40.0), (50.0, 60.0), (35.0, 80.0), (65.0, 80.0)];
        let bx = Rect::new(0.0, 0.0, 100.0, 100.0);
        let same = AlignmentSample { pred: gt.clone(), gt: gt.clone(), gt_box: bx };
        assert_eq!(nme(&[same], NmeNorm::FaceSize).unwrap(), 0.0);

        let one = AlignmentSample { pred: vec![(5.0, 0.0)], gt: vec![(0.0, 0.0)], gt_box: bx };
        assert!((nme(&[one], NmeNorm::FaceSize).unwrap() - 0.05).abs() < 1e-15);

        // eyes 50px apart, every point off by 1px
        let gt = vec![(25.0, 40.0), (75.0, 40.0), (50.0, 60.0), (35.0, 80.0), (65.0, 80.0)];
        let pred: Vec<_> = gt.iter().map(|&(x, y)| (x + 1.0, y)).collect();
        let s = AlignmentSample { pred, gt, gt_box: bx };
        assert!((nme(&[s], NmeNorm::InterOcular).unwrap() - 0.02).abs() < 1e-15);

        let blind = AlignmentSample { pred: vec![(0.0, 0.0); 2], gt: vec![(1.0, 1.0); 2], gt_box: bx };
        assert!(nme(&[blind], NmeNorm::InterOcular).is_err());
        assert!(nme(&[], NmeNorm::FaceSize).is_err());
    }
}
