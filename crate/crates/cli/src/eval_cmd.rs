//! The `eval` command: detection JSON lines scored against ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use facekp::eval::{
    match_detections, nme, recall_at_fp, topk_recall, AlignmentSample, CorpusMatches,
    ImageDetections, NmeNorm,
};
use facekp::geometry::{priority_cmp, BBox, Rect};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize)]
struct PredictionLine {
    image: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    #[serde(default)]
    keypoints: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Deserialize)]
struct GroundTruthLine {
    image: String,
    boxes: Vec<[f64; 4]>,
    #[serde(default)]
    keypoints: Option<Vec<Vec<[f64; 2]>>>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub bbox: BBox,
    pub keypoints: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub boxes: Vec<Rect>,
    pub keypoints: Option<Vec<Vec<(f64, f64)>>>,
}

fn rect([x1, y1, x2, y2]: [f64; 4]) -> Rect {
    Rect::new(x1, y1, x2, y2)
}

fn points(v: &[[f64; 2]]) -> Vec<(f64, f64)> {
    v.iter().map(|p| (p[0], p[1])).collect()
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<(usize, T)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, v));
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> CliResult<BTreeMap<String, Vec<Prediction>>> {
    let mut map: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for (_, p) in read_lines::<PredictionLine>(path)? {
        map.entry(p.image).or_default().push(Prediction {
            bbox: BBox {
                rect: rect(p.bbox),
                score: p.score,
            },
            keypoints: p.keypoints.as_deref().map(points),
        });
    }
    Ok(map)
}

pub fn read_ground_truth(path: &Path) -> CliResult<BTreeMap<String, GroundTruth>> {
    let mut map = BTreeMap::new();
    for (line, g) in read_lines::<GroundTruthLine>(path)? {
        let parse_err = |message: String| CliError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if let Some(k) = &g.keypoints {
            if k.len() != g.boxes.len() {
                return Err(parse_err(format!(
                    "{} boxes but {} keypoint sets",
                    g.boxes.len(),
                    k.len()
                )));
            }
        }
        let entry = GroundTruth {
            boxes: g.boxes.into_iter().map(rect).collect(),
            keypoints: g.keypoints.map(|k| k.iter().map(|f| points(f)).collect()),
        };
        if map.insert(g.image.clone(), entry).is_some() {
            return Err(parse_err(format!("image {:?} listed twice", g.image)));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub fp_budgets: Vec<usize>,
    pub iou_thresh: f64,
    pub topk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fp_budgets: vec![50],
            iou_thresh: facekp::eval::DEFAULT_MATCH_IOU,
            topk: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallPoint {
    pub fp_budget: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopkPoint {
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NmeReport {
    pub faces: usize,
    pub face_size: Option<f64>,
    pub inter_ocular: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub ground_truth: usize,
    pub predictions: usize,
    pub iou_thresh: f64,
    pub recall_at_fp: Vec<RecallPoint>,
    pub topk_recall: TopkPoint,
    pub nme: Option<NmeReport>,
    pub warnings: Vec<String>,
}

/// Scores parsed predictions against ground truth. Every prediction image
/// must appear in the ground truth; ground-truth images without predictions
/// count as misses.
pub fn evaluate(
    preds: &BTreeMap<String, Vec<Prediction>>,
    gts: &BTreeMap<String, GroundTruth>,
    opts: &EvalOptions,
    gt_path: &Path,
) -> CliResult<EvalReport> {
    let unmatched: Vec<String> = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    if !unmatched.is_empty() {
        return Err(CliError::UnmatchedImages {
            path: gt_path.to_path_buf(),
            keys: unmatched,
        });
    }
    let empty = Vec::new();
    let mut images = Vec::with_capacity(gts.len());
    let mut proposals = Vec::with_capacity(gts.len());
    let mut truths = Vec::with_capacity(gts.len());
    let mut samples = Vec::new();
    let mut missing_keypoints = 0usize;
    for (key, gt) in gts {
        let mut ps: Vec<&Prediction> = preds.get(key).unwrap_or(&empty).iter().collect();
        ps.sort_by(|a, b| priority_cmp(&a.bbox, &b.bbox));
        let dets: Vec<BBox> = ps.iter().map(|p| p.bbox).collect();
        let m = match_detections(&dets, &gt.boxes, opts.iou_thresh);
        for (d, g) in m.det_match.iter().enumerate() {
            let Some(g) = *g else { continue };
            match (&ps[d].keypoints, gt.keypoints.as_ref().map(|k| &k[g])) {
                (Some(pred), Some(truth)) if pred.len() == truth.len() => {
                    samples.push(AlignmentSample {
                        pred: pred.clone(),
                        gt: truth.clone(),
                        gt_box: gt.boxes[g],
                    })
                }
                _ => missing_keypoints += 1,
            }
        }
        images.push(ImageDetections {
            detections: dets.clone(),
            ground_truth: gt.boxes.clone(),
        });
        proposals.push(dets);
        truths.push(gt.boxes.clone());
    }

    let corpus = CorpusMatches::from_images(&images, opts.iou_thresh);
    let mut recall = Vec::new();
    for &b in &opts.fp_budgets {
        recall.push(RecallPoint {
            fp_budget: b,
            recall: recall_at_fp(&corpus, b)?,
        });
    }
    let topk = TopkPoint {
        k: opts.topk,
        recall: topk_recall(&proposals, &truths, opts.topk, opts.iou_thresh)?,
    };

    let mut warnings = Vec::new();
    if missing_keypoints > 0 {
        warnings.push(format!(
            "{missing_keypoints} matched faces lack keypoints on one side and are left out of NME"
        ));
    }
    let nme_report = if samples.is_empty() {
        warnings.push("no matched faces with keypoints; NME omitted".into());
        None
    } else {
        let mut one = |norm: NmeNorm| match nme(&samples, norm) {
            Ok(v) => Some(v),
            Err(e) => {
                warnings.push(format!("{} NME omitted: {e}", norm.name()));
                None
            }
        };
        Some(NmeReport {
            faces: samples.len(),
            face_size: one(NmeNorm::FaceSize),
            inter_ocular: one(NmeNorm::InterOcular),
        })
    };

    Ok(EvalReport {
        images: gts.len(),
        ground_truth: corpus.num_gt,
        predictions: preds.values().map(Vec::len).sum(),
        iou_thresh: opts.iou_thresh,
        recall_at_fp: recall,
        topk_recall: topk,
        nme: nme_report,
        warnings,
    })
}

pub fn run_eval(pred_path: &Path, gt_path: &Path, opts: &EvalOptions) -> CliResult<EvalReport> {
    let preds = read_predictions(pred_path)?;
    let gts = read_ground_truth(gt_path)?;
    evaluate(&preds, &gts, opts, gt_path)
}

