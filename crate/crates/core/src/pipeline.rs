//! From network heads to scored, suppressed detections.

use crate::error::{Error, Result};
use crate::geometry::{keypoints_to_box, nms_indices, BBox, FaceTemplate};
use crate::keypoint::{decode_keypoints, denormalize, Detection, LandmarkHeatmap};
use crate::model::{forward_with, LayerGraph, Workspace};
use crate::scale::{decode_proposals, ScaleMap, DEFAULT_THRESHOLD};
use crate::tensor::{sigmoid, Tensor};

pub const DEFAULT_NMS_IOU: f64 = 0.6;
pub const DEFAULT_MAX_PROPOSALS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub threshold: f64,
    pub nms_iou: f64,
    /// Proposals kept (best first) before keypoint decoding.
    pub max_proposals: usize,
    pub template: FaceTemplate,
    /// Landmark channels playing eyes, nose and mouth corners for box fitting.
    pub box_points: [usize; 5],
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            max_proposals: DEFAULT_MAX_PROPOSALS,
            template: FaceTemplate::default(),
            box_points: [0, 1, 2, 3, 4],
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::InvalidArgument(format!(
                "nms_iou must be in [0, 1], got {}",
                self.nms_iou
            )));
        }
        if self.max_proposals == 0 {
            return Err(Error::InvalidArgument("max_proposals must be >= 1".into()));
        }
        self.template.validate()
    }
}

/// Decodes head outputs (probabilities, not logits) into detections in
/// network-input pixels. Proposals that cover no whole pixel, or whose
/// keypoints cannot support a box, are dropped.
pub fn decode_heads(
    scale: &ScaleMap,
    landmarks: &LandmarkHeatmap,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if (scale.height(), scale.width()) != (landmarks.height(), landmarks.width()) {
        return Err(Error::Shape(format!(
            "scale map is {}x{}, landmark map is {}x{}",
            scale.height(),
            scale.width(),
            landmarks.height(),
            landmarks.width()
        )));
    }
    if let Some(&c) = cfg.box_points.iter().find(|&&c| c >= landmarks.channels()) {
        return Err(Error::InvalidArgument(format!(
            "box point channel {c} out of range for {} landmark channels",
            landmarks.channels()
        )));
    }
    let stride = scale.stride() as f64;
    let mut proposals = decode_proposals(scale, cfg.threshold)?;
    proposals.truncate(cfg.max_proposals);

    let mut candidates = Vec::with_capacity(proposals.len());
    for p in &proposals {
        let (kps, score) = match decode_keypoints(landmarks, &p.rect, p.score) {
            Ok(v) => v,
            Err(Error::EmptyWindow) => continue,
            Err(e) => return Err(e),
        };
        let keypoints: Vec<(f64, f64)> = denormalize(&kps, &p.rect)
            .into_iter()
            .map(|(x, y)| (x * stride, y * stride))
            .collect();
        let five = cfg.box_points.map(|c| keypoints[c]);
        match keypoints_to_box(&five, &cfg.template) {
            Ok(rect) => candidates.push(Detection { rect, keypoints, score }),
            Err(Error::DegenerateKeypoints(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let boxes: Vec<BBox> = candidates
        .iter()
        .map(|d| BBox { rect: d.rect, score: d.score })
        .collect();
    Ok(nms_indices(&boxes, cfg.nms_iou)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}

/// A network plus its decoding settings.
#[derive(Debug, Clone)]
pub struct Detector {
    pub graph: LayerGraph,
    pub decode: DecodeConfig,
}

impl Detector {
    pub fn new(graph: LayerGraph, decode: DecodeConfig) -> Result<Self> {
        decode.validate()?;
        Ok(Self { graph, decode })
    }

    /// Head probabilities for a network-sized image. `i_max` is the long
    /// side the scale bins are defined against.
    pub fn heads(
        &self,
        image: &Tensor,
        i_max: f64,
        ws: &mut Workspace,
    ) -> Result<(ScaleMap, LandmarkHeatmap)> {
        let (scale_logits, landmark_logits) = forward_with(&self.graph, image, ws)?;
        let scale = ScaleMap::new(sigmoid(&scale_logits), self.graph.total_stride(), i_max)?;
        let landmarks = LandmarkHeatmap::from_tensor(&landmark_logits)?;
        Ok((scale, landmarks))
    }

    /// Detections in network-input pixels.
    pub fn detect(&self, image: &Tensor, i_max: f64, ws: &mut Workspace) -> Result<Vec<Detection>> {
        let (scale, landmarks) = self.heads(image, i_max, ws)?;
        decode_heads(&scale, &landmarks, &self.decode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_drnet, ModelConfig};
    use crate::scale::{paint_target, GroundTruthFace};

    /// Heatmap with a sharp peak for each template point inside `face`.
    fn plant_landmarks(h: &mut LandmarkHeatmap, face: (f64, f64, f64)) {
        let (cx, cy, side) = face;
        let t = FaceTemplate::default();
        for (c, &(u, v)) in t.points.iter().enumerate() {
            let x = (cx - side / 2.0 + u * side) as usize;
            let y = (cy - side / 2.0 + v * side) as usize;
            h.set(c, y, x, 30.0);
        }
    }

    #[test]
    fn planted_faces_decode_once_each() {
        let (hh, ww) = (64, 96);
        let faces = [(20.0, 20.0, 16.0), (60.0, 40.0, 20.0)];
        let gts: Vec<_> = faces
            .iter()
            .map(|&(cx, cy, s)| GroundTruthFace::new(cx * 2.0, cy * 2.0, s * 2.0, s * 2.0))
            .collect();
        let scale = paint_target(&gts, hh, ww, 2, 192.0).unwrap();
        let mut lm = LandmarkHeatmap::zeros(5, hh, ww);
        for f in faces {
            plant_landmarks(&mut lm, f);
        }
        let dets = decode_heads(&scale, &lm, &DecodeConfig::default()).unwrap();
        assert_eq!(dets.len(), 2);
        for d in &dets {
            assert!(d.score > 1.0 && d.score <= 4.0);
            assert_eq!(d.keypoints.len(), 5);
        }
    }

    #[test]
    fn empty_map_gives_nothing() {
        let scale = ScaleMap::zeros(16, 16, 2, 32.0);
        let lm = LandmarkHeatmap::zeros(5, 16, 16);
        assert!(decode_heads(&scale, &lm, &DecodeConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn mismatched_heads_rejected() {
        let scale = ScaleMap::zeros(16, 16, 2, 32.0);
        let lm = LandmarkHeatmap::zeros(5, 16, 8);
        assert!(decode_heads(&scale, &lm, &DecodeConfig::default()).is_err());
        let lm = LandmarkHeatmap::zeros(3, 16, 16);
        assert!(decode_heads(&scale, &lm, &DecodeConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = DecodeConfig { threshold: 0.0, ..DecodeConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DecodeConfig { max_proposals: 0, ..DecodeConfig::default() };
        assert!(bad.validate().is_err());
        assert!(DecodeConfig::default().validate().is_ok());
    }

    #[test]
    fn detector_runs_end_to_end() {
        let graph = build_drnet(&ModelConfig::default()).unwrap().randomized(3);
        let det = Detector::new(graph, DecodeConfig::default()).unwrap();
        let img = Tensor::zeros(3, 32, 48);
        let (scale, lm) = det.heads(&img, 48.0, &mut Workspace::new()).unwrap();
        assert_eq!((scale.height(), scale.width()), (16, 24));
        assert_eq!(lm.channels(), 5);
        det.detect(&img, 48.0, &mut Workspace::new()).unwrap();
    }
}
