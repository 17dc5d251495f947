//! Head outputs built from known faces, for exercising the decoder without a
//! trained network.

use facekp::geometry::{FaceTemplate, Rect};
use facekp::keypoint::LandmarkHeatmap;
use facekp::scale::{paint_target, GroundTruthFace, ScaleMap};

/// Logit placed at each planted landmark cell; everything else is zero.
pub const PEAK_LOGIT: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct PlantedHeads {
    pub scale: ScaleMap,
    pub landmarks: LandmarkHeatmap,
    /// Per face, the template keypoints in image pixels.
    pub keypoints: Vec<Vec<(f64, f64)>>,
}

/// Paints the scale map for `faces` (image pixels) and puts a sharp peak at
/// the heatmap cell under each template landmark.
pub fn planted_heads(
    faces: &[Rect],
    heat_h: usize,
    heat_w: usize,
    stride: usize,
    i_max: f64,
    template: &FaceTemplate,
) -> facekp::Result<PlantedHeads> {
    let gts: Vec<GroundTruthFace> = faces.iter().map(GroundTruthFace::from_rect).collect();
    let scale = paint_target(&gts, heat_h, heat_w, stride, i_max)?;
    let mut landmarks = LandmarkHeatmap::zeros(template.points.len(), heat_h, heat_w);
    let mut keypoints = Vec::with_capacity(faces.len());
    for f in faces {
        let pts: Vec<(f64, f64)> = template
            .points
            .iter()
            .map(|&(u, v)| (f.x1 + u * f.width(), f.y1 + v * f.height()))
            .collect();
        for (c, &(x, y)) in pts.iter().enumerate() {
            let hx = (x / stride as f64).floor();
            let hy = (y / stride as f64).floor();
            if hx >= 0.0 && hy >= 0.0 && (hx as usize) < heat_w && (hy as usize) < heat_h {
                landmarks.set(c, hy as usize, hx as usize, PEAK_LOGIT);
            }
        }
        keypoints.push(pts);
    }
    Ok(PlantedHeads {
        scale,
        landmarks,
        keypoints,
    })
}

/// Three well-separated square faces on a 128×192 heatmap (256×384 image).
pub fn three_face_scene() -> (Vec<Rect>, usize, usize) {
    let faces = vec![
        Rect::new(20.0, 30.0, 68.0, 78.0),
        Rect::new(150.0, 60.0, 230.0, 140.0),
        Rect::new(280.0, 150.0, 344.0, 214.0),
    ];
    (faces, 128, 192)
}
