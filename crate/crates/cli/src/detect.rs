//! The `detect` command: images in, JSON lines out.

use std::io::Write;
use std::path::{Path, PathBuf};

use facekp::keypoint::Detection;
use facekp::model::Workspace;
use facekp::pipeline::Detector;
use facekp::tensor::Tensor;
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::pnm::parse_pnm;
use crate::prep::prepare;

/// Runs one already-decoded image and returns detections in its own pixels.
pub fn detect_image(
    det: &Detector,
    image: &Tensor,
    long_side: usize,
    ws: &mut Workspace,
) -> facekp::Result<Vec<Detection>> {
    let prepared = prepare(image, long_side);
    let dets = det.detect(&prepared.tensor, long_side as f64, ws)?;
    Ok(dets.iter().map(|d| prepared.detection_to_image(d)).collect())
}

pub fn load_image(path: &Path) -> CliResult<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_pnm(&bytes).map_err(|source| CliError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// One output line with fixed four-decimal floats.
pub fn format_detection(image: &str, d: &Detection) -> String {
    let f = |v: f64| format!("{v:.4}");
    let b = d.rect.to_array().map(f).join(",");
    let kps: Vec<String> = d
        .keypoints
        .iter()
        .map(|&(x, y)| format!("[{},{}]", f(x), f(y)))
        .collect();
    format!(
        "{{\"image\":{},\"box\":[{}],\"score\":{},\"keypoints\":[{}]}}",
        serde_json::to_string(image).expect("strings serialize"),
        b,
        f(d.score),
        kps.join(",")
    )
}

#[derive(Debug, Default)]
pub struct DetectSummary {
    pub images: usize,
    pub failed: usize,
    pub detections: usize,
}

/// Detects on every image with `threads` workers; lines are written in input
/// order regardless of which worker finished first. Per-image failures go to
/// `errors` and are skipped.
pub fn run_detect(
    det: &Detector,
    long_side: usize,
    paths: &[PathBuf],
    threads: usize,
    out: &mut dyn Write,
    errors: &mut dyn Write,
) -> CliResult<DetectSummary> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Flag {
            flag: "threads",
            message: e.to_string(),
        })?;
    let results: Vec<CliResult<Vec<Detection>>> = pool.install(|| {
        paths
            .par_iter()
            .map_init(Workspace::new, |ws, p| {
                let img = load_image(p)?;
                detect_image(det, &img, long_side, ws).map_err(|source| CliError::Detect {
                    path: p.clone(),
                    source,
                })
            })
            .collect()
    });
    let mut summary = DetectSummary {
        images: paths.len(),
        ..Default::default()
    };
    for (path, res) in paths.iter().zip(results) {
        match res {
            Ok(dets) => {
                let key = path.to_string_lossy();
                for d in &dets {
                    writeln!(out, "{}", format_detection(&key, d)).map_err(|e| CliError::io("<stdout>", e))?;
                }
                summary.detections += dets.len();
            }
            Err(e) => {
                summary.failed += 1;
                writeln!(errors, "error: {e}").map_err(|e| CliError::io("<stderr>", e))?;
            }
        }
    }
    if summary.images > 0 && summary.failed == summary.images {
        return Err(CliError::AllFailed(summary.images));
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use facekp::geometry::Rect;

    #[test]
    fn line_format_is_fixed_precision() {
        let d = Detection {
            rect: Rect::new(1.0, 2.5, 30.123456, 40.0),
            keypoints: vec![(3.0, 4.0), (5.55555, 6.0)],
            score: 1.5,
        };
        assert_eq!(
            format_detection("a \"b\".pgm", &d),
            "{\"image\":\"a \\\"b\\\".pgm\",\"box\":[1.0000,2.5000,30.1235,40.0000],\
             \"score\":1.5000,\"keypoints\":[[3.0000,4.0000],[5.5556,6.0000]]}"
        );
        let v: serde_json::Value = serde_json::from_str(&format_detection("x", &d)).unwrap();
        assert_eq!(v["box"][3], 40.0);
    }
}
