//! The `selftest` command: a fast pass over the invariant suite.

use std::fmt::Write as _;
use std::path::Path;

use facekp::eval::{nme, AlignmentSample, NmeNorm};
use facekp::geometry::Rect;
use facekp::model::weights::{load_weights, save_weights, WeightError};
use facekp::model::{build_drnet, build_hourglass_light, count_params, forward, ModelConfig};
use facekp::tensor::Tensor;
use serde::Serialize;

use crate::checks;
use crate::error::{CliError, CliResult};
use crate::pnm::{parse_pnm, PnmError};

pub const DRNET_PARAMS: (usize, usize) = (920_000, 1_120_000);
pub const HOURGLASS_PARAMS: (usize, usize) = (940_000, 1_140_000);

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            let _ = writeln!(out, "{mark} {:width$}  {}", c.name, c.detail);
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(out, "{} checks, {failed} failed", self.checks.len());
        out
    }
}

type Check = (&'static str, fn() -> Result<String, String>);

fn bound(name: &str, value: f64, limit: f64) -> Result<String, String> {
    let msg = format!("{name} {value:.2e} (limit {limit:.0e})");
    if value <= limit {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn check_all(ok: bool, msg: String) -> Result<String, String> {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn softmax_contract() -> Result<String, String> {
    let s = checks::softmax_contract(200, 11);
    check_all(
        s.max_sum_error <= 1e-6
            && s.max_outside == 0.0
            && s.psi_out_of_range == 0
            && s.max_shift_error <= 1e-6
            && s.max_translation_error <= 1e-6,
        format!(
            "sum err {:.1e}, outside {:.1e}, shift {:.1e}, translate {:.1e}",
            s.max_sum_error, s.max_outside, s.max_shift_error, s.max_translation_error
        ),
    )
}

fn scale_roundtrip() -> Result<String, String> {
    let s = checks::scale_roundtrip(200, 12);
    let (lo, hi) = (2f64.powf(-0.05), 2f64.powf(0.05));
    check_all(
        s.count_mismatches == 0 && s.host_mismatches == 0 && s.min_ratio >= lo && s.max_ratio <= hi,
        format!(
            "size ratio [{:.4}, {:.4}], host misses {}, count misses {}",
            s.min_ratio, s.max_ratio, s.host_mismatches, s.count_mismatches
        ),
    )
}

fn nms_oracle() -> Result<String, String> {
    let bad = checks::nms_mismatches(200, 13, &[0.3, 0.6, 0.9]);
    check_all(bad == 0, format!("{bad} of 600 differ from brute force"))
}

fn param_window(build: fn(&ModelConfig) -> facekp::Result<facekp::model::LayerGraph>, (lo, hi): (usize, usize)) -> Result<String, String> {
    let g = build(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let n = count_params(&g);
    check_all((lo..=hi).contains(&n), format!("{n} params, window [{lo}, {hi}]"))
}

fn head_shapes() -> Result<String, String> {
    let cfg = ModelConfig::default();
    for g in [build_drnet(&cfg), build_hourglass_light(&cfg)] {
        let g = g.map_err(|e| e.to_string())?.randomized(1);
        let (s, l) = forward(&g, &Tensor::zeros(3, 64, 96)).map_err(|e| e.to_string())?;
        if s.dims() != (60, 32, 48) || l.dims() != (5, 32, 48) {
            return Err(format!("{}: {:?} / {:?}", g.name(), s.dims(), l.dims()));
        }
    }
    Ok("64x96 -> 32x48 with 60 scale and 5 landmark channels".into())
}

fn weight_roundtrip() -> Result<String, String> {
    let g = build_drnet(&ModelConfig::default()).map_err(|e| e.to_string())?.randomized(5);
    let bytes = save_weights(&g);
    let back = load_weights(&g, &bytes).map_err(|e| e.to_string())?;
    check_all(save_weights(&back) == bytes, format!("{} bytes re-encoded identically", bytes.len()))
}

fn weight_corruption() -> Result<String, String> {
    let g = build_drnet(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let bytes = save_weights(&g);
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let magic = matches!(load_weights(&g, &bad_magic), Err(WeightError::BadMagic(_)));
    let trunc = matches!(load_weights(&g, &bytes[..bytes.len() - 3]), Err(WeightError::Truncated { .. }));
    let hg = build_hourglass_light(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let other = load_weights(&hg, &bytes).is_err();
    check_all(magic && trunc && other, format!("bad magic {magic}, truncation {trunc}, wrong model {other}"))
}

fn synthetic_decode() -> Result<String, String> {
    let s = checks::synthetic_decode().map_err(|e| e.to_string())?;
    let min_iou = s.ious.iter().cloned().fold(f64::INFINITY, f64::min);
    check_all(
        s.detections == s.planted && min_iou >= 0.8 && s.max_keypoint_error <= 1.0,
        format!(
            "{} of {} faces, min IoU {min_iou:.3}, keypoint err {:.3} px",
            s.detections, s.planted, s.max_keypoint_error
        ),
    )
}

fn fit_demo() -> Result<String, String> {
    let (err, t) = checks::fit_demo(2, 14).map_err(|e| e.to_string())?;
    check_all(err <= 0.01, format!("worst error {err:.1e} in {:.2}s", t.as_secs_f64()))
}

fn nme_fixture() -> Result<String, String> {
    let gt = vec![(25.0, 40.0), (75.0, 40.0), (50.0, 60.0), (35.0, 80.0), (65.0, 80.0)];
    let pred = gt.iter().map(|&(x, y)| (x + 1.0, y)).collect();
    let s = AlignmentSample { pred, gt, gt_box: Rect::new(0.0, 0.0, 100.0, 100.0) };
    let io = nme(std::slice::from_ref(&s), NmeNorm::InterOcular).map_err(|e| e.to_string())?;
    let fs = nme(&[s], NmeNorm::FaceSize).map_err(|e| e.to_string())?;
    check_all(
        (io - 0.02).abs() < 1e-12 && (fs - 0.01).abs() < 1e-12,
        format!("inter-ocular {io}, face size {fs}"),
    )
}

fn pnm_parsing() -> Result<String, String> {
    let gray = parse_pnm(b"P5\n# c\n1 1\n255\n\xff").map_err(|e| e.to_string())?;
    let ok = gray.data() == [1.0, 1.0, 1.0]
        && matches!(parse_pnm(b"P2 1 1 255 0"), Err(PnmError::BadMagic(_)))
        && matches!(parse_pnm(b"P5 1 1 1023\n\0\0"), Err(PnmError::UnsupportedMaxval(1023)))
        && matches!(parse_pnm(b"P6 4 4 255\n\0"), Err(PnmError::Truncated { .. }));
    check_all(ok, "gray, comments, bad magic, maxval, truncation".into())
}

const CHECKS: &[Check] = &[
    ("soft-argmax gradient", || bound("max rel err", checks::soft_argmax_grad_error(20, 1), 1e-4)),
    ("keypoint loss gradient", || bound("max rel err", checks::keypoint_loss_grad_error(20, 2), 1e-6)),
    ("scale loss gradient", || bound("max rel err", checks::scale_loss_grad_error(20, 3), 1e-4)),
    ("masked softmax contract", softmax_contract),
    ("scale encode/decode roundtrip", scale_roundtrip),
    ("nms against brute force", nms_oracle),
    ("drnet parameter budget", || param_window(build_drnet, DRNET_PARAMS)),
    ("hourglass parameter budget", || param_window(build_hourglass_light, HOURGLASS_PARAMS)),
    ("head shapes", head_shapes),
    ("weight file roundtrip", weight_roundtrip),
    ("weight file corruption", weight_corruption),
    ("synthetic three-face decode", synthetic_decode),
    ("keypoint fitting", fit_demo),
    ("nme normalizers", nme_fixture),
    ("pnm parsing", pnm_parsing),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs every check. With `weights`, the file is first loaded against both
/// backbones; a file that fits neither is an error, not a failed check.
pub fn run_selftest(weights: Option<&Path>) -> CliResult<SelftestReport> {
    let mut results = Vec::new();
    if let Some(path) = weights {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let cfg = ModelConfig::default();
        let mut first_err = None;
        let mut loaded = None;
        for g in [build_drnet(&cfg)?, build_hourglass_light(&cfg)?] {
            match load_weights(&g, &bytes) {
                Ok(l) => {
                    loaded = Some(l);
                    break;
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        let Some(graph) = loaded else {
            return Err(CliError::Weights {
                path: path.to_path_buf(),
                source: first_err.expect("at least one attempt"),
            });
        };
        let (s, l) = forward(&graph, &Tensor::full(3, 64, 64, 0.5))?;
        results.push(CheckResult {
            name: format!("load {}", path.display()),
            passed: s.is_finite() && l.is_finite(),
            detail: format!("{} weights, finite outputs {}", graph.name(), s.is_finite() && l.is_finite()),
        });
    }
    for (name, f) in CHECKS {
        let (passed, detail) = match f() {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        results.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }
    Ok(SelftestReport { checks: results })
}
