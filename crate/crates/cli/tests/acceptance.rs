//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use facekp::eval::{nme, recall_at_fp, topk_recall, AlignmentSample, CorpusMatches, ImageDetections, NmeNorm};
use facekp::geometry::{BBox, Rect};
use facekp::model::weights::{
    decode_tensors, encode_tensors, load_weights, save_weights, NamedTensor, WeightError,
};
use facekp::model::{build_drnet, build_hourglass_light, count_params, forward, ModelConfig};
use facekp::pipeline::{DecodeConfig, Detector};
use facekp::tensor::Tensor;
use facekp_cli::bench::run_bench;
use facekp_cli::checks;
use facekp_cli::eval_cmd::{evaluate, EvalOptions, GroundTruth, Prediction};
use facekp_cli::pnm::{parse_pnm, PnmError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn require(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let sa = checks::soft_argmax_grad_error(100, 101);
    let kl = checks::keypoint_loss_grad_error(100, 102);
    let sb = checks::scale_loss_grad_error(100, 103);
    let el = t.elapsed();
    require(
        sa <= 1e-4 && kl <= 1e-6 && sb <= 1e-4 && el < Duration::from_secs(10),
        format!(
            "100 instances each; max rel err soft-argmax {sa:.1e}, keypoint loss {kl:.1e}, scale bce {sb:.1e}; {:.2}s",
            el.as_secs_f64()
        ),
    )
}

fn softmax_contract() -> Outcome {
    let s = checks::softmax_contract(1000, 201);
    require(
        s.max_sum_error <= 1e-6
            && s.max_outside == 0.0
            && s.psi_out_of_range == 0
            && s.max_shift_error <= 1e-6
            && s.max_translation_error <= 1e-6,
        format!(
            "1000 pairs; |sum-1| {:.1e}, outside {:.1e}, psi out of range {}, shift {:.1e}, translation {:.1e}",
            s.max_sum_error, s.max_outside, s.psi_out_of_range, s.max_shift_error, s.max_translation_error
        ),
    )
}

fn scale_roundtrip() -> Outcome {
    let s = checks::scale_roundtrip(1000, 301);
    let (lo, hi) = (2f64.powf(-0.05), 2f64.powf(0.05));
    require(
        s.count_mismatches == 0 && s.host_mismatches == 0 && s.min_ratio >= lo && s.max_ratio <= hi,
        format!(
            "1000 faces; size ratio [{:.5}, {:.5}] within [{lo:.5}, {hi:.5}], host misses {}, count misses {}",
            s.min_ratio, s.max_ratio, s.host_mismatches, s.count_mismatches
        ),
    )
}

fn fitting_demo() -> Outcome {
    let (err, el) = checks::fit_demo(20, 401).map_err(|e| e.to_string())?;
    require(
        err <= 0.01 && el < Duration::from_secs(30),
        format!("20 five-point targets, 500 steps, lr 1.0; worst error {err:.1e}; {:.2}s", el.as_secs_f64()),
    )
}

fn parameter_budgets() -> Outcome {
    let cfg = ModelConfig::default();
    let d = count_params(&build_drnet(&cfg).map_err(|e| e.to_string())?);
    let h = count_params(&build_hourglass_light(&cfg).map_err(|e| e.to_string())?);
    require(
        (920_000..=1_120_000).contains(&d) && (940_000..=1_140_000).contains(&h),
        format!("drnet {d}, hourglass {h}"),
    )
}

fn shape_contract() -> Outcome {
    let cfg = ModelConfig::default();
    let mut seen = Vec::new();
    for g in [build_drnet(&cfg), build_hourglass_light(&cfg)] {
        let g = g.map_err(|e| e.to_string())?.randomized(7);
        for (h, w) in [(256, 256), (192, 256), (128, 384)] {
            let (s, l) = forward(&g, &Tensor::zeros(3, h, w)).map_err(|e| e.to_string())?;
            if s.dims() != (60, h / 2, w / 2) || l.dims() != (5, h / 2, w / 2) {
                return Err(format!("{} {h}x{w}: {:?} / {:?}", g.name(), s.dims(), l.dims()));
            }
            seen.push(format!("{h}x{w}"));
        }
    }
    Ok(format!("both backbones, inputs {} -> half resolution, 60 + 5 channels", seen[..3].join(", ")))
}

fn nms_oracle() -> Outcome {
    let bad = checks::nms_mismatches(1000, 701, &[0.3, 0.6, 0.9]);
    require(bad == 0, format!("1000 random sets x 3 thresholds; {bad} differ from brute force"))
}

fn synthetic_decode() -> Outcome {
    let s = checks::synthetic_decode().map_err(|e| e.to_string())?;
    let min_iou = s.ious.iter().cloned().fold(f64::INFINITY, f64::min);
    require(
        s.detections == 3 && s.ious.len() == 3 && min_iou >= 0.8 && s.max_keypoint_error <= 1.0,
        format!(
            "{} detections for {} planted faces; min IoU {min_iou:.3}; max keypoint error {:.3} heatmap px",
            s.detections, s.planted, s.max_keypoint_error
        ),
    )
}

fn b(x1: f64, y1: f64, x2: f64, y2: f64, s: f64) -> BBox {
    BBox::new(x1, y1, x2, y2, s)
}

/// Five landmarks laid out inside a square box.
fn face_points(r: &Rect) -> Vec<(f64, f64)> {
    [(0.3, 0.4), (0.7, 0.4), (0.5, 0.6), (0.34, 0.8), (0.66, 0.8)]
        .iter()
        .map(|&(u, v)| (r.x1 + u * r.width(), r.y1 + v * r.height()))
        .collect()
}

/// Three images, four faces. In score order the detections are
/// .9 TP, .8 FP, .7 TP, .6 FP (duplicate), .5 TP, .4 FP.
fn fixture() -> (Vec<ImageDetections>, Vec<Vec<Option<Vec<(f64, f64)>>>>) {
    let a1 = Rect::new(0.0, 0.0, 10.0, 10.0);
    let a2 = Rect::new(20.0, 0.0, 30.0, 10.0);
    let b1 = Rect::new(0.0, 0.0, 10.0, 10.0);
    let c1 = Rect::new(0.0, 0.0, 20.0, 20.0);
    let shifted: Vec<(f64, f64)> = face_points(&b1).iter().map(|&(x, y)| (x + 1.0, y)).collect();
    let images = vec![
        ImageDetections {
            detections: vec![b(0.0, 0.0, 10.0, 10.0, 0.9), b(50.0, 50.0, 60.0, 60.0, 0.8), b(20.0, 0.0, 30.0, 10.0, 0.5)],
            ground_truth: vec![a1, a2],
        },
        ImageDetections {
            // IoU 9/11 with the face, then a duplicate
            detections: vec![b(1.0, 0.0, 11.0, 10.0, 0.7), b(0.0, 0.0, 10.0, 10.0, 0.6)],
            ground_truth: vec![b1],
        },
        ImageDetections {
            // IoU 0.25
            detections: vec![b(0.0, 0.0, 10.0, 10.0, 0.4)],
            ground_truth: vec![c1],
        },
    ];
    let kps = vec![
        vec![Some(face_points(&a1)), None, Some(face_points(&a2))],
        vec![Some(shifted), None],
        vec![None],
    ];
    (images, kps)
}

fn metric_fixtures() -> Outcome {
    let (images, kps) = fixture();
    let corpus = CorpusMatches::from_images(&images, 0.5);
    let recalls: Vec<f64> = [0, 1, 2, 3]
        .iter()
        .map(|&b| recall_at_fp(&corpus, b).unwrap())
        .collect();
    let props: Vec<Vec<BBox>> = images.iter().map(|i| i.detections.clone()).collect();
    let gts: Vec<Vec<Rect>> = images.iter().map(|i| i.ground_truth.clone()).collect();
    let topk: Vec<f64> = [1, 2, 3, 100].iter().map(|&k| topk_recall(&props, &gts, k, 0.5).unwrap()).collect();

    let samples = vec![
        AlignmentSample { pred: face_points(&gts[0][0]), gt: face_points(&gts[0][0]), gt_box: gts[0][0] },
        AlignmentSample { pred: face_points(&gts[0][1]), gt: face_points(&gts[0][1]), gt_box: gts[0][1] },
        AlignmentSample { pred: kps[1][0].clone().unwrap(), gt: face_points(&gts[1][0]), gt_box: gts[1][0] },
    ];
    let nme_fs = nme(&samples, NmeNorm::FaceSize).unwrap();
    let nme_io = nme(&samples, NmeNorm::InterOcular).unwrap();

    // the same fixture through the eval command
    let mut preds: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    let mut truth: BTreeMap<String, GroundTruth> = BTreeMap::new();
    for (i, (img, k)) in images.iter().zip(&kps).enumerate() {
        let key = format!("img{i}");
        preds.insert(
            key.clone(),
            img.detections
                .iter()
                .zip(k)
                .map(|(d, kp)| Prediction { bbox: *d, keypoints: kp.clone() })
                .collect(),
        );
        truth.insert(
            key,
            GroundTruth {
                boxes: img.ground_truth.clone(),
                keypoints: Some(img.ground_truth.iter().map(face_points).collect()),
            },
        );
    }
    let opts = EvalOptions { fp_budgets: vec![0, 1, 2], iou_thresh: 0.5, topk: 1 };
    let report = evaluate(&preds, &truth, &opts, Path::new("fixture")).map_err(|e| e.to_string())?;
    let via_cmd: Vec<f64> = report.recall_at_fp.iter().map(|r| r.recall).collect();
    let cmd_nme = report.nme.as_ref().map(|n| (n.face_size, n.inter_ocular));

    let exact = recalls == [0.25, 0.5, 0.75, 0.75]
        && topk == [0.5, 0.5, 0.75, 0.75]
        && nme_fs == 0.1 / 3.0
        && nme_io == 0.25 / 3.0
        && via_cmd == [0.25, 0.5, 0.75]
        && report.topk_recall.recall == 0.5
        && cmd_nme == Some((Some(0.1 / 3.0), Some(0.25 / 3.0)));

    // monotonicity on random corpora
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    let mut violations = 0;
    for _ in 0..200 {
        let n_img = rng.gen_range(1..6);
        let mut corpus_imgs = Vec::new();
        for _ in 0..n_img {
            let (n_gt, n_det) = (rng.gen_range(1..6), rng.gen_range(0..15));
            let gt = checks::random_boxes(&mut rng, n_gt).into_iter().map(|b| b.rect).collect();
            let dets = checks::random_boxes(&mut rng, n_det);
            corpus_imgs.push(ImageDetections { detections: dets, ground_truth: gt });
        }
        let c = CorpusMatches::from_images(&corpus_imgs, 0.5);
        let r: Vec<f64> = (0..30).map(|b| recall_at_fp(&c, b).unwrap()).collect();
        violations += r.windows(2).filter(|w| w[1] < w[0]).count();
        let p: Vec<Vec<BBox>> = corpus_imgs.iter().map(|i| i.detections.clone()).collect();
        let g: Vec<Vec<Rect>> = corpus_imgs.iter().map(|i| i.ground_truth.clone()).collect();
        let t: Vec<f64> = (1..20).map(|k| topk_recall(&p, &g, k, 0.5).unwrap()).collect();
        violations += t.windows(2).filter(|w| w[1] < w[0]).count();
    }
    require(
        exact && violations == 0,
        format!(
            "recall@fp{{0,1,2,3}} {recalls:?}, top-k{{1,2,3,100}} {topk:?}, nme face {nme_fs:.6} / ocular {nme_io:.6}, eval command agrees {}, monotonicity violations {violations}",
            via_cmd == recalls[..3]
        ),
    )
}

enum Mutation {
    Flip,
    Truncate,
    Insert,
    Splice,
}

fn mutate(rng: &mut ChaCha8Rng, src: &[u8], head: usize) -> (Vec<u8>, Mutation) {
    let mut v = src.to_vec();
    // bias edits toward the header, where structure lives
    let pos = |rng: &mut ChaCha8Rng, len: usize| {
        if rng.gen_bool(0.7) {
            rng.gen_range(0..head.min(len).max(1))
        } else {
            rng.gen_range(0..len.max(1))
        }
    };
    match rng.gen_range(0..4) {
        0 => {
            for _ in 0..rng.gen_range(1..4) {
                let p = pos(rng, v.len());
                if p < v.len() {
                    v[p] ^= 1 << rng.gen_range(0..8);
                }
            }
            (v, Mutation::Flip)
        }
        1 => {
            let cut = rng.gen_range(0..v.len());
            v.truncate(cut);
            (v, Mutation::Truncate)
        }
        2 => {
            let p = pos(rng, v.len());
            for _ in 0..rng.gen_range(1..5) {
                v.insert(p.min(v.len()), rng.gen());
            }
            (v, Mutation::Insert)
        }
        _ => {
            let p = pos(rng, v.len());
            let n = rng.gen_range(1..8).min(v.len() - p);
            for b in &mut v[p..p + n] {
                *b = rng.gen();
            }
            (v, Mutation::Splice)
        }
    }
}

fn format_robustness() -> Outcome {
    let cfg = ModelConfig::default();
    let drnet = build_drnet(&cfg).map_err(|e| e.to_string())?.randomized(11);
    let bytes = save_weights(&drnet);
    let loaded = load_weights(&drnet, &bytes).map_err(|e| e.to_string())?;
    let byte_exact = save_weights(&loaded) == bytes;

    // designated errors
    let mut bad_magic = bytes.clone();
    bad_magic[..4].copy_from_slice(b"GGUF");
    let mut tensors = decode_tensors(&bytes).map_err(|e| e.to_string())?;
    tensors[0].dims.swap(0, 1);
    let swapped = encode_tensors(&tensors);
    let designated = matches!(load_weights(&drnet, &bad_magic), Err(WeightError::BadMagic(_)))
        && matches!(load_weights(&drnet, &bytes[..bytes.len() / 2]), Err(WeightError::Truncated { .. }))
        && matches!(load_weights(&drnet, &swapped), Err(WeightError::ShapeMismatch { .. }))
        && matches!(parse_pnm(b"P7\n1 1\n255\n\0"), Err(PnmError::BadMagic(_)))
        && matches!(parse_pnm(b"P5\n2 2\n255\n\0"), Err(PnmError::Truncated { .. }))
        && matches!(parse_pnm(b"P5\n2 2\n4095\n\0"), Err(PnmError::UnsupportedMaxval(4095)))
        && matches!(parse_pnm(b"P5\n2 -2\n255\n\0"), Err(PnmError::MalformedHeader(_)));

    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut panics = 0;
    let mut wrong_truncation = 0;
    let mut files = 0;

    // small weight files through the decoder
    for i in 0..4000 {
        let n = rng.gen_range(1..4);
        let set: Vec<NamedTensor> = (0..n)
            .map(|j| {
                let dims: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(1..4)).collect();
                let len = dims.iter().product();
                NamedTensor {
                    name: format!("t{i}.{j}"),
                    dims,
                    data: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                }
            })
            .collect();
        let clean = encode_tensors(&set);
        if decode_tensors(&clean).ok().map(|t| encode_tensors(&t)) != Some(clean.clone()) {
            return Err(format!("small file {i} does not round-trip"));
        }
        let (m, kind) = mutate(&mut rng, &clean, 24);
        files += 1;
        match catch_unwind(|| decode_tensors(&m)) {
            Err(_) => panics += 1,
            Ok(r) => {
                if matches!(kind, Mutation::Truncate) && !matches!(r, Err(WeightError::Truncated { .. })) {
                    wrong_truncation += 1;
                }
            }
        }
    }
    // full model files through the loader
    for _ in 0..1000 {
        let (m, kind) = mutate(&mut rng, &bytes, 256);
        files += 1;
        match catch_unwind(AssertUnwindSafe(|| load_weights(&drnet, &m))) {
            Err(_) => panics += 1,
            Ok(r) => {
                if matches!(kind, Mutation::Truncate) && !matches!(r, Err(WeightError::Truncated { .. })) {
                    wrong_truncation += 1;
                }
            }
        }
    }
    // images
    let seeds: Vec<Vec<u8>> = vec![
        b"P5\n# gray\n4 3\n255\n".iter().copied().chain(0..12u8).collect(),
        b"P6 3 2 255\n".iter().copied().chain(0..18u8).collect(),
        b"P5\n1 1\n255\n\xff".to_vec(),
    ];
    for i in 0..5000 {
        let (m, _) = mutate(&mut rng, &seeds[i % seeds.len()], 16);
        files += 1;
        match catch_unwind(|| parse_pnm(&m)) {
            Err(_) => panics += 1,
            Ok(Ok(t)) => {
                if t.channels() != 3 || t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err("mutated image decoded out of range".into());
                }
            }
            Ok(Err(_)) => {}
        }
    }
    require(
        byte_exact && designated && panics == 0 && wrong_truncation == 0 && files >= 10_000,
        format!(
            "round-trip byte-exact {byte_exact}, designated errors {designated}, {files} mutated files, {panics} panics, {wrong_truncation} truncations not reported as such"
        ),
    )
}

fn performance() -> Outcome {
    let graph = build_drnet(&ModelConfig::default()).map_err(|e| e.to_string())?.randomized(13);
    let img = facekp_cli::bench::bench_image(256, 256);
    forward(&graph, &img).map_err(|e| e.to_string())?;
    let mut times: Vec<f64> = (0..5)
        .map(|_| {
            let t = Instant::now();
            forward(&graph, &img).expect("forward");
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let fwd = times[times.len() / 2];

    let det = Detector::new(graph, DecodeConfig::default()).map_err(|e| e.to_string())?;
    let report = run_bench(&det, 256, 256, 32, 3, 1).map_err(|e| e.to_string())?;
    let json = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    let has_both = json["online"]["median_ms"].is_number() && json["offline"]["median_ms"].is_number();
    let (on, off) = (report.online.median_ms, report.offline.median_ms);
    require(
        fwd < 250.0 && off <= on && has_both,
        format!("drnet 256x256 forward {fwd:.1} ms (single thread); online {on:.1} ms/image, offline batch 32 {off:.1} ms/image"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient fidelity", gradient_fidelity),
        ("softmax contract", softmax_contract),
        ("scale roundtrip", scale_roundtrip),
        ("differentiable fitting demo", fitting_demo),
        ("parameter budgets", parameter_budgets),
        ("head shape contract", shape_contract),
        ("nms oracle", nms_oracle),
        ("synthetic end-to-end decode", synthetic_decode),
        ("metric fixtures", metric_fixtures),
        ("format robustness", format_robustness),
        ("performance sanity", performance),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(d) => println!("criterion {:2} PASS {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:2} FAIL {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
