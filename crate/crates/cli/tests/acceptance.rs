//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line with its measured values.

use std::path::{Path, PathBuf};
use std::time::Instant;

use apn_core::attention::{AttentionConfig, AttentionVariant, LevelAttention};
use apn_core::checkpoint;
use apn_core::config::{arch_spec, RunConfig};
use apn_core::corpus;
use apn_core::gradcheck::suite::verification_suite;
use apn_core::metrics::MetricsReport;
use apn_core::model::Apn;
use apn_core::param::{Mode, ParamStore, Session};
use apn_core::rng::Rng;
use apn_core::synth;
use apn_core::tensor::Tensor;
use apn_core::train::{evaluate, train, TrainConfig};

fn pass(criterion: &str, detail: &str) {
    println!("ACCEPTANCE {criterion}: PASS ({detail})");
}

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("apn-acceptance-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("scratch dir");
    dir
}

fn run_apn(args: &[&str]) -> (String, i32) {
    let output = std::process::Command::new(env!("CARGO_BIN_EXE_apn"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        String::from_utf8_lossy(&output.stdout).into_owned(),
        output.status.code().unwrap_or(-1),
    )
}

/// Criterion 1: reference parameter and multiply-add counts at 224x224,
/// both within 5%, reported by the count command in under five seconds.
#[test]
fn acceptance_1_complexity_reproduction() {
    let expectations: [(&str, f64, f64); 7] = [
        ("fpn18", 13.3e6, 4.34e9),
        ("apn-ca18", 13.4e6, 4.34e9),
        ("apn-csca18", 13.8e6, 4.88e9),
        ("apn-csca-theta18", 13.8e6, 4.90e9),
        ("apn-csca-theta-plus18", 13.8e6, 4.90e9),
        ("fpn34", 23.4e6, 6.19e9),
        ("apn-csca34", 23.9e6, 6.73e9),
    ];
    let started = Instant::now();
    let out = scratch_dir("count");
    let mut details = Vec::new();
    for (arch, params_expect, flops_expect) in expectations {
        let (stdout, code) = run_apn(&[
            "count",
            "--arch",
            arch,
            "--input",
            "224",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "count {arch} failed: {stdout}");
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap())
                .unwrap();
        let params = report["total_params"].as_u64().unwrap() as f64;
        let flops = report["total_flops"].as_u64().unwrap() as f64;
        let params_err = (params - params_expect).abs() / params_expect;
        let flops_err = (flops - flops_expect).abs() / flops_expect;
        assert!(
            params_err < 0.05,
            "{arch}: params {params:.4e} vs {params_expect:.4e} ({params_err:.3})"
        );
        assert!(
            flops_err < 0.05,
            "{arch}: flops {flops:.4e} vs {flops_expect:.4e} ({flops_err:.3})"
        );
        details.push(format!(
            "{arch} {:.1}%/{:.1}%",
            params_err * 100.0,
            flops_err * 100.0
        ));
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "count took {elapsed:?}");
    let _ = std::fs::remove_dir_all(&out);
    pass(
        "1 complexity",
        &format!(
            "param/FLOP deviations {} in {elapsed:.2?}",
            details.join(", ")
        ),
    );
}

/// Criterion 2: the gradient suite passes at 1e-6 per op and 1e-4 end to
/// end across every attention variant, within two minutes.
#[test]
fn acceptance_2_gradient_suite() {
    let started = Instant::now();
    let entries = verification_suite(None).expect("suite runs");
    let failures: Vec<&str> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| e.name.as_str())
        .collect();
    assert!(failures.is_empty(), "failing gradient checks: {failures:?}");
    let variants = entries
        .iter()
        .filter(|e| e.name.starts_with("end-to-end"))
        .count();
    assert_eq!(variants, 8, "all variants checked end to end");
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "suite took {elapsed:?}");
    let worst = entries.iter().map(|e| e.max_rel_err).fold(0.0f64, f64::max);
    pass(
        "2 gradients",
        &format!(
            "{} checks, worst rel err {worst:.2e}, {elapsed:.2?}",
            entries.len()
        ),
    );
}

/// Criterion 3: attention with unit masks and identity refinements equals
/// the plain fusion, over 20 random seeds.
#[test]
fn acceptance_3_reduction_identities() {
    let cfg = AttentionConfig::new(AttentionVariant::CscaAlpha, 2, 2);
    let mut store = ParamStore::<f64>::new();
    let level = LevelAttention::build(&mut store, 0, "att", 4, &cfg).unwrap();
    level.post().unwrap().set_identity(&mut store);

    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let a = Tensor::from_fn(vec![2, 4, 3, 3], || rng.next_normal());
        let b = Tensor::from_fn(vec![2, 4, 3, 3], || rng.next_normal());

        let mut s = Session::new(&mut store, Mode::Eval);
        let (x, u) = (s.input(a.clone()), s.input(b.clone()));
        let ones_c = Tensor::ones(vec![2, 4, 1, 1]);
        let ones_s = Tensor::ones(vec![2, 1, 3, 3]);
        let (sa, se) = (s.input(ones_c.clone()), s.input(ones_c.clone()));
        let (xa, xe) = (s.input(ones_s.clone()), s.input(ones_s));
        let csca =
            apn_core::attention::csca_combine(&mut s, x, u, sa, se, xa, xe, level.post().unwrap())
                .unwrap();
        let ca = apn_core::attention::ca_scale(&mut s, x, u, sa, se).unwrap();
        let base = s.tape.add(x, u).unwrap();
        for id in [csca, ca] {
            for (lhs, rhs) in s
                .tape
                .value(id)
                .data()
                .iter()
                .zip(s.tape.value(base).data())
            {
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    assert!(worst <= 1e-6, "reduction identity error {worst}");
    pass(
        "3 reduction identities",
        &format!("max abs deviation {worst:.2e} over 20 seeds"),
    );
}

/// Criterion 4: two full toy training runs with one seed produce bitwise
/// identical checkpoints and metric logs.
#[test]
fn acceptance_4_training_determinism() {
    let config = RunConfig::toy(AttentionVariant::CscaAlpha, 17);
    let run = || {
        let (train_set, val_set) = match &config.data {
            apn_core::config::DataConfig::Synthetic(spec) => {
                synth::generate(spec, config.seed).unwrap()
            }
            _ => unreachable!(),
        };
        let mut store = ParamStore::<f32>::new();
        let model = Apn::build(&mut store, config.seed, &config.model).unwrap();
        train(
            &model,
            &mut store,
            &train_set,
            &val_set,
            &config.train,
            config.seed,
            None,
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.best_checkpoint, b.best_checkpoint, "checkpoints differ");
    assert_eq!(a.log_lines(), b.log_lines(), "metric logs differ");
    pass(
        "4 determinism",
        &format!(
            "two {}-epoch runs: identical checkpoint ({} bytes) and log",
            a.log.len(),
            a.best_checkpoint.len()
        ),
    );
}

/// Criterion 5: on the synthetic multi-granularity set, the toy combined
/// model reaches 90% train accuracy within 200 epochs; over 5 seeds its
/// mean best validation accuracy is at least the baseline's; and species
/// accuracy dominates fine accuracy on the same predictions.
#[test]
fn acceptance_5_toy_learning() {
    let started = Instant::now();
    let seeds: Vec<u64> = (0..5).collect();
    let mut means = std::collections::BTreeMap::new();
    let mut csca_max_train: f64 = 0.0;
    let mut coarse_vs_fine: Option<(f64, f64)> = None;

    for variant in [AttentionVariant::CscaAlpha, AttentionVariant::None] {
        let mut best_vals = Vec::new();
        for &seed in &seeds {
            let config = RunConfig::toy(variant, seed);
            assert!(config.train.epochs <= 200);
            let apn_core::config::DataConfig::Synthetic(spec) = &config.data else {
                unreachable!()
            };
            let (train_set, val_set) = synth::generate(spec, seed).unwrap();
            let mut store = ParamStore::<f32>::new();
            let model = Apn::build(&mut store, seed, &config.model).unwrap();
            let result = train(
                &model,
                &mut store,
                &train_set,
                &val_set,
                &config.train,
                seed,
                None,
            )
            .unwrap();
            best_vals.push(result.best_val_top1);

            if variant == AttentionVariant::CscaAlpha {
                let max_train = result
                    .log
                    .iter()
                    .map(|r| r.train_top1)
                    .fold(0.0f64, f64::max);
                csca_max_train = csca_max_train.max(max_train);
                if seed == 0 {
                    // species vs fine accuracy on the best checkpoint's predictions
                    checkpoint::load_from_slice(&mut store, &result.best_checkpoint).unwrap();
                    let eval = evaluate(&model, &mut store, &val_set, 16).unwrap();
                    coarse_vs_fine = Some((eval.coarse_top1, eval.metrics.top1));
                }
            }
        }
        means.insert(
            if variant == AttentionVariant::None {
                "fpn"
            } else {
                "csca"
            },
            best_vals.iter().sum::<f64>() / best_vals.len() as f64,
        );
    }

    let (csca_mean, fpn_mean) = (means["csca"], means["fpn"]);
    assert!(
        csca_max_train >= 0.90,
        "combined-attention train top1 {csca_max_train} below 0.90"
    );
    assert!(
        csca_mean >= fpn_mean,
        "mean val: csca {csca_mean} < fpn {fpn_mean}"
    );
    let (coarse, fine) = coarse_vs_fine.expect("seed 0 evaluated");
    assert!(coarse >= fine, "coarse {coarse} < fine {fine}");
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 900.0,
        "toy learning took {elapsed:?}"
    );
    pass(
        "5 toy learning",
        &format!(
            "train {csca_max_train:.3}, mean val csca {csca_mean:.3} vs fpn {fpn_mean:.3}, coarse {coarse:.3} >= fine {fine:.3}, {elapsed:.1?}"
        ),
    );
}

/// Criterion 6: macro metrics match a brute-force per-class computation on
/// 100 random confusion matrices, exactly.
#[test]
fn acceptance_6_metric_oracle_equivalence() {
    let mut checked = 0;
    for seed in 0..100u64 {
        let mut rng = Rng::new(seed);
        let classes = 2 + rng.next_below(6);
        let n = 1 + rng.next_below(80);
        let truth: Vec<usize> = (0..n).map(|_| rng.next_below(classes)).collect();
        let predicted: Vec<usize> = (0..n).map(|_| rng.next_below(classes)).collect();
        let report = MetricsReport::from_predictions(classes, &truth, &predicted).unwrap();

        // brute force directly over the label pairs
        let correct = truth.iter().zip(&predicted).filter(|(t, p)| t == p).count();
        let top1 = correct as f64 / n as f64;
        let (mut ps, mut rs, mut fs, mut present) = (0.0, 0.0, 0.0, 0usize);
        for c in 0..classes {
            let tp = truth
                .iter()
                .zip(&predicted)
                .filter(|&(&t, &p)| t == c && p == c)
                .count() as f64;
            let in_truth = truth.iter().filter(|&&t| t == c).count() as f64;
            let in_pred = predicted.iter().filter(|&&p| p == c).count() as f64;
            if in_truth == 0.0 {
                continue;
            }
            present += 1;
            let precision = if in_pred == 0.0 { 0.0 } else { tp / in_pred };
            let recall = tp / in_truth;
            ps += precision;
            rs += recall;
            fs += if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
        }
        assert_eq!(report.top1, top1);
        assert_eq!(report.macro_precision, ps / present as f64);
        assert_eq!(report.macro_recall, rs / present as f64);
        assert_eq!(report.macro_f1, fs / present as f64);
        checked += 1;
    }
    pass(
        "6 metric oracle",
        &format!("{checked} random confusion matrices, exact match"),
    );
}

/// Criterion 7: dedup and reconcile reproduce the hand-traced examples and
/// the full 2/3-label vote-pattern enumeration.
#[test]
fn acceptance_7_corpus_tools() {
    // dedup hand trace: distances {2, 10, 12} at threshold 5
    let records: Vec<corpus::ImageRecord> = ["a", "b", "c"]
        .iter()
        .map(|id| corpus::ImageRecord::new(*id, vec![0.0; 64], 8, 8).unwrap())
        .collect();
    let hashes = vec![0b11u64, 0b00, 0b1111_1111_1111];
    let report = corpus::dedup(&records, &hashes, 5).unwrap();
    assert_eq!(report.kept, vec!["a", "c"]);
    assert_eq!(report.duplicates.len(), 1);
    assert_eq!(report.duplicates[0].removed_id, "b");
    assert_eq!(report.duplicates[0].hamming, 2);

    // exact duplicates at threshold 0 and first-wins at threshold 64
    let mut rng = Rng::new(1);
    let gray: Vec<f64> = (0..64).map(|_| rng.next_f64() * 255.0).collect();
    let pair = vec![
        corpus::ImageRecord::new("x", gray.clone(), 8, 8).unwrap(),
        corpus::ImageRecord::new("y", gray, 8, 8).unwrap(),
    ];
    let pair_hashes = corpus::hash_records(&pair, 1).unwrap();
    assert_eq!(
        corpus::dedup(&pair, &pair_hashes, 0).unwrap().kept,
        vec!["x"]
    );

    // reconcile: exhaustive enumeration over 3 symbols
    let symbols = ["A", "B", "C"];
    let mut patterns = 0;
    for &a in &symbols {
        for &b in &symbols {
            let two = corpus::reconcile(&corpus::AnnotationRecord {
                image_id: "i".into(),
                labels: vec![a.into(), b.into()],
            })
            .unwrap();
            if a == b {
                assert_eq!(two, corpus::ReconcileOutcome::Accepted(a.into()));
            } else {
                assert_eq!(two, corpus::ReconcileOutcome::NeedsThird);
            }
            patterns += 1;
            for &c in &symbols {
                let three = corpus::reconcile(&corpus::AnnotationRecord {
                    image_id: "i".into(),
                    labels: vec![a.into(), b.into(), c.into()],
                })
                .unwrap();
                let expected = if a == b || a == c {
                    corpus::ReconcileOutcome::Accepted(a.into())
                } else if b == c {
                    corpus::ReconcileOutcome::Accepted(b.into())
                } else {
                    corpus::ReconcileOutcome::Dropped
                };
                assert_eq!(three, expected, "pattern ({a},{b},{c})");
                patterns += 1;
            }
        }
    }
    pass(
        "7 corpus tools",
        &format!("hand traces plus {patterns} vote patterns"),
    );
}

/// Criterion 8: checkpoints round-trip bitwise, and mask export for a
/// constant input image produces spatially constant PGM files.
#[test]
fn acceptance_8_checkpoint_and_mask_export() {
    let dir = scratch_dir("masks");
    let config = RunConfig::toy(AttentionVariant::CscaAlpha, 3);
    let config_path = dir.join("toy.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    // build -> init checkpoint; round trip must be bitwise stable
    let out_dir = dir.join("run");
    let (_, code) = run_apn(&[
        "build",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let ckpt_path = out_dir.join("init.ckpt");
    let bytes = std::fs::read(&ckpt_path).unwrap();
    let mut store = ParamStore::<f32>::new();
    let _model = Apn::build(&mut store, config.seed, &config.model).unwrap();
    checkpoint::load_from_slice(&mut store, &bytes).unwrap();
    assert_eq!(
        checkpoint::save_to_vec(&store),
        bytes,
        "round trip not bitwise"
    );

    // constant (black) input image: every exported mask must be constant
    let image_path = dir.join("constant.pgm");
    let image = apn_core::pnm::PnmImage::gray(32, 32, vec![0u8; 32 * 32]).unwrap();
    apn_core::pnm::write(&image, &image_path).unwrap();
    let masks_dir = dir.join("masks");
    let (stdout, code) = run_apn(&[
        "export-masks",
        "--config",
        config_path.to_str().unwrap(),
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--image",
        image_path.to_str().unwrap(),
        "--out",
        masks_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "export failed: {stdout}");
    let mut mask_files = 0;
    for entry in std::fs::read_dir(&masks_dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().map(|e| e == "pgm").unwrap_or(false) {
            let mask = apn_core::pnm::read(&path).unwrap();
            let first = mask.pixels[0];
            assert!(
                mask.pixels.iter().all(|&p| p == first),
                "{} is not spatially constant",
                path.display()
            );
            mask_files += 1;
        }
    }
    assert!(
        mask_files >= 2,
        "expected spatial masks for the fused level"
    );
    assert!(masks_dir.join("ca_gates.tsv").exists());
    let _ = std::fs::remove_dir_all(&dir);
    pass(
        "8 checkpoint & masks",
        &format!("bitwise round trip, {mask_files} constant mask files"),
    );
}
