//! Acceptance suite: one test per release criterion, each printing a
//! PASS line on success (run with `--nocapture` to see them inline).

mod common;

use std::collections::HashSet;
use std::time::Instant;

use ecgformer_core::dataset::{ingest, IngestSettings, LeadDataset};
use ecgformer_core::eval::{compute_metrics, confusion, kfold_split};
use ecgformer_core::models::{
    grad_check_model, randomize_params, relative_position_index, shift_attention_mask,
    standard_gradcheck_batch, window_partition, window_reverse, AnyModel, BeitConfig, BeitModel,
    ModelConfig, SwinConfig, SwinModel, VitConfig, MASK_FILL,
};
use ecgformer_core::preprocess::{
    binarize, preprocess_report, BinarizeConfig, GrayImage, LeadGridSpec,
};
use ecgformer_core::tensor::{GradCheckOptions, Tape, Tensor};
use ecgformer_core::train::{adamw_step, lr_at_step, train, train_accuracy, OptimizerState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn pass(name: &str, detail: &str) {
    println!("ACCEPTANCE {name}: PASS ({detail})");
}

/// Gradient fidelity: full forward+loss of every variant matches central
/// finite differences (step 1e-5) below 1e-4 relative error, within five
/// minutes total.
#[test]
fn criterion_gradient_fidelity() {
    let start = Instant::now();
    let opts = GradCheckOptions::new(1e-5, 1e-4);
    let cases = [
        ("vit", ModelConfig::Vit(VitConfig::gradcheck()), 3u64),
        ("swin", ModelConfig::Swin(SwinConfig::gradcheck()), 2),
        ("beit", ModelConfig::Beit(BeitConfig::gradcheck()), 2),
    ];
    let mut details = Vec::new();
    for (name, config, seed) in cases {
        let mut model = AnyModel::new(&config, seed).unwrap();
        randomize_params(&mut model, seed, 0.25);
        let batch = standard_gradcheck_batch(config.image_side(), seed);
        let report = grad_check_model(&model, &batch, opts).unwrap();
        assert!(
            report.passed,
            "{name}: max rel err {} at {:?}",
            report.max_rel_err, report.worst
        );
        details.push(format!("{name} max_rel={:.2e}", report.max_rel_err));
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 300.0,
        "gradcheck took {:.1}s, budget is 300s",
        elapsed.as_secs_f64()
    );
    pass(
        "gradient-fidelity",
        &format!("{}; {:.1}s total", details.join(", "), elapsed.as_secs_f64()),
    );
}

/// Overfit sanity: every variant reaches ≥95% training accuracy on a
/// fixed 32-sample synthetic lead set within 200 epochs at tiny config.
#[test]
fn criterion_overfit_sanity() {
    let dataset = common::separable_leads(8, 64, 40);
    assert_eq!(dataset.len(), 32);
    // the hierarchical variant wants a gentler rate than the plain ones
    let cases = [
        ("vit", ModelConfig::Vit(VitConfig::tiny()), 2e-3, 40),
        ("swin", ModelConfig::Swin(SwinConfig::tiny()), 5e-4, 60),
        ("beit", ModelConfig::Beit(BeitConfig::tiny()), 2e-3, 40),
    ];
    let mut details = Vec::new();
    for (name, config, base_lr, epochs) in cases {
        let cfg = TrainConfig {
            epochs,
            batch_size: 8,
            base_lr,
            warmup_ratio: 0.1,
            optimizer: Default::default(),
            seed: 41,
            decay_exclude_norm_and_bias: true,
        };
        assert!(cfg.epochs <= 200);
        let out = train(&dataset, &config, &cfg).unwrap();
        let acc = train_accuracy(&out.model, &dataset).unwrap();
        assert!(acc >= 0.95, "{name} train accuracy {acc}");
        details.push(format!("{name} acc={acc:.3} in {} epochs", cfg.epochs));
    }
    pass("overfit-sanity", &details.join(", "));
}

/// Preprocessing exactness: a golden report with one stroke per grid cell
/// yields 12 leads with exactly one foreground component each, and the
/// τ=40 threshold rule is pixel-exact.
#[test]
fn criterion_preprocessing_exactness() {
    // golden report → 12 single-stroke leads
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("golden.png");
    common::write_report_png(&report, 0);
    let leads = preprocess_report(
        &report,
        None,
        &BinarizeConfig::default(),
        &LeadGridSpec::default(),
        16,
    )
    .unwrap();
    assert_eq!(leads.len(), 12);
    let labels: HashSet<String> = leads.iter().map(|l| l.lead_label.to_string()).collect();
    assert_eq!(labels.len(), 12);
    for lead in &leads {
        let components = common::count_components(&lead.image);
        assert_eq!(components, 1, "lead {} has {components} strokes", lead.lead_label);
    }

    // pixel-exact threshold rule on a full intensity sweep written to disk
    let px: Vec<u8> = (0..=255).collect();
    let gray_png = tmp.path().join("sweep.png");
    image::GrayImage::from_raw(16, 16, px.clone())
        .unwrap()
        .save(&gray_png)
        .unwrap();
    let decoded = image::open(&gray_png).unwrap().to_luma8();
    let gray = GrayImage::new(16, 16, decoded.into_raw()).unwrap();
    let binary = binarize(&gray, &BinarizeConfig { threshold: 40 });
    for (i, (&bit, &intensity)) in binary.pixels.iter().zip(&px).enumerate() {
        assert_eq!(bit == 1, intensity < 40, "pixel {i} intensity {intensity}");
    }
    pass("preprocessing-exactness", "12 single-stroke leads; τ=40 sweep exact");
}

/// Dataset arithmetic: a root mirroring the published class counts
/// ingests to 240/233/172/172 reports and 2880/2796/2064/2064 leads,
/// totals 817 and 9,804.
#[test]
fn criterion_dataset_arithmetic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    common::write_synthetic_root(&root, [240, 233, 172, 172], false);
    let out_dir = tmp.path().join("out");
    let settings = IngestSettings {
        roi: None,
        binarize: BinarizeConfig::default(),
        grid: LeadGridSpec::default(),
        resize: 16,
    };
    let summary = ingest(&root, &out_dir, &settings, 4).unwrap();
    assert!(summary.failures.is_empty());
    assert_eq!(summary.reports_per_class, [240, 233, 172, 172]);
    assert_eq!(summary.leads_per_class, [2880, 2796, 2064, 2064]);
    assert_eq!(summary.total_reports(), 817);
    assert_eq!(summary.total_leads(), 9804);
    let manifest = LeadDataset::load(&out_dir.join("manifest.csv")).unwrap();
    assert_eq!(manifest.len(), 9804);
    pass("dataset-arithmetic", "817 reports, 9804 leads, class counts exact");
}

/// Split properties: fold sizes {1961×4, 1960} on 9,804 ids, stratified
/// class counts within ±1, exact disjoint cover, and grouping keeps all
/// 12 leads of a report together.
#[test]
fn criterion_split_properties() {
    let mut labels = Vec::with_capacity(9804);
    for (class, count) in [(0usize, 2880usize), (1, 2796), (2, 2064), (3, 2064)] {
        labels.extend(std::iter::repeat_n(class, count));
    }
    let split = kfold_split(&labels, 5, 42, true, None).unwrap();
    let mut sizes: Vec<usize> = split.folds.iter().map(|f| f.len()).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![1960, 1961, 1961, 1961, 1961]);

    let mut seen = HashSet::new();
    for fold in &split.folds {
        for &i in fold {
            assert!(seen.insert(i), "sample {i} appears twice");
        }
    }
    assert_eq!(seen.len(), 9804);

    for class in 0..4 {
        let total = labels.iter().filter(|&&l| l == class).count() as f64;
        for fold in &split.folds {
            let count = fold.iter().filter(|&&i| labels[i] == class).count() as f64;
            assert!((count - total / 5.0).abs() <= 1.0, "class {class}: {count}");
        }
    }

    // grouping: 817 reports × 12 leads, exhaustive whole-report check
    let report_labels: Vec<usize> = labels
        .chunks(12)
        .map(|chunk| chunk[0])
        .collect::<Vec<_>>();
    let mut lead_labels = Vec::new();
    let mut groups = Vec::new();
    for (r, &label) in report_labels.iter().enumerate() {
        for _ in 0..12 {
            lead_labels.push(label);
            groups.push(format!("report{r}"));
        }
    }
    let grouped = kfold_split(&lead_labels, 5, 43, true, Some(&groups)).unwrap();
    let mut fold_of_report = vec![usize::MAX; report_labels.len()];
    for (f, fold) in grouped.folds.iter().enumerate() {
        for &i in fold {
            let report = i / 12;
            if fold_of_report[report] == usize::MAX {
                fold_of_report[report] = f;
            } else {
                assert_eq!(fold_of_report[report], f, "report {report} spans folds");
            }
        }
    }
    assert!(fold_of_report.iter().all(|&f| f != usize::MAX));
    pass("split-properties", "sizes {1961x4,1960}; ±1 stratification; grouping exhaustive");
}

/// Metrics oracle: compute_metrics agrees with a per-sample brute-force
/// oracle on 100 random confusion matrices within 1e-12, and weighted
/// recall equals accuracy exactly.
#[test]
fn criterion_metrics_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(44);
    for case in 0..100 {
        let n = rng.random_range(1..300);
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let truths: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let cm = confusion(&preds, &truths, 4).unwrap();
        let got = compute_metrics(&cm).unwrap();

        // brute force from the raw pairs, no shared code path
        let mut correct = 0usize;
        let mut per_class = Vec::new();
        for c in 0..4usize {
            let tp = preds
                .iter()
                .zip(&truths)
                .filter(|(p, t)| **p == c && **t == c)
                .count() as f64;
            let pred_c = preds.iter().filter(|&&p| p == c).count() as f64;
            let true_c = truths.iter().filter(|&&t| t == c).count() as f64;
            let precision = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
            let recall = if true_c > 0.0 { tp / true_c } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            per_class.push((precision, recall, f1, true_c));
        }
        correct += preds.iter().zip(&truths).filter(|(p, t)| p == t).count();
        let accuracy = correct as f64 / n as f64;

        for (c, &(p, r, f1, support)) in per_class.iter().enumerate() {
            assert!((got.per_class[c].precision - p).abs() < 1e-12, "case {case}");
            assert!((got.per_class[c].recall - r).abs() < 1e-12);
            assert!((got.per_class[c].f1 - f1).abs() < 1e-12);
            assert_eq!(got.per_class[c].support as f64, support);
        }
        let macro_p: f64 = per_class.iter().map(|m| m.0).sum::<f64>() / 4.0;
        let weighted_p: f64 =
            per_class.iter().map(|m| m.0 * m.3).sum::<f64>() / n as f64;
        let weighted_r_generic: f64 =
            per_class.iter().map(|m| m.1 * m.3).sum::<f64>() / n as f64;
        assert!((got.macro_precision - macro_p).abs() < 1e-12);
        assert!((got.weighted_precision - weighted_p).abs() < 1e-12);
        assert!((got.accuracy - accuracy).abs() < 1e-12);
        assert!((weighted_r_generic - accuracy).abs() < 1e-12);

        // the identity, exact
        assert_eq!(got.weighted_recall.to_bits(), got.accuracy.to_bits());
    }
    pass("metrics-oracle", "100 random matrices within 1e-12; recall identity exact");
}

/// Swin mechanism: bit-exact window round trips, masks matching the
/// exhaustive region-id oracle, and masked weights below 1e-40.
#[test]
fn criterion_swin_mechanism() {
    // round trips
    let mut rng = ChaCha20Rng::seed_from_u64(45);
    let values: Vec<f64> = (0..8 * 8 * 5).map(|_| rng.random::<f64>() - 0.5).collect();
    let x = Tensor::new(vec![8, 8, 5], values).unwrap();
    let back = window_reverse(&window_partition(&x, 4).unwrap(), 8, 8).unwrap();
    for (a, b) in back.values().iter().zip(x.values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    // region-id oracle at the two stated geometries
    for (side, m, s) in [(4usize, 2usize, 1usize), (8, 4, 2)] {
        let masks = shift_attention_mask(side, side, m, s).unwrap();
        let band = |i: usize| {
            if i < side - m {
                0u8
            } else if i < side - s {
                1
            } else {
                2
            }
        };
        let region_after_shift =
            |a: usize, b: usize| band((a + s) % side) * 3 + band((b + s) % side);
        let windows_per_side = side / m;
        for wr in 0..windows_per_side {
            for wc in 0..windows_per_side {
                let mask = &masks[wr * windows_per_side + wc];
                let mut tokens = Vec::new();
                for i in 0..m {
                    for j in 0..m {
                        tokens.push(region_after_shift(wr * m + i, wc * m + j));
                    }
                }
                for (a, &ra) in tokens.iter().enumerate() {
                    for (b, &rb) in tokens.iter().enumerate() {
                        let expected = if ra == rb { 0.0 } else { MASK_FILL };
                        assert_eq!(
                            mask.values()[a * tokens.len() + b],
                            expected,
                            "side {side} window ({wr},{wc}) pair ({a},{b})"
                        );
                    }
                }
            }
        }
    }

    // masked attention weights through the real forward path
    let model = SwinModel::new(SwinConfig::gradcheck(), 46).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let mut rng = ChaCha20Rng::seed_from_u64(47);
    let image: Vec<f64> = (0..16 * 16)
        .map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
        .collect();
    let mut trace = Vec::new();
    model
        .forward_traced(&mut tape, &bound, &image, &mut trace)
        .unwrap();
    let mut masked_pairs = 0usize;
    for t in trace.iter().filter(|t| t.mask.is_some()) {
        let mask = t.mask.as_ref().unwrap();
        for (w, &mv) in tape.values(t.attn).iter().zip(mask.values()) {
            if mv == MASK_FILL {
                masked_pairs += 1;
                assert!(*w < 1e-40, "masked weight {w}");
            }
        }
    }
    assert!(masked_pairs > 0);
    pass(
        "swin-mechanism",
        &format!("round trips bit-exact; oracles match; {masked_pairs} masked weights < 1e-40"),
    );
}

/// BEiT mechanism: the relative-position table has exactly (2·side−1)²
/// distinct values, depends only on offsets (exhaustive at side 3), and
/// the mean-pool head equals a CLS-free averaging oracle exactly.
#[test]
fn criterion_beit_mechanism() {
    for side in [1usize, 2, 3, 4] {
        let idx = relative_position_index(side);
        let distinct: HashSet<usize> = idx.iter().copied().collect();
        assert_eq!(distinct.len(), (2 * side - 1) * (2 * side - 1), "side {side}");
    }
    // translation dependence, exhaustive at side 3
    let side = 3;
    let n = side * side;
    let idx = relative_position_index(side);
    for i in 0..n {
        for j in 0..n {
            for i2 in 0..n {
                for j2 in 0..n {
                    let off = (
                        (i / side) as i64 - (j / side) as i64,
                        (i % side) as i64 - (j % side) as i64,
                    );
                    let off2 = (
                        (i2 / side) as i64 - (j2 / side) as i64,
                        (i2 % side) as i64 - (j2 % side) as i64,
                    );
                    assert_eq!(idx[i * n + j] == idx[i2 * n + j2], off == off2);
                }
            }
        }
    }

    // mean-pool head vs direct averaging oracle
    let model = BeitModel::new(BeitConfig::gradcheck(), 48).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let mut rng = ChaCha20Rng::seed_from_u64(49);
    let image: Vec<f64> = (0..16 * 16)
        .map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
        .collect();
    let (logits, trace) = model.forward_traced(&mut tape, &bound, &image).unwrap();
    let hidden = tape.values(trace.final_hidden);
    let d = model.cfg.embed_dim;
    let tokens = model.cfg.tokens();
    let mut pooled_oracle = vec![0.0; d];
    for (c, slot) in pooled_oracle.iter_mut().enumerate() {
        *slot = (0..tokens).map(|r| hidden[r * d + c]).sum::<f64>() / tokens as f64;
    }
    for (got, want) in tape.values(trace.pooled).iter().zip(&pooled_oracle) {
        assert!((got - want).abs() < 1e-15);
    }
    // head applied to the oracle pooled vector reproduces the logits
    let w = model.params.get("head.weight").unwrap();
    let b = model.params.get("head.bias").unwrap();
    for class in 0..4 {
        let mut v = b.values()[class];
        for c in 0..d {
            v += pooled_oracle[c] * w.values()[c * 4 + class];
        }
        let got = tape.values(logits)[class];
        assert!((got - v).abs() < 1e-12, "class {class}: {got} vs {v}");
    }
    pass("beit-mechanism", "offset table exhaustive; mean-pool head equals oracle");
}

/// Optimizer and schedule: the first AdamW step matches the hand-derived
/// value within 1e-6 and the learning rate hits base exactly at warmup
/// end for all three published profiles.
#[test]
fn criterion_optimizer_schedule() {
    // hand-derived single step: θ=1, g=1, lr=0.1 → ≈0.899
    let mut params = ecgformer_core::models::ParamSet::default();
    params.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap());
    let mut state = OptimizerState::new(&params);
    adamw_step(
        &mut params,
        &[vec![1.0]],
        &mut state,
        0.1,
        &Default::default(),
        &[false],
    )
    .unwrap();
    let theta = params.get("w").unwrap().values()[0];
    assert!((theta - 0.899).abs() < 1e-6, "θ' = {theta}");

    // lr(W) == base_lr exactly, step counts from the real profiles over
    // the 9,804-lead dataset
    for name in TrainConfig::PROFILE_NAMES {
        let profile = TrainConfig::profile(name).unwrap();
        let steps_per_epoch = 9804usize.div_ceil(profile.batch_size);
        let total = (profile.epochs * steps_per_epoch) as u64;
        let warmup = (profile.warmup_ratio * total as f64).round() as u64;
        let lr = lr_at_step(warmup, total, profile.base_lr, profile.warmup_ratio).unwrap();
        assert_eq!(lr, profile.base_lr, "profile {name}");
    }
    pass("optimizer-schedule", "AdamW step ≈0.899 within 1e-6; lr(W)==base for all profiles");
}

/// Determinism: two identical seeded `train` runs produce bit-identical
/// checkpoints and loss curves on disk.
#[test]
fn criterion_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    common::write_synthetic_root(&root, [2, 2, 2, 2], true);
    let settings = IngestSettings {
        roi: None,
        binarize: BinarizeConfig::default(),
        grid: LeadGridSpec::default(),
        resize: 16,
    };

    let mut artifacts = Vec::new();
    for run in 0..2 {
        let out_dir = tmp.path().join(format!("run{run}"));
        ingest(&root, &out_dir, &settings, 2).unwrap();
        let dataset = LeadDataset::load(&out_dir.join("manifest.csv")).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            base_lr: 1e-3,
            warmup_ratio: 0.1,
            optimizer: Default::default(),
            seed: 77,
            decay_exclude_norm_and_bias: true,
        };
        let out = train(&dataset, &ModelConfig::Vit(VitConfig::gradcheck()), &cfg).unwrap();
        let ckpt = out_dir.join("checkpoint.bin");
        ecgformer_core::models::save_checkpoint(&out.model, &ckpt).unwrap();
        let curve = out_dir.join("loss_curve.csv");
        out.curve.write_csv(&curve).unwrap();
        artifacts.push((std::fs::read(&ckpt).unwrap(), std::fs::read(&curve).unwrap()));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "checkpoints differ");
    assert_eq!(artifacts[0].1, artifacts[1].1, "loss curves differ");
    assert!(!artifacts[0].0.is_empty() && !artifacts[0].1.is_empty());
    pass("determinism", "checkpoint and loss curve bytes identical across runs");
}
