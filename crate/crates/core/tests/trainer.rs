//! Training-loop behavior on small synthetic lead sets.

mod common;

use ecgformer_core::models::{ModelConfig, VitConfig};
use ecgformer_core::train::{
    grid_search, train, GridAxes, GridStatus, TrainConfig, TrainError, ValidationSplit,
};
use ecgformer_core::dataset::LeadDataset;

fn micro_vit() -> ModelConfig {
    ModelConfig::Vit(VitConfig::gradcheck())
}

fn quick_config(epochs: usize, batch_size: usize, base_lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        base_lr,
        warmup_ratio: 0.1,
        optimizer: Default::default(),
        seed,
        decay_exclude_norm_and_bias: true,
    }
}

#[test]
fn single_sample_loss_decreases() {
    let mut dataset = common::separable_leads(1, 16, 1);
    dataset.samples.truncate(1);
    let out = train(&dataset, &micro_vit(), &quick_config(50, 1, 1e-3, 2)).unwrap();
    let first = out.curve.points.first().unwrap().loss;
    let last = out.curve.final_loss().unwrap();
    assert_eq!(out.curve.points.len(), 50);
    assert!(last < first, "loss did not decrease: {first} -> {last}");
}

#[test]
fn same_seed_gives_bit_identical_curves_and_params() {
    let dataset = common::separable_leads(4, 16, 3);
    let cfg = quick_config(3, 4, 1e-3, 7);
    let a = train(&dataset, &micro_vit(), &cfg).unwrap();
    let b = train(&dataset, &micro_vit(), &cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    for ((n1, t1), (n2, t2)) in a.model.params().iter().zip(b.model.params().iter()) {
        assert_eq!(n1, n2);
        for (x, y) in t1.values().iter().zip(t2.values()) {
            assert_eq!(x.to_bits(), y.to_bits(), "param {n1} differs");
        }
    }
    // a different seed must change the curve
    let c = train(&dataset, &micro_vit(), &quick_config(3, 4, 1e-3, 8)).unwrap();
    assert_ne!(a.curve, c.curve);
}

#[test]
fn loss_curve_steps_strictly_increase_and_csv_shape() {
    let dataset = common::separable_leads(3, 16, 4);
    // batch 5 over 12 samples: last partial batch is trained, 3 steps/epoch
    let out = train(&dataset, &micro_vit(), &quick_config(2, 5, 1e-3, 5)).unwrap();
    assert_eq!(out.curve.points.len(), 6);
    for pair in out.curve.points.windows(2) {
        assert!(pair[0].step < pair[1].step);
    }
    let csv = out.curve.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,epoch,loss"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn empty_dataset_is_an_error() {
    let empty = LeadDataset::default();
    assert!(matches!(
        train(&empty, &micro_vit(), &quick_config(1, 1, 1e-3, 1)),
        Err(TrainError::EmptyDataset)
    ));
}

#[test]
fn out_of_range_label_is_an_error() {
    let mut dataset = common::separable_leads(1, 16, 6);
    dataset.samples[0].label = 7;
    assert!(matches!(
        train(&dataset, &micro_vit(), &quick_config(1, 1, 1e-3, 1)),
        Err(TrainError::BadLabel { label: 7, classes: 4 })
    ));
}

#[test]
fn absurd_learning_rate_diverges_with_last_good_params() {
    let dataset = common::separable_leads(2, 16, 8);
    let err = train(&dataset, &micro_vit(), &quick_config(60, 8, 1e160, 9)).unwrap_err();
    match err {
        TrainError::Diverged { step, last_good, curve } => {
            assert!(step > 0, "first recorded loss comes from fresh params");
            assert!(!last_good.is_empty());
            assert!(last_good.iter().all(|(_, t)| t.is_finite()));
            assert_eq!(curve.points.len(), step as usize);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn singleton_grid_returns_its_only_cell() {
    let dataset = common::separable_leads(3, 16, 10);
    let split = ValidationSplit {
        train: (0..8).collect(),
        val: (8..12).collect(),
    };
    let axes = GridAxes {
        base_lrs: vec![1e-4],
        epochs: vec![5],
        batch_sizes: vec![4],
    };
    let outcome = grid_search(
        &dataset,
        &micro_vit(),
        &quick_config(1, 1, 1e-3, 11),
        &axes,
        &split,
    )
    .unwrap();
    assert_eq!(outcome.cells.len(), 1);
    assert_eq!(outcome.best.base_lr, 1e-4);
    assert_eq!(outcome.best.epochs, 5);
}

#[test]
fn two_by_two_grid_trains_four_cells() {
    let dataset = common::separable_leads(3, 16, 12);
    let split = ValidationSplit {
        train: (0..8).collect(),
        val: (8..12).collect(),
    };
    let axes = GridAxes {
        base_lrs: vec![1e-4, 1e-3],
        epochs: vec![2, 4],
        batch_sizes: vec![4],
    };
    let outcome = grid_search(
        &dataset,
        &micro_vit(),
        &quick_config(1, 1, 1e-3, 13),
        &axes,
        &split,
    )
    .unwrap();
    assert_eq!(outcome.cells.len(), 4);
}

#[test]
fn divergent_cell_is_recorded_and_search_continues() {
    let dataset = common::separable_leads(3, 16, 14);
    let split = ValidationSplit {
        train: (0..8).collect(),
        val: (8..12).collect(),
    };
    let axes = GridAxes {
        base_lrs: vec![1e160, 1e-3],
        epochs: vec![30],
        batch_sizes: vec![8],
    };
    let outcome = grid_search(
        &dataset,
        &micro_vit(),
        &quick_config(1, 1, 1e-3, 15),
        &axes,
        &split,
    )
    .unwrap();
    assert_eq!(outcome.cells.len(), 2);
    let failed: Vec<bool> = outcome
        .cells
        .iter()
        .map(|c| matches!(c.status, GridStatus::Failed { .. }))
        .collect();
    assert_eq!(failed, vec![true, false]);
    assert_eq!(outcome.best.base_lr, 1e-3);
}

#[test]
fn empty_axis_is_an_error() {
    let dataset = common::separable_leads(2, 16, 16);
    let split = ValidationSplit { train: vec![0, 1], val: vec![2, 3] };
    let axes = GridAxes {
        base_lrs: vec![],
        epochs: vec![1],
        batch_sizes: vec![1],
    };
    assert!(matches!(
        grid_search(&dataset, &micro_vit(), &quick_config(1, 1, 1e-3, 17), &axes, &split),
        Err(TrainError::EmptyGridAxis("base_lrs"))
    ));
}
