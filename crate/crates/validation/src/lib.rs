//! Desk-scale robustness experiments on the synthetic background-colour task.

use std::collections::BTreeSet;

use super_core::data::{generate_synthetic, GroupedDataset, Split, SpuriousSpec};
use super_core::evaluation::{evaluate, mean_head_iou, MetricsReport};
use super_core::guidance::{GuidanceTable, OracleGuidance};
use super_core::model::Head;
use super_core::trainer::{train, train_erm_baseline, Lambda3, TrainConfig};
use super_core::Result;

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const IOU_THRESHOLD: f64 = 0.5;

/// Two classes, ρ = 0.95, 2000 train and group-balanced 400 val / 800 test.
pub fn desk_dataset(seed: u64) -> Result<GroupedDataset> {
    generate_synthetic(&SpuriousSpec { seed, ..SpuriousSpec::default() })
}

pub fn desk_config(seed: u64, lambda2: f64) -> TrainConfig {
    TrainConfig {
        beta: 1.0,
        lambda1: 0.01,
        lambda2,
        lambda3: Lambda3::Absolute(0.001),
        learning_rate: 1e-3,
        batch_size: 32,
        epochs: 30,
        latent_half: 16,
        seed,
        ..TrainConfig::default()
    }
}

pub const DESK_LAMBDA2: f64 = 0.1;
pub const LAMBDA2_SWEEP: [f64; 4] = [0.0, 0.01, DESK_LAMBDA2, 100.0];

#[derive(Clone, Debug)]
pub struct DeskRun {
    pub test: MetricsReport,
    pub best_epoch: usize,
    pub iou_head1: f64,
    pub iou_head2: f64,
}

fn summarise(ds: &GroupedDataset, params: &super_core::model::ModelParams, best_epoch: usize) -> Result<DeskRun> {
    let test = evaluate(params, ds, Split::Test)?;
    let records: Vec<_> = ds.split(Split::Test).collect();
    Ok(DeskRun {
        test,
        best_epoch,
        iou_head1: mean_head_iou(params, &records, Head::Relevant, IOU_THRESHOLD)?,
        iou_head2: mean_head_iou(params, &records, Head::Irrelevant, IOU_THRESHOLD)?,
    })
}

/// Full objective with oracle guidance corrupted at rate `corruption`.
pub fn run_super(ds: &GroupedDataset, cfg: &TrainConfig, corruption: f64) -> Result<DeskRun> {
    let (h, w) = cfg.model_config(ds)?.feature_size();
    let provider = OracleGuidance::new(ds, h, w, corruption, cfg.seed)?;
    let table = GuidanceTable::resolve(ds, Split::Train, None, Some(&provider))?;
    let out = train(ds, cfg, &table, &BTreeSet::new())?;
    summarise(ds, &out.state.params, out.state.best_epoch)
}

pub fn run_erm(ds: &GroupedDataset, cfg: &TrainConfig) -> Result<DeskRun> {
    let (out, _) = train_erm_baseline(ds, cfg)?;
    summarise(ds, &out.state.params, out.state.best_epoch)
}

/// Median of a nonempty slice; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
