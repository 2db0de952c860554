use super::metrics::MetricsReport;
use super::trainer::{evaluate, train, EpochCurve, TrainConfig};
use crate::checkpoint::diff_models;
use crate::data::Sample;
use crate::error::Result;
use crate::model::{Model, ModelConfig, FAB_PARAM_NAMES};

pub struct TrainedRun {
    pub model: Model,
    pub curve: EpochCurve,
    pub report: MetricsReport,
}

/// Builds a model from `model_cfg` with `seed`, trains it with the same
/// seed driving batch order, and evaluates on `val`.
pub fn train_and_evaluate(
    model_cfg: &ModelConfig,
    class_names: &[String],
    train_set: &[Sample],
    val: &[Sample],
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedRun> {
    let mut model = Model::build(model_cfg.clone(), class_names.to_vec(), seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let curve = train(&mut model, train_set, val, &cfg)?;
    let report = evaluate(&model, val)?;
    Ok(TrainedRun {
        model,
        curve,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub acc_with_fab: f64,
    pub acc_without_fab: f64,
    /// The two trained checkpoints differ only by the attention parameters
    /// and the `use_fab` header entry.
    pub diff_confined: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean_with(&self) -> f64 {
        self.rows.iter().map(|r| r.acc_with_fab).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_without(&self) -> f64 {
        self.rows.iter().map(|r| r.acc_without_fab).sum::<f64>() / self.rows.len() as f64
    }

    /// `mean_with - mean_without` in accuracy percentage points.
    pub fn mean_difference_points(&self) -> f64 {
        100.0 * (self.mean_with() - self.mean_without())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,acc_with_fab,acc_without_fab,diff_confined\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.seed, r.acc_with_fab, r.acc_without_fab, r.diff_confined
            ));
        }
        s
    }
}

/// For each seed, trains a model with and without the attention block on
/// the same split and batch order, and records both test accuracies.
pub fn ablation_run(
    model_cfg: &ModelConfig,
    class_names: &[String],
    train_set: &[Sample],
    val: &[Sample],
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    let with_cfg = ModelConfig {
        use_fab: true,
        ..model_cfg.clone()
    };
    let without_cfg = ModelConfig {
        use_fab: false,
        ..model_cfg.clone()
    };
    let mut table = AblationTable::default();
    for &seed in seeds {
        let with = train_and_evaluate(&with_cfg, class_names, train_set, val, train_cfg, seed)?;
        let without = train_and_evaluate(&without_cfg, class_names, train_set, val, train_cfg, seed)?;
        let diff = diff_models(&with.model, &without.model);
        let diff_confined =
            diff.config_keys == ["use_fab"] && diff.structural == FAB_PARAM_NAMES;
        table.rows.push(AblationRow {
            seed,
            acc_with_fab: with.report.accuracy,
            acc_without_fab: without.report.accuracy,
            diff_confined,
        });
    }
    Ok(table)
}
