//! The five-row component ablation on synthetic clips.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{synth_splits, Dataset, SynthSpec};
use crate::error::Result;
use crate::model::{RalConfig, RalModel};
use crate::train::{EpochStats, TrainConfig, Trainer};

/// `(name, dlsv, rao, acvi)` in table order.
pub const ROWS: [(&str, bool, bool, bool); 5] = [
    ("baseline", false, false, false),
    ("dlsv", true, false, false),
    ("dlsv+rao", true, true, false),
    ("acvi", false, false, true),
    ("dlsv+rao+acvi", true, true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub synth: SynthSpec,
    pub train_size: usize,
    pub val_size: usize,
    /// Switches are overridden per row.
    pub model: RalConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            train_size: 512,
            val_size: 128,
            model: RalConfig::desk(4),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub row: String,
    pub seed: u64,
    pub val_acc: f64,
    pub seconds: f64,
    pub history: Vec<EpochStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub enable_dlsv: bool,
    pub enable_rao: bool,
    pub enable_acvi: bool,
    pub params: usize,
    pub val_acc: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunResult>,
    pub wall_seconds: f64,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Time for the sweep if `workers` run the jobs in parallel, each taking
    /// as long as the slowest observed run.
    pub fn projected_seconds(&self, workers: usize) -> f64 {
        let slowest = self.runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
        self.runs.len().div_ceil(workers.max(1)) as f64 * slowest
    }

    pub fn to_markdown(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "" };
        let mut s = String::from("| row | DLSV | RAO | ACVI | params | val acc (mean ± std) | per seed |\n");
        s.push_str("|---|:-:|:-:|:-:|--:|--:|---|\n");
        for r in &self.rows {
            let per: Vec<String> = r.val_acc.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.1} ± {:.1} | {} |\n",
                r.name,
                mark(r.enable_dlsv),
                mark(r.enable_rao),
                mark(r.enable_acvi),
                r.params,
                100.0 * r.mean,
                100.0 * r.std,
                per.join(" / ")
            ));
        }
        s
    }
}

/// Training and validation sets shared by every row.
pub fn datasets(cfg: &AblationConfig) -> Result<(Dataset, Dataset)> {
    synth_splits(&cfg.synth, cfg.train_size, cfg.val_size)
}

pub fn run_one(cfg: &AblationConfig, row: usize, seed: u64, train: &Dataset, val: &Dataset) -> Result<RunResult> {
    let (name, d, r, a) = ROWS[row];
    let start = Instant::now();
    let model_cfg = cfg.model.clone().with_switches(d, r, a);
    let model = RalModel::new(&model_cfg, seed)?;
    let mut t = Trainer::new(
        model,
        TrainConfig {
            seed,
            ..cfg.train.clone()
        },
    )?;
    t.fit(train, Some(val), |_, _| Ok(()))?;
    let val_acc = t.history.last().and_then(|s| s.val_acc).unwrap_or(0.0);
    Ok(RunResult {
        row: name.to_string(),
        seed,
        val_acc,
        seconds: start.elapsed().as_secs_f64(),
        history: t.history,
    })
}

/// Every row under every seed, jobs spread over the current rayon pool.
/// `on_run` sees each run as it finishes.
pub fn run(cfg: &AblationConfig, on_run: impl Fn(&RunResult) + Sync) -> Result<AblationReport> {
    let start = Instant::now();
    let (train, val) = datasets(cfg)?;
    let jobs: Vec<(usize, u64)> = (0..ROWS.len())
        .flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(r, s)| {
            let out = run_one(cfg, r, s, &train, &val)?;
            on_run(&out);
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = ROWS
        .iter()
        .map(|&(name, d, r, a)| {
            let accs: Vec<f64> = runs.iter().filter(|x| x.row == name).map(|x| x.val_acc).collect();
            let n = accs.len().max(1) as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let std = (accs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let params = RalModel::<f32>::new(&cfg.model.clone().with_switches(d, r, a), 0)?.trainable_count();
            Ok(AblationRow {
                name: name.to_string(),
                enable_dlsv: d,
                enable_rao: r,
                enable_acvi: a,
                params,
                val_acc: accs,
                mean,
                std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        rows,
        runs,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_sweep_has_five_rows_with_switches() {
        let mut model = RalConfig::desk(4);
        model.stage_channels = vec![4];
        model.acvi_after_stage = vec![true];
        model.frontend_channels = 4;
        model.tcn_branch_channels = 4;
        let cfg = AblationConfig {
            synth: SynthSpec {
                frames: 4,
                height: 16,
                width: 16,
                ..SynthSpec::default()
            },
            train_size: 8,
            val_size: 4,
            model,
            train: TrainConfig {
                epochs: 1,
                batch_size: 4,
                ..TrainConfig::default()
            },
            seeds: vec![0],
        };
        let report = run(&cfg, |_| {}).unwrap();
        assert_eq!(report.rows.len(), 5);
        assert_eq!(report.runs.len(), 5);
        for (row, (name, d, r, a)) in report.rows.iter().zip(ROWS) {
            assert_eq!((row.name.as_str(), row.enable_dlsv, row.enable_rao, row.enable_acvi), (name, d, r, a));
        }
        let base = report.row("baseline").unwrap().params;
        assert_eq!(report.row("dlsv").unwrap().params, base);
        assert!(report.row("dlsv+rao+acvi").unwrap().params > base);
        assert_eq!(report.to_markdown().lines().count(), 7);
    }
}
