//! `train`: one run per (norm, seed), identical initial dense weights per seed.

use std::fs;
use std::io::Write;

use log::info;
use swbn::data::Split;
use swbn::fmt::g17;
use swbn::nn::{self, MetricsRow, ModelSpec};
use swbn::NormRegistry;

use crate::{ensure_dir, io_err, load_datasets, write_file, CliError, ExperimentConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub norm: String,
    pub seed: u64,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSummary {
    pub runs: Vec<RunSummary>,
}

impl TrainSummary {
    /// Runs for one norm label, in seed order.
    pub fn for_norm<'a>(&'a self, norm: &'a str) -> impl Iterator<Item = &'a RunSummary> + 'a {
        self.runs.iter().filter(move |r| r.norm == norm)
    }
}

pub fn norm_label(norm: &Option<String>) -> &str {
    norm.as_deref().unwrap_or("none")
}

pub const AGGREGATE_HEADER: &str = "epoch,split,runs,loss_mean,loss_std,accuracy_mean,accuracy_std,\
mean_abs_offdiag_lastnorm_mean,mean_abs_offdiag_lastnorm_std";

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-(epoch, split) mean and spread across seeds.
pub fn write_aggregate<W: Write>(runs: &[&[MetricsRow]], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{AGGREGATE_HEADER}")?;
    let Some(first) = runs.first() else {
        return Ok(());
    };
    for (i, row) in first.iter().enumerate() {
        let rows: Vec<&MetricsRow> = runs.iter().filter_map(|r| r.get(i)).collect();
        let pick = |f: fn(&MetricsRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (lm, ls) = pick(|r| r.loss);
        let (am, as_) = pick(|r| r.accuracy);
        let offdiag: Vec<f64> = rows.iter().filter_map(|r| r.mean_abs_offdiag_lastnorm).collect();
        let (om, os) = if offdiag.len() == rows.len() {
            let (m, s) = mean_std(&offdiag);
            (g17(m), g17(s))
        } else {
            (String::new(), String::new())
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{om},{os}",
            row.epoch,
            row.split.as_str(),
            rows.len(),
            g17(lm),
            g17(ls),
            g17(am),
            g17(as_)
        )?;
    }
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary, CliError> {
    let registry = NormRegistry::builtin();
    for norm in cfg.model.norms.iter().flatten() {
        if registry.get(norm).is_none() {
            return Err(CliError::Config(format!(
                "[model] norm {norm:?} is not one of none, {}",
                registry.names().join(", ")
            )));
        }
    }
    let (train_data, test_data) = load_datasets(cfg)?;
    let out = &cfg.output.out_dir;
    ensure_dir(out)?;
    let mut summary = TrainSummary::default();

    for norm in &cfg.model.norms {
        let label = norm_label(norm);
        let spec = ModelSpec::mlp(train_data.dim(), &cfg.model.hidden, norm.as_deref(), train_data.classes);
        let mut logs = Vec::with_capacity(cfg.train.seeds.len());
        for &seed in &cfg.train.seeds {
            info!("training {label} seed {seed}");
            let run = nn::train(&spec, &train_data, &test_data, &cfg.train_config(seed), &registry)?;
            let path = out.join(format!("{label}_seed{seed}.csv"));
            write_file(&path, |w| Ok(nn::write_metrics_csv(&run.metrics, w)?))?;
            if cfg.output.checkpoints {
                let ckpt = out.join(format!("{label}_seed{seed}.ckpt"));
                fs::write(&ckpt, run.network.to_checkpoint_string()).map_err(io_err(&ckpt))?;
            }
            let last_test = run
                .metrics
                .iter()
                .rev()
                .find(|r| r.split == Split::Test)
                .expect("train always records an initial evaluation");
            summary.runs.push(RunSummary {
                norm: label.to_string(),
                seed,
                final_test_accuracy: last_test.accuracy,
                final_test_loss: last_test.loss,
                metrics: run.metrics.clone(),
            });
            logs.push(run.metrics);
        }
        if logs.len() > 1 {
            let path = out.join(format!("{label}_aggregate.csv"));
            let slices: Vec<&[MetricsRow]> = logs.iter().map(Vec::as_slice).collect();
            write_file(&path, |w| write_aggregate(&slices, w).map_err(io_err(&path)))?;
        }
    }
    Ok(summary)
}
