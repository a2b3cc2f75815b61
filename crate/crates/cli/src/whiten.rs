//! `whiten-demo`: the whitening iteration on a fixed correlation matrix, one
//! trajectory per (criterion, step size).

use std::fs;

use swbn::criteria::{whiten_iterate, Criterion};
use swbn::data::equicorrelation;
use swbn::fmt::g17;
use swbn::Matrix;

use crate::{ensure_dir, io_err, write_file, CliError, ExperimentConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct WhitenRun {
    pub criterion: Criterion,
    pub alpha: f64,
    pub iterations: usize,
    pub final_distance: f64,
    pub converged: bool,
    pub file: String,
}

pub fn trajectory_file_name(criterion: Criterion, alpha: f64) -> String {
    format!("whiten_{}_alpha{alpha:e}.csv", criterion.as_str())
}

pub fn demo_sigma(cfg: &ExperimentConfig) -> Result<Matrix, CliError> {
    match &cfg.whiten.sigma {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            Ok(Matrix::read_csv(&text)?)
        }
        None => Ok(equicorrelation(cfg.whiten.d, cfg.whiten.rho)),
    }
}

pub fn cmd_whiten_demo(cfg: &ExperimentConfig) -> Result<Vec<WhitenRun>, CliError> {
    let sigma = demo_sigma(cfg)?;
    let out = &cfg.output.out_dir;
    ensure_dir(out)?;
    let w = &cfg.whiten;
    let mut runs = Vec::new();
    for &criterion in &w.criteria {
        for &alpha in &w.alphas {
            let (_, report) = whiten_iterate(&sigma, criterion, alpha, w.max_iters, w.tol)?;
            let file = trajectory_file_name(criterion, alpha);
            write_file(&out.join(&file), |f| Ok(report.write_csv(f)?))?;
            runs.push(WhitenRun {
                criterion,
                alpha,
                iterations: report.iterations,
                final_distance: report.final_distance,
                converged: report.converged,
                file,
            });
        }
    }
    let summary = out.join("whiten_summary.csv");
    write_file(&summary, |f| {
        use std::io::Write;
        let mut body = String::from("criterion,alpha,iterations,final_distance,converged\n");
        for r in &runs {
            body.push_str(&format!(
                "{},{},{},{},{}\n",
                r.criterion.as_str(),
                g17(r.alpha),
                r.iterations,
                g17(r.final_distance),
                r.converged
            ));
        }
        f.write_all(body.as_bytes()).map_err(io_err(&summary))
    })?;
    Ok(runs)
}
