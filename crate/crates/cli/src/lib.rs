//! Experiment runner: INI configs in, CSV/PGM artifacts and checkpoints out.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub mod bench;
pub mod config;
pub mod heatmap;
pub mod train;
pub mod whiten;

pub use config::{Command, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Lab(#[from] swbn::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for configuration problems, 3 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes a file through `body`, mapping I/O failures to the file path.
pub(crate) fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush().map_err(io_err(path))
}

/// Runs one subcommand against a loaded config.
pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.require(command)?;
    match command {
        Command::Train => {
            let summary = train::cmd_train(cfg)?;
            for r in &summary.runs {
                println!(
                    "{:<10} seed {:<4} test accuracy {:.4}  test loss {:.4}",
                    r.norm, r.seed, r.final_test_accuracy, r.final_test_loss
                );
            }
        }
        Command::WhitenDemo => {
            for r in whiten::cmd_whiten_demo(cfg)? {
                println!(
                    "{:<4} alpha {:<8e} iterations {:<6} distance {:.3e}{}",
                    r.criterion.as_str(),
                    r.alpha,
                    r.iterations,
                    r.final_distance,
                    if r.converged { "" } else { "  (not converged)" }
                );
            }
        }
        Command::Heatmap => {
            let h = heatmap::cmd_heatmap(cfg)?;
            println!("d {}  mean_abs_offdiag {:.6}", h.d, h.mean_abs_offdiag);
        }
        Command::Bench => {
            for r in bench::cmd_bench(cfg)? {
                println!(
                    "{:<10} d {:<5} n {:<7} {:>10.3} ms ± {:.3}  matmul {}",
                    r.layer, r.d, r.n, r.mean_ms, r.std_ms, r.matmul_count
                );
            }
        }
    }
    Ok(())
}

/// Train/test datasets for the configured source.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(swbn::data::Dataset, swbn::data::Dataset), CliError> {
    use config::DatasetKind;
    use swbn::data::{gen_blobs, load_idx_dataset, Split};
    let d = &cfg.data;
    match d.dataset {
        DatasetKind::MnistIdx => {
            let need = |p: &Option<PathBuf>, key: &str| {
                p.clone()
                    .ok_or_else(|| CliError::Config(format!("dataset = mnist-idx needs [data] {key}")))
            };
            let train = load_idx_dataset(
                need(&d.train_images, "train_images")?,
                need(&d.train_labels, "train_labels")?,
                d.train_limit,
                Split::Train,
            )?;
            let test = load_idx_dataset(
                need(&d.test_images, "test_images")?,
                need(&d.test_labels, "test_labels")?,
                d.test_limit,
                Split::Test,
            )?;
            Ok((train, test))
        }
        DatasetKind::Blobs => Ok((
            gen_blobs(d.n_train, d.dim, d.classes, d.separation, d.rho, d.seed, Split::Train)?,
            gen_blobs(d.n_test, d.dim, d.classes, d.separation, d.rho, d.seed, Split::Test)?,
        )),
        DatasetKind::Gaussian => Err(CliError::Config(
            "dataset = gaussian has no labels; use blobs or mnist-idx for training".into(),
        )),
    }
}

/// `samples` unlabelled feature columns from the configured source.
pub fn load_features(cfg: &ExperimentConfig, samples: usize) -> Result<swbn::Matrix, CliError> {
    use config::DatasetKind;
    use swbn::data::{equicorrelation, gen_correlated_gaussian};
    let d = &cfg.data;
    match d.dataset {
        DatasetKind::Gaussian => Ok(gen_correlated_gaussian(
            d.dim,
            samples,
            &equicorrelation(d.dim, d.rho),
            d.seed,
        )?),
        DatasetKind::MnistIdx => {
            let path = d
                .test_images
                .clone()
                .ok_or_else(|| CliError::Config("dataset = mnist-idx needs [data] test_images".into()))?;
            Ok(swbn::data::load_idx_images(path, Some(samples))?.features)
        }
        DatasetKind::Blobs => {
            let ds = swbn::data::gen_blobs(
                samples,
                d.dim,
                d.classes,
                d.separation,
                d.rho,
                d.seed,
                swbn::data::Split::Test,
            )?;
            Ok(ds.features)
        }
    }
}
