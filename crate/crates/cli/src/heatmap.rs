//! `heatmap`: correlation of the last norm layer's pre-affine output.

use std::fs;

use swbn::checkpoint::CheckpointReader;
use swbn::matrix::{mean_abs_offdiag, CorrelationAccumulator, Matrix, PgmScale};
use swbn::nn::{Network, MODEL_TAG};
use swbn::NormRegistry;

use crate::config::PgmMapping;
use crate::{ensure_dir, io_err, load_features, write_file, CliError, ExperimentConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub d: usize,
    pub mean_abs_offdiag: f64,
    pub correlation: Matrix,
}

/// Columns per forward pass, to bound memory on large sample counts.
const CHUNK: usize = 1000;

pub fn cmd_heatmap(cfg: &ExperimentConfig) -> Result<Heatmap, CliError> {
    let path = cfg
        .heatmap
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("[heatmap] checkpoint is required".into()))?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let registry = NormRegistry::builtin();
    let opts = cfg.norm_options();
    let x = load_features(cfg, cfg.heatmap.samples)?;

    let is_model = CheckpointReader::new(&text).peek_key() == Some(MODEL_TAG);
    let mut acc: Option<CorrelationAccumulator> = None;
    let model;
    let layer;
    let probe: Box<dyn Fn(&Matrix) -> swbn::Result<Matrix>> = if is_model {
        model = Network::from_checkpoint_str(&text, &registry, &opts)?;
        if !model.has_norm() {
            return Err(swbn::Error::InvalidArgument("the model has no normalization layer".into()).into());
        }
        Box::new(|x: &Matrix| Ok(model.predict_with_probe(x)?.1.expect("model has a norm layer")))
    } else {
        layer = registry.load(&mut CheckpointReader::new(&text), &opts)?;
        Box::new(|x: &Matrix| layer.predict_pre_affine(x))
    };

    let n = x.cols();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let out = probe(&x.select_columns(&idx))?;
        acc.get_or_insert_with(|| CorrelationAccumulator::new(out.rows())).push(&out)?;
        start += CHUNK;
    }
    let correlation = acc.expect("at least two samples").correlation()?;
    let d = correlation.rows();
    let mean_abs_offdiag = if d >= 2 { mean_abs_offdiag(&correlation)? } else { 0.0 };

    let out = &cfg.output.out_dir;
    ensure_dir(out)?;
    let scale = match cfg.output.pgm_scale {
        PgmMapping::Magnitude => PgmScale::Magnitude,
        PgmMapping::Signed => PgmScale::Signed,
    };
    write_file(&out.join("heatmap.csv"), |w| Ok(correlation.write_csv(w)?))?;
    write_file(&out.join("heatmap.pgm"), |w| Ok(correlation.write_pgm(w, scale)?))?;
    Ok(Heatmap {
        d,
        mean_abs_offdiag,
        correlation,
    })
}
