//! `bench`: wall-clock of one forward plus backward pass of a single layer,
//! with the exact matmul multiplication count of the forward pass.

use std::time::Instant;

use log::info;
use swbn::data::Rng;
use swbn::fmt::g17;
use swbn::{Matrix, NormRegistry, OpCounter};

use crate::{ensure_dir, io_err, write_file, CliError, ExperimentConfig};

pub const BENCH_HEADER: &str = "layer,d,n,T,mean_ms,std_ms,matmul_count";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub layer: String,
    pub d: usize,
    pub n: usize,
    /// Newton iterations; only meaningful for IterNorm.
    pub t: Option<usize>,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub matmul_count: u64,
}

impl BenchRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.layer,
            self.d,
            self.n,
            self.t.map(|t| t.to_string()).unwrap_or_default(),
            g17(self.mean_ms),
            g17(self.std_ms),
            self.matmul_count
        )
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Times `repeats` forward+backward passes of one freshly built layer.
pub fn bench_layer(
    registry: &NormRegistry,
    layer: &str,
    d: usize,
    cfg: &ExperimentConfig,
) -> Result<BenchRow, CliError> {
    let b = &cfg.bench;
    let mut opts = cfg.norm_options();
    opts.iternorm_t = b.t;
    let mut rng = Rng::derive(b.seed, d as u64);
    let x = normal_matrix(d, b.n, &mut rng);
    let grad = normal_matrix(d, b.n, &mut rng);
    let mut l = registry.build(layer, d, &opts)?;

    let mut counter = OpCounter::new();
    l.forward_train(&x, Some(&mut counter))?;
    l.backward(&grad)?;
    for _ in 0..b.warmup {
        l.forward_train(&x, None)?;
        l.backward(&grad)?;
    }
    let mut times = Vec::with_capacity(b.repeats);
    for rep in 0..b.repeats {
        let start = Instant::now();
        l.forward_train(&x, None)?;
        l.backward(&grad)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        info!("{layer} d={d} run {rep}: {ms:.3} ms");
        times.push(ms);
    }
    let (mean_ms, std_ms) = crate::train::mean_std(&times);
    Ok(BenchRow {
        layer: layer.to_string(),
        d,
        n: b.n,
        t: (layer == "iternorm").then_some(b.t),
        mean_ms,
        std_ms,
        matmul_count: counter.matmul_mults(),
    })
}

pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>, CliError> {
    let registry = NormRegistry::builtin();
    for layer in &cfg.bench.layers {
        if registry.get(layer).is_none() {
            return Err(CliError::Config(format!(
                "[bench] layer {layer:?} is not one of {}",
                registry.names().join(", ")
            )));
        }
    }
    let out = &cfg.output.out_dir;
    ensure_dir(out)?;
    let mut rows = Vec::new();
    for layer in &cfg.bench.layers {
        for &d in &cfg.bench.dims {
            rows.push(bench_layer(&registry, layer, d, cfg)?);
        }
    }
    let path = out.join("bench.csv");
    write_file(&path, |w| {
        use std::io::Write;
        writeln!(w, "{BENCH_HEADER}").map_err(io_err(&path))?;
        for r in &rows {
            writeln!(w, "{}", r.to_csv_line()).map_err(io_err(&path))?;
        }
        Ok(())
    })?;
    Ok(rows)
}
