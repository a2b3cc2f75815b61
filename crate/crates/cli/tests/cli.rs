use std::path::Path;
use std::process::Command;

use swbn_lab::{bench, heatmap, train, whiten, ExperimentConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_swbn-lab"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const BLOBS: &str = "[model]\nnorm = bn, swbn-kl\nhidden = 12\nalpha = 1e-3\n\
[train]\nepochs = 2\nbatch_size = 32\nseeds = 1, 2\n\
[data]\ndataset = blobs\nn_train = 200\nn_test = 80\ndim = 5\nclasses = 3\nrho = 0.6\n";

#[test]
fn missing_config_exits_2() {
    let out = bin().arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.ini", "[model]\nnorm = batchnorm-9000\n[data]\ndataset = blobs\n");
    let out = bin().arg("--config").arg(&cfg).arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = write_config(dir.path(), "unknown.ini", "[model]\nflavour = vanilla\n");
    let out = bin().arg("--config").arg(&cfg).arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "m.ini",
        "[model]\nnorm = bn\nhidden = 8\n[train]\nepochs = 1\n[data]\ndataset = mnist-idx\ntrain_images = nope1.gz\ntrain_labels = nope2.gz\n\
         test_images = nope3.gz\ntest_labels = nope4.gz\n",
    );
    let out = bin().arg("--config").arg(&cfg).arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_one_csv_per_run_plus_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "b.ini", BLOBS);
    let out_dir = dir.path().join("out");
    let out = bin().arg("--config").arg(&cfg).arg("--out").arg(&out_dir).arg("train").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut csvs: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    assert_eq!(
        csvs,
        [
            "bn_aggregate.csv",
            "bn_seed1.csv",
            "bn_seed2.csv",
            "swbn-kl_aggregate.csv",
            "swbn-kl_seed1.csv",
            "swbn-kl_seed2.csv"
        ]
    );
    let text = std::fs::read_to_string(out_dir.join("bn_seed1.csv")).unwrap();
    // Header, then train+test rows for epochs 0..=2.
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}

#[test]
fn zero_epochs_records_only_the_initial_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let text = BLOBS.replace("epochs = 2", "epochs = 0").replace("seeds = 1, 2", "seed = 4");
    let cfg = ExperimentConfig::parse(
        &format!("{text}[output]\nout_dir = {}\n", dir.path().display()),
        dir.path(),
    )
    .unwrap();
    let summary = train::cmd_train(&cfg).unwrap();
    assert_eq!(summary.runs.len(), 2);
    for run in &summary.runs {
        assert_eq!(run.metrics.len(), 2);
        assert!(run.metrics.iter().all(|m| m.epoch == 0));
    }
}

#[test]
fn whiten_demo_on_identity_stays_put() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(
        &format!(
            "[whiten]\ncriteria = kl, fro\nalphas = 1e-2\nrho = 0\nd = 4\nmax_iters = 10\ntol = 1e-300\n\
             [output]\nout_dir = {}\n",
            dir.path().display()
        ),
        dir.path(),
    )
    .unwrap();
    let runs = whiten::cmd_whiten_demo(&cfg).unwrap();
    assert_eq!(runs.len(), 2);
    for r in &runs {
        assert_eq!(r.final_distance, 0.0);
        let text = std::fs::read_to_string(dir.path().join(&r.file)).unwrap();
        assert!(text.lines().skip(1).all(|l| l.ends_with(",0")), "{text}");
    }
    assert!(dir.path().join("whiten_summary.csv").is_file());
}

fn heatmap_of(dir: &Path, ckpt: &Path, rho: f64) -> heatmap::Heatmap {
    let cfg = ExperimentConfig::parse(
        &format!(
            "[data]\ndataset = gaussian\ndim = 6\nrho = {rho}\nseed = 9\n\
             [heatmap]\ncheckpoint = {}\nsamples = 2500\n[output]\nout_dir = {}\n",
            ckpt.display(),
            dir.display()
        ),
        dir,
    )
    .unwrap();
    heatmap::cmd_heatmap(&cfg).unwrap()
}

#[test]
fn heatmap_of_untrained_and_trained_layers() {
    use swbn::checkpoint::CheckpointWriter;
    use swbn::criteria::Criterion;
    use swbn::data::{equicorrelation, gen_correlated_gaussian};
    use swbn::swbn::SwbnState;

    let dir = tempfile::tempdir().unwrap();
    let save = |s: &SwbnState, name: &str| {
        let mut w = CheckpointWriter::new();
        s.write_checkpoint(&mut w);
        let p = dir.path().join(name);
        std::fs::write(&p, w.finish()).unwrap();
        p
    };
    let mut s = SwbnState::new(6, Criterion::Kl);
    let fresh = save(&s, "fresh.ckpt");

    let untrained = heatmap_of(dir.path(), &fresh, 0.8);
    assert!(untrained.mean_abs_offdiag >= 0.4, "{}", untrained.mean_abs_offdiag);
    assert!(dir.path().join("heatmap.pgm").is_file());
    let identity = heatmap_of(dir.path(), &fresh, 0.0);
    assert!(identity.mean_abs_offdiag < 0.1, "{}", identity.mean_abs_offdiag);

    s = s.with_alpha(1e-2);
    let sigma = equicorrelation(6, 0.8);
    for b in 0..300 {
        let x = gen_correlated_gaussian(6, 128, &sigma, 100 + b).unwrap();
        s.forward_train(&x, None).unwrap();
    }
    let trained = heatmap_of(dir.path(), &save(&s, "trained.ckpt"), 0.8);
    assert!(
        trained.mean_abs_offdiag < untrained.mean_abs_offdiag,
        "{} vs {}",
        trained.mean_abs_offdiag,
        untrained.mean_abs_offdiag
    );
}

#[test]
fn bench_counts_follow_the_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(
        &format!(
            "[bench]\nlayers = swbn-kl, swbn-fro, iternorm, bn\nd = 8, 16\nn = 64\nt = 3\nrepeats = 2\n\
             [output]\nout_dir = {}\n",
            dir.path().display()
        ),
        dir.path(),
    )
    .unwrap();
    let rows = bench::cmd_bench(&cfg).unwrap();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        let (d, n) = (r.d as u64, r.n as u64);
        let want = match r.layer.as_str() {
            "iternorm" => 2 * d * d * n + 9 * d * d * d,
            "bn" => 0,
            _ => 2 * d * d * n + 3 * d * d * d,
        };
        assert_eq!(r.matmul_count, want, "{r:?}");
    }
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(bench::BENCH_HEADER));
    assert_eq!(csv.lines().count(), 9);
}
