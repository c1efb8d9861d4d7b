//! Command implementations behind the `mlecs` binary.
//!
//! * `run` — execute the configured experiment; writes `metrics.jsonl`
//!   (one record per round), `summary.json`, the resolved `config.toml`,
//!   and the final server-SLM adapter checkpoint `adapters.bin`.
//! * `gradcheck` — the randomized gradient verification suite.
//! * `bench-comm` — parameter/byte accounting for the configured models
//!   and the published-scale fixture.
//! * `ablate` — every mode on a shared seed, emitting a comparison table.
//! * `selftest` — fast end-to-end battery; exit status 0 iff all pass.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{parse_config, parse_override_pairs, ExperimentConfig, Mode};
use crate::gradsuite::run_gradient_suite;
use crate::report::{comm_ratio, PaperScaleFixture, RoundReport};
use crate::round::{analytic_uplink_params, run_experiment_full, setup_experiment};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub enum Command {
    Run {
        config: PathBuf,
        overrides: Vec<String>,
        out: PathBuf,
        workers: Option<usize>,
        seed: Option<u64>,
    },
    Gradcheck {
        seed: Option<u64>,
        cases: usize,
    },
    BenchComm {
        config: Option<PathBuf>,
        overrides: Vec<String>,
        seed: Option<u64>,
    },
    Ablate {
        config: PathBuf,
        overrides: Vec<String>,
        out: PathBuf,
        workers: Option<usize>,
        seed: Option<u64>,
    },
    Selftest {
        seed: Option<u64>,
    },
}

fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let pairs = parse_override_pairs(overrides)?;
    let mut config = match path {
        Some(p) => parse_config(p, &pairs)?,
        None => ExperimentConfig::default().apply_overrides(&pairs)?,
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn write_stream(path: &Path, reports: &[RoundReport]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for report in reports {
        writeln!(f, "{}", report.stream_line())?;
    }
    Ok(())
}

fn cmd_run(
    config_path: &Path,
    overrides: &[String],
    out: &Path,
    workers: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let config = load_config(Some(config_path), overrides, seed)?;
    let workers = workers.unwrap_or(config.n_devices);
    fs::create_dir_all(out)?;
    let outcome = run_experiment_full(&config, workers)?;

    write_stream(&out.join("metrics.jsonl"), &outcome.reports)?;
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&outcome.summary).expect("summary serializes"),
    )?;
    fs::write(out.join("config.toml"), config.to_toml_string())?;
    crate::models::checkpoint::write_adapters(
        &out.join("adapters.bin"),
        &outcome.server.distribute_adapters(),
        config.seed,
    )?;

    let s = &outcome.summary;
    println!(
        "mode={} seed={} rounds={} avg_f1={:.4} best_f1={:.4} worst_f1={:.4} server_f1={:.4}",
        s.mode, s.seed, s.rounds, s.avg_f1, s.best_f1, s.worst_f1, s.server_f1
    );
    println!(
        "uplink {} params ({} bytes), downlink {} params ({} bytes); artifacts in {}",
        s.total_uplink_params,
        s.total_uplink_bytes,
        s.total_downlink_params,
        s.total_downlink_bytes,
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(seed: Option<u64>, cases: usize) -> Result<()> {
    let report = run_gradient_suite(seed.unwrap_or(17), cases)?;
    println!(
        "gradient suite: {} cases in {:.2}s",
        report.total_cases, report.runtime_secs
    );
    for path in &report.paths {
        println!(
            "  {:<24} {:>4} cases  worst rel err {:>12.3e}  (tolerance {:.0e})  {}",
            path.name,
            path.cases,
            path.worst_rel_err,
            path.tolerance,
            if path.passed() { "ok" } else { "FAILED" }
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::GradientTolerance {
            detail: report
                .paths
                .iter()
                .filter(|p| !p.passed())
                .map(|p| format!("{} at {:.3e}", p.name, p.worst_rel_err))
                .collect::<Vec<_>>()
                .join(", "),
        })
    }
}

fn cmd_bench_comm(config_path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<()> {
    let config = load_config(config_path, overrides, seed)?;
    let (server, devices) = setup_experiment(&config)?;

    println!("configured models (rank {}):", config.train.rank);
    let anchors = server.public_train.len() as u64 * server.unified.latent_dim as u64;
    for device in &devices {
        let total = device.model.total_param_count();
        let adapters = device.model.backbone.adapter_param_count();
        let uplink = adapters + 1;
        let downlink = adapters + anchors;
        println!(
            "  device {}: total {:>8} params | uplink/round {:>6} ({} bytes) = {:.4}% | downlink/round {:>7} ({} bytes)",
            device.id,
            total,
            uplink,
            uplink * 4,
            100.0 * comm_ratio(uplink, total)?,
            downlink,
            downlink * 4,
        );
    }
    let round_uplink = analytic_uplink_params(&config, &devices);
    println!("  per-round uplink across {} devices: {} params", devices.len(), round_uplink);

    println!("published-scale fixture (720M-parameter backbone):");
    for rank in [8usize, 24] {
        let fixture = PaperScaleFixture::new(rank);
        println!(
            "  rank {:>2}: adapters {:>9} + fused {:>9} params -> {:.3}% of total",
            rank,
            fixture.adapter_params,
            fixture.fused_payload,
            100.0 * fixture.ratio()
        );
    }
    let r8 = PaperScaleFixture::new(8);
    let r24 = PaperScaleFixture::new(24);
    println!(
        "  adapter volume at rank 24 is exactly {}x rank 8",
        r24.adapter_params / r8.adapter_params
    );
    Ok(())
}

fn cmd_ablate(
    config_path: &Path,
    overrides: &[String],
    out: &Path,
    workers: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let base = load_config(Some(config_path), overrides, seed)?;
    let workers = workers.unwrap_or(base.n_devices);
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for mode in Mode::all() {
        let mut config = base.clone();
        config.mode = mode;
        let (_, summary) = crate::round::run_experiment(&config, workers)?;
        rows.push((mode.name(), summary));
    }
    let header = "mode\tseed\tavg_f1\tbest_f1\tworst_f1\tserver_f1";
    let mut table = String::from(header);
    table.push('\n');
    println!("{header}");
    for (name, s) in &rows {
        let line = format!(
            "{name}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            s.seed, s.avg_f1, s.best_f1, s.worst_f1, s.server_f1
        );
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
    }
    fs::write(out.join("ablation.tsv"), table)?;
    Ok(())
}

fn cmd_selftest(seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(23);
    let mut failures = Vec::new();
    let mut check = |name: &str, result: Result<()>| {
        match result {
            Ok(()) => println!("ok      {name}"),
            Err(e) => {
                println!("FAILED  {name}: {e}");
                failures.push(name.to_string());
            }
        }
    };

    check("gradient_suite", selftest_gradients(seed));
    check("volume_geometry", selftest_volume());
    check("contrastive_oracles", selftest_contrastive());
    check("pooled_kt", selftest_pooled_kt());
    check("mma_exactness", selftest_mma());
    check("checkpoint_round_trip", selftest_checkpoint(seed));
    check("determinism_replay", selftest_determinism(seed));

    if failures.is_empty() {
        println!("selftest: all checks passed");
        Ok(())
    } else {
        Err(Error::SelfTest {
            detail: failures.join(", "),
        })
    }
}

fn selftest_gradients(seed: u64) -> Result<()> {
    let report = run_gradient_suite(seed, 6)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Error::GradientTolerance {
            detail: "selftest gradient sweep".into(),
        })
    }
}

fn selftest_volume() -> Result<()> {
    use crate::volume::{vector_volume, RepresentationSet};
    let ortho = RepresentationSet::new(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])?;
    let worked = RepresentationSet::new(vec![
        vec![1.0, 0.0, 1.0, 0.0],
        vec![0.0, 2.0, 0.0, 0.0],
        vec![1.0, 1.0, 0.0, 1.0],
    ])?;
    let dup = RepresentationSet::new(vec![vec![0.6, 0.8], vec![0.6, 0.8]])?;
    let ok = (vector_volume(&ortho) - 1.0).abs() < 1e-8
        && (vector_volume(&worked) - 12.0_f64.sqrt()).abs() < 1e-8
        && vector_volume(&dup).abs() < 1e-8;
    if ok {
        Ok(())
    } else {
        Err(Error::SelfTest {
            detail: "volume identities".into(),
        })
    }
}

fn selftest_contrastive() -> Result<()> {
    use crate::volume::{contrastive_loss_o2a, symmetric_contrastive_loss, ContrastiveBatch};
    use std::collections::BTreeMap;
    let shared: BTreeMap<usize, Vec<f64>> = [(0usize, vec![0.0, 1.0, 0.0])].into();
    let anchors = vec![vec![1.0, 0.0, 0.0]; 4];
    let single = ContrastiveBatch::new(anchors.clone(), vec![shared.clone(); 4], 1)?;
    let uniform = ContrastiveBatch::new(anchors, vec![shared; 4], 4)?;
    let ok = contrastive_loss_o2a(&single).abs() < 1e-12
        && (symmetric_contrastive_loss(&uniform) - 4.0_f64.ln()).abs() < 1e-10;
    if ok {
        Ok(())
    } else {
        Err(Error::SelfTest {
            detail: "contrastive oracle values".into(),
        })
    }
}

fn selftest_pooled_kt() -> Result<()> {
    use crate::models::LogitSequence;
    use crate::numeric::Matrix;
    use crate::server::pooled_kt_loss;
    let a = LogitSequence::new(Matrix::from_rows(&vec![vec![0.3, -0.8, 1.2, 0.0]; 3])?)?;
    let b = LogitSequence::new(Matrix::from_rows(&vec![vec![0.1, 0.4, -0.2, 0.9]; 5])?)?;
    let same = pooled_kt_loss(&a, &a, 2)?;
    let cross = pooled_kt_loss(&a, &b, 2)?;
    if same.abs() < 1e-12 && cross >= 0.0 {
        Ok(())
    } else {
        Err(Error::SelfTest {
            detail: "pooled kt values".into(),
        })
    }
}

fn selftest_mma() -> Result<()> {
    let w = crate::server::mma_weights(&[1, 2, 3])?;
    if w.weights() == [1.0 / 6.0, 1.0 / 3.0, 0.5] {
        Ok(())
    } else {
        Err(Error::SelfTest {
            detail: "mma weights for counts (1,2,3)".into(),
        })
    }
}

fn selftest_checkpoint(seed: u64) -> Result<()> {
    use crate::models::checkpoint::{read_adapters, write_adapters};
    let mut rng = crate::rng::stream_rng(seed, "selftest-checkpoint", 0);
    let mut adapters = vec![crate::models::LoRAAdapter::zero_start(8, 8, 2, 1.0, &mut rng)?];
    for v in adapters[0].b.data_mut() {
        *v = 0.125;
    }
    let dir = std::env::temp_dir().join(format!("mlecs-selftest-{}", std::process::id()));
    fs::create_dir_all(&dir)?;
    let path = dir.join("adapters.bin");
    write_adapters(&path, &adapters, seed)?;
    let (loaded, loaded_seed) = read_adapters(&path)?;
    let _ = fs::remove_file(&path);
    let ok = loaded_seed == seed
        && loaded.len() == 1
        && loaded[0].a.data().iter().zip(adapters[0].a.data()).all(|(a, b)| *a as f32 == *b as f32);
    if ok {
        Ok(())
    } else {
        Err(Error::SelfTest {
            detail: "checkpoint round trip".into(),
        })
    }
}

fn selftest_determinism(seed: u64) -> Result<()> {
    let mut config = ExperimentConfig::default();
    config.seed = seed;
    config.rounds = 1;
    config.n_devices = 2;
    config.dataset = crate::config::DatasetConfig::Synthetic {
        samples: 80,
        latent_dim: 4,
        classes: 4,
        noise_std: 0.2,
    };
    config.train.negatives = 4;
    let (r1, _) = crate::round::run_experiment(&config, 1)?;
    let (r2, _) = crate::round::run_experiment(&config, 2)?;
    let l1: Vec<String> = r1.iter().map(RoundReport::stream_line).collect();
    let l2: Vec<String> = r2.iter().map(RoundReport::stream_line).collect();
    if l1 == l2 {
        Ok(())
    } else {
        Err(Error::SelfTest {
            detail: "sequential and parallel runs diverged".into(),
        })
    }
}

/// Execute one CLI command. Errors bubble to the binary, which reports
/// them on stderr and exits nonzero.
pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            overrides,
            out,
            workers,
            seed,
        } => cmd_run(&config, &overrides, &out, workers, seed),
        Command::Gradcheck { seed, cases } => cmd_gradcheck(seed, cases),
        Command::BenchComm {
            config,
            overrides,
            seed,
        } => cmd_bench_comm(config.as_deref(), &overrides, seed),
        Command::Ablate {
            config,
            overrides,
            out,
            workers,
            seed,
        } => cmd_ablate(&config, &overrides, &out, workers, seed),
        Command::Selftest { seed } => cmd_selftest(seed),
    }
}
