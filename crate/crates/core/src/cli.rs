//! The `gbnf` command line.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::boost::{refresh_log_partition, MixtureMode};
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::objectives::reverse_kl_surrogate;
use crate::targets::{read_csv_matrix, write_csv_matrix, BoundingBox, Grid};
use crate::trainer::{
    derived_rng, load_checkpoint, run_boosting, save_checkpoint, Checkpoint, Problem, Purpose, RngDescriptor,
    StageRecord, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_MODEL_STATE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "gbnf", version, about = "Gradient-boosted normalizing flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a boosted model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Parent directory; the run writes into `<out>/<run id>`.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a 2-d model's log-density on a grid of cell centers.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `x0,x1,y0,y1`.
        #[arg(long, default_value = "-4,4,-4,4", allow_hyphen_values = true)]
        bbox: BoundingBox,
        #[arg(long, default_value_t = 100)]
        res: usize,
        /// Output prefix; writes `<out>.csv` and `<out>.pgm`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples with their 1-based component ids.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report log-likelihood statistics on a CSV of points.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// The CSV's first row is a header.
        #[arg(long)]
        header: bool,
        /// Metrics JSON path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-estimate the log partition of a multiplicative model in place.
    Partition {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Written to `<run dir>/manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub status: &'static str,
    pub error: Option<String>,
    pub config_path: PathBuf,
    pub config_hash: String,
    pub config: TrainConfig,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub stage_log: PathBuf,
    pub metrics: Option<serde_json::Value>,
    pub stage_seconds: Vec<f64>,
    pub total_seconds: f64,
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let training = matches!(cli.command, Command::Train { .. });
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e, training);
            eprintln!("error: {e}");
            if matches!(e, Error::State(_)) {
                eprintln!("hint: run `gbnf partition --checkpoint <file>` to re-estimate the partition");
            }
            code
        }
    }
}

pub fn exit_code(e: &Error, training: bool) -> i32 {
    match e {
        Error::Config { .. } | Error::Parse { .. } | Error::Incompatible { .. } | Error::Io(_) => EXIT_INPUT,
        _ if training => EXIT_TRAINING,
        Error::State(_) | Error::UnsupportedMode { .. } | Error::DegenerateProposal { .. } => EXIT_MODEL_STATE,
        _ => EXIT_INPUT,
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out } => cmd_train(&config, &out).map(|_| ()),
        Command::Grid {
            checkpoint,
            bbox,
            res,
            out,
        } => cmd_grid(&checkpoint, bbox, res, &out),
        Command::Sample { checkpoint, n, seed, out } => cmd_sample(&checkpoint, n, seed, &out),
        Command::Eval {
            checkpoint,
            data,
            header,
            out,
        } => {
            let metrics = cmd_eval(&checkpoint, &data, header)?;
            let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
            match out {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Partition {
            checkpoint,
            samples,
            seed,
        } => cmd_partition(&checkpoint, samples, seed).map(|_| ()),
    }
}

fn checkpoint_metadata(cfg: &TrainConfig) -> String {
    format!("config_hash={}\n{}", cfg.hash(), cfg.to_toml())
}

/// The config hash recorded in a checkpoint's metadata block.
pub fn config_hash_of(ck: &Checkpoint) -> String {
    ck.metadata
        .lines()
        .find_map(|l| l.strip_prefix("config_hash="))
        .unwrap_or("unknown")
        .to_string()
}

fn write_json_line<W: Write>(w: &mut W, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Train per the config at `config_path` into `out/<run id>`.
pub fn cmd_train(config_path: &Path, out: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| Error::config("--config", format!("{}: {e}", config_path.display())))?;
    let cfg = TrainConfig::from_toml(&text)?;
    let run_dir = out.join(cfg.run_id());
    if run_dir.exists() {
        return Err(Error::config(
            "run.id",
            format!("run directory {} already exists", run_dir.display()),
        ));
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    let problem = Problem::prepare(&cfg, base)?;
    fs::create_dir_all(&run_dir)?;

    let started = Instant::now();
    let stage_log = run_dir.join("stages.jsonl");
    let mut log = BufWriter::new(File::create(&stage_log)?);
    let metadata = checkpoint_metadata(&cfg);
    let mut manifest = RunManifest {
        run_id: cfg.run_id(),
        status: "running",
        error: None,
        config_path: config_path.to_path_buf(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        checkpoints: Vec::new(),
        final_checkpoint: None,
        stage_log: stage_log.clone(),
        metrics: None,
        stage_seconds: Vec::new(),
        total_seconds: 0.0,
    };
    let mut stage_clock = Instant::now();
    let result = run_boosting(&cfg, &problem, |model, rec: &StageRecord| {
        write_json_line(&mut log, rec)?;
        let path = run_dir.join(format!("stage_{:02}.ckpt", rec.stage));
        let ck = Checkpoint {
            metadata: metadata.clone(),
            stage: rec.stage as u32,
            model: model.clone(),
            rng: RngDescriptor::capture(&derived_rng(cfg.run.seed, Purpose::Train, rec.stage as u64 + 1)),
        };
        save_checkpoint(&ck, &path)?;
        manifest.checkpoints.push(path);
        manifest.stage_seconds.push(stage_clock.elapsed().as_secs_f64());
        stage_clock = Instant::now();
        Ok(())
    });
    let outcome = result.and_then(|run| {
        for step in &run.fine_tune {
            write_json_line(&mut log, &serde_json::json!({ "fine_tune": step }))?;
        }
        let path = run_dir.join("final.ckpt");
        let ck = Checkpoint {
            metadata: metadata.clone(),
            stage: run.stages.len() as u32,
            model: run.model.clone(),
            rng: RngDescriptor::capture(&derived_rng(cfg.run.seed, Purpose::FineTune, 0)),
        };
        save_checkpoint(&ck, &path)?;
        Ok((path, run_metrics(&cfg, &problem, &run.model)?))
    });
    manifest.total_seconds = started.elapsed().as_secs_f64();
    let err = match outcome {
        Ok((path, metrics)) => {
            manifest.status = "complete";
            manifest.final_checkpoint = Some(path);
            manifest.metrics = Some(metrics);
            None
        }
        Err(e) => {
            manifest.status = "aborted";
            manifest.error = Some(e.to_string());
            Some(e)
        }
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(run_dir.join("manifest.json"), text)?;
    match err {
        None => Ok(manifest),
        Some(e) => Err(e),
    }
}

fn run_metrics(cfg: &TrainConfig, problem: &Problem, model: &crate::boost::GBNFModel) -> Result<serde_json::Value> {
    Ok(match problem {
        Problem::Estimation { val, test, .. } => {
            let mean = |lp: Vec<f64>| lp.iter().sum::<f64>() / lp.len() as f64;
            serde_json::json!({
                "val_log_likelihood": mean(model.log_prob_batch(val)?),
                "test_log_likelihood": mean(model.log_prob_batch(test)?),
            })
        }
        Problem::Matching { target, log_z, .. } => {
            let mut rng = derived_rng(cfg.run.seed, Purpose::Evaluation, 0);
            let (kl, se) = reverse_kl_surrogate(model, *target, cfg.train.val_mc, &mut rng)?;
            serde_json::json!({
                "reverse_kl_surrogate": kl,
                "reverse_kl_surrogate_stderr": se,
                "reverse_kl": kl + log_z,
                "log_normalizer": log_z,
            })
        }
    })
}

/// Write `<out>.csv` (x, y, log density) and `<out>.pgm` for a 2-d model.
pub fn cmd_grid(checkpoint: &Path, bbox: BoundingBox, res: usize, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let grid = Grid::new(bbox, res).map_err(|e| Error::config("--res", e.to_string()))?;
    if ck.model.dim() != Some(2) {
        return Err(Error::config("--checkpoint", "grid evaluation needs a 2-d model"));
    }
    let centers = grid.centers();
    let lp = ck.model.log_prob_batch(&centers)?;
    let hash = config_hash_of(&ck);

    let mut table = Matrix::zeros(centers.rows(), 3);
    for (i, row) in centers.iter_rows().enumerate() {
        table.set(i, 0, row[0]);
        table.set(i, 1, row[1]);
        table.set(i, 2, lp[i]);
    }
    let csv_path = out.with_extension("csv");
    write_csv_matrix(
        BufWriter::new(File::create(&csv_path)?),
        &[format!("config_hash={hash}")],
        &["x", "y", "log_density"],
        &table,
        None,
    )?;

    let density: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let lo = density.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut pgm = format!("P5\n# config_hash={hash}\n{res} {res}\n255\n").into_bytes();
    pgm.extend(density.iter().map(|d| {
        if span > 0.0 {
            ((d - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(out.with_extension("pgm"), pgm)?;
    Ok(())
}

pub fn cmd_sample(checkpoint: &Path, n: usize, seed: u64, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let model = &ck.model;
    if model.mode() != MixtureMode::Additive {
        return Err(Error::UnsupportedMode {
            mode: model.mode().name(),
            what: "sampling".into(),
        });
    }
    let d = model.dim().unwrap_or(0);
    let (x, ids) = if n == 0 {
        (Matrix::zeros(0, d), Vec::new())
    } else {
        model.sample_mixture(n, &mut derived_rng(seed, Purpose::Evaluation, 0))?
    };
    let ids: Vec<usize> = ids.iter().map(|i| i + 1).collect();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header.push("component".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv_matrix(
        BufWriter::new(File::create(out)?),
        &[format!("config_hash={}", config_hash_of(&ck))],
        &header,
        &x,
        Some(&ids),
    )
}

/// Log-likelihood summary of a data file under a model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub config_hash: String,
    pub n: usize,
    pub mean_log_likelihood: f64,
    /// `(q, value)` pairs of the per-point log-likelihood.
    pub quantiles: Vec<(f64, f64)>,
}

pub const EVAL_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

pub fn cmd_eval(checkpoint: &Path, data: &Path, header: bool) -> Result<EvalMetrics> {
    let ck = load_checkpoint(checkpoint)?;
    let file = File::open(data).map_err(|e| Error::config("--data", format!("{}: {e}", data.display())))?;
    let x = read_csv_matrix(file, header).map_err(|e| match e {
        Error::Config { message, .. } => Error::config("--data", message),
        other => other,
    })?;
    if Some(x.cols()) != ck.model.dim() {
        return Err(Error::config(
            "--data",
            format!("data has {} columns, model expects {:?}", x.cols(), ck.model.dim()),
        ));
    }
    let mut lp = ck.model.log_prob_batch(&x)?;
    let n = lp.len();
    let mean = lp.iter().sum::<f64>() / n as f64;
    lp.sort_by(f64::total_cmp);
    let quantiles = EVAL_QUANTILES.iter().map(|&q| (q, quantile_sorted(&lp, q))).collect();
    Ok(EvalMetrics {
        config_hash: config_hash_of(&ck),
        n,
        mean_log_likelihood: mean,
        quantiles,
    })
}

/// Linear-interpolation quantile of sorted values.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < v.len() {
        v[i] + frac * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}

/// Re-estimate and store the log partition; returns the updated checkpoint.
pub fn cmd_partition(checkpoint: &Path, samples: usize, seed: u64) -> Result<Checkpoint> {
    let mut ck = load_checkpoint(checkpoint)?;
    if samples < crate::boost::MIN_PARTITION_SAMPLES {
        return Err(Error::config(
            "--samples",
            format!("must be >= {}", crate::boost::MIN_PARTITION_SAMPLES),
        ));
    }
    refresh_log_partition(&mut ck.model, samples, &mut derived_rng(seed, Purpose::Partition, 0))?;
    save_checkpoint(&ck, checkpoint)?;
    Ok(ck)
}
