use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adic::calibration::{loo_sweep, CalibrationError, RunScores};
use adic::energy::{lifetime_energy, operating_point, write_energy_csv, EnergyCalibration, EnergySummaryRow, VoteTally, OPERATING_POINTS};
use adic::ensemble::tally_from_timeline_csv;
use adic::ingest::{synth_corpus, synth_run, write_manifest, ManifestEntry, RunLabel};
use adic::pipeline::{
    load_model, load_runs, process_run, run_pipeline, save_model, train_detector, RunConfig, RunData,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adic", version, about = "ELM-ensemble anomaly detector model")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic run-to-failure corpus as feature CSVs.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write raw snapshot files in the IMS directory layout.
        #[arg(long)]
        raw: bool,
    },
    /// Train a detector on the early-life window of one feature CSV.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-derive a model's thresholds at a new sensitivity k.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        k: u32,
        /// Output model; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a trained detector over a feature CSV. Exits 1 on a fault.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Leading rows to skip (typically the training window).
        #[arg(long, default_value_t = 0)]
        skip: usize,
        #[arg(long)]
        timeline: Option<PathBuf>,
        #[arg(long)]
        energy: Option<PathBuf>,
    },
    /// Leave-one-out sweep of k over the configured corpus.
    SweepK {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lifetime energy of one or more timeline CSVs.
    EnergyReport {
        #[arg(long, required = true, num_args = 1..)]
        timeline: Vec<PathBuf>,
        /// Model the timelines came from (gives the network shape).
        #[arg(long)]
        model: PathBuf,
        /// Restrict to one operating point.
        #[arg(long)]
        point: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Whole pipeline: train, calibrate, infer, sweep and report. Exits 1 if
    /// any run latched a fault.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set hidden=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    point: Option<String>,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let quoted = |s: &str| format!("{s:?}");
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(v) = self.k {
            pairs.push(("k".into(), v.to_string()));
        }
        if let Some(v) = &self.policy {
            pairs.push(("policy".into(), quoted(v)));
        }
        if let Some(v) = &self.rule {
            pairs.push(("rule".into(), quoted(v)));
        }
        if let Some(v) = self.hidden {
            pairs.push(("hidden".into(), v.to_string()));
        }
        if let Some(v) = self.window {
            pairs.push(("training_window".into(), v.to_string()));
        }
        if let Some(v) = &self.point {
            pairs.push(("operating_point".into(), quoted(v)));
        }
        if let Some(v) = &self.source {
            pairs.push(("source".into(), quoted(v)));
        }
        if let Some(v) = &self.data_dir {
            pairs.push(("data_dir".into(), quoted(&v.to_string_lossy())));
        }
        if let Some(v) = &self.manifest {
            pairs.push(("manifest".into(), quoted(&v.to_string_lossy())));
        }
        for s in &self.set {
            let (key, value) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        for (key, value) in pairs {
            cfg.set(&key, &value).with_context(|| format!("setting {key}"))?;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(fault) => ExitCode::from(u8::from(fault)),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether a fault was detected.
fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Synth { config, out, raw } => synth(&config.resolve()?, &out, raw).map(|_| false),
        Command::Train { config, features, out } => {
            let cfg = config.resolve()?;
            let run = read_run(&features)?;
            let (det, _) = train_detector(&cfg, &run)?;
            save_model(&det, &out)?;
            for (i, t) in det.thresholds()?.iter().enumerate() {
                println!("bl{}: mu={} sigma={} Thr={}", i + 1, t.mu_e, t.sigma_e, t.thr);
            }
            Ok(false)
        }
        Command::Calibrate { model, k, out } => {
            let mut det = load_model(&model)?;
            det.recalibrate(k)?;
            save_model(&det, out.as_deref().unwrap_or(&model))?;
            println!("k = {k}");
            Ok(false)
        }
        Command::Infer {
            model,
            features,
            skip,
            timeline,
            energy,
        } => {
            let mut det = load_model(&model)?;
            let run = read_run(&features)?;
            if run.names != det.feature_names {
                bail!("feature columns {:?} do not match the model's {:?}", run.names, det.feature_names);
            }
            let samples = det.scale(&run.raw())?;
            let skip = skip.min(samples.len());
            let report = det.infer(&samples[skip..], skip)?;
            if let Some(p) = timeline {
                report.write_csv(BufWriter::new(create(&p)?))?;
            }
            if let Some(p) = energy {
                let rows = adic::pipeline::energy_rows(&report.ledger, report.policy)?;
                write_energy_csv(BufWriter::new(create(&p)?), &rows)?;
            }
            match report.fault_index {
                Some(i) => println!("fault at sample {i}"),
                None => println!("healthy"),
            }
            Ok(report.fault_detected())
        }
        Command::SweepK { config, out } => {
            let cfg = config.resolve()?;
            let runs = load_runs(&cfg)?;
            let scores = runs
                .into_iter()
                .map(|r| Ok(process_run(&cfg, r)?.scores))
                .collect::<Result<Vec<RunScores>>>()?;
            let report = match loo_sweep(&scores, &cfg.k_grid(), cfg.policy()?, cfg.debounce) {
                Ok(r) => r,
                Err(CalibrationError::NoZeroErrorRegion(r)) => {
                    log::warn!("no k reaches FP = FN = 0");
                    *r
                }
                Err(e) => return Err(e.into()),
            };
            report.write_csv(BufWriter::new(create(&out)?))?;
            match report.plateau {
                Some((lo, hi)) => println!("k* = {} (zero-error plateau {lo}..={hi})", report.k_star),
                None => println!("k* = {} (best trade-off, no zero-error plateau)", report.k_star),
            }
            Ok(false)
        }
        Command::EnergyReport {
            timeline,
            model,
            point,
            out,
        } => {
            let det = load_model(&model)?;
            let base = det.calibration()?;
            let mut tally = VoteTally::new(base.ensemble_size);
            for p in &timeline {
                tally.merge(&tally_from_timeline_csv(open(p)?)?);
            }
            let points: Vec<_> = match point {
                Some(name) => vec![operating_point(&name)?],
                None => OPERATING_POINTS.iter().filter(|p| p.infer_pj_per_op.is_some()).collect(),
            };
            let rows = points
                .into_iter()
                .map(|p| {
                    let cal = EnergyCalibration::new(p, base.ops_per_bl, base.ensemble_size)?;
                    let life = lifetime_energy(&tally, &cal)?;
                    Ok(EnergySummaryRow {
                        operating_point: p.name.to_string(),
                        policy: det.ensemble.policy().name().to_string(),
                        total_pj: life.total_pj,
                        pj_per_op_normalized: life.pj_per_op_normalized,
                        alphas: tally.alphas(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match out {
                Some(p) => write_energy_csv(BufWriter::new(create(&p)?), &rows)?,
                None => write_energy_csv(io::stdout().lock(), &rows)?,
            }
            Ok(false)
        }
        Command::Run { config, out } => {
            let cfg = config.resolve()?;
            let outcome = run_pipeline(&cfg, &out)?;
            for r in &outcome.runs {
                let state = match r.fault_index {
                    Some(i) => format!("fault at {i}"),
                    None => "healthy".into(),
                };
                println!("{} ({}): {state}", r.id, r.label);
            }
            if let Some(v) = &outcome.validation {
                println!("k* = {} plateau = {:?}", v.k_star, v.plateau);
            }
            Ok(outcome.any_fault())
        }
    }
}

fn read_run(path: &Path) -> Result<RunData> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    Ok(RunData::read_csv(&id, RunLabel::Survived, path)?)
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn synth(cfg: &RunConfig, out: &Path, raw: bool) -> Result<()> {
    let features = cfg.feature_list()?;
    let specs = synth_corpus(cfg.synth_seed, cfg.synth_runs, cfg.synth_failing, cfg.synth_length)?;
    let mut manifest = Vec::new();
    for mut spec in specs {
        spec.snapshot_len = cfg.synth_snapshot_len;
        spec.noise = cfg.synth_noise;
        let run = synth_run(&spec)?;
        let data = RunData::from_snapshots(&run.id, run.label, &run.snapshots, &features)?;
        let rel = PathBuf::from(format!("{}.csv", run.id));
        data.write_csv(&out.join(&rel))?;
        if raw {
            let dir = out.join("raw").join(&run.id);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for s in &run.snapshots {
                let mut w = BufWriter::new(create(&dir.join(&s.timestamp))?);
                for v in &s.channels[0] {
                    writeln!(w, "{v}")?;
                }
            }
        }
        let onset = if run.label == RunLabel::Failed {
            spec.fault_onset.to_string()
        } else {
            "-".into()
        };
        println!("{} {} onset={onset}", run.id, run.label);
        manifest.push(ManifestEntry {
            id: run.id,
            label: run.label,
            path: rel,
        });
    }
    write_manifest(create(&out.join("manifest.csv"))?, &manifest)?;
    Ok(())
}
