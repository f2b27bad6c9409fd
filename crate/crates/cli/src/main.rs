use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use saq_core::experiment::config::{DecoderKind, ExperimentConfig};
use saq_core::experiment::eval::{evaluate, read_csv, workers_from_env, write_csv};
use saq_core::experiment::selftest;
use saq_core::experiment::threshold::estimate_threshold;
use saq_core::experiment::weights::{compare_weights, ordering_violations, write_weights_csv};
use saq_core::experiment::train::TrainedDecoder;
use saq_core::noise::NoiseModel;

#[derive(Parser)]
#[command(name = "saq", version, about = "Train and benchmark syndrome-attention decoders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shots: Option<usize>,
    /// Comma-separated subset of sltd-cpnd, sltd-projection, sltd-osd0, ml-oracle.
    #[arg(long)]
    decoders: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model per decoding problem and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Logical error rates over the config's p grid, as CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean recovery weights of projection, CPND and OSD-0.
    WeightsCompare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated error rates; defaults to 0.05,0.1,0.15,0.2.
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Threshold estimate from LER CSV files of several distances.
    Threshold {
        /// Decoder whose curves are compared.
        #[arg(long, default_value = "sltd-cpnd")]
        decoder: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run the invariant suite.
    Selftest,
    /// Print configuration defaults.
    Config {
        #[arg(long)]
        dump_defaults: bool,
        #[arg(long, default_value = "depolarizing")]
        noise: String,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = c.shots {
        cfg.shots = s;
    }
    if let Some(d) = &c.decoders {
        cfg.decoders = DecoderKind::parse_list(d)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn load_model(cfg: &ExperimentConfig, path: &Option<PathBuf>) -> Result<Option<TrainedDecoder>> {
    path.as_deref()
        .map(|p: &Path| TrainedDecoder::load(cfg, p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { common, out, log } => {
            let cfg = load_config(&common)?;
            let mut log_file = log.map(fs::File::create).transpose()?;
            let start = std::time::Instant::now();
            let (dec, _) = TrainedDecoder::train(&cfg, |e| {
                eprintln!(
                    "sector {} epoch {:>3} lr {:.2e} loss {:.4} lp {:.4} lc {:.4} ent {:.4} acc {:.3} ({:.0?})",
                    e.sector,
                    e.epoch,
                    e.lr,
                    e.mean.loss,
                    e.mean.lp,
                    e.mean.lc,
                    e.mean.entropy,
                    e.mean.class_acc,
                    start.elapsed()
                );
                if let Some(f) = log_file.as_mut() {
                    let _ = writeln!(f, "{}", serde_json::to_string(e).expect("log serializes"));
                }
            })?;
            dec.save(&cfg, &out)?;
        }
        Cmd::Eval { common, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg, &checkpoint)?;
            let rows = evaluate(&cfg, model.as_ref(), workers_from_env())?;
            write_csv(output(&out)?, &cfg, &rows)?;
        }
        Cmd::WeightsCompare { common, checkpoint, out, p } => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg, &checkpoint)?;
            let ps = p.unwrap_or_else(|| vec![0.05, 0.10, 0.15, 0.20]);
            let rows = compare_weights(&cfg, model.as_ref(), &ps, workers_from_env())?;
            write_weights_csv(output(&out)?, &cfg, &rows)?;
            for v in ordering_violations(&rows, 2.0) {
                eprintln!("ordering violated: {v}");
            }
        }
        Cmd::Threshold { decoder, out, inputs } => {
            let mut rows = Vec::new();
            for path in &inputs {
                let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                rows.extend(read_csv(f)?);
            }
            write!(output(&out)?, "{}", estimate_threshold(&rows, &decoder))?;
        }
        Cmd::Selftest => {
            let results = selftest::run_all();
            print!("{}", selftest::render(&results));
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                bail!("{failed} check(s) failed");
            }
        }
        Cmd::Config { dump_defaults, noise } => {
            if !dump_defaults {
                bail!("nothing to do; pass --dump-defaults");
            }
            let noise = match noise.as_str() {
                "independent" => NoiseModel::Independent,
                "depolarizing" => NoiseModel::Depolarizing,
                other => bail!("unknown noise model {other}"),
            };
            print!("{}", ExperimentConfig::for_noise(noise).to_toml());
        }
    }
    Ok(())
}
