use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use aquiflow::datagen::{generate_dataset, source_from_spec, GrfParams, SourceSpec};
use aquiflow::experiments::{
    all_passed, collect_rows, run_ablation, run_table1, run_uncertainty, table1_checks,
    write_table1_csvs, Check, ExperimentConfig, Study,
};
use aquiflow::fgrd::{read_joint, write_joint};
use aquiflow::fields::{apply_mask, GridSpec, WellMask};
use aquiflow::model::Checkpoint;
use aquiflow::sampler::{
    sample, sample_ensemble, ChannelSet, GuidanceMode, GuidanceTerms, ObservationGuidance,
    SamplerConfig, WellGuidance, ZetaSchedule,
};
use aquiflow::train::{train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "aquiflow",
    version,
    about = "Joint permeability/saturation reconstruction from well logs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a permeability/saturation training set.
    GenData {
        #[arg(long)]
        n: usize,
        /// Grid as HEIGHTxWIDTH.
        #[arg(long, default_value = "64x64")]
        grid: String,
        #[arg(long, default_value_t = 31.25)]
        cell_size: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// GRF correlation length, meters.
        #[arg(long, default_value_t = 250.0)]
        correlation_length: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the score model.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw one guided reconstruction.
    Sample {
        #[command(flatten)]
        guide: GuideArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw an ensemble and write mean/std/rMSE maps, or run the
    /// uncertainty study when `--config` is given.
    Ensemble {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        guide: GuideArgs,
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Ground truth for the rMSE maps; defaults to `--obs`.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the conditioning table.
    Table1 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the well-noise ablation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rebuild the table CSV from a table run directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Cond {
    None,
    FullK,
    FullS,
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    SigmaProportional,
    Constant,
}

#[derive(Clone, Copy, ValueEnum)]
enum Jacobian {
    Identity,
    Exact,
}

#[derive(Args)]
struct GuideArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Joint (K, S) FGRD file holding the observed values.
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Mask spec JSON: {"columns": [...], "channels": ["k", "s"]}.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Cond::None)]
    cond: Cond,
    #[arg(long, default_value_t = 0.2)]
    zeta_obs: f64,
    #[arg(long, default_value_t = 0.02)]
    zeta_pde: f64,
    /// How the guidance weights vary over the steps.
    #[arg(long, value_enum, default_value_t = Schedule::SigmaProportional)]
    zeta_schedule: Schedule,
    /// Disable the Darcy-residual term.
    #[arg(long)]
    no_pde: bool,
    #[arg(long, value_enum, default_value_t = Jacobian::Identity)]
    jacobian: Jacobian,
    #[arg(long, default_value_t = 100)]
    n_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Deserialize)]
struct MaskSpec {
    columns: Vec<usize>,
    #[serde(default = "both_channels")]
    channels: Vec<String>,
}

fn both_channels() -> Vec<String> {
    vec!["k".into(), "s".into()]
}

fn parse_grid(s: &str, cell_size: f64) -> anyhow::Result<GridSpec> {
    let (h, w) = s.split_once('x').context("grid must look like 64x64")?;
    Ok(GridSpec::new(
        h.trim().parse()?,
        w.trim().parse()?,
        cell_size,
    )?)
}

impl GuideArgs {
    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.n_steps,
            zeta_obs: self.zeta_obs,
            zeta_pde: self.zeta_pde,
            zeta_schedule: match self.zeta_schedule {
                Schedule::SigmaProportional => ZetaSchedule::SigmaProportional,
                Schedule::Constant => ZetaSchedule::Constant,
            },
            guidance_mode: match self.jacobian {
                Jacobian::Identity => GuidanceMode::IdentityJacobian,
                Jacobian::Exact => GuidanceMode::ExactJacobian,
            },
            seed: self.seed,
            ..SamplerConfig::default()
        }
    }

    fn load(&self) -> anyhow::Result<(Checkpoint, GuidanceTerms)> {
        let Some(ckpt_path) = &self.ckpt else {
            bail!("--ckpt is required")
        };
        let ckpt = Checkpoint::load(ckpt_path)?;
        let grid = *ckpt.grid();
        let obs = self
            .obs
            .as_ref()
            .map(|p| read_joint(p, grid.cell_size))
            .transpose()?;
        let mut guidance = ObservationGuidance::default();
        if let Some(mask_path) = &self.mask {
            let Some(truth) = &obs else {
                bail!("--mask needs --obs")
            };
            let text = std::fs::read_to_string(mask_path)
                .with_context(|| format!("reading {}", mask_path.display()))?;
            let spec: MaskSpec = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", mask_path.display()))?;
            let mut channels = ChannelSet { k: false, s: false };
            for c in &spec.channels {
                match c.to_ascii_lowercase().as_str() {
                    "k" => channels.k = true,
                    "s" => channels.s = true,
                    other => bail!("unknown channel '{other}' in mask spec"),
                }
            }
            let mask = WellMask::new(grid, spec.columns)?;
            guidance.wells = Some(WellGuidance {
                observation: apply_mask(truth, &mask)?,
                channels,
            });
        }
        match self.cond {
            Cond::None => {}
            Cond::FullK | Cond::FullS => {
                let Some(truth) = &obs else {
                    bail!("--cond needs --obs")
                };
                if matches!(self.cond, Cond::FullK) {
                    guidance.full_k = Some(truth.k.clone());
                } else {
                    guidance.full_s = Some(truth.s.clone());
                }
            }
        }
        let has_obs =
            guidance.wells.is_some() || guidance.full_k.is_some() || guidance.full_s.is_some();
        let terms = GuidanceTerms {
            obs: has_obs.then_some(guidance),
            pde: if self.no_pde {
                None
            } else {
                Some(ckpt.pde_context()?)
            },
        };
        Ok((ckpt, terms))
    }
}

fn report_checks(title: &str, checks: &[Check]) -> bool {
    for c in checks {
        println!(
            "[{}] {title}: {} ({})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    all_passed(checks)
}

fn open_study(config: &Path) -> anyhow::Result<Study> {
    Ok(Study::open(ExperimentConfig::load(config)?)?)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData {
            n,
            grid,
            cell_size,
            seed,
            correlation_length,
            out,
        } => {
            let grid = parse_grid(&grid, cell_size)?;
            let params = GrfParams {
                correlation_length,
                seed,
                ..GrfParams::default()
            };
            let source = source_from_spec(&grid, &SourceSpec::desk_scale(&grid)?)?;
            generate_dataset(n, &params, &grid, &source, &out)?;
            Ok(true)
        }
        Command::Train { data, config, out } => {
            let config = match config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            let outcome = train(&config, &data, &out)?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "final validation loss {:.4} (F=0 baseline {:.4})",
                    last.val_loss, last.val_baseline
                );
            }
            Ok(true)
        }
        Command::Sample { guide, out } => {
            let (ckpt, terms) = guide.load()?;
            let x = sample(&ckpt.model, &terms, &guide.sampler())?;
            write_joint(&out, &x)?;
            Ok(true)
        }
        Command::Ensemble {
            config: Some(config),
            ..
        } => {
            let study = open_study(&config)?;
            let (_, summary, checks) = run_uncertainty(&study)?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(report_checks("uncertainty", &checks))
        }
        Command::Ensemble {
            config: None,
            guide,
            count,
            truth,
            out,
        } => {
            let (ckpt, terms) = guide.load()?;
            let Some(truth_path) = truth.as_ref().or(guide.obs.as_ref()) else {
                bail!("ensemble needs --truth or --obs for the rMSE maps")
            };
            let Some(out) = out else {
                bail!("--out is required")
            };
            let truth = read_joint(truth_path, ckpt.grid().cell_size)?;
            let stats = sample_ensemble(&ckpt.model, &terms, &guide.sampler(), count, &truth)?;
            stats.write(&out)?;
            Ok(true)
        }
        Command::Table1 { config } => {
            let study = open_study(&config)?;
            let outcome = run_table1(&study)?;
            for r in &outcome.averaged {
                println!("{r:?}");
            }
            Ok(report_checks("table1", &outcome.checks)
                && outcome.rows.len() == study.config.rows.len())
        }
        Command::Ablate { config } => {
            let study = open_study(&config)?;
            let (_, checks) = run_ablation(&study)?;
            Ok(report_checks("ablation", &checks))
        }
        Command::Report { runs, out } => {
            let rows = collect_rows(&runs)?;
            if rows.is_empty() {
                bail!("no row results under {}", runs.display());
            }
            let dir = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            let averaged = write_table1_csvs(dir, &rows)?;
            let default = dir.join("table1.csv");
            if out != default {
                std::fs::rename(&default, &out)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
            Ok(report_checks("table1", &table1_checks(&averaged)))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more assertions failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
