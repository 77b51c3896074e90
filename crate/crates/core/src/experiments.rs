//! End-to-end studies: the conditioning table, ensemble uncertainty and the
//! well-noise ablation, plus the cached desk-scale data/training pipeline
//! they run on.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{
    generate_dataset, rng_from_seed, source_from_spec, GrfParams, Manifest, SourceSpec,
    MANIFEST_NAME,
};
use crate::error::{Error, Result};
use crate::fgrd::{read_joint, write_joint};
use crate::fields::{
    apply_mask, well_columns_from_meters, Field, GridSpec, JointState, WellMask, WellObservation,
};
use crate::metrics::{
    evaluate, median, pearson, write_report, InputConfig, JointMetrics, ReportRow, REPORT_HEADER,
};
use crate::model::Checkpoint;
use crate::pde::PdeContext;
use crate::sampler::{
    sample, sample_ensemble, ChannelSet, EnsembleStats, GuidanceTerms, ObservationGuidance,
    SamplerConfig, WellGuidance, ZetaSchedule,
};
use crate::train::{train, TrainConfig};

/// Dataset plus training recipe; its hash names the cache directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub n_samples: usize,
    pub grid: GridSpec,
    pub grf: GrfParams,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            grid: GridSpec::desk_scale(),
            grf: GrfParams::default(),
            // 24 epochs keep the single-core run under an hour.
            train: TrainConfig {
                epochs: 24,
                ..TrainConfig::default()
            },
        }
    }
}

impl PipelineConfig {
    pub fn key(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelinePaths {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    /// Wall-clock training time, seconds.
    pub train_seconds: PathBuf,
}

impl PipelinePaths {
    pub fn under(root: &Path) -> Self {
        let checkpoint = root.join("model.ckpt");
        Self {
            manifest: root.join("data").join(MANIFEST_NAME),
            loss_csv: checkpoint.with_extension("loss.csv"),
            train_seconds: root.join("train_seconds.txt"),
            checkpoint,
        }
    }
}

/// Generates the dataset and trains the model under `root` unless both
/// are already there. A completed stage is marked by its output file, which
/// is written last.
pub fn ensure_pipeline(config: &PipelineConfig, root: &Path) -> Result<PipelinePaths> {
    let paths = PipelinePaths::under(root);
    let data_dir = paths.manifest.parent().expect("manifest has a parent");
    if !paths.manifest.exists() {
        log::info!(
            "generating {} samples in {}",
            config.n_samples,
            data_dir.display()
        );
        let spec = SourceSpec::desk_scale(&config.grid)?;
        let source = source_from_spec(&config.grid, &spec)?;
        generate_dataset(
            config.n_samples,
            &config.grf,
            &config.grid,
            &source,
            data_dir,
        )?;
    }
    if !paths.checkpoint.exists() {
        log::info!("training into {}", paths.checkpoint.display());
        let tmp = root.join("model.partial.ckpt");
        let start = std::time::Instant::now();
        train(&config.train, &paths.manifest, &tmp)?;
        let secs = format!("{:.1}\n", start.elapsed().as_secs_f64());
        fs::write(&paths.train_seconds, secs).map_err(|e| Error::io(&paths.train_seconds, e))?;
        fs::rename(tmp.with_extension("loss.csv"), &paths.loss_csv)
            .map_err(|e| Error::io(&paths.loss_csv, e))?;
        fs::rename(&tmp, &paths.checkpoint).map_err(|e| Error::io(&paths.checkpoint, e))?;
    }
    Ok(paths)
}

pub fn load_pipeline(paths: &PipelinePaths) -> Result<(Manifest, Checkpoint)> {
    Ok((
        Manifest::load(&paths.manifest)?,
        Checkpoint::load(&paths.checkpoint)?,
    ))
}

/// One study's inputs. Test cases are taken from the held-out part of the
/// dataset in seed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    /// Well positions along the width, meters.
    pub well_positions: Vec<f64>,
    pub rows: Vec<InputConfig>,
    pub cases: usize,
    pub seeds: Vec<u64>,
    pub ensemble_count: usize,
    pub alphas: Vec<f64>,
    /// Seed of the well-noise draws in the ablation.
    pub noise_seed: u64,
    /// Include the Darcy-residual term in guidance.
    pub pde_guidance: bool,
    /// Keys left out of a config file keep their [`experiment_sampler`] values.
    #[serde(deserialize_with = "sampler_over_experiment_defaults")]
    pub sampler: SamplerConfig,
    pub output_dir: PathBuf,
}

fn sampler_over_experiment_defaults<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<SamplerConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
    let mut merged = serde_json::to_value(experiment_sampler()).map_err(D::Error::custom)?;
    if let serde_json::Value::Object(m) = &mut merged {
        m.extend(given);
    }
    serde_json::from_value(merged).map_err(D::Error::custom)
}

/// Sampler settings used by the studies. Guidance weights are constant
/// per step: with the σ-proportional decay the well term vanishes over the
/// low-σ steps where the fine structure is set. The physics weight sits
/// below the stability limit of an explicit step on the stiff residual.
pub fn experiment_sampler() -> SamplerConfig {
    SamplerConfig {
        zeta_obs: 0.25,
        zeta_pde: 1e-4,
        zeta_schedule: ZetaSchedule::Constant,
        ..SamplerConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.json"),
            checkpoint: PathBuf::from("model.ckpt"),
            well_positions: vec![775.0, 1050.0],
            rows: InputConfig::ALL.to_vec(),
            cases: 5,
            seeds: vec![0, 1, 2],
            ensemble_count: 50,
            alphas: vec![0.0, 0.2, 0.4, 0.8],
            noise_seed: 7,
            pde_guidance: true,
            sampler: experiment_sampler(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        // Relative paths are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.manifest, &mut c.checkpoint, &mut c.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_count < 2 {
            return Err(Error::invalid("ensemble_count must be >= 2"));
        }
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("noise alphas must lie in [0, 1]"));
        }
        if self.cases == 0 || self.seeds.is_empty() {
            return Err(Error::invalid("need at least one case and one seed"));
        }
        for p in [&self.manifest, &self.checkpoint] {
            if !p.exists() {
                return Err(Error::invalid(format!("{} does not exist", p.display())));
            }
        }
        self.sampler.validate()
    }
}

/// A named pass/fail assertion of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn less(name: &str, a: (&str, f64), b: (&str, f64)) -> Self {
        Self {
            name: name.to_string(),
            passed: a.1 < b.1,
            detail: format!("{} = {:.6e} < {} = {:.6e}", a.0, a.1, b.0, b.1),
        }
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Everything the studies share: model, physics, held-out cases.
pub struct Study {
    pub config: ExperimentConfig,
    pub checkpoint: Checkpoint,
    pub manifest: Manifest,
    pub mask: WellMask,
    pub pde: PdeContext,
    /// Held-out ground-truth pairs (normalized).
    pub cases: Vec<JointState>,
}

impl Study {
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let manifest = Manifest::load(&config.manifest)?;
        let checkpoint = Checkpoint::load(&config.checkpoint)?;
        manifest.grid.check_same(checkpoint.grid())?;
        let dir = config.manifest.parent().unwrap_or(Path::new("."));
        let (_, val) = manifest.split();
        if val.len() < config.cases {
            return Err(Error::invalid(format!(
                "{} test cases requested, {} held out",
                config.cases,
                val.len()
            )));
        }
        let paths = manifest.sample_paths(dir);
        let cases = paths[val.start..val.start + config.cases]
            .iter()
            .map(|p| read_joint(p, manifest.grid.cell_size))
            .collect::<Result<Vec<_>>>()?;
        let mask = well_columns_from_meters(&config.well_positions, &manifest.grid)?;
        let pde = PdeContext::from_manifest(&manifest)?;
        Ok(Self {
            config,
            checkpoint,
            manifest,
            mask,
            pde,
            cases,
        })
    }

    /// Guidance for one table row against a ground-truth pair, with an
    /// optional replacement for the well observation.
    pub fn terms(
        &self,
        row: InputConfig,
        truth: &JointState,
        wells: Option<WellObservation>,
    ) -> Result<GuidanceTerms> {
        let wells = if row.uses_wells() {
            let observation = match wells {
                Some(w) => w,
                None => apply_mask(truth, &self.mask)?,
            };
            Some(WellGuidance {
                observation,
                channels: ChannelSet::BOTH,
            })
        } else {
            None
        };
        Ok(GuidanceTerms {
            obs: Some(ObservationGuidance {
                wells,
                full_k: row.full_k().then(|| truth.k.clone()),
                full_s: row.full_s().then(|| truth.s.clone()),
            }),
            pde: self.config.pde_guidance.then(|| self.pde.clone()),
        })
    }

    fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            seed,
            ..self.config.sampler.clone()
        }
    }

    pub fn reconstruct(&self, terms: &GuidanceTerms, seed: u64) -> Result<JointState> {
        sample(&self.checkpoint.model, terms, &self.sampler(seed))
    }
}

pub fn row_slug(row: InputConfig) -> &'static str {
    match row {
        InputConfig::TwoWells => "two-wells",
        InputConfig::FullK => "full-k",
        InputConfig::FullKTwoWells => "full-k-two-wells",
        InputConfig::FullS => "full-s",
        InputConfig::FullSTwoWells => "full-s-two-wells",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub case: usize,
    pub seed: u64,
    pub metrics: JointMetrics,
}

/// All runs of one table row; written as `<slug>/row.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub config: InputConfig,
    pub runs: Vec<RunMetrics>,
}

fn mean_metrics<'a>(runs: impl Iterator<Item = &'a RunMetrics>) -> JointMetrics {
    let mut acc = JointMetrics {
        k_rmse: 0.0,
        k_ssim: 0.0,
        s_rmse: 0.0,
        s_ssim: 0.0,
        ssim_global_fallback: false,
    };
    let mut n = 0.0;
    for r in runs {
        acc.k_rmse += r.metrics.k_rmse;
        acc.k_ssim += r.metrics.k_ssim;
        acc.s_rmse += r.metrics.s_rmse;
        acc.s_ssim += r.metrics.s_ssim;
        acc.ssim_global_fallback |= r.metrics.ssim_global_fallback;
        n += 1.0;
    }
    acc.k_rmse /= n;
    acc.k_ssim /= n;
    acc.s_rmse /= n;
    acc.s_ssim /= n;
    acc
}

impl RowResult {
    /// Mean over every case and seed.
    pub fn averaged(&self) -> ReportRow {
        ReportRow::from_metrics(self.config, &mean_metrics(self.runs.iter()))
    }

    /// Mean over seeds for one case.
    pub fn for_case(&self, case: usize) -> Option<ReportRow> {
        let runs: Vec<&RunMetrics> = self.runs.iter().filter(|r| r.case == case).collect();
        (!runs.is_empty())
            .then(|| ReportRow::from_metrics(self.config, &mean_metrics(runs.into_iter())))
    }
}

/// Runs every case and seed of one row, writing each reconstruction as
/// `<dir>/case{c}_seed{s}.fgrd` and the metrics as `<dir>/row.json`.
pub fn run_table1_row(study: &Study, row: InputConfig, dir: &Path) -> Result<RowResult> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut runs = Vec::new();
    for (c, truth) in study.cases.iter().enumerate() {
        let terms = study.terms(row, truth, None)?;
        for &seed in &study.config.seeds {
            let x = study.reconstruct(&terms, seed)?;
            write_joint(dir.join(format!("case{c}_seed{seed}.fgrd")), &x)?;
            let metrics = evaluate(&x, truth, &study.checkpoint.normalization)?;
            log::info!(
                "{row} case {c} seed {seed}: K rMSE {:.3e} S rMSE {:.3e}",
                metrics.k_rmse,
                metrics.s_rmse
            );
            runs.push(RunMetrics {
                case: c,
                seed,
                metrics,
            });
        }
    }
    let result = RowResult { config: row, runs };
    write_json(&dir.join("row.json"), &result)?;
    Ok(result)
}

/// The orderings the conditioning table should show. Missing rows make the
/// corresponding checks fail.
pub fn table1_checks(rows: &[ReportRow]) -> Vec<Check> {
    let get = |c: InputConfig| rows.iter().find(|r| r.config == c);
    let nan = f64::NAN;
    let val = |c: InputConfig, f: fn(&ReportRow) -> Option<f64>| get(c).and_then(f).unwrap_or(nan);
    let (tw, fk, fkw, fs, fsw) = (
        InputConfig::TwoWells,
        InputConfig::FullK,
        InputConfig::FullKTwoWells,
        InputConfig::FullS,
        InputConfig::FullSTwoWells,
    );
    let s_rmse = |c| val(c, |r| r.s_rmse);
    let k_rmse = |c| val(c, |r| r.k_rmse);
    let s_ssim = |c| val(c, |r| r.s_ssim);
    let k_ssim = |c| val(c, |r| r.k_ssim);
    let lbl = |c: InputConfig| c.label();
    vec![
        Check::less(
            "S rMSE: full K + wells < full K",
            (lbl(fkw), s_rmse(fkw)),
            (lbl(fk), s_rmse(fk)),
        ),
        Check::less(
            "S rMSE: full K < two wells",
            (lbl(fk), s_rmse(fk)),
            (lbl(tw), s_rmse(tw)),
        ),
        Check::less(
            "K rMSE: full S + wells < full S",
            (lbl(fsw), k_rmse(fsw)),
            (lbl(fs), k_rmse(fs)),
        ),
        Check::less(
            "K rMSE: full S < two wells",
            (lbl(fs), k_rmse(fs)),
            (lbl(tw), k_rmse(tw)),
        ),
        Check::less(
            "S SSIM: full K > two wells",
            (lbl(tw), s_ssim(tw)),
            (lbl(fk), s_ssim(fk)),
        ),
        Check::less(
            "S SSIM: full K + wells > full K",
            (lbl(fk), s_ssim(fk)),
            (lbl(fkw), s_ssim(fkw)),
        ),
        Check::less(
            "K SSIM: full S > two wells",
            (lbl(tw), k_ssim(tw)),
            (lbl(fs), k_ssim(fs)),
        ),
        Check::less(
            "K SSIM: full S + wells > full S",
            (lbl(fs), k_ssim(fs)),
            (lbl(fsw), k_ssim(fsw)),
        ),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Outcome {
    pub rows: Vec<RowResult>,
    pub averaged: Vec<ReportRow>,
    pub checks: Vec<Check>,
    /// Rows that aborted, with the reason.
    pub aborted: Vec<(InputConfig, String)>,
}

pub fn write_table1_csvs(out: &Path, results: &[RowResult]) -> Result<Vec<ReportRow>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let averaged: Vec<ReportRow> = results.iter().map(RowResult::averaged).collect();
    write_report(&out.join("table1.csv"), &averaged)?;

    let cases: usize = results
        .iter()
        .flat_map(|r| r.runs.iter().map(|x| x.case + 1))
        .max()
        .unwrap_or(0);
    let mut text = format!("case,{}\n", REPORT_HEADER.join(","));
    for c in 0..cases {
        let rows: Vec<ReportRow> = results.iter().filter_map(|r| r.for_case(c)).collect();
        let body = crate::metrics::report(&rows)?;
        for line in body.lines().skip(1) {
            text.push_str(&format!("{c},{line}\n"));
        }
    }
    let p = out.join("table1_by_case.csv");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(averaged)
}

/// Runs the configured rows under `<output_dir>/table1/`. A row whose
/// sampling fails is logged and left out; the rest of the table proceeds.
pub fn run_table1(study: &Study) -> Result<Table1Outcome> {
    let out = study.config.output_dir.join("table1");
    let mut rows = Vec::new();
    let mut aborted = Vec::new();
    for &row in &study.config.rows {
        match run_table1_row(study, row, &out.join(row_slug(row))) {
            Ok(r) => rows.push(r),
            Err(e) => {
                log::error!("row '{row}' aborted: {e}");
                aborted.push((row, e.to_string()));
            }
        }
    }
    let averaged = write_table1_csvs(&out, &rows)?;
    let checks = table1_checks(&averaged);
    write_json(&out.join("checks.json"), &checks)?;
    Ok(Table1Outcome {
        rows,
        averaged,
        checks,
        aborted,
    })
}

/// Rebuilds the tables from the `row.json` files under `runs`.
pub fn collect_rows(runs: &Path) -> Result<Vec<RowResult>> {
    let mut out = Vec::new();
    for row in InputConfig::ALL {
        let p = runs.join(row_slug(row)).join("row.json");
        if p.exists() {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            out.push(serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelUncertainty {
    /// Largest per-cell std on the well columns.
    pub well_std_max: f64,
    pub median_std: f64,
    pub std_rmse_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub case: usize,
    pub count: usize,
    pub k: ChannelUncertainty,
    pub s: ChannelUncertainty,
}

fn channel_uncertainty(std: &Field, rmse: &Field, mask: &WellMask) -> ChannelUncertainty {
    let well_std_max = mask
        .cell_indices()
        .map(|i| std.values()[i])
        .fold(f64::NEG_INFINITY, f64::max);
    ChannelUncertainty {
        well_std_max,
        median_std: median(std.values()),
        std_rmse_correlation: pearson(std.values(), rmse.values()),
    }
}

pub fn uncertainty_checks(u: &UncertaintySummary) -> Vec<Check> {
    let mut checks = Vec::new();
    for (name, c) in [("K", &u.k), ("S", &u.s)] {
        checks.push(Check::less(
            &format!("{name} std at well columns below median"),
            ("max well std", c.well_std_max),
            ("median std", c.median_std),
        ));
        checks.push(Check::less(
            &format!("{name} corr(std, rMSE) > 0.3"),
            ("0.3", 0.3),
            ("corr", c.std_rmse_correlation),
        ));
    }
    checks
}

/// A two-well ensemble on the first test case; maps go to
/// `<output_dir>/uncertainty/`.
pub fn run_uncertainty(study: &Study) -> Result<(EnsembleStats, UncertaintySummary, Vec<Check>)> {
    let truth = &study.cases[0];
    let terms = study.terms(InputConfig::TwoWells, truth, None)?;
    let base = study.sampler(study.config.seeds[0]);
    let stats = sample_ensemble(
        &study.checkpoint.model,
        &terms,
        &base,
        study.config.ensemble_count,
        truth,
    )?;
    let out = study.config.output_dir.join("uncertainty");
    stats.write(&out)?;
    let summary = UncertaintySummary {
        case: 0,
        count: study.config.ensemble_count,
        k: channel_uncertainty(&stats.std.k, &stats.rmse.k, &study.mask),
        s: channel_uncertainty(&stats.std.s, &stats.rmse.s, &study.mask),
    };
    let checks = uncertainty_checks(&summary);
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join("checks.json"), &checks)?;
    Ok((stats, summary, checks))
}

/// Mean and variance of each channel of a ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStats {
    pub mean_k: f64,
    pub var_k: f64,
    pub mean_s: f64,
    pub var_s: f64,
}

impl NoiseStats {
    pub fn of(truth: &JointState) -> Self {
        Self {
            mean_k: truth.k.mean(),
            var_k: truth.k.std().powi(2),
            mean_s: truth.s.mean(),
            var_s: truth.s.std().powi(2),
        }
    }
}

/// `value ← α·N(μ, σ²) + (1 − α)·value` on every observed cell, each
/// channel with its own statistics.
pub fn noise_mix(
    obs: &WellObservation,
    alpha: f64,
    stats: &NoiseStats,
    rng: &mut impl Rng,
) -> Result<WellObservation> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut mix = |v: &[f64], mean: f64, var: f64| -> Vec<f64> {
        let sd = var.sqrt();
        v.iter()
            .map(|&x| {
                let z: f64 = rng.sample(StandardNormal);
                alpha * (mean + sd * z) + (1.0 - alpha) * x
            })
            .collect()
    };
    let k = mix(&obs.k_obs, stats.mean_k, stats.var_k);
    let s = mix(&obs.s_obs, stats.mean_s, stats.var_s);
    WellObservation::new(obs.mask.clone(), k, s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub alpha: f64,
    /// Means over cases and seeds.
    pub metrics: JointMetrics,
    pub runs: Vec<RunMetrics>,
}

pub fn ablation_checks(points: &[AblationPoint]) -> Vec<Check> {
    let mut checks = Vec::new();
    for (name, f) in [
        (
            "K",
            (|m: &JointMetrics| m.k_rmse) as fn(&JointMetrics) -> f64,
        ),
        ("S", |m| m.s_rmse),
    ] {
        let monotone = points
            .windows(2)
            .all(|w| f(&w[1].metrics) >= f(&w[0].metrics));
        let trend: Vec<String> = points
            .iter()
            .map(|p| format!("{}: {:.4e}", p.alpha, f(&p.metrics)))
            .collect();
        checks.push(Check {
            name: format!("{name} rMSE non-decreasing in alpha"),
            passed: monotone,
            detail: trend.join(", "),
        });
        let at = |a: f64| {
            points
                .iter()
                .find(|p| p.alpha == a)
                .map(|p| f(&p.metrics))
                .unwrap_or(f64::NAN)
        };
        let e0 = at(0.0);
        checks.push(Check::less(
            &format!("{name} rMSE at alpha 0.4 within 2x of alpha 0"),
            ("alpha 0.4", at(0.4)),
            ("2 x alpha 0", 2.0 * e0),
        ));
        checks.push(Check::less(
            &format!("{name} rMSE at alpha 0.8 above 2x alpha 0"),
            ("2 x alpha 0", 2.0 * e0),
            ("alpha 0.8", at(0.8)),
        ));
    }
    checks
}

/// Two-well reconstructions with noisy well logs at each `α`. The noise
/// draw for a given (case, seed) is shared across `α`, so the points differ
/// only in the mixing weight.
pub fn run_ablation(study: &Study) -> Result<(Vec<AblationPoint>, Vec<Check>)> {
    let out = study.config.output_dir.join("ablation");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut points = Vec::new();
    for &alpha in &study.config.alphas {
        let mut runs = Vec::new();
        for (c, truth) in study.cases.iter().enumerate() {
            let clean = apply_mask(truth, &study.mask)?;
            let stats = NoiseStats::of(truth);
            for &seed in &study.config.seeds {
                let mut rng = rng_from_seed(study.config.noise_seed ^ (c as u64) << 32 ^ seed);
                let noisy = noise_mix(&clean, alpha, &stats, &mut rng)?;
                let terms = study.terms(InputConfig::TwoWells, truth, Some(noisy))?;
                let x = study.reconstruct(&terms, seed)?;
                write_joint(
                    out.join(format!("alpha{alpha}_case{c}_seed{seed}.fgrd")),
                    &x,
                )?;
                let metrics = evaluate(&x, truth, &study.checkpoint.normalization)?;
                runs.push(RunMetrics {
                    case: c,
                    seed,
                    metrics,
                });
            }
        }
        let metrics = mean_metrics(runs.iter());
        log::info!(
            "alpha {alpha}: K rMSE {:.3e} S rMSE {:.3e}",
            metrics.k_rmse,
            metrics.s_rmse
        );
        points.push(AblationPoint {
            alpha,
            metrics,
            runs,
        });
    }
    let mut text = String::from("alpha,K_rMSE,S_rMSE,K_SSIM,S_SSIM\n");
    for p in &points {
        let m = &p.metrics;
        text.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e}\n",
            p.alpha, m.k_rmse, m.s_rmse, m.k_ssim, m.s_ssim
        ));
    }
    let p = out.join("ablation.csv");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    let checks = ablation_checks(&points);
    write_json(&out.join("checks.json"), &checks)?;
    Ok((points, checks))
}
