//! Guided probability-flow sampling: Karras noise schedule, Heun
//! integration, and per-step gradient guidance from well observations and
//! the Darcy residual.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::rng_from_seed;
use crate::error::{Error, Result};
use crate::fgrd::write_fields;
use crate::fields::{Field, GridSpec, JointState, WellObservation};
use crate::model::Denoiser;
use crate::pde::{pde_loss, pde_loss_grad, PdeContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Treat `∂x̂/∂x` as the identity.
    IdentityJacobian,
    /// Pull guidance gradients back through the denoiser.
    ExactJacobian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZetaSchedule {
    /// `ζ_i = ζ · σ_i / σ_max`.
    SigmaProportional,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub zeta_obs: f64,
    pub zeta_pde: f64,
    pub zeta_schedule: ZetaSchedule,
    pub guidance_mode: GuidanceMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            zeta_obs: 0.2,
            zeta_pde: 0.02,
            zeta_schedule: ZetaSchedule::SigmaProportional,
            guidance_mode: GuidanceMode::IdentityJacobian,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::invalid("n_steps must be >= 2"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::invalid("need 0 < sigma_min < sigma_max"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::invalid("rho must be > 0"));
        }
        if !(self.zeta_obs >= 0.0 && self.zeta_pde >= 0.0) {
            return Err(Error::invalid("guidance weights must be >= 0"));
        }
        Ok(())
    }

    /// Guidance weights for step `i`.
    pub fn zetas(&self, sigma_i: f64) -> (f64, f64) {
        match self.zeta_schedule {
            ZetaSchedule::Constant => (self.zeta_obs, self.zeta_pde),
            ZetaSchedule::SigmaProportional => {
                let f = sigma_i / self.sigma_max;
                (self.zeta_obs * f, self.zeta_pde * f)
            }
        }
    }
}

/// `σ_0 = σ_max … σ_{N-1} = σ_min`, followed by `σ_N = 0`.
pub fn sigma_schedule(config: &SamplerConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let n = config.n_steps;
    let inv = 1.0 / config.rho;
    let (a, b) = (config.sigma_max.powf(inv), config.sigma_min.powf(inv));
    let mut out: Vec<f64> = (0..n)
        .map(|i| (a + (i as f64 / (n - 1) as f64) * (b - a)).powf(config.rho))
        .collect();
    out[0] = config.sigma_max;
    out[n - 1] = config.sigma_min;
    out.push(0.0);
    Ok(out)
}

/// Which channels a well observation constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSet {
    pub k: bool,
    pub s: bool,
}

impl ChannelSet {
    pub const BOTH: ChannelSet = ChannelSet { k: true, s: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct WellGuidance {
    pub observation: WellObservation,
    pub channels: ChannelSet,
}

/// Observation term: well columns and/or fully known channels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationGuidance {
    pub wells: Option<WellGuidance>,
    pub full_k: Option<Field>,
    pub full_s: Option<Field>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GuidanceTerms {
    pub obs: Option<ObservationGuidance>,
    pub pde: Option<PdeContext>,
}

impl GuidanceTerms {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        if let Some(o) = &self.obs {
            if let Some(w) = &o.wells {
                grid.check_same(&w.observation.mask.grid)?;
            }
            for f in o.full_k.iter().chain(o.full_s.iter()) {
                grid.check_same(f.grid())?;
            }
        }
        if let Some(p) = &self.pde {
            grid.check_same(&p.grid)?;
        }
        Ok(())
    }
}

impl ObservationGuidance {
    /// `||y - M x̂||²` summed over every constrained cell.
    pub fn loss(&self, x_hat: &JointState) -> f64 {
        let mut l = 0.0;
        if let Some(w) = &self.wells {
            let o = &w.observation;
            for (j, i) in o.mask.cell_indices().enumerate() {
                if w.channels.k {
                    l += (x_hat.k.values()[i] - o.k_obs[j]).powi(2);
                }
                if w.channels.s {
                    l += (x_hat.s.values()[i] - o.s_obs[j]).powi(2);
                }
            }
        }
        let full = |f: &Option<Field>, x: &Field| -> f64 {
            f.as_ref()
                .map(|f| {
                    f.values()
                        .iter()
                        .zip(x.values())
                        .map(|(a, b)| (b - a).powi(2))
                        .sum()
                })
                .unwrap_or(0.0)
        };
        l + full(&self.full_k, &x_hat.k) + full(&self.full_s, &x_hat.s)
    }

    /// `∇_x̂ ||y - M x̂||² = 2 Mᵀ (M x̂ - y)`.
    pub fn grad(&self, x_hat: &JointState) -> JointState {
        let g = *x_hat.grid();
        let mut gk = vec![0.0; g.cells()];
        let mut gs = vec![0.0; g.cells()];
        if let Some(w) = &self.wells {
            let o = &w.observation;
            for (j, i) in o.mask.cell_indices().enumerate() {
                if w.channels.k {
                    gk[i] += 2.0 * (x_hat.k.values()[i] - o.k_obs[j]);
                }
                if w.channels.s {
                    gs[i] += 2.0 * (x_hat.s.values()[i] - o.s_obs[j]);
                }
            }
        }
        if let Some(f) = &self.full_k {
            gk.iter_mut()
                .zip(x_hat.k.values().iter().zip(f.values()))
                .for_each(|(g, (x, y))| *g += 2.0 * (x - y));
        }
        if let Some(f) = &self.full_s {
            gs.iter_mut()
                .zip(x_hat.s.values().iter().zip(f.values()))
                .for_each(|(g, (x, y))| *g += 2.0 * (x - y));
        }
        JointState {
            k: Field::from_vec_unchecked(g, gk),
            s: Field::from_vec_unchecked(g, gs),
        }
    }
}

/// Result of one Heun step, before guidance.
#[derive(Debug, Clone)]
pub struct HeunOutput {
    pub x_next: JointState,
    /// Latest denoised estimate: the corrector-stage one when it exists.
    pub x_hat: JointState,
    /// Input and noise level at which `x_hat` was evaluated.
    pub hat_input: JointState,
    pub hat_sigma: f64,
}

pub fn heun_step(
    model: &impl Denoiser,
    x: &JointState,
    sigma: f64,
    sigma_next: f64,
) -> Result<HeunOutput> {
    if !(sigma > sigma_next && sigma_next >= 0.0) {
        return Err(Error::invalid(format!(
            "heun step needs sigma > sigma_next >= 0, got {sigma} -> {sigma_next}"
        )));
    }
    let x_hat = model.denoise(x, sigma)?;
    let d = x.axpy(-1.0, &x_hat).scale(1.0 / sigma);
    let dt = sigma_next - sigma;
    let euler = x.axpy(dt, &d);
    if sigma_next == 0.0 {
        return Ok(HeunOutput {
            x_next: euler,
            x_hat,
            hat_input: x.clone(),
            hat_sigma: sigma,
        });
    }
    let x_hat2 = model.denoise(&euler, sigma_next)?;
    let d2 = euler.axpy(-1.0, &x_hat2).scale(1.0 / sigma_next);
    let x_next = x.axpy(0.5 * dt, &d).axpy(0.5 * dt, &d2);
    Ok(HeunOutput {
        x_next,
        x_hat: x_hat2,
        hat_input: euler,
        hat_sigma: sigma_next,
    })
}

/// The weighted guidance gradient with respect to `x̂`.
pub fn guidance_gradient(
    x_hat: &JointState,
    terms: &GuidanceTerms,
    zeta_obs: f64,
    zeta_pde: f64,
) -> Option<JointState> {
    let mut total: Option<JointState> = None;
    if let Some(o) = terms.obs.as_ref().filter(|_| zeta_obs > 0.0) {
        total = Some(o.grad(x_hat).scale(zeta_obs));
    }
    if let Some(p) = terms.pde.as_ref().filter(|_| zeta_pde > 0.0) {
        let g = pde_loss_grad(x_hat, p);
        total = Some(match total {
            Some(t) => t.axpy(zeta_pde, &g),
            None => g.scale(zeta_pde),
        });
    }
    total
}

/// `x ← x - ζ_obs ∇L_obs - ζ_pde ∇L_pde`, losses evaluated at `x̂`.
pub fn guidance_step(
    model: &impl Denoiser,
    step: &HeunOutput,
    terms: &GuidanceTerms,
    zeta_obs: f64,
    zeta_pde: f64,
    mode: GuidanceMode,
) -> Result<JointState> {
    let Some(g) = guidance_gradient(&step.x_hat, terms, zeta_obs, zeta_pde) else {
        return Ok(step.x_next.clone());
    };
    let g = match mode {
        GuidanceMode::IdentityJacobian => g,
        GuidanceMode::ExactJacobian => model.denoise_vjp(&step.hat_input, step.hat_sigma, &g)?,
    };
    Ok(step.x_next.axpy(-1.0, &g))
}

/// Total guidance losses at a state, for diagnostics.
pub fn guidance_losses(x: &JointState, terms: &GuidanceTerms) -> (f64, f64) {
    (
        terms.obs.as_ref().map(|o| o.loss(x)).unwrap_or(0.0),
        terms.pde.as_ref().map(|p| pde_loss(x, p)).unwrap_or(0.0),
    )
}

/// Draws `x_0 ~ N(0, σ_0² I)` and integrates to `σ = 0` with guidance.
pub fn sample(
    model: &impl Denoiser,
    terms: &GuidanceTerms,
    config: &SamplerConfig,
) -> Result<JointState> {
    let mut rng = rng_from_seed(config.seed);
    sample_with_rng(model, terms, config, &mut rng)
}

pub fn sample_with_rng(
    model: &impl Denoiser,
    terms: &GuidanceTerms,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<JointState> {
    let grid = *model.grid();
    terms.check_grid(&grid)?;
    let sigmas = sigma_schedule(config)?;
    let s0 = sigmas[0];
    let mut field = || Field::from_fn(grid, |_, _| s0 * rng.sample::<f64, _>(StandardNormal));
    let k = field();
    let s = field();
    let mut x = JointState { k, s };
    for i in 0..config.n_steps {
        let step = heun_step(model, &x, sigmas[i], sigmas[i + 1])?;
        let (zo, zp) = config.zetas(sigmas[i]);
        x = guidance_step(model, &step, terms, zo, zp, config.guidance_mode)?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!(
                "sampler iterate at step {i} (sigma {:.4e}, zeta_obs {zo:.3e}, zeta_pde {zp:.3e})",
                sigmas[i]
            )));
        }
    }
    Ok(x)
}

/// Per-cell statistics over an ensemble of independent chains.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: JointState,
    pub std: JointState,
    /// `sqrt(mean_j (x_j - truth)²)` per cell.
    pub rmse: JointState,
    pub samples: Vec<JointState>,
}

pub fn ensemble_stats(samples: Vec<JointState>, truth: &JointState) -> Result<EnsembleStats> {
    if samples.len() < 2 {
        return Err(Error::invalid("ensemble needs at least 2 samples"));
    }
    let grid = *truth.grid();
    let n = samples.len() as f64;
    let flats: Vec<Vec<f64>> = samples.iter().map(|s| s.to_flat()).collect();
    let t = truth.to_flat();
    let len = t.len();
    let mut mean = vec![0.0; len];
    let mut var = vec![0.0; len];
    let mut mse = vec![0.0; len];
    for f in &flats {
        for i in 0..len {
            mean[i] += f[i] / n;
            mse[i] += (f[i] - t[i]).powi(2) / n;
        }
    }
    for f in &flats {
        for i in 0..len {
            var[i] += (f[i] - mean[i]).powi(2) / n;
        }
    }
    Ok(EnsembleStats {
        mean: JointState::from_flat(grid, &mean)?,
        std: JointState::from_flat(grid, &var.iter().map(|v| v.sqrt()).collect::<Vec<_>>())?,
        rmse: JointState::from_flat(grid, &mse.iter().map(|v| v.sqrt()).collect::<Vec<_>>())?,
        samples,
    })
}

/// Runs one chain per seed; a failing chain aborts with its seed.
pub fn sample_ensemble_with_seeds(
    model: &impl Denoiser,
    terms: &GuidanceTerms,
    config: &SamplerConfig,
    seeds: &[u64],
    truth: &JointState,
) -> Result<EnsembleStats> {
    let mut samples = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let c = SamplerConfig {
            seed,
            ..config.clone()
        };
        let x = sample(model, terms, &c).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("ensemble chain seed {seed}: {msg}")),
            other => other,
        })?;
        samples.push(x);
    }
    ensemble_stats(samples, truth)
}

/// `count` chains with seeds `config.seed, config.seed + 1, …`.
pub fn sample_ensemble(
    model: &impl Denoiser,
    terms: &GuidanceTerms,
    config: &SamplerConfig,
    count: usize,
    truth: &JointState,
) -> Result<EnsembleStats> {
    let seeds: Vec<u64> = (0..count as u64)
        .map(|j| config.seed.wrapping_add(j))
        .collect();
    sample_ensemble_with_seeds(model, terms, config, &seeds, truth)
}

impl EnsembleStats {
    /// Writes `ensemble_k.fgrd` and `ensemble_s.fgrd`, each with channels
    /// (mean, std, rmse).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_fields(
            dir.join("ensemble_k.fgrd"),
            &[&self.mean.k, &self.std.k, &self.rmse.k],
        )?;
        write_fields(
            dir.join("ensemble_s.fgrd"),
            &[&self.mean.s, &self.std.s, &self.rmse.s],
        )
    }
}
