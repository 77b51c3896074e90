//! Denoising score matching with the EDM loss weighting and an Adam optimizer.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{rng_from_seed, Manifest};
use crate::error::{Error, Result};
use crate::fields::{Field, JointState};
use crate::model::{Architecture, Checkpoint, Preconditioning, ScoreModel, SIGMA_DATA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Mean of ln σ.
    pub p_mean: f64,
    /// Std of ln σ.
    pub p_std: f64,
    pub sigma_data: f64,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many epochs (0 = never).
    pub checkpoint_interval: usize,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            p_mean: -1.2,
            p_std: 1.2,
            sigma_data: SIGMA_DATA,
            seed: 0,
            checkpoint_interval: 0,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(self.p_std > 0.0) {
            return Err(Error::invalid("p_std must be > 0"));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::invalid("sigma_data must be > 0"));
        }
        self.architecture.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// EDM loss weight `λ(σ) = (σ² + σ_d²) / (σ σ_d)²`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// One noise draw: the level and the noise field.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub sigma: f64,
    pub noise: JointState,
}

pub fn draw_noise(x: &JointState, p_mean: f64, p_std: f64, rng: &mut impl Rng) -> NoiseDraw {
    let z: f64 = rng.sample(StandardNormal);
    let sigma = (p_mean + p_std * z).exp();
    let g = *x.grid();
    let mut field = || Field::from_fn(g, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
    let k = field();
    let s = field();
    NoiseDraw {
        sigma,
        noise: JointState { k, s },
    }
}

/// Batch-mean EDM loss and its parameter gradient for fixed noise draws.
pub fn edm_loss_with_draws(
    model: &ScoreModel,
    batch: &[JointState],
    draws: &[NoiseDraw],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = batch.len() as f64;
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    for (x, d) in batch.iter().zip(draws) {
        let noisy = x.axpy(1.0, &d.noise);
        let (den, tape) = model.linearize(&noisy, d.sigma)?;
        let resid = den.axpy(-1.0, x);
        let w = loss_weight(d.sigma, model.sigma_data);
        loss += w * resid.dot(&resid) / b;
        model.tape_grad_params(&tape, &resid.scale(2.0 * w / b), &mut grad);
    }
    Ok((loss, grad))
}

/// Draws `ln σ ~ N(p_mean, p_std²)` and `n ~ N(0, σ² I)` per sample and
/// returns the batch-mean loss `λ(σ) ||D(x + n; σ) - x||²` with its gradient.
pub fn edm_loss(
    model: &ScoreModel,
    batch: &[JointState],
    p_mean: f64,
    p_std: f64,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<f64>)> {
    let draws: Vec<NoiseDraw> = batch
        .iter()
        .map(|x| draw_noise(x, p_mean, p_std, rng))
        .collect();
    edm_loss_with_draws(model, batch, &draws)
}

/// Closed-form loss of the untrained network (`F = 0`, so `D = c_skip (x + n)`).
pub fn baseline_loss(batch: &[JointState], draws: &[NoiseDraw], sigma_data: f64) -> f64 {
    let b = batch.len() as f64;
    batch
        .iter()
        .zip(draws)
        .map(|(x, d)| {
            let c = Preconditioning::new(d.sigma, sigma_data).c_skip;
            let r = x.axpy(1.0, &d.noise).scale(c).axpy(-1.0, x);
            loss_weight(d.sigma, sigma_data) * r.dot(&r) / b
        })
        .sum()
}

/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl OptimState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], opt: &mut OptimState, lr: f64) {
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut opt.m).zip(&mut opt.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_loss: f64,
    /// Loss of the `F = 0` network on the same validation draws.
    pub val_baseline: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Fixed validation draws: one noise realization per held-out sample.
fn validation_draws(val: &[JointState], config: &TrainConfig) -> Vec<NoiseDraw> {
    let mut rng = rng_from_seed(config.seed ^ 0x5eed_0f_da7a);
    val.iter()
        .map(|x| draw_noise(x, config.p_mean, config.p_std, &mut rng))
        .collect()
}

fn validation_loss(model: &ScoreModel, val: &[JointState], draws: &[NoiseDraw]) -> Result<f64> {
    let b = val.len() as f64;
    let mut loss = 0.0;
    for (x, d) in val.iter().zip(draws) {
        let den = model.forward(&x.axpy(1.0, &d.noise), d.sigma)?;
        let r = den.axpy(-1.0, x);
        loss += loss_weight(d.sigma, model.sigma_data) * r.dot(&r) / b;
    }
    Ok(loss)
}

/// Trains on an in-memory dataset split into train/validation parts.
pub fn train_on(
    config: &TrainConfig,
    manifest: &Manifest,
    train_set: &[JointState],
    val_set: &[JointState],
    mut on_epoch: impl FnMut(&EpochStats, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let grid = manifest.grid;
    let mut rng = rng_from_seed(config.seed);
    let mut model = ScoreModel::init(config.architecture.clone(), grid, &mut rng)?;
    model.sigma_data = config.sigma_data;
    let mut opt = OptimState::new(model.params.len());
    let val_draws = validation_draws(val_set, config);
    let val_baseline = if val_set.is_empty() {
        f64::NAN
    } else {
        baseline_loss(val_set, &val_draws, config.sigma_data)
    };
    let hash = config.hash();
    let snapshot = |m: &ScoreModel| {
        Checkpoint::new(
            m.clone(),
            manifest.normalization,
            Some(manifest.source),
            hash.clone(),
        )
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<JointState> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let draws: Vec<NoiseDraw> = batch
                .iter()
                .map(|x| draw_noise(x, config.p_mean, config.p_std, &mut rng))
                .collect();
            let (loss, grad) = edm_loss_with_draws(&model, &batch, &draws)?;
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !loss.is_finite() || !gnorm.is_finite() {
                let sigmas: Vec<String> =
                    draws.iter().map(|d| format!("{:.4e}", d.sigma)).collect();
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batches}: loss {loss}, grad norm {gnorm}, sigmas [{}]",
                    sigmas.join(", ")
                )));
            }
            adam_step(&mut model.params, &grad, &mut opt, config.learning_rate);
            total += loss;
            batches += 1;
        }
        let val_loss = if val_set.is_empty() {
            f64::NAN
        } else {
            validation_loss(&model, val_set, &val_draws)?
        };
        let stats = EpochStats {
            epoch,
            mean_loss: total / batches as f64,
            val_loss,
            val_baseline,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val {:.4} (baseline {:.4})",
            stats.mean_loss,
            stats.val_loss,
            stats.val_baseline
        );
        on_epoch(&stats, &snapshot(&model))?;
        history.push(stats);
    }
    Ok(TrainOutcome {
        checkpoint: snapshot(&model),
        history,
    })
}

pub fn write_loss_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,mean_loss,val_loss\n");
    for h in history {
        text.push_str(&format!(
            "{},{:.9e},{:.9e}\n",
            h.epoch, h.mean_loss, h.val_loss
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads the dataset behind `manifest_path`, trains, and writes the final
/// checkpoint to `out` and the loss log next to it (`<out>.loss.csv`).
pub fn train(config: &TrainConfig, manifest_path: &Path, out: &Path) -> Result<TrainOutcome> {
    let manifest = Manifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let samples = manifest.load_samples(dir)?;
    let (tr, va) = manifest.split();
    let csv_path = out.with_extension("loss.csv");
    let mut history = Vec::new();
    let outcome = train_on(
        config,
        &manifest,
        &samples[tr],
        &samples[va],
        |stats, ckpt| {
            history.push(stats.clone());
            write_loss_csv(&csv_path, &history)?;
            if config.checkpoint_interval > 0 && stats.epoch % config.checkpoint_interval == 0 {
                ckpt.save(out)?;
            }
            Ok(())
        },
    )?;
    outcome.checkpoint.save(out)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_source, generate_dataset, GrfParams, MANIFEST_NAME};
    use crate::fields::GridSpec;

    fn tiny_arch() -> Architecture {
        Architecture {
            in_channels: 2,
            hidden_channels: 4,
            layers: 3,
            embedding_dim: 4,
            activation: "silu".into(),
        }
    }

    fn random_state(g: GridSpec, rng: &mut impl Rng) -> JointState {
        JointState::new(
            Field::from_fn(g, |_, _| rng.random_range(-1.0..1.0)),
            Field::from_fn(g, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap()
    }

    fn random_model(seed: u64, g: GridSpec) -> ScoreModel {
        let arch = tiny_arch();
        let mut rng = rng_from_seed(seed);
        let params = (0..arch.param_count())
            .map(|_| rng.random_range(-0.4..0.4))
            .collect();
        ScoreModel::new(arch, params, SIGMA_DATA, g).unwrap()
    }

    #[test]
    fn untrained_loss_equals_closed_form() {
        let g = GridSpec::new(6, 6, 1.0).unwrap();
        let mut rng = rng_from_seed(1);
        let model = ScoreModel::init(tiny_arch(), g, &mut rng).unwrap();
        let batch: Vec<_> = (0..4).map(|_| random_state(g, &mut rng)).collect();
        let draws: Vec<_> = batch
            .iter()
            .map(|x| draw_noise(x, -1.2, 1.2, &mut rng))
            .collect();
        let (loss, _) = edm_loss_with_draws(&model, &batch, &draws).unwrap();
        let base = baseline_loss(&batch, &draws, SIGMA_DATA);
        assert!((loss - base).abs() <= 1e-12 * base);
        assert!(loss >= 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let g = GridSpec::new(5, 5, 1.0).unwrap();
        let mut rng = rng_from_seed(2);
        let model = random_model(3, g);
        let batch: Vec<_> = (0..3).map(|_| random_state(g, &mut rng)).collect();
        let draws: Vec<_> = batch
            .iter()
            .map(|x| draw_noise(x, -1.2, 1.2, &mut rng))
            .collect();
        let (_, grad) = edm_loss_with_draws(&model, &batch, &draws).unwrap();
        for _ in 0..20 {
            let i = rng.random_range(0..model.params.len());
            let h = 1e-6;
            let mut mp = model.clone();
            mp.params[i] += h;
            let mut mm = model.clone();
            mm.params[i] -= h;
            let lp = edm_loss_with_draws(&mp, &batch, &draws).unwrap().0;
            let lm = edm_loss_with_draws(&mm, &batch, &draws).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-2),
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn small_step_along_negative_gradient_descends() {
        let g = GridSpec::new(6, 6, 1.0).unwrap();
        let mut rng = rng_from_seed(4);
        let model = random_model(5, g);
        let batch: Vec<_> = (0..2).map(|_| random_state(g, &mut rng)).collect();
        let draws: Vec<_> = batch
            .iter()
            .map(|x| draw_noise(x, -1.2, 1.2, &mut rng))
            .collect();
        let (l0, grad) = edm_loss_with_draws(&model, &batch, &draws).unwrap();
        let gn2: f64 = grad.iter().map(|v| v * v).sum();
        let step = 1e-4 * l0 / gn2;
        let mut m = model.clone();
        m.params
            .iter_mut()
            .zip(&grad)
            .for_each(|(p, g)| *p -= step * g);
        let (l1, _) = edm_loss_with_draws(&m, &batch, &draws).unwrap();
        assert!(l1 < l0);
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut opt = OptimState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut opt, 0.1);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);

        let mut p = vec![1.0, -2.0, 0.5];
        let mut opt = OptimState::new(3);
        let g = [0.3, -4.0, 1e-3];
        adam_step(&mut p, &g, &mut opt, 0.01);
        // m̂ = g, v̂ = g², so each parameter moves by lr · g / (|g| + ε).
        for (i, (&after, before)) in p.iter().zip([1.0, -2.0, 0.5]).enumerate() {
            let want = 0.01 * g[i] / (g[i].abs() + ADAM_EPS);
            assert!(((before - after) - want).abs() < 1e-12);
        }
        let mut p2 = vec![1.0, -2.0, 0.5];
        let mut opt2 = OptimState::new(3);
        adam_step(&mut p2, &g, &mut opt2, 0.01);
        assert_eq!(p, p2);
    }

    #[test]
    fn config_hash_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.hash().len(), 64);
        assert_ne!(
            c.hash(),
            TrainConfig {
                seed: 1,
                ..c.clone()
            }
            .hash()
        );
        assert!(TrainConfig {
            batch_size: 0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..c
        }
        .validate()
        .is_err());
    }

    #[test]
    fn one_epoch_smoke_and_determinism() {
        let g = GridSpec::new(8, 8, 31.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let src = build_source(&g, 2, 5, 5e-16).unwrap();
        generate_dataset(8, &GrfParams::default(), &g, &src, dir.path()).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 3,
            architecture: tiny_arch(),
            ..TrainConfig::default()
        };
        let out = dir.path().join("model.ckpt");
        let a = train(&config, &dir.path().join(MANIFEST_NAME), &out).unwrap();
        let loaded = Checkpoint::load(&out).unwrap();
        assert_eq!(loaded, a.checkpoint);
        let csv = fs::read_to_string(out.with_extension("loss.csv")).unwrap();
        assert!(csv.starts_with("epoch,mean_loss,val_loss\n"));
        assert_eq!(csv.lines().count(), 3);

        let out2 = dir.path().join("model2.ckpt");
        let b = train(&config, &dir.path().join(MANIFEST_NAME), &out2).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());
    }
}
