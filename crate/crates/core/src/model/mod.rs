//! EDM-preconditioned denoiser `D(x; σ) = c_skip x + c_out F(c_in x, c_noise)`
//! with reverse-mode gradients for guidance and training.

pub mod checkpoint;
pub mod net;

use crate::error::{Error, Result};
use crate::fields::{Field, GridSpec, JointState};

pub use checkpoint::Checkpoint;
pub use net::Architecture;

/// Default standard deviation of the normalized data.
pub const SIGMA_DATA: f64 = 0.5;

/// EDM scaling coefficients at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Preconditioning {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma + sigma_data * sigma_data;
        Self {
            c_skip: sigma_data * sigma_data / s2,
            c_out: sigma * sigma_data / s2.sqrt(),
            c_in: 1.0 / s2.sqrt(),
            c_noise: sigma.ln() / 4.0,
        }
    }
}

/// Anything that produces a denoised estimate and can pull a cotangent back
/// through it. The sampler is written against this trait so that analytic
/// denoisers can stand in for the network.
pub trait Denoiser {
    fn grid(&self) -> &GridSpec;

    fn denoise(&self, x: &JointState, sigma: f64) -> Result<JointState>;

    /// `(∂D/∂x)ᵀ · cotangent`, evaluated at `(x, sigma)`.
    fn denoise_vjp(&self, x: &JointState, sigma: f64, cotangent: &JointState)
        -> Result<JointState>;
}

/// The trained denoiser: network weights plus the data scale it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub arch: Architecture,
    pub params: Vec<f64>,
    pub sigma_data: f64,
    pub grid: GridSpec,
}

/// Forward values needed to pull cotangents back through one evaluation.
pub struct Tape {
    pre: Preconditioning,
    net: net::NetTape,
    grid: GridSpec,
}

fn to_pixel_major(x: &JointState, scale: f64) -> Vec<f64> {
    let (k, s) = (x.k.values(), x.s.values());
    let mut out = Vec::with_capacity(2 * k.len());
    for (a, b) in k.iter().zip(s) {
        out.push(scale * a);
        out.push(scale * b);
    }
    out
}

fn from_pixel_major(grid: GridSpec, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = v.iter().step_by(2).copied().collect();
    let s = v.iter().skip(1).step_by(2).copied().collect();
    let _ = grid;
    (k, s)
}

impl ScoreModel {
    pub fn new(
        arch: Architecture,
        params: Vec<f64>,
        sigma_data: f64,
        grid: GridSpec,
    ) -> Result<Self> {
        arch.validate()?;
        if arch.in_channels != 2 {
            return Err(Error::invalid("denoiser must have 2 input channels"));
        }
        if params.len() != arch.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if !(sigma_data > 0.0) {
            return Err(Error::invalid("sigma_data must be > 0"));
        }
        Ok(Self {
            arch,
            params,
            sigma_data,
            grid,
        })
    }

    pub fn init(arch: Architecture, grid: GridSpec, rng: &mut impl rand::Rng) -> Result<Self> {
        let params = arch.init_params(rng);
        Self::new(arch, params, SIGMA_DATA, grid)
    }

    fn check(&self, x: &JointState, sigma: f64) -> Result<()> {
        if !x.grid().same_shape(&self.grid) {
            return Err(Error::invalid(format!(
                "state grid {}x{} does not match model grid {}x{}",
                x.grid().height,
                x.grid().width,
                self.grid.height,
                self.grid.width
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "noise level must be > 0, got {sigma}"
            )));
        }
        Ok(())
    }

    /// Evaluates D and keeps what the reverse pass needs.
    pub fn linearize(&self, x: &JointState, sigma: f64) -> Result<(JointState, Tape)> {
        self.check(x, sigma)?;
        let pre = Preconditioning::new(sigma, self.sigma_data);
        let input = to_pixel_major(x, pre.c_in);
        let g = *x.grid();
        let (f, tape) = net::forward(
            &self.arch,
            &self.params,
            &input,
            g.height,
            g.width,
            pre.c_noise,
        );
        let (fk, fs) = from_pixel_major(g, &f);
        let combine = |xv: &[f64], fv: &[f64]| -> Vec<f64> {
            xv.iter()
                .zip(fv)
                .map(|(a, b)| pre.c_skip * a + pre.c_out * b)
                .collect()
        };
        let d = JointState {
            k: Field::from_vec_unchecked(g, combine(x.k.values(), &fk)),
            s: Field::from_vec_unchecked(g, combine(x.s.values(), &fs)),
        };
        if !d.is_finite() {
            return Err(Error::NonFinite(format!(
                "denoiser output at sigma {sigma}"
            )));
        }
        Ok((
            d,
            Tape {
                pre,
                net: tape,
                grid: g,
            },
        ))
    }

    pub fn forward(&self, x: &JointState, sigma: f64) -> Result<JointState> {
        Ok(self.linearize(x, sigma)?.0)
    }

    /// `∇ log p(x; σ) ≈ (D(x; σ) - x) / σ²`.
    pub fn score(&self, x: &JointState, sigma: f64) -> Result<JointState> {
        let d = self.forward(x, sigma)?;
        Ok(d.axpy(-1.0, x).scale(1.0 / (sigma * sigma)))
    }

    pub fn vjp_input(
        &self,
        x: &JointState,
        sigma: f64,
        cotangent: &JointState,
    ) -> Result<JointState> {
        let (_, tape) = self.linearize(x, sigma)?;
        Ok(self.tape_vjp_input(&tape, cotangent))
    }

    pub fn grad_params(
        &self,
        x: &JointState,
        sigma: f64,
        cotangent: &JointState,
    ) -> Result<Vec<f64>> {
        let (_, tape) = self.linearize(x, sigma)?;
        let mut g = vec![0.0; self.params.len()];
        self.tape_grad_params(&tape, cotangent, &mut g);
        Ok(g)
    }

    pub fn tape_vjp_input(&self, tape: &Tape, cotangent: &JointState) -> JointState {
        let pre = tape.pre;
        let d_out = to_pixel_major(cotangent, pre.c_out);
        let du = net::backward(&self.arch, &self.params, &tape.net, &d_out, None, true)
            .expect("input gradient requested");
        let (gk, gs) = from_pixel_major(tape.grid, &du);
        let combine = |c: &[f64], g: &[f64]| -> Vec<f64> {
            c.iter()
                .zip(g)
                .map(|(a, b)| pre.c_skip * a + pre.c_in * b)
                .collect()
        };
        JointState {
            k: Field::from_vec_unchecked(tape.grid, combine(cotangent.k.values(), &gk)),
            s: Field::from_vec_unchecked(tape.grid, combine(cotangent.s.values(), &gs)),
        }
    }

    /// Adds `(∂D/∂θ)ᵀ · cotangent` into `grad`.
    pub fn tape_grad_params(&self, tape: &Tape, cotangent: &JointState, grad: &mut [f64]) {
        let d_out = to_pixel_major(cotangent, tape.pre.c_out);
        net::backward(
            &self.arch,
            &self.params,
            &tape.net,
            &d_out,
            Some(grad),
            false,
        );
    }
}

impl Denoiser for ScoreModel {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn denoise(&self, x: &JointState, sigma: f64) -> Result<JointState> {
        self.forward(x, sigma)
    }

    fn denoise_vjp(
        &self,
        x: &JointState,
        sigma: f64,
        cotangent: &JointState,
    ) -> Result<JointState> {
        self.vjp_input(x, sigma, cotangent)
    }
}

/// Optimal denoiser for data distributed as independent `N(mean, std²)`
/// per cell: `D*(x; σ) = (std² x + σ² mean) / (std² + σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDenoiser {
    pub grid: GridSpec,
    pub mean: f64,
    pub std: f64,
}

impl Denoiser for GaussianDenoiser {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn denoise(&self, x: &JointState, sigma: f64) -> Result<JointState> {
        let v = self.std * self.std;
        let s2 = sigma * sigma;
        let f = |a: f64| (v * a + s2 * self.mean) / (v + s2);
        Ok(JointState {
            k: x.k.map(f),
            s: x.s.map(f),
        })
    }

    fn denoise_vjp(
        &self,
        _x: &JointState,
        sigma: f64,
        cotangent: &JointState,
    ) -> Result<JointState> {
        let v = self.std * self.std;
        Ok(cotangent.scale(v / (v + sigma * sigma)))
    }
}
