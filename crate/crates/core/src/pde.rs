//! Physics residual `h = -div(K grad S) - q` on the normalized joint state,
//! its squared norm and the exact gradient of that norm.
//!
//! In model space `K = 10^(logk_mean + logk_std * k)` and saturation enters
//! through its normalized channel; `q` is pre-divided by the saturation
//! half-range so that training pairs give `h ≈ 0`. The residual is further
//! multiplied by `dx^2 / 10^logk_mean`, which makes a unit-permeability
//! Laplacian O(1) and keeps guidance weights dimensionless.

use std::f64::consts::LN_10;

use crate::darcy::harmonic;
use crate::datagen::{Manifest, SourceTerm};
use crate::error::Result;
use crate::fields::{Field, GridSpec, JointState, NormalizationSpec};

/// Normalized log-permeability is clamped to this magnitude before
/// exponentiation; noisy iterates far outside the data range would
/// otherwise overflow. The gradient is zero in the clamped region.
pub const K_CHANNEL_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PdeContext {
    pub grid: GridSpec,
    pub normalization: NormalizationSpec,
    /// Source in normalized-saturation units.
    pub q_norm: Field,
    pub residual_scale: f64,
}

impl PdeContext {
    pub fn new(normalization: NormalizationSpec, source: &SourceTerm) -> Self {
        let grid = *source.q.grid();
        Self {
            grid,
            normalization,
            q_norm: source.q.clone(),
            residual_scale: grid.cell_size * grid.cell_size / 10f64.powf(normalization.logk_mean),
        }
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        Ok(Self::new(m.normalization, &m.normalized_source()?))
    }

    /// Physical permeability for each cell of a normalized channel, plus
    /// `dK/dk` (zero where clamped).
    fn permeability(&self, k: &Field) -> (Vec<f64>, Vec<f64>) {
        let n = &self.normalization;
        let mut kp = Vec::with_capacity(k.values().len());
        let mut dk = Vec::with_capacity(k.values().len());
        for &v in k.values() {
            let c = v.clamp(-K_CHANNEL_CLAMP, K_CHANNEL_CLAMP);
            let kv = n.perm_from_normalized(c);
            kp.push(kv);
            dk.push(if c == v { LN_10 * n.logk_std * kv } else { 0.0 });
        }
        (kp, dk)
    }
}

fn for_each_face(g: &GridSpec, mut f: impl FnMut(usize, usize)) {
    let (h, w) = (g.height, g.width);
    for r in 0..h {
        for c in 0..w - 1 {
            f(r * w + c, r * w + c + 1);
        }
    }
    for r in 0..h - 1 {
        for c in 0..w {
            f(r * w + c, (r + 1) * w + c);
        }
    }
}

fn residual_raw(x: &JointState, ctx: &PdeContext, kp: &[f64]) -> Vec<f64> {
    let g = ctx.grid;
    let inv_dx2 = 1.0 / (g.cell_size * g.cell_size);
    let s = x.s.values();
    let mut out: Vec<f64> = ctx.q_norm.values().iter().map(|q| -q).collect();
    for_each_face(&g, |a, b| {
        let flux = harmonic(kp[a], kp[b]) * inv_dx2 * (s[a] - s[b]);
        out[a] += flux;
        out[b] -= flux;
    });
    out.iter_mut().for_each(|v| *v *= ctx.residual_scale);
    out
}

pub fn residual_h(x: &JointState, ctx: &PdeContext) -> Field {
    let (kp, _) = ctx.permeability(&x.k);
    Field::from_vec_unchecked(ctx.grid, residual_raw(x, ctx, &kp))
}

pub fn pde_loss(x: &JointState, ctx: &PdeContext) -> f64 {
    residual_h(x, ctx).values().iter().map(|v| v * v).sum()
}

/// Gradient of [`pde_loss`] with respect to both channels.
pub fn pde_loss_grad(x: &JointState, ctx: &PdeContext) -> JointState {
    let g = ctx.grid;
    let inv_dx2 = 1.0 / (g.cell_size * g.cell_size);
    let (kp, dk) = ctx.permeability(&x.k);
    let h = residual_raw(x, ctx, &kp);
    let s = x.s.values();
    let two_r = 2.0 * ctx.residual_scale;

    let mut gs = vec![0.0; g.cells()];
    let mut gk_phys = vec![0.0; g.cells()];
    for_each_face(&g, |a, b| {
        let (ka, kb) = (kp[a], kp[b]);
        let t = harmonic(ka, kb) * inv_dx2;
        let dh = h[a] - h[b];
        let ds = s[a] - s[b];
        // d/ds of sum h^2 through this face: 2 r T (h_a - h_b) on a, negated on b.
        let gflux = two_r * t * dh;
        gs[a] += gflux;
        gs[b] -= gflux;
        // d/dT, then the harmonic-mean partials.
        let dl_dt = two_r * dh * ds;
        let denom = (ka + kb) * (ka + kb);
        gk_phys[a] += dl_dt * 2.0 * kb * kb / denom * inv_dx2;
        gk_phys[b] += dl_dt * 2.0 * ka * ka / denom * inv_dx2;
    });
    let gk: Vec<f64> = gk_phys.iter().zip(&dk).map(|(a, b)| a * b).collect();
    JointState {
        k: Field::from_vec_unchecked(g, gk),
        s: Field::from_vec_unchecked(g, gs),
    }
}
