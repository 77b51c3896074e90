//! Two-point flux finite-volume discretization of `-div(K grad S) = q`
//! with no-flux boundaries, and a deflated conjugate-gradient solve.
//!
//! Faces between horizontally adjacent cells carry transmissibility
//! `T = 2 K_a K_b / (K_a + K_b) / dx^2`; vertical faces likewise. The row of
//! cell `c` applies `sum_f T_f (S_c - S_nbr)`. Boundary faces carry no flux,
//! so the operator annihilates constants and is symmetric positive
//! semi-definite.

use crate::error::{Error, Result};
use crate::fields::{Field, GridSpec};

pub const DEFAULT_TOL: f64 = 1e-10;

pub fn default_max_iter(grid: &GridSpec) -> usize {
    10 * grid.cells()
}

#[inline]
pub(crate) fn harmonic(ka: f64, kb: f64) -> f64 {
    2.0 * ka * kb / (ka + kb)
}

/// Face transmissibilities and right-hand side of the steady system.
#[derive(Debug, Clone, PartialEq)]
pub struct TpfaSystem {
    pub grid: GridSpec,
    /// Faces between `(r, c)` and `(r, c + 1)`, indexed `r * (width - 1) + c`.
    pub tx: Vec<f64>,
    /// Faces between `(r, c)` and `(r + 1, c)`, indexed `r * width + c`.
    pub ty: Vec<f64>,
    pub rhs: Field,
}

fn check_perm(k: &Field) -> Result<()> {
    match k.values().iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        Some(i) => Err(Error::invalid(format!(
            "permeability must be positive and finite, cell {i} holds {}",
            k.values()[i]
        ))),
        None => Ok(()),
    }
}

fn transmissibilities(k: &Field) -> (Vec<f64>, Vec<f64>) {
    let g = k.grid();
    let (h, w) = (g.height, g.width);
    let inv_dx2 = 1.0 / (g.cell_size * g.cell_size);
    let kv = k.values();
    let mut tx = Vec::with_capacity(h * (w - 1));
    for r in 0..h {
        for c in 0..w - 1 {
            tx.push(harmonic(kv[r * w + c], kv[r * w + c + 1]) * inv_dx2);
        }
    }
    let mut ty = Vec::with_capacity((h - 1) * w);
    for r in 0..h - 1 {
        for c in 0..w {
            ty.push(harmonic(kv[r * w + c], kv[(r + 1) * w + c]) * inv_dx2);
        }
    }
    (tx, ty)
}

/// `out += A s` for the given face transmissibilities.
fn apply_faces(grid: &GridSpec, tx: &[f64], ty: &[f64], s: &[f64], out: &mut [f64]) {
    let (h, w) = (grid.height, grid.width);
    for r in 0..h {
        for c in 0..w - 1 {
            let (a, b) = (r * w + c, r * w + c + 1);
            let flux = tx[r * (w - 1) + c] * (s[a] - s[b]);
            out[a] += flux;
            out[b] -= flux;
        }
    }
    for r in 0..h - 1 {
        for c in 0..w {
            let (a, b) = (r * w + c, (r + 1) * w + c);
            let flux = ty[r * w + c] * (s[a] - s[b]);
            out[a] += flux;
            out[b] -= flux;
        }
    }
}

pub fn assemble(k_phys: &Field, q: &Field) -> Result<TpfaSystem> {
    k_phys.grid().check_same(q.grid())?;
    check_perm(k_phys)?;
    let (tx, ty) = transmissibilities(k_phys);
    Ok(TpfaSystem {
        grid: *k_phys.grid(),
        tx,
        ty,
        rhs: q.clone(),
    })
}

impl TpfaSystem {
    pub fn apply(&self, s: &Field) -> Result<Field> {
        self.grid.check_same(s.grid())?;
        let mut out = vec![0.0; self.grid.cells()];
        apply_faces(&self.grid, &self.tx, &self.ty, s.values(), &mut out);
        Ok(Field::from_vec_unchecked(self.grid, out))
    }

    fn apply_raw(&self, s: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        apply_faces(&self.grid, &self.tx, &self.ty, s, out);
    }

    /// Operator diagonal: sum of the transmissibilities around each cell.
    pub fn diagonal(&self) -> Vec<f64> {
        let (h, w) = (self.grid.height, self.grid.width);
        let mut d = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w - 1 {
                let t = self.tx[r * (w - 1) + c];
                d[r * w + c] += t;
                d[r * w + c + 1] += t;
            }
        }
        for r in 0..h - 1 {
            for c in 0..w {
                let t = self.ty[r * w + c];
                d[r * w + c] += t;
                d[(r + 1) * w + c] += t;
            }
        }
        d
    }
}

/// Matrix-free `-div(K grad S)`; identical arithmetic to [`TpfaSystem::apply`].
pub fn apply_operator(k_phys: &Field, s: &Field) -> Result<Field> {
    k_phys.grid().check_same(s.grid())?;
    let (tx, ty) = transmissibilities(k_phys);
    let mut out = vec![0.0; k_phys.grid().cells()];
    apply_faces(k_phys.grid(), &tx, &ty, s.values(), &mut out);
    Ok(Field::from_vec_unchecked(*k_phys.grid(), out))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves `A S = q` for the zero-mean `S`, Jacobi-preconditioned CG.
///
/// Stops when `||A S - q|| / ||q|| <= tol`.
pub fn solve_steady(k_phys: &Field, q: &Field, tol: f64, max_iter: usize) -> Result<Field> {
    let sys = assemble(k_phys, q)?;
    let grid = sys.grid;
    let n = grid.cells();
    let b = q.values();
    let q_norm = dot(b, b).sqrt();
    let q_abs: f64 = b.iter().map(|v| v.abs()).sum();
    if q.sum().abs() > 1e-10 * q_abs.max(f64::MIN_POSITIVE) {
        return Err(Error::invalid(format!(
            "source term is incompatible with no-flux boundaries: sum = {:.3e}",
            q.sum()
        )));
    }
    if q_norm == 0.0 {
        return Ok(Field::zeros(grid));
    }

    let inv_diag: Vec<f64> = sys.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    remove_mean(&mut r);
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = dot(&r, &r).sqrt() / q_norm;

    for it in 0..max_iter {
        if res <= tol {
            // Confirm on the true residual; the recurrence can drift.
            sys.apply_raw(&x, &mut ap);
            let true_res = ap
                .iter()
                .zip(b)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / q_norm;
            if true_res <= tol {
                return Ok(Field::from_vec_unchecked(grid, x));
            }
            log::debug!("cg restart at iteration {it}: recursive {res:.2e}, true {true_res:.2e}");
            r.iter_mut()
                .zip(&ap)
                .zip(b)
                .for_each(|((r, a), b)| *r = b - a);
            remove_mean(&mut r);
            z = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
        }
        sys.apply_raw(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        x.iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.iter_mut().zip(&ap).for_each(|(r, a)| *r -= alpha * a);
        remove_mean(&mut x);
        z.iter_mut()
            .zip(&r)
            .zip(&inv_diag)
            .for_each(|((z, r), d)| *z = r * d);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
        res = dot(&r, &r).sqrt() / q_norm;
    }
    sys.apply_raw(&x, &mut ap);
    let residual = ap
        .iter()
        .zip(b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
        / q_norm;
    if residual <= tol {
        return Ok(Field::from_vec_unchecked(grid, x));
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}
