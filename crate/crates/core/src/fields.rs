//! Grid geometry, scalar fields, the two-channel joint state and the
//! transforms between physical and model (normalized) units.
//!
//! Every other module speaks in these types. Values are stored row-major
//! (`index = row * width + col`), row 0 at the top of the section.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular 2D cell-centred grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Edge length of a (square) cell in meters.
    pub cell_size: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, cell_size: f64) -> Result<Self> {
        if height < 4 || width < 4 {
            return Err(Error::invalid(format!(
                "grid must be at least 4x4, got {height}x{width}"
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid(format!(
                "cell_size must be > 0, got {cell_size}"
            )));
        }
        Ok(Self {
            height,
            width,
            cell_size,
        })
    }

    /// The default desk-scale section: 64x64 cells over 2000 m.
    pub fn desk_scale() -> Self {
        Self {
            height: 64,
            width: 64,
            cell_size: 2000.0 / 64.0,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn domain_width(&self) -> f64 {
        self.width as f64 * self.cell_size
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Same cell layout; cell size is allowed to differ only by round-off.
    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "grid mismatch: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }
}

/// One real value per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(Error::invalid(format!(
                "field has {} values, grid {}x{} needs {}",
                values.len(),
                grid.height,
                grid.width,
                grid.cells()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at cell {i}")));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_vec_unchecked(grid: GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.cells());
        Self { grid, values }
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.cells()],
        }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.cells());
        for r in 0..grid.height {
            for c in 0..grid.width {
                values.push(f(r, c));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.grid.index(row, col)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64)
            .sqrt()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn norm2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// The two-channel state the diffusion model operates on: normalized
/// log-permeability `k` and normalized saturation `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub k: Field,
    pub s: Field,
}

impl JointState {
    pub fn new(k: Field, s: Field) -> Result<Self> {
        k.grid().check_same(s.grid())?;
        Ok(Self { k, s })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            k: Field::zeros(grid),
            s: Field::zeros(grid),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        self.k.grid()
    }

    /// Channel-contiguous copy: all of `k`, then all of `s`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.k.values.len());
        out.extend_from_slice(&self.k.values);
        out.extend_from_slice(&self.s.values);
        out
    }

    pub fn from_flat(grid: GridSpec, flat: &[f64]) -> Result<Self> {
        let n = grid.cells();
        if flat.len() != 2 * n {
            return Err(Error::invalid(format!(
                "flat state has {} values, expected {}",
                flat.len(),
                2 * n
            )));
        }
        Ok(Self {
            k: Field::new(grid, flat[..n].to_vec())?,
            s: Field::new(grid, flat[n..].to_vec())?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.k.is_finite() && self.s.is_finite()
    }

    /// `self + a * other`, channel-wise.
    pub fn axpy(&self, a: f64, other: &JointState) -> JointState {
        let zip = |x: &Field, y: &Field| Field {
            grid: x.grid,
            values: x
                .values
                .iter()
                .zip(&y.values)
                .map(|(u, v)| u + a * v)
                .collect(),
        };
        JointState {
            k: zip(&self.k, &other.k),
            s: zip(&self.s, &other.s),
        }
    }

    pub fn scale(&self, a: f64) -> JointState {
        JointState {
            k: self.k.map(|v| a * v),
            s: self.s.map(|v| a * v),
        }
    }

    pub fn dot(&self, other: &JointState) -> f64 {
        let d = |x: &Field, y: &Field| {
            x.values
                .iter()
                .zip(&y.values)
                .map(|(u, v)| u * v)
                .sum::<f64>()
        };
        d(&self.k, &other.k) + d(&self.s, &other.s)
    }
}

/// Affine/log maps between physical units and model space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    /// Mean of log10(K [m²]).
    pub logk_mean: f64,
    /// Scale of log10(K) in decades.
    pub logk_std: f64,
    pub sat_min: f64,
    pub sat_max: f64,
}

impl NormalizationSpec {
    pub fn new(logk_mean: f64, logk_std: f64, sat_min: f64, sat_max: f64) -> Result<Self> {
        if !(logk_std > 0.0) || !logk_mean.is_finite() || !logk_std.is_finite() {
            return Err(Error::invalid(format!(
                "logk_std must be > 0, got {logk_std}"
            )));
        }
        if !(sat_max > sat_min) || !sat_min.is_finite() || !sat_max.is_finite() {
            return Err(Error::invalid(format!(
                "sat_max must exceed sat_min, got [{sat_min}, {sat_max}]"
            )));
        }
        Ok(Self {
            logk_mean,
            logk_std,
            sat_min,
            sat_max,
        })
    }

    /// Half-width of the saturation interval: physical saturation change per
    /// unit of normalized saturation.
    pub fn sat_half_range(&self) -> f64 {
        0.5 * (self.sat_max - self.sat_min)
    }

    pub fn perm_from_normalized(&self, k: f64) -> f64 {
        10f64.powf(self.logk_mean + self.logk_std * k)
    }
}

pub fn normalize_perm(k_phys: &Field, spec: &NormalizationSpec) -> Result<Field> {
    if let Some(i) = k_phys.values.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::invalid(format!(
            "permeability must be positive, cell {i} holds {}",
            k_phys.values[i]
        )));
    }
    Ok(k_phys.map(|v| (v.log10() - spec.logk_mean) / spec.logk_std))
}

pub fn denormalize_perm(k: &Field, spec: &NormalizationSpec) -> Field {
    k.map(|v| spec.perm_from_normalized(v))
}

/// Maps `[sat_min, sat_max]` onto `[-1, 1]`. Out-of-range inputs are
/// clamped; the second element counts how many cells were clamped.
pub fn normalize_sat(s_phys: &Field, spec: &NormalizationSpec) -> (Field, usize) {
    let mut clamped = 0;
    let half = spec.sat_half_range();
    let values = s_phys
        .values
        .iter()
        .map(|&v| {
            let c = v.clamp(spec.sat_min, spec.sat_max);
            if c != v {
                clamped += 1;
            }
            (c - spec.sat_min) / half - 1.0
        })
        .collect();
    if clamped > 0 {
        log::warn!(
            "normalize_sat clamped {clamped} cells into [{}, {}]",
            spec.sat_min,
            spec.sat_max
        );
    }
    (
        Field {
            grid: s_phys.grid,
            values,
        },
        clamped,
    )
}

pub fn denormalize_sat(s: &Field, spec: &NormalizationSpec) -> Field {
    let half = spec.sat_half_range();
    s.map(|v| spec.sat_min + (v + 1.0) * half)
}

/// Full vertical columns at well locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellMask {
    pub grid: GridSpec,
    columns: Vec<usize>,
}

impl WellMask {
    /// Sorts and de-duplicates `columns`.
    pub fn new(grid: GridSpec, mut columns: Vec<usize>) -> Result<Self> {
        if let Some(&c) = columns.iter().find(|&&c| c >= grid.width) {
            return Err(Error::invalid(format!(
                "well column {c} outside grid of width {}",
                grid.width
            )));
        }
        columns.sort_unstable();
        columns.dedup();
        Ok(Self { grid, columns })
    }

    pub fn all_columns(grid: GridSpec) -> Self {
        Self {
            grid,
            columns: (0..grid.width).collect(),
        }
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn cell_count(&self) -> usize {
        self.columns.len() * self.grid.height
    }

    /// Cell indices in observation order: column ascending, then row ascending.
    pub fn cell_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let g = self.grid;
        self.columns
            .iter()
            .flat_map(move |&c| (0..g.height).map(move |r| g.index(r, c)))
    }

    /// The binary per-cell field M.
    pub fn expand(&self) -> Field {
        let mut m = Field::zeros(self.grid);
        for i in self.cell_indices() {
            m.values[i] = 1.0;
        }
        m
    }
}

/// Values of both channels on the masked cells, in mask order.
#[derive(Debug, Clone, PartialEq)]
pub struct WellObservation {
    pub mask: WellMask,
    pub k_obs: Vec<f64>,
    pub s_obs: Vec<f64>,
}

impl WellObservation {
    pub fn new(mask: WellMask, k_obs: Vec<f64>, s_obs: Vec<f64>) -> Result<Self> {
        let n = mask.cell_count();
        if k_obs.len() != n || s_obs.len() != n {
            return Err(Error::invalid(format!(
                "observation sizes ({}, {}) do not match {} masked cells",
                k_obs.len(),
                s_obs.len(),
                n
            )));
        }
        if k_obs.iter().chain(&s_obs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("well observation".into()));
        }
        Ok(Self { mask, k_obs, s_obs })
    }
}

/// The extraction operator M applied to both channels.
pub fn apply_mask(x: &JointState, mask: &WellMask) -> Result<WellObservation> {
    x.grid().check_same(&mask.grid)?;
    let k_obs = mask.cell_indices().map(|i| x.k.values[i]).collect();
    let s_obs = mask.cell_indices().map(|i| x.s.values[i]).collect();
    Ok(WellObservation {
        mask: mask.clone(),
        k_obs,
        s_obs,
    })
}

/// Converts horizontal well positions (meters) to grid columns.
pub fn well_columns_from_meters(positions: &[f64], grid: &GridSpec) -> Result<WellMask> {
    let width = grid.domain_width();
    let mut cols = Vec::with_capacity(positions.len());
    for &p in positions {
        if !(p >= 0.0 && p < width) {
            return Err(Error::invalid(format!(
                "well position {p} m outside domain [0, {width})"
            )));
        }
        cols.push((p / grid.cell_size).floor() as usize);
    }
    WellMask::new(*grid, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> NormalizationSpec {
        NormalizationSpec::new(-13.0, 0.5, 0.0, 0.8).unwrap()
    }

    #[test]
    fn grid_rejects_small_or_bad_cells() {
        assert!(GridSpec::new(3, 8, 1.0).is_err());
        assert!(GridSpec::new(8, 8, 0.0).is_err());
        assert_eq!(GridSpec::desk_scale().domain_width(), 2000.0);
    }

    #[test]
    fn field_rejects_nan_and_wrong_length() {
        let g = GridSpec::new(4, 4, 1.0).unwrap();
        assert!(Field::new(g, vec![0.0; 15]).is_err());
        let mut v = vec![0.0; 16];
        v[3] = f64::NAN;
        assert!(Field::new(g, v).is_err());
    }

    #[test]
    fn perm_centering_and_unit_scale() {
        let g = GridSpec::new(4, 4, 1.0).unwrap();
        let s = spec();
        let k = Field::constant(g, 10f64.powf(s.logk_mean));
        assert!(normalize_perm(&k, &s)
            .unwrap()
            .values()
            .iter()
            .all(|v| v.abs() < 1e-12));
        let k = Field::constant(g, 10f64.powf(s.logk_mean + s.logk_std));
        assert!(normalize_perm(&k, &s)
            .unwrap()
            .values()
            .iter()
            .all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn perm_rejects_non_positive() {
        let g = GridSpec::new(4, 4, 1.0).unwrap();
        let mut k = Field::constant(g, 1e-13);
        k.values_mut()[5] = 0.0;
        assert!(matches!(
            normalize_perm(&k, &spec()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn sat_endpoints_midpoint_and_clamp() {
        let g = GridSpec::new(4, 4, 1.0).unwrap();
        let s = spec();
        let (lo, _) = normalize_sat(&Field::constant(g, s.sat_min), &s);
        let (hi, _) = normalize_sat(&Field::constant(g, s.sat_max), &s);
        let (mid, _) = normalize_sat(&Field::constant(g, 0.5 * (s.sat_min + s.sat_max)), &s);
        assert!(lo.values().iter().all(|&v| v == -1.0));
        assert!(hi.values().iter().all(|&v| v == 1.0));
        assert!(mid.values().iter().all(|&v| v.abs() < 1e-15));
        let (c, n) = normalize_sat(&Field::constant(g, s.sat_max + 1e-9), &s);
        assert_eq!(n, 16);
        assert!(c.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_full_columns_is_identity() {
        let g = GridSpec::new(4, 5, 1.0).unwrap();
        let x = JointState::new(
            Field::from_fn(g, |r, c| (r * 5 + c) as f64),
            Field::from_fn(g, |r, c| -((r * 5 + c) as f64)),
        )
        .unwrap();
        let obs = apply_mask(&x, &WellMask::all_columns(g)).unwrap();
        let expected: Vec<f64> = (0..5)
            .flat_map(|c| (0..4).map(move |r| (r * 5 + c) as f64))
            .collect();
        assert_eq!(obs.k_obs, expected);
        assert_eq!(obs.s_obs, expected.iter().map(|v| -v).collect::<Vec<_>>());
    }

    #[test]
    fn mask_constant_field() {
        let g = GridSpec::new(6, 6, 1.0).unwrap();
        let x = JointState::new(Field::constant(g, 0.25), Field::constant(g, 0.25)).unwrap();
        let mask = WellMask::new(g, vec![1, 4]).unwrap();
        let obs = apply_mask(&x, &mask).unwrap();
        assert_eq!(obs.k_obs.len(), 12);
        assert!(obs.k_obs.iter().chain(&obs.s_obs).all(|&v| v == 0.25));
    }

    #[test]
    fn mask_hand_enumerated_4x4() {
        let g = GridSpec::new(4, 4, 1.0).unwrap();
        let idx = Field::from_fn(g, |r, c| (r * 4 + c) as f64);
        let x = JointState::new(idx.clone(), idx).unwrap();
        let obs = apply_mask(&x, &WellMask::new(g, vec![3, 1]).unwrap()).unwrap();
        assert_eq!(obs.k_obs, vec![1.0, 5.0, 9.0, 13.0, 3.0, 7.0, 11.0, 15.0]);
    }

    #[test]
    fn mask_grid_mismatch() {
        let g = GridSpec::new(4, 4, 1.0).unwrap();
        let h = GridSpec::new(5, 4, 1.0).unwrap();
        assert!(apply_mask(&JointState::zeros(g), &WellMask::new(h, vec![0]).unwrap()).is_err());
    }

    #[test]
    fn mask_expansion_counts() {
        let g = GridSpec::new(7, 9, 1.0).unwrap();
        let mask = WellMask::new(g, vec![8, 2, 2, 5]).unwrap();
        assert_eq!(mask.columns(), &[2, 5, 8]);
        let m = mask.expand();
        assert_eq!(m.sum(), (7 * 3) as f64);
        // M is a selector: M∘M = M.
        assert!(m.values().iter().all(|&v| v * v == v));
        assert!(WellMask::new(g, vec![9]).is_err());
    }

    #[test]
    fn default_well_positions_on_desk_grid() {
        let g = GridSpec::desk_scale();
        let m = well_columns_from_meters(&[775.0, 1050.0], &g).unwrap();
        assert_eq!(m.columns(), &[24, 33]);
        assert_eq!(
            well_columns_from_meters(&[0.0], &g).unwrap().columns(),
            &[0]
        );
        assert!(well_columns_from_meters(&[2000.0], &g).is_err());
        assert!(well_columns_from_meters(&[-1.0], &g).is_err());
        assert_eq!(
            well_columns_from_meters(&[775.0, 780.0], &g)
                .unwrap()
                .columns(),
            &[24]
        );
    }

    fn arb_field(g: GridSpec, lo: f64, hi: f64) -> impl Strategy<Value = Field> {
        proptest::collection::vec(lo..hi, g.cells()).prop_map(move |v| Field::new(g, v).unwrap())
    }

    proptest! {
        #[test]
        fn perm_round_trip(f in arb_field(GridSpec::new(5, 6, 1.0).unwrap(), -16.0, -10.0)) {
            let s = spec();
            let k = f.map(|v| 10f64.powf(v));
            let back = denormalize_perm(&normalize_perm(&k, &s).unwrap(), &s);
            for (a, b) in k.values().iter().zip(back.values()) {
                prop_assert!(((a - b) / a).abs() < 1e-12);
            }
        }

        #[test]
        fn sat_round_trip(f in arb_field(GridSpec::new(5, 6, 1.0).unwrap(), 0.0, 0.8)) {
            let s = spec();
            let back = denormalize_sat(&normalize_sat(&f, &s).0, &s);
            for (a, b) in f.values().iter().zip(back.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn mask_is_linear(
            x in arb_field(GridSpec::new(4, 6, 1.0).unwrap(), -2.0, 2.0),
            z in arb_field(GridSpec::new(4, 6, 1.0).unwrap(), -2.0, 2.0),
            a in -3.0f64..3.0, b in -3.0f64..3.0,
        ) {
            let g = *x.grid();
            let mask = WellMask::new(g, vec![0, 3, 5]).unwrap();
            let xs = JointState::new(x.clone(), z.clone()).unwrap();
            let zs = JointState::new(z, x).unwrap();
            let combo = xs.scale(a).axpy(b, &zs);
            let lhs = apply_mask(&combo, &mask).unwrap();
            let ox = apply_mask(&xs, &mask).unwrap();
            let oz = apply_mask(&zs, &mask).unwrap();
            for i in 0..lhs.k_obs.len() {
                prop_assert!((lhs.k_obs[i] - (a * ox.k_obs[i] + b * oz.k_obs[i])).abs() < 1e-12);
                prop_assert!((lhs.s_obs[i] - (a * ox.s_obs[i] + b * oz.s_obs[i])).abs() < 1e-12);
            }
        }
    }
}
