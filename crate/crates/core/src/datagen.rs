//! Training data: log-normal permeability fields and the steady saturation
//! each one produces under a fixed injector/producer pair.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::darcy::{self, default_max_iter, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::fgrd::FgrdData;
use crate::fields::{
    normalize_perm, normalize_sat, Field, GridSpec, JointState, NormalizationSpec,
};

pub type Rng64 = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfParams {
    /// Standard deviation of the smoothing kernel, meters.
    pub correlation_length: f64,
    pub logk_mean: f64,
    pub logk_std: f64,
    pub seed: u64,
}

impl Default for GrfParams {
    fn default() -> Self {
        Self {
            correlation_length: 250.0,
            logk_mean: -13.0,
            logk_std: 0.5,
            seed: 1,
        }
    }
}

impl GrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.correlation_length > 0.0) {
            return Err(Error::invalid("correlation_length must be > 0"));
        }
        if !(self.logk_std > 0.0) {
            return Err(Error::invalid("logk_std must be > 0"));
        }
        Ok(())
    }
}

/// Normalized 1D Gaussian taps for a kernel of standard deviation `sigma` cells.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Smoothed white noise, standardized to the requested log10 mean and std.
///
/// Noise is drawn on a grid padded by the kernel radius and convolved in
/// "valid" mode, so the field is stationary up to the borders.
pub fn sample_grf(params: &GrfParams, grid: &GridSpec, rng: &mut impl Rng) -> Result<Field> {
    params.validate()?;
    let taps = gaussian_taps(params.correlation_length / grid.cell_size);
    let radius = taps.len() / 2;
    let (h, w) = (grid.height, grid.width);
    let (ph, pw) = (h + 2 * radius, w + 2 * radius);
    let noise: Vec<f64> = (0..ph * pw).map(|_| rng.sample(StandardNormal)).collect();

    // Horizontal pass: ph x w.
    let mut horiz = vec![0.0; ph * w];
    for r in 0..ph {
        for c in 0..w {
            horiz[r * w + c] = taps
                .iter()
                .enumerate()
                .map(|(t, wt)| wt * noise[r * pw + c + t])
                .sum();
        }
    }
    // Vertical pass: h x w.
    let mut values = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            values[r * w + c] = taps
                .iter()
                .enumerate()
                .map(|(t, wt)| wt * horiz[(r + t) * w + c])
                .sum();
        }
    }
    let f = Field::new(*grid, values)?;
    let (m, s) = (f.mean(), f.std());
    Ok(f.map(|v| params.logk_mean + params.logk_std * (v - m) / s))
}

/// Line injector and producer spanning the full height of their columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub injection_col: usize,
    pub production_col: usize,
    /// Total injection rate, split evenly over the column cells.
    pub rate: f64,
}

impl SourceSpec {
    /// Default desk-scale wells at 775 m and 1050 m, rate chosen so the
    /// saturation spread of a mean-permeability section is about 0.34.
    pub fn desk_scale(grid: &GridSpec) -> Result<Self> {
        let mask = crate::fields::well_columns_from_meters(&[775.0, 1050.0], grid)?;
        Ok(Self {
            injection_col: mask.columns()[0],
            production_col: mask.columns()[1],
            rate: 5e-16,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceTerm {
    pub spec: SourceSpec,
    pub q: Field,
}

impl SourceTerm {
    /// The same geometry with every rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> SourceTerm {
        SourceTerm {
            spec: SourceSpec {
                rate: self.spec.rate * factor,
                ..self.spec
            },
            q: self.q.map(|v| v * factor),
        }
    }
}

pub fn build_source(
    grid: &GridSpec,
    injection_col: usize,
    production_col: usize,
    rate: f64,
) -> Result<SourceTerm> {
    if injection_col == production_col {
        return Err(Error::invalid(format!(
            "injection and production share column {injection_col}"
        )));
    }
    if injection_col >= grid.width || production_col >= grid.width {
        return Err(Error::invalid(format!(
            "well columns ({injection_col}, {production_col}) outside width {}",
            grid.width
        )));
    }
    if !rate.is_finite() {
        return Err(Error::invalid("rate must be finite"));
    }
    let per_cell = rate / grid.height as f64;
    let q = Field::from_fn(*grid, |_, c| {
        if c == injection_col {
            per_cell
        } else if c == production_col {
            -per_cell
        } else {
            0.0
        }
    });
    Ok(SourceTerm {
        spec: SourceSpec {
            injection_col,
            production_col,
            rate,
        },
        q,
    })
}

pub fn source_from_spec(grid: &GridSpec, spec: &SourceSpec) -> Result<SourceTerm> {
    build_source(grid, spec.injection_col, spec.production_col, spec.rate)
}

/// One physical sample: permeability in m², saturation shifted to a zero minimum.
pub fn generate_pair(
    params: &GrfParams,
    grid: &GridSpec,
    source: &SourceTerm,
    rng: &mut impl Rng,
) -> Result<(Field, Field)> {
    let logk = sample_grf(params, grid, rng)?;
    let k_phys = logk.map(|v| 10f64.powf(v));
    let s = darcy::solve_steady(&k_phys, &source.q, DEFAULT_TOL, default_max_iter(grid))?;
    let lo = s.min();
    Ok((k_phys, s.map(|v| v - lo)))
}

/// Dataset description written next to the sample files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: GridSpec,
    pub grf_params: GrfParams,
    pub source: ManifestSource,
    pub normalization: NormalizationSpec,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
}

/// Source geometry plus the factor that carries it into normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestSource {
    #[serde(flatten)]
    pub physical: SourceSpec,
    /// Multiplier taking physical `q` to normalized-saturation units
    /// (`1 / sat_half_range`).
    pub normalized_scale: f64,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Source term in normalized-saturation units.
    pub fn normalized_source(&self) -> Result<SourceTerm> {
        Ok(source_from_spec(&self.grid, &self.source.physical)?
            .scaled(self.source.normalized_scale))
    }

    pub fn sample_paths(&self, manifest_dir: &Path) -> Vec<PathBuf> {
        self.files.iter().map(|f| manifest_dir.join(f)).collect()
    }

    /// Loads every sample as a normalized joint state.
    pub fn load_samples(&self, manifest_dir: &Path) -> Result<Vec<JointState>> {
        self.sample_paths(manifest_dir)
            .iter()
            .map(|p| {
                let x = FgrdData::read(p)?.to_joint(self.grid.cell_size)?;
                self.grid.check_same(x.grid())?;
                Ok(x)
            })
            .collect()
    }

    /// Index split by seed order: first 90 % train, last 10 % validation.
    pub fn split(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let n = self.files.len();
        let n_val = if n >= 2 { (n / 10).max(1) } else { 0 };
        (0..n - n_val, n - n_val..n)
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Generates `n` samples with seeds `params.seed + i`, normalizes them with
/// dataset-level statistics and writes them under `out_dir`.
pub fn generate_dataset(
    n: usize,
    params: &GrfParams,
    grid: &GridSpec,
    source: &SourceTerm,
    out_dir: &Path,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    params.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let seeds: Vec<u64> = (0..n as u64).map(|i| params.seed.wrapping_add(i)).collect();
    let mut pairs = Vec::with_capacity(n);
    for (i, &seed) in seeds.iter().enumerate() {
        let mut rng = rng_from_seed(seed);
        pairs.push(generate_pair(params, grid, source, &mut rng)?);
        if (i + 1) % 250 == 0 {
            log::info!("generated {}/{n} samples", i + 1);
        }
    }

    let cells = (n * grid.cells()) as f64;
    let logk_mean = pairs
        .iter()
        .map(|(k, _)| k.values().iter().map(|v| v.log10()).sum::<f64>())
        .sum::<f64>()
        / cells;
    let logk_scale = pairs
        .iter()
        .flat_map(|(k, _)| k.values().iter().map(|v| (v.log10() - logk_mean).abs()))
        .fold(0.0f64, f64::max);
    let sat_min = pairs
        .iter()
        .map(|(_, s)| s.min())
        .fold(f64::INFINITY, f64::min);
    let mut sat_max = pairs
        .iter()
        .map(|(_, s)| s.max())
        .fold(f64::NEG_INFINITY, f64::max);
    if !(sat_max > sat_min) {
        sat_max = sat_min + 1.0;
    }
    let norm = NormalizationSpec::new(logk_mean, logk_scale.max(f64::EPSILON), sat_min, sat_max)?;

    let mut files = Vec::with_capacity(n);
    for (i, (k, s)) in pairs.iter().enumerate() {
        let kn = normalize_perm(k, &norm)?;
        let (sn, _) = normalize_sat(s, &norm);
        let name = format!("sample_{i:05}.fgrd");
        FgrdData::from_fields(&[&kn, &sn])?.write(out_dir.join(&name))?;
        files.push(name);
    }

    let manifest = Manifest {
        grid: *grid,
        grf_params: *params,
        source: ManifestSource {
            physical: source.spec,
            normalized_scale: 1.0 / norm.sat_half_range(),
        },
        normalization: norm,
        seeds,
        files,
    };
    manifest.save(out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::darcy::dense::pinv_solve;

    fn small_grid() -> GridSpec {
        GridSpec::new(8, 8, 31.25).unwrap()
    }

    #[test]
    fn grf_moments_are_enforced() {
        let g = GridSpec::desk_scale();
        let p = GrfParams::default();
        let f = sample_grf(&p, &g, &mut rng_from_seed(3)).unwrap();
        assert!((f.std() - p.logk_std).abs() < 1e-9);
        assert!((f.mean() - p.logk_mean).abs() < 1e-9);
    }

    #[test]
    fn grf_is_deterministic() {
        let g = GridSpec::desk_scale();
        let p = GrfParams::default();
        let a = sample_grf(&p, &g, &mut rng_from_seed(9)).unwrap();
        let b = sample_grf(&p, &g, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grf_autocorrelation_at_correlation_length() {
        let g = GridSpec::desk_scale();
        let p = GrfParams::default();
        let lag = (p.correlation_length / g.cell_size).round() as usize;
        let mut ratio_sum = 0.0;
        for seed in 0..100 {
            let f = sample_grf(&p, &g, &mut rng_from_seed(1000 + seed)).unwrap();
            let m = f.mean();
            let mut c0 = 0.0;
            let mut cl = 0.0;
            let mut nl = 0usize;
            for r in 0..g.height {
                for c in 0..g.width {
                    let d = f.get(r, c) - m;
                    c0 += d * d;
                    if c + lag < g.width {
                        cl += d * (f.get(r, c + lag) - m);
                        nl += 1;
                    }
                    if r + lag < g.height {
                        cl += d * (f.get(r + lag, c) - m);
                        nl += 1;
                    }
                }
            }
            ratio_sum += (cl / nl as f64) / (c0 / g.cells() as f64);
        }
        let ratio = ratio_sum / 100.0;
        let e = (-0.5f64).exp();
        assert!(
            ratio >= 0.7 * e && ratio <= 1.3 * e,
            "autocorrelation ratio {ratio}"
        );
    }

    #[test]
    fn source_uniform_split_and_balance() {
        let g = GridSpec::desk_scale();
        let src = build_source(&g, 24, 33, 1.0).unwrap();
        assert_eq!(src.q.get(10, 24), 1.0 / 64.0);
        assert_eq!(src.q.get(10, 33), -1.0 / 64.0);
        assert_eq!(src.q.get(10, 30), 0.0);
        assert_eq!(src.q.sum(), 0.0);
        assert!(build_source(&g, 5, 5, 1.0).is_err());
        assert!(build_source(&g, 5, 64, 1.0).is_err());
        let d = SourceSpec::desk_scale(&g).unwrap();
        assert_eq!((d.injection_col, d.production_col), (24, 33));
    }

    #[test]
    fn homogeneous_pair_matches_dense_solution() {
        let g = small_grid();
        let p = GrfParams {
            logk_std: 1e-12,
            ..GrfParams::default()
        };
        let src = build_source(&g, 2, 5, 1e-15).unwrap();
        let (k, s) = generate_pair(&p, &g, &src, &mut rng_from_seed(4)).unwrap();
        let k0 = Field::constant(g, 1e-13);
        let mut want = pinv_solve(&k0, &src.q);
        let lo = want.iter().copied().fold(f64::INFINITY, f64::min);
        want.iter_mut().for_each(|v| *v -= lo);
        let scale = want.iter().copied().fold(0.0, f64::max);
        for (a, b) in s.values().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-8 * scale, "{a} vs {b}");
        }
        assert!(k
            .values()
            .iter()
            .all(|v| ((v - 1e-13) / 1e-13).abs() < 1e-9));
        assert_eq!(s.min(), 0.0);
    }

    #[test]
    fn pair_satisfies_discrete_pde() {
        let g = GridSpec::new(16, 16, 31.25).unwrap();
        let src = build_source(&g, 5, 10, 5e-16).unwrap();
        let (k, s) = generate_pair(&GrfParams::default(), &g, &src, &mut rng_from_seed(5)).unwrap();
        let a = darcy::apply_operator(&k, &s).unwrap();
        let res: f64 = a
            .values()
            .iter()
            .zip(src.q.values())
            .map(|(a, q)| (a - q).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(res <= 10.0 * DEFAULT_TOL * src.q.norm2());
    }

    #[test]
    fn pair_is_deterministic() {
        let g = small_grid();
        let src = build_source(&g, 2, 5, 5e-16).unwrap();
        let a = generate_pair(&GrfParams::default(), &g, &src, &mut rng_from_seed(11)).unwrap();
        let b = generate_pair(&GrfParams::default(), &g, &src, &mut rng_from_seed(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_single_sample_and_regeneration() {
        let g = small_grid();
        let src = build_source(&g, 2, 5, 5e-16).unwrap();
        let p = GrfParams {
            seed: 40,
            ..GrfParams::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let m = generate_dataset(1, &p, &g, &src, d1.path()).unwrap();
        assert_eq!(m.files.len(), 1);
        assert!(d1.path().join(MANIFEST_NAME).exists());
        let loaded = Manifest::load(d1.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(
            loaded.normalization.logk_mean.to_bits(),
            m.normalization.logk_mean.to_bits()
        );

        let d2 = tempfile::tempdir().unwrap();
        let m3 = generate_dataset(3, &p, &g, &src, d2.path()).unwrap();
        let d3 = tempfile::tempdir().unwrap();
        let again = generate_dataset(3, &loaded.grf_params, &g, &src, d3.path()).unwrap();
        assert_eq!(m3.seeds, again.seeds);
        for f in &m3.files {
            assert_eq!(
                fs::read(d2.path().join(f)).unwrap(),
                fs::read(d3.path().join(f)).unwrap()
            );
        }
        let xs = m3.load_samples(d2.path()).unwrap();
        for x in &xs {
            assert!(x
                .k
                .values()
                .iter()
                .chain(x.s.values())
                .all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(generate_dataset(0, &p, &g, &src, d3.path()).is_err());
    }
}
