//! rMSE, SSIM and the results table.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{denormalize_perm, denormalize_sat, Field, JointState, NormalizationSpec};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Data range of normalized channels, which live in [-1, 1].
pub const NORMALIZED_RANGE: f64 = 2.0;

pub fn rmse(a: &Field, b: &Field) -> Result<f64> {
    a.grid().check_same(b.grid())?;
    let n = a.values().len() as f64;
    let ss: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    Ok((ss / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ssim {
    pub value: f64,
    /// The grid was smaller than the window, so one global window was used.
    pub global_fallback: bool,
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering with the normalized Gaussian window.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|t| taps[t] * x[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|t| taps[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

fn ssim_formula(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean local SSIM over all fully-contained 11×11 Gaussian windows
/// (std 1.5), with `C1 = (0.01 L)²` and `C2 = (0.03 L)²`.
pub fn ssim(a: &Field, b: &Field, data_range: f64) -> Result<Ssim> {
    a.grid().check_same(b.grid())?;
    if !(data_range > 0.0) {
        return Err(Error::invalid("data_range must be > 0"));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let g = a.grid();
    let (h, w) = (g.height, g.width);
    let (x, y) = (a.values(), b.values());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        log::warn!("{h}x{w} grid is smaller than the SSIM window; using global statistics");
        let n = x.len() as f64;
        let ma = x.iter().sum::<f64>() / n;
        let mb = y.iter().sum::<f64>() / n;
        let va = x.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
        let vb = y.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
        let cov = x
            .iter()
            .zip(y)
            .map(|(p, q)| (p - ma) * (q - mb))
            .sum::<f64>()
            / n;
        return Ok(Ssim {
            value: ssim_formula(ma, mb, va, vb, cov, c1, c2),
            global_fallback: true,
        });
    }
    let taps = gaussian_taps();
    let prod = |f: fn(f64, f64) -> f64| x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect::<Vec<_>>();
    let mu_a = filter_valid(x, h, w, &taps);
    let mu_b = filter_valid(y, h, w, &taps);
    let e_aa = filter_valid(&prod(|p, _| p * p), h, w, &taps);
    let e_bb = filter_valid(&prod(|_, q| q * q), h, w, &taps);
    let e_ab = filter_valid(&prod(|p, q| p * q), h, w, &taps);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            ssim_formula(
                ma,
                mb,
                e_aa[i] - ma * ma,
                e_bb[i] - mb * mb,
                e_ab[i] - ma * mb,
                c1,
                c2,
            )
        })
        .sum();
    Ok(Ssim {
        value: total / mu_a.len() as f64,
        global_fallback: false,
    })
}

/// Table rows, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputConfig {
    TwoWells,
    FullK,
    FullKTwoWells,
    FullS,
    FullSTwoWells,
}

impl InputConfig {
    pub const ALL: [InputConfig; 5] = [
        InputConfig::TwoWells,
        InputConfig::FullK,
        InputConfig::FullKTwoWells,
        InputConfig::FullS,
        InputConfig::FullSTwoWells,
    ];

    pub fn label(self) -> &'static str {
        match self {
            InputConfig::TwoWells => "Two wells",
            InputConfig::FullK => "Full K",
            InputConfig::FullKTwoWells => "Full K + Two wells",
            InputConfig::FullS => "Full S",
            InputConfig::FullSTwoWells => "Full S + Two wells",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == s)
    }

    pub fn uses_wells(self) -> bool {
        matches!(
            self,
            InputConfig::TwoWells | InputConfig::FullKTwoWells | InputConfig::FullSTwoWells
        )
    }

    pub fn full_k(self) -> bool {
        matches!(self, InputConfig::FullK | InputConfig::FullKTwoWells)
    }

    pub fn full_s(self) -> bool {
        matches!(self, InputConfig::FullS | InputConfig::FullSTwoWells)
    }

    /// A channel that is given in full is not scored.
    pub fn scores_k(self) -> bool {
        !self.full_k()
    }

    pub fn scores_s(self) -> bool {
        !self.full_s()
    }
}

impl fmt::Display for InputConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// rMSE in physical units (m² for K, saturation for S); SSIM on the
/// normalized channels with `L = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointMetrics {
    pub k_rmse: f64,
    pub k_ssim: f64,
    pub s_rmse: f64,
    pub s_ssim: f64,
    pub ssim_global_fallback: bool,
}

pub fn evaluate(
    pred: &JointState,
    truth: &JointState,
    norm: &NormalizationSpec,
) -> Result<JointMetrics> {
    pred.grid().check_same(truth.grid())?;
    let k_rmse = rmse(
        &denormalize_perm(&pred.k, norm),
        &denormalize_perm(&truth.k, norm),
    )?;
    let s_rmse = rmse(
        &denormalize_sat(&pred.s, norm),
        &denormalize_sat(&truth.s, norm),
    )?;
    let ks = ssim(&pred.k, &truth.k, NORMALIZED_RANGE)?;
    let ss = ssim(&pred.s, &truth.s, NORMALIZED_RANGE)?;
    Ok(JointMetrics {
        k_rmse,
        k_ssim: ks.value,
        s_rmse,
        s_ssim: ss.value,
        ssim_global_fallback: ks.global_fallback || ss.global_fallback,
    })
}

/// One table row; `None` marks a cell that does not apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: InputConfig,
    pub k_rmse: Option<f64>,
    pub k_ssim: Option<f64>,
    pub s_rmse: Option<f64>,
    pub s_ssim: Option<f64>,
}

impl ReportRow {
    /// Keeps only the metrics meaningful for `config`.
    pub fn from_metrics(config: InputConfig, m: &JointMetrics) -> Self {
        let k = config.scores_k();
        let s = config.scores_s();
        Self {
            config,
            k_rmse: k.then_some(m.k_rmse),
            k_ssim: k.then_some(m.k_ssim),
            s_rmse: s.then_some(m.s_rmse),
            s_ssim: s.then_some(m.s_ssim),
        }
    }
}

pub const REPORT_HEADER: [&str; 5] = ["input_config", "K_rMSE", "K_SSIM", "S_rMSE", "S_SSIM"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_else(|| "-".into())
}

/// Rows come out in table order; configs without a result are skipped.
pub fn report(rows: &[ReportRow]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    wtr.write_record(REPORT_HEADER).map_err(csv_err)?;
    for cfg in InputConfig::ALL {
        let Some(r) = rows.iter().find(|r| r.config == cfg) else {
            log::warn!("no results for '{cfg}'; row omitted");
            continue;
        };
        wtr.write_record([
            cfg.label().to_string(),
            cell(r.k_rmse),
            cell(r.k_ssim),
            cell(r.s_rmse),
            cell(r.s_ssim),
        ])
        .map_err(csv_err)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, report(rows)?).map_err(|e| Error::io(path, e))
}

pub fn parse_report(text: &str, path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::format(path, "unexpected header"));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s == "-" {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| Error::format(path, format!("bad number '{s}'")))
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let config = InputConfig::from_label(&rec[0])
            .ok_or_else(|| Error::format(path, format!("unknown input config '{}'", &rec[0])))?;
        out.push(ReportRow {
            config,
            k_rmse: num(&rec[1])?,
            k_ssim: num(&rec[2])?,
            s_rmse: num(&rec[3])?,
            s_ssim: num(&rec[4])?,
        });
    }
    Ok(out)
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text, path)
}

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
