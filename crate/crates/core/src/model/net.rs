//! The inner network F: a stack of 3x3 periodic convolutions with SiLU
//! activations, conditioned on the noise level through a per-layer bias
//! projected from a sinusoidal embedding.
//!
//! Activations are stored pixel-major (`[pixel][channel]`) so that each
//! convolution is one `im2col` gather followed by a GEMM.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAPS: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub hidden_channels: usize,
    /// Number of convolution layers, including the output layer.
    pub layers: usize,
    pub embedding_dim: usize,
    pub activation: String,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 2,
            hidden_channels: 32,
            layers: 6,
            embedding_dim: 16,
            activation: "silu".into(),
        }
    }
}

/// Parameter block of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub c_in: usize,
    pub c_out: usize,
    /// `[tap][c_in][c_out]`
    pub weight: usize,
    /// `[c_out]`
    pub bias: usize,
    /// `[c_out][embedding_dim]`
    pub embed: usize,
}

impl LayerLayout {
    pub fn weight_len(&self) -> usize {
        TAPS * self.c_in * self.c_out
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2
            || self.in_channels == 0
            || self.hidden_channels == 0
            || self.embedding_dim % 2 != 0
        {
            return Err(Error::invalid(format!("unsupported architecture {self:?}")));
        }
        if self.activation != "silu" {
            return Err(Error::invalid(format!(
                "unknown activation {}",
                self.activation
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut off = 0;
        (0..self.layers)
            .map(|l| {
                let c_in = if l == 0 {
                    self.in_channels
                } else {
                    self.hidden_channels
                };
                let c_out = if l + 1 == self.layers {
                    self.in_channels
                } else {
                    self.hidden_channels
                };
                let weight = off;
                let bias = weight + TAPS * c_in * c_out;
                let embed = bias + c_out;
                off = embed + c_out * self.embedding_dim;
                LayerLayout {
                    c_in,
                    c_out,
                    weight,
                    bias,
                    embed,
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .last()
            .map(|l| l.embed + l.c_out * self.embedding_dim)
            .unwrap_or(0)
    }

    /// Named parameter blocks in storage order.
    pub fn blocks(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, l) in self.layout().iter().enumerate() {
            out.push((format!("conv{i}.weight"), l.weight_len()));
            out.push((format!("conv{i}.bias"), l.c_out));
            out.push((format!("conv{i}.embed"), l.c_out * self.embedding_dim));
        }
        out
    }

    /// Sinusoidal features of the conditioning scalar, frequencies `2^(j/2)`.
    pub fn embedding(&self, c_noise: f64) -> Vec<f64> {
        let half = self.embedding_dim / 2;
        let mut e = Vec::with_capacity(self.embedding_dim);
        for j in 0..half {
            e.push((c_noise * 2f64.powf(j as f64 / 2.0)).sin());
        }
        for j in 0..half {
            e.push((c_noise * 2f64.powf(j as f64 / 2.0)).cos());
        }
        e
    }

    /// Fan-in scaled Gaussian weights; the output layer starts at zero.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.param_count()];
        let layout = self.layout();
        for (i, l) in layout.iter().enumerate() {
            if i + 1 == layout.len() {
                continue;
            }
            let scale = 1.0 / ((TAPS * l.c_in) as f64).sqrt();
            for v in &mut p[l.weight..l.weight + l.weight_len()] {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
            let escale = 1.0 / (self.embedding_dim as f64).sqrt();
            for v in &mut p[l.embed..l.embed + l.c_out * self.embedding_dim] {
                *v = escale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Neighbour pixel index for each of the 9 taps, periodic wrap.
fn neighbour_table(height: usize, width: usize) -> Vec<[u32; TAPS]> {
    let mut t = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let mut row = [0u32; TAPS];
            for (tap, slot) in row.iter_mut().enumerate() {
                let dr = tap / 3;
                let dc = tap % 3;
                let rr = (r + height + dr - 1) % height;
                let cc = (c + width + dc - 1) % width;
                *slot = (rr * width + cc) as u32;
            }
            t.push(row);
        }
    }
    t
}

fn im2col(a: &[f64], c_in: usize, nbr: &[[u32; TAPS]], col: &mut Vec<f64>) {
    let row_len = TAPS * c_in;
    col.clear();
    col.resize(nbr.len() * row_len, 0.0);
    for (p, taps) in nbr.iter().enumerate() {
        let dst = &mut col[p * row_len..(p + 1) * row_len];
        for (t, &q) in taps.iter().enumerate() {
            let q = q as usize;
            dst[t * c_in..(t + 1) * c_in].copy_from_slice(&a[q * c_in..(q + 1) * c_in]);
        }
    }
}

fn col2im_add(dcol: &[f64], c_in: usize, nbr: &[[u32; TAPS]], da: &mut [f64]) {
    let row_len = TAPS * c_in;
    for (p, taps) in nbr.iter().enumerate() {
        let src = &dcol[p * row_len..(p + 1) * row_len];
        for (t, &q) in taps.iter().enumerate() {
            let q = q as usize;
            let dst = &mut da[q * c_in..(q + 1) * c_in];
            for (d, s) in dst.iter_mut().zip(&src[t * c_in..(t + 1) * c_in]) {
                *d += s;
            }
        }
    }
}

/// `c = alpha * op(a) * b + beta * c` for row-major slices; `a_t` transposes `a`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slice lengths above match the declared shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Intermediate values kept for the reverse pass.
pub struct NetTape {
    height: usize,
    width: usize,
    emb: Vec<f64>,
    /// Input to each layer, pixel-major.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

/// Runs F on a pixel-major input of `arch.in_channels` channels.
pub fn forward(
    arch: &Architecture,
    params: &[f64],
    input: &[f64],
    height: usize,
    width: usize,
    c_noise: f64,
) -> (Vec<f64>, NetTape) {
    let pixels = height * width;
    let nbr = neighbour_table(height, width);
    let emb = arch.embedding(c_noise);
    let layout = arch.layout();
    let mut inputs = Vec::with_capacity(layout.len());
    let mut pre = Vec::with_capacity(layout.len());
    let mut a = input.to_vec();
    let mut col = Vec::new();
    for (i, l) in layout.iter().enumerate() {
        im2col(&a, l.c_in, &nbr, &mut col);
        let mut bias = params[l.bias..l.bias + l.c_out].to_vec();
        for (co, b) in bias.iter_mut().enumerate() {
            let e =
                &params[l.embed + co * arch.embedding_dim..l.embed + (co + 1) * arch.embedding_dim];
            *b += e.iter().zip(&emb).map(|(w, x)| w * x).sum::<f64>();
        }
        let mut z = Vec::with_capacity(pixels * l.c_out);
        for _ in 0..pixels {
            z.extend_from_slice(&bias);
        }
        let w = &params[l.weight..l.weight + l.weight_len()];
        gemm(
            pixels,
            TAPS * l.c_in,
            l.c_out,
            &col,
            false,
            w,
            false,
            1.0,
            &mut z,
        );
        let next = if i + 1 == layout.len() {
            z.clone()
        } else {
            z.iter().map(|&v| silu(v)).collect()
        };
        inputs.push(std::mem::replace(&mut a, next));
        pre.push(z);
    }
    (
        a,
        NetTape {
            height,
            width,
            emb,
            inputs,
            pre,
        },
    )
}

/// Reverse pass. Accumulates parameter gradients into `grad_params` when
/// given and returns the input gradient when `want_input` is set.
pub fn backward(
    arch: &Architecture,
    params: &[f64],
    tape: &NetTape,
    d_out: &[f64],
    mut grad_params: Option<&mut [f64]>,
    want_input: bool,
) -> Option<Vec<f64>> {
    let pixels = tape.height * tape.width;
    let nbr = neighbour_table(tape.height, tape.width);
    let layout = arch.layout();
    let mut dz = d_out.to_vec();
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for i in (0..layout.len()).rev() {
        let l = &layout[i];
        if let Some(g) = grad_params.as_deref_mut() {
            im2col(&tape.inputs[i], l.c_in, &nbr, &mut col);
            gemm(
                TAPS * l.c_in,
                pixels,
                l.c_out,
                &col,
                true,
                &dz,
                false,
                1.0,
                &mut g[l.weight..l.weight + l.weight_len()],
            );
            let mut db = vec![0.0; l.c_out];
            for p in 0..pixels {
                for (b, d) in db.iter_mut().zip(&dz[p * l.c_out..(p + 1) * l.c_out]) {
                    *b += d;
                }
            }
            for (co, &d) in db.iter().enumerate() {
                g[l.bias + co] += d;
                let e = &mut g
                    [l.embed + co * arch.embedding_dim..l.embed + (co + 1) * arch.embedding_dim];
                for (ge, x) in e.iter_mut().zip(&tape.emb) {
                    *ge += d * x;
                }
            }
        }
        if i == 0 && !want_input {
            return None;
        }
        dcol.clear();
        dcol.resize(pixels * TAPS * l.c_in, 0.0);
        let w = &params[l.weight..l.weight + l.weight_len()];
        gemm(
            pixels,
            l.c_out,
            TAPS * l.c_in,
            &dz,
            false,
            w,
            true,
            0.0,
            &mut dcol,
        );
        let mut da = vec![0.0; pixels * l.c_in];
        col2im_add(&dcol, l.c_in, &nbr, &mut da);
        if i == 0 {
            return Some(da);
        }
        let z_prev = &tape.pre[i - 1];
        dz = da
            .iter()
            .zip(z_prev)
            .map(|(d, &z)| d * silu_grad(z))
            .collect();
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::rng_from_seed;
    use rand::Rng;

    fn small_arch() -> Architecture {
        Architecture {
            in_channels: 2,
            hidden_channels: 4,
            layers: 3,
            embedding_dim: 4,
            activation: "silu".into(),
        }
    }

    fn random_params(arch: &Architecture, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..arch.param_count())
            .map(|_| rng.random_range(-0.5..0.5))
            .collect()
    }

    #[test]
    fn default_layout_sizes() {
        let a = Architecture::default();
        let l = a.layout();
        assert_eq!(l.len(), 6);
        assert_eq!((l[0].c_in, l[0].c_out), (2, 32));
        assert_eq!((l[5].c_in, l[5].c_out), (32, 2));
        let expected = (9 * 2 * 32 + 32 + 32 * 16)
            + 4 * (9 * 32 * 32 + 32 + 32 * 16)
            + (9 * 32 * 2 + 2 + 2 * 16);
        assert_eq!(a.param_count(), expected);
        assert_eq!(a.blocks().iter().map(|b| b.1).sum::<usize>(), expected);
    }

    #[test]
    fn output_layer_starts_at_zero() {
        let a = Architecture::default();
        let p = a.init_params(&mut rng_from_seed(1));
        let last = a.layout()[5];
        assert!(p[last.weight..].iter().all(|&v| v == 0.0));
        let input = vec![0.3; 2 * 64];
        let (out, _) = forward(&a, &p, &input, 8, 8, 0.1);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convolution_matches_direct_sum() {
        // Single linear layer pair: compare layer-0 pre-activation with a direct loop.
        let arch = small_arch();
        let p = random_params(&arch, 2);
        let (h, w) = (5, 6);
        let mut rng = rng_from_seed(3);
        let x: Vec<f64> = (0..h * w * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (_, tape) = forward(&arch, &p, &x, h, w, 0.2);
        let l = arch.layout()[0];
        let emb = arch.embedding(0.2);
        for r in 0..h {
            for c in 0..w {
                for co in 0..l.c_out {
                    let mut acc = p[l.bias + co];
                    for (e, v) in emb.iter().enumerate() {
                        acc += p[l.embed + co * arch.embedding_dim + e] * v;
                    }
                    for dr in 0..3 {
                        for dc in 0..3 {
                            let rr = (r + h + dr - 1) % h;
                            let cc = (c + w + dc - 1) % w;
                            for ci in 0..2 {
                                acc += p[l.weight + ((dr * 3 + dc) * 2 + ci) * l.c_out + co]
                                    * x[(rr * w + cc) * 2 + ci];
                            }
                        }
                    }
                    let got = tape.pre[0][(r * w + c) * l.c_out + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let arch = small_arch();
        let p = random_params(&arch, 4);
        let (h, w) = (5, 5);
        let mut rng = rng_from_seed(5);
        let x: Vec<f64> = (0..h * w * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let cot: Vec<f64> = (0..h * w * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let f = |x: &[f64]| -> f64 {
            let (o, _) = forward(&arch, &p, x, h, w, -0.3);
            o.iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = forward(&arch, &p, &x, h, w, -0.3);
        let g = backward(&arch, &p, &tape, &cot, None, true).unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!(
                (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let arch = small_arch();
        let p = random_params(&arch, 6);
        let (h, w) = (4, 5);
        let mut rng = rng_from_seed(7);
        let x: Vec<f64> = (0..h * w * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let cot: Vec<f64> = (0..h * w * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let f = |p: &[f64]| -> f64 {
            let (o, _) = forward(&arch, p, &x, h, w, 0.7);
            o.iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = forward(&arch, &p, &x, h, w, 0.7);
        let mut g = vec![0.0; p.len()];
        backward(&arch, &p, &tape, &cot, Some(&mut g), false);
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += 1e-6;
            let mut pm = p.clone();
            pm[i] -= 1e-6;
            let fd = (f(&pp) - f(&pm)) / 2e-6;
            assert!(
                (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }
}
