use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Square convolution, kernel laid out `(c_out, c_in, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvParams {
    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self {
            c_out,
            c_in,
            k,
            stride,
            padding: k / 2,
            weight: vec![0.0; c_out * c_in * k * k],
            bias: vec![0.0; c_out],
        }
    }

    /// He-initialized weights and small random bias.
    pub fn random<R: Rng>(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(c_in, c_out, k, stride);
        let normal = Normal::new(0.0, (2.0 / (c_in * k * k) as f64).sqrt()).expect("finite std-dev");
        p.weight.iter_mut().for_each(|w| *w = normal.sample(rng) as f32);
        p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        p
    }

    /// Kernel that copies input channel `i` to output channel `i` for
    /// `i < min(c_in, c_out)`, sampling the center tap.
    pub fn partial_dirac(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let mut p = Self::zeros(c_in, c_out, k, stride);
        let c = k / 2;
        for i in 0..c_in.min(c_out) {
            let at = p.widx(i, i, c, c);
            p.weight[at] = 1.0;
        }
        p
    }

    #[inline]
    pub fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c_in + i) * self.k + ky) * self.k + kx
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.k, 1 | 3) {
            return Err(Error::Shape(format!("kernel size must be 1 or 3, got {}", self.k)));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Shape(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        if self.padding != self.k / 2 {
            return Err(Error::Shape(format!("padding must be k/2, got {} for k={}", self.padding, self.k)));
        }
        if self.weight.len() != self.c_out * self.c_in * self.k * self.k || self.bias.len() != self.c_out {
            return Err(Error::Shape("conv buffers do not match declared shape".into()));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.k) / self.stride + 1;
        (o(h), o(w))
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Batch normalization in inference form.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

pub const DEFAULT_BN_EPS: f32 = 1e-5;

impl BnParams {
    /// `gamma = 1, beta = 0, mean = 0, var = 1 - eps`.
    pub fn neutral(c: usize) -> Self {
        Self::scaled(c, 1.0)
    }

    /// Neutral statistics with `gamma = g`.
    pub fn scaled(c: usize, g: f32) -> Self {
        Self {
            gamma: vec![g; c],
            beta: vec![0.0; c],
            mean: vec![0.0; c],
            var: vec![1.0 - DEFAULT_BN_EPS; c],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn random<R: Rng>(c: usize, rng: &mut R) -> Self {
        Self {
            gamma: (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
            beta: (0..c).map(|_| rng.random_range(-0.2..0.2)).collect(),
            mean: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        if [self.gamma.len(), self.beta.len(), self.mean.len(), self.var.len()].iter().any(|&l| l != c) {
            return Err(Error::Shape(format!("batch norm buffers do not match {c} channels")));
        }
        if !(self.eps > 0.0) || self.var.iter().any(|v| *v < 0.0) {
            return Err(Error::Input("batch norm needs eps > 0 and var >= 0".into()));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` with `y = x * scale + shift`, computed in
    /// `f64`. Shared by the layer forward and by folding.
    pub fn scale_shift(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let scale = self.gamma[c] as f64 / (self.var[c] as f64 + self.eps as f64).sqrt();
                (scale, self.beta[c] as f64 - self.mean[c] as f64 * scale)
            })
            .collect()
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let [_, c, h, w] = x.shape();
        self.validate(c)?;
        let ss: Vec<(f32, f32)> = self.scale_shift().into_iter().map(|(a, b)| (a as f32, b as f32)).collect();
        let mut out = x.clone();
        for (k, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            let (scale, shift) = ss[k % c];
            plane.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        Ok(out)
    }
}

/// Cross-correlation with zero padding `k / 2`. Each output plane is
/// accumulated in f64 and rounded once, so deep stacks of branched and
/// fused layers agree to f32 resolution.
pub fn conv2d(x: &DenseTensor, p: &ConvParams) -> Result<DenseTensor> {
    p.validate()?;
    let [n, c_in, h, w] = x.shape();
    if c_in != p.c_in {
        return Err(Error::Shape(format!("conv expects {} input channels, got {c_in}", p.c_in)));
    }
    let (ho, wo) = p.output_hw(h, w);
    let mut out = DenseTensor::zeros([n, p.c_out, ho, wo]);
    let (k, s, pad) = (p.k, p.stride, p.padding as isize);
    out.data_mut().par_chunks_mut(ho * wo).enumerate().for_each(|(plane_idx, plane)| {
        let (b, o) = (plane_idx / p.c_out, plane_idx % p.c_out);
        let mut acc = vec![p.bias[o] as f64; ho * wo];
        for i in 0..c_in {
            let src = x.plane(b, i);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = p.weight[p.widx(o, i, ky, kx)] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    // valid ox: 0 <= ox*s + kx - pad < w
                    let off_x = kx as isize - pad;
                    let ox_lo = if off_x < 0 { ((-off_x) as usize).div_ceil(s) } else { 0 };
                    let ox_hi = {
                        let lim = w as isize - off_x;
                        if lim <= 0 { 0 } else { ((lim as usize - 1) / s + 1).min(wo) }
                    };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut acc[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let start = (ox_lo as isize + off_x) as usize;
                            let len = ox_hi - ox_lo;
                            for (d, sv) in dst_row[ox_lo..ox_hi].iter_mut().zip(&src_row[start..start + len]) {
                                *d += wv * *sv as f64;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst_row[ox] += wv * src_row[(ox as isize * s as isize + off_x) as usize] as f64;
                            }
                        }
                    }
                }
            }
        }
        plane.iter_mut().zip(&acc).for_each(|(v, a)| *v = *a as f32);
    });
    Ok(out)
}

/// Absorbs batch norm into the preceding convolution:
/// `w' = w * gamma / sqrt(var + eps)`, `b' = beta + (b - mean) * gamma / sqrt(var + eps)`.
pub fn bn_fold(conv: &ConvParams, bn: &BnParams) -> Result<ConvParams> {
    conv.validate()?;
    bn.validate(conv.c_out)?;
    let per_out = conv.c_in * conv.k * conv.k;
    let mut out = conv.clone();
    for (o, (scale, shift)) in bn.scale_shift().into_iter().enumerate() {
        for wv in &mut out.weight[o * per_out..(o + 1) * per_out] {
            *wv = (*wv as f64 * scale) as f32;
        }
        out.bias[o] = (conv.bias[o] as f64 * scale + shift) as f32;
    }
    Ok(out)
}

/// Embeds a 1x1 kernel at the center of a zero 3x3 kernel.
pub fn pad_1x1_to_3x3(p: &ConvParams) -> Result<ConvParams> {
    if p.k != 1 {
        return Err(Error::Shape(format!("expected a 1x1 kernel, got {0}x{0}", p.k)));
    }
    let mut out = ConvParams::zeros(p.c_in, p.c_out, 3, p.stride);
    for o in 0..p.c_out {
        for i in 0..p.c_in {
            let at = out.widx(o, i, 1, 1);
            out.weight[at] = p.weight[o * p.c_in + i];
        }
    }
    out.bias.copy_from_slice(&p.bias);
    Ok(out)
}

/// 3x3 Dirac kernel: `conv(x, identity_to_3x3(c)) == x`.
pub fn identity_to_3x3(c_in: usize, c_out: usize) -> Result<ConvParams> {
    if c_in != c_out {
        return Err(Error::Shape(format!("identity needs c_in == c_out, got {c_in} vs {c_out}")));
    }
    Ok(ConvParams::partial_dirac(c_in, c_out, 3, 1))
}
