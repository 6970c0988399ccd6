//! Max-and-attention pillar encoding.
//!
//! Every point of a pillar goes through a small per-point network
//! (affine, normalization, rectifier). The pillar feature is the average of
//! a channel-wise max over points and an attention-weighted sum whose
//! weights are a softmax over the points of each channel.
//!
//! Computation is in `f64` so analytic gradients can be checked tightly.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pillargrid::{AugmentedPoint, AUGMENTED_DIM};

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `y = W x + b` with `W` stored `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Ones on the leading diagonal, zero elsewhere.
    pub fn partial_identity(in_dim: usize, out_dim: usize) -> Self {
        let mut a = Self::zeros(in_dim, out_dim);
        for j in 0..in_dim.min(out_dim) {
            a.weight[j * in_dim + j] = 1.0;
        }
        a
    }

    pub fn random<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std-dev");
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect(),
            bias: (0..out_dim).map(|_| rng.random_range(-0.1..0.1)).collect(),
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows, self.out_dim);
        for i in 0..x.rows {
            let xi = x.row(i);
            for j in 0..self.out_dim {
                let w = &self.weight[j * self.in_dim..(j + 1) * self.in_dim];
                out.data[i * self.out_dim + j] = self.bias[j] + w.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.weight.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::Shape(format!("affine {}->{} has inconsistent buffers", self.in_dim, self.out_dim)));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite affine parameter".into()));
        }
        Ok(())
    }
}

/// Per-channel normalization with fixed statistics and a learnable affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl Normalization {
    pub fn neutral(dim: usize, eps: f64) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0 - eps; dim], gamma: vec![1.0; dim], beta: vec![0.0; dim], eps }
    }

    fn std(&self, j: usize) -> f64 {
        (self.var[j] + self.eps).sqrt()
    }
}

/// One point-network layer: affine, optional normalization, rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeLayer {
    pub affine: Affine,
    pub norm: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapeParams {
    pub encode: Vec<EncodeLayer>,
    /// Attention score network, `D -> D`.
    pub score: Affine,
}

impl MapeParams {
    pub fn feature_dim(&self) -> usize {
        self.score.out_dim
    }

    /// Random single-layer encoder with normalization active.
    pub fn random<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self::random_deep(d, 1, rng)
    }

    pub fn random_deep<R: Rng>(d: usize, depth: usize, rng: &mut R) -> Self {
        let encode = (0..depth.max(1))
            .map(|k| {
                let in_dim = if k == 0 { AUGMENTED_DIM } else { d };
                EncodeLayer {
                    affine: Affine::random(in_dim, d, rng),
                    norm: Some(Normalization {
                        mean: (0..d).map(|_| rng.random_range(-0.2..0.2)).collect(),
                        var: (0..d).map(|_| rng.random_range(0.5..2.0)).collect(),
                        gamma: (0..d).map(|_| rng.random_range(0.5..1.5)).collect(),
                        beta: (0..d).map(|_| rng.random_range(-0.1..0.3)).collect(),
                        eps: 1e-3,
                    }),
                }
            })
            .collect();
        Self { encode, score: Affine::random(d, d, rng) }
    }

    /// Encoder that copies the first `min(11, d)` input channels through the
    /// rectifier, with constant attention logits.
    pub fn identity(d: usize) -> Self {
        Self {
            encode: vec![EncodeLayer { affine: Affine::partial_identity(AUGMENTED_DIM, d), norm: None }],
            score: Affine::zeros(d, d),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        if self.encode.is_empty() {
            return Err(Error::Shape("encoder needs at least one layer".into()));
        }
        let mut in_dim = AUGMENTED_DIM;
        for layer in &self.encode {
            layer.affine.validate()?;
            if layer.affine.in_dim != in_dim || layer.affine.out_dim != d {
                return Err(Error::Shape(format!(
                    "encode layer {}->{} does not chain from {in_dim} to {d}",
                    layer.affine.in_dim, layer.affine.out_dim
                )));
            }
            if let Some(n) = &layer.norm {
                let lens = [n.mean.len(), n.var.len(), n.gamma.len(), n.beta.len()];
                if lens.iter().any(|&l| l != d) {
                    return Err(Error::Shape("normalization statistics do not match D".into()));
                }
                if !(n.eps > 0.0) || n.var.iter().any(|v| *v < 0.0) {
                    return Err(Error::Input("normalization needs eps > 0 and var >= 0".into()));
                }
            }
            in_dim = d;
        }
        self.score.validate()?;
        if self.score.in_dim != d {
            return Err(Error::Shape("score network must map D -> D".into()));
        }
        Ok(())
    }

    /// Flattens all learnable values: per encode layer `weight, bias, gamma,
    /// beta`, then score `weight, bias`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for layer in &self.encode {
            v.extend_from_slice(&layer.affine.weight);
            v.extend_from_slice(&layer.affine.bias);
            if let Some(n) = &layer.norm {
                v.extend_from_slice(&n.gamma);
                v.extend_from_slice(&n.beta);
            }
        }
        v.extend_from_slice(&self.score.weight);
        v.extend_from_slice(&self.score.bias);
        v
    }

    /// Inverse of [`to_flat`](Self::to_flat) using `self` as the shape template.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut at = 0;
        let mut take = |dst: &mut Vec<f64>| {
            let n = dst.len();
            dst.copy_from_slice(&flat[at..at + n]);
            at += n;
        };
        for layer in &mut out.encode {
            take(&mut layer.affine.weight);
            take(&mut layer.affine.bias);
            if let Some(n) = &mut layer.norm {
                take(&mut n.gamma);
                take(&mut n.beta);
            }
        }
        take(&mut out.score.weight);
        take(&mut out.score.bias);
        out
    }
}

fn to_matrix(aug: &[AugmentedPoint]) -> Matrix {
    Matrix { rows: aug.len(), cols: AUGMENTED_DIM, data: aug.iter().flat_map(|a| a.0).collect() }
}

struct LayerTrace {
    input: Matrix,
    affine: Matrix,
    normed: Matrix,
}

fn encode_traced(aug: &[AugmentedPoint], params: &MapeParams) -> Result<(Matrix, Vec<LayerTrace>)> {
    if aug.is_empty() {
        return Err(Error::EmptyPillar);
    }
    params.validate()?;
    let mut x = to_matrix(aug);
    let mut traces = Vec::with_capacity(params.encode.len());
    for layer in &params.encode {
        let affine = layer.affine.apply(&x);
        let mut normed = affine.clone();
        if let Some(n) = &layer.norm {
            for (idx, v) in normed.data.iter_mut().enumerate() {
                let j = idx % normed.cols;
                *v = (*v - n.mean[j]) / n.std(j) * n.gamma[j] + n.beta[j];
            }
        }
        let mut out = normed.clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        traces.push(LayerTrace { input: x, affine, normed });
        x = out;
    }
    Ok((x, traces))
}

/// Per-point features `p_e`, one row per input point in input order.
pub fn encode_points(aug: &[AugmentedPoint], params: &MapeParams) -> Result<Matrix> {
    encode_traced(aug, params).map(|(m, _)| m)
}

/// Channel-wise maximum over points.
pub fn max_pool(p_e: &Matrix) -> Result<Vec<f64>> {
    if p_e.rows == 0 {
        return Err(Error::EmptyPillar);
    }
    let mut out = p_e.row(0).to_vec();
    for i in 1..p_e.rows {
        for (m, v) in out.iter_mut().zip(p_e.row(i)) {
            if *v > *m {
                *m = *v;
            }
        }
    }
    Ok(out)
}

/// Row of the first maximum in each channel.
fn argmax_rows(p_e: &Matrix) -> Vec<usize> {
    (0..p_e.cols)
        .map(|j| {
            let mut best = 0;
            for i in 1..p_e.rows {
                if p_e.get(i, j) > p_e.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Attention pooling: scores are a softmax over points, taken separately
/// for each channel, so every column of the score matrix sums to one.
pub fn attention_pool(p_e: &Matrix, params: &MapeParams) -> Result<(Vec<f64>, Matrix)> {
    if p_e.rows == 0 {
        return Err(Error::EmptyPillar);
    }
    if p_e.cols != params.score.in_dim {
        return Err(Error::Shape(format!("features have {} channels, score net expects {}", p_e.cols, params.score.in_dim)));
    }
    let mut scores = params.score.apply(p_e);
    let (n, d) = (p_e.rows, p_e.cols);
    let mut f_att = vec![0.0; d];
    for j in 0..d {
        let max = (0..n).map(|i| scores.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..n {
            let e = (scores.get(i, j) - max).exp();
            scores.data[i * d + j] = e;
            total += e;
        }
        for i in 0..n {
            let s = scores.data[i * d + j] / total;
            scores.data[i * d + j] = s;
            f_att[j] += s * p_e.get(i, j);
        }
    }
    Ok((f_att, scores))
}

/// Encoded pillar. `f = (f_max + f_att) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarFeature {
    pub f: Vec<f64>,
    pub f_max: Vec<f64>,
    pub f_att: Vec<f64>,
    pub intermediates: Option<Intermediates>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intermediates {
    pub p_e: Matrix,
    pub scores: Matrix,
}

fn combine(f_max: &[f64], f_att: &[f64]) -> Vec<f64> {
    f_max.iter().zip(f_att).map(|(m, a)| (m + a) / 2.0).collect()
}

pub fn mape_encode(aug: &[AugmentedPoint], params: &MapeParams) -> Result<PillarFeature> {
    let mut feat = mape_encode_traced(aug, params)?;
    feat.intermediates = None;
    Ok(feat)
}

/// Like [`mape_encode`] but keeps `p_e` and the attention scores.
pub fn mape_encode_traced(aug: &[AugmentedPoint], params: &MapeParams) -> Result<PillarFeature> {
    let p_e = encode_points(aug, params)?;
    let f_max = max_pool(&p_e)?;
    let (f_att, scores) = attention_pool(&p_e, params)?;
    let f = combine(&f_max, &f_att);
    Ok(PillarFeature { f, f_max, f_att, intermediates: Some(Intermediates { p_e, scores }) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub affine: AffineGrad,
    /// `(d gamma, d beta)` when the layer normalizes.
    pub norm: Option<(Vec<f64>, Vec<f64>)>,
}

/// Gradients of `<upstream, f>` with respect to parameters and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MapeGradients {
    pub encode: Vec<LayerGrad>,
    pub score: AffineGrad,
    pub inputs: Vec<[f64; AUGMENTED_DIM]>,
}

impl MapeGradients {
    /// Same order as [`MapeParams::to_flat`].
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for g in &self.encode {
            v.extend_from_slice(&g.affine.weight);
            v.extend_from_slice(&g.affine.bias);
            if let Some((dg, db)) = &g.norm {
                v.extend_from_slice(dg);
                v.extend_from_slice(db);
            }
        }
        v.extend_from_slice(&self.score.weight);
        v.extend_from_slice(&self.score.bias);
        v
    }

    pub fn inputs_flat(&self) -> Vec<f64> {
        self.inputs.iter().flatten().copied().collect()
    }
}

/// Reverse pass through the point network, max pooling and attention pooling.
/// Normalization statistics are constants. At a max tie the first point
/// receives the gradient; at a rectifier kink the gradient is zero.
pub fn mape_backward(aug: &[AugmentedPoint], params: &MapeParams, upstream: &[f64]) -> Result<MapeGradients> {
    let (p_e, traces) = encode_traced(aug, params)?;
    let (n, d) = (p_e.rows, p_e.cols);
    if upstream.len() != d {
        return Err(Error::Shape(format!("upstream gradient has {} entries, D = {d}", upstream.len())));
    }
    let (f_att, scores) = attention_pool(&p_e, params)?;

    let mut d_pe = Matrix::zeros(n, d);
    for (j, &row) in argmax_rows(&p_e).iter().enumerate() {
        d_pe.data[row * d + j] += 0.5 * upstream[j];
    }

    // f_att_j = sum_i s_ij p_ij with s = softmax_i(z); z = score(p_e).
    let mut d_logits = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let g = 0.5 * upstream[j];
            let s = scores.get(i, j);
            d_pe.data[i * d + j] += g * s;
            d_logits.data[i * d + j] = s * g * (p_e.get(i, j) - f_att[j]);
        }
    }
    let score = &params.score;
    let mut score_grad = AffineGrad { weight: vec![0.0; d * d], bias: vec![0.0; d] };
    for i in 0..n {
        for j in 0..d {
            let dz = d_logits.get(i, j);
            if dz == 0.0 {
                continue;
            }
            score_grad.bias[j] += dz;
            for k in 0..d {
                score_grad.weight[j * d + k] += dz * p_e.get(i, k);
                d_pe.data[i * d + k] += dz * score.weight[j * d + k];
            }
        }
    }

    let mut grads = Vec::with_capacity(traces.len());
    let mut upstream_rows = d_pe;
    for (layer, trace) in params.encode.iter().zip(&traces).rev() {
        let (in_dim, out_dim) = (layer.affine.in_dim, layer.affine.out_dim);
        let mut d_affine = Matrix::zeros(n, out_dim);
        let mut norm_grad = layer.norm.as_ref().map(|_| (vec![0.0; out_dim], vec![0.0; out_dim]));
        for i in 0..n {
            for j in 0..out_dim {
                let idx = i * out_dim + j;
                let d_normed = if trace.normed.data[idx] > 0.0 { upstream_rows.data[idx] } else { 0.0 };
                d_affine.data[idx] = match (&layer.norm, &mut norm_grad) {
                    (Some(nrm), Some((dg, db))) => {
                        let std = nrm.std(j);
                        dg[j] += d_normed * (trace.affine.data[idx] - nrm.mean[j]) / std;
                        db[j] += d_normed;
                        d_normed * nrm.gamma[j] / std
                    }
                    _ => d_normed,
                };
            }
        }
        let mut g = AffineGrad { weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] };
        let mut d_input = Matrix::zeros(n, in_dim);
        for i in 0..n {
            for j in 0..out_dim {
                let da = d_affine.get(i, j);
                if da == 0.0 {
                    continue;
                }
                g.bias[j] += da;
                for k in 0..in_dim {
                    g.weight[j * in_dim + k] += da * trace.input.get(i, k);
                    d_input.data[i * in_dim + k] += da * layer.affine.weight[j * in_dim + k];
                }
            }
        }
        grads.push(LayerGrad { affine: g, norm: norm_grad });
        upstream_rows = d_input;
    }
    grads.reverse();

    let inputs = (0..n)
        .map(|i| {
            let mut a = [0.0; AUGMENTED_DIM];
            a.copy_from_slice(upstream_rows.row(i));
            a
        })
        .collect();
    Ok(MapeGradients { encode: grads, score: score_grad, inputs })
}

/// Sets each normalization layer's statistics to the mean and (biased)
/// variance of its affine output over every point of every pillar given,
/// layer by layer.
pub fn fit_normalization(params: &mut MapeParams, pillars: &[Vec<AugmentedPoint>]) -> Result<()> {
    let total: usize = pillars.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyPillar);
    }
    let mut xs: Vec<Matrix> = pillars.iter().filter(|p| !p.is_empty()).map(|p| to_matrix(p)).collect();
    for layer in &mut params.encode {
        let outs: Vec<Matrix> = xs.iter().map(|x| layer.affine.apply(x)).collect();
        let d = layer.affine.out_dim;
        if let Some(nrm) = &mut layer.norm {
            let mut mean = vec![0.0; d];
            for m in &outs {
                for (k, v) in m.data.iter().enumerate() {
                    mean[k % d] += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= total as f64);
            let mut var = vec![0.0; d];
            for m in &outs {
                for (k, v) in m.data.iter().enumerate() {
                    var[k % d] += (v - mean[k % d]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= total as f64);
            nrm.mean = mean;
            nrm.var = var;
        }
        xs = outs
            .into_iter()
            .map(|mut m| {
                if let Some(nrm) = &layer.norm {
                    for (k, v) in m.data.iter_mut().enumerate() {
                        let j = k % d;
                        *v = (*v - nrm.mean[j]) / nrm.std(j) * nrm.gamma[j] + nrm.beta[j];
                    }
                }
                m.data.iter_mut().for_each(|v| *v = v.max(0.0));
                m
            })
            .collect();
    }
    Ok(())
}
