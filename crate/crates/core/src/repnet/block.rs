use rand::Rng;

use super::conv::{bn_fold, conv2d, identity_to_3x3, pad_1x1_to_3x3, BnParams, ConvParams};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Train-time block: `relu(bn(conv3x3(x)) + bn(conv1x1(x)) + bn(x))`.
/// The identity branch exists only when shapes allow it.
#[derive(Debug, Clone, PartialEq)]
pub struct RepBlockParams {
    pub branch_3x3: (ConvParams, BnParams),
    pub branch_1x1: (ConvParams, BnParams),
    pub branch_id: Option<BnParams>,
}

impl RepBlockParams {
    pub fn c_in(&self) -> usize {
        self.branch_3x3.0.c_in
    }

    pub fn c_out(&self) -> usize {
        self.branch_3x3.0.c_out
    }

    pub fn stride(&self) -> usize {
        self.branch_3x3.0.stride
    }

    pub fn has_identity_slot(c_in: usize, c_out: usize, stride: usize) -> bool {
        c_in == c_out && stride == 1
    }

    /// Random weights and statistics. Branch convs carry no bias.
    pub fn random<R: Rng>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let mut c3 = ConvParams::random(c_in, c_out, 3, stride, rng);
        let mut c1 = ConvParams::random(c_in, c_out, 1, stride, rng);
        c3.bias.iter_mut().for_each(|b| *b = 0.0);
        c1.bias.iter_mut().for_each(|b| *b = 0.0);
        Self {
            branch_3x3: (c3, BnParams::random(c_out, rng)),
            branch_1x1: (c1, BnParams::random(c_out, rng)),
            branch_id: Self::has_identity_slot(c_in, c_out, stride).then(|| BnParams::random(c_out, rng)),
        }
    }

    /// Block whose fused form copies leading channels: zero conv branches, and
    /// a neutral identity branch when shapes allow (otherwise a Dirac 3x3
    /// branch with neutral statistics).
    pub fn identity(c_in: usize, c_out: usize, stride: usize) -> Self {
        let id_slot = Self::has_identity_slot(c_in, c_out, stride);
        let c3 = if id_slot {
            ConvParams::zeros(c_in, c_out, 3, stride)
        } else {
            ConvParams::partial_dirac(c_in, c_out, 3, stride)
        };
        Self {
            branch_3x3: (c3, BnParams::neutral(c_out)),
            branch_1x1: (ConvParams::zeros(c_in, c_out, 1, stride), BnParams::neutral(c_out)),
            branch_id: id_slot.then(|| BnParams::neutral(c_out)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c3, b3) = &self.branch_3x3;
        let (c1, b1) = &self.branch_1x1;
        c3.validate()?;
        c1.validate()?;
        if c3.k != 3 || c1.k != 1 {
            return Err(Error::Shape("rep block branches must be 3x3 and 1x1".into()));
        }
        if (c3.c_in, c3.c_out, c3.stride) != (c1.c_in, c1.c_out, c1.stride) {
            return Err(Error::Shape("rep block branches disagree on channels or stride".into()));
        }
        b3.validate(c3.c_out)?;
        b1.validate(c1.c_out)?;
        match (&self.branch_id, Self::has_identity_slot(c3.c_in, c3.c_out, c3.stride)) {
            (Some(bn), true) => bn.validate(c3.c_out),
            (None, _) => Ok(()),
            (Some(_), false) => Err(Error::Shape("identity branch on a stride-2 or channel-changing block".into())),
        }
    }

    /// Sum of the branch outputs, before the rectifier.
    pub fn branch_sum(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.validate()?;
        let y3 = self.branch_3x3.1.forward(&conv2d(x, &self.branch_3x3.0)?)?;
        let y1 = self.branch_1x1.1.forward(&conv2d(x, &self.branch_1x1.0)?)?;
        let mut y = y3.add(&y1)?;
        if let Some(bn) = &self.branch_id {
            y = y.add(&bn.forward(x)?)?;
        }
        Ok(y)
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        Ok(self.branch_sum(x)?.relu())
    }

    /// Sets each branch's normalization mean and variance to the batch
    /// statistics of what that branch normalizes for input `x`.
    pub fn fit_statistics(&mut self, x: &DenseTensor) -> Result<()> {
        self.validate()?;
        let y3 = conv2d(x, &self.branch_3x3.0)?;
        set_stats(&mut self.branch_3x3.1, &y3);
        let y1 = conv2d(x, &self.branch_1x1.0)?;
        set_stats(&mut self.branch_1x1.1, &y1);
        if let Some(bn) = &mut self.branch_id {
            set_stats(bn, x);
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let bn = |b: &BnParams| 2 * b.channels();
        self.branch_3x3.0.weight.len()
            + bn(&self.branch_3x3.1)
            + self.branch_1x1.0.weight.len()
            + bn(&self.branch_1x1.1)
            + self.branch_id.as_ref().map_or(0, bn)
    }
}

fn set_stats(bn: &mut BnParams, t: &DenseTensor) {
    let [n, c, h, w] = t.shape();
    let count = (n * h * w) as f64;
    for ch in 0..c {
        let (mut sum, mut sq) = (0.0f64, 0.0f64);
        for b in 0..n {
            for &v in t.plane(b, ch) {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        let mean = sum / count;
        bn.mean[ch] = mean as f32;
        bn.var[ch] = (sq / count - mean * mean).max(0.0) as f32;
    }
}

/// Collapses the three branches into one 3x3 convolution: each branch is
/// BN-folded and aligned to 3x3, then kernels and biases are summed.
pub fn fuse_rep_block(b: &RepBlockParams) -> Result<ConvParams> {
    b.validate()?;
    let k3 = bn_fold(&b.branch_3x3.0, &b.branch_3x3.1)?;
    let k1 = pad_1x1_to_3x3(&bn_fold(&b.branch_1x1.0, &b.branch_1x1.1)?)?;
    let mut parts = vec![k3, k1];
    if let Some(bn) = &b.branch_id {
        parts.push(bn_fold(&identity_to_3x3(b.c_in(), b.c_out())?, bn)?);
    }
    let mut fused = ConvParams::zeros(b.c_in(), b.c_out(), 3, b.stride());
    for part in &parts {
        for (acc, w) in fused.weight.iter_mut().zip(&part.weight) {
            *acc += w;
        }
        for (acc, w) in fused.bias.iter_mut().zip(&part.bias) {
            *acc += w;
        }
    }
    Ok(fused)
}

/// A rep layer in either its train-time or its fused inference form.
#[derive(Debug, Clone, PartialEq)]
pub enum RepLayer {
    Branched(RepBlockParams),
    Fused(ConvParams),
}

impl RepLayer {
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        match self {
            RepLayer::Branched(b) => b.forward(x),
            RepLayer::Fused(c) => Ok(conv2d(x, c)?.relu()),
        }
    }

    pub fn fused(&self) -> Result<RepLayer> {
        Ok(match self {
            RepLayer::Branched(b) => RepLayer::Fused(fuse_rep_block(b)?),
            RepLayer::Fused(c) => RepLayer::Fused(c.clone()),
        })
    }

    pub fn is_fused(&self) -> bool {
        matches!(self, RepLayer::Fused(_))
    }

    /// Fits branch statistics on `x` (fused layers are left alone) and
    /// returns the layer output.
    pub fn fit_forward(&mut self, x: &DenseTensor) -> Result<DenseTensor> {
        if let RepLayer::Branched(b) = self {
            b.fit_statistics(x)?;
        }
        self.forward(x)
    }

    /// `(c_in, c_out, stride)`
    pub fn signature(&self) -> (usize, usize, usize) {
        match self {
            RepLayer::Branched(b) => (b.c_in(), b.c_out(), b.stride()),
            RepLayer::Fused(c) => (c.c_in, c.c_out, c.stride),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            RepLayer::Branched(b) => b.param_count(),
            RepLayer::Fused(c) => c.param_count(),
        }
    }
}
