//! Two-level neck: project both maps, upsample the coarser one 2x,
//! concatenate and fuse with one 3x3 conv. Output stays at the finer stride.

use rand::Rng;

use super::conv::{conv2d, ConvParams};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NeckParams {
    pub fine_proj: ConvParams,
    pub coarse_proj: ConvParams,
    pub fuse: ConvParams,
}

impl NeckParams {
    pub fn random<R: Rng>(c_fine: usize, c_coarse: usize, out: usize, rng: &mut R) -> Self {
        Self {
            fine_proj: ConvParams::random(c_fine, out, 1, 1, rng),
            coarse_proj: ConvParams::random(c_coarse, out, 1, 1, rng),
            fuse: ConvParams::random(2 * out, out, 3, 1, rng),
        }
    }

    /// Passes the leading channels of the finer map straight through.
    pub fn identity(c_fine: usize, c_coarse: usize, out: usize) -> Self {
        Self {
            fine_proj: ConvParams::partial_dirac(c_fine, out, 1, 1),
            coarse_proj: ConvParams::zeros(c_coarse, out, 1, 1),
            fuse: ConvParams::partial_dirac(2 * out, out, 3, 1),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.c_out
    }

    pub fn param_count(&self) -> usize {
        self.fine_proj.param_count() + self.coarse_proj.param_count() + self.fuse.param_count()
    }
}

pub fn neck_fuse(fine: &DenseTensor, coarse: &DenseTensor, params: &NeckParams) -> Result<DenseTensor> {
    let (hf, wf) = fine.spatial();
    let (hc, wc) = coarse.spatial();
    if (2 * hc, 2 * wc) != (hf, wf) || fine.shape()[0] != coarse.shape()[0] {
        return Err(Error::Shape(format!(
            "coarse map {:?} must be exactly half of fine map {:?}",
            coarse.shape(),
            fine.shape()
        )));
    }
    if params.fuse.c_in != params.fine_proj.c_out + params.coarse_proj.c_out {
        return Err(Error::Shape("fusion conv input width must equal both projections".into()));
    }
    let a = conv2d(fine, &params.fine_proj)?.relu();
    let b = conv2d(coarse, &params.coarse_proj)?.relu().upsample_nearest2x();
    Ok(conv2d(&a.concat_channels(&b)?, &params.fuse)?.relu())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> DenseTensor {
        let n = shape.iter().product();
        DenseTensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shape_at_fine_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = NeckParams::random(8, 16, 6, &mut rng);
        let out = neck_fuse(&random_tensor([1, 8, 6, 4], &mut rng), &random_tensor([1, 16, 3, 2], &mut rng), &p).unwrap();
        assert_eq!(out.shape(), [1, 6, 6, 4]);
    }

    #[test]
    fn zero_coarse_input_ignores_coarse_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NeckParams::random(4, 8, 5, &mut rng);
        let mut q = p.clone();
        q.coarse_proj.weight.iter_mut().for_each(|w| *w = rng.random_range(-3.0..3.0));
        let fine = random_tensor([1, 4, 4, 4], &mut rng);
        let coarse = DenseTensor::zeros([1, 8, 2, 2]);
        assert_eq!(neck_fuse(&fine, &coarse, &p).unwrap(), neck_fuse(&fine, &coarse, &q).unwrap());
    }

    #[test]
    fn mismatched_scales_rejected() {
        let p = NeckParams::identity(2, 2, 2);
        assert!(neck_fuse(&DenseTensor::zeros([1, 2, 4, 4]), &DenseTensor::zeros([1, 2, 3, 2]), &p).is_err());
    }
}
