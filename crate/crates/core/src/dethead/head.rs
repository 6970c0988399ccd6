use rand::Rng;

use super::{HeadOutput, HEATMAP_CEIL, HEATMAP_FLOOR};
use crate::error::{Error, Result};
use crate::repnet::{conv2d, ConvParams};
use crate::tensor::DenseTensor;

/// Shared 3x3 conv followed by one 1x1 projection per output map.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub shared: ConvParams,
    pub heatmap: ConvParams,
    pub offset: ConvParams,
    pub z: ConvParams,
    pub size: ConvParams,
    pub yaw: ConvParams,
    pub iou: ConvParams,
}

/// Heatmap bias so initial scores start near 0.1.
const HEATMAP_PRIOR_BIAS: f32 = -2.19;

impl HeadParams {
    pub fn random<R: Rng>(c_in: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let mut heatmap = ConvParams::random(hidden, classes, 1, 1, rng);
        heatmap.bias.fill(HEATMAP_PRIOR_BIAS);
        HeadParams {
            shared: ConvParams::random(c_in, hidden, 3, 1, rng),
            heatmap,
            offset: ConvParams::random(hidden, 2, 1, 1, rng),
            z: ConvParams::random(hidden, 1, 1, 1, rng),
            size: ConvParams::random(hidden, 3, 1, 1, rng),
            yaw: ConvParams::random(hidden, 2, 1, 1, rng),
            iou: ConvParams::random(hidden, 1, 1, 1, rng),
        }
    }

    /// All-zero weights; every cell scores the heatmap prior.
    pub fn zeros(c_in: usize, hidden: usize, classes: usize) -> Self {
        let mut heatmap = ConvParams::zeros(hidden, classes, 1, 1);
        heatmap.bias.fill(HEATMAP_PRIOR_BIAS);
        HeadParams {
            shared: ConvParams::zeros(c_in, hidden, 3, 1),
            heatmap,
            offset: ConvParams::zeros(hidden, 2, 1, 1),
            z: ConvParams::zeros(hidden, 1, 1, 1),
            size: ConvParams::zeros(hidden, 3, 1, 1),
            yaw: ConvParams::zeros(hidden, 2, 1, 1),
            iou: ConvParams::zeros(hidden, 1, 1, 1),
        }
    }

    pub fn classes(&self) -> usize {
        self.heatmap.c_out
    }

    pub fn in_channels(&self) -> usize {
        self.shared.c_in
    }

    fn convs(&self) -> [(&'static str, &ConvParams, usize); 6] {
        [
            ("heatmap", &self.heatmap, self.heatmap.c_out),
            ("offset", &self.offset, 2),
            ("z", &self.z, 1),
            ("size", &self.size, 3),
            ("yaw", &self.yaw, 2),
            ("iou", &self.iou, 1),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.shared.validate()?;
        for (name, p, c_out) in self.convs() {
            p.validate()?;
            if p.k != 1 || p.stride != 1 || p.c_in != self.shared.c_out || p.c_out != c_out {
                return Err(Error::Shape(format!("{name} projection must be 1x1 {}->{c_out}", self.shared.c_out)));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.shared.param_count() + self.convs().iter().map(|(_, p, _)| p.param_count()).sum::<usize>()
    }
}

fn map(t: DenseTensor, f: impl Fn(f32) -> f32) -> DenseTensor {
    let shape = t.shape();
    DenseTensor::from_vec(shape, t.into_data().into_iter().map(f).collect()).expect("shape preserved")
}

pub fn head_forward(x: &DenseTensor, params: &HeadParams) -> Result<HeadOutput> {
    params.validate()?;
    if x.shape()[0] != 1 {
        return Err(Error::Shape("head runs on a single sample".into()));
    }
    let shared = conv2d(x, &params.shared)?.relu();
    let sigmoid = |v: f32| (1.0 / (1.0 + (-v).exp())).clamp(HEATMAP_FLOOR, HEATMAP_CEIL);
    Ok(HeadOutput {
        heatmap: map(conv2d(&shared, &params.heatmap)?, sigmoid),
        offset: conv2d(&shared, &params.offset)?,
        z: conv2d(&shared, &params.z)?,
        size: conv2d(&shared, &params.size)?,
        yaw: conv2d(&shared, &params.yaw)?,
        iou: map(conv2d(&shared, &params.iou)?, |v| v.clamp(-1.0, 1.0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = HeadParams::random(8, 16, 3, &mut rng);
        let x = DenseTensor::from_vec([1, 8, 6, 5], (0..240).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out = head_forward(&x, &p).unwrap();
        out.validate().unwrap();
        assert_eq!(out.heatmap.shape(), [1, 3, 6, 5]);
        assert!(out.heatmap.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(out.iou.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}
