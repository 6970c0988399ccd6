//! Rank-4 `f32` tensor in NCHW layout.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// `(height, width)`
    pub fn spatial(&self) -> (usize, usize) {
        (self.shape[2], self.shape[3])
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, h, w] = self.shape;
        ((n * cs + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// Contiguous `(h, w)` plane for one batch item and channel.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn relu(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("add {:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { shape: self.shape, data })
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise difference divided by the largest magnitude of `reference`.
    pub fn max_relative_diff(&self, reference: &Self) -> Result<f64> {
        if self.shape != reference.shape {
            return Err(Error::Shape(format!("compare {:?} vs {:?}", self.shape, reference.shape)));
        }
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((*a as f64 - *b as f64).abs()));
        let scale = reference.max_abs() as f64;
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        let [n, c1, h, w] = self.shape;
        let [n2, c2, h2, w2] = other.shape;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::Shape(format!("concat {:?} with {:?}", self.shape, other.shape)));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        let (s1, s2) = (c1 * h * w, c2 * h * w);
        for b in 0..n {
            data.extend_from_slice(&self.data[b * s1..(b + 1) * s1]);
            data.extend_from_slice(&other.data[b * s2..(b + 1) * s2]);
        }
        Ok(Self { shape: [n, c1 + c2, h, w], data })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2x(&self) -> Self {
        let [n, c, h, w] = self.shape;
        let (ho, wo) = (2 * h, 2 * w);
        let mut data = vec![0.0; n * c * ho * wo];
        for (plane_out, plane_in) in data.chunks_exact_mut(ho * wo).zip(self.data.chunks_exact(h * w)) {
            for y in 0..ho {
                for x in 0..wo {
                    plane_out[y * wo + x] = plane_in[(y / 2) * w + x / 2];
                }
            }
        }
        Self { shape: [n, c, ho, wo], data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_single_value() {
        let t = DenseTensor::full([1, 1, 1, 1], 3.5);
        let u = t.upsample_nearest2x();
        assert_eq!(u.shape(), [1, 1, 2, 2]);
        assert_eq!(u.data(), &[3.5; 4]);
    }

    #[test]
    fn concat_stacks_channels_per_batch() {
        let a = DenseTensor::from_vec([2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = DenseTensor::from_vec([2, 1, 1, 1], vec![10.0, 20.0]).unwrap();
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.data(), &[1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(DenseTensor::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }
}
