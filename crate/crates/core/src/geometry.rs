//! Convex-polygon geometry over a generic scalar, so the same clipping code
//! serves plain `f64` evaluation and forward-mode differentiation.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;

    fn max(self, other: Self) -> Self {
        if other.val() > self.val() {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if other.val() < self.val() {
            other
        } else {
            self
        }
    }

    fn abs(self) -> Self {
        if self.val() < 0.0 {
            -self
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Forward-mode dual number carrying `N` tangent directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    /// Seeds direction `k` with unit tangent.
    pub fn variable(v: f64, k: usize) -> Self {
        let mut d = [0.0; N];
        d[k] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Self { v, d: self.d.map(|x| x * dv) }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { v: self.v + o.v, d: std::array::from_fn(|k| self.d[k] + o.d[k]) }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self { v: self.v - o.v, d: std::array::from_fn(|k| self.d[k] - o.d[k]) }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self { v: self.v * o.v, d: std::array::from_fn(|k| self.d[k] * o.v + self.v * o.d[k]) }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        Self {
            v: self.v * inv,
            d: std::array::from_fn(|k| (self.d[k] * o.v - self.v * o.d[k]) * inv * inv),
        }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        Self { v: -self.v, d: self.d.map(|x| -x) }
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    fn val(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        self.chain(r, if r > 0.0 { 0.5 / r } else { 0.0 })
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
}

pub type Vec2<T> = [T; 2];

/// Oriented rectangle corners in counter-clockwise order.
pub fn rect_corners<T: Scalar>(cx: T, cy: T, l: T, w: T, yaw: T) -> [Vec2<T>; 4] {
    let (s, c) = (yaw.sin(), yaw.cos());
    let hl = l * T::cst(0.5);
    let hw = w * T::cst(0.5);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| [cx + c * u - s * v, cy + s * u + c * v])
}

#[inline]
fn cross<T: Scalar>(o: Vec2<T>, a: Vec2<T>, b: Vec2<T>) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman: clips `subject` against the convex CCW polygon `clip`.
pub fn clip_polygon<T: Scalar>(subject: &[Vec2<T>], clip: &[Vec2<T>]) -> Vec<Vec2<T>> {
    let mut output = subject.to_vec();
    for e in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[e], clip[(e + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for i in 0..input.len() {
            let p = input[i];
            let q = input[(i + 1) % input.len()];
            let sp = cross(a, b, p);
            let sq = cross(a, b, q);
            let p_in = sp.val() >= 0.0;
            let q_in = sq.val() >= 0.0;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                let t = sp / (sp - sq);
                output.push([p[0] + (q[0] - p[0]) * t, p[1] + (q[1] - p[1]) * t]);
            }
        }
    }
    output
}

/// Shoelace area (absolute value).
pub fn polygon_area<T: Scalar>(poly: &[Vec2<T>]) -> T {
    if poly.len() < 3 {
        return T::cst(0.0);
    }
    let mut acc = T::cst(0.0);
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        acc = acc + (p[0] * q[1] - q[0] * p[1]);
    }
    (acc * T::cst(0.5)).abs()
}

/// Intersection area of two convex CCW polygons.
pub fn intersection_area<T: Scalar>(a: &[Vec2<T>], b: &[Vec2<T>]) -> T {
    polygon_area(&clip_polygon(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_squares_half_overlap() {
        let a = rect_corners(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = rect_corners(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((intersection_area(&a, &b) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_square_inside_larger() {
        let a = rect_corners(0.0, 0.0, 10.0, 10.0, 0.0);
        let b = rect_corners(0.0, 0.0, 1.0, 1.0, 0.7);
        assert!((intersection_area(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dual_derivative_of_product() {
        let x = Dual::<2>::variable(3.0, 0);
        let y = Dual::<2>::variable(4.0, 1);
        let z = x * y / (x + y);
        // d/dx xy/(x+y) = y^2/(x+y)^2
        assert!((z.d[0] - 16.0 / 49.0).abs() < 1e-15);
        assert!((z.d[1] - 9.0 / 49.0).abs() < 1e-15);
    }

    #[test]
    fn dual_area_gradient_of_rectangle() {
        let l = Dual::<1>::variable(3.0, 0);
        let c = rect_corners(Dual::cst(0.0), Dual::cst(0.0), l, Dual::cst(2.0), Dual::cst(0.4));
        let a = polygon_area(&c);
        assert!((a.v - 6.0).abs() < 1e-12);
        assert!((a.d[0] - 2.0).abs() < 1e-12);
    }
}
