//! Small dense building blocks with explicit backward passes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::patch_encoder::random_matrix;
use crate::real::Real;

/// 3x3 same-padding convolution over a row-major `h x w` grid, stored as an
/// im2col weight matrix of shape `(9 cin) x cout`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Conv3x3<T> {
    pub fn random<R: Rng + ?Sized>(cin: usize, cout: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = 9 * cin;
        Self { weight: random_matrix(fan_in, cout, gain / (fan_in as f64).sqrt(), rng), bias: Array1::zeros(cout) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: Array2::zeros(self.weight.dim()), bias: Array1::zeros(self.bias.len()) }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.nrows() / 9
    }

    /// Returns the output and the im2col matrix needed by [`Conv3x3::backward`].
    pub fn forward(&self, x: &Array2<T>, h: usize, w: usize) -> (Array2<T>, Array2<T>) {
        let cols = im2col(x, h, w);
        let y = cols.dot(&self.weight) + &self.bias;
        (y, cols)
    }

    /// Accumulates parameter gradients into `grad` and returns `dx`.
    pub fn backward(&self, cols: &Array2<T>, dy: &Array2<T>, h: usize, w: usize, grad: &mut Conv3x3<T>) -> Array2<T> {
        grad.weight += &cols.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        col2im(&dy.dot(&self.weight.t()), h, w, self.in_channels())
    }
}

const OFFSETS: [(isize, isize); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

fn im2col<T: Real>(x: &Array2<T>, h: usize, w: usize) -> Array2<T> {
    let cin = x.ncols();
    let mut cols = Array2::zeros((h * w, 9 * cin));
    for r in 0..h {
        for c in 0..w {
            let pos = r * w + c;
            for (k, (dr, dc)) in OFFSETS.iter().enumerate() {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let src = rr as usize * w + cc as usize;
                cols.row_mut(pos).slice_mut(ndarray::s![k * cin..(k + 1) * cin]).assign(&x.row(src));
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcols: &Array2<T>, h: usize, w: usize, cin: usize) -> Array2<T> {
    let mut dx = Array2::zeros((h * w, cin));
    for r in 0..h {
        for c in 0..w {
            let pos = r * w + c;
            for (k, (dr, dc)) in OFFSETS.iter().enumerate() {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let dst = rr as usize * w + cc as usize;
                let src = dcols.row(pos);
                let mut row = dx.row_mut(dst);
                row += &src.slice(ndarray::s![k * cin..(k + 1) * cin]);
            }
        }
    }
    dx
}

/// Affine map `x W + b` over rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn random<R: Rng + ?Sized>(din: usize, dout: usize, gain: f64, rng: &mut R) -> Self {
        Self { weight: random_matrix(din, dout, gain / (din as f64).sqrt(), rng), bias: Array1::zeros(dout) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: Array2::zeros(self.weight.dim()), bias: Array1::zeros(self.bias.len()) }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

pub fn silu<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v / (T::one() + (-v).exp()))
}

/// `dy * d/dx silu(x)`.
pub fn silu_backward<T: Real>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut out = dy.clone();
    out.zip_mut_with(x, |g, &v| {
        let s = T::one() / (T::one() + (-v).exp());
        *g *= s + v * s * (T::one() - s);
    });
    out
}

/// Sinusoidal timestep embedding, `[sin(t f_k) ..., cos(t f_k) ...]`.
pub fn timestep_embedding<T: Real>(t: usize, dim: usize) -> Array2<T> {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[[0, k]] = T::lit(arg.sin());
        out[[0, half + k]] = T::lit(arg.cos());
    }
    out
}
