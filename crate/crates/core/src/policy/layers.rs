use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

pub trait Real:
    Float + Default + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

// Eight independent accumulators let the reduction vectorise.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += alpha * x`
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `W x + b` with `W` row-major `[out, in]`.
pub fn dense<T: Real>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| bias + dot(&w[o * n_in..(o + 1) * n_in], x))
        .collect()
}

pub fn dense_backward<T: Real>(
    w: &[T],
    x: &[T],
    dz: &[T],
    dw: &mut [T],
    db: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let n_in = x.len();
    for (o, &g) in dz.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        db[o] += g;
        axpy(g, x, &mut dw[o * n_in..(o + 1) * n_in]);
        if let Some(dx) = dx.as_deref_mut() {
            axpy(g, &w[o * n_in..(o + 1) * n_in], dx);
        }
    }
}

/// Valid (unpadded) strided 2-D convolution over a channel-major image.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, in_h: usize, in_w: usize, out_c: usize, k: usize, stride: usize) -> Self {
        assert!(in_h >= k && in_w >= k, "kernel larger than input");
        Self {
            in_c,
            in_h,
            in_w,
            out_c,
            k,
            stride,
            out_h: (in_h - k) / stride + 1,
            out_w: (in_w - k) / stride + 1,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.positions()
    }

    /// Patches `[position][c, ky, kx]`.
    pub fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.positions() * self.patch_len());
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                for c in 0..self.in_c {
                    for ky in 0..self.k {
                        let row = c * self.in_h * self.in_w + (oy * self.stride + ky) * self.in_w + ox * self.stride;
                        out.extend_from_slice(&input[row..row + self.k]);
                    }
                }
            }
        }
        out
    }

    /// Output `[filter][position]`.
    pub fn forward<T: Real>(&self, patches: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let pl = self.patch_len();
        let np = self.positions();
        let mut out = Vec::with_capacity(self.out_len());
        for f in 0..self.out_c {
            let wf = &w[f * pl..(f + 1) * pl];
            for p in 0..np {
                out.push(b[f] + dot(wf, &patches[p * pl..(p + 1) * pl]));
            }
        }
        out
    }

    pub fn backward<T: Real>(
        &self,
        patches: &[T],
        w: &[T],
        dz: &[T],
        dw: &mut [T],
        db: &mut [T],
        dinput: Option<&mut [T]>,
    ) {
        let pl = self.patch_len();
        let np = self.positions();
        let mut dpatches = dinput.as_ref().map(|_| vec![T::zero(); np * pl]);
        for f in 0..self.out_c {
            let wf = &w[f * pl..(f + 1) * pl];
            for p in 0..np {
                let g = dz[f * np + p];
                if g == T::zero() {
                    continue;
                }
                db[f] += g;
                axpy(g, &patches[p * pl..(p + 1) * pl], &mut dw[f * pl..(f + 1) * pl]);
                if let Some(dp) = dpatches.as_mut() {
                    axpy(g, wf, &mut dp[p * pl..(p + 1) * pl]);
                }
            }
        }
        if let (Some(dinput), Some(dp)) = (dinput, dpatches) {
            let mut i = 0;
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    for c in 0..self.in_c {
                        for ky in 0..self.k {
                            let row = c * self.in_h * self.in_w + (oy * self.stride + ky) * self.in_w + ox * self.stride;
                            for kx in 0..self.k {
                                dinput[row + kx] += dp[i];
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `rows × cols` matrix with orthonormal rows (or columns, whichever is
/// shorter), scaled by `gain`. Modified Gram-Schmidt on a Gaussian sample.
pub fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // `short` vectors of length `long`.
    let mut q: Vec<Vec<f64>> = (0..short)
        .map(|_| (0..long).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for i in 0..short {
        for j in 0..i {
            let (done, rest) = q.split_at_mut(i);
            let proj = dot(&done[j], &rest[0]);
            axpy(-proj, &done[j], &mut rest[0]);
        }
        let norm = dot(&q[i], &q[i]).sqrt();
        q[i].iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows >= cols { q[c][r] } else { q[r][c] };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom::new(2, 7, 7, 3, 3, 2);
        let input: Vec<f64> = (0..g.in_len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..g.out_c * g.patch_len()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let b = vec![0.5, -1.0, 2.0];
        let out = g.forward(&g.im2col(&input), &w, &b);
        for f in 0..3 {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut s = b[f];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += w[((f * 2 + c) * 3 + ky) * 3 + kx]
                                    * input[c * 49 + (oy * 2 + ky) * 7 + ox * 2 + kx];
                            }
                        }
                    }
                    assert_eq!(out[f * g.positions() + oy * g.out_w + ox], s);
                }
            }
        }
    }

    #[test]
    fn silu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn orthogonal_wide_rows() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
        let w = orthogonal(3, 10, 1.0, &mut rng);
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(&w[i * 10..i * 10 + 10], &w[j * 10..j * 10 + 10]);
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
