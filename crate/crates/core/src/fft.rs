//! Iterative radix-2 FFT for square power-of-two grids.
//!
//! Forward transforms are unnormalized; the inverse divides by `N²`.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FftError {
    #[error("grid side {0} is not a power of two")]
    NonPowerOfTwoSize(usize),
    #[error("grid has {got} cells, expected {side}x{side}")]
    NotSquare { side: usize, got: usize },
}

/// Precomputed twiddles and bit-reversal permutation for one side length.
#[derive(Debug, Clone)]
pub struct Fft2Plan {
    n: usize,
    // e^{-2πik/n} for k < n/2
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
    scratch: Vec<Complex64>,
}

impl Fft2Plan {
    pub fn new(n: usize) -> Result<Self, FftError> {
        if n == 0 || !n.is_power_of_two() {
            return Err(FftError::NonPowerOfTwoSize(n));
        }
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Ok(Self {
            n,
            twiddles,
            bitrev,
            scratch: vec![Complex64::default(); n * n],
        })
    }

    pub fn side(&self) -> usize {
        self.n
    }

    fn fft_1d(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                data.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * stride];
                    if inverse {
                        w = w.conj();
                    }
                    let a = data[start + k];
                    let b = data[start + k + half] * w;
                    data[start + k] = a + b;
                    data[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }

    fn transpose(&mut self, grid: &mut [Complex64]) {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                self.scratch[j * n + i] = grid[i * n + j];
            }
        }
        grid.copy_from_slice(&self.scratch);
    }

    fn run(&mut self, grid: &mut [Complex64], inverse: bool) -> Result<(), FftError> {
        let n = self.n;
        if grid.len() != n * n {
            return Err(FftError::NotSquare {
                side: n,
                got: grid.len(),
            });
        }
        for row in grid.chunks_mut(n) {
            self.fft_1d(row, inverse);
        }
        self.transpose(grid);
        for row in grid.chunks_mut(n) {
            self.fft_1d(row, inverse);
        }
        self.transpose(grid);
        if inverse {
            let scale = 1.0 / (n * n) as f64;
            for v in grid.iter_mut() {
                *v *= scale;
            }
        }
        Ok(())
    }

    pub fn forward(&mut self, grid: &mut [Complex64]) -> Result<(), FftError> {
        self.run(grid, false)
    }

    pub fn inverse(&mut self, grid: &mut [Complex64]) -> Result<(), FftError> {
        self.run(grid, true)
    }
}

fn side_of(len: usize) -> Result<usize, FftError> {
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len {
        return Err(FftError::NotSquare { side: n, got: len });
    }
    Ok(n)
}

/// Unnormalized forward transform of a row-major square grid.
pub fn fft2(grid: &[Complex64]) -> Result<Vec<Complex64>, FftError> {
    let mut out = grid.to_vec();
    Fft2Plan::new(side_of(grid.len())?)?.forward(&mut out)?;
    Ok(out)
}

/// Inverse transform, scaled by `1/N²`.
pub fn ifft2(grid: &[Complex64]) -> Result<Vec<Complex64>, FftError> {
    let mut out = grid.to_vec();
    Fft2Plan::new(side_of(grid.len())?)?.inverse(&mut out)?;
    Ok(out)
}
