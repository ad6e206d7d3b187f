//! 2-D FFT helpers over row-major complex buffers.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub(crate) type C64 = Complex<f64>;

/// In-place 2-D transform of an `h × w` row-major buffer. The inverse is
/// normalized by `1 / (h·w)`.
pub(crate) fn fft2d(buf: &mut [C64], h: usize, w: usize, inverse: bool) {
    assert_eq!(buf.len(), h * w);
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![C64::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    if inverse {
        let k = 1.0 / (h * w) as f64;
        buf.iter_mut().for_each(|v| *v *= k);
    }
}

/// Signed frequency (cycles per sample) of FFT bin `i` out of `n`.
#[inline]
pub(crate) fn bin_freq(i: usize, n: usize) -> f64 {
    let k = if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    };
    k / n as f64
}

/// Periodic Hann window of length `n`.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let orig: Vec<C64> = (0..12)
            .map(|i| C64::new(i as f64, -(i as f64) * 0.5))
            .collect();
        let mut b = orig.clone();
        fft2d(&mut b, 3, 4, false);
        assert!((b[0].re - 66.0).abs() < 1e-12);
        fft2d(&mut b, 3, 4, true);
        for (a, b) in orig.iter().zip(&b) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn frequencies() {
        assert_eq!(bin_freq(0, 8), 0.0);
        assert_eq!(bin_freq(4, 8), 0.5);
        assert_eq!(bin_freq(5, 8), -0.375);
    }
}
