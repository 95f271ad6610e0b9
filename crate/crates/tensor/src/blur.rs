//! Separable Gaussian smoothing of a single 2-D map.
//!
//! Taps that fall outside the map are folded back onto the mirrored
//! in-bounds cell (half-sample symmetric extension). With a symmetric kernel
//! the resulting linear operator is symmetric and doubly stochastic, so a
//! constant map stays constant and the total mass is preserved.

use crate::real::Real;

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel<T: Real>(size: usize, sigma: f64) -> Vec<T> {
    assert!(size % 2 == 1, "kernel size must be odd");
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| T::lit(w / total)).collect()
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    j as usize
}

/// Applies the 1-D operator (or its adjoint) along `len` elements spaced by
/// `stride`, `count` lines starting every `line_step`.
#[allow(clippy::too_many_arguments)]
fn pass<T: Real>(
    src: &[T],
    dst: &mut [T],
    kernel: &[T],
    len: usize,
    stride: usize,
    count: usize,
    line_step: usize,
    adjoint: bool,
) {
    let r = (kernel.len() / 2) as isize;
    for line in 0..count {
        let base = line * line_step;
        for i in 0..len {
            let mut acc = T::zero();
            for (k, &w) in kernel.iter().enumerate() {
                let j = mirror(i as isize + k as isize - r, len);
                if !adjoint {
                    acc = acc + w * src[base + j * stride];
                } else {
                    // scatter form: dst[j] += w * src[i]
                    dst[base + j * stride] = dst[base + j * stride] + w * src[base + i * stride];
                }
            }
            if !adjoint {
                dst[base + i * stride] = acc;
            }
        }
    }
}

fn separable<T: Real>(data: &[T], h: usize, w: usize, kernel: &[T], adjoint: bool) -> Vec<T> {
    assert_eq!(data.len(), h * w);
    assert!(kernel.len() / 2 <= h.min(w), "kernel radius exceeds map size");
    let mut tmp = vec![T::zero(); h * w];
    let mut out = vec![T::zero(); h * w];
    // rows: lines of length w, stride 1
    pass(data, &mut tmp, kernel, w, 1, h, w, adjoint);
    // columns: lines of length h, stride w
    pass(&tmp, &mut out, kernel, h, w, w, 1, adjoint);
    out
}

/// Smooths an `h × w` row-major map.
pub fn blur_2d<T: Real>(data: &[T], h: usize, w: usize, kernel: &[T]) -> Vec<T> {
    separable(data, h, w, kernel, false)
}

/// Transpose of [`blur_2d`]; used for backpropagation.
pub fn blur_2d_adjoint<T: Real>(data: &[T], h: usize, w: usize, kernel: &[T]) -> Vec<T> {
    separable(data, h, w, kernel, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k: Vec<f64> = gaussian_kernel(3, 1.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[2]);
        let e = (-0.5f64).exp();
        assert!((k[1] - 1.0 / (1.0 + 2.0 * e)).abs() < 1e-15);
    }

    #[test]
    fn constant_map_is_fixed_point() {
        let k: Vec<f64> = gaussian_kernel(3, 1.0);
        let out = blur_2d(&[0.25; 20], 4, 5, &k);
        for v in out {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn mass_is_preserved() {
        let k: Vec<f64> = gaussian_kernel(5, 1.3);
        let data: Vec<f64> = (0..42).map(|i| ((i * 37) % 11) as f64).collect();
        let out = blur_2d(&data, 6, 7, &k);
        let (a, b): (f64, f64) = (data.iter().sum(), out.iter().sum());
        assert!(((a - b) / a).abs() < 1e-12);
    }

    #[test]
    fn adjoint_matches_dense_transpose() {
        let k: Vec<f64> = gaussian_kernel(3, 1.0);
        let (h, w) = (3, 4);
        // dense operator by probing unit vectors
        let n = h * w;
        let mut dense = vec![0.0; n * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = blur_2d(&e, h, w, &k);
            for i in 0..n {
                dense[i * n + j] = col[i];
            }
        }
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let row = blur_2d_adjoint(&e, h, w, &k);
            for j in 0..n {
                assert!((row[j] - dense[i * n + j]).abs() < 1e-15);
            }
        }
    }
}
