//! Replicate-padded filtering and the adjoints used for backpropagation.

#[inline]
pub(crate) fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// 2-D convolution with a 3×3 kernel and replicate border.
pub(crate) fn convolve3x3(src: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                let sy = clamp(y as isize + 1 - i as isize, h);
                for (j, &kv) in row.iter().enumerate() {
                    if kv != 0.0 {
                        let sx = clamp(x as isize + 1 - j as isize, w);
                        acc += kv * src[sy * w + sx];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adjoint of [`convolve3x3`]: scatters `grad` back onto source pixels.
pub(crate) fn convolve3x3_adjoint(grad: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            if g == 0.0 {
                continue;
            }
            for (i, row) in k.iter().enumerate() {
                let sy = clamp(y as isize + 1 - i as isize, h);
                for (j, &kv) in row.iter().enumerate() {
                    if kv != 0.0 {
                        let sx = clamp(x as isize + 1 - j as isize, w);
                        out[sy * w + sx] += kv * g;
                    }
                }
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian taps of odd length `size`.
pub(crate) fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable symmetric blur, replicate border: rows first, then columns.
pub(crate) fn blur(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in taps.iter().enumerate() {
                acc += kv * row[clamp(x as isize + t as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (t, &kv) in taps.iter().enumerate() {
            let sy = clamp(y as isize + t as isize - r, h);
            let src_row = &tmp[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, &s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Adjoint of [`blur`].
pub(crate) fn blur_adjoint(grad: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for (t, &kv) in taps.iter().enumerate() {
            let sy = clamp(y as isize + t as isize - r, h);
            let g_row = &grad[y * w..(y + 1) * w];
            let dst = &mut tmp[sy * w..(sy + 1) * w];
            for (d, &g) in dst.iter_mut().zip(g_row) {
                *d += kv * g;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            for (t, &kv) in taps.iter().enumerate() {
                out[y * w + clamp(x as isize + t as isize - r, w)] += kv * g;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 ^ salt) % 1000) as f64 / 1000.0 - 0.5)
            .collect()
    }

    // <A x, y> == <x, A^T y>
    #[test]
    fn adjoints_satisfy_dot_product_identity() {
        let (h, w) = (9, 13);
        let x = pseudo(h * w, 3);
        let y = pseudo(h * w, 17);
        let k = [[1.0, 2.0, -1.0], [0.5, 0.0, 3.0], [-2.0, 1.0, 0.25]];
        let lhs = dot(&convolve3x3(&x, h, w, &k), &y);
        let rhs = dot(&x, &convolve3x3_adjoint(&y, h, w, &k));
        assert!((lhs - rhs).abs() < 1e-12);

        let taps = gaussian_taps(5, 1.2);
        let lhs = dot(&blur(&x, h, w, &taps), &y);
        let rhs = dot(&x, &blur_adjoint(&y, h, w, &taps));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gaussian_taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(t[i], t[10 - i]);
        }
    }
}
