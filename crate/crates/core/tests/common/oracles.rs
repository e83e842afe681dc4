//! Brute-force reference implementations used to check the fast paths.
//!
//! Everything here works on raw channel-major slices and hard-codes its own
//! constants so it shares no code with the library.

#![allow(dead_code)]

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

pub fn naive_mse_map(a: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for ch in 0..c {
                let i = (ch * h + y) * w + x;
                s += (a[i] - b[i]).powi(2);
            }
            out[y * w + x] = s / c as f64;
        }
    }
    out
}

fn naive_prewitt_magnitude(p: &[f64], h: usize, w: usize, y: usize, x: usize) -> f64 {
    // Correlation form; the magnitude is the same as for true convolution.
    let mut gx = 0.0;
    let mut gy = 0.0;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let v = p[clamp(y as isize + dy, h) * w + clamp(x as isize + dx, w)];
            gx += -(dx as f64) * v / 3.0;
            gy += -(dy as f64) * v / 3.0;
        }
    }
    (gx * gx + gy * gy).sqrt()
}

pub fn naive_gradient_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = naive_prewitt_magnitude(p, h, w, y, x);
        }
    }
    out
}

pub fn naive_gms_map(a: &[f64], b: &[f64], c: usize, h: usize, w: usize, k: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        let pa = &a[ch * h * w..(ch + 1) * h * w];
        let pb = &b[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let g1 = naive_prewitt_magnitude(pa, h, w, y, x);
                let g2 = naive_prewitt_magnitude(pb, h, w, y, x);
                out[y * w + x] += (2.0 * g1 * g2 + k) / (g1 * g1 + g2 * g2 + k) / c as f64;
            }
        }
    }
    out
}

/// Direct windowed SSIM with an explicit 2-D Gaussian and clamped borders.
pub fn naive_ssim_map(
    a: &[f64],
    b: &[f64],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    sigma: f64,
    c1: f64,
    c2: f64,
) -> Vec<f64> {
    let r = (window / 2) as isize;
    let mut kernel = vec![0.0; window * window];
    for i in 0..window {
        for j in 0..window {
            let (dy, dx) = (i as f64 - r as f64, j as f64 - r as f64);
            kernel[i * window + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let ksum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= ksum);

    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        let pa = &a[ch * h * w..(ch + 1) * h * w];
        let pb = &b[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..window {
                    for j in 0..window {
                        let sy = clamp(y as isize + i as isize - r, h);
                        let sx = clamp(x as isize + j as isize - r, w);
                        let kv = kernel[i * window + j];
                        let (u, v) = (pa[sy * w + sx], pb[sy * w + sx]);
                        mx += kv * u;
                        my += kv * v;
                        sxx += kv * u * u;
                        syy += kv * v * v;
                        sxy += kv * u * v;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let s = (2.0 * mx * my + c1) * (2.0 * cov + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                out[y * w + x] += s / c as f64;
            }
        }
    }
    out
}

/// `L2 + (1 − GMS) + (1 − SSIM)` with the default constants written out.
pub fn naive_error_map(a: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let l2 = naive_mse_map(a, b, c, h, w);
    let gms = naive_gms_map(a, b, c, h, w, 0.0026);
    let ssim = naive_ssim_map(a, b, c, h, w, 11, 1.5, 1e-4, 9e-4);
    (0..h * w)
        .map(|p| l2[p] + (1.0 - gms[p]) + (1.0 - ssim[p]))
        .collect()
}

/// Central differences of `f` at `x` for the listed coordinates.
pub fn central_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `P(anomalous > normal) + ½ P(tie)` by exhaustive pair enumeration.
pub fn pairwise_auc(scores: &[f64], anomalous: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !anomalous[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if anomalous[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
