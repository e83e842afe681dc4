//! Similarity and error measures between an image and its reconstruction:
//! per-pixel MSE, gradient magnitude similarity (GMS), SSIM, the combined
//! error map used for scoring, and the weighted training loss together with
//! its gradient with respect to the reconstruction and the mask prediction.
//!
//! Every map keeps the input resolution; borders are handled by replicate
//! padding. Loss gradients are taken with respect to the *second* argument.

mod filter;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, MaskPlane, Plane, ScoreMap};

/// Gradient magnitude similarity settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmsConfig {
    /// Stability constant added to numerator and denominator.
    pub a: f64,
    pub prewitt_x: [[f64; 3]; 3],
    pub prewitt_y: [[f64; 3]; 3],
}

impl GmsConfig {
    pub fn new(a: f64) -> Result<Self> {
        let cfg = Self {
            a,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "GMS constant {} must be > 0",
                self.a
            )));
        }
        for i in 0..3 {
            for j in 0..3 {
                if self.prewitt_y[i][j] != self.prewitt_x[j][i] {
                    return Err(Error::InvalidConfig(
                        "prewitt_y must be the transpose of prewitt_x".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl Default for GmsConfig {
    fn default() -> Self {
        const T: f64 = 1.0 / 3.0;
        let prewitt_x = [[T, 0.0, -T], [T, 0.0, -T], [T, 0.0, -T]];
        let prewitt_y = [[T, T, T], [0.0, 0.0, 0.0], [-T, -T, -T]];
        Self {
            a: 0.0026,
            prewitt_x,
            prewitt_y,
        }
    }
}

/// SSIM window and stabilizing constants for intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    /// Odd Gaussian window side.
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "SSIM window {} must be odd",
                self.window
            )));
        }
        if !(self.sigma > 0.0 && self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidConfig(
                "SSIM sigma, C1 and C2 must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Separable Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        filter::gaussian_taps(self.window, self.sigma)
    }
}

/// Settings shared by the scoring function and the training loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub gms: GmsConfig,
    pub ssim: SsimConfig,
}

/// Loss weights `λ1..λ4` for the MSE, GMS, SSIM and mask terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub gms: f64,
    pub ssim: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            gms: 1.0,
            ssim: 1.0,
            mask: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(mse: f64, gms: f64, ssim: f64, mask: f64) -> Result<Self> {
        let w = Self {
            mse,
            gms,
            ssim,
            mask,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mse, self.gms, self.ssim, self.mask];
        if all.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and non-negative: {all:?}"
            )));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidConfig("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Individual loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mse: f64,
    pub gms: f64,
    pub ssim: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn weighted(mse: f64, gms: f64, ssim: f64, mask: f64, w: &LossWeights) -> Self {
        Self {
            mse,
            gms,
            ssim,
            mask,
            total: w.mse * mse + w.gms * gms + w.ssim * ssim + w.mask * mask,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.mse, self.gms, self.ssim, self.mask, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add(&mut self, other: &LossTerms) {
        self.mse += other.mse;
        self.gms += other.gms;
        self.ssim += other.ssim;
        self.mask += other.mask;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossTerms {
        LossTerms {
            mse: self.mse * s,
            gms: self.gms * s,
            ssim: self.ssim * s,
            mask: self.mask * s,
            total: self.total * s,
        }
    }
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    a.ensure_same_shape(b)?;
    if a.pixels() == 0 || a.channels() == 0 {
        return Err(Error::Precondition("empty image".into()));
    }
    Ok(())
}

fn check_mask_pair(m: &MaskPlane, pred: &Plane) -> Result<()> {
    if m.height() != pred.height() || m.width() != pred.width() {
        return Err(Error::shape(
            format!("{}x{}", m.height(), m.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------- MSE

/// Per-pixel squared error averaged over channels.
pub fn mse_map(a: &Image, b: &Image) -> Result<ScoreMap> {
    check_pair(a, b)?;
    let n = a.pixels();
    let mut out = vec![0.0; n];
    for c in 0..a.channels() {
        for ((o, &x), &y) in out.iter_mut().zip(a.channel(c)).zip(b.channel(c)) {
            *o += (x - y) * (x - y);
        }
    }
    let inv = 1.0 / a.channels() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Plane::from_vec(a.height(), a.width(), out)
}

pub fn mse_loss(a: &Image, b: &Image) -> Result<f64> {
    Ok(mse_map(a, b)?.mean())
}

/// `∂ mse_loss / ∂ b`.
pub fn mse_loss_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check_pair(a, b)?;
    let n = a.data().len() as f64;
    let loss = mse_loss(a, b)?;
    let grad: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| -2.0 * (x - y) / n)
        .collect();
    Ok((
        loss,
        Image::from_vec(a.channels(), a.height(), a.width(), grad)?,
    ))
}

// ---------------------------------------------------------------- GMS

struct GradientField {
    gx: Vec<f64>,
    gy: Vec<f64>,
    mag: Vec<f64>,
}

fn gradient_field(src: &[f64], h: usize, w: usize, cfg: &GmsConfig) -> GradientField {
    let gx = filter::convolve3x3(src, h, w, &cfg.prewitt_x);
    let gy = filter::convolve3x3(src, h, w, &cfg.prewitt_y);
    let mag = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .collect();
    GradientField { gx, gy, mag }
}

/// Prewitt gradient magnitude of a single plane.
pub fn gradient_magnitude(plane: &Plane, cfg: &GmsConfig) -> Plane {
    let f = gradient_field(plane.data(), plane.height(), plane.width(), cfg);
    Plane::from_vec(plane.height(), plane.width(), f.mag).expect("same size")
}

#[inline]
fn gms_value(g1: f64, g2: f64, a: f64) -> f64 {
    (2.0 * g1 * g2 + a) / (g1 * g1 + g2 * g2 + a)
}

/// Channel-averaged gradient magnitude similarity, values in `(0, 1]`.
pub fn gms_map(a: &Image, b: &Image, cfg: &GmsConfig) -> Result<ScoreMap> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    let mut out = vec![0.0; h * w];
    for c in 0..a.channels() {
        let fa = gradient_field(a.channel(c), h, w, cfg);
        let fb = gradient_field(b.channel(c), h, w, cfg);
        for ((o, &g1), &g2) in out.iter_mut().zip(&fa.mag).zip(&fb.mag) {
            *o += gms_value(g1, g2, cfg.a);
        }
    }
    let inv = 1.0 / a.channels() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Plane::from_vec(h, w, out)
}

pub fn gms_loss(a: &Image, b: &Image, cfg: &GmsConfig) -> Result<f64> {
    Ok(1.0 - gms_map(a, b, cfg)?.mean())
}

/// `∂ gms_loss / ∂ b`. Where `b`'s gradient magnitude vanishes the
/// (non-differentiable) square root contributes a zero subgradient.
pub fn gms_loss_grad(a: &Image, b: &Image, cfg: &GmsConfig) -> Result<(f64, Image)> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    let upstream = -1.0 / (a.channels() * h * w) as f64;
    let mut sim = 0.0;
    let mut grad = Image::zeros(a.channels(), h, w);
    for c in 0..a.channels() {
        let fa = gradient_field(a.channel(c), h, w, cfg);
        let fb = gradient_field(b.channel(c), h, w, cfg);
        let mut dgx = vec![0.0; h * w];
        let mut dgy = vec![0.0; h * w];
        for p in 0..h * w {
            let (g1, g2) = (fa.mag[p], fb.mag[p]);
            let num = 2.0 * g1 * g2 + cfg.a;
            let den = g1 * g1 + g2 * g2 + cfg.a;
            sim += num / den;
            if g2 > 0.0 {
                let d_g2 = upstream * (2.0 * g1 * den - num * 2.0 * g2) / (den * den);
                dgx[p] = d_g2 * fb.gx[p] / g2;
                dgy[p] = d_g2 * fb.gy[p] / g2;
            }
        }
        let gx = filter::convolve3x3_adjoint(&dgx, h, w, &cfg.prewitt_x);
        let gy = filter::convolve3x3_adjoint(&dgy, h, w, &cfg.prewitt_y);
        for ((o, x), y) in grad.channel_mut(c).iter_mut().zip(gx).zip(gy) {
            *o = x + y;
        }
    }
    let loss = 1.0 - sim / (a.channels() * h * w) as f64;
    Ok((loss, grad))
}

// ---------------------------------------------------------------- SSIM

struct SsimChannel {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    s: Vec<f64>,
}

fn ssim_channel(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    cfg: &SsimConfig,
    taps: &[f64],
) -> SsimChannel {
    let sq = |v: &[f64], u: &[f64]| v.iter().zip(u).map(|(a, b)| a * b).collect::<Vec<_>>();
    let mu_x = filter::blur(x, h, w, taps);
    let mu_y = filter::blur(y, h, w, taps);
    let m_xx = filter::blur(&sq(x, x), h, w, taps);
    let m_yy = filter::blur(&sq(y, y), h, w, taps);
    let m_xy = filter::blur(&sq(x, y), h, w, taps);
    let n = h * w;
    let (mut a1, mut a2, mut b1, mut b2, mut s) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for p in 0..n {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let var_x = m_xx[p] - mx * mx;
        let var_y = m_yy[p] - my * my;
        let cov = m_xy[p] - mx * my;
        let v_a1 = 2.0 * mx * my + cfg.c1;
        let v_a2 = 2.0 * cov + cfg.c2;
        let v_b1 = mx * mx + my * my + cfg.c1;
        let v_b2 = var_x + var_y + cfg.c2;
        a1.push(v_a1);
        a2.push(v_a2);
        b1.push(v_b1);
        b2.push(v_b2);
        s.push(v_a1 * v_a2 / (v_b1 * v_b2));
    }
    SsimChannel {
        mu_x,
        mu_y,
        a1,
        a2,
        b1,
        b2,
        s,
    }
}

fn check_ssim_fits(a: &Image, cfg: &SsimConfig) -> Result<()> {
    cfg.validate()?;
    if a.height() < cfg.window || a.width() < cfg.window {
        return Err(Error::Precondition(format!(
            "image {}x{} smaller than SSIM window {}",
            a.height(),
            a.width(),
            cfg.window
        )));
    }
    Ok(())
}

/// Channel-averaged SSIM with a Gaussian window.
pub fn ssim_map(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<ScoreMap> {
    check_pair(a, b)?;
    check_ssim_fits(a, cfg)?;
    let (h, w) = (a.height(), a.width());
    let taps = cfg.taps();
    let mut out = vec![0.0; h * w];
    for c in 0..a.channels() {
        let ch = ssim_channel(a.channel(c), b.channel(c), h, w, cfg, &taps);
        out.iter_mut().zip(&ch.s).for_each(|(o, s)| *o += s);
    }
    let inv = 1.0 / a.channels() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Plane::from_vec(h, w, out)
}

pub fn ssim_loss(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim_map(a, b, cfg)?.mean())
}

/// `∂ ssim_loss / ∂ b`.
pub fn ssim_loss_grad(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<(f64, Image)> {
    check_pair(a, b)?;
    check_ssim_fits(a, cfg)?;
    let (h, w) = (a.height(), a.width());
    let n = h * w;
    let taps = cfg.taps();
    let upstream = -1.0 / (a.channels() * n) as f64;
    let mut total = 0.0;
    let mut grad = Image::zeros(a.channels(), h, w);
    for c in 0..a.channels() {
        let (x, y) = (a.channel(c), b.channel(c));
        let ch = ssim_channel(x, y, h, w, cfg, &taps);
        let mut d_mu = vec![0.0; n];
        let mut d_yy = vec![0.0; n];
        let mut d_xy = vec![0.0; n];
        for p in 0..n {
            total += ch.s[p];
            let (mx, my) = (ch.mu_x[p], ch.mu_y[p]);
            let bb = ch.b1[p] * ch.b2[p];
            let s = ch.s[p];
            d_mu[p] = upstream
                * ((2.0 * mx * ch.a2[p] - 2.0 * mx * ch.a1[p]) / bb
                    - s * 2.0 * my * (1.0 / ch.b1[p] - 1.0 / ch.b2[p]));
            d_yy[p] = upstream * (-s / ch.b2[p]);
            d_xy[p] = upstream * (2.0 * ch.a1[p] / bb);
        }
        let g_mu = filter::blur_adjoint(&d_mu, h, w, &taps);
        let g_yy = filter::blur_adjoint(&d_yy, h, w, &taps);
        let g_xy = filter::blur_adjoint(&d_xy, h, w, &taps);
        for (p, o) in grad.channel_mut(c).iter_mut().enumerate() {
            *o = g_mu[p] + 2.0 * y[p] * g_yy[p] + x[p] * g_xy[p];
        }
    }
    let loss = 1.0 - total / (a.channels() * n) as f64;
    Ok((loss, grad))
}

// ---------------------------------------------------------------- scoring

/// Per-pixel anomaly score `L2 + (1 − GMS) + (1 − SSIM)` with default settings.
pub fn error_map_f(a: &Image, b: &Image) -> Result<ScoreMap> {
    error_map_with(a, b, &SimilarityConfig::default())
}

pub fn error_map_with(a: &Image, b: &Image, cfg: &SimilarityConfig) -> Result<ScoreMap> {
    let l2 = mse_map(a, b)?;
    let gms = gms_map(a, b, &cfg.gms)?;
    let ssim = ssim_map(a, b, &cfg.ssim)?;
    let data = l2
        .data()
        .iter()
        .zip(gms.data())
        .zip(ssim.data())
        .map(|((&e, &g), &s)| e + (1.0 - g) + (1.0 - s))
        .collect();
    Plane::from_vec(a.height(), a.width(), data)
}

// ---------------------------------------------------------------- mask + total

/// Mean squared difference between the binary mask and its prediction.
pub fn mask_loss(mask: &MaskPlane, pred: &Plane) -> Result<f64> {
    check_mask_pair(mask, pred)?;
    let s: f64 = mask
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&m, &p)| (m as f64 - p) * (m as f64 - p))
        .sum();
    Ok(s / pred.len() as f64)
}

/// `∂ mask_loss / ∂ pred`.
pub fn mask_loss_grad(mask: &MaskPlane, pred: &Plane) -> Result<(f64, Plane)> {
    let loss = mask_loss(mask, pred)?;
    let n = pred.len() as f64;
    let g = mask
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&m, &p)| -2.0 * (m as f64 - p) / n)
        .collect();
    Ok((loss, Plane::from_vec(pred.height(), pred.width(), g)?))
}

/// Weighted training loss of a composed reconstruction and a mask prediction.
pub fn total_loss(
    image: &Image,
    composed: &Image,
    mask: &MaskPlane,
    mask_pred: &Plane,
    weights: &LossWeights,
    cfg: &SimilarityConfig,
) -> Result<LossTerms> {
    Ok(LossTerms::weighted(
        mse_loss(image, composed)?,
        gms_loss(image, composed, &cfg.gms)?,
        ssim_loss(image, composed, &cfg.ssim)?,
        mask_loss(mask, mask_pred)?,
        weights,
    ))
}

/// [`total_loss`] together with its gradients with respect to `composed`
/// and `mask_pred`. Terms with zero weight are skipped.
pub fn total_loss_grad(
    image: &Image,
    composed: &Image,
    mask: &MaskPlane,
    mask_pred: &Plane,
    weights: &LossWeights,
    cfg: &SimilarityConfig,
) -> Result<(LossTerms, Image, Plane)> {
    check_pair(image, composed)?;
    check_mask_pair(mask, mask_pred)?;
    let mut grad = Image::zeros(image.channels(), image.height(), image.width());
    let mut accumulate = |w: f64, g: &Image| {
        for (o, v) in grad.data_mut().iter_mut().zip(g.data()) {
            *o += w * v;
        }
    };
    let mse = if weights.mse != 0.0 {
        let (l, g) = mse_loss_grad(image, composed)?;
        accumulate(weights.mse, &g);
        l
    } else {
        mse_loss(image, composed)?
    };
    let gms = if weights.gms != 0.0 {
        let (l, g) = gms_loss_grad(image, composed, &cfg.gms)?;
        accumulate(weights.gms, &g);
        l
    } else {
        gms_loss(image, composed, &cfg.gms)?
    };
    let ssim = if weights.ssim != 0.0 {
        let (l, g) = ssim_loss_grad(image, composed, &cfg.ssim)?;
        accumulate(weights.ssim, &g);
        l
    } else {
        ssim_loss(image, composed, &cfg.ssim)?
    };
    let (mask_l, mut mask_g) = mask_loss_grad(mask, mask_pred)?;
    mask_g
        .data_mut()
        .iter_mut()
        .for_each(|v| *v *= weights.mask);
    let terms = LossTerms::weighted(mse, gms, ssim, mask_l, weights);
    Ok((terms, grad, mask_g))
}
