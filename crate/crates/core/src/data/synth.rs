//! Procedural texture corpus with injected defects and exact pixel masks,
//! written in the MVTec-style layout.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::NORMAL_LABEL;
use super::png::{write_mask_png, write_rgb8};
use crate::error::{Error, Result};
use crate::image::{Image, MaskPlane};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Stripes,
    Checker,
    ValueNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Blob,
    Scratch,
    ColorPatch,
}

impl TextureFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Stripes => "stripes",
            Self::Checker => "checker",
            Self::ValueNoise => "value_noise",
        }
    }
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [Self::Blob, Self::Scratch, Self::ColorPatch];

    pub fn name(self) -> &'static str {
        match self {
            Self::Blob => "blob",
            Self::Scratch => "scratch",
            Self::ColorPatch => "color_patch",
        }
    }
}

impl fmt::Display for TextureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TextureFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "stripes" => Ok(Self::Stripes),
            "checker" => Ok(Self::Checker),
            "value_noise" => Ok(Self::ValueNoise),
            other => Err(Error::InvalidConfig(format!(
                "unknown texture family {other:?} (stripes, checker, value-noise)"
            ))),
        }
    }
}

impl FromStr for DefectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "blob" => Ok(Self::Blob),
            "scratch" => Ok(Self::Scratch),
            "color_patch" => Ok(Self::ColorPatch),
            other => Err(Error::InvalidConfig(format!(
                "unknown defect type {other:?} (blob, scratch, color-patch)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub category: String,
    pub family: TextureFamily,
    pub height: usize,
    pub width: usize,
    pub defects: Vec<DefectKind>,
    /// Inclusive range of the defect's characteristic size in pixels: blob
    /// radius, scratch half-length, patch side.
    pub defect_size: (usize, usize),
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            category: TextureFamily::Stripes.name().into(),
            family: TextureFamily::Stripes,
            height: 64,
            width: 64,
            defects: DefectKind::ALL.to_vec(),
            defect_size: (4, 10),
            n_train: 200,
            n_validation: 20,
            n_test: 60,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.category.is_empty() || self.category.contains(['/', '\\']) {
            return bad(format!("invalid category name {:?}", self.category));
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!(
                "resolution {}x{} below 16x16",
                self.height, self.width
            ));
        }
        let (lo, hi) = self.defect_size;
        if lo == 0 || lo > hi || 2 * hi + 4 > self.height.min(self.width) {
            return bad(format!(
                "defect size range {lo}..={hi} does not fit the image"
            ));
        }
        if self.defects.is_empty() {
            return bad("no defect types".into());
        }
        if self.n_train == 0 || self.n_validation == 0 || self.n_test < 2 {
            return bad("need at least one train and validation image and two test images".into());
        }
        Ok(())
    }

    pub fn n_defective(&self) -> usize {
        self.n_test / 2
    }

    pub fn n_test_normal(&self) -> usize {
        self.n_test - self.n_defective()
    }
}

/// Corpus-wide look shared by every image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub base: [f64; 3],
    pub contrast: f64,
    /// Stripe or checker period in pixels, lattice spacing for value noise.
    pub period: f64,
    pub angle: f64,
    pub noise: f64,
}

impl Style {
    pub fn new(spec: &SynthSpec) -> Self {
        let mut r = rng::stream(spec.seed, &[0x5791e]);
        Self {
            base: [
                r.random_range(0.35..0.65),
                r.random_range(0.35..0.65),
                r.random_range(0.35..0.65),
            ],
            contrast: r.random_range(0.15..0.25),
            period: match spec.family {
                TextureFamily::Stripes => r.random_range(6.0..10.0),
                TextureFamily::Checker => r.random_range(8.0..14.0),
                TextureFamily::ValueNoise => 8.0,
            },
            angle: r.random_range(0.0..PI),
            noise: 0.01,
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise on a random lattice with the given spacing.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, spacing: f64) -> Vec<f64> {
    let gh = (h as f64 / spacing).ceil() as usize + 2;
    let gw = (w as f64 / spacing).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (oy, ox): (f64, f64) = (rng.random(), rng.random());
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / spacing + oy;
            let fx = x as f64 / spacing + ox;
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (smoothstep(fy.fract()), smoothstep(fx.fract()));
            let at = |r: usize, c: usize| lattice[r * gw + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// A normal texture image with mild global jitter.
pub fn render_texture(spec: &SynthSpec, style: &Style, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (spec.height, spec.width);
    let brightness: f64 = rng.random_range(-0.03..0.03);
    let contrast = style.contrast * rng.random_range(0.95..1.05);
    let angle = style.angle + rng.random_range(-0.08..0.08);
    let period = style.period * rng.random_range(0.95..1.05);
    let (py, px): (f64, f64) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    let (s, c) = angle.sin_cos();
    let pattern: Vec<f64> = match spec.family {
        TextureFamily::Stripes => (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                (TAU * (x * c + y * s) / period + px).sin()
            })
            .collect(),
        TextureFamily::Checker => (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                let u = TAU * (x * c + y * s) / period + px;
                let v = TAU * (y * c - x * s) / period + py;
                (3.0 * u.sin() * v.sin()).tanh()
            })
            .collect(),
        TextureFamily::ValueNoise => {
            let coarse = value_noise(rng, h, w, period);
            let fine = value_noise(rng, h, w, period / 2.0);
            coarse
                .iter()
                .zip(&fine)
                .map(|(a, b)| 0.7 * a + 0.3 * b)
                .collect()
        }
    };
    let mut img = Image::zeros(3, h, w);
    for ch in 0..3 {
        for (i, t) in pattern.iter().enumerate() {
            let n: f64 = rng.random_range(-1.0..1.0) * style.noise * 3f64.sqrt();
            img.data_mut()[ch * h * w + i] =
                (style.base[ch] + brightness + contrast * t + n).clamp(0.0, 1.0);
        }
    }
    img
}

/// Geometry and appearance of one injected defect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Defect {
    Blob {
        cy: f64,
        cx: f64,
        radius: f64,
        color: [f64; 3],
    },
    Scratch {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
        half_width: f64,
        value: f64,
    },
    ColorPatch {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        shift: [f64; 3],
    },
}

impl Defect {
    pub fn kind(&self) -> DefectKind {
        match self {
            Self::Blob { .. } => DefectKind::Blob,
            Self::Scratch { .. } => DefectKind::Scratch,
            Self::ColorPatch { .. } => DefectKind::ColorPatch,
        }
    }

    pub fn sample(kind: DefectKind, spec: &SynthSpec, style: &Style, rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = (spec.height as f64, spec.width as f64);
        let size = rng.random_range(spec.defect_size.0..=spec.defect_size.1) as f64;
        match kind {
            DefectKind::Blob => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let color = style
                    .base
                    .map(|b| (b + sign * rng.random_range(0.3..0.4)).clamp(0.0, 1.0));
                Self::Blob {
                    cy: rng.random_range(size..=h - size),
                    cx: rng.random_range(size..=w - size),
                    radius: size,
                    color,
                }
            }
            DefectKind::Scratch => {
                let theta: f64 = rng.random_range(0.0..PI);
                let (dy, dx) = (size * theta.sin(), size * theta.cos());
                let cy = rng.random_range(dy.abs() + 2.0..=h - dy.abs() - 2.0);
                let cx = rng.random_range(dx.abs() + 2.0..=w - dx.abs() - 2.0);
                let mean = style.base.iter().sum::<f64>() / 3.0;
                Self::Scratch {
                    y0: cy - dy,
                    x0: cx - dx,
                    y1: cy + dy,
                    x1: cx + dx,
                    half_width: rng.random_range(1.0..1.8),
                    value: if mean > 0.5 { 0.05 } else { 0.95 },
                }
            }
            DefectKind::ColorPatch => {
                let side = size as usize;
                let ph = rng.random_range(side..=2 * side).min(spec.height);
                let pw = rng.random_range(side..=2 * side).min(spec.width);
                let up = rng.random_range(0..3);
                let down = (up + rng.random_range(1..3)) % 3;
                let mut shift = [0.0; 3];
                shift[up] = rng.random_range(0.3..0.4);
                shift[down] = -rng.random_range(0.3..0.4);
                Self::ColorPatch {
                    top: rng.random_range(0..=spec.height - ph),
                    left: rng.random_range(0..=spec.width - pw),
                    height: ph,
                    width: pw,
                    shift,
                }
            }
        }
    }

    /// Whether the pixel with centre `(y + ½, x + ½)` is covered.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Self::Blob { cy, cx, radius, .. } => {
                (py - cy).powi(2) + (px - cx).powi(2) <= radius * radius
            }
            Self::Scratch {
                y0,
                x0,
                y1,
                x1,
                half_width,
                ..
            } => {
                let (vy, vx) = (y1 - y0, x1 - x0);
                let len2 = vy * vy + vx * vx;
                let t = (((py - y0) * vy + (px - x0) * vx) / len2).clamp(0.0, 1.0);
                let (qy, qx) = (y0 + t * vy, x0 + t * vx);
                (py - qy).powi(2) + (px - qx).powi(2) <= half_width * half_width
            }
            Self::ColorPatch {
                top,
                left,
                height,
                width,
                ..
            } => (top..top + height).contains(&y) && (left..left + width).contains(&x),
        }
    }

    /// Pixel mask of the covered area, 1 on the defect.
    pub fn rasterize(&self, height: usize, width: usize) -> MaskPlane {
        MaskPlane::from_fn(height, width, |y, x| self.contains(y, x))
    }

    /// Paints the defect and returns its mask.
    pub fn apply(&self, img: &mut Image) -> MaskPlane {
        let (_, h, w) = img.shape();
        let mask = self.rasterize(h, w);
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) == 0 {
                    continue;
                }
                for c in 0..3 {
                    let v = match *self {
                        Self::Blob { color, .. } => color[c],
                        Self::Scratch { value, .. } => value,
                        Self::ColorPatch { shift, .. } => {
                            (img.get(c, y, x) + shift[c]).clamp(0.0, 1.0)
                        }
                    };
                    img.set(c, y, x, v);
                }
            }
        }
        mask
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    TestNormal,
    TestDefective,
}

impl Split {
    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// One generated image; `defect` is set for defective test images.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub defect: Option<(Defect, MaskPlane)>,
}

/// Renders image `index` of a split. Depends only on `(spec, split, index)`.
pub fn render_sample(spec: &SynthSpec, style: &Style, split: Split, index: usize) -> SynthSample {
    let mut r = rng::stream(spec.seed, &[0xda7a, split.tag(), index as u64]);
    let mut image = render_texture(spec, style, &mut r);
    let defect = (split == Split::TestDefective).then(|| {
        let kind = spec.defects[index % spec.defects.len()];
        let d = Defect::sample(kind, spec, style, &mut r);
        let mask = d.apply(&mut image);
        (d, mask)
    });
    SynthSample { image, defect }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub file: String,
    pub defect: Defect,
    pub area: usize,
}

/// Sidecar describing a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub format_version: u32,
    pub spec: SynthSpec,
    pub style: Style,
    pub defects: Vec<DefectRecord>,
}

pub const MANIFEST_FILE: &str = "synth.json";

/// Writes the corpus under `out/<category>/` and returns its manifest.
pub fn generate_synthetic(spec: &SynthSpec, out: &Path) -> Result<SynthManifest> {
    spec.validate()?;
    let style = Style::new(spec);
    let cat = out.join(&spec.category);
    let mut jobs: Vec<(Split, usize, PathBuf)> = Vec::new();
    let name = |i: usize| format!("{i:03}.png");
    for i in 0..spec.n_train {
        jobs.push((
            Split::Train,
            i,
            cat.join("train").join(NORMAL_LABEL).join(name(i)),
        ));
    }
    for i in 0..spec.n_validation {
        jobs.push((
            Split::Validation,
            i,
            cat.join("validation").join(NORMAL_LABEL).join(name(i)),
        ));
    }
    for i in 0..spec.n_test_normal() {
        jobs.push((
            Split::TestNormal,
            i,
            cat.join("test").join(NORMAL_LABEL).join(name(i)),
        ));
    }
    let mut per_kind = vec![0usize; DefectKind::ALL.len()];
    for i in 0..spec.n_defective() {
        let kind = spec.defects[i % spec.defects.len()];
        let j = &mut per_kind[kind as usize];
        jobs.push((
            Split::TestDefective,
            i,
            cat.join("test").join(kind.name()).join(name(*j)),
        ));
        *j += 1;
    }

    let rendered: Vec<SynthSample> = jobs
        .par_iter()
        .map(|(split, i, _)| render_sample(spec, &style, *split, *i))
        .collect();

    let mut records = Vec::new();
    for ((_, _, path), sample) in jobs.iter().zip(&rendered) {
        let dir = path.parent().expect("file inside a split directory");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_rgb8(&sample.image, path)?;
        if let Some((defect, mask)) = &sample.defect {
            let kind = defect.kind().name();
            let stem = path.file_stem().unwrap().to_string_lossy();
            let gdir = cat.join("ground_truth").join(kind);
            fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
            write_mask_png(mask, &gdir.join(format!("{stem}_mask.png")))?;
            records.push(DefectRecord {
                file: format!("test/{kind}/{stem}.png"),
                defect: defect.clone(),
                area: mask.count_visible(),
            });
        }
    }
    let manifest = SynthManifest {
        format_version: 1,
        spec: spec.clone(),
        style,
        defects: records,
    };
    let mpath = cat.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}
