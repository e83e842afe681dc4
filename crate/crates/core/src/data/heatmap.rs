//! Score-map rendering: a 16-bit grayscale PNG, an 8-bit false-colour PNG
//! and a JSON sidecar holding the mapping bounds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::png::{write_gray16, write_rgb_bytes};
use crate::error::{Error, Result};
use crate::image::ScoreMap;

pub const HEATMAP_VERSION: u32 = 1;

/// Upper bound of the scoring function: `L2 ≤ 1`, `1 − GMS ≤ 1`, `1 − SSIM ≤ 2`.
pub const RAW_SCORE_MAX: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub format_version: u32,
    pub normalized: bool,
    /// Score mapped to 0.
    pub lo: f64,
    /// Score mapped to 65535.
    pub hi: f64,
    pub min: f64,
    pub max: f64,
    pub grayscale: String,
    pub color: String,
}

/// Paths written for a heatmap whose grayscale file is `path`.
pub fn heatmap_paths(path: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dir = path.parent().unwrap_or(Path::new(""));
    (
        path.to_path_buf(),
        dir.join(format!("{stem}_color.png")),
        dir.join(format!("{stem}.json")),
    )
}

/// Grayscale levels: `(v − lo)/(hi − lo)` scaled to 16 bits; a degenerate
/// range maps everything to 0.
pub fn quantize(scores: &ScoreMap, lo: f64, hi: f64) -> Vec<u16> {
    let span = hi - lo;
    scores
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16
            } else {
                0
            }
        })
        .collect()
}

/// Five-stop black–purple–red–yellow–white ramp.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 0.0],
        [0.34, 0.06, 0.43],
        [0.85, 0.2, 0.22],
        [0.99, 0.75, 0.1],
        [1.0, 1.0, 1.0],
    ];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f;
        out[c] = (v * 255.0).round() as u8;
    }
    out
}

/// Writes `path` (16-bit grayscale), `<stem>_color.png` and `<stem>.json`.
/// Raw mode maps `[0, RAW_SCORE_MAX]`; normalized mode maps `[min, max]`.
pub fn write_heatmap(scores: &ScoreMap, path: &Path, normalize: bool) -> Result<HeatmapSidecar> {
    if !scores.is_finite() {
        return Err(Error::Precondition(
            "score map has non-finite values".into(),
        ));
    }
    let (min, max) = scores.min_max();
    let (lo, hi) = if normalize {
        (min, max)
    } else {
        (0.0, RAW_SCORE_MAX)
    };
    let levels = quantize(scores, lo, hi);
    let (gray_path, color_path, json_path) = heatmap_paths(path);
    if let Some(dir) = gray_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_gray16(&levels, scores.height(), scores.width(), &gray_path)?;
    let rgb: Vec<u8> = levels
        .iter()
        .flat_map(|&l| colormap(l as f64 / 65535.0))
        .collect();
    write_rgb_bytes(rgb, scores.height(), scores.width(), &color_path)?;
    let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
    let sidecar = HeatmapSidecar {
        format_version: HEATMAP_VERSION,
        normalized: normalize,
        lo,
        hi,
        min,
        max,
        grayscale: name(&gray_path),
        color: name(&color_path),
    };
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(sidecar)
}
