//! ROC-AUC at image and pixel level, and evaluation reports.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, MaskPlane, ScoreMap};
use crate::inference::{detect, DetectionResult, InferenceConfig};
use crate::masking::ScaleSet;
use crate::net::Restorer;
use crate::train::ThresholdTable;

pub const REPORT_VERSION: u32 = 1;

/// Area under the ROC curve, i.e. the Mann–Whitney statistic
/// `P(s_anomalous > s_normal) + ½·P(tie)`, computed by sorting.
pub fn roc_auc(scores: &[f64], anomalous: &[bool]) -> Result<f64> {
    if scores.len() != anomalous.len() {
        return Err(Error::shape(
            format!("{} labels", scores.len()),
            format!("{} labels", anomalous.len()),
        ));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Precondition(format!("score {s} is not a number")));
    }
    let n_pos = anomalous.iter().filter(|&&a| a).count() as u128;
    let n_neg = anomalous.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{n_pos} anomalous and {n_neg} normal samples"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the number of (anomalous, normal) pairs won, ties counting one.
    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut pos, mut neg) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            if anomalous[order[i]] {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        twice_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// AUC over all pixels of all maps pooled together; `gt` marks defective
/// pixels with 1.
pub fn pixel_auc(maps: &[ScoreMap], gt: &[MaskPlane]) -> Result<f64> {
    if maps.len() != gt.len() {
        return Err(Error::shape(
            format!("{} ground-truth masks", maps.len()),
            format!("{}", gt.len()),
        ));
    }
    let total: usize = maps.iter().map(|m| m.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (m, g) in maps.iter().zip(gt) {
        if (m.height(), m.width()) != (g.height(), g.width()) {
            return Err(Error::shape(
                format!("{}x{}", g.height(), g.width()),
                format!("{}x{}", m.height(), m.width()),
            ));
        }
        scores.extend_from_slice(m.data());
        labels.extend(g.data().iter().map(|&v| v != 0));
    }
    roc_auc(&scores, &labels)
}

/// One labelled test image.
#[derive(Clone, Debug)]
pub struct TestSample {
    /// Stable identifier, e.g. the path relative to the dataset root.
    pub id: String,
    pub category: String,
    pub defect_type: String,
    pub image: Image,
    pub anomalous: bool,
    /// Pixel ground truth, 1 on defects.
    pub gt: Option<MaskPlane>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub category: String,
    pub defect_type: String,
    pub anomalous: bool,
    pub epsilon: f64,
    pub epsilon_k: BTreeMap<usize, f64>,
    pub iterations: BTreeMap<usize, usize>,
    pub converged: BTreeMap<usize, bool>,
}

impl ImageRecord {
    pub fn new(sample: &TestSample, det: &DetectionResult) -> Self {
        Self {
            id: sample.id.clone(),
            category: sample.category.clone(),
            defect_type: sample.defect_type.clone(),
            anomalous: sample.anomalous,
            epsilon: det.epsilon,
            epsilon_k: det.scales.iter().map(|s| (s.cell, s.epsilon)).collect(),
            iterations: det.scales.iter().map(|s| (s.cell, s.iterations)).collect(),
            converged: det.scales.iter().map(|s| (s.cell, s.converged)).collect(),
        }
    }
}

/// An AUC value, or the reason it is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AucValue {
    Defined(f64),
    Undefined { undefined: String },
}

impl AucValue {
    fn from_result(r: Result<f64>) -> Result<Self> {
        match r {
            Ok(v) => Ok(Self::Defined(v)),
            Err(Error::UndefinedAuc(why)) => Ok(Self::Undefined { undefined: why }),
            Err(e) => Err(e),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Defined(v) => Some(*v),
            Self::Undefined { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub image_auc: AucValue,
    /// Absent when the category has no pixel ground truth.
    pub pixel_auc: Option<AucValue>,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub image_auc: Option<f64>,
    pub pixel_auc: Option<f64>,
    /// Categories contributing to each mean.
    pub n_image_auc: usize,
    pub n_pixel_auc: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub dataset: String,
    pub pixel_auc_protocol: String,
    pub categories: Vec<CategoryRow>,
    pub mean: MeanRow,
    pub images: Vec<ImageRecord>,
    pub config: serde_json::Value,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One line per category plus the mean row.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("category,image_auc,pixel_auc,n_images\n");
        for r in &self.categories {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.category,
                fmt(r.image_auc.value()),
                fmt(r.pixel_auc.as_ref().and_then(AucValue::value)),
                r.n_images
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            fmt(self.mean.image_auc),
            fmt(self.mean.pixel_auc),
            self.images.len()
        ));
        out
    }
}

/// Wall-clock figures kept out of the report so reports stay reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub total_s: f64,
    pub mean_image_ms: f64,
    pub n_images: usize,
}

pub struct Evaluation {
    pub report: Report,
    pub detections: Vec<DetectionResult>,
    pub timing: Timing,
}

/// Builds the per-category and mean rows from detections.
pub fn assemble_report(
    dataset: &str,
    samples: &[TestSample],
    detections: &[DetectionResult],
    config: serde_json::Value,
) -> Result<Report> {
    let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_cat.entry(&s.category).or_default().push(i);
    }
    let mut categories = Vec::new();
    for (cat, idx) in by_cat {
        let scores: Vec<f64> = idx.iter().map(|&i| detections[i].epsilon).collect();
        let labels: Vec<bool> = idx.iter().map(|&i| samples[i].anomalous).collect();
        let image_auc = AucValue::from_result(roc_auc(&scores, &labels))?;
        let pixel_auc = if idx.iter().all(|&i| samples[i].gt.is_some()) {
            let maps: Vec<ScoreMap> = idx.iter().map(|&i| detections[i].scores.clone()).collect();
            let gt: Vec<MaskPlane> = idx
                .iter()
                .map(|&i| samples[i].gt.clone().unwrap())
                .collect();
            Some(AucValue::from_result(pixel_auc(&maps, &gt))?)
        } else {
            None
        };
        categories.push(CategoryRow {
            category: cat.to_string(),
            image_auc,
            pixel_auc,
            n_images: idx.len(),
        });
    }
    let image: Vec<f64> = categories
        .iter()
        .filter_map(|r| r.image_auc.value())
        .collect();
    let pixel: Vec<f64> = categories
        .iter()
        .filter_map(|r| r.pixel_auc.as_ref().and_then(AucValue::value))
        .collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(Report {
        format_version: REPORT_VERSION,
        dataset: dataset.to_string(),
        pixel_auc_protocol: "pooled over all test pixels of a category".into(),
        mean: MeanRow {
            image_auc: mean(&image),
            pixel_auc: mean(&pixel),
            n_image_auc: image.len(),
            n_pixel_auc: pixel.len(),
        },
        categories,
        images: samples
            .iter()
            .zip(detections)
            .map(|(s, d)| ImageRecord::new(s, d))
            .collect(),
        config,
    })
}

/// Detects every test image in parallel and assembles the report.
pub fn evaluate<R: Restorer + ?Sized>(
    restorer: &R,
    thresholds: &ThresholdTable,
    dataset: &str,
    samples: &[TestSample],
    scales: &ScaleSet,
    cfg: &InferenceConfig,
    config: serde_json::Value,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Precondition("empty test set".into()));
    }
    let start = Instant::now();
    let detections: Vec<DetectionResult> = samples
        .par_iter()
        .map(|s| detect(restorer, thresholds, &s.image, scales, cfg))
        .collect::<Result<_>>()?;
    let total_s = start.elapsed().as_secs_f64();
    let report = assemble_report(dataset, samples, &detections, config)?;
    Ok(Evaluation {
        report,
        detections,
        timing: Timing {
            total_s,
            mean_image_ms: 1000.0 * total_s / samples.len() as f64,
            n_images: samples.len(),
        },
    })
}
