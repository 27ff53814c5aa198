//! Pixel-level AP, F1 and IoU.
//!
//! AP and IoU are percentages, F1 a fraction.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mask::RegionMask;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMode {
    /// Mean of per-image AP.
    #[default]
    Macro,
    /// One AP over all pixels of all images.
    Pooled,
}

impl FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Self::Macro),
            "pooled" => Ok(Self::Pooled),
            _ => Err(Error::Config(format!("unknown AP mode {s:?}, expected macro or pooled"))),
        }
    }
}

fn check_same(op: &'static str, pred: &RegionMask, gt: &RegionMask) -> Result<()> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            op,
            "mask",
            format!("pred {}x{}, gt {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
        ));
    }
    Ok(())
}

/// AP of raw `(score, label)` pairs; `None` without positives.
fn ap_of(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
            ap += tp as f64 / (k + 1) as f64;
        }
    }
    Some(100.0 * ap / positives as f64)
}

/// Pixel-level average precision in percent, `None` when `gt` has no
/// positive pixel. Ties keep pixel order.
pub fn average_precision(pred: &RegionMask, gt: &RegionMask) -> Result<Option<f64>> {
    check_same("average_precision", pred, gt)?;
    let labels: Vec<bool> = gt.data().iter().map(|&g| g >= 0.5).collect();
    Ok(ap_of(pred.data(), &labels))
}

/// `(F1, IoU%)` after thresholding `pred`. Both empty counts as perfect.
pub fn f1_and_iou(pred: &RegionMask, gt: &RegionMask, threshold: f64) -> Result<(f64, f64)> {
    check_same("f1_and_iou", pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= threshold, g >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = tp + fp + fn_;
    if denom == 0 {
        return Ok((1.0, 100.0));
    }
    Ok((2.0 * tp as f64 / (2 * tp + fp + fn_) as f64, 100.0 * tp as f64 / denom as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub ap: Option<f64>,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ap: f64,
    pub f1: f64,
    pub iou: f64,
    pub threshold: f64,
    pub ap_mode: ApMode,
    pub images: usize,
    /// Images without positive pixels, left out of the AP mean.
    pub ap_excluded: usize,
    pub per_image: Vec<ImageMetrics>,
}

/// Per-image metrics and their unweighted means. `samples` yields
/// `(image_id, pred, gt)`; output order follows input order.
pub fn evaluate(samples: &[(String, RegionMask, RegionMask)], threshold: f64, mode: ApMode) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "no images to evaluate"));
    }
    let per_image: Vec<ImageMetrics> = samples
        .par_iter()
        .map(|(id, pred, gt)| {
            let ap = average_precision(pred, gt)?;
            let (f1, iou) = f1_and_iou(pred, gt, threshold)?;
            Ok(ImageMetrics {
                image_id: id.clone(),
                ap,
                f1,
                iou,
            })
        })
        .collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let with_ap: Vec<f64> = per_image.iter().filter_map(|m| m.ap).collect();
    let ap_excluded = per_image.len() - with_ap.len();
    let ap = match mode {
        ApMode::Macro => {
            if with_ap.is_empty() {
                0.0
            } else {
                with_ap.iter().sum::<f64>() / with_ap.len() as f64
            }
        }
        ApMode::Pooled => {
            let scores: Vec<f64> = samples.iter().flat_map(|(_, p, _)| p.data().iter().copied()).collect();
            let labels: Vec<bool> = samples.iter().flat_map(|(_, _, g)| g.data().iter().map(|&v| v >= 0.5)).collect();
            ap_of(&scores, &labels).unwrap_or(0.0)
        }
    };
    Ok(EvalReport {
        ap,
        f1: per_image.iter().map(|m| m.f1).sum::<f64>() / n,
        iou: per_image.iter().map(|m| m.iou).sum::<f64>() / n,
        threshold,
        ap_mode: mode,
        images: per_image.len(),
        ap_excluded,
        per_image,
    })
}

impl EvalReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mode = match self.ap_mode {
            ApMode::Macro => "macro",
            ApMode::Pooled => "pooled",
        };
        let mut s = String::new();
        let _ = writeln!(s, "ap = {:.6}", self.ap);
        let _ = writeln!(s, "f1 = {:.6}", self.f1);
        let _ = writeln!(s, "iou = {:.6}", self.iou);
        let _ = writeln!(s, "threshold = {}", self.threshold);
        let _ = writeln!(s, "ap_mode = {mode}");
        let _ = writeln!(s, "images = {}", self.images);
        let _ = writeln!(s, "ap_excluded = {}", self.ap_excluded);
        s
    }

    /// CSV with header `image_id,ap,f1,iou`; AP is blank for excluded images.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,ap,f1,iou\n");
        for m in &self.per_image {
            let ap = m.ap.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{:.6},{:.6}", m.image_id, ap, m.f1, m.iou);
        }
        s
    }
}

/// Summary fields parsed back from [`EvalReport::to_text`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub ap: f64,
    pub f1: f64,
    pub iou: f64,
    pub threshold: f64,
    pub ap_mode: ApMode,
    pub images: usize,
    pub ap_excluded: usize,
}

impl FromStr for ReportSummary {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("report line without '=': {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Config(format!("report is missing {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Config(format!("bad number for {k}"))) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Config(format!("bad count for {k}"))) };
        Ok(Self {
            ap: num("ap")?,
            f1: num("f1")?,
            iou: num("iou")?,
            threshold: num("threshold")?,
            ap_mode: get("ap_mode")?.parse()?,
            images: int("images")?,
            ap_excluded: int("ap_excluded")?,
        })
    }
}
