//! Full-reference (MSE, PSNR, SSIM) and no-reference (UCIQE, UIQM, NIQE)
//! image quality metrics, plus a directory-level evaluation report.

pub mod niqe;
pub mod reference;
pub mod underwater;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degradation::list_images;
use crate::error::{Error, Result};
use crate::imaging::load_image;

pub use niqe::{niqe_fit, niqe_fit_images, niqe_score, NiqeModel};
pub use reference::{mse, psnr, psnr_from_mse, ssim, PSNR_CAP_DB};
pub use underwater::{uciqe, uiqm};

/// Metrics of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    /// Arithmetic mean of each metric over `images`.
    pub mean: BTreeMap<String, f64>,
    pub count: usize,
}

/// Column order used in reports.
pub const METRIC_ORDER: [&str; 6] = ["psnr", "ssim", "mse", "uciqe", "uiqm", "niqe"];

impl MetricReport {
    pub fn from_rows(images: Vec<ImageMetrics>) -> Self {
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for row in &images {
            for (k, v) in &row.values {
                *sums.entry(k.clone()).or_default() += v;
            }
        }
        let count = images.len();
        let mean = sums
            .into_iter()
            .map(|(k, v)| (k, v / count as f64))
            .collect();
        MetricReport {
            images,
            mean,
            count,
        }
    }

    fn columns(&self) -> Vec<&str> {
        METRIC_ORDER
            .iter()
            .copied()
            .filter(|m| self.mean.contains_key(*m))
            .collect()
    }

    /// Fixed-width text table with one row per image and a final mean row.
    pub fn to_table(&self) -> String {
        let cols = self.columns();
        let width = self
            .images
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = format!("{:<width$}", "image");
        for c in &cols {
            let _ = write!(out, " {c:>10}");
        }
        out.push('\n');
        let mut line = |name: &str, values: &BTreeMap<String, f64>| {
            let _ = write!(out, "{name:<width$}");
            for c in &cols {
                let _ = write!(
                    out,
                    " {:>10.4}",
                    values.get(*c).copied().unwrap_or(f64::NAN)
                );
            }
            out.push('\n');
        };
        for r in &self.images {
            line(&r.name, &r.values);
        }
        line("mean", &self.mean);
        out
    }

    /// One JSON object per image, followed by a `{"mean": ..., "count": ...}` record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.images {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "mean": self.mean,
            "count": self.count,
        }))?);
        out.push('\n');
        Ok(out)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Scores every image in `pred_dir`. Full-reference metrics are added when
/// `ref_dir` is given (file names must match one to one) and NIQE when a
/// model is given.
pub fn evaluate_dataset(
    pred_dir: &Path,
    ref_dir: Option<&Path>,
    niqe: Option<&NiqeModel>,
) -> Result<MetricReport> {
    let preds = list_images(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found in {}",
            pred_dir.display()
        )));
    }
    if let Some(rd) = ref_dir {
        let refs: BTreeSet<String> = list_images(rd)?.iter().map(|p| file_name(p)).collect();
        let names: BTreeSet<String> = preds.iter().map(|p| file_name(p)).collect();
        if refs != names {
            let missing: Vec<_> = names.symmetric_difference(&refs).collect();
            return Err(Error::Dataset(format!(
                "prediction and reference file sets differ: {missing:?}"
            )));
        }
    }
    let mut rows = Vec::with_capacity(preds.len());
    for p in &preds {
        let name = file_name(p);
        let img = load_image(p)?;
        let mut values = BTreeMap::new();
        if let Some(rd) = ref_dir {
            let r = load_image(rd.join(&name))?;
            let m = mse(&img, &r)?;
            values.insert("mse".to_string(), m);
            values.insert("psnr".to_string(), psnr_from_mse(m));
            values.insert("ssim".to_string(), ssim(&img, &r)?);
        }
        values.insert("uciqe".to_string(), uciqe(&img)?);
        values.insert("uiqm".to_string(), uiqm(&img)?);
        if let Some(model) = niqe {
            values.insert("niqe".to_string(), niqe_score(&img, model)?);
        }
        rows.push(ImageMetrics { name, values });
    }
    Ok(MetricReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_is_arithmetic() {
        let row = |name: &str, v: f64| ImageMetrics {
            name: name.into(),
            values: BTreeMap::from([("psnr".to_string(), v)]),
        };
        let r = MetricReport::from_rows(vec![row("a", 10.0), row("b", 20.0), row("c", 33.0)]);
        assert_eq!(r.mean["psnr"], 21.0);
        assert_eq!(r.count, 3);
        assert!(r.to_table().contains("mean"));
        assert_eq!(r.to_jsonl().unwrap().lines().count(), 4);
    }
}
