//! Quantitative evaluation: mean absolute and squared pixel errors in
//! percent, PSNR in dB, and the context-extent ablation table.
//!
//! PSNR is computed per image and then averaged across images; metrics are
//! aggregated as plain means over the evaluation set.

use std::path::Path;

use crate::data::{mask_center, mask_context_beyond, Dataset, FillMode, MaskSpec};
use crate::error::{Error, Result};
use crate::nets::{ce_predict, CeParams};
use crate::tensor::Tensor;

/// PSNR is capped here when the mean squared error falls below 1e-10.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Mean absolute error times 100, intensities in [0,1].
pub fn l1_error_pct(y: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(y, target)?;
    let n = y.numel() as f64;
    let sum: f64 = y
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / n * 100.0)
}

/// Mean squared error times 100, intensities in [0,1].
pub fn l2_error_pct(y: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(y, target)?;
    let n = y.numel() as f64;
    let sum: f64 = y
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n * 100.0)
}

/// Peak signal-to-noise ratio in dB: `10 log10(1 / mse)`, capped at
/// [`PSNR_CAP_DB`] for near-identical images.
pub fn psnr(y: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(y, target)?;
    let n = y.numel() as f64;
    let mse: f64 = y
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn check_pair(y: &Tensor, target: &Tensor) -> Result<()> {
    if y.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "metric inputs disagree: {:?} vs {:?}",
            y.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Per-image and aggregate errors over an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<(f64, f64, f64)>,
    pub l1_pct: f64,
    pub l2_pct: f64,
    pub psnr_db: f64,
    pub samples: usize,
    /// Geometry used, as (input, prediction, hole) sizes.
    pub geometry: (usize, usize, usize),
}

impl EvalReport {
    /// Aggregate a set of (prediction, target) pairs.
    pub fn from_pairs(pairs: &[(Tensor, Tensor)], geometry: (usize, usize, usize)) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("empty evaluation set".into()));
        }
        let mut per_image = Vec::with_capacity(pairs.len());
        for (y, t) in pairs {
            per_image.push((l1_error_pct(y, t)?, l2_error_pct(y, t)?, psnr(y, t)?));
        }
        let n = per_image.len() as f64;
        let l1_pct = per_image.iter().map(|r| r.0).sum::<f64>() / n;
        let l2_pct = per_image.iter().map(|r| r.1).sum::<f64>() / n;
        let psnr_db = per_image.iter().map(|r| r.2).sum::<f64>() / n;
        Ok(EvalReport {
            per_image,
            l1_pct,
            l2_pct,
            psnr_db,
            samples: pairs.len(),
            geometry,
        })
    }

    /// CSV with one row per image plus an aggregate row, columns ordered
    /// l1, l2, PSNR.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,l1_pct,l2_pct,psnr_db\n");
        for (i, (l1, l2, p)) in self.per_image.iter().enumerate() {
            out.push_str(&format!("{i},{l1},{l2},{p}\n"));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            self.l1_pct, self.l2_pct, self.psnr_db
        ));
        out
    }

    /// Aligned table in the usual column order (l1 %, l2 %, PSNR dB).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>10}  {:>10}  {:>10}\n",
            "av. l1 err", "av. l2 err", "PSNR"
        ));
        out.push_str(&format!(
            "{:>9.2}%  {:>9.2}%  {:>8.2}dB\n",
            self.l1_pct, self.l2_pct, self.psnr_db
        ));
        out
    }
}

/// Predict every masked sample of the dataset and score against the true
/// centers. `context_limit` optionally hides context beyond that distance
/// before prediction.
pub fn evaluate_model(
    params: &CeParams,
    dataset: &Dataset,
    context_limit: Option<usize>,
) -> Result<EvalReport> {
    let spec = MaskSpec::new(
        params.config.input_size,
        params.config.prediction_size,
        params.config.hole_size,
        FillMode::ContextMean,
    )?;
    let mut pairs = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let img = dataset.fetch(i, 0)?;
        let mut sample = mask_center(&img, &spec)?;
        if let Some(k) = context_limit {
            sample = mask_context_beyond(&sample, k)?;
        }
        let y = ce_predict(params, &sample.masked.to_tensor())?;
        pairs.push((y, sample.center.to_tensor()));
    }
    EvalReport::from_pairs(
        &pairs,
        (
            params.config.input_size,
            params.config.prediction_size,
            params.config.hole_size,
        ),
    )
}

/// One row of the context-extent ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub k: usize,
    pub l1_pct: f64,
    pub l2_pct: f64,
    pub psnr_db: f64,
}

/// Evaluate the model with the visible context limited to each distance in
/// `k_list`, in the requested order.
pub fn context_ablation(
    params: &CeParams,
    dataset: &Dataset,
    k_list: &[usize],
) -> Result<Vec<AblationRow>> {
    if k_list.is_empty() {
        return Err(Error::Config("no context distances requested".into()));
    }
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let report = evaluate_model(params, dataset, Some(k))?;
        rows.push(AblationRow {
            k,
            l1_pct: report.l1_pct,
            l2_pct: report.l2_pct,
            psnr_db: report.psnr_db,
        });
    }
    Ok(rows)
}

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("k,l1_pct,l2_pct,psnr_db\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.k, r.l1_pct, r.l2_pct, r.psnr_db));
    }
    out
}

/// Aligned ablation table: one column per context distance, rows l1/l2/PSNR.
pub fn ablation_to_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("pix.");
    for r in rows {
        out.push_str(&format!("{:>9}", r.k));
    }
    out.push_str("\nl1  ");
    for r in rows {
        out.push_str(&format!("{:>9.2}", r.l1_pct));
    }
    out.push_str("\nl2  ");
    for r in rows {
        out.push_str(&format!("{:>9.2}", r.l2_pct));
    }
    out.push_str("\nPSNR");
    for r in rows {
        out.push_str(&format!("{:>9.2}", r.psnr_db));
    }
    out.push('\n');
    out
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("eval.csv"), report.to_csv())?;
    std::fs::write(dir.join("eval.txt"), report.to_table())?;
    Ok(())
}

pub fn write_ablation(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("ablation.csv"), ablation_to_csv(rows))?;
    std::fs::write(dir.join("ablation.txt"), ablation_to_table(rows))?;
    Ok(())
}
