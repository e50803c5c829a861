//! Pose-error metrics and reports, outlier analysis, the training-set size
//! sweep, and raster plots.

mod outliers;
mod plots;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use outliers::{
    datasize_sweep, kmeans, nearest_center_distances, nested_subset, outlier_analysis,
    top_n_outliers, write_sweep, OutlierAnalysis, SweepRow,
};
pub use plots::{pca_project, posemap_pca_viz, sweep_plot, trajectory_plot};

use crate::apr::AprNet;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::scene::{DatasetManifest, Split};
use crate::se3::{orthonormalize, rotation_error, translation_error, Pose};

/// Anything that maps an image to a raw 3×4 pose.
pub trait Estimator {
    fn estimate(&self, index: usize, image: &RgbImage) -> Result<[f64; 12]>;
    fn name(&self) -> String;
}

pub struct AprEstimator<'a>(pub &'a AprNet);

impl Estimator for AprEstimator<'_> {
    fn estimate(&self, _index: usize, image: &RgbImage) -> Result<[f64; 12]> {
        self.0.regress_pose(image)
    }

    fn name(&self) -> String {
        format!("apr:{}", self.0.id().unwrap_or_default())
    }
}

/// Returns the ground-truth pose of each record; a perfect estimator.
pub struct OraclePassthrough<'a>(pub &'a DatasetManifest);

impl Estimator for OraclePassthrough<'_> {
    fn estimate(&self, index: usize, _image: &RgbImage) -> Result<[f64; 12]> {
        let pose = self
            .0
            .ground_truth(index)
            .ok_or_else(|| Error::invalid(format!("record {index} has no ground truth")))?;
        Ok(pose.to_flat())
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    /// Manifest record index.
    pub index: usize,
    pub image_id: String,
    pub t_err_m: f64,
    pub r_err_deg: f64,
    pub estimate: Pose,
    pub truth: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub entries: Vec<EvalEntry>,
    pub median_t: f64,
    pub median_r: f64,
    pub mean_t: f64,
    pub mean_r: f64,
    pub metadata: BTreeMap<String, String>,
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("median of an empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("mean of an empty list"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

impl EvalReport {
    pub fn from_entries(split: impl Into<String>, entries: Vec<EvalEntry>) -> Result<Self> {
        let t: Vec<f64> = entries.iter().map(|e| e.t_err_m).collect();
        let r: Vec<f64> = entries.iter().map(|e| e.r_err_deg).collect();
        Ok(Self {
            split: split.into(),
            median_t: median(&t)?,
            median_r: median(&r)?,
            mean_t: mean(&t)?,
            mean_r: mean(&r)?,
            entries,
            metadata: BTreeMap::new(),
        })
    }

    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn median_line(&self) -> String {
        format!("median: {:.3} m / {:.3} deg", self.median_t, self.median_r)
    }

    /// `image_id,t_err_m,r_err_deg` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,t_err_m,r_err_deg\n");
        for e in &self.entries {
            writeln!(s, "{},{:.9},{:.9}", e.image_id, e.t_err_m, e.r_err_deg).unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "split: {}", self.split).unwrap();
        for (k, v) in &self.metadata {
            writeln!(s, "{k}: {v}").unwrap();
        }
        writeln!(s, "count: {}", self.count()).unwrap();
        writeln!(
            s,
            "median: {:.4} m / {:.4} deg",
            self.median_t, self.median_r
        )
        .unwrap();
        writeln!(s, "mean:   {:.4} m / {:.4} deg", self.mean_t, self.mean_r).unwrap();
        writeln!(s).unwrap();
        writeln!(
            s,
            "{:<28} {:>10} {:>10}",
            "image_id", "t_err_m", "r_err_deg"
        )
        .unwrap();
        for e in &self.entries {
            writeln!(
                s,
                "{:<28} {:>10.4} {:>10.4}",
                e.image_id, e.t_err_m, e.r_err_deg
            )
            .unwrap();
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{stem}.csv"));
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(&txt, self.to_table())?;
        Ok((csv, txt))
    }
}

/// Scores `estimator` on the given manifest records.
pub fn evaluate_records(
    estimator: &dyn Estimator,
    manifest: &DatasetManifest,
    indices: &[usize],
    label: &str,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::invalid(format!("split {label} is empty")));
    }
    let mut entries = Vec::with_capacity(indices.len());
    for &i in indices {
        let record = manifest
            .records
            .get(i)
            .ok_or_else(|| Error::invalid(format!("no record {i}")))?;
        let image = RgbImage::load_png(&manifest.resolve(record))?;
        let estimate = orthonormalize(&estimator.estimate(i, &image)?)?;
        let truth = manifest
            .ground_truth(i)
            .ok_or_else(|| Error::invalid(format!("record {i} has no ground truth")))?;
        entries.push(EvalEntry {
            index: i,
            image_id: record.image_path.clone(),
            t_err_m: translation_error(&estimate, &truth),
            r_err_deg: rotation_error(&estimate, &truth),
            estimate,
            truth,
        });
    }
    let mut report = EvalReport::from_entries(label, entries)?;
    report.metadata.insert("estimator".into(), estimator.name());
    Ok(report)
}

/// Median and mean errors over every record of `split`.
pub fn evaluate(
    estimator: &dyn Estimator,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<EvalReport> {
    evaluate_records(
        estimator,
        manifest,
        &manifest.indices(split),
        split.as_str(),
    )
}
