use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{evaluate, evaluate_records, sweep_plot, AprEstimator, Estimator, EvalReport};
use crate::apr::AprConfig;
use crate::error::{Error, Result};
use crate::field::NerfP;
use crate::scene::{DatasetManifest, Split};
use crate::se3::Pose;
use crate::trainer::{train_stage3_apr, AprSchedule, Stage3Data};

const LLOYD_ITERS: usize = 100;

fn nearest(p: &Vector3<f64>, centers: &[Vector3<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = (p - c).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means with k-means++ seeding and Lloyd iterations; empty clusters keep
/// their previous center.
pub fn kmeans(points: &[Vector3<f64>], k: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > points.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds {} points",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| nearest(p, &centers).1.powi(2))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            d2.iter()
                .position(|&d| {
                    r -= d;
                    r < 0.0
                })
                .unwrap_or(points.len() - 1)
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[pick]);
    }
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..LLOYD_ITERS {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            sums[a] += p;
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            }
        }
    }
    Ok(centers)
}

/// Distance from each point to its closest center.
pub fn nearest_center_distances(points: &[Vector3<f64>], centers: &[Vector3<f64>]) -> Vec<f64> {
    points.iter().map(|p| nearest(p, centers).1).collect()
}

/// Positions of the `n` largest distances, ordered by distance descending
/// and then by position ascending.
pub fn top_n_outliers(distances: &[f64], n: usize) -> Result<Vec<usize>> {
    if n > distances.len() {
        return Err(Error::invalid(format!(
            "top {n} requested from {} candidates",
            distances.len()
        )));
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    order.truncate(n);
    Ok(order)
}

#[derive(Clone, Debug)]
pub struct OutlierAnalysis {
    pub centers: Vec<Vector3<f64>>,
    /// Test record indices in manifest order.
    pub candidates: Vec<usize>,
    /// Outlier distance of each candidate.
    pub distances: Vec<f64>,
    /// Selected manifest indices, farthest first.
    pub selected: Vec<usize>,
    /// Errors over the selection; the means are the headline numbers.
    pub report: EvalReport,
}

/// Clusters training camera positions, scores test cameras by distance to
/// the nearest center and evaluates the `top_n` farthest.
pub fn outlier_analysis(
    train_poses: &[Pose],
    test: &DatasetManifest,
    k_clusters: usize,
    top_n: usize,
    estimator: &dyn Estimator,
    seed: u64,
) -> Result<OutlierAnalysis> {
    let train: Vec<Vector3<f64>> = train_poses.iter().map(|p| *p.translation()).collect();
    let centers = kmeans(&train, k_clusters, seed)?;
    let candidates = test.indices(Split::Test);
    let positions = candidates
        .iter()
        .map(|&i| {
            test.ground_truth(i)
                .map(|p| *p.translation())
                .ok_or_else(|| Error::invalid(format!("record {i} has no ground truth")))
        })
        .collect::<Result<Vec<_>>>()?;
    let distances = nearest_center_distances(&positions, &centers);
    let picked = top_n_outliers(&distances, top_n)?;
    let selected: Vec<usize> = picked.iter().map(|&p| candidates[p]).collect();
    let mut report = evaluate_records(estimator, test, &selected, "test-outliers")?;
    report
        .metadata
        .insert("k_clusters".into(), k_clusters.to_string());
    report.metadata.insert("top_n".into(), top_n.to_string());
    Ok(OutlierAnalysis {
        centers,
        candidates,
        distances,
        selected,
        report,
    })
}

/// `⌈fraction · n⌉` positions (at least one) taken as a prefix of a single
/// seeded permutation, so smaller fractions are subsets of larger ones.
/// Returned in ascending order.
pub fn nested_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("no views to subsample"));
    }
    let m = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = perm[..m].to_vec();
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub fraction: f64,
    pub views: usize,
    pub report: EvalReport,
}

/// Retrains the regressor on nested fractions of the training views and
/// evaluates each run on `split` of `manifest`.
#[allow(clippy::too_many_arguments)]
pub fn datasize_sweep(
    fractions: &[f64],
    field: &NerfP,
    data: &Stage3Data,
    config: &AprConfig,
    schedule: &AprSchedule,
    manifest: &DatasetManifest,
    split: Split,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let positions = nested_subset(data.len(), fraction, seed)?;
        let sub = data.subset(&positions)?;
        let apr = train_stage3_apr(field, &sub, config, schedule)?.model;
        let mut report = evaluate(&AprEstimator(&apr), manifest, split)?;
        report
            .metadata
            .insert("fraction".into(), fraction.to_string());
        report
            .metadata
            .insert("train_views".into(), positions.len().to_string());
        rows.push(SweepRow {
            fraction,
            views: positions.len(),
            report,
        });
    }
    Ok(rows)
}

/// Writes per-fraction reports, a summary table and the trend plot.
pub fn write_sweep(rows: &[SweepRow], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let mut table = String::from("fraction views median_t_m median_r_deg mean_t_m mean_r_deg\n");
    for row in rows {
        let r = &row.report;
        writeln!(
            table,
            "{} {} {:.4} {:.4} {:.4} {:.4}",
            row.fraction, row.views, r.median_t, r.median_r, r.mean_t, r.mean_r
        )
        .unwrap();
        r.write(dir, &format!("sweep_{}", row.fraction))?;
    }
    let txt = dir.join("sweep.txt");
    std::fs::write(&txt, table)?;
    let points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.fraction, r.report.median_t))
        .collect();
    let png = sweep_plot(&points, &dir.join("sweep.png"))?;
    Ok((txt, png))
}
