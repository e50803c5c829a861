use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage as Raster};
use imageproc::drawing::{
    draw_filled_circle_mut, draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut,
};
use imageproc::rect::Rect;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::field::PoseMapImage;
use crate::se3::Pose;

const CANVAS: u32 = 512;
pub(super) const MARGIN: u32 = 24;
const PLOT: u32 = 432;
pub(super) const BAR_X: u32 = 472;
const BAR_W: u32 = 18;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRAY: Rgb<u8> = Rgb([160, 160, 160]);
const GREEN: Rgb<u8> = Rgb([0, 160, 0]);
const RED: Rgb<u8> = Rgb([220, 0, 0]);
const PCA_UPSCALE: u32 = 8;

fn colormap(t: f64) -> Rgb<u8> {
    let c = colorous::VIRIDIS.eval_continuous(t.clamp(0.0, 1.0));
    Rgb([c.r, c.g, c.b])
}

fn canvas() -> Raster {
    let mut img = Raster::from_pixel(CANVAS, CANVAS, WHITE);
    draw_hollow_rect_mut(
        &mut img,
        Rect::at(MARGIN as i32, MARGIN as i32).of_size(PLOT, PLOT),
        GRAY,
    );
    img
}

/// Maps data coordinates into the square plot area, keeping aspect ratio.
pub(super) struct Frame {
    center: (f64, f64),
    scale: f64,
}

impl Frame {
    pub(super) fn fit(points: &[(f64, f64)]) -> Self {
        let (mut lo, mut hi) = (
            (f64::INFINITY, f64::INFINITY),
            (f64::NEG_INFINITY, f64::NEG_INFINITY),
        );
        for &(x, y) in points {
            lo = (lo.0.min(x), lo.1.min(y));
            hi = (hi.0.max(x), hi.1.max(y));
        }
        let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-9);
        Self {
            center: (0.5 * (lo.0 + hi.0), 0.5 * (lo.1 + hi.1)),
            scale: PLOT as f64 / (1.1 * span),
        }
    }

    pub(super) fn px(&self, (x, y): (f64, f64)) -> (f32, f32) {
        let mid = (MARGIN + PLOT / 2) as f64;
        (
            (mid + (x - self.center.0) * self.scale) as f32,
            (mid - (y - self.center.1) * self.scale) as f32,
        )
    }
}

fn polyline(img: &mut Raster, frame: &Frame, pts: &[(f64, f64)], color: Rgb<u8>) {
    for w in pts.windows(2) {
        draw_line_segment_mut(img, frame.px(w[0]), frame.px(w[1]), color);
    }
}

fn save(img: &Raster, path: &Path) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(path.to_path_buf())
}

/// Top-down (x, y) trajectories: ground truth in green, estimates in red,
/// estimate markers colored by rotation error with a color bar on the right
/// (bottom = smallest error).
pub fn trajectory_plot(
    gt: &[Pose],
    est: &[Pose],
    rot_errors: &[f64],
    out: &Path,
) -> Result<PathBuf> {
    if gt.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    if gt.len() != est.len() || gt.len() != rot_errors.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} ground-truth, {} estimated poses, {} errors",
            gt.len(),
            est.len(),
            rot_errors.len()
        )));
    }
    let xy = |p: &Pose| (p.translation()[0], p.translation()[1]);
    let g: Vec<_> = gt.iter().map(xy).collect();
    let e: Vec<_> = est.iter().map(xy).collect();
    let all: Vec<_> = g.iter().chain(&e).copied().collect();
    let frame = Frame::fit(&all);
    let mut img = canvas();
    polyline(&mut img, &frame, &g, GREEN);
    polyline(&mut img, &frame, &e, RED);
    let lo = rot_errors.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rot_errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (p, err) in e.iter().zip(rot_errors) {
        let t = if hi > lo { (err - lo) / (hi - lo) } else { 0.0 };
        let (x, y) = frame.px(*p);
        draw_filled_circle_mut(
            &mut img,
            (x.round() as i32, y.round() as i32),
            3,
            colormap(t),
        );
    }
    for row in 0..PLOT {
        let t = 1.0 - row as f64 / (PLOT - 1) as f64;
        let r = Rect::at(BAR_X as i32, (MARGIN + row) as i32).of_size(BAR_W, 1);
        draw_filled_rect_mut(&mut img, r, colormap(t));
    }
    save(&img, out)
}

/// Error-versus-fraction trend: one marker per `(fraction, error)` joined
/// in fraction order.
pub fn sweep_plot(points: &[(f64, f64)], out: &Path) -> Result<PathBuf> {
    if points.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut framed = pts.clone();
    framed.push((0.0, 0.0));
    framed.push((1.0, 0.0));
    let frame = Frame::fit(&framed);
    let mut img = canvas();
    let axis_y = frame.px((0.0, 0.0)).1;
    draw_line_segment_mut(
        &mut img,
        frame.px((0.0, 0.0)),
        (frame.px((1.0, 0.0)).0, axis_y),
        GRAY,
    );
    polyline(&mut img, &frame, &pts, RED);
    for p in &pts {
        let (x, y) = frame.px(*p);
        draw_filled_circle_mut(&mut img, (x.round() as i32, y.round() as i32), 4, RED);
    }
    save(&img, out)
}

/// Projects every pixel onto the three leading principal components of the
/// channel vectors, each rescaled to `[0, 1]`. `None` when the map has no
/// variance. Component signs are fixed so the largest loading is positive.
pub fn pca_project(map: &PoseMapImage) -> Result<Option<Vec<[f64; 3]>>> {
    if !map.is_finite() {
        return Err(Error::invalid("PoseMap has non-finite entries"));
    }
    let (p, c) = (map.width * map.height, map.channels);
    let mut x = DMatrix::from_row_slice(p, c, &map.data);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = x.transpose() * &x / p as f64;
    if cov.trace() <= 0.0 {
        return Ok(None);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = vec![[0.5; 3]; p];
    for (k, &j) in order.iter().take(3).enumerate() {
        let mut v = eig.eigenvectors.column(j).clone_owned();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v = -v;
        }
        let proj = &x * v;
        let (lo, hi) = proj
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &a| {
                (l.min(a), h.max(a))
            });
        if hi - lo > 1e-12 * (1.0 + hi.abs().max(lo.abs())) {
            for (o, a) in out.iter_mut().zip(proj.iter()) {
                o[k] = (a - lo) / (hi - lo);
            }
        }
    }
    Ok(Some(out))
}

/// Writes the PCA false-color image of a PoseMap, upscaled for viewing.
/// A map without variance becomes uniform gray.
pub fn posemap_pca_viz(map: &PoseMapImage, out: &Path) -> Result<PathBuf> {
    let (w, h) = (map.width as u32, map.height as u32);
    let img = match pca_project(map)? {
        None => {
            log::warn!("PoseMap has zero variance; writing a uniform gray image");
            Raster::from_pixel(w, h, Rgb([128, 128, 128]))
        }
        Some(px) => Raster::from_fn(w, h, |x, y| {
            let v = px[(y * w + x) as usize];
            Rgb(v.map(|c| (c * 255.0).round() as u8))
        }),
    };
    let big = imageops::resize(
        &img,
        w * PCA_UPSCALE,
        h * PCA_UPSCALE,
        imageops::FilterType::Nearest,
    );
    save(&big, out)
}
