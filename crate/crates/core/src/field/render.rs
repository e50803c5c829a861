use candle_core::{DType, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::DEVICE;
use crate::scene::Camera;
use crate::se3::Pose;

/// Rays through a set of pixels for one or more camera poses, with their
/// sample distances. Tensors are laid out pose-major: ray `b * P + p` is
/// pixel `p` of pose `b`.
#[derive(Clone, Debug)]
pub struct RaySet {
    /// `[R, 3]` camera centers.
    pub origins: Tensor,
    /// `[R, 3]` unit directions in the world frame.
    pub directions: Tensor,
    /// `[R, N]` strictly increasing sample distances.
    pub distances: Tensor,
    /// `[R, N]` spacings, the last one closing at the far plane.
    pub deltas: Tensor,
}

impl RaySet {
    pub fn len(&self) -> usize {
        self.origins.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[R, N, 3]` sample positions `o + t d`.
    pub fn positions(&self) -> Result<Tensor> {
        let o = self.origins.unsqueeze(1)?;
        let d = self.directions.unsqueeze(1)?;
        let t = self.distances.unsqueeze(2)?;
        Ok(o.broadcast_add(&t.broadcast_mul(&d)?)?)
    }
}

/// Per-ray sample distances and spacings on `[near, far]`. Without jitter
/// the samples are the `n` bin midpoints; with jitter each sample is drawn
/// uniformly inside its bin.
pub fn sample_distances(
    near: f64,
    far: f64,
    n: usize,
    jitter: Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, Vec<f64>) {
    let bin = (far - near) / n as f64;
    let t: Vec<f64> = match jitter {
        None => (0..n).map(|i| near + (i as f64 + 0.5) * bin).collect(),
        Some(rng) => (0..n)
            .map(|i| near + (i as f64 + rng.gen_range(0.0..1.0)) * bin)
            .collect(),
    };
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(far - t[n - 1]);
    (t, delta)
}

/// Flattens a batch of poses into a `[B, 12]` tensor (row-major 3×4 each).
pub fn poses_tensor(poses: &[Pose], dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = poses.iter().flat_map(|p| p.to_flat()).collect();
    Ok(Tensor::from_vec(flat, (poses.len(), 12), &DEVICE)?.to_dtype(dtype)?)
}

/// Builds rays from raw 3×4 pose rows `[B, 12]`. The rotation block need not
/// be orthonormal: directions are renormalized, so the rays stay
/// differentiable with respect to all twelve entries.
pub fn rays_from_raw(
    camera: &Camera,
    raw: &Tensor,
    pixels: &[(f64, f64)],
    near: f64,
    far: f64,
    n_samples: usize,
    stratified: Option<u64>,
) -> Result<RaySet> {
    let dtype = raw.dtype();
    let b = raw.dims()[0];
    let p = pixels.len();
    let cam_dirs: Vec<f64> = pixels
        .iter()
        .flat_map(|&(u, v)| {
            let d = camera.direction(u, v);
            [d[0], d[1], d[2]]
        })
        .collect();
    let cam_dirs = Tensor::from_vec(cam_dirs, (1, p, 3), &DEVICE)?.to_dtype(dtype)?;
    let m = raw.reshape((b, 3, 4))?;
    let rot_t = m.narrow(2, 0, 3)?.transpose(1, 2)?;
    let trans = m.narrow(2, 3, 1)?.reshape((b, 1, 3))?;
    let dirs = cam_dirs.broadcast_matmul(&rot_t)?;
    let norm = dirs.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(1e-12)?;
    let dirs = dirs.broadcast_div(&norm)?.reshape((b * p, 3))?;
    let origins = trans.broadcast_as((b, p, 3))?.reshape((b * p, 3))?;

    let mut rng = stratified.map(ChaCha8Rng::seed_from_u64);
    let (mut ts, mut ds) = (Vec::with_capacity(b * p * n_samples), Vec::new());
    for _ in 0..b * p {
        let (t, d) = sample_distances(near, far, n_samples, rng.as_mut());
        ts.extend(t);
        ds.extend(d);
    }
    Ok(RaySet {
        origins,
        directions: dirs,
        distances: Tensor::from_vec(ts, (b * p, n_samples), &DEVICE)?.to_dtype(dtype)?,
        deltas: Tensor::from_vec(ds, (b * p, n_samples), &DEVICE)?.to_dtype(dtype)?,
    })
}

/// Rays for a single pose through a `grid_w × grid_h` pixel grid.
pub fn sample_rays(
    camera: &Camera,
    pose: &Pose,
    grid: (usize, usize),
    near: f64,
    far: f64,
    n_samples: usize,
    stratified: Option<u64>,
    dtype: DType,
) -> Result<RaySet> {
    let pixels = camera.grid_coordinates(grid.0, grid.1)?;
    let raw = poses_tensor(std::slice::from_ref(pose), dtype)?;
    rays_from_raw(camera, &raw, &pixels, near, far, n_samples, stratified)
}

/// Transmittance `T_1 … T_{N+1}` by running products, so the sequence is
/// monotone non-increasing in floating point.
pub fn transmittance(sigma: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    check_samples(sigma, delta)?;
    let mut t = Vec::with_capacity(sigma.len() + 1);
    t.push(1.0);
    for (s, d) in sigma.iter().zip(delta) {
        let last = *t.last().unwrap();
        t.push(last * (-s * d).exp());
    }
    Ok(t)
}

/// Compositing weights `w_i = T_i (1 − e^{−σ_i δ_i})`.
pub fn render_weights(sigma: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    let t = transmittance(sigma, delta)?;
    Ok(sigma
        .iter()
        .zip(delta)
        .zip(&t)
        .map(|((s, d), ti)| ti * -(-s * d).exp_m1())
        .collect())
}

fn check_samples(sigma: &[f64], delta: &[f64]) -> Result<()> {
    if sigma.len() != delta.len() {
        return Err(Error::invalid("density and spacing lengths differ"));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("negative density {s}")));
    }
    if let Some(d) = delta.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::invalid(format!("non-positive spacing {d}")));
    }
    Ok(())
}

/// `Σ w_i c_i`; no background term is added.
pub fn render_rgb(weights: &[f64], colors: &[[f64; 3]]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (w, c) in weights.iter().zip(colors) {
        for k in 0..3 {
            out[k] += w * c[k];
        }
    }
    out
}

/// Tensor form of [`render_weights`] over `[R, N]` inputs.
pub fn weights_tensor(sigma: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let tau = (sigma * delta)?;
    let before = (tau.cumsum(1)? - &tau)?;
    let trans = before.neg()?.exp()?;
    let alpha = tau.neg()?.exp()?.affine(-1.0, 1.0)?;
    Ok((trans * alpha)?)
}

/// `Σ_i w_i v_i` for weights `[R, N]` and per-sample values `[R, N, K]`.
pub fn accumulate(weights: &Tensor, values: &Tensor) -> Result<Tensor> {
    Ok(values.broadcast_mul(&weights.unsqueeze(2)?)?.sum(1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::flat_f64;
    use crate::se3::Pose;
    use nalgebra::Vector3;

    #[test]
    fn weight_law_examples() {
        assert_eq!(render_weights(&[0.0; 4], &[0.1; 4]).unwrap(), vec![0.0; 4]);
        let w = render_weights(&[20.0], &[1.0]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-8);
        let w = render_weights(&[1.0, 1.0], &[0.5, 0.5]).unwrap();
        assert!((w[0] - 0.393469).abs() < 1e-6);
        assert!((w[1] - 0.238651).abs() < 1e-6);
        assert!(render_weights(&[-1.0], &[1.0]).is_err());
        assert!(render_weights(&[1.0], &[0.0]).is_err());
        assert!(render_weights(&[1.0, 2.0], &[0.5]).is_err());
    }

    #[test]
    fn rgb_accumulation() {
        assert_eq!(render_rgb(&[0.0, 0.0], &[[1.0, 1.0, 1.0]; 2]), [0.0; 3]);
        let w = render_weights(&[1e9], &[1.0]).unwrap();
        let c = render_rgb(&w, &[[1.0, 0.0, 0.0]]);
        assert!((c[0] - 1.0).abs() < 1e-6 && c[1] == 0.0 && c[2] == 0.0);
    }

    #[test]
    fn tensor_weights_match_scalar_law() {
        let sigma = [0.0, 0.3, 2.0, 5.0, 0.1, 0.0, 7.0, 1.0];
        let delta = [0.1, 0.2, 0.05, 0.3, 0.1, 0.4, 0.2, 0.15];
        let want = render_weights(&sigma, &delta).unwrap();
        let s = Tensor::new(&[sigma], &DEVICE).unwrap();
        let d = Tensor::new(&[delta], &DEVICE).unwrap();
        let got = flat_f64(&weights_tensor(&s, &d).unwrap()).unwrap();
        for (a, b) in want.iter().zip(got) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoints_and_far_closure() {
        let (t, d) = sample_distances(1.0, 3.0, 4, None);
        assert_eq!(t, vec![1.25, 1.75, 2.25, 2.75]);
        assert_eq!(d, vec![0.5, 0.5, 0.5, 0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, d) = sample_distances(0.4, 4.0, 32, Some(&mut rng));
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert!(t[0] >= 0.4 && t[31] <= 4.0);
        assert!(d.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let cam = Camera::centered(8, 8, 10.0).unwrap();
        let raw = poses_tensor(&[Pose::identity()], DType::F64).unwrap();
        let rays = rays_from_raw(&cam, &raw, &[(4.0, 4.0)], 0.5, 2.0, 3, None).unwrap();
        assert_eq!(flat_f64(&rays.directions).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(flat_f64(&rays.distances).unwrap(), vec![0.75, 1.25, 1.75]);
    }

    #[test]
    fn rotated_pose_rotates_directions() {
        let cam = Camera::centered(8, 8, 6.0).unwrap();
        let base = sample_rays(
            &cam,
            &Pose::identity(),
            (4, 4),
            0.5,
            2.0,
            2,
            None,
            DType::F64,
        )
        .unwrap();
        let rz = Pose::rot_z_deg(90.0);
        let rot = sample_rays(&cam, &rz, (4, 4), 0.5, 2.0, 2, None, DType::F64).unwrap();
        let a = flat_f64(&base.directions).unwrap();
        let b = flat_f64(&rot.directions).unwrap();
        for (da, db) in a.chunks(3).zip(b.chunks(3)) {
            let want = rz.rotation() * Vector3::new(da[0], da[1], da[2]);
            for k in 0..3 {
                assert!((want[k] - db[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn positions_follow_rays() {
        let cam = Camera::centered(4, 4, 4.0).unwrap();
        let pose = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let rays = sample_rays(&cam, &pose, (2, 2), 1.0, 2.0, 2, Some(3), DType::F64).unwrap();
        let p = flat_f64(&rays.positions().unwrap()).unwrap();
        let d = flat_f64(&rays.directions).unwrap();
        let t = flat_f64(&rays.distances).unwrap();
        for r in 0..4 {
            for s in 0..2 {
                for k in 0..3 {
                    let want = [1.0, 2.0, 3.0][k] + t[r * 2 + s] * d[r * 3 + k];
                    assert!((p[(r * 2 + s) * 3 + k] - want).abs() < 1e-12);
                }
            }
        }
    }
}
