use super::*;
use crate::nn::flat_f64;
use crate::se3::euler_xyz;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bounds() -> Aabb {
    Aabb {
        min: [-2.0; 3],
        max: [2.0; 3],
    }
}

fn small_config() -> FieldConfig {
    FieldConfig {
        pe_frequencies_position: 3,
        pe_frequencies_direction: 2,
        trunk_width: 16,
        trunk_depth: 2,
        feature_channels: 8,
        samples_per_ray: 8,
        near: 0.5,
        far: 3.5,
        posemap_downsample: 4,
        decoder_widths: vec![32, 16, 12],
        activation: Activation::Silu,
    }
}

fn probe_pose() -> Pose {
    Pose::look_at(Vector3::new(1.6, -0.7, 0.9), Vector3::zeros(), Vector3::z()).unwrap()
}

fn field() -> NerfP {
    let mut f = NerfP::new(small_config(), bounds(), 11).unwrap();
    f.allow_untrained_pose_branch(true);
    f
}

#[test]
fn fresh_field_is_finite_and_deterministic() {
    let f = field();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pts: Vec<f32> = (0..300).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let pts = Tensor::from_vec(pts, (100, 3), &DEVICE).unwrap();
    let dirs = crate::nn::l2_normalize(&pts, 1e-9).unwrap();
    let (s, c) = f.eval_render(&pts, &dirs, Mode::Frozen).unwrap();
    let s = flat_f64(&s).unwrap();
    let c = flat_f64(&c).unwrap();
    assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    let (s2, _) = f.eval_render(&pts, &dirs, Mode::Frozen).unwrap();
    assert_eq!(s, flat_f64(&s2).unwrap());
    let feat = flat_f64(&f.eval_pose(&pts, Mode::Frozen).unwrap()).unwrap();
    assert_eq!(feat.len(), 100 * 8);
    assert!(feat.iter().all(|v| v.is_finite()));
}

#[test]
fn untrained_pose_branch_is_refused_unless_allowed() {
    let mut f = NerfP::new(small_config(), bounds(), 1).unwrap();
    let cam = Camera::centered(8, 8, 8.0).unwrap();
    assert!(matches!(
        f.render_posemap(&cam, &probe_pose()),
        Err(Error::PoseBranchUntrained)
    ));
    assert!(f.render_nerfmap(&cam, &probe_pose()).is_ok());
    f.allow_untrained_pose_branch(true);
    let m = f.render_posemap(&cam, &probe_pose()).unwrap();
    assert_eq!((m.width, m.height, m.channels), (2, 2, 8));
    assert!(m.is_finite());
}

#[test]
fn empty_field_renders_exact_zeros() {
    let mut f = field();
    f.params_mut().scale_weight("density", 0.0).unwrap();
    f.params_mut().set_bias("density", &[-200.0]).unwrap();
    let cam = Camera::centered(8, 8, 8.0).unwrap();
    assert!(f
        .render_posemap(&cam, &probe_pose())
        .unwrap()
        .data
        .iter()
        .all(|v| *v == 0.0));
    assert!(f
        .render_nerfmap(&cam, &probe_pose())
        .unwrap()
        .data
        .iter()
        .all(|v| *v == 0.0));
    let img = f.render_image(&cam, &probe_pose()).unwrap();
    assert!(img.data.iter().all(|v| *v == 0.0));
}

#[test]
fn constant_features_in_opaque_field() {
    let mut f = field();
    let v = [0.5, -1.0, 2.0, 0.0, 0.25, 3.0, -0.75, 1.5];
    f.params_mut().scale_weight("pose.1", 0.0).unwrap();
    f.params_mut().set_bias("pose.1", &v).unwrap();
    f.params_mut().scale_weight("density", 0.0).unwrap();
    f.params_mut().set_bias("density", &[60.0]).unwrap();
    let cam = Camera::centered(8, 8, 8.0).unwrap();
    let m = f.render_posemap(&cam, &probe_pose()).unwrap();
    for y in 0..2 {
        for x in 0..2 {
            for (a, b) in m.pixel(x, y).iter().zip(v) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

/// Scalar re-evaluation of every sample, accumulated with the scalar law.
fn brute_force_posemap(f: &NerfP, cam: &Camera, pose: &Pose) -> Vec<f64> {
    let c = &f.config;
    let (gw, gh) = c.posemap_grid(cam).unwrap();
    let (t, delta) = sample_distances(c.near, c.far, c.samples_per_ray, None);
    let mut out = Vec::new();
    for (u, v) in cam.grid_coordinates(gw, gh).unwrap() {
        let d = (pose.rotation() * cam.direction(u, v)).normalize();
        let o = pose.translation();
        let pts: Vec<f64> = t
            .iter()
            .flat_map(|ti| {
                let p = o + d * *ti;
                [p[0], p[1], p[2]]
            })
            .collect();
        let pts = Tensor::from_vec(pts, (t.len(), 3), &DEVICE)
            .unwrap()
            .to_dtype(f.dtype())
            .unwrap();
        let dirs = Tensor::from_vec(vec![d[0], d[1], d[2]], (1, 3), &DEVICE)
            .unwrap()
            .to_dtype(f.dtype())
            .unwrap()
            .broadcast_as((t.len(), 3))
            .unwrap()
            .contiguous()
            .unwrap();
        let (sigma, _) = f.eval_render(&pts, &dirs, Mode::Frozen).unwrap();
        let feats = flat_f64(&f.eval_pose(&pts, Mode::Frozen).unwrap()).unwrap();
        let w = render_weights(&flat_f64(&sigma).unwrap(), &delta).unwrap();
        let ch = c.feature_channels;
        for k in 0..ch {
            out.push((0..t.len()).map(|i| w[i] * feats[i * ch + k]).sum());
        }
    }
    out
}

#[test]
fn posemap_matches_brute_force_accumulation() {
    let mut f = field();
    f.params_mut().set_bias("density", &[2.0]).unwrap();
    let cam = Camera::centered(16, 16, 14.0).unwrap();
    let m = f.render_posemap(&cam, &probe_pose()).unwrap();
    assert_eq!((m.width, m.height), (4, 4));
    let want = brute_force_posemap(&f, &cam, &probe_pose());
    let worst = m
        .data
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "max deviation {worst}");
}

#[test]
fn posemap_is_bitwise_deterministic() {
    let f = field();
    let cam = Camera::centered(16, 16, 14.0).unwrap();
    let a = f.render_posemap(&cam, &probe_pose()).unwrap();
    let b = f.render_posemap(&cam, &probe_pose()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pose_gradients_match_central_differences() {
    for seed in [5, 6, 7] {
        check_pose_gradients(seed);
    }
}

fn check_pose_gradients(seed: u64) {
    let mut f = NerfP::with_dtype(small_config(), bounds(), seed, DType::F64).unwrap();
    f.allow_untrained_pose_branch(true);
    f.params_mut().set_bias("density", &[1.5]).unwrap();
    let cam = Camera::centered(8, 8, 9.0).unwrap();
    let base = probe_pose().to_flat();
    let render = |raw: &[f64]| {
        let t = Tensor::from_slice(raw, (1, 12), &DEVICE).unwrap();
        f.render_feature_maps(&cam, &t, FeatureSource::PoseBranch, Mode::Frozen)
            .unwrap()
    };
    let var = candle_core::Var::from_tensor(&Tensor::from_slice(&base, (1, 12), &DEVICE).unwrap())
        .unwrap();
    let maps = f
        .render_feature_maps(
            &cam,
            var.as_tensor(),
            FeatureSource::PoseBranch,
            Mode::Frozen,
        )
        .unwrap();
    let (_, gh, gw, c) = maps.dims4().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for pix in 0..gh * gw {
        // one random channel mix per pixel covers every channel's gradient
        let mix: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mix_t = Tensor::from_slice(&mix, c, &DEVICE).unwrap();
        let probe = |m: &Tensor| {
            m.reshape((gh * gw, c))
                .unwrap()
                .get(pix)
                .unwrap()
                .mul(&mix_t)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        let grads = probe(&maps).backward().unwrap();
        let g = flat_f64(grads.get(&var).unwrap()).unwrap();
        let mut fd = vec![0.0; 12];
        for k in 0..12 {
            let (mut p, mut m) = (base, base);
            p[k] += 1e-4;
            m[k] -= 1e-4;
            let hi = flat_f64(&probe(&render(&p))).unwrap()[0];
            let lo = flat_f64(&probe(&render(&m))).unwrap()[0];
            fd[k] = (hi - lo) / 2e-4;
        }
        let err: f64 = g
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            err / norm.max(1e-12) < 1e-2,
            "pixel {pix}: {err} / {norm}\n{g:?}\n{fd:?}"
        );
    }
}

#[test]
fn accumulation_is_linear_in_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (r, n, c) = (5, 6, 4);
    let mut rand = |len: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(lo..hi)).collect()
    };
    let sigma = Tensor::from_vec(rand(r * n, 0.0, 3.0), (r, n), &DEVICE).unwrap();
    let delta = Tensor::from_vec(rand(r * n, 0.05, 0.3), (r, n), &DEVICE).unwrap();
    let fa = Tensor::from_vec(rand(r * n * c, -1.0, 1.0), (r, n, c), &DEVICE).unwrap();
    let fb = Tensor::from_vec(rand(r * n * c, -1.0, 1.0), (r, n, c), &DEVICE).unwrap();
    let w = weights_tensor(&sigma, &delta).unwrap();
    let (a, b) = (0.7, -2.5);
    let mixed = (fa.affine(a, 0.0).unwrap() + fb.affine(b, 0.0).unwrap()).unwrap();
    let lhs = flat_f64(&accumulate(&w, &mixed).unwrap()).unwrap();
    let ra = flat_f64(&accumulate(&w, &fa).unwrap()).unwrap();
    let rb = flat_f64(&accumulate(&w, &fb).unwrap()).unwrap();
    for i in 0..lhs.len() {
        assert!((lhs[i] - (a * ra[i] + b * rb[i])).abs() < 1e-6);
    }
}

#[test]
fn nerfmap_uses_trunk_channels() {
    let f = field();
    let cam = Camera::centered(8, 8, 8.0).unwrap();
    let n = f.render_nerfmap(&cam, &probe_pose()).unwrap();
    let p = f.render_posemap(&cam, &probe_pose()).unwrap();
    assert_eq!(n.channels, 16);
    assert_eq!(p.channels, 8);
    assert!(n.is_finite());
}

#[test]
fn cached_posemaps_match_direct_render() {
    let f = field();
    let cam = Camera::centered(16, 16, 14.0).unwrap();
    let poses = [
        probe_pose(),
        crate::se3::compose(&Pose::rot_z_deg(40.0), &probe_pose()),
    ];
    let cache = f.posemap_cache(&cam, &poses).unwrap();
    let cached = flat_f64(&f.posemap_from_cache(&cache, &[1, 0], Mode::Frozen).unwrap()).unwrap();
    let direct = f.render_posemap(&cam, &poses[1]).unwrap();
    let half = cached.len() / 2;
    for (a, b) in cached[..half].iter().zip(&direct.data) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn decoder_contract() {
    let f = field();
    let zero = PoseMapImage::zeros(2, 2, 8);
    let a = f.pose_decoder(&zero).unwrap();
    assert_eq!(a, f.pose_decoder(&zero).unwrap());
    assert!(a.iter().all(|v| v.is_finite()));
    let bad = PoseMapImage::zeros(2, 2, 5);
    assert!(matches!(
        f.pose_decoder(&bad),
        Err(Error::ChannelMismatch {
            expected: 8,
            found: 5
        })
    ));
    // with zero input and zero hidden biases only the output bias survives
    let mut g = field();
    g.params_mut().set_bias("decoder.1", &[1.0; 12]).unwrap();
    let out = g.pose_decoder(&zero).unwrap();
    assert!(out.iter().all(|v| (*v - 1.0).abs() < 1e-6));
}

#[test]
fn config_validation() {
    assert!(FieldConfig::default().validate().is_ok());
    assert_eq!(FieldConfig::paper().decoder_cells(), 6);
    assert_eq!(FieldConfig::default().decoder_cells(), 16);
    let bad = FieldConfig {
        decoder_widths: vec![64, 10],
        ..FieldConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = FieldConfig {
        near: 2.0,
        far: 1.0,
        ..FieldConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = FieldConfig {
        samples_per_ray: 1,
        ..FieldConfig::default()
    };
    assert!(bad.validate().is_err());
    let cam = Camera::centered(60, 60, 50.0).unwrap();
    assert!(FieldConfig::default().posemap_grid(&cam).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut f = field();
    f.mark(FieldStage::PoseTrained, Some("abc".into()));
    let path = dir.path().join("f.ckpt");
    f.save(&path).unwrap();
    let g = NerfP::load(&path).unwrap();
    assert_eq!(g.checksum().unwrap(), f.checksum().unwrap());
    assert_eq!(g.stage(), FieldStage::PoseTrained);
    assert_eq!(g.parent(), Some("abc"));
    assert_eq!(g.config, f.config);
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"NERFP1"));
    std::fs::write(&path, b"APRN1\nxx").unwrap();
    assert!(NerfP::load(&path).is_err());
}

#[test]
fn transmittance_monotone_and_closed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..0.5)).collect();
        let t = transmittance(&s, &d).unwrap();
        let w = render_weights(&s, &d).unwrap();
        assert_eq!(t[0], 1.0);
        assert!(t.windows(2).all(|p| p[1] <= p[0]));
        assert!((w.iter().sum::<f64>() + t[n] - 1.0).abs() < 1e-6);
        let tot: f64 = s.iter().zip(&d).map(|(a, b)| a * b).sum();
        assert!((w.iter().sum::<f64>() - (1.0 - (-tot).exp())).abs() < 1e-9);
    }
}

#[test]
fn pose_features_are_rotation_sensitive() {
    let f = field();
    let cam = Camera::centered(16, 16, 14.0).unwrap();
    let a = f.render_posemap(&cam, &probe_pose()).unwrap();
    let turned = Pose::new(
        probe_pose().rotation() * euler_xyz(0.0, 0.2, 0.0),
        *probe_pose().translation(),
    )
    .unwrap();
    let b = f.render_posemap(&cam, &turned).unwrap();
    assert!(a.l2_distance(&b) > 0.0);
}
