mod common;

use common::*;
use mvedit::camera::{uniform_rig, Camera, CameraExtrinsics, CameraIntrinsics};
use mvedit::geom::{self, IDENTITY3};
use mvedit::image::Image;
use mvedit::splat::*;
use rand::Rng;

fn axis_camera(w: usize, h: usize, f: f64) -> Camera {
    Camera {
        intrinsics: CameraIntrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
        extrinsics: CameraExtrinsics::new(IDENTITY3, [0.0; 3]).unwrap(),
    }
}

fn close3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3], tol: f64) -> bool {
    (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() < tol))
}

#[test]
fn covariance_examples() {
    let c = covariance_from_scale_rot([1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(close3(&c, &[[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 9.0]], 1e-15));
    let mut r = rng(1);
    for _ in 0..20 {
        let c = covariance_from_scale_rot([0.7; 3], random_quat(&mut r)).unwrap();
        assert!(close3(&c, &[[0.49, 0.0, 0.0], [0.0, 0.49, 0.0], [0.0, 0.0, 0.49]], 1e-14));
    }
    let h = std::f64::consts::FRAC_PI_4;
    let c = covariance_from_scale_rot([1.0, 2.0, 1.0], [h.cos(), 0.0, 0.0, h.sin()]).unwrap();
    assert!(close3(&c, &[[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1e-14));
    // oracle: axis-angle rotation product
    for _ in 0..20 {
        let q = random_quat(&mut r);
        let s = [0.3, 0.5, 1.1];
        let rot = quat_rotation(q);
        let mut want = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                want[i][j] = (0..3).map(|k| rot[i][k] * s[k] * s[k] * rot[j][k]).sum();
            }
        }
        assert!(close3(&covariance_from_scale_rot(s, q).unwrap(), &want, 1e-12));
    }
}

#[test]
fn projection_examples() {
    let cam = axis_camera(128, 128, 100.0);
    let cfg = SplatConfig::default();
    let g = Gaussian::isotropic([0.0, 0.0, 5.0], 0.2, 1.0, [1.0, 0.0, 0.0]).unwrap();
    let p = project_gaussian(&g, &cam, &cfg).unwrap().unwrap();
    assert_eq!(p.mu2d, [64.0, 64.0]);
    let want = (100.0 * 0.2 / 5.0_f64).powi(2) + cfg.lambda_blur;
    assert!((p.sigma2d[0] - want).abs() < 1e-12);
    assert!((p.sigma2d[2] - want).abs() < 1e-12);
    assert!(p.sigma2d[1].abs() < 1e-12);
    assert_eq!(p.depth, 5.0);
    for z in [cfg.near, 0.0, -1.0] {
        let g = Gaussian::isotropic([0.0, 0.0, z], 0.2, 1.0, [1.0; 3]).unwrap();
        assert!(project_gaussian(&g, &cam, &cfg).unwrap().is_none());
    }
}

#[test]
fn render_examples() {
    let cam = axis_camera(16, 16, 20.0);
    let cfg = SplatConfig::default();
    let out = render(&GaussianCloud::default(), &cam, &cfg).unwrap();
    assert!(out.image.data().iter().all(|v| *v == 0.0));
    assert!(out.alpha.data().iter().all(|v| *v == 0.0));

    let cloud = GaussianCloud::new(vec![Gaussian::isotropic([0.0, 0.0, 4.0], 0.3, 1.0, [1.0, 0.0, 0.0]).unwrap()]).unwrap();
    let out = render(&cloud, &cam, &cfg).unwrap();
    assert_eq!(out.image.pixel(8, 8), &[1.0, 0.0, 0.0]);
    assert_eq!(out.alpha.get(8, 8, 0), 1.0);
}

#[test]
fn render_matches_brute_force() {
    let mut r = rng(7);
    let cfg = SplatConfig::default();
    for _ in 0..20 {
        let cloud = random_cloud(&mut r, 5, 0.6);
        let cam = random_camera(&mut r, 32, 32);
        let out = render(&cloud, &cam, &cfg).unwrap();
        let (img, alpha) = brute_force_render(&cloud, &cam, cfg.lambda_blur, cfg.near);
        assert!(out.image.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(out.alpha.data().iter().zip(alpha.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}

#[test]
fn permutation_and_rigid_motion_invariance() {
    let mut r = rng(11);
    let cfg = SplatConfig::default();
    for _ in 0..10 {
        let cloud = random_cloud(&mut r, 8, 0.6);
        let cam = random_camera(&mut r, 24, 24);
        let base = render(&cloud, &cam, &cfg).unwrap();

        let mut shuffled = cloud.clone();
        shuffled.gaussians.reverse();
        shuffled.gaussians.rotate_left(3);
        assert_eq!(render(&shuffled, &cam, &cfg).unwrap(), base);

        let q = random_quat(&mut r);
        let rot = geom::quat_to_mat(q);
        let moved = GaussianCloud::new(
            cloud
                .gaussians
                .iter()
                .map(|g| {
                    let mut h = *g;
                    h.mu = geom::mat_vec(&rot, g.mu);
                    h.quat = geom::quat_mul(q, g.quat);
                    h
                })
                .collect(),
        )
        .unwrap();
        let r_cam = geom::mat_mul(cam.extrinsics.rotation(), &geom::transpose(&rot));
        let cam2 = Camera {
            intrinsics: cam.intrinsics,
            extrinsics: CameraExtrinsics::new(r_cam, cam.extrinsics.translation()).unwrap(),
        };
        let out = render(&moved, &cam2, &cfg).unwrap();
        assert!(out.image.data().iter().zip(base.image.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}

fn loss_of(cloud: &GaussianCloud, cam: &Camera, cfg: &SplatConfig, up: &Image, up_a: &Image) -> f64 {
    let out = render(cloud, cam, cfg).unwrap();
    let a: f64 = out.image.data().iter().zip(up.data()).map(|(x, y)| x * y).sum();
    let b: f64 = out.alpha.data().iter().zip(up_a.data()).map(|(x, y)| x * y).sum();
    a + b
}

#[test]
fn render_grad_matches_finite_differences() {
    let mut r = rng(21);
    let cfg = SplatConfig::default();
    for _ in 0..3 {
        let cloud = random_cloud(&mut r, 2, 0.3);
        let cam = random_camera(&mut r, 16, 16);
        let up = Image::from_vec(16, 16, 3, (0..768).map(|_| r.random::<f64>() - 0.5).collect()).unwrap();
        let up_a = Image::from_vec(16, 16, 1, (0..256).map(|_| r.random::<f64>() - 0.5).collect()).unwrap();
        let grads = render_grad(&cloud, &cam, &cfg, &up, Some(&up_a)).unwrap();
        let h = 1e-5;
        for (gi, g) in grads.iter().enumerate() {
            let analytic = g.to_params();
            let mut numeric = [0.0; PARAMS_PER_GAUSSIAN];
            for k in 0..PARAMS_PER_GAUSSIAN {
                let perturb = |d: f64| {
                    let mut c = cloud.clone();
                    let mut p = c.gaussians[gi].to_params();
                    p[k] += d;
                    c.gaussians[gi] = Gaussian::from_params(&p);
                    c
                };
                numeric[k] = (loss_of(&perturb(h), &cam, &cfg, &up, &up_a)
                    - loss_of(&perturb(-h), &cam, &cfg, &up, &up_a))
                    / (2.0 * h);
            }
            for (name, range) in [("mu", 0..3), ("scale", 3..6), ("quat", 6..10), ("opacity", 10..11), ("color", 11..14)] {
                let diff: f64 = range.clone().map(|k| (analytic[k] - numeric[k]).powi(2)).sum::<f64>().sqrt();
                let scale: f64 = range.clone().map(|k| numeric[k].powi(2)).sum::<f64>().sqrt();
                assert!(diff <= 1e-3 * scale.max(1e-6), "{name}: {:?} vs {:?}", &analytic[range.clone()], &numeric[range]);
            }
        }
    }
}

#[test]
fn render_grad_trivial_cases() {
    let mut r = rng(3);
    let cfg = SplatConfig::default();
    let cloud = random_cloud(&mut r, 4, 0.4);
    let cam = random_camera(&mut r, 16, 16);
    let grads = render_grad(&cloud, &cam, &cfg, &Image::new(16, 16, 3), None).unwrap();
    assert!(grads.iter().all(|g| g.to_params().iter().all(|v| *v == 0.0)));

    // an opaque, effectively infinite front Gaussian hides everything behind it
    let cam = axis_camera(16, 16, 20.0);
    let front = Gaussian::isotropic([0.0, 0.0, 2.0], 1e9, 1.0, [0.2, 0.3, 0.4]).unwrap();
    let back = Gaussian::isotropic([0.0, 0.0, 4.0], 0.3, 0.8, [1.0, 0.0, 0.0]).unwrap();
    let cloud = GaussianCloud::new(vec![back, front]).unwrap();
    let grads = render_grad(&cloud, &cam, &cfg, &Image::filled(16, 16, 3, 1.0), None).unwrap();
    assert_eq!(grads[0].color, [0.0; 3]);
}

#[test]
fn fused_render_and_grad_match_separate_calls() {
    let mut r = rng(17);
    let cfg = SplatConfig::default();
    for _ in 0..10 {
        let cloud = random_cloud(&mut r, 12, 0.4);
        let cam = random_camera(&mut r, 20, 14);
        let up = Image::from_vec(20, 14, 3, (0..840).map(|_| r.random::<f64>() - 0.5).collect()).unwrap();
        let (out, grads) = render_with_grad(&cloud, &cam, &cfg, |_| Ok(up.clone())).unwrap();
        assert_eq!(out, render(&cloud, &cam, &cfg).unwrap());
        assert_eq!(grads, render_grad(&cloud, &cam, &cfg, &up, None).unwrap());
    }
    let cloud = random_cloud(&mut r, 3, 0.4);
    let cam = random_camera(&mut r, 8, 8);
    let wrong = render_with_grad(&cloud, &cam, &cfg, |_| Ok(Image::new(4, 4, 3)));
    assert!(wrong.is_err());
}

#[test]
fn cloud_file_round_trip() {
    let mut r = rng(4);
    let cloud = random_cloud(&mut r, 6, 1.0);
    let bytes = encode_cloud(&cloud);
    assert_eq!(&bytes[..4], b"GSPL");
    assert_eq!(bytes.len(), 16 + 6 * 14 * 8);
    assert_eq!(decode_cloud(&bytes).unwrap(), cloud);
    assert!(decode_cloud(&bytes[..bytes.len() - 8]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.gspl");
    save_cloud(&path, &cloud).unwrap();
    assert_eq!(load_cloud(&path).unwrap(), cloud);
}

fn eight_gaussian_scene() -> (GaussianCloud, Vec<(Image, Camera)>) {
    let mut r = rng(8);
    let cloud = random_cloud(&mut r, 8, 0.5);
    let intr = CameraIntrinsics::framing(32, 32, 1.2, 3.0).unwrap();
    let rig = uniform_rig(intr, 8, 3.0, 0.2).unwrap();
    let cfg = SplatConfig::default();
    let views = rig
        .cameras()
        .iter()
        .map(|c| (render(&cloud, c, &cfg).unwrap().image, *c))
        .collect();
    (cloud, views)
}

#[test]
fn fit_trivial_cases() {
    let (cloud, views) = eight_gaussian_scene();
    let cfg = FitConfig { iters: 5, lr: 0.0, ..FitConfig::default() };
    let res = fit_cloud(&views, &cloud, &cfg).unwrap();
    assert_eq!(res.cloud, cloud);
    assert!(res.view_losses.iter().all(|l| *l < 1e-10));
    let cfg = FitConfig { iters: 5, lr: 1e-3, ..FitConfig::default() };
    let res = fit_cloud(&views, &cloud, &cfg).unwrap();
    assert!(res.trace[0] < 1e-10);
    for (a, b) in res.cloud.gaussians.iter().zip(&cloud.gaussians) {
        assert!(geom::norm(geom::sub(a.mu, b.mu)) < 0.02);
    }
    assert!(fit_cloud(&[], &cloud, &cfg).is_err());
    assert!(fit_cloud(&views[..1], &cloud, &cfg).is_err());
}

#[test]
fn fit_recovers_known_cloud() {
    let (cloud, views) = eight_gaussian_scene();
    let mut r = rng(99);
    let init = GaussianCloud::new(
        cloud
            .gaussians
            .iter()
            .map(|g| {
                let mut h = *g;
                for k in 0..3 {
                    h.mu[k] += (r.random::<f64>() - 0.5) * 0.2;
                    h.scale[k] *= 1.3;
                }
                h.color = [0.5; 3];
                h.opacity = 0.5;
                h
            })
            .collect(),
    )
    .unwrap();
    let cfg = FitConfig { iters: 600, lr: 0.01, ..FitConfig::default() };
    let res = fit_cloud(&views, &init, &cfg).unwrap();
    let mean = res.view_losses.iter().sum::<f64>() / res.view_losses.len() as f64;
    assert!(mean < 1e-3, "mean loss {mean}");
}
