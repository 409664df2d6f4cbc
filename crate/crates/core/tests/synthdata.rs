mod common;

use std::f64::consts::{FRAC_PI_4, PI};

use mvedit::camera::{orbit_camera, rig_from_azimuths, CameraIntrinsics};
use mvedit::geom;
use mvedit::synthdata::*;

fn intr() -> CameraIntrinsics {
    CameraIntrinsics::framing(32, 48, 1.0, 3.0).unwrap()
}

fn small() -> SynthConfig {
    SynthConfig { width: 32, height: 48, ..SynthConfig::default() }
}

#[test]
fn scenes_are_seeded() {
    for kind in TextureKind::ALL {
        assert_eq!(make_scene(3, kind).unwrap(), make_scene(3, kind).unwrap());
        assert_ne!(make_scene(3, kind).unwrap(), make_scene(4, kind).unwrap());
    }
    let mut s = make_scene(1, TextureKind::Checker).unwrap();
    s.band_hi = s.band_lo - 0.1;
    assert!(s.validate().is_err());
}

#[test]
fn stripes_have_eight_periods() {
    let t = Texture::Stripes { period: FRAC_PI_4, phase: 0.0, colors: [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]] };
    let n = 8000;
    let colors: Vec<_> = (0..n).map(|i| t.color(-PI + 2.0 * PI * (i as f64 + 0.5) / n as f64, 0.0, 0.3)).collect();
    let changes = (0..n).filter(|&i| colors[i] != colors[(i + 1) % n]).count();
    assert_eq!(changes, 16);
}

#[test]
fn logo_patch_placement() {
    let logo = [1.0, 1.0, 0.0];
    let t = Texture::LogoPatch { base: [0.0; 3], logo, azimuth: 0.3, height: 0.1, size: 0.2 };
    let r = 0.3;
    assert_eq!(t.color(0.3, 0.1, r), logo);
    assert_eq!(t.color(0.3 + 0.099 / r, 0.199, r), logo);
    assert_eq!(t.color(0.3 + 0.101 / r, 0.1, r), [0.0; 3]);
    assert_eq!(t.color(0.3, 0.201, r), [0.0; 3]);
    assert_eq!(t.color(0.3 + PI, 0.1, r), [0.0; 3]);
}

#[test]
fn equator_normal_faces_camera() {
    let scene = make_scene(2, TextureKind::Stripes).unwrap();
    let cam = orbit_camera(CameraIntrinsics::new(60.0, 60.0, 16.0, 24.0, 33, 49).unwrap(), 0.7, 3.0, 0.0).unwrap();
    let views = render_views(&scene, &[cam], &RenderConfig::default());
    let n = views[0].normal.pixel(16, 24);
    // camera-space normal is (0, 0, −1) → encoded (0.5, 0.5, 0)
    assert!((n[0] - 0.5).abs() < 1e-9 && (n[1] - 0.5).abs() < 1e-9 && n[2].abs() < 1e-9, "{n:?}");
}

#[test]
fn masks_and_normals() {
    let scene = make_scene(5, TextureKind::Checker).unwrap();
    let rig = rig_from_azimuths(intr(), &[0.0, 1.0, 2.5, 4.0], 3.0, 0.1).unwrap();
    let views = render_scene(&scene, &rig, &RenderConfig::default()).unwrap();
    for v in &views.views {
        let mut band = 0usize;
        let mut body = 0usize;
        for y in 0..48 {
            for x in 0..32 {
                let a = v.agnostic_mask.get(x, y, 0);
                let f = v.face_mask.get(x, y, 0);
                assert!(a == 0.0 || a == 1.0);
                assert!(!(a == 1.0 && f == 1.0));
                if v.body_mask.get(x, y, 0) == 1.0 {
                    body += 1;
                    band += (a == 1.0) as usize;
                    let n: Vec<f64> = v.normal.pixel(x, y).iter().map(|c| 2.0 * c - 1.0).collect();
                    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                    assert!((len - 1.0).abs() < 1e-6);
                } else {
                    assert_eq!(v.rgb.pixel(x, y), &[0.0; 3]);
                }
                if a == 1.0 {
                    assert_eq!(v.agnostic.pixel(x, y), &[0.5; 3]);
                } else {
                    assert_eq!(v.agnostic.pixel(x, y), v.rgb.pixel(x, y));
                }
            }
        }
        assert!(band > 0 && band < body);
    }
}

#[test]
fn normals_rotate_with_the_camera() {
    let scene = make_scene(9, TextureKind::Stripes).unwrap();
    let rig = rig_from_azimuths(intr(), &[0.2, 0.9], 3.0, 0.0).unwrap();
    let cams = rig.cameras();
    let views = render_views(&scene, cams, &RenderConfig::default());
    let mut checked = 0;
    for y in (0..48).step_by(3) {
        for x in (0..32).step_by(3) {
            if views[0].body_mask.get(x, y, 0) == 0.0 {
                continue;
            }
            // surface point seen by view 0, found analytically along the ray
            let o = cams[0].extrinsics.center();
            let d = cams[0].ray_direction(x as f64, y as f64);
            let mut t = 0.0;
            for _ in 0..500 {
                let s = scene.sdf(geom::add(o, geom::scale(d, t)));
                if s < 1e-12 {
                    break;
                }
                t += s;
            }
            let p = geom::add(o, geom::scale(d, t));
            let n0: Vec<f64> = views[0].normal.pixel(x, y).iter().map(|c| 2.0 * c - 1.0).collect();
            let world = geom::mat_t_vec(cams[0].extrinsics.rotation(), [n0[0], n0[1], n0[2]]);
            let expect = geom::mat_vec(cams[1].extrinsics.rotation(), world);
            let direct = geom::mat_vec(cams[1].extrinsics.rotation(), scene.normal(p));
            for k in 0..3 {
                assert!((expect[k] - direct[k]).abs() < 1e-9);
            }
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn garment_image_examples() {
    let mut scene = make_scene(1, TextureKind::Stripes).unwrap();
    scene.texture = Texture::Stripes { period: FRAC_PI_4, phase: 0.1, colors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] };
    let g = garment_images(&scene, 40, 20).unwrap();
    assert_eq!(g.front, g.back);

    // stripe boundaries land where the azimuth oracle says they should
    let r = scene.radius;
    for u in 0..40 {
        let s = r * (1.0 - 2.0 * u as f64 / 39.0);
        let az = s.atan2((r * r - s * s).max(0.0).sqrt());
        let f = ((az - 0.1) / FRAC_PI_4).rem_euclid(1.0);
        let want = if f < 0.5 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        assert_eq!(g.front.pixel(u, 10), &want);
    }

    let logo = [1.0, 1.0, 0.0];
    scene.texture = Texture::LogoPatch {
        base: [0.0; 3],
        logo,
        azimuth: 0.0,
        height: (scene.band_lo + scene.band_hi) / 2.0,
        size: 0.2,
    };
    let g = garment_images(&scene, 40, 20).unwrap();
    let has_logo = |img: &mvedit::image::Image| (0..20).any(|v| (0..40).any(|u| img.pixel(u, v) == logo));
    assert!(has_logo(&g.front));
    assert!(!has_logo(&g.back));
}

#[test]
fn dataset_targets_differ_only_in_the_band() {
    let data = make_dataset(3, 4, 17, &small()).unwrap();
    assert_eq!(data, make_dataset(3, 4, 17, &small()).unwrap());
    assert!(make_dataset(0, 4, 17, &small()).is_err());
    for item in &data {
        assert_ne!(item.meta.scene.texture.kind(), item.meta.target_texture.kind());
        for (v, t) in item.views.views.iter().zip(&item.target_rgb) {
            for y in 0..48 {
                for x in 0..32 {
                    if v.agnostic_mask.get(x, y, 0) == 0.0 {
                        assert_eq!(v.rgb.pixel(x, y), t.pixel(x, y));
                    }
                }
            }
        }
    }
}

#[test]
fn dataset_disk_round_trip() {
    let data = make_dataset(2, 3, 1, &small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.views.rig, b.views.rig);
        for (va, vb) in a.views.views.iter().zip(&b.views.views) {
            assert_eq!(va.agnostic_mask, vb.agnostic_mask);
            assert_eq!(va.face_mask, vb.face_mask);
            assert_eq!(va.body_mask, vb.body_mask);
            assert!(va.rgb.data().iter().zip(vb.rgb.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }
    let names: Vec<_> = std::fs::read_dir(dir.path().join("subject_0000")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    for f in ["view_000_rgb.ppm", "view_002_face.ppm", "view_001_mask.ppm", "garment_f.ppm", "rig.json", "meta.json", "target_view_000_rgb.ppm"] {
        assert!(names.iter().any(|n| n == f), "missing {f}");
    }
}
