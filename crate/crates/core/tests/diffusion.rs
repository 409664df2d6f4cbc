use std::collections::BTreeMap;

use mvedit::camera::{uniform_rig, CameraIntrinsics, CorrelationMatrix};
use mvedit::diffusion::*;
use mvedit::image::Image;
use mvedit::tensor::Mat;
use mvedit::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config(timesteps: usize) -> DenoiserConfig {
    DenoiserConfig {
        patch: 1,
        image_channels: 3,
        latent_height: 4,
        latent_width: 4,
        width: 6,
        head_dim: 4,
        blocks: 1,
        mlp_hidden: 5,
        frequencies: 2,
        timesteps,
        correlation: CorrelationMode::Rotation,
    }
}

fn random_latent(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> LatentImage {
    let data = (0..c * h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    LatentImage::from_token_data(h, w, c, data).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn bundle(cfg: &DenoiserConfig, m: usize, seed: u64) -> ConditioningBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = cfg.image_size();
    let intr = CameraIntrinsics::framing(w, h, 1.0, 2.0).unwrap();
    let rig = uniform_rig(intr, m, 2.0, 0.0).unwrap();
    let ae = ToyAutoencoder::new(cfg.patch).unwrap();
    let imgs = |rng: &mut ChaCha8Rng| (0..m).map(|_| random_image(rng, w, h)).collect::<Vec<_>>();
    let normals = imgs(&mut rng);
    let agnostic = imgs(&mut rng);
    let gf = random_image(&mut rng, w, h);
    let gb = random_image(&mut rng, w, h);
    ConditioningBundle::from_images(&ae, &gf, &gb, &normals, &agnostic, &rig, cfg.frequencies, cfg.correlation)
        .unwrap()
}

#[test]
fn schedule_is_variance_preserving_and_monotone() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    for t in 0..1000 {
        assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-9);
        if t > 0 {
            assert!(s.alpha(t) < s.alpha(t - 1));
            assert!(s.sigma(t) > s.sigma(t - 1));
        }
    }
}

#[test]
fn forward_noising_examples() {
    let z0 = LatentImage::filled(2, 2, 3, 1.0);
    let eps = LatentImage::filled(2, 2, 3, 1.0);
    let s = NoiseSchedule::from_coefficients(vec![1.0, 0.8, 0.0], vec![0.0, 0.6, 1.0]).unwrap();
    assert_eq!(forward_noising(&z0, 0, &eps, &s).unwrap(), z0);
    let z = forward_noising(&z0, 1, &eps, &s).unwrap();
    assert!(z.tokens().data().iter().all(|v| (v - 1.4).abs() < 1e-12));
    let e2 = LatentImage::filled(2, 2, 3, -0.5);
    assert_eq!(forward_noising(&z0, 2, &e2, &s).unwrap(), e2);
    assert!(matches!(
        forward_noising(&z0, 3, &eps, &s),
        Err(Error::TimestepOutOfRange { .. })
    ));
}

struct ZeroModel;

impl NoisePredictor for ZeroModel {
    fn predict_noise(&self, z: &[LatentImage], _t: usize, _c: &ConditioningBundle) -> mvedit::Result<Vec<LatentImage>> {
        Ok(z.iter().map(|l| {
            let (c, h, w) = l.dims();
            LatentImage::zeros(h, w, c)
        }).collect())
    }
}

/// Knows the clean latents, so recovers the exact noise from any `z_t`.
struct Oracle {
    z0: Vec<LatentImage>,
    schedule: NoiseSchedule,
}

impl NoisePredictor for Oracle {
    fn predict_noise(&self, z: &[LatentImage], t: usize, _c: &ConditioningBundle) -> mvedit::Result<Vec<LatentImage>> {
        let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
        Ok(z.iter()
            .zip(&self.z0)
            .map(|(zt, z0)| {
                let (c, h, w) = zt.dims();
                let data = zt
                    .tokens()
                    .data()
                    .iter()
                    .zip(z0.tokens().data())
                    .map(|(zt, z0)| (zt - a * z0) / s)
                    .collect();
                LatentImage::from_token_data(h, w, c, data).unwrap()
            })
            .collect())
    }
}

#[test]
fn ldm_loss_examples() {
    let cfg = tiny_config(20);
    let cond = bundle(&cfg, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z0: Vec<_> = (0..2).map(|_| random_latent(&mut rng, 3, 4, 4)).collect();
    let schedule = NoiseSchedule::cosine(20).unwrap();
    let ones = vec![LatentImage::filled(4, 4, 3, 1.0); 2];
    let item = LossItem { cond: cond.clone(), z0: z0.clone(), eps: ones, t: 7 };
    assert_eq!(ldm_loss(&ZeroModel, &schedule, &[item]).unwrap(), 1.0);

    let eps: Vec<_> = (0..2).map(|_| random_latent(&mut rng, 3, 4, 4)).collect();
    let oracle = Oracle { z0: z0.clone(), schedule: schedule.clone() };
    let item = LossItem { cond: cond.clone(), z0: z0.clone(), eps: eps.clone(), t: 11 };
    assert!(ldm_loss(&oracle, &schedule, &[item.clone()]).unwrap() < 1e-20);

    // scalar recomputation for the real model
    let model = ToyDenoiser::init(cfg, 3).unwrap();
    let z_t: Vec<_> = z0.iter().zip(&eps).map(|(z, e)| forward_noising(z, 11, e, &schedule).unwrap()).collect();
    let pred = model.predict_noise(&z_t, 11, &cond).unwrap();
    let mut sum = 0.0;
    let mut n = 0.0;
    for v in 0..2 {
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let d = pred[v].get(c, y, x) - eps[v].get(c, y, x);
                    sum += d * d;
                    n += 1.0;
                }
            }
        }
    }
    let loss = ldm_loss(&model, &schedule, &[item.clone()]).unwrap();
    assert!((loss - sum / n).abs() < 1e-12);
    let (tape_loss, _) = model.loss_and_grads(&[item]).unwrap();
    assert!((tape_loss - loss).abs() < 1e-12);
}

#[test]
fn ldm_loss_rejects_shape_mismatch() {
    let cfg = tiny_config(10);
    let cond = bundle(&cfg, 2, 1);
    let schedule = NoiseSchedule::cosine(10).unwrap();
    let item = LossItem {
        cond,
        z0: vec![LatentImage::zeros(4, 4, 3); 2],
        eps: vec![LatentImage::zeros(4, 4, 3)],
        t: 0,
    };
    assert!(ldm_loss(&ZeroModel, &schedule, &[item]).is_err());
}

#[test]
fn denoiser_preserves_latent_shape_and_is_deterministic() {
    let cfg = tiny_config(10);
    let cond = bundle(&cfg, 3, 2);
    let model = ToyDenoiser::init(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z: Vec<_> = (0..3).map(|_| random_latent(&mut rng, 3, 4, 4)).collect();
    let a = model.predict_noise(&z, 4, &cond).unwrap();
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|l| l.dims() == (3, 4, 4) && l.is_finite()));
    assert_eq!(a, model.predict_noise(&z, 4, &cond).unwrap());
    assert!(model.predict_noise(&z[..2], 4, &cond).is_err());
    assert!(model.predict_noise(&z, 10, &cond).is_err());
}

#[test]
fn ldm_loss_gradient_matches_finite_differences() {
    let cfg = tiny_config(10);
    let cond = bundle(&cfg, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let z0: Vec<_> = (0..2).map(|_| random_latent(&mut rng, 3, 4, 4)).collect();
    let eps: Vec<_> = (0..2).map(|_| random_latent(&mut rng, 3, 4, 4)).collect();
    let item = LossItem { cond, z0, eps, t: 6 };
    let model = ToyDenoiser::init(cfg, 8).unwrap();
    let (_, grads) = model.loss_and_grads(std::slice::from_ref(&item)).unwrap();
    let h = 1e-5;
    let schedule = model.schedule().clone();
    for (name, g) in &grads {
        let mut num = Mat::zeros(g.rows(), g.cols());
        for i in 0..g.data().len() {
            let mut plus = model.clone();
            plus.params_mut().get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(name).unwrap().data_mut()[i] -= h;
            let lp = ldm_loss(&plus, &schedule, std::slice::from_ref(&item)).unwrap();
            let lm = ldm_loss(&minus, &schedule, std::slice::from_ref(&item)).unwrap();
            num.data_mut()[i] = (lp - lm) / (2.0 * h);
        }
        let diff = g.sub(&num).unwrap().sum_sq().sqrt();
        let scale = g.sum_sq().sqrt().max(num.sum_sq().sqrt());
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        assert!(rel < 1e-3, "{name}: relative error {rel:e}");
    }
}

#[test]
fn ddim_oracle_recovers_z0() {
    let cfg = tiny_config(50);
    let cond = bundle(&cfg, 2, 6);
    let schedule = NoiseSchedule::cosine(50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0: Vec<_> = (0..2).map(|_| random_latent(&mut rng, 3, 4, 4)).collect();
    let oracle = Oracle { z0: z0.clone(), schedule: schedule.clone() };
    for steps in [1, 5, 50] {
        let out = ddim_sample(&oracle, &schedule, &cond, steps, 11, &[0, 1]).unwrap();
        for (a, b) in out.iter().zip(&z0) {
            assert!(a.tokens().max_abs_diff(b.tokens()) < 1e-6, "steps {steps}");
        }
    }
    assert!(ddim_sample(&oracle, &schedule, &cond, 51, 11, &[0, 1]).is_err());
    assert!(ddim_sample(&oracle, &schedule, &cond, 0, 11, &[0, 1]).is_err());
}

#[test]
fn ddim_single_step_is_one_x0_jump() {
    let cfg = tiny_config(10);
    let cond = bundle(&cfg, 2, 6);
    let model = ToyDenoiser::init(cfg, 1).unwrap();
    let schedule = model.schedule().clone();
    let out = ddim_sample(&model, &schedule, &cond, 1, 4, &[0, 1]).unwrap();
    let z_t: Vec<_> = (0..2).map(|i| initial_noise((3, 4, 4), 4, i)).collect();
    let eps = model.predict_noise(&z_t, 9, &cond).unwrap();
    let (a, s) = (schedule.alpha(9), schedule.sigma(9));
    for v in 0..2 {
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = (z_t[v].get(c, y, x) - s * eps[v].get(c, y, x)) / a;
                    assert!((out[v].get(c, y, x) - want).abs() < 1e-12);
                }
            }
        }
    }
    assert_eq!(out, ddim_sample(&model, &schedule, &cond, 1, 4, &[0, 1]).unwrap());
}

#[test]
fn identity_correlation_still_shares_softmax_mass() {
    // Under the multiplicative modulation a zero weight yields a zero logit,
    // not an excluded key, so views remain coupled even with C = I.
    let cfg = DenoiserConfig { correlation: CorrelationMode::Identity, ..tiny_config(10) };
    let mut cond = bundle(&cfg, 2, 3);
    cond.correlation = CorrelationMatrix::identity(2);
    let model = ToyDenoiser::init(cfg, 2).unwrap();
    let joint = ddim_sample(&model, model.schedule(), &cond, 3, 1, &[0, 1]).unwrap();
    let alone = cond.select(&[0], CorrelationMatrix::identity(1)).unwrap();
    let single = ddim_sample(&model, model.schedule(), &alone, 3, 1, &[0]).unwrap();
    assert!(joint[0].tokens().max_abs_diff(single[0].tokens()) > 0.0);
}

#[test]
fn encode_pose_examples() {
    let ae = ToyAutoencoder::new(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let weight = Mat::from_fn(12, 12, |_, _| rng.random::<f64>() - 0.5);
    let zero = PoseEncoderParams { weight: weight.clone(), bias: vec![0.0; 12] };
    let z = encode_pose(&Image::new(4, 6, 3), &ae, &zero).unwrap();
    assert_eq!(z.dims(), (12, 3, 2));
    assert!(z.tokens().data().iter().all(|v| *v == 0.0));

    let bias: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
    let params = PoseEncoderParams { weight, bias };
    let c = encode_pose(&Image::filled(4, 6, 3, 0.7), &ae, &params).unwrap();
    for ch in 0..12 {
        let v = c.get(ch, 0, 0);
        for y in 0..3 {
            for x in 0..2 {
                assert_eq!(c.get(ch, y, x), v);
            }
        }
    }

    let img = random_image(&mut rng, 4, 6);
    let out = encode_pose(&img, &ae, &params).unwrap();
    for y in 0..3 {
        for x in 0..2 {
            for o in 0..12 {
                let mut acc = params.bias[o];
                for dy in 0..2 {
                    for dx in 0..2 {
                        for k in 0..3 {
                            let i = (dy * 2 + dx) * 3 + k;
                            acc += img.get(2 * x + dx, 2 * y + dy, k) * params.weight.get(i, o);
                        }
                    }
                }
                assert!((out.get(o, y, x) - acc).abs() < 1e-12);
            }
        }
    }
    assert!(encode_pose(&Image::new(3, 4, 3), &ae, &params).is_err());
}

fn tiny_subjects(cfg: &DenoiserConfig, count: usize, views: usize) -> Vec<TrainingSubject> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (w, h) = cfg.image_size();
    let intr = CameraIntrinsics::framing(w, h, 1.0, 2.0).unwrap();
    (0..count)
        .map(|_| {
            let imgs = |rng: &mut ChaCha8Rng| (0..views).map(|_| random_image(rng, w, h)).collect::<Vec<_>>();
            TrainingSubject {
                rig: uniform_rig(intr, views, 2.0, 0.0).unwrap(),
                garment_front: random_image(&mut rng, w, h),
                garment_back: random_image(&mut rng, w, h),
                normals: imgs(&mut rng),
                agnostic: imgs(&mut rng),
                targets: imgs(&mut rng),
            }
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let cfg = tiny_config(10);
    let data = tiny_subjects(&cfg, 2, 3);
    let mut model = ToyDenoiser::init(cfg, 0).unwrap();
    let before = model.clone();
    let mut state = AdamState::new(&model);
    let tc = TrainConfig { steps: 3, lr: 0.0, views: 2, ..TrainConfig::default() };
    train(&mut model, &mut state, &data, Stage::MultiView, &tc).unwrap();
    assert_eq!(model, before);
    assert!(train(&mut model, &mut state, &[], Stage::SingleView, &tc).is_err());
}

#[test]
fn training_reduces_loss_on_one_sample() {
    let cfg = tiny_config(10);
    let data = tiny_subjects(&cfg, 1, 1);
    let mut model = ToyDenoiser::init(cfg, 0).unwrap();
    let mut state = AdamState::new(&model);
    let tc = TrainConfig { steps: 200, lr: 1e-2, ..TrainConfig::default() };
    let trace = train(&mut model, &mut state, &data, Stage::SingleView, &tc).unwrap();
    let smooth = smooth_trace(&trace, 20);
    assert!(smooth[199] < smooth[19], "{} !< {}", smooth[199], smooth[19]);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let cfg = tiny_config(10);
    let data = tiny_subjects(&cfg, 2, 4);
    let tc = TrainConfig { steps: 6, views: 3, seed: 5, ..TrainConfig::default() };
    let run = |steps: &[usize]| {
        let mut model = ToyDenoiser::init(cfg, 1).unwrap();
        let mut state = AdamState::new(&model);
        let mut trace = Vec::new();
        for &s in steps {
            // round-trip through the checkpoint format between segments
            let bytes = encode_checkpoint(&model, Some(&state));
            let ck = decode_checkpoint(&bytes).unwrap();
            model = ck.model;
            state = ck.optimizer.unwrap();
            let seg = TrainConfig { steps: s, ..tc };
            trace.extend(train(&mut model, &mut state, &data, Stage::MultiView, &seg).unwrap());
        }
        (model, trace)
    };
    let (m1, t1) = run(&[6]);
    let (m2, t2) = run(&[6]);
    let (m3, t3) = run(&[2, 4]);
    assert_eq!(t1, t2);
    assert_eq!(m1, m2);
    assert_eq!(t1, t3);
    assert_eq!(m1, m3);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = DenoiserConfig { correlation: CorrelationMode::Identity, blocks: 2, ..tiny_config(7) };
    let model = ToyDenoiser::init(cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mvtk");
    save_checkpoint(&path, &model, None).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model, model);
    assert!(ck.optimizer.is_none());

    let blobs = decode_blobs(&std::fs::read(&path).unwrap()).unwrap();
    let order: BTreeMap<_, _> = blobs
        .iter()
        .filter_map(|b| b.name.strip_prefix("config/channel_order/").map(|n| (n.to_string(), b.data[0])))
        .collect();
    assert_eq!(order["z_t"], 0.0);
    assert_eq!(order["pose"], 1.0);
    assert_eq!(order["agnostic"], 2.0);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(decode_checkpoint(&bytes).is_err());
}
