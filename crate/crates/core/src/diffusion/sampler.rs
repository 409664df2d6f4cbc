//! Deterministic DDIM sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{ConditioningBundle, LatentImage, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};

/// The `steps` timesteps visited by the sampler, descending from `T − 1`:
/// `t_k = (S − k)·T/S − 1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::InvalidParameter("DDIM needs at least one step".into()));
    }
    if steps > total {
        return Err(Error::TimestepOutOfRange {
            t: steps,
            steps: total,
        });
    }
    Ok((0..steps).map(|k| (steps - k) * total / steps - 1).collect())
}

/// Standard-normal latent for one view. The stream is keyed by the view id
/// so a view's starting noise does not depend on how views are batched.
pub fn initial_noise(dims: (usize, usize, usize), seed: u64, view_id: u64) -> LatentImage {
    let (c, h, w) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(view_id);
    let data = (0..c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    LatentImage::from_token_data(h, w, c, data).expect("sized to dims")
}

/// Single DDIM update from `t` to the step with coefficients
/// `(alpha_next, sigma_next)`; returns `(z_next, ẑ0)`.
pub fn ddim_step(
    z_t: &LatentImage,
    eps_hat: &LatentImage,
    alpha: f64,
    sigma: f64,
    alpha_next: f64,
    sigma_next: f64,
) -> Result<(LatentImage, LatentImage)> {
    if z_t.dims() != eps_hat.dims() {
        return Err(Error::Shape(format!("z {:?} vs eps {:?}", z_t.dims(), eps_hat.dims())));
    }
    let (c, h, w) = z_t.dims();
    let z = z_t.tokens().data();
    let e = eps_hat.tokens().data();
    let x0: Vec<f64> = z.iter().zip(e).map(|(z, e)| (z - sigma * e) / alpha).collect();
    let next = x0
        .iter()
        .zip(e)
        .map(|(x, e)| alpha_next * x + sigma_next * e)
        .collect();
    Ok((
        LatentImage::from_token_data(h, w, c, next)?,
        LatentImage::from_token_data(h, w, c, x0)?,
    ))
}

/// Jointly denoises all views of `cond` from seeded noise. `view_ids`
/// keys each view's starting noise. The final step lands on the clean
/// latent (α = 1, σ = 0).
pub fn ddim_sample<P: NoisePredictor>(
    model: &P,
    schedule: &NoiseSchedule,
    cond: &ConditioningBundle,
    steps: usize,
    seed: u64,
    view_ids: &[u64],
) -> Result<Vec<LatentImage>> {
    cond.validate()?;
    if view_ids.len() != cond.view_count() {
        return Err(Error::Dimension(format!(
            "{} view ids for {} views",
            view_ids.len(),
            cond.view_count()
        )));
    }
    let dims = cond.agnostic[0].dims();
    let z = view_ids.iter().map(|&id| initial_noise(dims, seed, id)).collect();
    ddim_sample_from(model, schedule, cond, steps, z)
}

/// DDIM from a given starting latent set.
pub fn ddim_sample_from<P: NoisePredictor>(
    model: &P,
    schedule: &NoiseSchedule,
    cond: &ConditioningBundle,
    steps: usize,
    mut z: Vec<LatentImage>,
) -> Result<Vec<LatentImage>> {
    let ts = ddim_timesteps(schedule.steps(), steps)?;
    for (k, &t) in ts.iter().enumerate() {
        let eps = model.predict_noise(&z, t, cond)?;
        if eps.len() != z.len() {
            return Err(Error::Dimension("predictor returned a different view count".into()));
        }
        let (an, sn) = match ts.get(k + 1) {
            Some(&tn) => (schedule.alpha(tn), schedule.sigma(tn)),
            None => (1.0, 0.0),
        };
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        z = z
            .iter()
            .zip(&eps)
            .map(|(zi, ei)| ddim_step(zi, ei, a, s, an, sn).map(|(next, _)| next))
            .collect::<Result<_>>()?;
    }
    Ok(z)
}
