//! Deterministic DDIM sampling, used for sanity checks and as the
//! generation-based timing baseline.

use rand_distr::StandardNormal;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

use super::latent::LatentImage;
use super::model::{cfg_predict, denoise_predict, ParamSource};
use super::prompt::PromptEmbedding;
use super::schedule::NoiseSchedule;

/// Timesteps visited by an `steps`-step sampler, from T downwards.
pub fn sampling_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::arg(format!("sampler steps {steps} must lie in [1, {t_max}]")));
    }
    let mut ts: Vec<usize> = (1..=steps)
        .rev()
        .map(|i| ((i * t_max) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    Ok(ts)
}

fn ddim_loop(
    sched: &NoiseSchedule,
    side: usize,
    steps: usize,
    seed: u64,
    mut eps_fn: impl FnMut(&LatentImage, usize) -> Result<LatentImage>,
) -> Result<LatentImage> {
    let ts = sampling_timesteps(sched.steps(), steps)?;
    let mut rng = seeded(seed);
    let mut z = LatentImage::new(side, (0..side * side).map(|_| rng.sample(StandardNormal)).collect())?;
    let mut x0 = z.clone();
    for (i, &t) in ts.iter().enumerate() {
        let eps = eps_fn(&z, t)?;
        let a = sched.alpha_bar(t)?;
        let a_next = match ts.get(i + 1) {
            Some(&tn) => sched.alpha_bar(tn)?,
            None => 1.0,
        };
        for ((x, zv), e) in x0.pixels_mut().iter_mut().zip(z.pixels()).zip(eps.pixels()) {
            *x = ((zv - (1.0 - a).sqrt() * e) / a.sqrt()).clamp(-1.0, 1.0);
        }
        for ((zv, x), e) in z.pixels_mut().iter_mut().zip(x0.pixels()).zip(eps.pixels()) {
            *zv = a_next.sqrt() * x + (1.0 - a_next).sqrt() * e;
        }
    }
    x0.matrix.ensure_finite("sample")?;
    Ok(x0)
}

/// Conditional DDIM sample starting from seeded Gaussian noise.
pub fn sample(
    params: &(impl ParamSource + ?Sized),
    p: &PromptEmbedding,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<LatentImage> {
    let side = params.denoiser().arch.side;
    ddim_loop(sched, side, steps, seed, |z, t| denoise_predict(params, z, t, p))
}

/// DDIM with classifier-free guidance: two network evaluations per step.
pub fn sample_guided(
    params: &(impl ParamSource + ?Sized),
    p: &PromptEmbedding,
    null: &PromptEmbedding,
    eta: f64,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<LatentImage> {
    let side = params.denoiser().arch.side;
    ddim_loop(sched, side, steps, seed, |z, t| cfg_predict(params, z, t, p, null, eta))
}
