pub mod attention;
pub mod checkpoint;
pub mod latent;
pub mod model;
pub mod prompt;
pub mod sampler;
pub mod schedule;

pub use attention::{attend, cross_attention, Attention};
pub use checkpoint::Checkpoint;
pub use latent::LatentImage;
pub use model::{cfg_predict, denoise_predict, Arch, Denoiser, ParamSource};
pub use prompt::{encode_prompt, prompt_norm_bound, PromptEmbedding};
pub use sampler::{sample, sample_guided};
pub use schedule::{NoiseSchedule, ScheduleKind};

use crate::error::{Error, Result};

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(x0: &LatentImage, t: usize, eps: &LatentImage, sched: &NoiseSchedule) -> Result<LatentImage> {
    let a = sched.alpha_bar(t)?;
    noise_with_alpha(x0, a, eps)
}

pub fn noise_with_alpha(x0: &LatentImage, alpha_bar: f64, eps: &LatentImage) -> Result<LatentImage> {
    if !x0.same_shape(eps) {
        return Err(Error::arg("image and noise shapes differ"));
    }
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let pixels = x0.pixels().iter().zip(eps.pixels()).map(|(x, e)| sa * x + sn * e).collect();
    LatentImage::new(x0.side, pixels)
}
