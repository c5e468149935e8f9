//! Base-model training and LoRA fine-tuning on the ε-prediction objective,
//! including the training-side evasion attacks.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::{effective_params, init_delta, ApplyMode, LoraDelta, TargetFilter};
use crate::dataset::LabeledImage;
use crate::diffusion::model::{backward_with_prompt, forward, Denoiser, GradSink, ParamSource};
use crate::diffusion::prompt::encode_prompt_cached;
use crate::diffusion::{forward_noise, LatentImage, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{derive, seeded, SeededRng};
use crate::vocab::{self, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attack {
    None,
    /// Trigger of concept `i` replaced by the trigger of `(i + 1) mod concepts`.
    PromptDeviation { concepts: usize },
    /// Adds `λ·L_ce²` over the current batch.
    Regularization { lambda: f64 },
    /// Trains only on `t < γ`.
    EarlyFreezing,
    /// Trains only on `t > γ`.
    LateFreezing,
}

impl Attack {
    pub fn name(&self) -> &'static str {
        match self {
            Attack::None => "none",
            Attack::PromptDeviation { .. } => "prompt_deviation",
            Attack::Regularization { .. } => "regularization",
            Attack::EarlyFreezing => "early_freezing",
            Attack::LateFreezing => "late_freezing",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain SGD.
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Inclusive `[t_lo, t_hi]`; `None` means `[1, T]`.
    pub timestep_range: Option<(usize, usize)>,
    pub attack: Attack,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Probability of replacing a caption with the null prompt.
    pub uncond_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.05,
            batch: 8,
            seed: 0,
            timestep_range: None,
            attack: Attack::None,
            optimizer: Optimizer::Sgd,
            clip: 1.0,
            uncond_prob: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("train config: {e}")))
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::Config("uncond_prob must lie in [0, 1]".into()));
        }
        if let Some((lo, hi)) = self.timestep_range {
            if !(lo < hi && hi <= steps) {
                return Err(Error::Config(format!(
                    "timestep range [{lo}, {hi}] must satisfy 0 <= lo < hi <= {steps}"
                )));
            }
        }
        match self.attack {
            Attack::Regularization { lambda } if !(lambda >= 0.0) => {
                Err(Error::arg(format!("regularization lambda {lambda} must be >= 0")))
            }
            Attack::PromptDeviation { concepts } if concepts < 2 => {
                Err(Error::arg("prompt deviation needs at least 2 concepts"))
            }
            _ => Ok(()),
        }
    }

    /// Inclusive range of timesteps that receive gradient.
    pub fn allowed_range(&self, steps: usize) -> (usize, usize) {
        let gamma = steps / 2;
        let (lo, hi) = self.timestep_range.unwrap_or((1, steps));
        let lo = lo.max(1);
        match self.attack {
            Attack::EarlyFreezing => (lo, hi.min(gamma - 1)),
            Attack::LateFreezing => (lo.max(gamma + 1), hi),
            _ => (lo, hi),
        }
    }

    /// 1 inside [`Self::allowed_range`], 0 outside.
    pub fn loss_weight(&self, t: usize, steps: usize) -> f64 {
        let (lo, hi) = self.allowed_range(steps);
        if (lo..=hi).contains(&t) {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub attack: Attack,
    pub epoch_losses: Vec<f64>,
    /// Batch-mean calibrated error per epoch (regularization attack only).
    pub epoch_ce_terms: Vec<f64>,
    pub final_loss: f64,
    pub steps: usize,
    pub wall_secs: f64,
    /// Trigger substitutions applied under prompt deviation.
    pub derangement: Vec<(TokenId, TokenId)>,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,ce_term\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            let ce = self.epoch_ce_terms.get(i).map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{l},{ce}\n", i + 1));
        }
        s
    }
}

/// Uniform integer in `[lo, hi]`.
pub fn sample_timestep(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub fn derangement(concepts: usize) -> Vec<(TokenId, TokenId)> {
    // only the first TRIGGER_COUNT concepts own a trigger word
    let n = concepts.min(vocab::TRIGGER_COUNT);
    (0..n)
        .map(|i| (vocab::trigger(i), vocab::trigger((i + 1) % n)))
        .collect()
}

fn deviate(caption: &[TokenId], map: &[(TokenId, TokenId)]) -> Vec<TokenId> {
    caption
        .iter()
        .map(|t| map.iter().find(|(a, _)| a == t).map_or(*t, |(_, b)| *b))
        .collect()
}

struct Sample {
    idx: usize,
    t: usize,
    eps: LatentImage,
    null_prompt: bool,
}

fn normal_image(side: usize, rng: &mut SeededRng) -> LatentImage {
    LatentImage::new(side, (0..side * side).map(|_| rng.sample(StandardNormal)).collect())
        .expect("square")
}

fn epoch_batches(n: usize, cfg: &TrainConfig, steps: usize, side: usize, rng: &mut SeededRng) -> Vec<Vec<Sample>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (lo, hi) = cfg.allowed_range(steps);
    order
        .chunks(cfg.batch)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&idx| Sample {
                    idx,
                    t: sample_timestep(rng, lo, hi),
                    eps: normal_image(side, rng),
                    null_prompt: rng.random::<f64>() < cfg.uncond_prob,
                })
                .collect()
        })
        .collect()
}

/// Denoising loss and its gradient for one sample; parameter gradients are
/// accumulated into `sink` scaled by `grad_scale`.
fn sample_loss(
    src: &(impl ParamSource + ?Sized),
    image: &LatentImage,
    tokens: &[TokenId],
    t: usize,
    eps: &LatentImage,
    sched: &NoiseSchedule,
    grad_scale: f64,
    sink: Option<&mut GradSink>,
) -> Result<f64> {
    let arch = src.denoiser().arch;
    let z = forward_noise(image, t, eps, sched)?;
    let (p, pc) = encode_prompt_cached(tokens, src)?;
    let (y, cache) = forward(src, &z, t, &p)?;
    let target = eps.to_patches(arch.patch)?;
    let diff = y.sub(&target)?;
    let n = diff.data().len() as f64;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    if let Some(sink) = sink {
        if grad_scale != 0.0 {
            let d_y = diff.scale(2.0 * grad_scale / n);
            backward_with_prompt(src, &cache, &p, &pc, &d_y, sink)?;
        }
    }
    Ok(loss)
}

struct Optim {
    kind: Optimizer,
    lr: f64,
    clip: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: i32,
}

impl Optim {
    fn new(cfg: &TrainConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            kind: cfg.optimizer,
            lr: cfg.lr,
            clip: cfg.clip,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut [&mut Matrix], grads: &mut [Matrix]) {
        let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if norm > self.clip {
            let s = self.clip / norm;
            grads.iter_mut().for_each(|g| g.scale_in_place(s));
        }
        self.step += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads.iter()) {
                    p.axpy(-self.lr, g).expect("same shape");
                }
            }
            Optimizer::Adam => {
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let c1 = 1.0 - b1.powi(self.step);
                let c2 = 1.0 - b2.powi(self.step);
                for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (j, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + (1.0 - b1) * gv;
                        v[j] = b2 * v[j] + (1.0 - b2) * gv * gv;
                        *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn check_loss(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("loss became {loss} in epoch {}", epoch + 1)))
    }
}

/// Trains every parameter of `model` on `data`. `on_epoch` sees the weights
/// after each completed epoch, so callers can persist the last good state.
pub fn train_base_with(
    model: &mut Denoiser,
    data: &[&LabeledImage],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Denoiser) -> Result<()>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::arg("no training images"));
    }
    if cfg.attack != Attack::None {
        return Err(Error::arg("base training does not take an attack"));
    }
    cfg.validate(sched.steps())?;
    let started = Instant::now();
    let shapes: Vec<_> = model.tensors().iter().map(|t| t.shape()).collect();
    let mut opt = Optim::new(cfg, &shapes);
    let mut rng = seeded(derive(cfg.seed, &[0xBA5E]));
    let count = model.tensors().len();
    let side = model.arch.side;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in epoch_batches(data.len(), cfg, sched.steps(), side, &mut rng) {
            let mut sink = GradSink::all(count);
            let inv = 1.0 / batch.len() as f64;
            for s in &batch {
                let im = data[s.idx];
                let tokens: &[TokenId] = if s.null_prompt { &[] } else { &im.caption };
                let w = cfg.loss_weight(s.t, sched.steps());
                total += sample_loss(&*model, &im.image, tokens, s.t, &s.eps, sched, w * inv, Some(&mut sink))?;
            }
            let mut grads: Vec<Matrix> = sink
                .into_grads()
                .into_iter()
                .zip(&shapes)
                .map(|(g, &(r, c))| g.unwrap_or_else(|| Matrix::zeros(r, c)))
                .collect();
            let mut params: Vec<&mut Matrix> = model.tensors_mut().iter_mut().collect();
            opt.apply(&mut params, &mut grads);
            steps += 1;
        }
        let mean = total / data.len() as f64;
        check_loss(mean, epoch)?;
        epoch_losses.push(mean);
        on_epoch(epoch, model)?;
    }
    Ok(TrainReport {
        attack: Attack::None,
        final_loss: *epoch_losses.last().expect("epochs > 0"),
        epoch_losses,
        epoch_ce_terms: Vec::new(),
        steps,
        wall_secs: started.elapsed().as_secs_f64(),
        derangement: Vec::new(),
    })
}

pub fn train_base(
    model: &mut Denoiser,
    data: &[&LabeledImage],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_base_with(model, data, sched, cfg, |_, _| Ok(()))
}

/// Fine-tunes a fresh LoRA delta on `data` with `base` frozen.
pub fn finetune_concept(
    base: &Denoiser,
    data: &[&LabeledImage],
    sched: &NoiseSchedule,
    rank: usize,
    cfg: &TrainConfig,
) -> Result<(LoraDelta, TrainReport)> {
    finetune(base, data, sched, rank, TargetFilter::Attention, cfg)
}

pub fn finetune_with_attack(
    base: &Denoiser,
    data: &[&LabeledImage],
    sched: &NoiseSchedule,
    rank: usize,
    cfg: &TrainConfig,
) -> Result<(LoraDelta, TrainReport)> {
    if cfg.attack == Attack::None {
        return Err(Error::arg("finetune_with_attack needs an attack"));
    }
    finetune(base, data, sched, rank, TargetFilter::Attention, cfg)
}

pub fn finetune(
    base: &Denoiser,
    data: &[&LabeledImage],
    sched: &NoiseSchedule,
    rank: usize,
    targets: TargetFilter,
    cfg: &TrainConfig,
) -> Result<(LoraDelta, TrainReport)> {
    if data.is_empty() {
        return Err(Error::arg("no fine-tuning images"));
    }
    cfg.validate(sched.steps())?;
    let started = Instant::now();
    let steps_t = sched.steps();
    let mut delta = init_delta(base, rank, targets, derive(cfg.seed, &[0x10CA]))?;
    let ids: Vec<usize> = delta
        .entries
        .iter()
        .map(|e| base.id_of(&e.target).expect("validated by init"))
        .collect();
    let shapes: Vec<_> = delta
        .entries
        .iter()
        .flat_map(|e| [e.b.shape(), e.a.shape()])
        .collect();
    let mut opt = Optim::new(cfg, &shapes);
    let mut rng = seeded(derive(cfg.seed, &[0xF1AE]));

    let (map, lambda) = match cfg.attack {
        Attack::PromptDeviation { concepts } => (derangement(concepts), 0.0),
        Attack::Regularization { lambda } => (Vec::new(), lambda),
        _ => (Vec::new(), 0.0),
    };
    let regularize = matches!(cfg.attack, Attack::Regularization { .. });
    let captions: Vec<Vec<TokenId>> = data.iter().map(|im| deviate(&im.caption, &map)).collect();

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_ce = Vec::new();
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let (mut total, mut ce_total) = (0.0, 0.0);
        for batch in epoch_batches(data.len(), cfg, steps_t, base.arch.side, &mut rng) {
            let view = effective_params(base, &delta, ApplyMode::FullFinetuned)?;
            let mut sink = GradSink::only(base.tensors().len(), &ids);
            let inv = 1.0 / batch.len() as f64;
            let (mut batch_ft, mut batch_base) = (0.0, 0.0);
            for s in &batch {
                let im = data[s.idx];
                let tokens: &[TokenId] = if s.null_prompt { &[] } else { &captions[s.idx] };
                let w = cfg.loss_weight(s.t, steps_t);
                let l = sample_loss(&view, &im.image, tokens, s.t, &s.eps, sched, w * inv, Some(&mut sink))?;
                batch_ft += w * l;
                if regularize {
                    let lb = sample_loss(base, &im.image, tokens, s.t, &s.eps, sched, 0.0, None)?;
                    batch_base += w * lb;
                }
                total += l;
            }
            let factor = if regularize {
                let ce = (batch_ft - batch_base) * inv;
                ce_total += ce * batch.len() as f64;
                1.0 + 2.0 * lambda * ce
            } else {
                1.0
            };
            let mut grads = factor_grads(&delta, &ids, &sink, factor)?;
            let mut params: Vec<&mut Matrix> = delta
                .entries
                .iter_mut()
                .flat_map(|e| [&mut e.b, &mut e.a])
                .collect();
            opt.apply(&mut params, &mut grads);
            steps += 1;
        }
        let mean = total / data.len() as f64;
        check_loss(mean, epoch)?;
        epoch_losses.push(mean);
        if regularize {
            epoch_ce.push(ce_total / data.len() as f64);
        }
    }
    Ok((
        delta,
        TrainReport {
            attack: cfg.attack,
            final_loss: *epoch_losses.last().expect("epochs > 0"),
            epoch_losses,
            epoch_ce_terms: epoch_ce,
            steps,
            wall_secs: started.elapsed().as_secs_f64(),
            derangement: map,
        },
    ))
}

/// `∂L/∂B = α·G·Aᵀ` and `∂L/∂A = α·Bᵀ·G` from the merged-weight gradient `G`,
/// ordered `[B_0, A_0, B_1, A_1, ..]`.
fn factor_grads(delta: &LoraDelta, ids: &[usize], sink: &GradSink, scale: f64) -> Result<Vec<Matrix>> {
    let mut grads = Vec::with_capacity(2 * ids.len());
    for (e, &id) in delta.entries.iter().zip(ids) {
        let g = match sink.get(id) {
            Some(g) => g.scale(scale * delta.alpha),
            None => Matrix::zeros(e.b.rows(), e.a.cols()),
        };
        grads.push(g.matmul_t(&e.a)?);
        grads.push(e.b.t_matmul(&g)?);
    }
    Ok(grads)
}

/// Single-sample denoising loss and its gradient for every tensor of `model`.
pub fn base_sample_gradient(
    model: &Denoiser,
    image: &LatentImage,
    tokens: &[TokenId],
    t: usize,
    eps: &LatentImage,
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<Matrix>)> {
    let mut sink = GradSink::all(model.tensors().len());
    let loss = sample_loss(model, image, tokens, t, eps, sched, 1.0, Some(&mut sink))?;
    let grads = sink
        .into_grads()
        .into_iter()
        .zip(model.tensors())
        .map(|(g, m)| g.unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();
    Ok((loss, grads))
}

/// Single-sample loss under `base + delta` and its gradient with respect to
/// the LoRA factors, ordered `[B_0, A_0, B_1, A_1, ..]`.
pub fn lora_sample_gradient(
    base: &Denoiser,
    delta: &LoraDelta,
    image: &LatentImage,
    tokens: &[TokenId],
    t: usize,
    eps: &LatentImage,
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<Matrix>)> {
    delta.validate_against(base)?;
    let ids: Vec<usize> = delta
        .entries
        .iter()
        .map(|e| base.id_of(&e.target).expect("validated"))
        .collect();
    let view = effective_params(base, delta, ApplyMode::FullFinetuned)?;
    let mut sink = GradSink::only(base.tensors().len(), &ids);
    let loss = sample_loss(&view, image, tokens, t, eps, sched, 1.0, Some(&mut sink))?;
    Ok((loss, factor_grads(delta, &ids, &sink, 1.0)?))
}

/// Mean denoising MSE of `src` on `images` at timestep `t` over `draws`
/// seeded noise samples each.
pub fn denoising_error(
    src: &(impl ParamSource + ?Sized),
    images: &[&LabeledImage],
    t: usize,
    sched: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let side = src.denoiser().arch.side;
    let mut total = 0.0;
    for im in images {
        for d in 0..draws {
            let mut rng = seeded(derive(seed, &[im.id, t as u64, d as u64]));
            let eps = normal_image(side, &mut rng);
            total += sample_loss(src, &im.image, &im.caption, t, &eps, sched, 0.0, None)?;
        }
    }
    Ok(total / (images.len() * draws) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::Arch;
    use crate::diffusion::ScheduleKind;

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = TrainConfig {
            attack: Attack::Regularization { lambda: 1.0 },
            timestep_range: Some((1, 50)),
            ..TrainConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        let partial = TrainConfig::from_toml("epochs = 3\nlr = 0.5\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.batch, TrainConfig::default().batch);
        assert!(TrainConfig::from_toml("epochz = 3").is_err());
        let bad = TrainConfig {
            attack: Attack::Regularization { lambda: -1.0 },
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(100), Err(Error::Argument(_))));
        let bad = TrainConfig {
            timestep_range: Some((60, 50)),
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(100), Err(Error::Config(_))));
    }

    #[test]
    fn freezing_ranges() {
        let early = TrainConfig {
            attack: Attack::EarlyFreezing,
            ..TrainConfig::default()
        };
        let late = TrainConfig {
            attack: Attack::LateFreezing,
            ..TrainConfig::default()
        };
        assert_eq!(early.allowed_range(100), (1, 49));
        assert_eq!(late.allowed_range(100), (51, 100));
        assert_eq!(TrainConfig::default().allowed_range(100), (1, 100));
        assert_eq!(early.loss_weight(50, 100), 0.0);
        assert_eq!(early.loss_weight(49, 100), 1.0);
    }

    #[test]
    fn masked_timesteps_contribute_no_gradient() {
        let net = Denoiser::new(Arch::tiny(), 1).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::Linear, 10).unwrap();
        let cfg = TrainConfig {
            attack: Attack::EarlyFreezing,
            ..TrainConfig::default()
        };
        let img = LatentImage::new(4, vec![0.5; 16]).unwrap();
        let eps = normal_image(4, &mut seeded(3));
        for t in 5..=10 {
            let mut sink = GradSink::all(net.tensors().len());
            let w = cfg.loss_weight(t, 10);
            sample_loss(&net, &img, &[3, 30], t, &eps, &sched, w, Some(&mut sink)).unwrap();
            assert!(sink.into_grads().iter().all(|g| g.is_none()));
        }
    }

    #[test]
    fn lora_factor_gradients_match_finite_differences() {
        use crate::numerics::{finite_diff_grad, GradCheckReport, FD_STEP};
        let base = Denoiser::new(Arch::tiny(), 4).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::Linear, 10).unwrap();
        let mut rng = seeded(8);
        let mut delta = init_delta(&base, 2, TargetFilter::Attention, 5).unwrap();
        for e in delta.entries.iter_mut() {
            e.b = crate::rng::normal_matrix(e.b.rows(), e.b.cols(), 0.3, &mut rng);
        }
        let img = normal_image(4, &mut rng);
        let eps = normal_image(4, &mut rng);
        let toks = [vocab::trigger(1), 30];
        let (_, grads) = lora_sample_gradient(&base, &delta, &img, &toks, 6, &eps, &sched).unwrap();
        for (k, g) in grads.iter().enumerate() {
            let numeric = finite_diff_grad(
                |m| {
                    let mut d = delta.clone();
                    let e = &mut d.entries[k / 2];
                    if k % 2 == 0 {
                        e.b = m.clone();
                    } else {
                        e.a = m.clone();
                    }
                    lora_sample_gradient(&base, &d, &img, &toks, 6, &eps, &sched).unwrap().0
                },
                if k % 2 == 0 { &delta.entries[k / 2].b } else { &delta.entries[k / 2].a },
                FD_STEP,
            )
            .unwrap();
            let rep = GradCheckReport::compare(g, &numeric).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{k}: {rep:?}");
        }
    }

    #[test]
    fn timestep_sampling_is_uniform() {
        let mut rng = seeded(42);
        let (t_max, n) = (20usize, 20_000usize);
        let mut counts = vec![0usize; t_max + 1];
        for _ in 0..n {
            counts[sample_timestep(&mut rng, 1, t_max)] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = n as f64 / t_max as f64;
        let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 19 degrees of freedom, 99.9th percentile ≈ 43.8
        assert!(chi2 < 43.8, "{chi2}");
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let d = derangement(10);
        assert!(d.iter().all(|(a, b)| a != b));
        let caption = vec![vocab::trigger(3), 30];
        assert_eq!(deviate(&caption, &d), vec![vocab::trigger(4), 30]);
        let wide = derangement(45);
        assert_eq!(wide.len(), vocab::TRIGGER_COUNT);
        assert!(wide.iter().all(|(a, b)| a != b && vocab::is_trigger(*b)));
    }
}
