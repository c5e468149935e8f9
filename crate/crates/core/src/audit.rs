//! Calibrated-error features and the outlier-vote audit.
//!
//! Every error term compares models on the same noised input: for an image,
//! a timestep and a draw index, one noise sample ε is drawn from a seed
//! derived from `(image id, t, draw)` and fed to every model.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::{effective_params, AdaptedParams, ApplyMode, LoraDelta};
use crate::dataset::LabeledImage;
use crate::diffusion::model::{denoise_predict, Denoiser, ParamSource};
use crate::diffusion::prompt::{encode_prompt, PromptEmbedding};
use crate::diffusion::{forward_noise, LatentImage, NoiseSchedule};
use crate::error::{Error, Result};
use crate::outlier::{Detector, DetectorKind, ForestParams, MIN_TRAINING_ROWS};
use crate::rng::{derive, seeded};
use crate::vocab::{self, TokenId, FIRST_ATTRIBUTE, VOCAB_SIZE};

pub const RANDOM_PROMPT_LEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    Null,
    Random,
    CaptionProxy,
    /// The training caption itself; for diagnostics only.
    TrueCaption,
}

impl std::str::FromStr for PromptStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "null" => Ok(Self::Null),
            "random" => Ok(Self::Random),
            "caption_proxy" | "caption" => Ok(Self::CaptionProxy),
            "true_caption" => Ok(Self::TrueCaption),
            other => Err(Error::arg(format!(
                "unknown prompt strategy {other:?} (null, random, caption-proxy, true-caption)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub t_grid: Vec<usize>,
    pub gamma: usize,
    pub eps_draws: usize,
    pub strategy: PromptStrategy,
    pub normalize: bool,
    pub irrelevant_budget: usize,
    pub detector: DetectorKind,
    pub forest: ForestParams,
    /// Seeds noise draws and random prompts.
    pub seed: u64,
}

impl AuditConfig {
    /// Eight evenly spaced steps `T/8, …, T`, `γ = T/2`.
    pub fn for_steps(steps: usize) -> Self {
        Self {
            t_grid: even_grid(steps, 8),
            gamma: steps / 2,
            eps_draws: 4,
            strategy: PromptStrategy::CaptionProxy,
            normalize: true,
            irrelevant_budget: 100,
            detector: DetectorKind::IsolationForest,
            forest: ForestParams::default(),
            seed: 0,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        let g = &self.t_grid;
        if g.is_empty() || g[0] < 1 || *g.last().expect("non-empty") > steps {
            return Err(Error::Config(format!("t_grid must be a non-empty subset of [1, {steps}]")));
        }
        if g.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("t_grid must be strictly increasing".into()));
        }
        if self.gamma < g[0] || self.gamma > g[g.len() - 1] {
            return Err(Error::Config(format!(
                "gamma {} outside the t_grid range [{}, {}]",
                self.gamma,
                g[0],
                g[g.len() - 1]
            )));
        }
        if self.eps_draws == 0 {
            return Err(Error::Config("eps_draws must be at least 1".into()));
        }
        if self.irrelevant_budget < MIN_TRAINING_ROWS {
            return Err(Error::Config(format!(
                "irrelevant budget {} is below the floor of {MIN_TRAINING_ROWS}",
                self.irrelevant_budget
            )));
        }
        Ok(())
    }
}

/// `k` evenly spaced steps `T/k, 2T/k, …, T` (rounded).
pub fn even_grid(steps: usize, k: usize) -> Vec<usize> {
    (1..=k)
        .map(|i| ((i * steps) as f64 / k as f64).round() as usize)
        .collect()
}

/// Tokens of the pseudo-prompt for `image`.
pub fn pseudo_prompt_tokens(strategy: PromptStrategy, image: &LabeledImage, seed: u64) -> Vec<TokenId> {
    let mut rng = seeded(derive(seed, &[image.id, 0x9E]));
    match strategy {
        PromptStrategy::Null => Vec::new(),
        PromptStrategy::Random => (0..RANDOM_PROMPT_LEN)
            .map(|_| rng.random_range(FIRST_ATTRIBUTE..VOCAB_SIZE as TokenId))
            .collect(),
        PromptStrategy::CaptionProxy => {
            let mut t: Vec<TokenId> = image.caption.iter().copied().filter(|t| !vocab::is_trigger(*t)).collect();
            t.shuffle(&mut rng);
            t
        }
        PromptStrategy::TrueCaption => image.caption.clone(),
    }
}

pub fn pseudo_prompt(
    strategy: PromptStrategy,
    image: &LabeledImage,
    seed: u64,
    params: &(impl ParamSource + ?Sized),
) -> Result<PromptEmbedding> {
    encode_prompt(&pseudo_prompt_tokens(strategy, image, seed), params)
}

/// The noise sample shared by every model for `(image, t, draw)`.
pub fn paired_noise(seed: u64, image_id: u64, t: usize, draw: usize, side: usize) -> LatentImage {
    let mut rng = seeded(derive(seed, &[image_id, t as u64, draw as u64]));
    LatentImage::new(side, (0..side * side).map(|_| rng.sample(StandardNormal)).collect())
        .expect("square")
}

/// `‖ε̂ − ε‖²` averaged over pixels.
pub fn denoising_sq_error(
    src: &(impl ParamSource + ?Sized),
    z: &LatentImage,
    t: usize,
    p: &PromptEmbedding,
    eps: &LatentImage,
) -> Result<f64> {
    let pred = denoise_predict(src, z, t, p)?;
    let n = eps.pixels().len() as f64;
    Ok(pred
        .pixels()
        .iter()
        .zip(eps.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

fn check_t(t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t == 0 || t > sched.steps() {
        Err(Error::arg(format!("audited timestep {t} outside [1, {}]", sched.steps())))
    } else {
        Ok(())
    }
}

/// Mean paired errors `(base, other)` over `draws` noise samples supplied by
/// `noise(draw)`.
pub fn paired_errors_with(
    base: &(impl ParamSource + ?Sized),
    other: &(impl ParamSource + ?Sized),
    image: &LatentImage,
    p: &PromptEmbedding,
    t: usize,
    sched: &NoiseSchedule,
    draws: usize,
    mut noise: impl FnMut(usize) -> LatentImage,
) -> Result<(f64, f64)> {
    check_t(t, sched)?;
    if draws == 0 {
        return Err(Error::arg("need at least one noise draw"));
    }
    let (mut eb, mut eo) = (0.0, 0.0);
    for d in 0..draws {
        let eps = noise(d);
        let z = forward_noise(image, t, &eps, sched)?;
        eb += denoising_sq_error(base, &z, t, p, &eps)?;
        eo += denoising_sq_error(other, &z, t, p, &eps)?;
    }
    Ok((eb / draws as f64, eo / draws as f64))
}

fn calibrate_value(base_err: f64, other_err: f64, normalize: bool) -> f64 {
    let ce = other_err - base_err;
    if normalize && base_err > 0.0 {
        ce / base_err
    } else {
        ce
    }
}

/// `L_ce`: mean paired error of `W'` minus that of `W`, optionally divided by
/// the base error.
#[allow(clippy::too_many_arguments)]
pub fn calibrated_error(
    base: &Denoiser,
    delta: &LoraDelta,
    image: &LabeledImage,
    p: &PromptEmbedding,
    t: usize,
    sched: &NoiseSchedule,
    draws: usize,
    normalize: bool,
    seed: u64,
) -> Result<f64> {
    let full = effective_params(base, delta, ApplyMode::FullFinetuned)?;
    let side = base.arch.side;
    let (b, o) = paired_errors_with(base, &full, &image.image, p, t, sched, draws, |d| {
        paired_noise(seed, image.id, t, d, side)
    })?;
    Ok(calibrate_value(b, o, normalize))
}

/// `L_cce`: as [`calibrated_error`] with `W'` for `t ≤ γ` and `W''` above.
#[allow(clippy::too_many_arguments)]
pub fn conditional_calibrated_error(
    base: &Denoiser,
    delta: &LoraDelta,
    image: &LabeledImage,
    p: &PromptEmbedding,
    t: usize,
    gamma: usize,
    sched: &NoiseSchedule,
    draws: usize,
    normalize: bool,
    seed: u64,
) -> Result<f64> {
    let mode = if t <= gamma {
        ApplyMode::FullFinetuned
    } else {
        ApplyMode::CrossAttnFrozen
    };
    let view = effective_params(base, delta, mode)?;
    let side = base.arch.side;
    let (b, o) = paired_errors_with(base, &view, &image.image, p, t, sched, draws, |d| {
        paired_noise(seed, image.id, t, d, side)
    })?;
    Ok(calibrate_value(b, o, normalize))
}

#[derive(Clone, Debug, Hash, PartialEq, Eq)]
struct ErrorKey {
    seed: u64,
    image: u64,
    t: usize,
    draw: usize,
    tokens: Vec<TokenId>,
}

/// Base-model errors keyed by `(seed, image, t, draw, prompt)`; valid for a
/// single base model.
#[derive(Debug, Default)]
pub struct BaseErrorCache {
    base_checksum: Option<u64>,
    map: HashMap<ErrorKey, f64>,
    pub hits: usize,
    pub misses: usize,
}

impl BaseErrorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn bind(&mut self, base: &Denoiser) -> Result<()> {
        let sum = base.checksum();
        match self.base_checksum {
            Some(s) if s != sum => Err(Error::Integrity("base-error cache belongs to another base model".into())),
            _ => {
                self.base_checksum = Some(sum);
                Ok(())
            }
        }
    }
}

/// Which fine-tuned views to evaluate at a timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    /// Only the view the CCE uses at this `t` for the given `γ`.
    ForGamma(usize),
    Both,
}

/// Mean paired errors of one image at one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepErrors {
    pub t: usize,
    pub base: f64,
    pub full: Option<f64>,
    pub frozen: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageErrors {
    pub image_id: u64,
    pub concept_id: usize,
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepErrors>,
}

impl ImageErrors {
    /// CCE values over the timesteps of this table for cutoff `gamma`.
    pub fn cce(&self, gamma: usize, normalize: bool) -> Result<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| {
                let other = if s.t <= gamma { s.full } else { s.frozen };
                let other = other.ok_or_else(|| {
                    Error::Integrity(format!("branch for t={} and gamma={gamma} was not computed", s.t))
                })?;
                Ok(calibrate_value(s.base, other, normalize))
            })
            .collect()
    }

    /// Plain calibrated errors (always `W'`).
    pub fn ce(&self, normalize: bool) -> Result<Vec<f64>> {
        self.cce(usize::MAX, normalize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CceFeature {
    pub image_id: u64,
    pub concept_id: usize,
    pub values: Vec<f64>,
    pub strategy: PromptStrategy,
    pub draws: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    CanGenerate,
    CannotGenerate,
}

/// Strict majority of flags; ties go to `CannotGenerate`.
pub fn majority_vote(flags: &[bool]) -> Decision {
    let yes = flags.iter().filter(|f| **f).count();
    if 2 * yes > flags.len() {
        Decision::CanGenerate
    } else {
        Decision::CannotGenerate
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditTimings {
    pub irrelevant_feature_secs: f64,
    pub fit_secs: f64,
    pub target_feature_secs: f64,
    pub score_secs: f64,
    /// True when the irrelevant features and detector came from an earlier audit.
    pub calibration_reused: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub concept_id: usize,
    pub image_ids: Vec<u64>,
    pub features: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
    pub threshold: f64,
    pub votes_for: usize,
    pub votes_total: usize,
    pub decision: Decision,
    pub timings: AuditTimings,
}

impl AuditVerdict {
    pub fn to_csv(&self, t_grid: &[usize]) -> String {
        let mut s = String::from("image_id");
        for t in t_grid {
            s.push_str(&format!(",cce_t{t}"));
        }
        s.push_str(",score,flag\n");
        for i in 0..self.image_ids.len() {
            s.push_str(&self.image_ids[i].to_string());
            for v in &self.features[i] {
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(",{},{}\n", self.scores[i], self.flags[i]));
        }
        s
    }
}

/// Builds a verdict from target feature rows and a fitted detector.
pub fn vote(concept_id: usize, image_ids: Vec<u64>, features: Vec<Vec<f64>>, detector: &Detector) -> Result<AuditVerdict> {
    if features.is_empty() {
        return Err(Error::arg("no target images to audit"));
    }
    let scores = features.iter().map(|f| detector.score(f)).collect::<Result<Vec<_>>>()?;
    let threshold = detector.threshold();
    let flags: Vec<bool> = scores.iter().map(|s| *s > threshold).collect();
    let votes_for = flags.iter().filter(|f| **f).count();
    Ok(AuditVerdict {
        concept_id,
        decision: majority_vote(&flags),
        votes_total: flags.len(),
        image_ids,
        features,
        scores,
        flags,
        threshold,
        votes_for,
        timings: AuditTimings::default(),
    })
}

struct Calibration {
    detector: Detector,
    features: Vec<CceFeature>,
}

/// One fine-tuned model under audit. Irrelevant-concept features and the
/// fitted detector are computed once and reused for every audited concept.
pub struct AuditSession<'a> {
    base: &'a Denoiser,
    full: AdaptedParams<'a>,
    frozen: AdaptedParams<'a>,
    sched: &'a NoiseSchedule,
    pub cfg: AuditConfig,
    calibration: Option<Calibration>,
    /// How many times irrelevant features were extracted.
    pub irrelevant_extractions: usize,
    /// Network evaluations made by this session (base evaluations served
    /// from the cache are not counted).
    pub forward_passes: usize,
}

impl<'a> AuditSession<'a> {
    pub fn new(base: &'a Denoiser, delta: &LoraDelta, sched: &'a NoiseSchedule, cfg: AuditConfig) -> Result<Self> {
        cfg.validate(sched.steps())?;
        Ok(Self {
            base,
            full: effective_params(base, delta, ApplyMode::FullFinetuned)?,
            frozen: effective_params(base, delta, ApplyMode::CrossAttnFrozen)?,
            sched,
            cfg,
            calibration: None,
            irrelevant_extractions: 0,
            forward_passes: 0,
        })
    }

    /// Mean paired errors for every image and grid step.
    pub fn error_table(
        &mut self,
        images: &[&LabeledImage],
        branches: Branches,
        cache: &mut BaseErrorCache,
    ) -> Result<Vec<ImageErrors>> {
        if images.is_empty() {
            return Err(Error::arg("no images to extract features from"));
        }
        cache.bind(self.base)?;
        let side = self.base.arch.side;
        let draws = self.cfg.eps_draws;
        let mut out = Vec::with_capacity(images.len());
        for im in images {
            let tokens = pseudo_prompt_tokens(self.cfg.strategy, im, self.cfg.seed);
            let p = encode_prompt(&tokens, self.base)?;
            let mut steps = Vec::with_capacity(self.cfg.t_grid.len());
            for &t in &self.cfg.t_grid {
                let (want_full, want_frozen) = match branches {
                    Branches::Both => (true, true),
                    Branches::ForGamma(g) => (t <= g, t > g),
                };
                let (mut b, mut f, mut z) = (0.0, 0.0, 0.0);
                for d in 0..draws {
                    let eps = paired_noise(self.cfg.seed, im.id, t, d, side);
                    let x_t = forward_noise(&im.image, t, &eps, self.sched)?;
                    let key = ErrorKey {
                        seed: self.cfg.seed,
                        image: im.id,
                        t,
                        draw: d,
                        tokens: tokens.clone(),
                    };
                    let eb = match cache.map.get(&key) {
                        Some(v) => {
                            cache.hits += 1;
                            *v
                        }
                        None => {
                            cache.misses += 1;
                            self.forward_passes += 1;
                            let v = denoising_sq_error(self.base, &x_t, t, &p, &eps)
                                .map_err(|e| context(e, im.id, t))?;
                            cache.map.insert(key, v);
                            v
                        }
                    };
                    b += eb;
                    if want_full {
                        self.forward_passes += 1;
                        f += denoising_sq_error(&self.full, &x_t, t, &p, &eps).map_err(|e| context(e, im.id, t))?;
                    }
                    if want_frozen {
                        self.forward_passes += 1;
                        z += denoising_sq_error(&self.frozen, &x_t, t, &p, &eps).map_err(|e| context(e, im.id, t))?;
                    }
                }
                let n = draws as f64;
                steps.push(StepErrors {
                    t,
                    base: b / n,
                    full: want_full.then_some(f / n),
                    frozen: want_frozen.then_some(z / n),
                });
            }
            out.push(ImageErrors {
                image_id: im.id,
                concept_id: im.concept_id,
                tokens,
                steps,
            });
        }
        Ok(out)
    }

    pub fn extract_features(&mut self, images: &[&LabeledImage], cache: &mut BaseErrorCache) -> Result<Vec<CceFeature>> {
        let table = self.error_table(images, Branches::ForGamma(self.cfg.gamma), cache)?;
        table
            .iter()
            .map(|row| {
                Ok(CceFeature {
                    image_id: row.image_id,
                    concept_id: row.concept_id,
                    values: row.cce(self.cfg.gamma, self.cfg.normalize)?,
                    strategy: self.cfg.strategy,
                    draws: self.cfg.eps_draws,
                })
            })
            .collect()
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibration.is_some()
    }

    /// Fits the detector on the first `irrelevant_budget` irrelevant images.
    /// Returns `(feature_secs, fit_secs)`; zero when already calibrated.
    pub fn calibrate(&mut self, irrelevant: &[&LabeledImage], cache: &mut BaseErrorCache) -> Result<(f64, f64)> {
        if self.calibration.is_some() {
            return Ok((0.0, 0.0));
        }
        let budget = self.cfg.irrelevant_budget.min(irrelevant.len());
        if budget < MIN_TRAINING_ROWS {
            return Err(Error::Config(format!(
                "{budget} irrelevant images available, the floor is {MIN_TRAINING_ROWS}"
            )));
        }
        let started = Instant::now();
        let features = self.extract_features(&irrelevant[..budget], cache)?;
        self.irrelevant_extractions += 1;
        let feature_secs = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let rows: Vec<Vec<f64>> = features.iter().map(|f| f.values.clone()).collect();
        let detector = Detector::fit(self.cfg.detector, &rows, &self.cfg.forest)?;
        let fit_secs = started.elapsed().as_secs_f64();
        self.calibration = Some(Calibration { detector, features });
        Ok((feature_secs, fit_secs))
    }

    pub fn irrelevant_features(&self) -> Option<&[CceFeature]> {
        self.calibration.as_ref().map(|c| c.features.as_slice())
    }

    pub fn detector(&self) -> Option<&Detector> {
        self.calibration.as_ref().map(|c| &c.detector)
    }

    pub fn audit(
        &mut self,
        concept_id: usize,
        irrelevant: &[&LabeledImage],
        targets: &[&LabeledImage],
        cache: &mut BaseErrorCache,
    ) -> Result<AuditVerdict> {
        if targets.is_empty() {
            return Err(Error::arg("no target images to audit"));
        }
        let reused = self.is_calibrated();
        let (irrelevant_feature_secs, fit_secs) = self.calibrate(irrelevant, cache)?;
        let started = Instant::now();
        let feats = self.extract_features(targets, cache)?;
        let target_feature_secs = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let ids = feats.iter().map(|f| f.image_id).collect();
        let rows = feats.into_iter().map(|f| f.values).collect();
        let detector = &self.calibration.as_ref().expect("calibrated above").detector;
        let mut verdict = vote(concept_id, ids, rows, detector)?;
        verdict.timings = AuditTimings {
            irrelevant_feature_secs,
            fit_secs,
            target_feature_secs,
            score_secs: started.elapsed().as_secs_f64(),
            calibration_reused: reused,
        };
        Ok(verdict)
    }
}

fn context(e: Error, image: u64, t: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("image {image}, t={t}: {m}")),
        other => other,
    }
}

/// One-shot audit of a single concept.
pub fn audit_concept(
    base: &Denoiser,
    delta: &LoraDelta,
    sched: &NoiseSchedule,
    concept_id: usize,
    irrelevant: &[&LabeledImage],
    targets: &[&LabeledImage],
    cfg: &AuditConfig,
) -> Result<AuditVerdict> {
    let mut session = AuditSession::new(base, delta, sched, cfg.clone())?;
    session.audit(concept_id, irrelevant, targets, &mut BaseErrorCache::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_delta, TargetFilter};
    use crate::dataset::Corpus;
    use crate::diffusion::model::Arch;
    use crate::diffusion::ScheduleKind;
    use crate::rng::normal_matrix;

    fn setup() -> (Denoiser, NoiseSchedule, Corpus) {
        let arch = Arch {
            side: 16,
            patch: 4,
            width: 16,
            attn_dim: 8,
            embed_dim: 8,
            ff_hidden: 16,
            blocks: 1,
            vocab: VOCAB_SIZE,
        };
        (
            Denoiser::new(arch, 1).unwrap(),
            NoiseSchedule::new(ScheduleKind::Linear, 16).unwrap(),
            Corpus::generate(4, 10, 2).unwrap(),
        )
    }

    fn small_cfg() -> AuditConfig {
        AuditConfig {
            eps_draws: 2,
            irrelevant_budget: 10,
            forest: ForestParams {
                n_trees: 20,
                ..ForestParams::default()
            },
            ..AuditConfig::for_steps(16)
        }
    }

    fn perturb(delta: &mut LoraDelta, seed: u64) {
        let mut rng = seeded(seed);
        for e in &mut delta.entries {
            e.b = normal_matrix(e.b.rows(), e.b.cols(), 0.2, &mut rng);
        }
    }

    #[test]
    fn pseudo_prompts() {
        let (_, _, corpus) = setup();
        let im = &corpus.images[3];
        assert!(pseudo_prompt_tokens(PromptStrategy::Null, im, 0).is_empty());
        let r = pseudo_prompt_tokens(PromptStrategy::Random, im, 5);
        assert_eq!(r.len(), 5);
        assert_eq!(r, pseudo_prompt_tokens(PromptStrategy::Random, im, 5));
        assert!(r.iter().all(|t| vocab::is_attribute(*t)));
        for im in &corpus.images {
            let c = pseudo_prompt_tokens(PromptStrategy::CaptionProxy, im, 1);
            assert!(c.iter().all(|t| !vocab::is_trigger(*t)));
            assert!(c.iter().filter(|t| im.caption.contains(t)).count() >= 2);
        }
        assert_eq!(
            "caption-proxy".parse::<PromptStrategy>().unwrap(),
            PromptStrategy::CaptionProxy
        );
        assert!("bogus".parse::<PromptStrategy>().is_err());
    }

    #[test]
    fn zero_delta_gives_exact_zeros_and_no_verdict() {
        let (base, sched, corpus) = setup();
        let delta = init_delta(&base, 2, TargetFilter::Attention, 3).unwrap();
        let im = &corpus.images[0];
        let p = encode_prompt(&[], &base).unwrap();
        for t in [1, 8, 16] {
            assert_eq!(calibrated_error(&base, &delta, im, &p, t, &sched, 2, true, 0).unwrap(), 0.0);
            assert_eq!(
                conditional_calibrated_error(&base, &delta, im, &p, t, 8, &sched, 2, false, 0).unwrap(),
                0.0
            );
        }
        let irr: Vec<_> = corpus.images.iter().filter(|i| i.concept_id >= 2).collect();
        let tgt: Vec<_> = corpus.images.iter().filter(|i| i.concept_id == 0).take(5).collect();
        let v = audit_concept(&base, &delta, &sched, 0, &irr, &tgt, &small_cfg()).unwrap();
        assert!(v.features.iter().flatten().all(|x| *x == 0.0));
        assert_eq!(v.decision, Decision::CannotGenerate);
        assert_eq!(v.votes_for, 0);
    }

    #[test]
    fn t_out_of_range_is_argument_error() {
        let (base, sched, corpus) = setup();
        let delta = init_delta(&base, 2, TargetFilter::Attention, 3).unwrap();
        let p = encode_prompt(&[], &base).unwrap();
        for t in [0, 17] {
            assert!(matches!(
                calibrated_error(&base, &delta, &corpus.images[0], &p, t, &sched, 1, true, 0),
                Err(Error::Argument(_))
            ));
        }
    }

    #[test]
    fn conditional_branches() {
        let (base, sched, corpus) = setup();
        let im = &corpus.images[1];
        let p = encode_prompt(&[30, 31], &base).unwrap();
        let mut delta = init_delta(&base, 2, TargetFilter::Attention, 3).unwrap();
        perturb(&mut delta, 4);
        for t in [2, 8] {
            let a = calibrated_error(&base, &delta, im, &p, t, &sched, 3, true, 7).unwrap();
            let b = conditional_calibrated_error(&base, &delta, im, &p, t, 8, &sched, 3, true, 7).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut cross = init_delta(&base, 2, TargetFilter::CrossAttention, 3).unwrap();
        perturb(&mut cross, 5);
        for t in [9, 16] {
            assert_eq!(
                conditional_calibrated_error(&base, &cross, im, &p, t, 8, &sched, 3, true, 7).unwrap(),
                0.0
            );
        }
        assert_ne!(calibrated_error(&base, &cross, im, &p, 12, &sched, 3, true, 7).unwrap(), 0.0);
    }

    #[test]
    fn both_models_see_the_same_noise() {
        let (base, sched, corpus) = setup();
        let mut delta = init_delta(&base, 2, TargetFilter::Attention, 3).unwrap();
        perturb(&mut delta, 4);
        let full = effective_params(&base, &delta, ApplyMode::FullFinetuned).unwrap();
        let p = encode_prompt(&[], &base).unwrap();
        let im = &corpus.images[2];
        let mut issued = Vec::new();
        let (b, f) = paired_errors_with(&base, &full, &im.image, &p, 5, &sched, 3, |d| {
            let e = paired_noise(0, im.id, 5, d, 16);
            issued.push(e.clone());
            e
        })
        .unwrap();
        assert_eq!(issued.len(), 3);
        // replaying the recorded noise reproduces each model's error separately
        let replay = |src: &dyn Fn(&LatentImage, &LatentImage) -> f64| {
            issued.iter().map(|e| src(&forward_noise(&im.image, 5, e, &sched).unwrap(), e)).sum::<f64>() / 3.0
        };
        let rb = replay(&|z, e| denoising_sq_error(&base, z, 5, &p, e).unwrap());
        let rf = replay(&|z, e| denoising_sq_error(&full, z, 5, &p, e).unwrap());
        assert_eq!((b, f), (rb, rf));
    }

    #[test]
    fn irrelevant_features_extracted_once_per_model() {
        let (base, sched, corpus) = setup();
        let mut delta = init_delta(&base, 2, TargetFilter::Attention, 3).unwrap();
        perturb(&mut delta, 9);
        let irr: Vec<_> = corpus.images.iter().filter(|i| i.concept_id >= 2).collect();
        let mut cache = BaseErrorCache::new();
        let mut s = AuditSession::new(&base, &delta, &sched, small_cfg()).unwrap();
        for c in 0..2 {
            let tgt: Vec<_> = corpus.images.iter().filter(|i| i.concept_id == c).take(3).collect();
            let v = s.audit(c, &irr, &tgt, &mut cache).unwrap();
            assert_eq!(v.features[0].len(), 8);
            assert_eq!(v.timings.calibration_reused, c > 0);
        }
        assert_eq!(s.irrelevant_extractions, 1);
        // the cache serves a second model's base errors
        let misses = cache.misses;
        let mut s2 = AuditSession::new(&base, &delta, &sched, small_cfg()).unwrap();
        s2.calibrate(&irr, &mut cache).unwrap();
        assert_eq!(cache.misses, misses);
    }

    #[test]
    fn budget_floor() {
        let (base, sched, corpus) = setup();
        let delta = init_delta(&base, 2, TargetFilter::Attention, 3).unwrap();
        let cfg = AuditConfig {
            irrelevant_budget: 4,
            ..small_cfg()
        };
        assert!(matches!(AuditSession::new(&base, &delta, &sched, cfg), Err(Error::Config(_))));
        let irr: Vec<_> = corpus.images.iter().take(5).collect();
        let mut s = AuditSession::new(&base, &delta, &sched, small_cfg()).unwrap();
        assert!(matches!(s.calibrate(&irr, &mut BaseErrorCache::new()), Err(Error::Config(_))));
    }

    #[test]
    fn vote_ties_are_negative() {
        assert_eq!(majority_vote(&[true, false]), Decision::CannotGenerate);
        assert_eq!(majority_vote(&[true, true, false]), Decision::CanGenerate);
        assert_eq!(majority_vote(&[false]), Decision::CannotGenerate);
    }

    #[test]
    fn grid_and_config_checks() {
        assert_eq!(even_grid(100, 8), vec![13, 25, 38, 50, 63, 75, 88, 100]);
        assert_eq!(even_grid(16, 8), vec![2, 4, 6, 8, 10, 12, 14, 16]);
        let mut c = AuditConfig::for_steps(100);
        c.validate(100).unwrap();
        c.gamma = 5;
        assert!(c.validate(100).is_err());
        c.gamma = 50;
        c.t_grid = vec![10, 10];
        assert!(c.validate(100).is_err());
    }
}
