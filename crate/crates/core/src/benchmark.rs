//! Seeded desk benchmark: one base model, a matrix of fine-tuned deltas and
//! the error tables from which every audit variant is evaluated.
//!
//! Concept layout of the corpus: `[0, n)` benchmark concepts,
//! then the irrelevant pool, then the concepts the base model is trained on.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{LoraDelta, TargetFilter, DEFAULT_RANK};
use crate::audit::{
    vote, AuditConfig, AuditSession, AuditVerdict, BaseErrorCache, Branches, Decision, ImageErrors,
};
use crate::dataset::{select, Corpus, LabeledImage, Split};
use crate::diffusion::model::{Arch, Denoiser};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::outlier::{Detector, DetectorKind, ForestParams};
use crate::rng::derive;
use crate::training::{finetune, train_base, Attack, Optimizer, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub arch: Arch,
    pub per_concept: usize,
    pub bench_concepts: usize,
    pub irrelevant_concepts: usize,
    pub base_concepts: usize,
    pub targets_per_audit: usize,
    pub base_train: TrainConfig,
    pub finetune: TrainConfig,
    pub rank: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 100,
            schedule: ScheduleKind::Cosine,
            arch: Arch::default(),
            per_concept: 26,
            bench_concepts: 10,
            irrelevant_concepts: 20,
            base_concepts: 15,
            targets_per_audit: 10,
            base_train: TrainConfig {
                lr: 0.2,
                epochs: 150,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                lr: 0.003,
                batch: 5,
                optimizer: Optimizer::Adam,
                uncond_prob: 0.3,
                ..TrainConfig::default()
            },
            rank: DEFAULT_RANK,
        }
    }
}

impl BenchmarkSpec {
    pub fn total_concepts(&self) -> usize {
        self.bench_concepts + self.irrelevant_concepts + self.base_concepts
    }

    pub fn bench_range(&self) -> Range<usize> {
        0..self.bench_concepts
    }

    pub fn irrelevant_range(&self) -> Range<usize> {
        self.bench_concepts..self.bench_concepts + self.irrelevant_concepts
    }

    pub fn base_range(&self) -> Range<usize> {
        self.bench_concepts + self.irrelevant_concepts..self.total_concepts()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bench_concepts < 2 {
            return Err(Error::Config("benchmark needs at least 2 concepts".into()));
        }
        if self.irrelevant_concepts == 0 || self.base_concepts == 0 {
            return Err(Error::Config("irrelevant and base concept counts must be positive".into()));
        }
        if self.targets_per_audit == 0 || self.targets_per_audit > self.per_concept / 2 {
            return Err(Error::Config(format!(
                "targets per audit must lie in [1, {}]",
                self.per_concept / 2
            )));
        }
        self.arch.validate()
    }
}

/// A fine-tuned delta and the concept it is audited for.
#[derive(Clone, Debug)]
pub struct BenchModel {
    pub trained_concepts: Vec<usize>,
    pub audited_concept: usize,
    pub positive: bool,
    pub delta: LoraDelta,
    pub report: TrainReport,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub corpus: Corpus,
    pub sched: NoiseSchedule,
    pub base: Denoiser,
    pub base_report: Option<TrainReport>,
}

impl Benchmark {
    /// Generates the corpus and trains the base model.
    pub fn prepare(spec: BenchmarkSpec) -> Result<Self> {
        spec.validate()?;
        let corpus = Corpus::generate(spec.total_concepts(), spec.per_concept, spec.seed)?;
        let sched = NoiseSchedule::new(spec.schedule, spec.steps)?;
        let mut base = Denoiser::new(spec.arch, derive(spec.seed, &[0xBA5E]))?;
        let data = select(&corpus.images, &spec.base_range().collect::<Vec<_>>(), Some(Split::Train));
        let cfg = TrainConfig {
            seed: derive(spec.seed, &[0xBA5E, 1]),
            ..spec.base_train.clone()
        };
        let report = train_base(&mut base, &data, &sched, &cfg)?;
        Ok(Self {
            spec,
            corpus,
            sched,
            base,
            base_report: Some(report),
        })
    }

    pub fn from_parts(spec: BenchmarkSpec, corpus: Corpus, base: Denoiser, sched: NoiseSchedule) -> Result<Self> {
        spec.validate()?;
        if corpus.specs.len() < spec.total_concepts() {
            return Err(Error::Integrity(format!(
                "corpus has {} concepts, the benchmark needs {}",
                corpus.specs.len(),
                spec.total_concepts()
            )));
        }
        Ok(Self {
            spec,
            corpus,
            sched,
            base,
            base_report: None,
        })
    }

    /// All irrelevant-concept images interleaved by concept, so any
    /// prefix draws from every irrelevant concept.
    pub fn irrelevant_pool(&self) -> Vec<&LabeledImage> {
        let concepts: Vec<usize> = self.spec.irrelevant_range().collect();
        let per: Vec<Vec<&LabeledImage>> = concepts
            .iter()
            .map(|c| select(&self.corpus.images, &[*c], None))
            .collect();
        let longest = per.iter().map(Vec::len).max().unwrap_or(0);
        (0..longest)
            .flat_map(|i| per.iter().filter_map(move |v| v.get(i).copied()))
            .collect()
    }

    /// Held-out images of `concept` used as audit targets.
    pub fn targets(&self, concept: usize) -> Vec<&LabeledImage> {
        select(&self.corpus.images, &[concept], Some(Split::Test))
            .into_iter()
            .take(self.spec.targets_per_audit)
            .collect()
    }

    /// Trains `2n` deltas: for each benchmark concept `j` a positive trained
    /// on `{j, …, j+k−1}` and a negative trained on `{j+1, …, j+k}` (mod n),
    /// both audited for `j`.
    pub fn train_models(&self, attack: Attack, concepts_per_model: usize) -> Result<Vec<BenchModel>> {
        self.train_models_with(attack, concepts_per_model, |_, _| {})
    }

    pub fn train_models_with(
        &self,
        attack: Attack,
        concepts_per_model: usize,
        mut on_model: impl FnMut(usize, &BenchModel),
    ) -> Result<Vec<BenchModel>> {
        let n = self.spec.bench_concepts;
        if concepts_per_model == 0 || concepts_per_model >= n {
            return Err(Error::Config(format!("concepts per model must lie in [1, {})", n)));
        }
        let attack = match attack {
            Attack::PromptDeviation { .. } => Attack::PromptDeviation {
                concepts: self.corpus.specs.iter().filter(|s| s.trigger.is_some()).count(),
            },
            a => a,
        };
        let mut out = Vec::with_capacity(2 * n);
        for j in 0..n {
            for (role, offset) in [(0u64, 0usize), (1, 1)] {
                let concepts: Vec<usize> = (0..concepts_per_model).map(|i| (j + offset + i) % n).collect();
                let data = select(&self.corpus.images, &concepts, Some(Split::Train));
                let cfg = TrainConfig {
                    seed: derive(self.spec.seed, &[0xF7, j as u64, role, concepts_per_model as u64]),
                    attack,
                    ..self.spec.finetune.clone()
                };
                let (delta, report) = finetune(&self.base, &data, &self.sched, self.spec.rank, TargetFilter::Attention, &cfg)?;
                let m = BenchModel {
                    trained_concepts: concepts,
                    audited_concept: j,
                    positive: role == 0,
                    delta,
                    report,
                };
                on_model(out.len(), &m);
                out.push(m);
            }
        }
        Ok(out)
    }

    /// Errors for the irrelevant pool and the audited concept's targets,
    /// with both fine-tuned branches at every grid step.
    pub fn tables(&self, model: &BenchModel, cfg: &AuditConfig, pool: usize, cache: &mut BaseErrorCache) -> Result<CaseTables> {
        let irr = self.irrelevant_pool();
        if pool > irr.len() {
            return Err(Error::Config(format!(
                "pool of {pool} irrelevant images requested, {} available",
                irr.len()
            )));
        }
        let mut session = AuditSession::new(&self.base, &model.delta, &self.sched, cfg.clone())?;
        let started = Instant::now();
        let irrelevant = session.error_table(&irr[..pool], Branches::Both, cache)?;
        let irrelevant_secs = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let targets = session.error_table(&self.targets(model.audited_concept), Branches::Both, cache)?;
        Ok(CaseTables {
            audited_concept: model.audited_concept,
            positive: model.positive,
            t_grid: cfg.t_grid.clone(),
            irrelevant,
            targets,
            irrelevant_secs,
            target_secs: started.elapsed().as_secs_f64(),
        })
    }
}

/// Error tables of one (model, concept) audit case.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseTables {
    pub audited_concept: usize,
    pub positive: bool,
    pub t_grid: Vec<usize>,
    pub irrelevant: Vec<ImageErrors>,
    pub targets: Vec<ImageErrors>,
    pub irrelevant_secs: f64,
    pub target_secs: f64,
}

/// How features are assembled and scored from a [`CaseTables`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub gamma: usize,
    pub budget: usize,
    /// Indices into the grid; `None` keeps every step.
    pub steps: Option<Vec<usize>>,
    pub normalize: bool,
    pub detector: DetectorKind,
    pub forest: ForestParams,
}

impl Variant {
    pub fn from_config(cfg: &AuditConfig) -> Self {
        Self {
            gamma: cfg.gamma,
            budget: cfg.irrelevant_budget,
            steps: None,
            normalize: cfg.normalize,
            detector: cfg.detector,
            forest: cfg.forest.clone(),
        }
    }
}

fn rows(table: &[ImageErrors], v: &Variant) -> Result<Vec<Vec<f64>>> {
    table
        .iter()
        .map(|r| {
            let all = r.cce(v.gamma, v.normalize)?;
            Ok(match &v.steps {
                None => all,
                Some(ix) => ix.iter().map(|i| all[*i]).collect(),
            })
        })
        .collect()
}

impl CaseTables {
    pub fn verdict(&self, v: &Variant) -> Result<AuditVerdict> {
        if v.budget > self.irrelevant.len() {
            return Err(Error::Config(format!(
                "budget {} exceeds the {} irrelevant images extracted",
                v.budget,
                self.irrelevant.len()
            )));
        }
        let train = rows(&self.irrelevant[..v.budget], v)?;
        let detector = Detector::fit(v.detector, &train, &v.forest)?;
        let ids = self.targets.iter().map(|r| r.image_id).collect();
        vote(self.audited_concept, ids, rows(&self.targets, v)?, &detector)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    /// From `(is_positive, decision)` pairs.
    pub fn from_outcomes(outcomes: &[(bool, Decision)]) -> Self {
        let mut m = Metrics::default();
        for (pos, d) in outcomes {
            match (pos, d == &Decision::CanGenerate) {
                (true, true) => m.tp += 1,
                (true, false) => m.fn_ += 1,
                (false, true) => m.fp += 1,
                (false, false) => m.tn += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        m.accuracy = ratio(m.tp + m.tn, outcomes.len());
        m.precision = ratio(m.tp, m.tp + m.fp);
        m.recall = ratio(m.tp, m.tp + m.fn_);
        m.f1 = if m.precision + m.recall > 0.0 {
            2.0 * m.precision * m.recall / (m.precision + m.recall)
        } else {
            0.0
        };
        m
    }
}

/// Verdicts of every case under one variant.
pub fn evaluate(cases: &[CaseTables], v: &Variant) -> Result<(Metrics, Vec<AuditVerdict>)> {
    let verdicts = cases.iter().map(|c| c.verdict(v)).collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<(bool, Decision)> = cases.iter().zip(&verdicts).map(|(c, v)| (c.positive, v.decision)).collect();
    Ok((Metrics::from_outcomes(&outcomes), verdicts))
}

/// Fraction of cases on which two verdict lists agree.
pub fn agreement(a: &[AuditVerdict], b: &[AuditVerdict]) -> f64 {
    let same = a.iter().zip(b).filter(|(x, y)| x.decision == y.decision).count();
    same as f64 / a.len().max(1) as f64
}
