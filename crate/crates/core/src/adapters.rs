//! Low-rank parameter deltas `W' = W + α·B·A` and the three views of a
//! fine-tuned model used by the auditor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, NamedTensor};
use crate::diffusion::model::{checksum_tensors, Denoiser, ParamSource};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{normal_matrix, seeded};

pub const LORA_KIND: &str = "lora";
pub const DEFAULT_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyMode {
    /// `W`
    Base,
    /// `W' = W + ΔW`
    FullFinetuned,
    /// `W''`: `W'` with every cross-attention delta dropped.
    CrossAttnFrozen,
}

/// Which parameters receive a low-rank delta.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFilter {
    /// Every self- and cross-attention projection.
    Attention,
    SelfAttention,
    CrossAttention,
}

impl TargetFilter {
    pub fn matches(self, name: &str) -> bool {
        let proj = ["wq", "wk", "wv", "wo"]
            .iter()
            .any(|w| name.ends_with(&format!(".{w}")));
        proj && match self {
            Self::Attention => name.contains(".self_attn.") || name.contains(".cross_attn."),
            Self::SelfAttention => name.contains(".self_attn."),
            Self::CrossAttention => name.contains(".cross_attn."),
        }
    }
}

pub fn is_cross_attention(name: &str) -> bool {
    TargetFilter::CrossAttention.matches(name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraEntry {
    pub target: String,
    /// `d × r`
    pub b: Matrix,
    /// `r × k`
    pub a: Matrix,
}

impl LoraEntry {
    pub fn product(&self, alpha: f64) -> Result<Matrix> {
        Ok(self.b.matmul(&self.a)?.scale(alpha))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraDelta {
    pub rank: usize,
    pub alpha: f64,
    pub entries: Vec<LoraEntry>,
}

#[derive(Serialize, Deserialize)]
struct LoraHeader {
    rank: usize,
    alpha: f64,
    targets: Vec<String>,
}

pub fn init_delta(model: &Denoiser, rank: usize, targets: TargetFilter, seed: u64) -> Result<LoraDelta> {
    init_delta_with_alpha(model, rank, targets, 1.0, seed)
}

pub fn init_delta_with_alpha(
    model: &Denoiser,
    rank: usize,
    targets: TargetFilter,
    alpha: f64,
    seed: u64,
) -> Result<LoraDelta> {
    if rank == 0 {
        return Err(Error::arg("LoRA rank must be at least 1"));
    }
    let mut rng = seeded(seed);
    let mut entries = Vec::new();
    for (name, w) in model.names().iter().zip(model.tensors()) {
        if !targets.matches(name) {
            continue;
        }
        let (d, k) = w.shape();
        if rank >= d.min(k) {
            return Err(Error::arg(format!(
                "rank {rank} is not below min({d}, {k}) for {name}"
            )));
        }
        entries.push(LoraEntry {
            target: name.clone(),
            b: Matrix::zeros(d, rank),
            a: normal_matrix(rank, k, 1.0 / (k as f64).sqrt(), &mut rng),
        });
    }
    if entries.is_empty() {
        return Err(Error::arg(format!("no parameter matches target filter {targets:?}")));
    }
    Ok(LoraDelta {
        rank,
        alpha,
        entries,
    })
}

impl LoraDelta {
    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.target.as_str())
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().map(|e| e.a.data().len() + e.b.data().len()).sum()
    }

    /// `Σ r(d+k) / Σ dk` over all targets.
    pub fn overhead_ratio(&self) -> f64 {
        let full: usize = self.entries.iter().map(|e| e.b.rows() * e.a.cols()).sum();
        self.trainable_count() as f64 / full as f64
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.b.data().iter().all(|v| *v == 0.0))
    }

    pub fn checksum(&self) -> u64 {
        checksum_tensors(self.entries.iter().flat_map(|e| [&e.b, &e.a]))
    }

    pub fn validate_against(&self, base: &Denoiser) -> Result<()> {
        for e in &self.entries {
            let id = base.id_of(&e.target).ok_or_else(|| {
                Error::Integrity(format!("LoRA target {} not present in base model", e.target))
            })?;
            let w = &base.tensors()[id];
            if e.b.shape() != (w.rows(), self.rank) || e.a.shape() != (self.rank, w.cols()) {
                return Err(Error::Integrity(format!(
                    "LoRA factors for {} are {:?}·{:?}, base weight is {:?}",
                    e.target,
                    e.b.shape(),
                    e.a.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = LoraHeader {
            rank: self.rank,
            alpha: self.alpha,
            targets: self.targets().map(String::from).collect(),
        };
        let mut c = Container::new(LORA_KIND, &header)?;
        for e in &self.entries {
            c.push(NamedTensor::from_matrix(format!("{}.lora_b", e.target), &e.b));
            c.push(NamedTensor::from_matrix(format!("{}.lora_a", e.target), &e.a));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(LORA_KIND)?;
        let h: LoraHeader = c.header()?;
        if h.rank == 0 {
            return Err(Error::Format("LoRA rank 0 in header".into()));
        }
        let entries = h
            .targets
            .iter()
            .map(|t| {
                let b = c.tensor(&format!("{t}.lora_b"))?.to_matrix()?;
                let a = c.tensor(&format!("{t}.lora_a"))?.to_matrix()?;
                if b.cols() != h.rank || a.rows() != h.rank {
                    return Err(Error::Format(format!("factor ranks for {t} disagree with header")));
                }
                Ok(LoraEntry {
                    target: t.clone(),
                    b,
                    a,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if c.tensors.len() != 2 * entries.len() {
            return Err(Error::Format("LoRA file holds tensors outside its manifest".into()));
        }
        Ok(Self {
            rank: h.rank,
            alpha: h.alpha,
            entries,
        })
    }
}

pub fn save_delta(delta: &LoraDelta, path: &Path) -> Result<()> {
    delta.to_container()?.write(path)
}

pub fn load_delta(path: &Path) -> Result<LoraDelta> {
    LoraDelta::from_container(&Container::read(path)?)
}

/// Base parameters with some tensors replaced by `W + α·BA`.
#[derive(Clone, Debug)]
pub struct AdaptedParams<'a> {
    base: &'a Denoiser,
    overrides: Vec<Option<Matrix>>,
    pub mode: ApplyMode,
}

impl ParamSource for AdaptedParams<'_> {
    fn denoiser(&self) -> &Denoiser {
        self.base
    }

    #[inline]
    fn tensor(&self, id: usize) -> &Matrix {
        self.overrides[id]
            .as_ref()
            .unwrap_or_else(|| &self.base.tensors()[id])
    }
}

impl<'a> AdaptedParams<'a> {
    pub fn base(&self) -> &'a Denoiser {
        self.base
    }

    /// Ids of tensors that differ from the base model in this view.
    pub fn modified(&self) -> Vec<usize> {
        (0..self.overrides.len())
            .filter(|&i| self.overrides[i].is_some())
            .collect()
    }

    pub fn to_denoiser(&self) -> Denoiser {
        let mut net = self.base.clone();
        for (id, o) in self.overrides.iter().enumerate() {
            if let Some(m) = o {
                net.tensors_mut()[id] = m.clone();
            }
        }
        net
    }
}

pub fn effective_params<'a>(
    base: &'a Denoiser,
    delta: &LoraDelta,
    mode: ApplyMode,
) -> Result<AdaptedParams<'a>> {
    delta.validate_against(base)?;
    let mut overrides = vec![None; base.tensors().len()];
    if mode != ApplyMode::Base {
        for e in &delta.entries {
            if mode == ApplyMode::CrossAttnFrozen && is_cross_attention(&e.target) {
                continue;
            }
            let id = base.id_of(&e.target).expect("validated");
            let mut w = base.tensors()[id].clone();
            w.add_assign(&e.product(delta.alpha)?)?;
            overrides[id] = Some(w);
        }
    }
    Ok(AdaptedParams {
        base,
        overrides,
        mode,
    })
}
