use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, NamedTensor};
use crate::error::{Error, Result};

use super::model::{Arch, Denoiser};
use super::schedule::{NoiseSchedule, ScheduleKind};

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Arch,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub vocab: usize,
}

/// A trained network together with the schedule it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let header = CheckpointHeader {
            arch: self.model.arch,
            schedule: self.schedule.kind,
            steps: self.schedule.steps(),
            vocab: self.model.arch.vocab,
        };
        let mut c = Container::new(CHECKPOINT_KIND, &header)?;
        for (name, t) in self.model.names().iter().zip(self.model.tensors()) {
            c.push(NamedTensor::from_matrix(name, t));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let h: CheckpointHeader = c.header()?;
        if h.vocab != h.arch.vocab {
            return Err(Error::Format(format!(
                "header vocab {} disagrees with arch vocab {}",
                h.vocab, h.arch.vocab
            )));
        }
        let named = c
            .tensors
            .iter()
            .map(|t| Ok((t.name.clone(), t.to_matrix()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: Denoiser::from_named(h.arch, named)?,
            schedule: NoiseSchedule::new(h.schedule, h.steps)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
