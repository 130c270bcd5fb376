use serde::{Deserialize, Serialize};

use crate::embed::{FreezeMask, LayerGroup};
use crate::error::{Error, Result};

/// Staged trainability: heads and `log τ` from the start, then one more group every
/// `interval` epochs, in `order`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnfreezeSchedule {
    pub interval: usize,
    pub order: Vec<LayerGroup>,
}

impl Default for UnfreezeSchedule {
    fn default() -> Self {
        Self {
            interval: 5,
            order: vec![LayerGroup::G3, LayerGroup::G2, LayerGroup::G1],
        }
    }
}

impl UnfreezeSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Config("unfreeze interval must be positive".into()));
        }
        let mut seen = Vec::new();
        for &g in &self.order {
            if matches!(g, LayerGroup::Heads | LayerGroup::LogTemperature) || seen.contains(&g) {
                return Err(Error::Config(format!("invalid unfreeze order {:?}", self.order)));
            }
            seen.push(g);
        }
        Ok(())
    }

    pub fn mask_at(&self, epoch: usize) -> FreezeMask {
        let mut mask = FreezeMask::with(&[LayerGroup::Heads, LayerGroup::LogTemperature]);
        let unlocked = (epoch / self.interval).min(self.order.len());
        for &g in &self.order[..unlocked] {
            mask.set(g, true);
        }
        mask
    }

    /// Epochs at which the trainable set grows.
    pub fn unfreeze_epochs(&self) -> Vec<usize> {
        (1..=self.order.len()).map(|k| k * self.interval).collect()
    }
}

pub fn unfreeze_schedule(epoch: usize, schedule: &UnfreezeSchedule) -> FreezeMask {
    schedule.mask_at(epoch)
}
