//! Tensor- and pipeline-parallel rank layout.

use crate::capture::{HookRegistry, HookSite, HookSpec};
use crate::exporter::RankCoords;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankTopology {
    pub tp_degree: u32,
    pub pp_stages: u32,
}

impl Default for RankTopology {
    fn default() -> Self {
        Self::single()
    }
}

impl RankTopology {
    pub fn single() -> Self {
        Self {
            tp_degree: 1,
            pp_stages: 1,
        }
    }

    pub fn validate(&self, layers: u32, hidden: usize) -> Result<(), String> {
        if self.tp_degree == 0 || self.pp_stages == 0 {
            return Err("tp_degree and pp_stages must be > 0".into());
        }
        if !hidden.is_multiple_of(self.tp_degree as usize) {
            return Err(format!("hidden {hidden} is not divisible by tp_degree {}", self.tp_degree));
        }
        if self.pp_stages > layers {
            return Err(format!("{} pipeline stages for {layers} layers", self.pp_stages));
        }
        Ok(())
    }

    pub fn ranks(&self) -> Vec<RankCoords> {
        (0..self.pp_stages)
            .flat_map(|pp_stage| (0..self.tp_degree).map(move |tp_rank| RankCoords { tp_rank, pp_stage }))
            .collect()
    }

    /// Stage owning `layer`; stages are contiguous, balanced layer ranges.
    pub fn stage_of_layer(&self, layer: u32, layers: u32) -> u32 {
        (layer as u64 * self.pp_stages as u64 / layers as u64) as u32
    }

    pub fn shard_width(&self, hidden: usize) -> usize {
        hidden / self.tp_degree as usize
    }

    /// Whether `hook` is captured on `rank`. Hooks without a hidden axis are
    /// replicated across tensor-parallel ranks and captured on rank 0 only.
    pub fn fires_on(&self, hook: &HookSpec, rank: RankCoords, layers: u32) -> bool {
        let stage = match hook.site {
            HookSite::Input => 0,
            HookSite::Layer(l) => self.stage_of_layer(l, layers),
            HookSite::Output => self.pp_stages - 1,
        };
        stage == rank.pp_stage && (hook.shape.shard_axis().is_some() || rank.tp_rank == 0)
    }

    pub fn fire_mask(&self, registry: &HookRegistry, rank: RankCoords, layers: u32) -> Vec<bool> {
        registry
            .hooks()
            .iter()
            .map(|h| self.fires_on(h, rank, layers))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{install_hooks, DType, Dim, HookDecl, HookScope, ModelSpec, ShapeTemplate};

    #[test]
    fn stages_partition_layers_contiguously() {
        for (layers, pp) in [(36, 2), (36, 4), (7, 3), (5, 5)] {
            let t = RankTopology { tp_degree: 1, pp_stages: pp };
            let stages: Vec<u32> = (0..layers).map(|l| t.stage_of_layer(l, layers)).collect();
            assert!(stages.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
            assert_eq!(stages[0], 0);
            assert_eq!(*stages.last().unwrap(), pp - 1);
        }
    }

    #[test]
    fn ranks_enumerate_the_grid() {
        let t = RankTopology { tp_degree: 2, pp_stages: 2 };
        assert_eq!(t.ranks().len(), 4);
        assert_eq!(t.shard_width(8), 4);
        assert!(t.validate(4, 8).is_ok());
        assert!(t.validate(4, 9).is_err());
        assert!(RankTopology { tp_degree: 1, pp_stages: 5 }.validate(4, 8).is_err());
    }

    #[test]
    fn placement_of_hooks() {
        let reg = install_hooks(
            &ModelSpec { layers: 4, hidden: 8 },
            &[
                HookDecl::global("embed", HookScope::Input, ShapeTemplate::hidden_state(), DType::F16),
                HookDecl::per_layer("hidden", ShapeTemplate::hidden_state(), DType::F16),
                HookDecl::global("ids", HookScope::Output, ShapeTemplate(vec![Dim::Tokens]), DType::I32),
            ],
        )
        .unwrap();
        let t = RankTopology { tp_degree: 2, pp_stages: 2 };
        let r = |tp_rank, pp_stage| RankCoords { tp_rank, pp_stage };
        // embed, layers 0..4, ids
        assert_eq!(t.fire_mask(&reg, r(0, 0), 4), [true, true, true, false, false, false]);
        assert_eq!(t.fire_mask(&reg, r(1, 0), 4), [true, true, true, false, false, false]);
        assert_eq!(t.fire_mask(&reg, r(0, 1), 4), [false, false, false, true, true, true]);
        assert_eq!(t.fire_mask(&reg, r(1, 1), 4), [false, false, false, true, true, false]);
    }
}
