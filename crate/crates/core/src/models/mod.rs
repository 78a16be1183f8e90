//! Model graphs: architecture builders, inference sessions, and the EVSM
//! container format.

mod builders;
mod container;
mod session;

pub use builders::{
    build_cnn_mlp, build_cnn_s4d, build_from_config, build_mcu, build_mcu_s4d, build_s4d_head,
    ArchKind, CnnMlpConfig, McuConfig, ModelConfig, NeuronMode, S4dHeadConfig,
};
pub use container::{load_model, save_model};
pub use session::InferenceSession;

use crate::error::{Error, Result};
use crate::events::Shape;
use crate::layers::{dense_synops, LayerSpec, SkipSource};
use serde::{Deserialize, Serialize};

/// How per-step outputs are turned into a fall probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    /// Per-class sums of output spike values over the sample.
    SpikeCount,
    /// Logistic of the maximum logit difference over the sample.
    MaxLogitDiff,
}

/// Spatial patching of the backbone input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Patch side in pixels.
    pub patch: usize,
    /// Patch stride in pixels; overlap is patch - stride.
    pub stride: usize,
}

impl PatchConfig {
    pub fn validate(&self, input_side: usize) -> Result<()> {
        if self.patch == 0 || self.stride == 0 {
            return Err(Error::Config("patch and stride must be positive".into()));
        }
        if self.stride > self.patch {
            return Err(Error::Config(format!(
                "patch stride {} exceeds patch size {}",
                self.stride, self.patch
            )));
        }
        if self.patch > input_side {
            return Err(Error::Config(format!(
                "patch size {} exceeds input side {}",
                self.patch, input_side
            )));
        }
        if (input_side - self.patch) % self.stride != 0 {
            return Err(Error::Config(format!(
                "(input {} - patch {}) not divisible by stride {}",
                input_side, self.patch, self.stride
            )));
        }
        Ok(())
    }

    /// Patches per axis.
    pub fn grid(&self, input_side: usize) -> usize {
        (input_side - self.patch) / self.stride + 1
    }

    /// Row-major top-left offsets of every patch.
    pub fn offsets(&self, input_side: usize) -> Vec<(usize, usize)> {
        let g = self.grid(input_side);
        let mut out = Vec::with_capacity(g * g);
        for gy in 0..g {
            for gx in 0..g {
                out.push((gy * self.stride, gx * self.stride));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub name: String,
    /// Full input frame shape.
    pub input: Shape,
    /// Algorithmic timestep the model is meant to run at.
    pub timestep_us: u64,
    /// Consecutive timesteps whose outputs form one prediction.
    pub decision_group: u32,
    /// Input frames accumulated in binary mode.
    pub binary_input: bool,
    pub decision_mode: DecisionMode,
    /// Hardware pipeline stage count (residual blocks for the patched
    /// backbone, synapse-bearing layers otherwise).
    pub pipeline_stages: usize,
    pub patch: Option<PatchConfig>,
    /// True for backbone-only graphs without a 2-unit classifier head.
    pub feature_extractor: bool,
}

/// Immutable layer topology with 8-bit quantized weights.
///
/// `layers[0..backbone_len]` is the backbone segment that runs once per
/// patch under patched inference; the remainder consumes the assembled
/// feature map once per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub meta: ModelMeta,
    pub layers: Vec<LayerSpec>,
    pub backbone_len: usize,
}

impl ModelGraph {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("model has no layers".into()));
        }
        if self.backbone_len > self.layers.len() {
            return Err(Error::Validation("backbone length exceeds layer count".into()));
        }
        for spec in &self.layers {
            spec.validate()?;
        }

        // Segment input shapes: the backbone sees the patch (or the full
        // frame), the head segment sees the assembled map.
        let first_in = match &self.meta.patch {
            Some(p) => {
                p.validate(self.meta.input.h)?;
                p.validate(self.meta.input.w)?;
                Shape::new(self.meta.input.c, p.patch, p.patch)
            }
            None => self.meta.input,
        };
        if self.layers[0].in_shape != first_in {
            return Err(Error::Validation(format!(
                "first layer expects {}, model input segment is {}",
                self.layers[0].in_shape, first_in
            )));
        }
        for i in 1..self.layers.len() {
            if i == self.backbone_len && self.meta.patch.is_some() {
                let p = self.meta.patch.as_ref().expect("checked");
                let bb_out = self.layers[self.backbone_len - 1].out_shape;
                let (gy, gx) = (p.grid(self.meta.input.h), p.grid(self.meta.input.w));
                let assembled = Shape::new(bb_out.c, gy * bb_out.h, gx * bb_out.w);
                if self.layers[i].in_shape != assembled {
                    return Err(Error::Validation(format!(
                        "head expects {}, assembled map is {}",
                        self.layers[i].in_shape, assembled
                    )));
                }
            } else if self.layers[i].in_shape != self.layers[i - 1].out_shape {
                return Err(Error::Validation(format!(
                    "layer '{}' expects {}, predecessor produces {}",
                    self.layers[i].name,
                    self.layers[i].in_shape,
                    self.layers[i - 1].out_shape
                )));
            }
            if let Some(SkipSource::Layer(j)) = self.layers[i].skip {
                if j >= i {
                    return Err(Error::Validation(format!(
                        "layer '{}' skip source {} is not an earlier layer",
                        self.layers[i].name, j
                    )));
                }
                let same_segment = (j < self.backbone_len) == (i < self.backbone_len);
                if !same_segment {
                    return Err(Error::Validation(
                        "skip connections may not cross the patch boundary".into(),
                    ));
                }
            }
        }

        if self.meta.patch.is_some() {
            for spec in &self.layers[..self.backbone_len] {
                if spec.neuron.is_stateful() {
                    return Err(Error::Config(format!(
                        "patched inference requires a stateless backbone; layer '{}' is stateful",
                        spec.name
                    )));
                }
            }
        }

        if !self.meta.feature_extractor {
            let out = self.layers.last().expect("nonempty").out_shape;
            if out.len() != 2 {
                return Err(Error::Validation(format!(
                    "classifier must end in 2 output units, got {}",
                    out.len()
                )));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::n_params).sum()
    }

    /// Patches evaluated per timestep (1 when unpatched).
    pub fn patches_per_step(&self) -> usize {
        match &self.meta.patch {
            Some(p) => p.grid(self.meta.input.h) * p.grid(self.meta.input.w),
            None => 1,
        }
    }

    /// SynOps one timestep would cost with dense (all-nonzero) processing,
    /// accounting for backbone re-evaluation under patching.
    pub fn dense_synops_per_step(&self) -> u64 {
        let patches = self.patches_per_step() as u64;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mult = if i < self.backbone_len { patches } else { 1 };
                dense_synops(spec) * mult
            })
            .sum()
    }

    /// Synapse-bearing layer count (fall-through hardware steps).
    pub fn synapse_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.has_synapses()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_grid_covers_160_with_25_patches() {
        let cfg = PatchConfig { patch: 40, stride: 30 };
        cfg.validate(160).unwrap();
        assert_eq!(cfg.grid(160), 5);
        let offsets = cfg.offsets(160);
        assert_eq!(offsets.len(), 25);
        let expect: Vec<usize> = vec![0, 30, 60, 90, 120];
        for (i, (oy, ox)) in offsets.iter().enumerate() {
            assert_eq!(*oy, expect[i / 5]);
            assert_eq!(*ox, expect[i % 5]);
        }
    }

    #[test]
    fn patch_validation_rejects_misaligned_grid() {
        let cfg = PatchConfig { patch: 40, stride: 33 };
        assert!(cfg.validate(160).is_err());
        let cfg = PatchConfig { patch: 40, stride: 50 };
        assert!(cfg.validate(160).is_err());
    }
}
