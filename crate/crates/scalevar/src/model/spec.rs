//! Structural specifications: backbone shape, head shape, detector bindings,
//! parameter-count formulas, and filter-count compression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{receptive_field_chain, LayerDesc, StageSpec};
use crate::partition::{assign_stages, ScaleRange, SplitScheme};
use crate::sampler;

/// One backbone stage: `blocks` 3x3 convolutions, the first with stride 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub blocks: usize,
    pub channels: usize,
}

/// Backbone shape. Cumulative strides form the ladder
/// `stem_stride * 2^i` for stage `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub stem_stride: u32,
    pub stages: Vec<StageConfig>,
}

impl BackboneSpec {
    /// Desk-scale default: strides {2, 4, 8, 16}, thin channels.
    pub fn desk() -> Self {
        BackboneSpec {
            stem_stride: 2,
            stages: vec![
                StageConfig { name: "s2".into(), blocks: 1, channels: 6 },
                StageConfig { name: "s4".into(), blocks: 2, channels: 12 },
                StageConfig { name: "s8".into(), blocks: 2, channels: 24 },
                StageConfig { name: "s16".into(), blocks: 2, channels: 36 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("backbone needs at least one stage"));
        }
        if self.stem_stride < 1 {
            return Err(Error::invalid("stem stride must be >= 1"));
        }
        for s in &self.stages {
            if s.blocks == 0 || s.channels == 0 {
                return Err(Error::invalid(format!(
                    "stage {} must have positive blocks and channels",
                    s.name
                )));
            }
        }
        Ok(())
    }

    pub fn cumulative_strides(&self) -> Vec<u32> {
        (0..self.stages.len()).map(|i| self.stem_stride << i).collect()
    }

    pub fn max_stride(&self) -> u32 {
        self.stem_stride << (self.stages.len() - 1)
    }

    /// Per-stage 3x3 conv chains (first conv of each stage downsamples).
    pub fn layer_descs(&self) -> Vec<Vec<LayerDesc>> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let first_stride = if i == 0 { self.stem_stride } else { 2 };
                (0..s.blocks)
                    .map(|b| LayerDesc::new(3, if b == 0 { first_stride } else { 1 }))
                    .collect()
            })
            .collect()
    }

    /// Geometry view of the stages: cumulative stride and receptive field.
    pub fn stage_specs(&self) -> Vec<StageSpec> {
        let mut chain: Vec<LayerDesc> = Vec::new();
        let mut out = Vec::with_capacity(self.stages.len());
        for (stage, descs) in self.stages.iter().zip(self.layer_descs()) {
            chain.extend(descs);
            let (rf, stride) = receptive_field_chain(&chain).expect("non-empty chain");
            out.push(StageSpec::new(stage.name.clone(), stride, rf, stage.channels));
        }
        out
    }

    /// Input channels of each stage (grayscale input = 1 channel).
    fn stage_inputs(&self) -> Vec<usize> {
        let mut prev = 1;
        self.stages
            .iter()
            .map(|s| {
                let v = prev;
                prev = s.channels;
                v
            })
            .collect()
    }

    /// Convolution parameter count (weights + biases) by formula.
    pub fn conv_param_count(&self) -> usize {
        let mut count = 0;
        for (stage, in_c) in self.stages.iter().zip(self.stage_inputs()) {
            // First block maps in_c -> channels, the rest channels -> channels.
            count += stage.channels * in_c * 9 + stage.channels;
            count += (stage.blocks - 1) * (stage.channels * stage.channels * 9 + stage.channels);
        }
        count
    }
}

/// Shape of one detector head (shared across detectors): the proposal branch
/// is a 3x3 conv plus per-anchor objectness/box outputs; the classifier
/// branch is two 3x3 convs followed by two fully connected layers and the
/// score/box outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub rpn_channels: usize,
    pub cls_channels: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub template: u32,
}

impl HeadSpec {
    pub fn desk() -> Self {
        HeadSpec { rpn_channels: 16, cls_channels: 16, fc1: 64, fc2: 32, template: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rpn_channels == 0 || self.cls_channels == 0 || self.fc1 == 0 || self.fc2 == 0 {
            return Err(Error::invalid("head channel/unit counts must be positive"));
        }
        if self.template == 0 {
            return Err(Error::invalid("ROI template must be >= 1"));
        }
        Ok(())
    }
}

/// One detector's binding to the backbone: a scale range plus the indices of
/// its (previous, current) stages. The previous stage has half the stride.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorBinding {
    pub range: ScaleRange,
    pub prev_stage: usize,
    pub curr_stage: usize,
}

/// Binds a scheme's ranges to the deepest stage pairs of the backbone.
pub fn bind_scheme(scheme: &SplitScheme, backbone: &BackboneSpec) -> Result<Vec<DetectorBinding>> {
    backbone.validate()?;
    let stages = backbone.stage_specs();
    let template = crate::geometry::RoiTemplate::new(5)?;
    let assignment = assign_stages(scheme, &stages, template)?;
    let index_of = |name: &str| stages.iter().position(|s| s.name == name).expect("stage exists");
    Ok(assignment
        .pairs
        .iter()
        .map(|p| DetectorBinding {
            range: p.range,
            prev_stage: index_of(&p.prev_stage.name),
            curr_stage: index_of(&p.curr_stage.name),
        })
        .collect())
}

/// Full structural description of a model; enough to rebuild it and to
/// digest-check a checkpoint against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    pub bindings: Vec<DetectorBinding>,
}

/// Parameter counts split by layer family, computed from specs alone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub conv: usize,
    pub fc: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.conv + self.fc
    }
}

/// Predicted parameter counts for a model with the given structure.
pub fn predicted_param_counts(spec: &ModelSpec) -> ParamCounts {
    let mut counts = ParamCounts { conv: spec.backbone.conv_param_count(), fc: 0 };
    let channels: Vec<usize> = spec.backbone.stages.iter().map(|s| s.channels).collect();
    let h = &spec.head;
    let t = h.template as usize;
    for b in &spec.bindings {
        let curr_c = channels[b.curr_stage];
        let hyper_c = channels[b.prev_stage] + curr_c;
        let anchors = sampler::anchor_count(&b.range);
        // Proposal branch: 3x3 conv, then 1x1 objectness and 1x1 box outputs.
        counts.conv += h.rpn_channels * curr_c * 9 + h.rpn_channels;
        counts.conv += anchors * h.rpn_channels + anchors;
        counts.conv += 4 * anchors * h.rpn_channels + 4 * anchors;
        // Classifier branch convs.
        counts.conv += h.cls_channels * hyper_c * 9 + h.cls_channels;
        counts.conv += h.cls_channels * h.cls_channels * 9 + h.cls_channels;
        // Fully connected stack.
        counts.fc += h.fc1 * (h.cls_channels * t * t) + h.fc1;
        counts.fc += h.fc2 * h.fc1 + h.fc2;
        counts.fc += h.fc2 + 1; // score
        counts.fc += 4 * h.fc2 + 4; // box deltas
    }
    counts
}

fn scaled(c: usize, factor: f64) -> usize {
    ((c as f64 * factor).ceil() as usize).max(1)
}

/// Scales every channel and unit count by `factor` (rounded up, minimum 1)
/// and reports the predicted total parameter-count ratio of the new model.
pub fn compress(spec: &ModelSpec, factor: f64) -> Result<(ModelSpec, f64)> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::invalid("compression factor must lie in (0, 1]"));
    }
    let mut out = spec.clone();
    for s in &mut out.backbone.stages {
        s.channels = scaled(s.channels, factor);
    }
    out.head.rpn_channels = scaled(spec.head.rpn_channels, factor);
    out.head.cls_channels = scaled(spec.head.cls_channels, factor);
    out.head.fc1 = scaled(spec.head.fc1, factor);
    out.head.fc2 = scaled(spec.head.fc2, factor);
    let ratio = predicted_param_counts(&out).total() as f64 / predicted_param_counts(spec).total() as f64;
    Ok((out, ratio))
}
