//! Position correction (PCM), gating, and the dynamic iterative inference
//! loop that combines them.
//!
//! A stage adds a learned horizontal offset to each observed box center.
//! Between stages a gate looks at the corrected features and decides whether
//! the sample needs another pass. The final corrected centers are
//! triangulated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BoundingBox, FeatureTuple, StereoRig};
use crate::nn::{MixerConfig, MixerModel, WeightDocument};

/// Mixer regressing one horizontal offset. The head output is expressed in
/// units of `offset_scale_px` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmModel {
    pub mixer: MixerModel,
    pub offset_scale_px: f64,
}

impl PcmModel {
    pub fn new(mixer: MixerModel, offset_scale_px: f64) -> Result<Self> {
        if mixer.config().head_outputs != 1 {
            return Err(Error::InvalidConfig(format!(
                "offset model needs 1 head output, got {}",
                mixer.config().head_outputs
            )));
        }
        if !(offset_scale_px > 0.0 && offset_scale_px.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "offset scale must be positive, got {offset_scale_px}"
            )));
        }
        Ok(Self {
            mixer,
            offset_scale_px,
        })
    }

    pub fn init(config: MixerConfig, offset_scale_px: f64, seed: u64) -> Result<Self> {
        Self::new(MixerModel::init(config, seed)?, offset_scale_px)
    }

    /// Horizontal offset in pixels to add to the observed x coordinate.
    pub fn predict_offset(&self, tuple: &FeatureTuple) -> f64 {
        self.offset_scale_px * self.mixer.forward(&tuple.to_array())[0]
    }
}

/// Two-logit classifier over `{easy, hard}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateModel {
    pub mixer: MixerModel,
}

impl GateModel {
    pub fn new(mixer: MixerModel) -> Result<Self> {
        if mixer.config().head_outputs != 2 {
            return Err(Error::InvalidConfig(format!(
                "gate needs 2 head outputs, got {}",
                mixer.config().head_outputs
            )));
        }
        Ok(Self { mixer })
    }

    pub fn init(config: MixerConfig, seed: u64) -> Result<Self> {
        Self::new(MixerModel::init(config, seed)?)
    }

    pub fn logits(&self, tuple: &FeatureTuple) -> [f64; 2] {
        let out = self.mixer.forward(&tuple.to_array());
        [out[0], out[1]]
    }

    /// Softmax probability of the "hard" class.
    pub fn gate_probability(&self, tuple: &FeatureTuple) -> f64 {
        hard_probability(self.logits(tuple))
    }
}

/// `softmax(logits)[1]`, stable for large magnitudes.
pub fn hard_probability(logits: [f64; 2]) -> f64 {
    // softmax over two classes is the logistic of the logit difference
    let z = logits[1] - logits[0];
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// How far the inference loop may go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InferenceMode {
    /// Gates decide (the normal path).
    #[default]
    Gated,
    /// Every stage runs regardless of the gates.
    Forced,
    /// At most this many stages run, gates still apply before the limit.
    /// `Truncated(0)` is plain triangulation.
    Truncated(usize),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateTrace {
    /// `(O_L, O_R)` per executed stage.
    pub offsets: Vec<(f64, f64)>,
    /// Corrected `(x_l, x_r)` after each executed stage.
    pub corrected_x: Vec<(f64, f64)>,
    /// Averaged gate score after each consulted gate.
    pub gate_scores: Vec<f64>,
    pub stages_executed: usize,
    pub distance: Option<f64>,
}

impl EstimateTrace {
    /// Gate evaluations performed.
    pub fn gates_evaluated(&self) -> usize {
        self.gate_scores.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorStack {
    pub rig: StereoRig,
    pub stages: Vec<PcmModel>,
    pub gates: Vec<GateModel>,
    pub gate_threshold: f64,
}

impl CorrectorStack {
    pub fn new(
        rig: StereoRig,
        stages: Vec<PcmModel>,
        gates: Vec<GateModel>,
        gate_threshold: f64,
    ) -> Result<Self> {
        let stack = Self {
            rig,
            stages,
            gates,
            gate_threshold,
        };
        stack.validate()?;
        Ok(stack)
    }

    /// `n` freshly initialized stages and `n - 1` gates.
    pub fn init(
        rig: StereoRig,
        stages: usize,
        pcm_config: MixerConfig,
        gate_config: MixerConfig,
        gate_threshold: f64,
        seed: u64,
    ) -> Result<Self> {
        let scale = rig.half_diagonal();
        let pcms = (0..stages)
            .map(|i| PcmModel::init(pcm_config, scale, seed.wrapping_add(2 * i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let gates = (0..stages.saturating_sub(1))
            .map(|i| GateModel::init(gate_config, seed.wrapping_add(2 * i as u64 + 1)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rig, pcms, gates, gate_threshold)
    }

    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("a stack needs at least one stage".into()));
        }
        if self.gates.len() + 1 != self.stages.len() {
            return Err(Error::InvalidConfig(format!(
                "{} stages need {} gates, got {}",
                self.stages.len(),
                self.stages.len() - 1,
                self.gates.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err(Error::InvalidConfig(format!(
                "gate threshold must lie in [0, 1], got {}",
                self.gate_threshold
            )));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn estimate_distance(
        &self,
        left: &BoundingBox,
        right: &BoundingBox,
    ) -> (Result<f64>, EstimateTrace) {
        self.estimate_with(left, right, InferenceMode::Gated)
    }

    pub fn estimate_with(
        &self,
        left: &BoundingBox,
        right: &BoundingBox,
        mode: InferenceMode,
    ) -> (Result<f64>, EstimateTrace) {
        let rig = &self.rig;
        let limit = match mode {
            InferenceMode::Truncated(k) => k.min(self.stages.len()),
            _ => self.stages.len(),
        };
        let mut trace = EstimateTrace::default();
        let mut xl = left.x;
        let mut xr = right.x;
        let mut tuple_l = geometry::make_feature_tuple(rig, left);
        let mut tuple_r = geometry::make_feature_tuple(rig, right);

        for stage in 0..limit {
            let o_l = self.stages[stage].predict_offset(&tuple_l);
            let o_r = self.stages[stage].predict_offset(&tuple_r);
            xl += o_l;
            xr += o_r;
            trace.offsets.push((o_l, o_r));
            trace.corrected_x.push((xl, xr));
            trace.stages_executed += 1;

            if stage + 1 == limit {
                break;
            }
            // only y is kept from the detection; w, h pass through unchanged
            tuple_l = geometry::feature_tuple_at(rig, xl, left.y, left.w, left.h);
            tuple_r = geometry::feature_tuple_at(rig, xr, right.y, right.w, right.h);
            if mode != InferenceMode::Forced {
                let gate = &self.gates[stage];
                let t = 0.5 * (gate.gate_probability(&tuple_l) + gate.gate_probability(&tuple_r));
                trace.gate_scores.push(t);
                if t < self.gate_threshold {
                    break;
                }
            }
        }

        let distance = geometry::triangulate(rig, xl, xr);
        trace.distance = distance.as_ref().ok().copied();
        (distance, trace)
    }
}

/// On-disk form of a [`CorrectorStack`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackDocument {
    pub format_version: u32,
    #[serde(rename = "N")]
    pub num_stages: usize,
    pub gate_threshold: f64,
    pub offset_scale_px: Vec<f64>,
    pub rig: StereoRig,
    pub stages: Vec<WeightDocument>,
    pub gates: Vec<WeightDocument>,
}

pub const STACK_FORMAT_VERSION: u32 = 1;

impl CorrectorStack {
    pub fn to_document(&self) -> StackDocument {
        StackDocument {
            format_version: STACK_FORMAT_VERSION,
            num_stages: self.stages.len(),
            gate_threshold: self.gate_threshold,
            offset_scale_px: self.stages.iter().map(|s| s.offset_scale_px).collect(),
            rig: self.rig,
            stages: self.stages.iter().map(|s| (&s.mixer).into()).collect(),
            gates: self.gates.iter().map(|g| (&g.mixer).into()).collect(),
        }
    }

    pub fn from_document(doc: StackDocument) -> Result<Self> {
        if doc.format_version != STACK_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                expected: STACK_FORMAT_VERSION,
                found: doc.format_version,
            });
        }
        if doc.stages.len() != doc.num_stages || doc.offset_scale_px.len() != doc.num_stages {
            return Err(Error::Shape {
                name: "stages".into(),
                expected: doc.num_stages,
                found: doc.stages.len(),
            });
        }
        let stages = doc
            .stages
            .into_iter()
            .zip(doc.offset_scale_px)
            .map(|(w, s)| PcmModel::new(MixerModel::try_from(w)?, s))
            .collect::<Result<Vec<_>>>()?;
        let gates = doc
            .gates
            .into_iter()
            .map(|w| GateModel::new(MixerModel::try_from(w)?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(doc.rig, stages, gates, doc.gate_threshold)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
