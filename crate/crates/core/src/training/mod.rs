//! Stage-wise training of the correction stack.
//!
//! Stage 1 fits an offset model on every sample by back-propagating the
//! squared distance error through the compensated triangulation. Its
//! per-sample relative errors then label each sample easy or hard; a gate
//! learns those labels, and the next offset model is fit on the hard samples
//! only, starting from the stage-1 corrected positions. Further stages repeat
//! the pattern on the remaining hard samples.

mod loss;
mod optim;

pub use loss::{error_rate, gate_loss, gate_loss_grad, hard_label, pcm_loss, total_loss, HardLabel};
pub use optim::{sgd_step, OptimizerState, Schedule, SgdConfig};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::correction::{CorrectorStack, GateModel, InferenceMode, PcmModel};
use crate::error::{Error, Result};
use crate::eval::abs_rel;
use crate::geometry::{self, FeatureTuple, StereoRig};
use crate::nn::{GradientBuffer, MixerConfig, TOKENS};
use crate::rng;
use crate::simdata::DatasetRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Epochs per training phase (each offset model and each gate).
    pub epochs: usize,
    /// Fraction of each phase's steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub batch_size: usize,
    /// Relative error above which a sample counts as hard.
    pub hard_threshold: f64,
    /// Weight of the gate cross-entropy.
    pub lambda: f64,
    pub stages: usize,
    /// Gate probability below which inference stops.
    pub gate_threshold: f64,
    /// Samples whose corrected disparity falls below this (pixels) are
    /// left out of the loss for that step.
    pub disparity_floor: f64,
    pub seed: u64,
    /// Pixels per unit of offset-model output; `None` uses the rig's
    /// half-diagonal.
    pub offset_scale_px: Option<f64>,
    pub pcm_mixer: MixerConfig,
    pub gate_mixer: MixerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-3,
            clip_norm: 1.0,
            epochs: 200,
            warmup_fraction: 0.05,
            batch_size: 64,
            hard_threshold: 0.06,
            lambda: 1.0,
            stages: 2,
            gate_threshold: 0.5,
            disparity_floor: 1e-3,
            seed: 0,
            offset_scale_px: None,
            pcm_mixer: MixerConfig::with_head(1),
            gate_mixer: MixerConfig::with_head(2),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.hard_threshold > 0.0 && self.hard_threshold < 1.0) {
            return bad(format!(
                "hard threshold must be in (0, 1), got {}",
                self.hard_threshold
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup fraction must be in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if !(self.lr_max >= 0.0 && self.weight_decay >= 0.0 && self.lambda >= 0.0) {
            return bad("learning rate, weight decay and lambda must be >= 0".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm must be > 0, got {}", self.clip_norm));
        }
        if self.batch_size == 0 || self.stages == 0 {
            return bad("batch size and stage count must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return bad(format!(
                "gate threshold must be in [0, 1], got {}",
                self.gate_threshold
            ));
        }
        if let Some(s) = self.offset_scale_px {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("offset scale must be > 0, got {s}"));
            }
        }
        if self.pcm_mixer.head_outputs != 1 || self.gate_mixer.head_outputs != 2 {
            return bad("offset mixer needs 1 output and gate mixer 2".into());
        }
        self.pcm_mixer.validate()?;
        self.gate_mixer.validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    fn schedule(&self, steps_per_epoch: usize) -> Option<Schedule> {
        let total = self.epochs * steps_per_epoch;
        if total == 0 {
            return None;
        }
        let warmup = ((self.warmup_fraction * total as f64).round() as usize).min(total - 1);
        Schedule::new(self.lr_max, warmup, total).ok()
    }
}

/// Corrected distance and its derivatives w.r.t. the two offsets:
/// `dd/dO_L = -B f / disp^2`, `dd/dO_R = +B f / disp^2`.
pub fn corrected_distance_with_grad(
    rig: &StereoRig,
    x_l: f64,
    x_r: f64,
    o_l: f64,
    o_r: f64,
) -> Result<(f64, f64, f64)> {
    let d = geometry::triangulate_corrected(rig, x_l, x_r, o_l, o_r)?;
    let disp = (x_l + o_l) - (x_r + o_r);
    let g = rig.baseline_focal() / (disp * disp);
    Ok((d, -g, g))
}

/// One sample as seen by a given stage: running corrected centers plus the
/// untouched y, w, h of each detection.
#[derive(Debug, Clone, Copy)]
struct StageSample {
    xl: f64,
    yl: f64,
    wl: f64,
    hl: f64,
    xr: f64,
    yr: f64,
    wr: f64,
    hr: f64,
    d_gt: f64,
}

impl StageSample {
    fn from_record(r: &DatasetRecord) -> Self {
        Self {
            xl: r.left.x,
            yl: r.left.y,
            wl: r.left.w,
            hl: r.left.h,
            xr: r.right.x,
            yr: r.right.y,
            wr: r.right.w,
            hr: r.right.h,
            d_gt: r.distance_m,
        }
    }

    fn tuples(&self, rig: &StereoRig) -> (FeatureTuple, FeatureTuple) {
        (
            geometry::feature_tuple_at(rig, self.xl, self.yl, self.wl, self.hl),
            geometry::feature_tuple_at(rig, self.xr, self.yr, self.wr, self.hr),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// 1-based stage; gate rows carry the stage whose output they judge.
    pub stage: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub mean_loss: Option<f64>,
    pub val_abs_rel: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Offset,
    Gate,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub notes: Vec<String>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut s = String::from("stage,epoch,step,lr,mean_pcm_loss,mean_gate_loss,val_abs_rel\n");
        for r in &self.rows {
            let (pcm, gate) = match r.phase {
                Phase::Offset => (opt(r.mean_loss), String::new()),
                Phase::Gate => (String::new(), opt(r.mean_loss)),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.stage,
                r.epoch,
                r.step,
                r.lr,
                pcm,
                gate,
                opt(r.val_abs_rel)
            );
        }
        s
    }

    /// Mean offset loss per epoch of one stage, in order.
    pub fn offset_losses(&self, stage: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.stage == stage && r.phase == Phase::Offset)
            .filter_map(|r| r.mean_loss)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stack: CorrectorStack,
    pub log: TrainLog,
    /// Hard samples found after each trained stage but the last.
    pub hard_counts: Vec<usize>,
    /// Stage after which no hard samples remained and training stopped.
    pub stopped_early: Option<usize>,
}

struct Trainer<'a> {
    rig: StereoRig,
    config: &'a TrainConfig,
    shuffle: ChaCha8Rng,
    log: TrainLog,
}

impl Trainer<'_> {
    fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle);
        order
            .chunks(self.config.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    fn train_offset(
        &mut self,
        stage: usize,
        pcm: &mut PcmModel,
        samples: &[StageSample],
        mut validate: impl FnMut(&PcmModel) -> Option<f64>,
    ) {
        let cfg = self.config;
        let spe = samples.len().div_ceil(cfg.batch_size);
        let Some(schedule) = cfg.schedule(spe) else {
            return;
        };
        let tuples: Vec<([f64; TOKENS], [f64; TOKENS])> = samples
            .iter()
            .map(|s| {
                let (l, r) = s.tuples(&self.rig);
                (l.to_array(), r.to_array())
            })
            .collect();
        let mut state = OptimizerState::new(pcm.mixer.layout().decay_mask());
        let mut grads = pcm.mixer.zero_grad();
        let sgd = cfg.sgd();
        let bf = self.rig.baseline_focal();
        let scale = pcm.offset_scale_px;
        let mut step = 0;
        let mut lr = 0.0;

        for epoch in 0..cfg.epochs {
            let mut loss_sum = 0.0;
            let mut loss_n = 0usize;
            for batch in self.epoch_batches(samples.len()) {
                grads.fill_zero();
                let mut batch_loss = 0.0;
                let mut valid = 0usize;
                for &i in &batch {
                    let s = &samples[i];
                    let (out_l, cache_l) = pcm.mixer.forward_cached(&tuples[i].0);
                    let (out_r, cache_r) = pcm.mixer.forward_cached(&tuples[i].1);
                    let disp = (s.xl + scale * out_l[0]) - (s.xr + scale * out_r[0]);
                    if !(disp >= cfg.disparity_floor) {
                        continue;
                    }
                    let d = bf / disp;
                    batch_loss += pcm_loss(d, s.d_gt);
                    valid += 1;
                    // dL/dd * dd/dO * dO/dout
                    let dl_dd = 2.0 * (d - s.d_gt);
                    let dd_do = bf / (disp * disp);
                    pcm.mixer
                        .backward_into(&cache_l, &[-dl_dd * dd_do * scale], &mut grads, None);
                    pcm.mixer
                        .backward_into(&cache_r, &[dl_dd * dd_do * scale], &mut grads, None);
                }
                lr = schedule.lr_at(step);
                step += 1;
                if valid == 0 {
                    continue;
                }
                loss_sum += batch_loss;
                loss_n += valid;
                grads.scale(1.0 / valid as f64);
                grads.clip_global_norm(cfg.clip_norm);
                if grads.is_finite() {
                    sgd_step(pcm.mixer.params_mut(), &grads, &mut state, lr, &sgd);
                }
            }
            self.log.rows.push(LogRow {
                stage,
                phase: Phase::Offset,
                epoch: epoch + 1,
                step,
                lr,
                mean_loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
                val_abs_rel: validate(pcm),
            });
        }
    }

    fn train_gate(
        &mut self,
        stage: usize,
        gate: &mut GateModel,
        samples: &[StageSample],
        labels: &[HardLabel],
    ) {
        let cfg = self.config;
        let spe = samples.len().div_ceil(cfg.batch_size);
        let Some(schedule) = cfg.schedule(spe) else {
            return;
        };
        let tuples: Vec<([f64; TOKENS], [f64; TOKENS])> = samples
            .iter()
            .map(|s| {
                let (l, r) = s.tuples(&self.rig);
                (l.to_array(), r.to_array())
            })
            .collect();
        let mut state = OptimizerState::new(gate.mixer.layout().decay_mask());
        let mut grads: GradientBuffer = gate.mixer.zero_grad();
        let sgd = cfg.sgd();
        let mut step = 0;
        let mut lr = 0.0;

        for epoch in 0..cfg.epochs {
            let mut loss_sum = 0.0;
            let mut loss_n = 0usize;
            for batch in self.epoch_batches(samples.len()) {
                grads.fill_zero();
                // both views of a sample carry the sample's label
                for &i in &batch {
                    for input in [&tuples[i].0, &tuples[i].1] {
                        let (out, cache) = gate.mixer.forward_cached(input);
                        let logits = [out[0], out[1]];
                        loss_sum += gate_loss(logits, labels[i]);
                        loss_n += 1;
                        let g = gate_loss_grad(logits, labels[i]);
                        gate.mixer.backward_into(
                            &cache,
                            &[cfg.lambda * g[0], cfg.lambda * g[1]],
                            &mut grads,
                            None,
                        );
                    }
                }
                lr = schedule.lr_at(step);
                step += 1;
                grads.scale(1.0 / (2 * batch.len()) as f64);
                grads.clip_global_norm(cfg.clip_norm);
                if grads.is_finite() {
                    sgd_step(gate.mixer.params_mut(), &grads, &mut state, lr, &sgd);
                }
            }
            self.log.rows.push(LogRow {
                stage,
                phase: Phase::Gate,
                epoch: epoch + 1,
                step,
                lr,
                mean_loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
                val_abs_rel: None,
            });
        }
    }
}

/// Applies one stage to every sample; returns the advanced samples and each
/// sample's relative error after the stage (infinite when the corrected
/// disparity is not positive).
fn advance(rig: &StereoRig, pcm: &PcmModel, samples: &[StageSample]) -> (Vec<StageSample>, Vec<f64>) {
    samples
        .iter()
        .map(|s| {
            let (tl, tr) = s.tuples(rig);
            let mut next = *s;
            next.xl += pcm.predict_offset(&tl);
            next.xr += pcm.predict_offset(&tr);
            let err = geometry::triangulate(rig, next.xl, next.xr)
                .map_or(f64::INFINITY, |d| error_rate(d, s.d_gt));
            (next, err)
        })
        .unzip()
}

fn validation_abs_rel(
    stack: &CorrectorStack,
    records: &[DatasetRecord],
) -> Option<f64> {
    let (preds, gts): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| {
            let (d, _) = stack.estimate_with(&r.left, &r.right, InferenceMode::Gated);
            d.ok().map(|d| (d, r.distance_m))
        })
        .unzip();
    abs_rel(&preds, &gts).ok()
}

/// Trains a full stack. `val`, when given, is scored after every offset epoch.
pub fn train(
    rig: &StereoRig,
    records: &[DatasetRecord],
    val: Option<&[DatasetRecord]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    rig.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let init_seed = rng::derive_seed(config.seed, rng::INIT);
    let offset_scale = config.offset_scale_px.unwrap_or_else(|| rig.half_diagonal());
    let mut trainer = Trainer {
        rig: *rig,
        config,
        shuffle: rng::substream(config.seed, rng::SHUFFLE),
        log: TrainLog::default(),
    };

    let mut stages: Vec<PcmModel> = Vec::new();
    let mut gates: Vec<GateModel> = Vec::new();
    let mut hard_counts = Vec::new();
    let mut stopped_early = None;
    let mut samples: Vec<StageSample> = records.iter().map(StageSample::from_record).collect();

    for stage in 1..=config.stages {
        let mut pcm = PcmModel::init(
            config.pcm_mixer,
            offset_scale,
            init_seed.wrapping_add(2 * stage as u64),
        )?;
        {
            let trained = &stages;
            let trained_gates = &gates;
            let validate = |p: &PcmModel| {
                let val = val?;
                let mut all = trained.clone();
                all.push(p.clone());
                // the new stage is last, so the existing gates suffice
                let stack = CorrectorStack::new(*rig, all, trained_gates.clone(), config.gate_threshold).ok()?;
                validation_abs_rel(&stack, val)
            };
            trainer.train_offset(stage, &mut pcm, &samples, validate);
        }
        let (advanced, errors) = advance(rig, &pcm, &samples);
        stages.push(pcm);
        if stage == config.stages {
            break;
        }

        let labels: Vec<HardLabel> = errors
            .iter()
            .map(|&e| hard_label(e, config.hard_threshold))
            .collect();
        let n_hard = labels.iter().filter(|l| l.0).count();
        hard_counts.push(n_hard);
        if n_hard == 0 {
            let err = Error::EmptyHardSet { stage };
            trainer
                .log
                .notes
                .push(format!("{err}; stopping with {stage} stage(s)"));
            stopped_early = Some(stage);
            break;
        }

        let mut gate = GateModel::init(
            config.gate_mixer,
            init_seed.wrapping_add(2 * stage as u64 + 1),
        )?;
        trainer.train_gate(stage, &mut gate, &advanced, &labels);
        gates.push(gate);

        samples = advanced
            .into_iter()
            .zip(&labels)
            .filter(|(_, l)| l.0)
            .map(|(s, _)| s)
            .collect();
    }

    let stack = CorrectorStack::new(*rig, stages, gates, config.gate_threshold)?;
    Ok(TrainOutcome {
        stack,
        log: trainer.log,
        hard_counts,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_offset_gradient_matches_finite_difference() {
        let rig = StereoRig::reference();
        for &(xl, xr, ol, or) in &[
            (700.0, 640.0, 1.5, -2.0),
            (900.0, 620.0, -10.0, 3.0),
            (650.0, 600.5, 0.2, 0.1),
        ] {
            let (_, gl, gr) = corrected_distance_with_grad(&rig, xl, xr, ol, or).unwrap();
            let h = 1e-6;
            let f = |a: f64, b: f64| geometry::triangulate_corrected(&rig, xl, xr, a, b).unwrap();
            let fl = (f(ol + h, or) - f(ol - h, or)) / (2.0 * h);
            let fr = (f(ol, or + h) - f(ol, or - h)) / (2.0 * h);
            assert!((fl - gl).abs() <= 1e-6 * gl.abs(), "{fl} vs {gl}");
            assert!((fr - gr).abs() <= 1e-6 * gr.abs(), "{fr} vs {gr}");
            assert_eq!(gl, -gr);
        }
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { hard_threshold: 0.0, ..Default::default() },
            TrainConfig { warmup_fraction: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { stages: 0, ..Default::default() },
            TrainConfig { clip_norm: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn schedule_from_config() {
        let cfg = TrainConfig { epochs: 10, ..Default::default() };
        let s = cfg.schedule(20).unwrap();
        assert_eq!((s.warmup_steps, s.total_steps), (10, 200));
        assert!(TrainConfig { epochs: 0, ..Default::default() }.schedule(20).is_none());
    }
}
