//! Synthetic stereo observations of a small target, with the systematic and
//! random position deviations that break plain triangulation.
//!
//! The deviation model shifts each observed box center horizontally by
//!
//! ```text
//! alpha_side + beta * (x - cx) * (r / half_diagonal)^2 + N(0, sigma_vib) + N(0, sigma_px)
//! ```
//!
//! and vertically by `N(0, sigma_px)`. The radial term depends only on the
//! image position, the constant term only on the camera.

mod io;

pub use io::{read_dataset, read_rig, rig_sidecar_path, write_dataset, write_rig, parse_dataset};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, StereoRig};
use crate::rng::indexed_stream;

/// Placement attempts per record before the scene is declared infeasible.
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    /// Lateral, meters, positive to the right.
    pub x: f64,
    /// Vertical, meters, positive downward.
    pub y: f64,
    /// Depth along the optical axis, meters.
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub x: f64,
    pub y: f64,
}

/// Pinhole projection into one camera of the rig. The rig origin is midway
/// between the two camera centers.
pub fn project(rig: &StereoRig, point: Point3, side: Side) -> Result<ImagePoint> {
    if !(point.z > 0.0) {
        return Err(Error::BehindCamera { depth: point.z });
    }
    let half_b = 0.5 * rig.baseline_m;
    let lateral = match side {
        Side::Left => point.x + half_b,
        Side::Right => point.x - half_b,
    };
    Ok(ImagePoint {
        x: rig.cx + rig.focal_px * lateral / point.z,
        y: rig.cy + rig.focal_px * point.y / point.z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationModel {
    /// Constant x bias of the left camera, pixels.
    pub alpha_l: f64,
    /// Constant x bias of the right camera, pixels.
    pub alpha_r: f64,
    /// Cubic radial coefficient.
    pub beta: f64,
    /// Per-image horizontal vibration jitter, pixels.
    pub sigma_vib: f64,
    /// Detection noise on center and size, pixels.
    pub sigma_px: f64,
}

impl Default for DeviationModel {
    fn default() -> Self {
        Self {
            alpha_l: 1.5,
            alpha_r: -1.5,
            beta: 4.0,
            sigma_vib: 0.5,
            sigma_px: 0.3,
        }
    }
}

impl DeviationModel {
    pub fn none() -> Self {
        Self {
            alpha_l: 0.0,
            alpha_r: 0.0,
            beta: 0.0,
            sigma_vib: 0.0,
            sigma_px: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.alpha_l,
            self.alpha_r,
            self.beta,
            self.sigma_vib,
            self.sigma_px,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite || self.sigma_vib < 0.0 || self.sigma_px < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "deviation parameters must be finite with non-negative sigmas: {self:?}"
            )));
        }
        Ok(())
    }

    /// Systematic (noise-free) horizontal shift at `x, y`.
    pub fn systematic_shift(&self, rig: &StereoRig, x: f64, y: f64, side: Side) -> f64 {
        let xc = x - rig.cx;
        let yc = y - rig.cy;
        let rn2 = (xc * xc + yc * yc) / (rig.half_diagonal() * rig.half_diagonal());
        let alpha = match side {
            Side::Left => self.alpha_l,
            Side::Right => self.alpha_r,
        };
        alpha + self.beta * xc * rn2
    }

    /// Observed position of a true image point. Always consumes three
    /// standard-normal draws so streams stay aligned across parameter values.
    pub fn apply_deviation<R: Rng + ?Sized>(
        &self,
        rig: &StereoRig,
        pt: ImagePoint,
        side: Side,
        rng: &mut R,
    ) -> ImagePoint {
        let vib: f64 = rng.sample(StandardNormal);
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        ImagePoint {
            x: pt.x
                + self.systematic_shift(rig, pt.x, pt.y, side)
                + self.sigma_vib * vib
                + self.sigma_px * nx,
            y: pt.y + self.sigma_px * ny,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub rig: StereoRig,
    pub target_width_m: f64,
    pub target_height_m: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub deviation: DeviationModel,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            rig: StereoRig::reference(),
            target_width_m: 0.88,
            target_height_m: 0.5,
            d_min: 5.0,
            d_max: 30.0,
            n_samples: 2000,
            seed: 0,
            deviation: DeviationModel::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        self.deviation.validate()?;
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < d_min < d_max, got {} and {}",
                self.d_min, self.d_max
            )));
        }
        if !(self.target_width_m > 0.0 && self.target_height_m > 0.0) {
            return Err(Error::InvalidConfig("target size must be positive".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be > 0".into()));
        }
        Ok(())
    }
}

/// Undeviated projections of the target center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthPoints {
    pub xl: f64,
    pub yl: f64,
    pub xr: f64,
    pub yr: f64,
}

/// One stereo observation with its ground-truth distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub left: BoundingBox,
    pub right: BoundingBox,
    pub distance_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthPoints>,
    /// Fields this version does not know about, kept for round-tripping.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn generate_record(config: &SceneConfig, index: u64) -> Result<DatasetRecord> {
    let rig = &config.rig;
    let dev = &config.deviation;
    let mut rng = indexed_stream(config.seed, index);
    for _ in 0..MAX_ATTEMPTS {
        let z = rng.random_range(config.d_min..config.d_max);
        let w = rig.focal_px * config.target_width_m / z;
        let h = rig.focal_px * config.target_height_m / z;
        let disparity = rig.baseline_focal() / z;
        // midpoint of the two projections, with a full-box margin on each side
        let u_lo = 0.5 * (w + disparity);
        let u_hi = rig.width - u_lo;
        let v_lo = 0.5 * h;
        let v_hi = rig.height - v_lo;
        if u_lo >= u_hi || v_lo >= v_hi {
            continue;
        }
        let u = rng.random_range(u_lo..u_hi);
        let v = rng.random_range(v_lo..v_hi);
        let point = Point3 {
            x: (u - rig.cx) * z / rig.focal_px,
            y: (v - rig.cy) * z / rig.focal_px,
            z,
        };
        let truth_l = project(rig, point, Side::Left)?;
        let truth_r = project(rig, point, Side::Right)?;
        let obs_l = dev.apply_deviation(rig, truth_l, Side::Left, &mut rng);
        let obs_r = dev.apply_deviation(rig, truth_r, Side::Right, &mut rng);
        let size_noise: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let left = BoundingBox::new(
            obs_l.x,
            obs_l.y,
            w + dev.sigma_px * size_noise[0],
            h + dev.sigma_px * size_noise[1],
        );
        let right = BoundingBox::new(
            obs_r.x,
            obs_r.y,
            w + dev.sigma_px * size_noise[2],
            h + dev.sigma_px * size_noise[3],
        );
        if left.fully_inside(rig) && right.fully_inside(rig) {
            return Ok(DatasetRecord {
                id: index,
                left,
                right,
                distance_m: z,
                truth: Some(TruthPoints {
                    xl: truth_l.x,
                    yl: truth_l.y,
                    xr: truth_r.x,
                    yr: truth_r.y,
                }),
                extra: Default::default(),
            });
        }
    }
    Err(Error::InfeasibleScene {
        attempts: MAX_ATTEMPTS,
        rejected: MAX_ATTEMPTS,
    })
}

/// Record `i` is drawn from its own substream, so a longer dataset with the
/// same seed extends a shorter one.
pub fn generate_dataset(config: &SceneConfig) -> Result<Vec<DatasetRecord>> {
    config.validate()?;
    (0..config.n_samples as u64)
        .map(|i| generate_record(config, i))
        .collect()
}
