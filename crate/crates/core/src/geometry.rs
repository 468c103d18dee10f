//! Pinhole stereo geometry: triangulation, offset-compensated triangulation
//! and the polar ("radian conversion") features fed to the correction models.
//!
//! Image coordinates are pixels with `y` growing downward; distances are meters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Horizontal stereo rig with identical, rectified cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub baseline_m: f64,
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl StereoRig {
    pub fn new(
        baseline_m: f64,
        focal_px: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
    ) -> Result<Self> {
        let rig = Self {
            baseline_m,
            focal_px,
            cx,
            cy,
            width,
            height,
        };
        rig.validate()?;
        Ok(rig)
    }

    /// 406 mm baseline, 22 degree horizontal FOV on a 1280x720 sensor.
    pub fn reference() -> Self {
        let width = 1280.0;
        let height = 720.0;
        Self {
            baseline_m: 0.406,
            focal_px: focal_from_hfov(width, 22f64.to_radians()).expect("valid fov"),
            cx: width / 2.0,
            cy: height / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.baseline_m,
            self.focal_px,
            self.cx,
            self.cy,
            self.width,
            self.height,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("rig parameters must be finite".into()));
        }
        if self.baseline_m <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "baseline_m must be > 0, got {}",
                self.baseline_m
            )));
        }
        if self.focal_px <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "focal_px must be > 0, got {}",
                self.focal_px
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width) {
            return Err(Error::InvalidConfig(format!(
                "cx must lie in (0, width={}), got {}",
                self.width, self.cx
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height) {
            return Err(Error::InvalidConfig(format!(
                "cy must lie in (0, height={}), got {}",
                self.height, self.cy
            )));
        }
        Ok(())
    }

    /// `B * f`, the numerator of the triangulation formula.
    #[inline]
    pub fn baseline_focal(&self) -> f64 {
        self.baseline_m * self.focal_px
    }

    /// Half of the image diagonal; the radius normalizer of [`FeatureTuple`].
    #[inline]
    pub fn half_diagonal(&self) -> f64 {
        (0.25 * self.width * self.width + 0.25 * self.height * self.height).sqrt()
    }

    /// Uniform scaling of every pixel quantity (used by invariance tests and
    /// to model a resolution change of the same lens).
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            baseline_m: self.baseline_m,
            focal_px: self.focal_px * k,
            cx: self.cx * k,
            cy: self.cy * k,
            width: self.width * k,
            height: self.height * k,
        }
    }
}

/// Axis-aligned detection box, center/size form, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Positive size and center inside the image.
    pub fn validate(&self, rig: &StereoRig) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            return Err(Error::InvalidArgument("box values must be finite".into()));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "box size must be positive, got {}x{}",
                self.w, self.h
            )));
        }
        if !(self.x >= 0.0 && self.x <= rig.width && self.y >= 0.0 && self.y <= rig.height) {
            return Err(Error::InvalidArgument(format!(
                "box center ({}, {}) outside {}x{} image",
                self.x, self.y, rig.width, rig.height
            )));
        }
        Ok(())
    }

    /// Whole box (not just the center) lies within the image.
    pub fn fully_inside(&self, rig: &StereoRig) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x - 0.5 * self.w >= 0.0
            && self.x + 0.5 * self.w <= rig.width
            && self.y - 0.5 * self.h >= 0.0
            && self.y + 0.5 * self.h <= rig.height
    }
}

/// Angle and radius of an image point about the principal point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarFeature {
    pub theta: f64,
    pub r: f64,
}

impl PolarFeature {
    /// Inverse of [`radian_conversion`].
    pub fn to_cartesian(&self, rig: &StereoRig) -> (f64, f64) {
        (
            rig.cx + self.r * self.theta.cos(),
            rig.cy + self.r * self.theta.sin(),
        )
    }
}

/// Normalized `{theta, r, w, h}` input of the correction and gate models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureTuple {
    pub theta: f64,
    pub r_norm: f64,
    pub w_norm: f64,
    pub h_norm: f64,
}

impl FeatureTuple {
    pub fn to_array(&self) -> [f64; 4] {
        [self.theta, self.r_norm, self.w_norm, self.h_norm]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Depth from horizontal disparity: `B f / (x_l - x_r)`.
pub fn triangulate(rig: &StereoRig, x_l: f64, x_r: f64) -> Result<f64> {
    let disparity = x_l - x_r;
    if !(disparity > 0.0) {
        return Err(Error::NonPositiveDisparity { disparity });
    }
    Ok(rig.baseline_focal() / disparity)
}

/// Triangulation after shifting each observation by a horizontal offset.
/// With zero offsets this is bit-identical to [`triangulate`].
pub fn triangulate_corrected(
    rig: &StereoRig,
    x_l: f64,
    x_r: f64,
    o_l: f64,
    o_r: f64,
) -> Result<f64> {
    triangulate(rig, x_l + o_l, x_r + o_r)
}

/// Cartesian pixel position to polar form about `(cx, cy)`; `theta = 0` at the center.
pub fn radian_conversion(rig: &StereoRig, x: f64, y: f64) -> PolarFeature {
    let dx = x - rig.cx;
    let dy = y - rig.cy;
    let r = dx.hypot(dy);
    let theta = if r == 0.0 { 0.0 } else { dy.atan2(dx) };
    PolarFeature { theta, r }
}

/// Feature tuple for a point `(x, y)` carrying a box of size `w x h`.
pub fn feature_tuple_at(rig: &StereoRig, x: f64, y: f64, w: f64, h: f64) -> FeatureTuple {
    let polar = radian_conversion(rig, x, y);
    FeatureTuple {
        theta: polar.theta,
        r_norm: polar.r / rig.half_diagonal(),
        w_norm: w / rig.width,
        h_norm: h / rig.height,
    }
}

pub fn make_feature_tuple(rig: &StereoRig, bbox: &BoundingBox) -> FeatureTuple {
    feature_tuple_at(rig, bbox.x, bbox.y, bbox.w, bbox.h)
}

/// Pinhole focal length in pixels for a sensor `width` pixels wide and a
/// horizontal field of view of `hfov` radians.
pub fn focal_from_hfov(width: f64, hfov: f64) -> Result<f64> {
    if !(hfov > 0.0 && hfov < std::f64::consts::PI) {
        return Err(Error::InvalidArgument(format!(
            "horizontal fov must be in (0, pi), got {hfov}"
        )));
    }
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "width must be positive, got {width}"
        )));
    }
    Ok(0.5 * width / (0.5 * hfov).tan())
}
