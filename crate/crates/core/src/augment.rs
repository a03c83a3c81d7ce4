//! Artificial view generation (test-time augmentation).
//!
//! A view is produced by sampling a [`TransformParams`] from an [`AugSetup`]
//! and applying it to the original raster. Transforms are applied in the
//! fixed order flip, rotate, zoom, warp, lighting. The three geometric steps
//! after the flip are composed into one inverse coordinate map and resampled
//! once with bilinear interpolation about the image center; anything that
//! maps outside the source frame is filled with zeros.

use std::fmt;
use std::str::FromStr;

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Raster, RasterError, CHANNELS};

/// Gain applied to the lighting offset in logit space.
pub const LIGHTING_GAIN: f64 = 4.0;
/// Clamp used before taking the logit of a pixel value.
pub const LIGHTING_EPS: f64 = 1e-6;
/// Default probability that each of rotate, zoom, lighting and warp is applied.
pub const DEFAULT_APPLY_PROB: f64 = 0.75;

const SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Mild,
    Moderate,
    Strong,
    Severe,
    Extreme,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Mild,
        Preset::Moderate,
        Preset::Strong,
        Preset::Severe,
        Preset::Extreme,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Mild => "mild",
            Preset::Moderate => "moderate",
            Preset::Strong => "strong",
            Preset::Severe => "severe",
            Preset::Extreme => "extreme",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown preset {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugSetup {
    pub name: Preset,
    /// Horizontal flips are sampled only when set.
    pub do_flip: bool,
    /// Vertical flips are sampled as well (requires `do_flip`).
    pub flip_vert: bool,
    pub max_rotate: f64,
    pub max_zoom: f64,
    pub max_lighting: f64,
    pub max_warp: f64,
    pub pad_mode: PadMode,
    pub apply_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid augmentation setup: {0}")]
pub struct InvalidSetup(pub String);

impl AugSetup {
    pub fn preset(name: Preset) -> Self {
        let (max_zoom, magnitude) = match name {
            Preset::Mild => (1.1, 0.2),
            Preset::Moderate => (1.2, 0.3),
            Preset::Strong => (1.3, 0.4),
            Preset::Severe => (1.4, 0.5),
            Preset::Extreme => (1.5, 0.6),
        };
        Self {
            name,
            do_flip: true,
            flip_vert: true,
            max_rotate: 90.0,
            max_zoom,
            max_lighting: magnitude,
            max_warp: magnitude,
            pad_mode: PadMode::Zeros,
            apply_prob: DEFAULT_APPLY_PROB,
        }
    }

    /// A setup that never changes the image.
    pub fn disabled(name: Preset) -> Self {
        Self {
            do_flip: false,
            flip_vert: false,
            apply_prob: 0.0,
            ..Self::preset(name)
        }
    }

    pub fn validate(&self) -> Result<(), InvalidSetup> {
        let err = |m: &str| Err(InvalidSetup(m.to_string()));
        if !(self.max_rotate.is_finite() && self.max_rotate >= 0.0) {
            return err("max_rotate must be a finite non-negative angle");
        }
        if !(self.max_zoom.is_finite() && self.max_zoom >= 1.0) {
            return err("max_zoom must be >= 1");
        }
        if !(0.0..1.0).contains(&self.max_lighting) {
            return err("max_lighting must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.max_warp) {
            return err("max_warp must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return err("apply_prob must lie in [0, 1]");
        }
        if self.flip_vert && !self.do_flip {
            return err("flip_vert requires do_flip");
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation; a magnitude is neutral when that
/// transform was not sampled (0, or 1 for zoom).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotate_deg: f64,
    pub zoom: f64,
    pub lighting: f64,
    pub warp: f64,
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        flip_h: false,
        flip_v: false,
        rotate_deg: 0.0,
        zoom: 1.0,
        lighting: 0.0,
        warp: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    fn is_geometric_identity(&self) -> bool {
        !self.flip_h && !self.flip_v && self.rotate_deg == 0.0 && self.zoom == 1.0 && self.warp == 0.0
    }
}

impl Default for TransformParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, max: f64) -> f64 {
    rng.random_range(-max..=max)
}

pub fn sample_transform<R: Rng + ?Sized>(setup: &AugSetup, rng: &mut R) -> TransformParams {
    let mut p = TransformParams::IDENTITY;
    if setup.do_flip {
        p.flip_h = rng.random_bool(0.5);
        if setup.flip_vert {
            p.flip_v = rng.random_bool(0.5);
        }
    }
    let active = |rng: &mut R| rng.random::<f64>() < setup.apply_prob;
    if active(rng) {
        p.rotate_deg = symmetric(rng, setup.max_rotate);
    }
    if active(rng) {
        p.zoom = rng.random_range(1.0..=setup.max_zoom);
    }
    if active(rng) {
        p.lighting = symmetric(rng, setup.max_lighting);
    }
    if active(rng) {
        p.warp = symmetric(rng, setup.max_warp);
    }
    p
}

/// Inverse map from output pixel coordinates to source coordinates.
struct InverseMap {
    last_x: f64,
    last_y: f64,
    cx: f64,
    cy: f64,
    flip_h: bool,
    flip_v: bool,
    cos: f64,
    sin: f64,
    inv_zoom: f64,
    homography: Option<[f64; 8]>,
}

impl InverseMap {
    fn new(width: usize, height: usize, p: &TransformParams) -> Self {
        let last_x = (width - 1) as f64;
        let last_y = (height - 1) as f64;
        let theta = p.rotate_deg.to_radians();
        let homography = (p.warp != 0.0).then(|| {
            let shift = p.warp * (width.min(height) - 1) as f64 / 2.0;
            keystone(last_x, last_y, shift)
        });
        Self {
            last_x,
            last_y,
            cx: last_x / 2.0,
            cy: last_y / 2.0,
            flip_h: p.flip_h,
            flip_v: p.flip_v,
            cos: theta.cos(),
            sin: theta.sin(),
            inv_zoom: 1.0 / p.zoom,
            homography,
        }
    }

    fn source(&self, x: f64, y: f64) -> (f64, f64) {
        let (mut x, mut y) = (x, y);
        if let Some(h) = &self.homography {
            let w = h[6] * x + h[7] * y + 1.0;
            (x, y) = ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w);
        }
        let dx = (x - self.cx) * self.inv_zoom;
        let dy = (y - self.cy) * self.inv_zoom;
        // Counterclockwise as displayed (y axis points down).
        x = self.cx + dx * self.cos - dy * self.sin;
        y = self.cy + dx * self.sin + dy * self.cos;
        if self.flip_h {
            x = self.last_x - x;
        }
        if self.flip_v {
            y = self.last_y - y;
        }
        (snap(x), snap(y))
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_TOL {
        r
    } else {
        v
    }
}

/// Homography taking the keystoned output quad back to the source rectangle.
/// The top corners move inward and the bottom corners outward by `shift`.
fn keystone(last_x: f64, last_y: f64, shift: f64) -> [f64; 8] {
    let source = [(0.0, 0.0), (last_x, 0.0), (0.0, last_y), (last_x, last_y)];
    let dest = [
        (shift, 0.0),
        (last_x - shift, 0.0),
        (-shift, last_y),
        (last_x + shift, last_y),
    ];
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (&(dx, dy), &(sx, sy))) in dest.iter().zip(&source).enumerate() {
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[dx, dy, 1.0, 0.0, 0.0, 0.0, -dx * sx, -dy * sx]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, dx, dy, 1.0, -dx * sy, -dy * sy]);
        b[r] = sx;
        b[r + 1] = sy;
    }
    let h = a
        .lu()
        .solve(&b)
        .expect("keystone quad is non-degenerate for |warp| < 1");
    let mut out = [0.0; 8];
    out.copy_from_slice(h.as_slice());
    out
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

fn sample_bilinear(img: &Raster, x: f64, y: f64, out: &mut [f32]) {
    let last_x = (img.width() - 1) as f64;
    let last_y = (img.height() - 1) as f64;
    if !(0.0..=last_x).contains(&x) || !(0.0..=last_y).contains(&y) {
        out.fill(0.0);
        return;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    for (c, slot) in out.iter_mut().enumerate() {
        let top = lerp(img.get(x0, y0, c) as f64, img.get(x1, y0, c) as f64, fx);
        let bottom = lerp(img.get(x0, y1, c) as f64, img.get(x1, y1, c) as f64, fx);
        *slot = lerp(top, bottom, fy).clamp(0.0, 1.0) as f32;
    }
}

fn adjust_lighting(v: f32, lighting: f64) -> f32 {
    let v = (v as f64).clamp(LIGHTING_EPS, 1.0 - LIGHTING_EPS);
    let logit = (v / (1.0 - v)).ln() + lighting * LIGHTING_GAIN;
    (1.0 / (1.0 + (-logit).exp())).clamp(0.0, 1.0) as f32
}

pub fn apply_transform(img: &Raster, p: &TransformParams) -> Result<Raster, RasterError> {
    img.validate()?;
    let (w, h) = (img.width(), img.height());
    let degenerate = w < 2 || h < 2;
    let mut out = if p.is_geometric_identity() || degenerate {
        img.clone()
    } else {
        let map = InverseMap::new(w, h, p);
        let mut out = img.clone();
        let data = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = map.source(x as f64, y as f64);
                let o = (y * w + x) * CHANNELS;
                sample_bilinear(img, sx, sy, &mut data[o..o + CHANNELS]);
            }
        }
        out
    };
    if p.lighting != 0.0 {
        for v in out.data_mut() {
            *v = adjust_lighting(*v, p.lighting);
        }
    }
    Ok(out)
}

/// `n` independent augmentations of `img`, drawn sequentially from `rng`.
pub fn generate_artificial_views<R: Rng + ?Sized>(
    img: &Raster,
    n: usize,
    setup: &AugSetup,
    rng: &mut R,
) -> Result<Vec<Raster>, RasterError> {
    (0..n)
        .map(|_| {
            let params = sample_transform(setup, rng);
            apply_transform(img, &params)
        })
        .collect()
}
