//! Procedural beating-annulus phantom with closed-form velocities.
//!
//! Both radii follow `r(t) = r0 + amp·sin(2πt/T)`, the ring twists with
//! angular velocity `ω(t) = twist_amp·sin(2πt/T)` and moves through-plane
//! with `vz(t) = z_amp·cos(2πt/T)`. One cardiac cycle lasts 1 s.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Axis, CineStudy, StudyMeta, CANONICAL_VENC_INPLANE_CMS, CANONICAL_VENC_THROUGH_CMS};
use crate::error::{invalid, MvmError, Result};
use crate::grid::{Image, Mask};
use crate::phase_synth::{frame_background, NoiseModel};
use crate::seed;
use crate::velocity::velocity_to_phase;

const RING_BASE: f64 = 0.55;
const TEXTURE_TERMS: usize = 5;
/// Pixels at least this far outside the ring sit exactly at −1.
const EDGE_HALF_WIDTH: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub r_inner0: f64,
    pub r_outer0: f64,
    /// Radial pulsation amplitude, pixels.
    pub amp: f64,
    /// Peak angular velocity, rad/frame.
    pub twist_amp: f64,
    /// Peak through-plane velocity, cm/s.
    pub z_amp: f64,
    /// Amplitude of the magnitude texture.
    pub noise_sigma: f64,
    pub pixel_spacing_mm: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_frames: 50,
            r_inner0: 12.0,
            r_outer0: 19.0,
            amp: 5.0,
            twist_amp: 0.02,
            z_amp: 8.0,
            noise_sigma: 0.25,
            pixel_spacing_mm: 1.5,
            seed: 0,
        }
    }
}

/// Velocity at a point, cm/s.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Velocity3 {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

impl PhantomParams {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    /// Frames per second under the 1 s cycle convention.
    fn frame_rate(&self) -> f64 {
        self.num_frames as f64
    }

    fn phase_angle(&self, t: f64) -> f64 {
        2.0 * PI * t / self.num_frames as f64
    }

    /// Pixels/frame to cm/s.
    fn to_cms(&self, px_per_frame: f64) -> f64 {
        px_per_frame * self.pixel_spacing_mm / 10.0 * self.frame_rate()
    }

    pub fn validate(&self) -> Result<()> {
        let half = self.height.min(self.width) as f64 / 2.0;
        if self.num_frames < 2 {
            return Err(invalid("phantom needs at least 2 frames"));
        }
        if !(0.0 < self.r_inner0 && self.r_inner0 < self.r_outer0 && self.r_outer0 < half) {
            return Err(invalid(format!(
                "radii must satisfy 0 < {} < {} < {half}",
                self.r_inner0, self.r_outer0
            )));
        }
        if !(0.0..self.r_inner0).contains(&self.amp) {
            return Err(invalid(format!("amp {} must lie in [0, r_inner0)", self.amp)));
        }
        if self.r_outer0 + self.amp + EDGE_HALF_WIDTH + 2.0 > half {
            return Err(invalid("ring plus background margin leaves the image"));
        }
        if !(self.pixel_spacing_mm > 0.0) || self.noise_sigma < 0.0 {
            return Err(invalid("pixel spacing must be positive and noise_sigma non-negative"));
        }
        let radial = self.to_cms(self.amp * 2.0 * PI / self.num_frames as f64);
        let tangential = self.to_cms(self.twist_amp.abs() * (self.r_outer0 + self.amp + 1.0));
        if radial + tangential >= CANONICAL_VENC_INPLANE_CMS || self.z_amp.abs() >= CANONICAL_VENC_THROUGH_CMS {
            return Err(invalid("peak phantom speed would exceed v_enc"));
        }
        Ok(())
    }

    fn radius_offset(&self, t: f64) -> f64 {
        self.amp * self.phase_angle(t).sin()
    }

    /// Accumulated twist angle, radians.
    fn twist_angle(&self, t: f64) -> f64 {
        self.twist_amp * self.num_frames as f64 / (2.0 * PI) * (1.0 - self.phase_angle(t).cos())
    }

    fn angular_velocity(&self, t: f64) -> f64 {
        self.twist_amp * self.phase_angle(t).sin()
    }

    /// Closed-form velocity anywhere in the plane (cm/s).
    fn field(&self, t: f64, x: f64, y: f64) -> Velocity3 {
        let (cx, cy) = self.center();
        let (dx, dy) = (x - cx, y - cy);
        let rho = dx.hypot(dy);
        let (rx, ry) = if rho > 0.0 { (dx / rho, dy / rho) } else { (0.0, 0.0) };
        let vr = self.to_cms(self.amp * 2.0 * PI / self.num_frames as f64 * self.phase_angle(t).cos());
        let vt = self.to_cms(self.angular_velocity(t) * rho);
        Velocity3 {
            vx: vr * rx - vt * ry,
            vy: vr * ry + vt * rx,
            vz: self.z_amp * self.phase_angle(t).cos(),
        }
    }

    fn signed_distance(&self, t: usize, x: f64, y: f64) -> f64 {
        let (r_in, r_out) = self.radii(t as f64);
        let (cx, cy) = self.center();
        let rho = (x - cx).hypot(y - cy);
        (r_in - rho).max(rho - r_out)
    }

    fn radii(&self, t: f64) -> (f64, f64) {
        let d = self.radius_offset(t);
        (self.r_inner0 + d, self.r_outer0 + d)
    }
}

/// `(r_in, r_out)` at frame `t`.
pub fn analytic_radius(params: &PhantomParams, t: usize) -> (f64, f64) {
    params.radii(t as f64)
}

/// Whether pixel `(x, y)` belongs to the ring at frame `t`.
pub fn in_myocardium(params: &PhantomParams, t: usize, x: f64, y: f64) -> bool {
    params.signed_distance(t, x, y) <= 0.0
}

/// Ground-truth velocity (cm/s) of a myocardial point.
pub fn analytic_velocity(params: &PhantomParams, t: usize, x: f64, y: f64) -> Result<Velocity3> {
    if !in_myocardium(params, t, x, y) {
        return Err(MvmError::NotInMyocardium { t, x, y });
    }
    Ok(params.field(t as f64, x, y))
}

/// Radial speed of the ring, mm/s.
pub fn analytic_radial_mms(params: &PhantomParams, t: usize) -> f64 {
    10.0 * params.to_cms(params.amp * 2.0 * PI / params.num_frames as f64 * params.phase_angle(t as f64).cos())
}

pub fn analytic_longitudinal_mms(params: &PhantomParams, t: usize) -> f64 {
    10.0 * params.z_amp * params.phase_angle(t as f64).cos()
}

struct Texture {
    terms: Vec<(f64, f64, f64, f64, f64)>,
    norm: f64,
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[0x7e47]);
        let terms: Vec<_> = (0..TEXTURE_TERMS)
            .map(|_| {
                (
                    rng.random_range(0.3..1.0),
                    rng.random_range(1..7) as f64,
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0..3) as f64,
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let norm = terms.iter().map(|t| t.0).sum();
        Self { terms, norm }
    }

    /// Value in `[-1, 1]` at material angle `phi` and normalized depth `s`.
    fn at(&self, phi: f64, s: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(a, m, p, n, q)| a * (m * phi + p).cos() * (PI * n * s + q).cos())
            .sum::<f64>()
            / self.norm
    }
}

fn magnitude_frame(params: &PhantomParams, tex: &Texture, t: usize) -> Image {
    let (cx, cy) = params.center();
    let theta = params.twist_angle(t as f64);
    let offset = params.radius_offset(t as f64);
    let thick = params.r_outer0 - params.r_inner0;
    Image::from_fn(params.height, params.width, |y, x| {
        let (xf, yf) = (x as f64, y as f64);
        let d = params.signed_distance(t, xf, yf);
        let edge = (EDGE_HALF_WIDTH - d).clamp(0.0, 1.0);
        if edge == 0.0 {
            return -1.0;
        }
        let rho = (xf - cx).hypot(yf - cy);
        let phi = (yf - cy).atan2(xf - cx) - theta;
        let s = ((rho - offset - params.r_inner0) / thick).clamp(0.0, 1.0);
        let tissue = (RING_BASE + params.noise_sigma * tex.at(phi, s)).clamp(-1.0, 1.0);
        (-1.0 + (tissue + 1.0) * edge) as f32
    })
}

fn seg_frame(params: &PhantomParams, t: usize) -> Mask {
    Mask::from_fn(params.height, params.width, |y, x| {
        u8::from(in_myocardium(params, t, x as f64, y as f64))
    })
}

/// Builds a full study. Deterministic in `params` (including the seed).
pub fn generate_phantom(params: &PhantomParams) -> Result<CineStudy> {
    params.validate()?;
    let tex = Texture::new(params.seed);
    let noise = NoiseModel::default();
    let (h, w, n) = (params.height, params.width, params.num_frames);
    let mut magnitude = Vec::with_capacity(n);
    let mut seg = Vec::with_capacity(n);
    let mut phase: [Vec<Image>; 3] = Default::default();
    for t in 0..n {
        let mag = magnitude_frame(params, &tex, t);
        for axis in Axis::ALL {
            let venc = if axis == Axis::Z {
                CANONICAL_VENC_THROUGH_CMS
            } else {
                CANONICAL_VENC_INPLANE_CMS
            };
            let bg = frame_background(h, w, &noise, seed::derive(params.seed, &[0xba5e]), t, axis.index())?;
            let img = Image::from_fn(h, w, |y, x| {
                if mag.get(y, x) >= crate::metrics::BACKGROUND_THRESHOLD {
                    let v = params.field(t as f64, x as f64, y as f64);
                    let c = match axis {
                        Axis::X => v.vx,
                        Axis::Y => v.vy,
                        Axis::Z => v.vz,
                    };
                    velocity_to_phase(c, venc)
                } else {
                    crate::data::normalize_phase_value(crate::data::denormalize_phase(bg.get(y, x)))
                }
            });
            phase[axis.index()].push(img);
        }
        seg.push(seg_frame(params, t));
        magnitude.push(mag);
    }
    let meta = StudyMeta::canonical(format!("phantom-{}", params.seed), params.pixel_spacing_mm);
    let meta = StudyMeta {
        num_frames: n,
        ..meta
    };
    CineStudy::new(magnitude, phase, seg, meta)
}

/// Studies for seeds `params.seed + i`, `i < count`.
pub fn generate_cohort(params: &PhantomParams, count: usize) -> Result<Vec<CineStudy>> {
    (0..count)
        .map(|i| generate_phantom(&params.with_seed(params.seed + i as u64)))
        .collect()
}
