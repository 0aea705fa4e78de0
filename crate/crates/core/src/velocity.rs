//! Velocity assessment: phase decoding, cylindrical decomposition about the
//! LV centroid, global velocity curves and their clinical summary statistics.
//!
//! Coordinates follow the image frame: `x` is the column (right-positive),
//! `y` the row (down-positive). The circumferential unit vector is
//! `ĉ = (−r̂_y, r̂_x)`, and positive radial velocity means outward motion.

use serde::{Deserialize, Serialize};

use crate::data::{normalize_phase_value, Axis, CineStudy, PHASE_RAW_MAX, PHASE_RAW_ZERO};
use crate::error::{invalid, MvmError, Result};
use crate::grid::{check_same, Grid, Mask};
use crate::metrics::pearson;

/// Pixels closer than this to the centroid have no defined radial direction.
pub const MIN_RADIUS_PX: f64 = 1e-6;

/// Normalized phase `[-1, 1]` to velocity in cm/s.
pub fn phase_to_velocity(phase: f64, venc: f64) -> f64 {
    // raw = (phase + 1) * 2048, v = (raw / 2048 - 1) * venc, left unrounded
    let raw = (phase + 1.0) * PHASE_RAW_ZERO as f64;
    (raw / PHASE_RAW_ZERO as f64 - 1.0) * venc
}

/// Velocity in cm/s to the nearest raw phase integer, clamped to `[0, 4096]`.
pub fn encode_velocity_raw(v: f64, venc: f64) -> u16 {
    let raw = (PHASE_RAW_ZERO as f64 * (1.0 + v / venc)).round();
    raw.clamp(0.0, PHASE_RAW_MAX as f64) as u16
}

/// Velocity in cm/s to a quantized normalized phase value.
pub fn velocity_to_phase(v: f64, venc: f64) -> f32 {
    normalize_phase_value(encode_velocity_raw(v, venc))
}

/// Velocity represented by one raw-integer step, cm/s.
pub fn quantization_step(venc: f64) -> f64 {
    venc / PHASE_RAW_ZERO as f64
}

/// Mean `(x, y)` coordinate of the mask's foreground pixels.
pub fn lv_centroid(seg: &Mask) -> Result<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..seg.height() {
        for x in 0..seg.width() {
            if seg.get(y, x) == 1 {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(MvmError::NoMyocardium { t: 0 });
    }
    Ok((sx / n as f64, sy / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelVelocity {
    pub y: usize,
    pub x: usize,
    pub radial: f64,
    pub circumferential: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub pixels: Vec<PixelVelocity>,
    /// Myocardial pixels dropped because they coincide with the centroid.
    pub excluded: usize,
}

/// Projects in-plane velocities on the radial and circumferential unit
/// vectors about `centroid` for every myocardial pixel.
pub fn cylindrical_decompose(
    vx: &Grid<f64>,
    vy: &Grid<f64>,
    seg: &Mask,
    centroid: (f64, f64),
) -> Result<Decomposition> {
    check_same(vx, vy, "cylindrical_decompose")?;
    check_same(vx, seg, "cylindrical_decompose")?;
    let (cx, cy) = centroid;
    let mut pixels = Vec::new();
    let mut excluded = 0;
    for y in 0..seg.height() {
        for x in 0..seg.width() {
            if seg.get(y, x) != 1 {
                continue;
            }
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let r = dx.hypot(dy);
            if r < MIN_RADIUS_PX {
                excluded += 1;
                continue;
            }
            let (rx, ry) = (dx / r, dy / r);
            let (u, v) = (vx.get(y, x), vy.get(y, x));
            pixels.push(PixelVelocity {
                y,
                x,
                radial: u * rx + v * ry,
                circumferential: -u * ry + v * rx,
            });
        }
    }
    Ok(Decomposition { pixels, excluded })
}

/// Global myocardial velocity curves in mm/s, one value per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityCurves {
    pub radial: Vec<f64>,
    pub circumferential: Vec<f64>,
    pub longitudinal: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Radial,
    Circumferential,
    Longitudinal,
}

impl Direction {
    pub const ALL: [Direction; 3] = [
        Direction::Radial,
        Direction::Circumferential,
        Direction::Longitudinal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Radial => "radial",
            Direction::Circumferential => "circumferential",
            Direction::Longitudinal => "longitudinal",
        }
    }
}

impl VelocityCurves {
    pub fn len(&self) -> usize {
        self.radial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radial.is_empty()
    }

    pub fn get(&self, d: Direction) -> &[f64] {
        match d {
            Direction::Radial => &self.radial,
            Direction::Circumferential => &self.circumferential,
            Direction::Longitudinal => &self.longitudinal,
        }
    }

    /// CSV with columns `t, vr_mms, vc_mms, vz_mms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,vr_mms,vc_mms,vz_mms\n");
        for t in 0..self.len() {
            out.push_str(&format!(
                "{t},{},{},{}\n",
                self.radial[t], self.circumferential[t], self.longitudinal[t]
            ));
        }
        out
    }
}

fn decode_field(study: &CineStudy, axis: Axis, t: usize) -> Grid<f64> {
    let venc = study.meta().venc(axis);
    study.phase(axis, t).map(|p| phase_to_velocity(p as f64, venc))
}

/// Decodes, decomposes and mask-averages every frame of a study.
pub fn global_curves(study: &CineStudy) -> Result<VelocityCurves> {
    let n = study.num_frames();
    let mut curves = VelocityCurves {
        radial: Vec::with_capacity(n),
        circumferential: Vec::with_capacity(n),
        longitudinal: Vec::with_capacity(n),
    };
    for t in 0..n {
        let seg = study.seg(t);
        let centroid = lv_centroid(seg).map_err(|_| MvmError::NoMyocardium { t })?;
        let vx = decode_field(study, Axis::X, t);
        let vy = decode_field(study, Axis::Y, t);
        let vz = decode_field(study, Axis::Z, t);
        let dec = cylindrical_decompose(&vx, &vy, seg, centroid)?;
        if dec.pixels.is_empty() {
            return Err(MvmError::NoMyocardium { t });
        }
        let np = dec.pixels.len() as f64;
        let vr = dec.pixels.iter().map(|p| p.radial).sum::<f64>() / np;
        let vc = dec.pixels.iter().map(|p| p.circumferential).sum::<f64>() / np;
        let (mut sz, mut nz) = (0.0, 0usize);
        for (v, &m) in vz.data().iter().zip(seg.data()) {
            if m == 1 {
                sz += v;
                nz += 1;
            }
        }
        // cm/s -> mm/s
        curves.radial.push(vr * 10.0);
        curves.circumferential.push(vc * 10.0);
        curves.longitudinal.push(sz / nz as f64 * 10.0);
    }
    Ok(curves)
}

/// Clinical summary of one velocity curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityStats {
    /// Peak systolic velocity magnitude, mm/s.
    pub psv: f64,
    /// Time to peak systolic velocity, frame index.
    pub tpsv: usize,
    /// Peak diastolic velocity magnitude, mm/s.
    pub pdv: f64,
    pub tpdv: usize,
    /// Mean absolute velocity over the cycle, mm/s.
    pub mv: f64,
}

/// Default systole/diastole boundary: a third of the cycle.
pub fn default_systole_end(num_frames: usize) -> usize {
    (num_frames / 3).max(1)
}

fn abs_peak(curve: &[f64], range: std::ops::Range<usize>) -> (f64, usize) {
    let mut best = (0.0, range.start);
    let mut first = true;
    for t in range {
        let a = curve[t].abs();
        if first || a > best.0 {
            best = (a, t);
            first = false;
        }
    }
    best
}

pub fn curve_stats(curve: &[f64], systole_end: usize) -> Result<VelocityStats> {
    let n = curve.len();
    if n < 2 {
        return Err(invalid(format!("curve of length {n} is too short")));
    }
    if systole_end < 1 || systole_end >= n {
        return Err(invalid(format!(
            "systole_end {systole_end} outside [1, {n})"
        )));
    }
    let (psv, tpsv) = abs_peak(curve, 0..systole_end);
    let (pdv, tpdv) = abs_peak(curve, systole_end..n);
    let mv = curve.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    Ok(VelocityStats {
        psv,
        tpsv,
        pdv,
        tpdv,
        mv,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionComparison {
    pub direction: Direction,
    /// `None` when either curve is constant.
    pub pearson: Option<f64>,
    pub reference: VelocityStats,
    pub candidate: VelocityStats,
}

/// Per-direction Pearson correlation plus the summary statistics of both curves.
pub fn compare_curves(
    reference: &VelocityCurves,
    candidate: &VelocityCurves,
    systole_end: usize,
) -> Result<Vec<DirectionComparison>> {
    if reference.len() != candidate.len() {
        return Err(invalid(format!(
            "curves have {} and {} frames",
            reference.len(),
            candidate.len()
        )));
    }
    Direction::ALL
        .iter()
        .map(|&d| {
            let (a, b) = (reference.get(d), candidate.get(d));
            let pearson = match pearson(a, b) {
                Ok(r) => Some(r),
                Err(MvmError::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(DirectionComparison {
                direction: d,
                pearson,
                reference: curve_stats(a, systole_end)?,
                candidate: curve_stats(b, systole_end)?,
            })
        })
        .collect()
}

/// Periodic linear resampling of a curve onto `n` evenly spaced time points.
pub fn resample_periodic(curve: &[f64], n: usize) -> Result<Vec<f64>> {
    let m = curve.len();
    if m == 0 || n == 0 {
        return Err(invalid("cannot resample an empty curve"));
    }
    Ok((0..n)
        .map(|i| {
            let pos = i as f64 * m as f64 / n as f64;
            let i0 = pos.floor() as usize % m;
            let frac = pos - pos.floor();
            curve[i0] * (1.0 - frac) + curve[(i0 + 1) % m] * frac
        })
        .collect())
}
