//! Study containers, frame-index arithmetic, phase storage normalization and
//! on-disk persistence.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, MvmError, Result};
use crate::grid::{Image, Mask};
use crate::tensor_file::{TensorData, TensorFile};

/// Frames per cardiac cycle after temporal normalization.
pub const CANONICAL_FRAMES: usize = 50;
pub const CANONICAL_VENC_INPLANE_CMS: f64 = 20.0;
pub const CANONICAL_VENC_THROUGH_CMS: f64 = 30.0;

/// Raw phase pixels span `[0, PHASE_RAW_MAX]`; `PHASE_RAW_ZERO` encodes zero velocity.
pub const PHASE_RAW_MAX: u16 = 4096;
pub const PHASE_RAW_ZERO: u16 = 2048;

/// Velocity-encoding direction of a phase image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Axis::X => "phase_x",
            Axis::Y => "phase_y",
            Axis::Z => "phase_z",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyMeta {
    pub num_frames: usize,
    #[serde(rename = "venc_inplane_cms")]
    pub venc_inplane: f64,
    #[serde(rename = "venc_through_cms")]
    pub venc_through: f64,
    #[serde(rename = "pixel_spacing_mm")]
    pub pixel_spacing: f64,
    pub subject_id: String,
}

impl StudyMeta {
    pub fn canonical(subject_id: impl Into<String>, pixel_spacing: f64) -> Self {
        Self {
            num_frames: CANONICAL_FRAMES,
            venc_inplane: CANONICAL_VENC_INPLANE_CMS,
            venc_through: CANONICAL_VENC_THROUGH_CMS,
            pixel_spacing,
            subject_id: subject_id.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            return Err(invalid(format!("num_frames = {} < 2", self.num_frames)));
        }
        if !(self.venc_inplane > 0.0 && self.venc_through > 0.0) {
            return Err(invalid("v_enc values must be positive"));
        }
        if !(self.pixel_spacing > 0.0) {
            return Err(invalid("pixel spacing must be positive"));
        }
        Ok(())
    }

    /// Encoding velocity for a phase direction, cm/s.
    pub fn venc(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X | Axis::Y => self.venc_inplane,
            Axis::Z => self.venc_through,
        }
    }
}

/// One slice's full cardiac cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct CineStudy {
    magnitude: Vec<Image>,
    phase: [Vec<Image>; 3],
    seg: Vec<Mask>,
    meta: StudyMeta,
}

impl CineStudy {
    pub fn new(
        magnitude: Vec<Image>,
        phase: [Vec<Image>; 3],
        seg: Vec<Mask>,
        meta: StudyMeta,
    ) -> Result<Self> {
        meta.validate()?;
        let t = meta.num_frames;
        let first = magnitude
            .first()
            .ok_or_else(|| invalid("study has no frames"))?;
        let (h, w) = first.dims();
        let lens = [magnitude.len(), phase[0].len(), phase[1].len(), phase[2].len(), seg.len()];
        if lens.iter().any(|&l| l != t) {
            return Err(invalid(format!(
                "frame counts {lens:?} disagree with num_frames = {t}"
            )));
        }
        let images = magnitude.iter().chain(phase.iter().flatten());
        for img in images {
            if img.dims() != (h, w) {
                return Err(invalid(format!("frame {:?} differs from {h}x{w}", img.dims())));
            }
            if img.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(invalid("image values must lie in [-1, 1]"));
            }
        }
        for m in &seg {
            if m.dims() != (h, w) {
                return Err(invalid(format!("mask {:?} differs from {h}x{w}", m.dims())));
            }
            if !m.is_binary() {
                return Err(invalid("segmentation masks must be binary"));
            }
        }
        Ok(Self {
            magnitude,
            phase,
            seg,
            meta,
        })
    }

    pub fn meta(&self) -> &StudyMeta {
        &self.meta
    }

    pub fn num_frames(&self) -> usize {
        self.meta.num_frames
    }

    pub fn dims(&self) -> (usize, usize) {
        self.magnitude[0].dims()
    }

    pub fn magnitude(&self, t: usize) -> &Image {
        &self.magnitude[t]
    }

    pub fn magnitudes(&self) -> &[Image] {
        &self.magnitude
    }

    pub fn phase(&self, axis: Axis, t: usize) -> &Image {
        &self.phase[axis.index()][t]
    }

    pub fn phases(&self, axis: Axis) -> &[Image] {
        &self.phase[axis.index()]
    }

    pub fn seg(&self, t: usize) -> &Mask {
        &self.seg[t]
    }

    pub fn segs(&self) -> &[Mask] {
        &self.seg
    }

    /// Same study with every phase frame replaced.
    pub fn with_phases(&self, phase: [Vec<Image>; 3]) -> Result<Self> {
        Self::new(
            self.magnitude.clone(),
            phase,
            self.seg.clone(),
            self.meta.clone(),
        )
    }

    pub fn with_subject_id(mut self, id: impl Into<String>) -> Self {
        self.meta.subject_id = id.into();
        self
    }

    pub fn into_parts(self) -> (Vec<Image>, [Vec<Image>; 3], Vec<Mask>, StudyMeta) {
        (self.magnitude, self.phase, self.seg, self.meta)
    }

    /// Crops every frame to `size × size` centred on the bounding box of all
    /// segmentation masks, shifted to stay inside the image.
    pub fn crop_to_roi(&self, size: usize) -> Result<Self> {
        let (h, w) = self.dims();
        if size > h || size > w {
            return Err(invalid(format!("crop {size} exceeds {h}x{w}")));
        }
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for m in &self.seg {
            for y in 0..h {
                for x in 0..w {
                    if m.get(y, x) == 1 {
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                    }
                }
            }
        }
        if y0 == usize::MAX {
            return Err(MvmError::NoMyocardium { t: 0 });
        }
        let start = |lo: usize, hi: usize, extent: usize| {
            let centre = (lo + hi) / 2;
            centre.saturating_sub(size / 2).min(extent - size)
        };
        let (cy, cx) = (start(y0, y1, h), start(x0, x1, w));
        let crop_all = |v: &[Image]| -> Result<Vec<Image>> {
            v.iter().map(|i| i.crop(cy, cx, size, size)).collect()
        };
        Self::new(
            crop_all(&self.magnitude)?,
            [
                crop_all(&self.phase[0])?,
                crop_all(&self.phase[1])?,
                crop_all(&self.phase[2])?,
            ],
            self.seg
                .iter()
                .map(|m| m.crop(cy, cx, size, size))
                .collect::<Result<_>>()?,
            self.meta.clone(),
        )
    }
}

/// Per-pixel loss weights; every entry is 0.1 or 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    weights: Image,
}

impl WeightMap {
    pub const LOW: f32 = 0.1;
    pub const HIGH: f32 = 1.0;

    pub(crate) fn from_highlight(highlight: &Mask) -> Self {
        Self {
            weights: highlight.map(|m| if m == 1 { Self::HIGH } else { Self::LOW }),
        }
    }

    pub fn uniform(height: usize, width: usize, value: f32) -> Result<Self> {
        if value != Self::LOW && value != Self::HIGH {
            return Err(invalid(format!("weight {value} is not 0.1 or 1.0")));
        }
        Ok(Self {
            weights: Image::filled(height, width, value),
        })
    }

    pub fn weights(&self) -> &Image {
        &self.weights
    }
}

/// How a series is temporally downsampled: `k` frames are dropped after
/// every kept frame, starting from frame `offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownsampleSpec {
    pub k: usize,
    pub offset: usize,
}

impl DownsampleSpec {
    pub fn new(k: usize, offset: usize, num_frames: usize) -> Result<Self> {
        if offset >= num_frames {
            return Err(invalid(format!("offset {offset} >= {num_frames} frames")));
        }
        Ok(Self { k, offset })
    }

    pub fn stride(&self) -> usize {
        self.k + 1
    }

    /// Whether frame `t` survives downsampling.
    pub fn keeps(&self, t: usize) -> bool {
        t >= self.offset && (t - self.offset).is_multiple_of(self.stride())
    }

    /// Kept frame indices in increasing order.
    pub fn kept(&self, num_frames: usize) -> Vec<usize> {
        (self.offset..num_frames).step_by(self.stride()).collect()
    }
}

/// `t mod num_frames`, mapped into `[0, num_frames)` for negative `t` too.
pub fn wrap_index(t: i64, num_frames: usize) -> Result<usize> {
    if num_frames == 0 {
        return Err(invalid("cannot wrap into zero frames"));
    }
    Ok(t.rem_euclid(num_frames as i64) as usize)
}

/// Maps raw phase integers in `[0, 4096]` to `[-1, 1]` via `raw / 2048 - 1`.
pub fn normalize_phase_raw(raw: &[u16]) -> Result<Vec<f32>> {
    raw.iter()
        .map(|&r| {
            if r > PHASE_RAW_MAX {
                Err(invalid(format!("raw phase {r} outside [0, 4096]")))
            } else {
                Ok(normalize_phase_value(r))
            }
        })
        .collect()
}

pub(crate) fn normalize_phase_value(raw: u16) -> f32 {
    (raw as f64 / PHASE_RAW_ZERO as f64 - 1.0) as f32
}

/// Nearest raw integer for a normalized phase value, clamped to `[0, 4096]`.
pub fn denormalize_phase(value: f32) -> u16 {
    let raw = ((value as f64 + 1.0) * PHASE_RAW_ZERO as f64).round();
    raw.clamp(0.0, PHASE_RAW_MAX as f64) as u16
}

const META_FILE: &str = "meta.json";
const MAGNITUDE_FILE: &str = "magnitude.ten";
const SEG_FILE: &str = "seg.ten";

/// Writes `meta.json` plus one `.ten` file per array into `dir`.
pub fn save_study(study: &CineStudy, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = study.dims();
    let t = study.num_frames();
    let dims = vec![t, h, w];
    let flatten = |frames: &[Image]| -> Vec<f32> {
        frames.iter().flat_map(|f| f.data().iter().copied()).collect()
    };
    fs::write(
        dir.join(META_FILE),
        serde_json::to_string_pretty(study.meta())?,
    )?;
    TensorFile::f32(dims.clone(), flatten(study.magnitudes())).write(&dir.join(MAGNITUDE_FILE))?;
    for axis in Axis::ALL {
        TensorFile::f32(dims.clone(), flatten(study.phases(axis)))
            .write(&dir.join(format!("{}.ten", axis.file_stem())))?;
    }
    let seg: Vec<u8> = study
        .segs()
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .collect();
    TensorFile::u8(dims, seg).write(&dir.join(SEG_FILE))?;
    Ok(())
}

pub fn load_study(dir: &Path) -> Result<CineStudy> {
    let corrupt = |reason: String| MvmError::CorruptStudy {
        path: dir.to_path_buf(),
        reason,
    };
    let meta_text = fs::read_to_string(dir.join(META_FILE))
        .map_err(|e| corrupt(format!("{META_FILE}: {e}")))?;
    let meta: StudyMeta =
        serde_json::from_str(&meta_text).map_err(|e| corrupt(format!("{META_FILE}: {e}")))?;
    meta.validate().map_err(|e| corrupt(e.to_string()))?;

    let read_frames = |name: &str| -> Result<(usize, usize, TensorData)> {
        let tf = TensorFile::read(&dir.join(name))?;
        if tf.dims.len() != 3 {
            return Err(corrupt(format!("{name}: expected rank 3, got {:?}", tf.dims)));
        }
        if tf.dims[0] != meta.num_frames {
            return Err(corrupt(format!(
                "{name}: {} frames but meta.num_frames = {}",
                tf.dims[0], meta.num_frames
            )));
        }
        Ok((tf.dims[1], tf.dims[2], tf.data))
    };
    let images = |name: &str| -> Result<(usize, usize, Vec<Image>)> {
        let (h, w, data) = read_frames(name)?;
        let TensorData::F32(v) = data else {
            return Err(corrupt(format!("{name}: expected float32")));
        };
        let frames = v
            .chunks_exact(h * w)
            .map(|c| Image::new(h, w, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((h, w, frames))
    };
    let (h, w, magnitude) = images(MAGNITUDE_FILE)?;
    let mut phase: [Vec<Image>; 3] = Default::default();
    for axis in Axis::ALL {
        let (ph, pw, frames) = images(&format!("{}.ten", axis.file_stem()))?;
        if (ph, pw) != (h, w) {
            return Err(corrupt(format!("{axis:?} phase is {ph}x{pw}, magnitude {h}x{w}")));
        }
        phase[axis.index()] = frames;
    }
    let (sh, sw, data) = read_frames(SEG_FILE)?;
    let TensorData::U8(v) = data else {
        return Err(corrupt(format!("{SEG_FILE}: expected uint8")));
    };
    if (sh, sw) != (h, w) {
        return Err(corrupt(format!("seg is {sh}x{sw}, magnitude {h}x{w}")));
    }
    let seg = v
        .chunks_exact(h * w)
        .map(|c| Mask::new(h, w, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    CineStudy::new(magnitude, phase, seg, meta).map_err(|e| corrupt(e.to_string()))
}
