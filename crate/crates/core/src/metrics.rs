//! Loss weight maps, the weighted-MAE training loss and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::data::WeightMap;
use crate::error::{invalid, MvmError, Result};
use crate::grid::{check_same, Image, Mask};

/// Magnitude pixels at or below this value are background.
pub const BACKGROUND_THRESHOLD: f32 = -0.95;
/// Default padding of the ROI patch around the outer myocardial contour, pixels.
pub const DEFAULT_ROI_PAD: usize = 8;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// ROI weight map plus a flag raised when the mask was empty.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiWeights {
    pub map: WeightMap,
    pub empty_mask: bool,
}

/// ω1: 1.0 inside the bounding box of the mask grown by `pad` pixels
/// (clamped to the image), 0.1 elsewhere.
pub fn compute_w1(seg: &Mask, pad: usize) -> RoiWeights {
    let (h, w) = seg.dims();
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if seg.get(y, x) == 1 {
                bbox = Some(match bbox {
                    None => (y, y, x, x),
                    Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
                });
            }
        }
    }
    let Some((y0, y1, x0, x1)) = bbox else {
        return RoiWeights {
            map: WeightMap::from_highlight(&Mask::filled(h, w, 0)),
            empty_mask: true,
        };
    };
    let (y0, x0) = (y0.saturating_sub(pad), x0.saturating_sub(pad));
    let (y1, x1) = ((y1 + pad).min(h - 1), (x1 + pad).min(w - 1));
    let highlight = Mask::from_fn(h, w, |y, x| u8::from((y0..=y1).contains(&y) && (x0..=x1).contains(&x)));
    RoiWeights {
        map: WeightMap::from_highlight(&highlight),
        empty_mask: false,
    }
}

/// Non-background pixels of a `[-1, 1]` magnitude image.
pub fn foreground_mask(magnitude: &Image) -> Mask {
    Mask::threshold(magnitude, BACKGROUND_THRESHOLD)
}

/// ω2: 1.0 where magnitude > −0.95, 0.1 elsewhere.
pub fn compute_w2(magnitude: &Image) -> WeightMap {
    WeightMap::from_highlight(&foreground_mask(magnitude))
}

fn check4(pred: &Image, gt: &Image, w1: &WeightMap, w2: &WeightMap) -> Result<()> {
    check_same(pred, gt, "pred/gt")?;
    check_same(pred, w1.weights(), "pred/w1")?;
    check_same(pred, w2.weights(), "pred/w2")
}

/// `Mean(w1·|pred − gt|) + Mean(w2·|pred − gt|)` over all pixels.
pub fn weighted_mae(pred: &Image, gt: &Image, w1: &WeightMap, w2: &WeightMap) -> Result<f64> {
    check4(pred, gt, w1, w2)?;
    let n = pred.len() as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(w1.weights().data().iter().zip(w2.weights().data()))
        .map(|((&p, &g), (&a, &b))| (a as f64 + b as f64) * (p as f64 - g as f64).abs())
        .sum();
    Ok(s / n)
}

/// Gradient of [`weighted_mae`] with respect to `pred`; zero where `pred == gt`.
pub fn weighted_mae_grad(pred: &Image, gt: &Image, w1: &WeightMap, w2: &WeightMap) -> Result<Image> {
    check4(pred, gt, w1, w2)?;
    let n = pred.len() as f32;
    let data = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(w1.weights().data().iter().zip(w2.weights().data()))
        .map(|((&p, &g), (&a, &b))| {
            let s = if p > g {
                1.0
            } else if p < g {
                -1.0
            } else {
                0.0
            };
            (a + b) * s / n
        })
        .collect();
    Image::new(pred.height(), pred.width(), data)
}

/// `Mean(w·(pred − gt)²)` over all pixels.
pub fn weighted_mse(pred: &Image, gt: &Image, w: &WeightMap) -> Result<f64> {
    check_same(pred, gt, "pred/gt")?;
    check_same(pred, w.weights(), "pred/w")?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(w.weights().data())
        .map(|((&p, &g), &w)| w as f64 * (p as f64 - g as f64).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn weighted_mse_grad(pred: &Image, gt: &Image, w: &WeightMap) -> Result<Image> {
    check_same(pred, gt, "pred/gt")?;
    check_same(pred, w.weights(), "pred/w")?;
    let n = pred.len() as f32;
    let data = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(w.weights().data())
        .map(|((&p, &g), &w)| 2.0 * w * (p - g) / n)
        .collect();
    Image::new(pred.height(), pred.width(), data)
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    check_same(pred, gt, "pred/gt")?;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// `10·log10(1 / mse)`; `+∞` for a zero error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR of images already rescaled to `[0, 1]`.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?))
}

/// Maps `[-1, 1]` to `[0, 1]`.
pub fn to_unit_range(img: &Image) -> Image {
    img.map(|v| (v + 1.0) * 0.5)
}

/// Mean SSIM over all 8×8 windows (stride 1) of `[0, 1]` images.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_same(pred, gt, "pred/gt")?;
    let (h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let npx = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let a = pred.get(y, x) as f64;
                    let b = gt.get(y, x) as f64;
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            let (ma, mb) = (sa / npx, sb / npx);
            let va = (saa / npx - ma * ma).max(0.0);
            let vb = (sbb / npx - mb * mb).max(0.0);
            let cov = sab / npx - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `2|a∩b| / (|a| + |b|)`, defined as 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_same(a, b, "dice")?;
    if !a.is_binary() || !b.is_binary() {
        return Err(invalid("dice needs binary masks"));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x & y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid(format!(
            "pearson needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MvmError::UndefinedCorrelation("constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    pearson(&ranks(x), &ranks(y))
}

/// Per-frame evaluation of an interpolated magnitude image (and mask).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub msew1: f64,
    pub msew2: f64,
    #[serde(with = "json_f64")]
    pub psnr: f64,
    pub ssim: f64,
    pub dice: Option<f64>,
}

/// Names of the six reported metrics, in report order.
pub const METRIC_NAMES: [&str; 6] = ["mse", "msew1", "msew2", "psnr", "ssim", "dice"];

impl MetricReport {
    /// Compares `[-1, 1]` magnitude images after rescaling to `[0, 1]`.
    /// ω1 comes from `gt_seg` and ω2 from `gt`.
    pub fn evaluate(
        pred: &Image,
        gt: &Image,
        masks: Option<(&Mask, &Mask)>,
        gt_seg: &Mask,
        roi_pad: usize,
    ) -> Result<Self> {
        let (p, g) = (to_unit_range(pred), to_unit_range(gt));
        let w1 = compute_w1(gt_seg, roi_pad).map;
        let w2 = compute_w2(gt);
        let mse = mse(&p, &g)?;
        Ok(Self {
            mse,
            msew1: weighted_mse(&p, &g, &w1)?,
            msew2: weighted_mse(&p, &g, &w2)?,
            psnr: psnr_from_mse(mse),
            ssim: ssim(&p, &g)?,
            dice: masks.map(|(a, b)| dice(a, b)).transpose()?,
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "mse" => Some(self.mse),
            "msew1" => Some(self.msew1),
            "msew2" => Some(self.msew2),
            "psnr" => Some(self.psnr),
            "ssim" => Some(self.ssim),
            "dice" => self.dice,
            _ => None,
        }
    }
}

/// Mean and (population) standard deviation of one metric across reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    #[serde(with = "json_f64")]
    pub mean: f64,
    #[serde(with = "json_f64")]
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.iter().all(|&v| v == values[0]) {
            0.0
        } else if mean.is_finite() {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        } else {
            f64::NAN
        };
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

/// Aggregates a metric over reports, skipping reports where it is absent.
pub fn aggregate(reports: &[MetricReport], name: &str) -> Option<MeanStd> {
    let v: Vec<f64> = reports.iter().filter_map(|r| r.get(name)).collect();
    MeanStd::of(&v)
}

/// JSON has no infinities; encode non-finite floats as strings.
pub(crate) mod json_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Repr {
            N(f64),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::N(v) => Ok(v),
            Repr::S(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "NaN" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float {other}"))),
            },
        }
    }
}
