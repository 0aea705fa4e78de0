//! Non-learned interpolation baselines: per-pixel linear blending and
//! Horn–Schunck optical flow with fractional backward warping.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{check_same, Grid, Image, Mask};

/// Dense displacement field, pixels per frame gap.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Grid<f64>,
    pub v: Grid<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            u: Grid::filled(height, width, 0.0),
            v: Grid::filled(height, width, 0.0),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.data().iter().chain(self.v.data()).all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HornSchunckConfig {
    pub alpha: f64,
    pub iters: usize,
}

impl Default for HornSchunckConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            iters: 200,
        }
    }
}

fn check_k(k: usize, big_k: usize) -> Result<f64> {
    if k == 0 || k > big_k {
        return Err(invalid(format!("k = {k} outside 1..={big_k}")));
    }
    Ok(k as f64 / (big_k + 1) as f64)
}

/// `(1 − k/(K+1))·m_a + k/(K+1)·m_b`.
pub fn linear_interpolate(m_a: &Image, m_b: &Image, k: usize, big_k: usize) -> Result<Image> {
    blend(m_a, m_b, gap_fraction(k, big_k)?)
}

/// Position `k/(K+1)` of frame `k` inside a gap of `K` missing frames.
pub fn gap_fraction(k: usize, big_k: usize) -> Result<f32> {
    Ok(check_k(k, big_k)? as f32)
}

/// `(1 − f)·a + f·b`.
pub fn blend(a: &Image, b: &Image, f: f32) -> Result<Image> {
    check_same(a, b, "blend")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (1.0 - f) * p + f * q)
        .collect();
    Image::new(a.height(), a.width(), data)
}

/// Linear blend of two masks, re-binarized at 0.5.
pub fn linear_interpolate_mask(s_a: &Mask, s_b: &Mask, k: usize, big_k: usize) -> Result<Mask> {
    let blend = linear_interpolate(&s_a.to_image(), &s_b.to_image(), k, big_k)?;
    Ok(blend.map(|v| u8::from(v >= 0.5)))
}

fn at_clamped(img: &Grid<f64>, y: isize, x: isize) -> f64 {
    let yy = y.clamp(0, img.height() as isize - 1) as usize;
    let xx = x.clamp(0, img.width() as isize - 1) as usize;
    img.get(yy, xx)
}

fn neighbour_mean(f: &Grid<f64>) -> Grid<f64> {
    Grid::from_fn(f.height(), f.width(), |y, x| {
        let (y, x) = (y as isize, x as isize);
        0.25 * (at_clamped(f, y - 1, x) + at_clamped(f, y + 1, x) + at_clamped(f, y, x - 1) + at_clamped(f, y, x + 1))
    })
}

/// Flow from `i1` to `i2` by Jacobi iteration of the Horn–Schunck update,
/// starting from zero.
pub fn horn_schunck(i1: &Image, i2: &Image, cfg: &HornSchunckConfig) -> Result<FlowField> {
    check_same(i1, i2, "horn_schunck")?;
    if !(cfg.alpha > 0.0) || cfg.iters == 0 {
        return Err(invalid("horn_schunck needs alpha > 0 and iters >= 1"));
    }
    let (h, w) = i1.dims();
    let a = i1.map(|v| v as f64);
    let b = i2.map(|v| v as f64);
    let grad = |dy: isize, dx: isize| {
        Grid::from_fn(h, w, |y, x| {
            let (y, x) = (y as isize, x as isize);
            let d = |img: &Grid<f64>| 0.5 * (at_clamped(img, y + dy, x + dx) - at_clamped(img, y - dy, x - dx));
            0.5 * (d(&a) + d(&b))
        })
    };
    let ix = grad(0, 1);
    let iy = grad(1, 0);
    let it: Vec<f64> = b.data().iter().zip(a.data()).map(|(q, p)| q - p).collect();
    let a2 = cfg.alpha * cfg.alpha;
    let mut flow = FlowField::zeros(h, w);
    for _ in 0..cfg.iters {
        let ub = neighbour_mean(&flow.u);
        let vb = neighbour_mean(&flow.v);
        for i in 0..h * w {
            let (gx, gy) = (ix.data()[i], iy.data()[i]);
            let common = (gx * ub.data()[i] + gy * vb.data()[i] + it[i]) / (a2 + gx * gx + gy * gy);
            flow.u.data_mut()[i] = ub.data()[i] - gx * common;
            flow.v.data_mut()[i] = vb.data()[i] - gy * common;
        }
    }
    Ok(flow)
}

fn bilinear(img: &Image, y: f64, x: f64) -> f32 {
    let (h, w) = img.dims();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0) as f64 * (1.0 - fx) + img.get(y0, x1) as f64 * fx;
    let bot = img.get(y1, x0) as f64 * (1.0 - fx) + img.get(y1, x1) as f64 * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

/// Backward warp: `out(p) = img(p − fraction·flow(p))`, bilinear, border-clamped.
pub fn warp_image(img: &Image, flow: &FlowField, fraction: f64) -> Result<Image> {
    check_same(img, &flow.u, "warp_image")?;
    if fraction == 0.0 {
        return Ok(img.clone());
    }
    Ok(Image::from_fn(img.height(), img.width(), |y, x| {
        bilinear(
            img,
            y as f64 - fraction * flow.v.get(y, x),
            x as f64 - fraction * flow.u.get(y, x),
        )
    }))
}

/// Nearest-neighbour backward warp of a binary mask.
pub fn warp_mask(mask: &Mask, flow: &FlowField, fraction: f64) -> Result<Mask> {
    check_same(mask, &flow.u, "warp_mask")?;
    let (h, w) = mask.dims();
    Ok(Mask::from_fn(h, w, |y, x| {
        let sy = (y as f64 - fraction * flow.v.get(y, x)).round().clamp(0.0, (h - 1) as f64);
        let sx = (x as f64 - fraction * flow.u.get(y, x)).round().clamp(0.0, (w - 1) as f64);
        u8::from(mask.get(sy as usize, sx as usize) == 1)
    }))
}

/// Interpolates frame `k` of `K` between `a` and `b` by warping `a` (and
/// its mask) along a fraction `k/(K+1)` of the a→b flow.
#[allow(clippy::too_many_arguments)]
pub fn flow_warp_interpolate(
    m_a: &Image,
    m_b: &Image,
    seg_a: &Mask,
    seg_b: &Mask,
    k: usize,
    big_k: usize,
    cfg: &HornSchunckConfig,
) -> Result<(Image, Mask)> {
    check_same(m_a, m_b, "flow_warp_interpolate")?;
    check_same(seg_a, seg_b, "flow_warp_interpolate masks")?;
    check_same(m_a, seg_a, "flow_warp_interpolate image/mask")?;
    let f = check_k(k, big_k)?;
    let flow = horn_schunck(m_a, m_b, cfg)?;
    Ok((warp_image(m_a, &flow, f)?, warp_mask(seg_a, &flow, f)?))
}

/// Integer shift `(dx, dy)` in `[-r, r]²` minimizing the SSD between
/// `i1` moved by the shift and `i2`, over pixels valid for every shift.
pub fn best_integer_shift(i1: &Image, i2: &Image, r: usize) -> Result<(i64, i64)> {
    check_same(i1, i2, "best_integer_shift")?;
    let (h, w) = i1.dims();
    if h <= 2 * r || w <= 2 * r {
        return Err(invalid("search radius too large for image"));
    }
    let r = r as i64;
    let mut best = (f64::INFINITY, (0, 0));
    for dy in -r..=r {
        for dx in -r..=r {
            let mut ssd = 0.0;
            for y in r..h as i64 - r {
                for x in r..w as i64 - r {
                    let d = i2.get(y as usize, x as usize) as f64
                        - i1.get((y - dy) as usize, (x - dx) as usize) as f64;
                    ssd += d * d;
                }
            }
            if ssd < best.0 {
                best = (ssd, (dx, dy));
            }
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn blob(n: usize, cx: f64, cy: f64, sigma: f64, amp: f64) -> Image {
        Image::from_fn(n, n, |y, x| {
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            (amp * (-r2 / (2.0 * sigma * sigma)).exp()) as f32
        })
    }

    fn centroid(img: &Image) -> (f64, f64) {
        let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let v = img.get(y, x) as f64;
                s += v;
                sx += v * x as f64;
                sy += v * y as f64;
            }
        }
        (sx / s, sy / s)
    }

    #[test]
    fn linear_examples() {
        let a = Image::filled(4, 4, 0.0);
        let b = Image::filled(4, 4, 1.0);
        assert!(linear_interpolate(&a, &b, 1, 1).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(linear_interpolate(&a, &b, 1, 3).unwrap().data().iter().all(|&v| v == 0.25));
        assert_eq!(linear_interpolate(&b, &b, 2, 5).unwrap(), b);
        assert!(linear_interpolate(&a, &b, 0, 3).is_err());
        assert!(linear_interpolate(&a, &b, 4, 3).is_err());
        let m = linear_interpolate_mask(&Mask::filled(2, 2, 1), &Mask::filled(2, 2, 0), 3, 4).unwrap();
        assert_eq!(m, Mask::filled(2, 2, 0));
    }

    #[test]
    fn zero_motion_gives_zero_flow() {
        let a = blob(24, 12.0, 12.0, 4.0, 10.0);
        let f = horn_schunck(&a, &a, &HornSchunckConfig::default()).unwrap();
        assert!(f.u.data().iter().chain(f.v.data()).all(|&v| v == 0.0));
        let c = Image::filled(24, 24, 0.7);
        let f = horn_schunck(&c, &c.map(|v| v - 0.2), &HornSchunckConfig::default()).unwrap();
        assert!(f.u.data().iter().chain(f.v.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn translated_blob_flow() {
        let a = blob(48, 22.0, 24.0, 6.0, 100.0);
        let b = blob(48, 23.0, 24.0, 6.0, 100.0);
        assert_eq!(best_integer_shift(&a, &b, 3).unwrap(), (1, 0));
        let f = horn_schunck(&a, &b, &HornSchunckConfig::default()).unwrap();
        assert!(f.is_finite());
        let mut g: Vec<(f64, usize)> = (0..a.len())
            .map(|i| {
                let (y, x) = ((i / 48) as isize, (i % 48) as isize);
                let gx = at_clamped(&a.map(|v| v as f64), y, x + 1) - at_clamped(&a.map(|v| v as f64), y, x - 1);
                let gy = at_clamped(&a.map(|v| v as f64), y + 1, x) - at_clamped(&a.map(|v| v as f64), y - 1, x);
                (gx.hypot(gy), i)
            })
            .collect();
        g.sort_by(|p, q| q.0.total_cmp(&p.0));
        let top = &g[..g.len() / 10];
        let mut us: Vec<f64> = top.iter().map(|&(_, i)| f.u.data()[i]).collect();
        let mut vs: Vec<f64> = top.iter().map(|&(_, i)| f.v.data()[i]).collect();
        us.sort_by(f64::total_cmp);
        vs.sort_by(f64::total_cmp);
        assert!((us[us.len() / 2] - 1.0).abs() < 0.2, "median u {}", us[us.len() / 2]);
        assert!(vs[vs.len() / 2].abs() < 0.2);
    }

    #[test]
    fn zero_warp_is_identity() {
        let a = blob(16, 8.0, 8.0, 3.0, 1.0);
        let m = Mask::threshold(&a, 0.5);
        let f = FlowField::zeros(16, 16);
        assert_eq!(warp_image(&a, &f, 0.5).unwrap(), a);
        assert_eq!(warp_mask(&m, &f, 0.5).unwrap(), m);
        let mut g = FlowField::zeros(16, 16);
        g.u.data_mut().iter_mut().for_each(|v| *v = 3.0);
        assert_eq!(warp_image(&a, &g, 0.0).unwrap(), a);
        assert_eq!(warp_mask(&m, &g, 0.0).unwrap(), m);
    }

    #[test]
    fn warped_blob_lands_halfway() {
        let a = blob(48, 22.0, 24.0, 6.0, 100.0);
        let b = blob(48, 24.0, 24.0, 6.0, 100.0);
        let sa = Mask::threshold(&a, 50.0);
        let sb = Mask::threshold(&b, 50.0);
        let cfg = HornSchunckConfig::default();
        let (m, s) = flow_warp_interpolate(&a, &b, &sa, &sb, 1, 1, &cfg).unwrap();
        let (cx, cy) = centroid(&m);
        assert!((cx - 23.0).abs() < 0.5 && (cy - 24.0).abs() < 0.5, "({cx}, {cy})");
        assert!(s.is_binary());
        let change = (s.count() as f64 - sa.count() as f64).abs() / sa.count() as f64;
        assert!(change < 0.2);
    }

    proptest! {
        #[test]
        fn linear_is_convex(a in prop::collection::vec(-1.0f32..1.0, 16), b in prop::collection::vec(-1.0f32..1.0, 16), big_k in 1usize..7, k in 1usize..7) {
            prop_assume!(k <= big_k);
            let ia = Image::new(4, 4, a.clone()).unwrap();
            let ib = Image::new(4, 4, b.clone()).unwrap();
            let out = linear_interpolate(&ia, &ib, k, big_k).unwrap();
            for ((o, p), q) in out.data().iter().zip(&a).zip(&b) {
                prop_assert!(*o >= p.min(*q) - 1e-6 && *o <= p.max(*q) + 1e-6);
            }
        }

        #[test]
        fn flow_ignores_brightness_offset(c in -5.0f32..5.0) {
            let a = blob(16, 7.0, 8.0, 3.0, 10.0);
            let b = blob(16, 8.0, 8.0, 3.0, 10.0);
            let cfg = HornSchunckConfig { alpha: 1.0, iters: 20 };
            let f = horn_schunck(&a, &b, &cfg).unwrap();
            let g = horn_schunck(&a.map(|v| v + c), &b.map(|v| v + c), &cfg).unwrap();
            for (p, q) in f.u.data().iter().zip(g.u.data()) {
                prop_assert!((p - q).abs() < 1e-3);
            }
        }
    }
}
