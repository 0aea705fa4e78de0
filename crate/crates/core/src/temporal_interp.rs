//! Temporal interpolation of magnitude frames and their masks with a
//! multi-head, multi-tail recurrent-residual UNet conditioned on `(τ, k)`.

use std::path::Path;

use mvm_nn::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{blend, gap_fraction, horn_schunck, linear_interpolate_mask, warp_image, warp_mask, HornSchunckConfig};
use crate::checkpoint;
use crate::data::{wrap_index, CineStudy, DownsampleSpec, StudyMeta, WeightMap};
use crate::error::{invalid, MvmError, Result};
use crate::grid::{check_same, Image, Mask};
use crate::metrics::{compute_w1, compute_w2, dice, weighted_mae, weighted_mae_grad, DEFAULT_ROI_PAD};
use crate::nets::{batch_tensor, lsgan_loss, set_tensor_image, tensor_image, Decoder, Encoder, PatchDiscriminator, Rrcnn, UnetShape};
use crate::seed;

pub const CHECKPOINT_KIND: &str = "temporal-interp";

/// Spatially constant `τ/T` and `k/(K+1)` fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMaps {
    pub tau_map: Image,
    pub k_map: Image,
}

impl ConditionMaps {
    pub fn tau_value(&self) -> f32 {
        self.tau_map.data()[0]
    }

    /// Position of the target frame inside its gap, in `(0, 1)`.
    pub fn k_value(&self) -> f32 {
        self.k_map.data()[0]
    }

    pub(crate) fn from_values(tau: f32, frac: f32, height: usize, width: usize) -> Self {
        Self {
            tau_map: Image::filled(height, width, tau),
            k_map: Image::filled(height, width, frac),
        }
    }
}

pub fn make_condition_maps(tau: usize, k: usize, num_frames: usize, big_k: usize, height: usize, width: usize) -> Result<ConditionMaps> {
    if tau >= num_frames {
        return Err(invalid(format!("tau {tau} >= {num_frames}")));
    }
    let frac = gap_fraction(k, big_k)?;
    Ok(ConditionMaps::from_values(
        (tau as f64 / num_frames as f64) as f32,
        frac,
        height,
        width,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpNetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub recurrence_steps: usize,
    /// 2 = separate magnitude and mask encoders; 1 = one shared encoder.
    pub heads: usize,
    /// Scale of the fixed linear-blend term added to the mask logits.
    pub mask_skip_gain: f32,
    pub seed: u64,
}

impl Default for InterpNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 4,
            recurrence_steps: 2,
            heads: 2,
            mask_skip_gain: 4.0,
            seed: 0,
        }
    }
}

impl InterpNetConfig {
    /// Small network for 64×64 phantom studies on a CPU.
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            depth: 3,
            ..Self::default()
        }
    }

    fn shape(&self) -> UnetShape {
        UnetShape {
            base_channels: self.base_channels,
            depth: self.depth,
            recurrence_steps: self.recurrence_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().validate()?;
        if !(self.heads == 1 || self.heads == 2) {
            return Err(invalid(format!("heads must be 1 or 2, got {}", self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// ROI crop applied to studies before training (`None` keeps full frames).
    pub crop_size: Option<usize>,
    pub roi_pad: usize,
    pub mask_loss_weight: f32,
    /// Weight of the patch-adversarial term; 0 disables the discriminator.
    pub adversarial_weight: f32,
    pub disc_base_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            crop_size: None,
            roi_pad: DEFAULT_ROI_PAD,
            mask_loss_weight: 1.0,
            adversarial_weight: 0.0,
            disc_base_channels: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid("learning_rate, batch_size and epochs must be positive"));
        }
        if self.adversarial_weight < 0.0 || self.mask_loss_weight < 0.0 {
            return Err(invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// The interpolation network and its parameters.
#[derive(Clone, Debug)]
pub struct InterpModel {
    cfg: InterpNetConfig,
    store: ParamStore,
    heads: Vec<Encoder>,
    fuse: Option<Rrcnn>,
    tails: [Decoder; 2],
}

/// Inputs of one forward pass, all `[n, c, h, w]`.
struct BatchInputs {
    heads: Vec<Tensor>,
    lin_m: Tensor,
    lin_s: Tensor,
}

impl InterpModel {
    pub fn new(cfg: &InterpNetConfig) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.shape();
        let mut rng = seed::rng(cfg.seed, &[0x1e7]);
        let mut store = ParamStore::new();
        let heads = if cfg.heads == 2 {
            vec![
                Encoder::new(&mut store, "mag_head", 4, &shape, &mut rng),
                Encoder::new(&mut store, "mask_head", 4, &shape, &mut rng),
            ]
        } else {
            vec![Encoder::new(&mut store, "head", 6, &shape, &mut rng)]
        };
        let c = shape.channels(shape.depth - 1);
        let fuse = (cfg.heads == 2).then(|| Rrcnn::new(&mut store, "fuse", 2 * c, c, shape.recurrence_steps, &mut rng));
        let tails = [
            Decoder::new(&mut store, "mag_tail", 1, &shape, &mut rng),
            Decoder::new(&mut store, "mask_tail", 1, &shape, &mut rng),
        ];
        Ok(Self {
            cfg: cfg.clone(),
            store,
            heads,
            fuse,
            tails,
        })
    }

    pub fn config(&self) -> &InterpNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, x: &BatchInputs) -> Result<(Var, Var)> {
        let s = &self.store;
        let (m_skips, s_skips, bottleneck) = if self.heads.len() == 2 {
            let hm = tape.constant(x.heads[0].clone());
            let hs = tape.constant(x.heads[1].clone());
            let m = self.heads[0].forward(tape, s, hm)?;
            let k = self.heads[1].forward(tape, s, hs)?;
            let cat = tape.concat(&[*m.last().expect("depth"), *k.last().expect("depth")])?;
            let b = self.fuse.as_ref().expect("two heads fuse").forward(tape, s, cat)?;
            (m, k, b)
        } else {
            let h = tape.constant(x.heads[0].clone());
            let m = self.heads[0].forward(tape, s, h)?;
            let b = *m.last().expect("depth");
            (m.clone(), m, b)
        };
        let raw_m = self.tails[0].forward(tape, s, bottleneck, &m_skips)?;
        let raw_s = self.tails[1].forward(tape, s, bottleneck, &s_skips)?;
        let lin = tape.constant(x.lin_m.clone());
        let res = tape.tanh(raw_m);
        let m = tape.add(lin, res)?;
        let m_hat = tape.clamp(m, -1.0, 1.0);
        let g = self.cfg.mask_skip_gain;
        let prior = tape.constant(x.lin_s.map(|v| g * (2.0 * v - 1.0)));
        let s_logits = tape.add(raw_s, prior)?;
        Ok((m_hat, s_logits))
    }

    fn inputs(&self, items: &[InputRef<'_>]) -> Result<BatchInputs> {
        let (h, w) = items.first().ok_or_else(|| invalid("empty batch"))?.m_a.dims();
        self.cfg.shape().check_input(h, w)?;
        let mut lin_m = Vec::with_capacity(items.len());
        let mut lin_s = Vec::with_capacity(items.len());
        let mut sa = Vec::with_capacity(items.len());
        let mut sb = Vec::with_capacity(items.len());
        for it in items {
            check_same(it.m_a, it.m_b, "m_a/m_b")?;
            check_same(it.m_a, it.s_a, "m_a/s_a")?;
            check_same(it.m_a, it.s_b, "m_a/s_b")?;
            check_same(it.m_a, &it.cond.tau_map, "m_a/condition maps")?;
            let f = it.cond.k_value();
            lin_m.push(blend(it.m_a, it.m_b, f)?);
            let (a, b) = (it.s_a.to_image(), it.s_b.to_image());
            lin_s.push(blend(&a, &b, f)?);
            sa.push(a);
            sb.push(b);
        }
        let heads = if self.heads.len() == 2 {
            let mag: Vec<Vec<&Image>> = items
                .iter()
                .map(|it| vec![it.m_a, it.m_b, &it.cond.tau_map, &it.cond.k_map])
                .collect();
            let msk: Vec<Vec<&Image>> = items
                .iter()
                .enumerate()
                .map(|(i, it)| vec![&sa[i], &sb[i], &it.cond.tau_map, &it.cond.k_map])
                .collect();
            vec![batch_tensor(&mag)?, batch_tensor(&msk)?]
        } else {
            let all: Vec<Vec<&Image>> = items
                .iter()
                .enumerate()
                .map(|(i, it)| vec![it.m_a, it.m_b, &sa[i], &sb[i], &it.cond.tau_map, &it.cond.k_map])
                .collect();
            vec![batch_tensor(&all)?]
        };
        let one = |v: &[Image]| batch_tensor(&v.iter().map(|i| vec![i]).collect::<Vec<_>>());
        Ok(BatchInputs {
            heads,
            lin_m: one(&lin_m)?,
            lin_s: one(&lin_s)?,
        })
    }

    fn predict(&self, items: &[InputRef<'_>]) -> Result<Vec<(Image, Image)>> {
        let x = self.inputs(items)?;
        let mut tape = Tape::new();
        let (m, s) = self.forward(&mut tape, &x)?;
        Ok((0..items.len())
            .map(|i| (tensor_image(tape.value(m), i, 0), tensor_image(tape.value(s), i, 0)))
            .collect())
    }

    /// Interpolated magnitude in `[-1, 1]` and mask logits for one pair.
    pub fn interp_forward(
        &self,
        m_a: &Image,
        m_b: &Image,
        s_a: &Mask,
        s_b: &Mask,
        cond: &ConditionMaps,
    ) -> Result<(Image, Image)> {
        let mut out = self.predict(&[InputRef { m_a, m_b, s_a, s_b, cond }])?;
        Ok(out.pop().expect("one output"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, CHECKPOINT_KIND, &self.cfg, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir, CHECKPOINT_KIND)?;
        let cfg: InterpNetConfig = serde_json::from_value(manifest.config.clone())?;
        let mut model = Self::new(&cfg)?;
        checkpoint::load_into(dir, &manifest, &mut model.store)?;
        Ok(model)
    }
}

struct InputRef<'a> {
    m_a: &'a Image,
    m_b: &'a Image,
    s_a: &'a Mask,
    s_b: &'a Mask,
    cond: &'a ConditionMaps,
}

/// One training pair: two anchor frames in, the frame between them out.
#[derive(Clone, Debug)]
pub struct InterpSample {
    pub study: usize,
    pub tau: usize,
    pub k: usize,
    pub m_a: Image,
    pub m_b: Image,
    pub s_a: Mask,
    pub s_b: Mask,
    pub cond: ConditionMaps,
    pub target_m: Image,
    pub target_s: Mask,
    pub w1: WeightMap,
    pub w2: WeightMap,
}

impl InterpSample {
    fn input(&self) -> InputRef<'_> {
        InputRef {
            m_a: &self.m_a,
            m_b: &self.m_b,
            s_a: &self.s_a,
            s_b: &self.s_b,
            cond: &self.cond,
        }
    }
}

/// Anchors `0, K+1, 2(K+1), …` below `T`.
pub fn anchors(num_frames: usize, big_k: usize) -> Vec<usize> {
    (0..num_frames).step_by(big_k + 1).collect()
}

/// Every `(τ, k)` pair of every study, with wrapped endpoints and targets.
pub fn build_interp_dataset(studies: &[CineStudy], big_k: usize, roi_pad: usize) -> Result<Vec<InterpSample>> {
    if big_k == 0 {
        return Err(invalid("K must be at least 1 to build an interpolation dataset"));
    }
    let mut out = Vec::new();
    for (si, st) in studies.iter().enumerate() {
        let n = st.num_frames();
        let (h, w) = st.dims();
        for tau in anchors(n, big_k) {
            let end = wrap_index((tau + big_k + 1) as i64, n)?;
            for k in 1..=big_k {
                let t = wrap_index((tau + k) as i64, n)?;
                out.push(InterpSample {
                    study: si,
                    tau,
                    k,
                    m_a: st.magnitude(tau).clone(),
                    m_b: st.magnitude(end).clone(),
                    s_a: st.seg(tau).clone(),
                    s_b: st.seg(end).clone(),
                    cond: make_condition_maps(tau, k, n, big_k, h, w)?,
                    target_m: st.magnitude(t).clone(),
                    target_s: st.seg(t).clone(),
                    w1: compute_w1(st.seg(t), roi_pad).map,
                    w2: compute_w2(st.magnitude(t)),
                });
            }
        }
    }
    Ok(out)
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training objective per epoch.
    pub train_loss: Vec<f64>,
    /// Mean weighted MAE of the magnitude output on the training set per epoch.
    pub train_mae: Vec<f64>,
    pub val_mae: Vec<f64>,
    pub val_dice: Vec<f64>,
    pub best_epoch: usize,
}

fn bce_with_logits(logits: &Image, target: &Mask) -> (f64, Image) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| {
            let (z64, y64) = (z as f64, y as f64);
            loss += z64.max(0.0) - z64 * y64 + (-z64.abs()).exp().ln_1p();
            ((1.0 / (1.0 + (-z64).exp()) - y64) / n) as f32
        })
        .collect();
    (loss / n, Image::new(logits.height(), logits.width(), grad).expect("same dims"))
}

/// Binary mask from logits: foreground where the logit is ≥ 0, i.e. where
/// the probability is ≥ 0.5, the same cut the linear mask blend uses.
pub fn binarize_logits(logits: &Image) -> Mask {
    logits.map(|z| u8::from(z >= 0.0))
}

/// Validation weighted MAE and mean DICE of thresholded masks.
pub fn evaluate_interp(model: &InterpModel, samples: &[InterpSample], batch: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let (mut mae, mut dsum) = (0.0, 0.0);
    for chunk in samples.chunks(batch.max(1)) {
        let items: Vec<_> = chunk.iter().map(InterpSample::input).collect();
        for (s, (m, l)) in chunk.iter().zip(model.predict(&items)?) {
            mae += weighted_mae(&m, &s.target_m, &s.w1, &s.w2)?;
            dsum += dice(&binarize_logits(&l), &s.target_s)?;
        }
    }
    let n = samples.len() as f64;
    Ok((mae / n, dsum / n))
}

fn disc_input(items: &[&InterpSample], middle: &[Image]) -> Result<Tensor> {
    batch_tensor(
        &items
            .iter()
            .zip(middle)
            .map(|(s, m)| vec![&s.m_a, m, &s.m_b])
            .collect::<Vec<_>>(),
    )
}

/// Fits the network; keeps the parameters with the best validation weighted MAE.
pub fn train_interp(
    train: &[InterpSample],
    val: &[InterpSample],
    net_cfg: &InterpNetConfig,
    cfg: &TrainConfig,
) -> Result<(InterpModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("empty training set"));
    }
    let mut model = InterpModel::new(net_cfg)?;
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate), &model.store);
    let mut disc = if cfg.adversarial_weight > 0.0 {
        let (h, w) = train[0].m_a.dims();
        PatchDiscriminator::check_input(h, w)?;
        let mut store = ParamStore::new();
        let d = PatchDiscriminator::new(&mut store, "disc", 3, cfg.disc_base_channels, &mut seed::rng(cfg.seed, &[0xd15c]));
        let opt = Adam::new(AdamConfig::new(cfg.learning_rate).with_betas(0.5, 0.999), &store);
        Some((d, store, opt))
    } else {
        None
    };
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, &[0x5f, epoch as u64]));
        let (mut loss_sum, mut mae_sum) = (0.0, 0.0);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&InterpSample> = idx.iter().map(|&i| &train[i]).collect();
            let items: Vec<_> = batch.iter().map(|s| s.input()).collect();
            let x = model.inputs(&items)?;
            let mut tape = Tape::new();
            let (m_var, s_var) = model.forward(&mut tape, &x)?;
            let bn = batch.len();
            let (_, _, h, w) = tape.value(m_var).dims4();
            let mut gm = Tensor::zeros(&[bn, 1, h, w]);
            let mut gs = Tensor::zeros(&[bn, 1, h, w]);
            let mut preds = Vec::with_capacity(bn);
            let mut loss = 0.0;
            for (i, s) in batch.iter().enumerate() {
                let m = tensor_image(tape.value(m_var), i, 0);
                let l = tensor_image(tape.value(s_var), i, 0);
                let mae = weighted_mae(&m, &s.target_m, &s.w1, &s.w2)?;
                let g = weighted_mae_grad(&m, &s.target_m, &s.w1, &s.w2)?.map(|v| v / bn as f32);
                set_tensor_image(&mut gm, i, 0, &g);
                let (bce, gb) = bce_with_logits(&l, &s.target_s);
                let wgt = cfg.mask_loss_weight / bn as f32;
                set_tensor_image(&mut gs, i, 0, &gb.map(|v| v * wgt));
                loss += mae + cfg.mask_loss_weight as f64 * bce;
                mae_sum += mae;
                preds.push(m);
            }
            if let Some((d, dstore, dopt)) = disc.as_mut() {
                // Generator: push fake patches towards "real".
                let mut dt = Tape::new();
                let fake_in = dt.input(disc_input(&batch, &preds)?);
                let scores = d.forward(&mut dt, dstore, fake_in)?;
                let (adv, gscore) = lsgan_loss(dt.value(scores), 1.0);
                let dg = dt.backward(vec![(scores, gscore)])?;
                let gin = dg.get(fake_in).expect("input gradient");
                for i in 0..bn {
                    let g = tensor_image(gin, i, 1).map(|v| v * cfg.adversarial_weight);
                    let mut cur = tensor_image(&gm, i, 0);
                    cur.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                    set_tensor_image(&mut gm, i, 0, &cur);
                }
                loss += cfg.adversarial_weight as f64 * adv * bn as f64;
                // Discriminator: real middle frames vs detached predictions.
                let targets: Vec<Image> = batch.iter().map(|s| s.target_m.clone()).collect();
                for (mid, label) in [(&targets, 1.0f32), (&preds, 0.0)] {
                    let mut t = Tape::new();
                    let xin = t.constant(disc_input(&batch, mid)?);
                    let sc = d.forward(&mut t, dstore, xin)?;
                    let (_, g) = lsgan_loss(t.value(sc), label);
                    t.backward(vec![(sc, g.map(|v| 0.5 * v))])?.accumulate_into(&t, dstore);
                }
                if dstore.grads_non_finite() {
                    return Err(MvmError::TrainingFailure(format!(
                        "non-finite discriminator gradient at epoch {epoch}, step {step}"
                    )));
                }
                dopt.step(dstore);
            }
            let loss = loss / bn as f64;
            if !loss.is_finite() {
                return Err(MvmError::TrainingFailure(format!(
                    "loss became {loss} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss * bn as f64;
            tape.backward(vec![(m_var, gm), (s_var, gs)])?
                .accumulate_into(&tape, &mut model.store);
            if model.store.grads_non_finite() {
                return Err(MvmError::TrainingFailure(format!(
                    "non-finite gradient at epoch {epoch}, step {step} (loss {loss})"
                )));
            }
            opt.step(&mut model.store);
        }
        report.train_loss.push(loss_sum / train.len() as f64);
        report.train_mae.push(mae_sum / train.len() as f64);
        let eval_set = if val.is_empty() { train } else { val };
        let (vm, vd) = evaluate_interp(&model, eval_set, cfg.batch_size)?;
        report.val_mae.push(vm);
        report.val_dice.push(vd);
        if best.as_ref().is_none_or(|(b, _)| vm < *b) {
            best = Some((vm, model.store.clone()));
            report.best_epoch = epoch;
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok((model, report))
}

/// A study after temporal downsampling: only kept frames are present.
#[derive(Clone, Debug, PartialEq)]
pub struct GappedStudy {
    pub magnitude: Vec<Option<Image>>,
    pub phase: [Vec<Option<Image>>; 3],
    pub seg: Vec<Option<Mask>>,
    pub meta: StudyMeta,
}

impl GappedStudy {
    pub fn downsample(study: &CineStudy, spec: &DownsampleSpec) -> Result<Self> {
        let n = study.num_frames();
        if spec.offset >= n {
            return Err(invalid(format!("offset {} >= {n}", spec.offset)));
        }
        let keep = |t: usize| spec.keeps(t);
        Ok(Self {
            magnitude: (0..n).map(|t| keep(t).then(|| study.magnitude(t).clone())).collect(),
            phase: crate::data::Axis::ALL
                .map(|a| (0..n).map(|t| keep(t).then(|| study.phase(a, t).clone())).collect()),
            seg: (0..n).map(|t| keep(t).then(|| study.seg(t).clone())).collect(),
            meta: study.meta().clone(),
        })
    }

    pub fn present(&self) -> Vec<usize> {
        (0..self.magnitude.len()).filter(|&t| self.magnitude[t].is_some()).collect()
    }
}

/// Something that fills a gap between two kept frames.
pub trait GapFiller {
    /// Frames `1..=len` of a gap of `len` missing frames between `a` (at
    /// `tau`) and `b`.
    fn fill(&self, a: (&Image, &Mask), b: (&Image, &Mask), tau: usize, len: usize, num_frames: usize) -> Result<Vec<(Image, Mask)>>;
}

impl GapFiller for InterpModel {
    fn fill(&self, a: (&Image, &Mask), b: (&Image, &Mask), tau: usize, len: usize, num_frames: usize) -> Result<Vec<(Image, Mask)>> {
        let (h, w) = a.0.dims();
        let conds: Vec<ConditionMaps> = (1..=len)
            .map(|j| {
                Ok(ConditionMaps::from_values(
                    (tau as f64 / num_frames as f64) as f32,
                    gap_fraction(j, len)?,
                    h,
                    w,
                ))
            })
            .collect::<Result<_>>()?;
        let items: Vec<_> = conds
            .iter()
            .map(|cond| InputRef {
                m_a: a.0,
                m_b: b.0,
                s_a: a.1,
                s_b: b.1,
                cond,
            })
            .collect();
        Ok(self
            .predict(&items)?
            .into_iter()
            .map(|(m, l)| (m, binarize_logits(&l)))
            .collect())
    }
}

/// Per-pixel linear blending.
#[derive(Clone, Copy, Debug, Default)]
pub struct LinearFiller;

impl GapFiller for LinearFiller {
    fn fill(&self, a: (&Image, &Mask), b: (&Image, &Mask), _tau: usize, len: usize, _n: usize) -> Result<Vec<(Image, Mask)>> {
        (1..=len)
            .map(|j| {
                Ok((
                    crate::baselines::linear_interpolate(a.0, b.0, j, len)?,
                    linear_interpolate_mask(a.1, b.1, j, len)?,
                ))
            })
            .collect()
    }
}

/// Horn–Schunck flow from `a` to `b`, warped by fractions of the gap.
#[derive(Clone, Copy, Debug, Default)]
pub struct FlowFiller(pub HornSchunckConfig);

impl GapFiller for FlowFiller {
    fn fill(&self, a: (&Image, &Mask), b: (&Image, &Mask), _tau: usize, len: usize, _n: usize) -> Result<Vec<(Image, Mask)>> {
        let flow = horn_schunck(a.0, b.0, &self.0)?;
        (1..=len)
            .map(|j| {
                let f = gap_fraction(j, len)? as f64;
                Ok((warp_image(a.0, &flow, f)?, warp_mask(a.1, &flow, f)?))
            })
            .collect()
    }
}

/// Rebuilds a full-length study: kept frames are copied verbatim, missing
/// magnitudes and masks come from `filler`, and missing phases are zero
/// placeholders awaiting synthesis.
pub fn interpolate_series_with(filler: &dyn GapFiller, gapped: &GappedStudy, spec: &DownsampleSpec) -> Result<CineStudy> {
    let n = gapped.meta.num_frames;
    if gapped.magnitude.len() != n || gapped.seg.len() != n || gapped.phase.iter().any(|p| p.len() != n) {
        return Err(invalid("gapped study length disagrees with num_frames"));
    }
    let kept = spec.kept(n);
    if kept.is_empty() {
        return Err(invalid("downsampling keeps no frames"));
    }
    for t in 0..n {
        let has = gapped.magnitude[t].is_some();
        let all = has && gapped.seg[t].is_some() && gapped.phase.iter().all(|p| p[t].is_some());
        if has != spec.keeps(t) || (has && !all) {
            return Err(invalid(format!(
                "frame {t} presence does not match K = {}, offset = {}",
                spec.k, spec.offset
            )));
        }
    }
    let mut mags: Vec<Option<Image>> = gapped.magnitude.clone();
    let mut segs: Vec<Option<Mask>> = gapped.seg.clone();
    for (i, &tau) in kept.iter().enumerate() {
        let next = if i + 1 < kept.len() { kept[i + 1] } else { kept[0] + n };
        let len = next - tau - 1;
        if len == 0 {
            continue;
        }
        let nb = next % n;
        let a = (gapped.magnitude[tau].as_ref().expect("kept"), gapped.seg[tau].as_ref().expect("kept"));
        let b = (gapped.magnitude[nb].as_ref().expect("kept"), gapped.seg[nb].as_ref().expect("kept"));
        for (j, (m, s)) in filler.fill(a, b, tau, len, n)?.into_iter().enumerate() {
            let t = (tau + 1 + j) % n;
            mags[t] = Some(m);
            segs[t] = Some(s);
        }
    }
    let (h, w) = mags[kept[0]].as_ref().expect("kept").dims();
    let phase = [0, 1, 2].map(|c| {
        gapped.phase[c]
            .iter()
            .map(|p| p.clone().unwrap_or_else(|| Image::filled(h, w, 0.0)))
            .collect::<Vec<_>>()
    });
    CineStudy::new(
        mags.into_iter().map(|m| m.expect("filled")).collect(),
        phase,
        segs.into_iter().map(|s| s.expect("filled")).collect(),
        gapped.meta.clone(),
    )
}

pub fn interpolate_series(model: &InterpModel, gapped: &GappedStudy, spec: &DownsampleSpec) -> Result<CineStudy> {
    interpolate_series_with(model, gapped, spec)
}
