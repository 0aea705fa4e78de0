//! Phase-image synthesis: magnitude triplets in, three phase channels out,
//! with tissue pixels from a generator and background pixels drawn from a
//! Gaussian noise model.

use std::path::Path;

use mvm_nn::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{wrap_index, Axis, CineStudy};
use crate::error::{invalid, MvmError, Result};
use crate::grid::{check_same, Image, Mask};
use crate::metrics::BACKGROUND_THRESHOLD;
use crate::nets::{batch_tensor, lsgan_loss, set_tensor_image, tensor_image, PatchDiscriminator, R2Unet, UnetShape};
use crate::seed;

pub const CHECKPOINT_KIND: &str = "phase-synth";

/// Background phase noise in normalized `[-1, 1]` units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            mu: 0.034,
            sigma: 0.034,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.mu.is_finite() {
            return Err(invalid(format!("bad noise model {self:?}")));
        }
        Ok(())
    }
}

/// `(M[t-1], M[t], M[t+1])` with periodic wrap.
pub fn magnitude_triplet(study: &CineStudy, t: usize) -> Result<[&Image; 3]> {
    let n = study.num_frames();
    if t >= n {
        return Err(invalid(format!("frame {t} >= {n}")));
    }
    let t = t as i64;
    Ok([
        study.magnitude(wrap_index(t - 1, n)?),
        study.magnitude(t as usize),
        study.magnitude(wrap_index(t + 1, n)?),
    ])
}

/// Tissue mask: 1 where magnitude ≥ −0.95. Background is `< −0.95`, so
/// this agrees with ω2 everywhere except at exactly −0.95.
pub fn split_foreground(magnitude: &Image) -> Mask {
    magnitude.map(|v| u8::from(v >= BACKGROUND_THRESHOLD))
}

fn draw_field(height: usize, width: usize, noise: &NoiseModel, rng: &mut impl Rng) -> Result<Image> {
    noise.validate()?;
    let normal = Normal::new(noise.mu, noise.sigma).map_err(|e| invalid(e.to_string()))?;
    let data = (0..height * width)
        .map(|_| normal.sample(rng).clamp(-1.0, 1.0) as f32)
        .collect();
    Image::new(height, width, data)
}

/// I.i.d. `N(mu, sigma²)` field clamped to `[-1, 1]`.
pub fn sample_background(height: usize, width: usize, noise: &NoiseModel, seed: u64) -> Result<Image> {
    draw_field(height, width, noise, &mut seed::rng(seed, &[]))
}

/// Noise stream for one frame and channel.
pub fn frame_background(
    height: usize,
    width: usize,
    noise: &NoiseModel,
    seed: u64,
    t: usize,
    channel: usize,
) -> Result<Image> {
    draw_field(height, width, noise, &mut seed::rng(seed, &[t as u64, channel as u64]))
}

/// Foreground pixels keep `generated`; background pixels take `background`.
pub fn composite_with(generated: &Image, background: &Image, foreground: &Mask) -> Result<Image> {
    check_same(generated, background, "generated/background")?;
    check_same(generated, foreground, "generated/foreground")?;
    let data = generated
        .data()
        .iter()
        .zip(background.data())
        .zip(foreground.data())
        .map(|((&g, &b), &f)| if f == 1 { g } else { b })
        .collect();
    Image::new(generated.height(), generated.width(), data)
}

/// Composites three generated phase channels for frame `t` against fresh
/// background noise, one independent stream per channel.
pub fn composite_phase(
    generated: &[Image; 3],
    magnitude: &Image,
    noise: &NoiseModel,
    seed: u64,
    t: usize,
) -> Result<[Image; 3]> {
    let fg = split_foreground(magnitude);
    let (h, w) = magnitude.dims();
    let mut out = Vec::with_capacity(3);
    for (c, g) in generated.iter().enumerate() {
        let bg = frame_background(h, w, noise, seed, t, c)?;
        out.push(composite_with(g, &bg, &fg)?);
    }
    Ok(out.try_into().expect("three channels"))
}

/// Phase channels of a study frame as `[x, y, z]`.
pub fn phase_channels(study: &CineStudy, t: usize) -> [&Image; 3] {
    Axis::ALL.map(|a| study.phase(a, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseNetConfig {
    pub generator: UnetShape,
    pub disc_base_channels: usize,
    pub adversarial_weight: f32,
    pub l1_weight: f32,
    /// Foreground/background scheme; `false` is plain whole-image pix2pix.
    pub composite: bool,
    pub seed: u64,
}

impl Default for PhaseNetConfig {
    fn default() -> Self {
        Self {
            generator: UnetShape {
                base_channels: 32,
                depth: 4,
                recurrence_steps: 2,
            },
            disc_base_channels: 32,
            adversarial_weight: 1.0,
            l1_weight: 100.0,
            composite: true,
            seed: 0,
        }
    }
}

impl PhaseNetConfig {
    pub fn desk() -> Self {
        Self {
            generator: UnetShape {
                base_channels: 8,
                depth: 3,
                recurrence_steps: 2,
            },
            disc_base_channels: 8,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseTrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// ROI crop applied to studies before training (`None` keeps full frames).
    pub input_size: Option<usize>,
    pub seed: u64,
}

impl Default for PhaseTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            beta1: 0.5,
            batch_size: 12,
            epochs: 20,
            input_size: None,
            seed: 0,
        }
    }
}

/// Generator mapping a magnitude triplet to three phase channels.
#[derive(Clone, Debug)]
pub struct PhaseModel {
    cfg: PhaseNetConfig,
    store: ParamStore,
    gen: R2Unet,
}

impl PhaseModel {
    pub fn new(cfg: &PhaseNetConfig) -> Result<Self> {
        cfg.generator.validate()?;
        let mut store = ParamStore::new();
        let gen = R2Unet::new(&mut store, "gen", 3, 3, &cfg.generator, &mut seed::rng(cfg.seed, &[0x9e4]));
        Ok(Self {
            cfg: cfg.clone(),
            store,
            gen,
        })
    }

    pub fn config(&self) -> &PhaseNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<mvm_nn::Var> {
        let xin = tape.constant(x);
        let raw = self.gen.forward(tape, &self.store, xin)?;
        Ok(tape.tanh(raw))
    }

    /// Raw generator output for a batch of triplets.
    pub fn generate(&self, triplets: &[[&Image; 3]]) -> Result<Vec<[Image; 3]>> {
        let first = triplets.first().ok_or_else(|| invalid("empty batch"))?;
        let (h, w) = first[0].dims();
        self.cfg.generator.check_input(h, w)?;
        let x = batch_tensor(&triplets.iter().map(|t| t.to_vec()).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, x)?;
        let out = tape.value(y);
        Ok((0..triplets.len())
            .map(|i| [0, 1, 2].map(|c| tensor_image(out, i, c)))
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, CHECKPOINT_KIND, &self.cfg, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir, CHECKPOINT_KIND)?;
        let cfg: PhaseNetConfig = serde_json::from_value(manifest.config.clone())?;
        let mut model = Self::new(&cfg)?;
        checkpoint::load_into(dir, &manifest, &mut model.store)?;
        Ok(model)
    }
}

/// Source of raw (pre-compositing) phase channels for every frame of a study.
pub trait PhaseGenerator {
    fn generate_frames(&self, study: &CineStudy) -> Result<Vec<[Image; 3]>>;
}

const INFER_BATCH: usize = 10;

impl PhaseGenerator for PhaseModel {
    fn generate_frames(&self, study: &CineStudy) -> Result<Vec<[Image; 3]>> {
        let mut out = Vec::with_capacity(study.num_frames());
        let ts: Vec<usize> = (0..study.num_frames()).collect();
        for chunk in ts.chunks(INFER_BATCH) {
            let trip = chunk
                .iter()
                .map(|&t| magnitude_triplet(study, t))
                .collect::<Result<Vec<_>>>()?;
            out.extend(self.generate(&trip)?);
        }
        Ok(out)
    }
}

/// Returns the phases of a reference study verbatim; a perfect generator.
#[derive(Clone, Copy, Debug)]
pub struct OraclePhases<'a>(pub &'a CineStudy);

impl PhaseGenerator for OraclePhases<'_> {
    fn generate_frames(&self, study: &CineStudy) -> Result<Vec<[Image; 3]>> {
        if study.num_frames() != self.0.num_frames() || study.dims() != self.0.dims() {
            return Err(invalid("oracle reference does not match the study"));
        }
        Ok((0..study.num_frames())
            .map(|t| phase_channels(self.0, t).map(Image::clone))
            .collect())
    }
}

/// Fills every phase frame of `study` from `gen`, compositing background
/// noise unless `composite` is off.
pub fn synthesize_phases_with(
    gen: &dyn PhaseGenerator,
    study: &CineStudy,
    noise: &NoiseModel,
    seed: u64,
    composite: bool,
) -> Result<CineStudy> {
    let frames = gen.generate_frames(study)?;
    let mut phase: [Vec<Image>; 3] = Default::default();
    for (t, g) in frames.into_iter().enumerate() {
        let g = g.map(|img| img.map(|v| v.clamp(-1.0, 1.0)));
        let out = if composite {
            composite_phase(&g, study.magnitude(t), noise, seed, t)?
        } else {
            g
        };
        for (c, img) in out.into_iter().enumerate() {
            phase[c].push(img);
        }
    }
    study.with_phases(phase)
}

pub fn synthesize_phases(model: &PhaseModel, study: &CineStudy, noise: &NoiseModel, seed: u64) -> Result<CineStudy> {
    synthesize_phases_with(model, study, noise, seed, model.cfg.composite)
}

/// One training pair: magnitude triplet and the real phases of the centre frame.
#[derive(Clone, Debug)]
pub struct PhaseSample {
    pub study: usize,
    pub t: usize,
    pub triplet: [Image; 3],
    pub target: [Image; 3],
    pub foreground: Mask,
}

pub fn build_phase_dataset(studies: &[CineStudy]) -> Result<Vec<PhaseSample>> {
    let mut out = Vec::new();
    for (si, st) in studies.iter().enumerate() {
        for t in 0..st.num_frames() {
            out.push(PhaseSample {
                study: si,
                t,
                triplet: magnitude_triplet(st, t)?.map(Image::clone),
                target: phase_channels(st, t).map(Image::clone),
                foreground: split_foreground(st.magnitude(t)),
            });
        }
    }
    Ok(out)
}

/// Mean absolute error over the pixels selected by `mask` (all pixels when
/// `None`), pooled over the three channels, with its gradient.
fn masked_l1(pred: &[Image; 3], target: &[Image; 3], mask: Option<&Mask>) -> (f64, [Image; 3]) {
    let sel = |i: usize| mask.is_none_or(|m| m.data()[i] == 1);
    let n = (0..pred[0].len()).filter(|&i| sel(i)).count().max(1) * 3;
    let mut loss = 0.0;
    let grads = [0, 1, 2].map(|c| {
        let data = pred[c]
            .data()
            .iter()
            .zip(target[c].data())
            .enumerate()
            .map(|(i, (&p, &q))| {
                if !sel(i) {
                    return 0.0;
                }
                loss += (p as f64 - q as f64).abs();
                let s = if p > q {
                    1.0
                } else if p < q {
                    -1.0
                } else {
                    0.0
                };
                s / n as f32
            })
            .collect();
        Image::new(pred[c].height(), pred[c].width(), data).expect("same dims")
    });
    (loss / n as f64, grads)
}

/// Foreground L1 of the generator on a sample set.
pub fn evaluate_phase(model: &PhaseModel, samples: &[PhaseSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let mut sum = 0.0;
    for chunk in samples.chunks(INFER_BATCH) {
        let trip: Vec<[&Image; 3]> = chunk.iter().map(|s| [&s.triplet[0], &s.triplet[1], &s.triplet[2]]).collect();
        for (s, p) in chunk.iter().zip(model.generate(&trip)?) {
            sum += masked_l1(&p, &s.target, Some(&s.foreground)).0;
        }
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrainReport {
    /// Mean foreground L1 of the generator per epoch.
    pub l1: Vec<f64>,
    pub g_adv: Vec<f64>,
    pub d_loss: Vec<f64>,
    pub val_l1: Vec<f64>,
    pub best_epoch: usize,
}

fn pair_tensor(batch: &[&PhaseSample], phases: &[[Image; 3]]) -> Result<Tensor> {
    batch_tensor(
        &batch
            .iter()
            .zip(phases)
            .map(|(s, p)| {
                let mut v: Vec<&Image> = s.triplet.iter().collect();
                v.extend(p.iter());
                v
            })
            .collect::<Vec<_>>(),
    )
}

/// Alternating generator/discriminator optimization; keeps the generator
/// with the best validation foreground L1.
pub fn train_phase(
    train: &[PhaseSample],
    val: &[PhaseSample],
    net_cfg: &PhaseNetConfig,
    cfg: &PhaseTrainConfig,
) -> Result<(PhaseModel, PhaseTrainReport)> {
    if train.is_empty() {
        return Err(invalid("empty training set"));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(invalid("learning_rate, batch_size and epochs must be positive"));
    }
    let (h, w) = train[0].triplet[0].dims();
    PatchDiscriminator::check_input(h, w)?;
    let mut model = PhaseModel::new(net_cfg)?;
    let adam = AdamConfig::new(cfg.learning_rate).with_betas(cfg.beta1, 0.999);
    let mut gopt = Adam::new(adam, &model.store);
    let mut dstore = ParamStore::new();
    let disc = PatchDiscriminator::new(&mut dstore, "disc", 6, net_cfg.disc_base_channels, &mut seed::rng(net_cfg.seed, &[0xd15c]));
    let mut dopt = Adam::new(adam, &dstore);
    let noise = NoiseModel::default();
    let (lam_l1, lam_adv) = (net_cfg.l1_weight, net_cfg.adversarial_weight);
    let mut report = PhaseTrainReport::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, &[0x5f, epoch as u64]));
        let (mut l1_sum, mut adv_sum, mut d_sum) = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PhaseSample> = idx.iter().map(|&i| &train[i]).collect();
            let bn = batch.len();
            let x = batch_tensor(&batch.iter().map(|s| s.triplet.iter().collect()).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let y = model.forward(&mut tape, x)?;
            let raw: Vec<[Image; 3]> = (0..bn).map(|i| [0, 1, 2].map(|c| tensor_image(tape.value(y), i, c))).collect();
            let fakes: Vec<[Image; 3]> = if net_cfg.composite {
                raw.iter()
                    .zip(&batch)
                    .enumerate()
                    .map(|(i, (g, s))| {
                        let sd = seed::derive(cfg.seed, &[epoch as u64, step as u64, i as u64]);
                        composite_phase(g, &s.triplet[1], &noise, sd, 0)
                    })
                    .collect::<Result<_>>()?
            } else {
                raw.clone()
            };
            let mut gy = Tensor::zeros(tape.value(y).shape());
            let mut l1 = 0.0;
            for (i, s) in batch.iter().enumerate() {
                let mask = net_cfg.composite.then_some(&s.foreground);
                let (l, g) = masked_l1(&raw[i], &s.target, mask);
                l1 += l;
                for (c, gc) in g.iter().enumerate() {
                    set_tensor_image(&mut gy, i, c, &gc.map(|v| v * lam_l1 / bn as f32));
                }
            }
            // Adversarial push on the (composited) fakes.
            let mut dt = Tape::new();
            let fin = dt.input(pair_tensor(&batch, &fakes)?);
            let sc = disc.forward(&mut dt, &dstore, fin)?;
            let (adv, gsc) = lsgan_loss(dt.value(sc), 1.0);
            let gin = dt.backward(vec![(sc, gsc)])?;
            let gin = gin.get(fin).expect("input gradient");
            for (i, s) in batch.iter().enumerate() {
                for c in 0..3 {
                    let ga = tensor_image(gin, i, 3 + c);
                    let mut cur = tensor_image(&gy, i, c);
                    for (p, (&a, &f)) in cur.data_mut().iter_mut().zip(ga.data().iter().zip(s.foreground.data())) {
                        if !net_cfg.composite || f == 1 {
                            *p += lam_adv * a;
                        }
                    }
                    set_tensor_image(&mut gy, i, c, &cur);
                }
            }
            let g_total = lam_l1 as f64 * l1 / bn as f64 + lam_adv as f64 * adv;
            if !g_total.is_finite() {
                return Err(MvmError::TrainingFailure(format!(
                    "generator loss became {g_total} at epoch {epoch}, step {step}"
                )));
            }
            tape.backward(vec![(y, gy)])?.accumulate_into(&tape, &mut model.store);
            if model.store.grads_non_finite() {
                return Err(MvmError::TrainingFailure(format!(
                    "non-finite generator gradient at epoch {epoch}, step {step}"
                )));
            }
            gopt.step(&mut model.store);

            let reals: Vec<[Image; 3]> = batch.iter().map(|s| s.target.clone()).collect();
            let mut dl = 0.0;
            for (ph, label) in [(&reals, 1.0f32), (&fakes, 0.0)] {
                let mut t = Tape::new();
                let xin = t.constant(pair_tensor(&batch, ph)?);
                let sc = disc.forward(&mut t, &dstore, xin)?;
                let (l, g) = lsgan_loss(t.value(sc), label);
                dl += 0.5 * l;
                t.backward(vec![(sc, g.map(|v| 0.5 * v))])?.accumulate_into(&t, &mut dstore);
            }
            if !dl.is_finite() || dstore.grads_non_finite() {
                return Err(MvmError::TrainingFailure(format!(
                    "discriminator diverged at epoch {epoch}, step {step}"
                )));
            }
            dopt.step(&mut dstore);
            l1_sum += l1;
            adv_sum += adv;
            d_sum += dl;
            steps += 1;
        }
        report.l1.push(l1_sum / train.len() as f64);
        report.g_adv.push(adv_sum / steps as f64);
        report.d_loss.push(d_sum / steps as f64);
        let eval = if val.is_empty() { train } else { val };
        let v = evaluate_phase(&model, eval)?;
        report.val_l1.push(v);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, model.store.clone()));
            report.best_epoch = epoch;
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok((model, report))
}
