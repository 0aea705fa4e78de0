//! Synthetic circle tasks comparing a plain reconstruction loss against the
//! same generator trained with an added adversarial term.

use mvm_nn::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MvmError, Result};
use crate::grid::Image;
use crate::metrics::{mse, MeanStd};
use crate::nets::{batch_tensor, lsgan_loss, set_tensor_image, tensor_image, PatchDiscriminator, R2Unet, UnetShape};
use crate::seed;

pub const NUM_CIRCLES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ToyTask {
    Shape,
    Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f32,
    pub cy: f32,
    pub r: f32,
    pub color: [f32; 3],
    /// Stripe period in pixels for the texture task.
    pub period: f32,
}

impl Circle {
    fn contains(&self, x: f32, y: f32, r: f32) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= r * r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircleParams {
    pub size: usize,
    pub r_min: f32,
    pub r_max: f32,
    pub scale: f32,
    pub background_min: f32,
    pub background_max: f32,
    pub noise_sigma: f32,
}

impl Default for CircleParams {
    fn default() -> Self {
        Self {
            size: 32,
            r_min: 3.0,
            r_max: 5.0,
            scale: 1.5,
            background_min: -1.0,
            background_max: -0.6,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CircleSample {
    pub task: ToyTask,
    pub circles: Vec<Circle>,
    pub input: [Image; 3],
    pub target: [Image; 3],
}

fn place_circles(p: &CircleParams, rng: &mut impl Rng) -> Result<Vec<Circle>> {
    let s = p.size as f32;
    for _ in 0..1000 {
        let mut out: Vec<Circle> = Vec::with_capacity(NUM_CIRCLES);
        for _ in 0..200 {
            let r = rng.random_range(p.r_min..=p.r_max);
            let margin = r * p.scale + 1.0;
            if 2.0 * margin >= s {
                return Err(invalid("circles do not fit the image"));
            }
            let cx = rng.random_range(margin..s - margin);
            let cy = rng.random_range(margin..s - margin);
            // scaled circles must stay disjoint too
            let free = out
                .iter()
                .all(|c| ((c.cx - cx).powi(2) + (c.cy - cy).powi(2)).sqrt() > p.scale * (c.r + r) + 1.0);
            if free {
                out.push(Circle {
                    cx,
                    cy,
                    r,
                    color: [0, 1, 2].map(|_| rng.random_range(-0.3f32..1.0)),
                    period: rng.random_range(3.0f32..6.0),
                });
                if out.len() == NUM_CIRCLES {
                    return Ok(out);
                }
            }
        }
    }
    Err(invalid("could not place non-overlapping circles"))
}

fn paint(background: &[Image; 3], circles: &[Circle], scale: f32, textured: bool) -> [Image; 3] {
    let mut out = background.clone();
    for c in circles {
        let r = c.r * scale;
        for (ch, img) in out.iter_mut().enumerate() {
            let (h, w) = img.dims();
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f32, y as f32);
                    if c.contains(px, py, r) {
                        let v = if textured {
                            let phase = std::f32::consts::TAU * ((px - c.cx) + (py - c.cy)) / c.period;
                            c.color[ch] * (0.6 + 0.4 * phase.cos())
                        } else {
                            c.color[ch]
                        };
                        img.set(y, x, v.clamp(-1.0, 1.0));
                    }
                }
            }
        }
    }
    out
}

pub fn gen_circles(task: ToyTask, n: usize, params: &CircleParams, seed: u64) -> Result<Vec<CircleSample>> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    let normal = Normal::new(0.0f32, params.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    (0..n)
        .map(|i| {
            let mut rng = seed::rng(seed, &[i as u64]);
            let circles = place_circles(params, &mut rng)?;
            let base = rng.random_range(params.background_min..=params.background_max);
            let bg = [0, 1, 2].map(|_| {
                Image::from_fn(params.size, params.size, |_, _| {
                    (base + normal.sample(&mut rng)).clamp(-1.0, 1.0)
                })
            });
            let input = paint(&bg, &circles, 1.0, false);
            let target = match task {
                ToyTask::Shape => paint(&bg, &circles, params.scale, false),
                ToyTask::Texture => paint(&bg, &circles, 1.0, true),
            };
            Ok(CircleSample {
                task,
                circles,
                input,
                target,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub task: ToyTask,
    pub circles: CircleParams,
    pub train_size: usize,
    pub test_size: usize,
    pub generator: UnetShape,
    pub disc_base_channels: usize,
    pub adversarial_weight: f32,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            task: ToyTask::Shape,
            circles: CircleParams::default(),
            train_size: 400,
            test_size: 200,
            generator: UnetShape {
                base_channels: 8,
                depth: 2,
                recurrence_steps: 1,
            },
            disc_base_channels: 8,
            adversarial_weight: 0.1,
            learning_rate: 0.002,
            batch_size: 16,
            epochs: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelRow {
    pub model: String,
    pub per_image_mse: Vec<f64>,
    pub mse: MeanStd,
    /// RMS distance between the mean prediction and the mean target image.
    pub group_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub task: ToyTask,
    pub test_size: usize,
    pub adversarial_weight: f32,
    pub plain: ToyModelRow,
    pub adversarial: ToyModelRow,
}

fn stack(samples: &[&CircleSample], f: impl Fn(&CircleSample) -> &[Image; 3]) -> Result<Tensor> {
    batch_tensor(&samples.iter().map(|s| f(s).iter().collect()).collect::<Vec<_>>())
}

fn forward(gen: &R2Unet, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<mvm_nn::Var> {
    let xin = tape.constant(x);
    let raw = gen.forward(tape, store, xin)?;
    Ok(tape.tanh(raw))
}

/// Trains one generator with MSE plus `adv_weight` times an LSGAN term.
/// Initialization and batch order depend only on `cfg.seed`.
fn train_generator(train: &[CircleSample], cfg: &ToyConfig, adv_weight: f32) -> Result<(R2Unet, ParamStore)> {
    let mut store = ParamStore::new();
    let gen = R2Unet::new(&mut store, "gen", 3, 3, &cfg.generator, &mut seed::rng(cfg.seed, &[0x9e4]));
    let adam = AdamConfig::new(cfg.learning_rate).with_betas(0.5, 0.999);
    let mut gopt = Adam::new(adam, &store);
    let mut dstore = ParamStore::new();
    let disc = PatchDiscriminator::new(&mut dstore, "disc", 6, cfg.disc_base_channels, &mut seed::rng(cfg.seed, &[0xd15c]));
    let mut dopt = Adam::new(adam, &dstore);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, &[0x5f, epoch as u64]));
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&CircleSample> = idx.iter().map(|&i| &train[i]).collect();
            let x = stack(&batch, |s| &s.input)?;
            let target = stack(&batch, |s| &s.target)?;
            let mut tape = Tape::new();
            let y = forward(&gen, &mut tape, &store, x.clone())?;
            let pred = tape.value(y).clone();
            let n = pred.len() as f32;
            let mut gy = Tensor::new(
                pred.shape(),
                pred.data().iter().zip(target.data()).map(|(p, q)| 2.0 * (p - q) / n).collect(),
            )?;
            if adv_weight != 0.0 {
                let fake = cat_channels(&x, &pred, batch.len())?;
                let mut dt = Tape::new();
                let fin = dt.input(fake.clone());
                let sc = disc.forward(&mut dt, &dstore, fin)?;
                let (_, gsc) = lsgan_loss(dt.value(sc), 1.0);
                let grads = dt.backward(vec![(sc, gsc)])?;
                let gin = grads.get(fin).expect("input gradient");
                for i in 0..batch.len() {
                    for c in 0..3 {
                        let mut cur = tensor_image(&gy, i, c);
                        let ga = tensor_image(gin, i, 3 + c);
                        for (p, a) in cur.data_mut().iter_mut().zip(ga.data()) {
                            *p += adv_weight * a;
                        }
                        set_tensor_image(&mut gy, i, c, &cur);
                    }
                }
                let real = cat_channels(&x, &target, batch.len())?;
                for (inp, label) in [(real, 1.0f32), (fake, 0.0)] {
                    let mut t = Tape::new();
                    let xin = t.constant(inp);
                    let sc = disc.forward(&mut t, &dstore, xin)?;
                    let (_, g) = lsgan_loss(t.value(sc), label);
                    t.backward(vec![(sc, g.map(|v| 0.5 * v))])?.accumulate_into(&t, &mut dstore);
                }
                if dstore.grads_non_finite() {
                    return Err(MvmError::TrainingFailure(format!(
                        "toy discriminator diverged at epoch {epoch}, step {step}"
                    )));
                }
                dopt.step(&mut dstore);
            }
            tape.backward(vec![(y, gy)])?.accumulate_into(&tape, &mut store);
            if store.grads_non_finite() {
                return Err(MvmError::TrainingFailure(format!(
                    "toy generator diverged at epoch {epoch}, step {step}"
                )));
            }
            gopt.step(&mut store);
        }
    }
    Ok((gen, store))
}

fn cat_channels(a: &Tensor, b: &Tensor, n: usize) -> Result<Tensor> {
    let (_, ca, h, w) = a.dims4();
    let cb = b.dims4().1;
    let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
    for i in 0..n {
        for c in 0..ca {
            set_tensor_image(&mut out, i, c, &tensor_image(a, i, c));
        }
        for c in 0..cb {
            set_tensor_image(&mut out, i, ca + c, &tensor_image(b, i, c));
        }
    }
    Ok(out)
}

fn predict(gen: &R2Unet, store: &ParamStore, samples: &[CircleSample]) -> Result<Vec<[Image; 3]>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let refs: Vec<&CircleSample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let y = forward(gen, &mut tape, store, stack(&refs, |s| &s.input)?)?;
        out.extend((0..chunk.len()).map(|i| [0, 1, 2].map(|c| tensor_image(tape.value(y), i, c))));
    }
    Ok(out)
}

fn mean_image(images: impl Iterator<Item = [Image; 3]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for img in images {
        let flat = img.iter().flat_map(|c| c.data().iter().copied());
        if acc.is_empty() {
            acc = flat.map(f64::from).collect();
        } else {
            acc.iter_mut().zip(flat).for_each(|(a, v)| *a += v as f64);
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

fn score(name: &str, preds: &[[Image; 3]], test: &[CircleSample]) -> Result<ToyModelRow> {
    let per_image_mse = preds
        .iter()
        .zip(test)
        .map(|(p, s)| Ok((0..3).map(|c| mse(&p[c], &s.target[c])).sum::<Result<f64>>()? / 3.0))
        .collect::<Result<Vec<_>>>()?;
    let mp = mean_image(preds.iter().cloned());
    let mt = mean_image(test.iter().map(|s| s.target.clone()));
    let group_distance = (mp.iter().zip(&mt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / mp.len() as f64).sqrt();
    Ok(ToyModelRow {
        model: name.to_string(),
        mse: MeanStd::of(&per_image_mse).ok_or_else(|| invalid("empty test set"))?,
        per_image_mse,
        group_distance,
    })
}

/// Trains the plain and adversarial generators on the same split and seed and
/// scores both on a held-out set.
pub fn run_toy_comparison(cfg: &ToyConfig) -> Result<ToyReport> {
    if cfg.train_size == 0 || cfg.test_size == 0 || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(invalid("train_size, test_size, epochs and batch_size must be positive"));
    }
    cfg.generator.validate()?;
    cfg.generator.check_input(cfg.circles.size, cfg.circles.size)?;
    PatchDiscriminator::check_input(cfg.circles.size, cfg.circles.size)?;
    let train = gen_circles(cfg.task, cfg.train_size, &cfg.circles, seed::derive(cfg.seed, &[1]))?;
    let test = gen_circles(cfg.task, cfg.test_size, &cfg.circles, seed::derive(cfg.seed, &[2]))?;
    let (g0, s0) = train_generator(&train, cfg, 0.0)?;
    let (g1, s1) = train_generator(&train, cfg, cfg.adversarial_weight)?;
    Ok(ToyReport {
        task: cfg.task,
        test_size: test.len(),
        adversarial_weight: cfg.adversarial_weight,
        plain: score("plain", &predict(&g0, &s0, &test)?, &test)?,
        adversarial: score("adversarial", &predict(&g1, &s1, &test)?, &test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disjoint(cs: &[Circle], scale: f32) -> bool {
        cs.iter().enumerate().all(|(i, a)| {
            cs[i + 1..]
                .iter()
                .all(|b| ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt() > scale * (a.r + b.r))
        })
    }

    #[test]
    fn circles_are_deterministic_and_disjoint() {
        let p = CircleParams::default();
        let a = gen_circles(ToyTask::Shape, 20, &p, 4).unwrap();
        assert_eq!(a, gen_circles(ToyTask::Shape, 20, &p, 4).unwrap());
        for s in &a {
            assert_eq!(s.circles.len(), NUM_CIRCLES);
            assert!(disjoint(&s.circles, p.scale));
            for img in s.input.iter().chain(&s.target) {
                assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
        assert!(gen_circles(ToyTask::Shape, 0, &p, 4).is_err());
    }

    fn painted_area(c: &Circle, img: &[Image; 3]) -> usize {
        // pixels within the scaled radius that carry the circle colour
        let (h, w) = img[0].dims();
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                if c.contains(x as f32, y as f32, c.r * 2.0) && (0..3).all(|ch| img[ch].get(y, x) == c.color[ch].clamp(-1.0, 1.0)) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn shape_task_grows_every_circle() {
        let p = CircleParams::default();
        for s in gen_circles(ToyTask::Shape, 10, &p, 9).unwrap() {
            for c in &s.circles {
                assert!(painted_area(c, &s.target) > painted_area(c, &s.input));
            }
        }
    }

    #[test]
    fn texture_task_keeps_geometry() {
        let p = CircleParams::default();
        let shape = gen_circles(ToyTask::Shape, 5, &p, 2).unwrap();
        let tex = gen_circles(ToyTask::Texture, 5, &p, 2).unwrap();
        for (a, b) in shape.iter().zip(&tex) {
            assert_eq!(a.circles, b.circles);
            assert_eq!(a.input, b.input);
            // outside every circle the target is the untouched background
            for y in 0..p.size {
                for x in 0..p.size {
                    if !b.circles.iter().any(|c| c.contains(x as f32, y as f32, c.r)) {
                        for ch in 0..3 {
                            assert_eq!(b.target[ch].get(y, x), b.input[ch].get(y, x));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_adversarial_weight_gives_identical_rows() {
        let cfg = ToyConfig {
            train_size: 8,
            test_size: 4,
            epochs: 1,
            batch_size: 4,
            adversarial_weight: 0.0,
            generator: UnetShape {
                base_channels: 4,
                depth: 2,
                recurrence_steps: 1,
            },
            ..Default::default()
        };
        let r = run_toy_comparison(&cfg).unwrap();
        assert_eq!(r.plain.per_image_mse, r.adversarial.per_image_mse);
        assert_eq!(r.plain.group_distance, r.adversarial.group_distance);
        assert_eq!(r, run_toy_comparison(&cfg).unwrap());
    }
}
