//! Recurrent-residual UNet building blocks and the patch discriminator.

use mvm_nn::{Conv2d, Conv2dConfig, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::Image;

/// Conv applied `steps + 1` times, each time on `(x + h) / 2`.
#[derive(Clone, Debug)]
pub struct RecurrentConv {
    conv: Conv2d,
    steps: usize,
}

impl RecurrentConv {
    fn new(store: &mut ParamStore, name: &str, ch: usize, steps: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(store, name, Conv2dConfig::same(ch, ch, 3), 1.0, rng),
            steps,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = self.conv.forward(tape, store, x)?;
        h = tape.relu(h);
        for _ in 0..self.steps {
            let s = tape.add(x, h)?;
            let s = tape.scale(s, 0.5);
            h = self.conv.forward(tape, store, s)?;
            h = tape.relu(h);
        }
        Ok(h)
    }
}

/// 1×1 projection followed by two recurrent convs, averaged with the residual.
#[derive(Clone, Debug)]
pub struct Rrcnn {
    proj: Conv2d,
    rc: [RecurrentConv; 2],
}

impl Rrcnn {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, steps: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Conv2d::new(store, &format!("{name}.proj"), Conv2dConfig::same(cin, cout, 1), 1.0, rng),
            rc: [
                RecurrentConv::new(store, &format!("{name}.rc0"), cout, steps, rng),
                RecurrentConv::new(store, &format!("{name}.rc1"), cout, steps, rng),
            ],
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let x0 = self.proj.forward(tape, store, x)?;
        let y = self.rc[0].forward(tape, store, x0)?;
        let y = self.rc[1].forward(tape, store, y)?;
        let sum = tape.add(x0, y)?;
        Ok(tape.scale(sum, 0.5))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetShape {
    pub base_channels: usize,
    pub depth: usize,
    pub recurrence_steps: usize,
}

impl UnetShape {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.recurrence_steps < 1 || self.base_channels == 0 {
            return Err(invalid(format!(
                "need depth >= 2, recurrence_steps >= 1, base_channels >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must survive `depth - 1` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << (self.depth - 1);
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) || h == 0 || w == 0 {
            return Err(invalid(format!("{h}x{w} input is not divisible by {m}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<Rrcnn>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, shape: &UnetShape, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::with_capacity(shape.depth);
        let mut prev = cin;
        for l in 0..shape.depth {
            let c = shape.channels(l);
            blocks.push(Rrcnn::new(store, &format!("{name}.enc{l}"), prev, c, shape.recurrence_steps, rng));
            prev = c;
        }
        Self { blocks }
    }

    /// Feature maps at every level, finest first; the last is the bottleneck.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Vec<Var>> {
        let mut skips = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            if l > 0 {
                x = tape.max_pool2(x);
            }
            x = b.forward(tape, store, x)?;
            skips.push(x);
        }
        Ok(skips)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    ups: Vec<Conv2d>,
    blocks: Vec<Rrcnn>,
    out: Conv2d,
}

impl Decoder {
    /// The output projection starts at zero so a residual output begins at its skip.
    pub fn new(store: &mut ParamStore, name: &str, cout: usize, shape: &UnetShape, rng: &mut impl Rng) -> Self {
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for l in 0..shape.depth - 1 {
            let (c, cn) = (shape.channels(l), shape.channels(l + 1));
            ups.push(Conv2d::new(store, &format!("{name}.up{l}"), Conv2dConfig::same(cn, c, 3), 1.0, rng));
            blocks.push(Rrcnn::new(store, &format!("{name}.dec{l}"), 2 * c, c, shape.recurrence_steps, rng));
        }
        let out = Conv2d::new(
            store,
            &format!("{name}.out"),
            Conv2dConfig::same(shape.channels(0), cout, 1),
            1.0,
            rng,
        );
        store.value_mut(out.weight()).data_mut().fill(0.0);
        Self { ups, blocks, out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bottleneck: Var, skips: &[Var]) -> Result<Var> {
        let mut x = bottleneck;
        for l in (0..self.blocks.len()).rev() {
            let u = tape.upsample2(x);
            let u = self.ups[l].forward(tape, store, u)?;
            let u = tape.relu(u);
            let c = tape.concat(&[skips[l], u])?;
            x = self.blocks[l].forward(tape, store, c)?;
        }
        Ok(self.out.forward(tape, store, x)?)
    }
}

/// Single-head recurrent-residual UNet.
#[derive(Clone, Debug)]
pub struct R2Unet {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl R2Unet {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, shape: &UnetShape, rng: &mut impl Rng) -> Self {
        Self {
            encoder: Encoder::new(store, &format!("{name}.head"), cin, shape, rng),
            decoder: Decoder::new(store, &format!("{name}.tail"), cout, shape, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let skips = self.encoder.forward(tape, store, x)?;
        let b = *skips.last().expect("depth >= 1");
        self.decoder.forward(tape, store, b, &skips)
    }
}

/// Number of stride-2 blocks; with 4 blocks one output cell covers a 16×16 patch.
pub const PATCH_BLOCKS: usize = 4;
pub const PATCH_SIZE: usize = 1 << PATCH_BLOCKS;

/// Conditional patch discriminator: four 4×4 stride-2 blocks and a 1×1 head.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, base: usize, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::new();
        let mut prev = cin;
        for l in 0..PATCH_BLOCKS {
            let c = base << l;
            let cfg = Conv2dConfig {
                in_channels: prev,
                out_channels: c,
                kernel: 4,
                stride: 2,
                pad: 1,
                bias: true,
            };
            blocks.push(Conv2d::new(store, &format!("{name}.block{l}"), cfg, 1.0, rng));
            prev = c;
        }
        let head = Conv2d::new(store, &format!("{name}.head"), Conv2dConfig::same(prev, 1, 1), 1.0, rng);
        Self { blocks, head }
    }

    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(PATCH_SIZE) || !w.is_multiple_of(PATCH_SIZE) || h == 0 || w == 0 {
            return Err(invalid(format!("{h}x{w} is not divisible by the {PATCH_SIZE}-pixel patch grid")));
        }
        Ok(())
    }

    /// Patch scores of shape `[n, 1, h/16, w/16]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, store, h)?;
            h = tape.leaky_relu(h, 0.2);
        }
        Ok(self.head.forward(tape, store, h)?)
    }
}

/// Least-squares GAN loss `mean((d - target)²)` and its gradient.
pub fn lsgan_loss(scores: &Tensor, target: f32) -> (f64, Tensor) {
    let n = scores.len() as f32;
    let loss = scores.data().iter().map(|&d| ((d - target) as f64).powi(2)).sum::<f64>() / n as f64;
    (loss, scores.map(|d| 2.0 * (d - target) / n))
}

/// Packs per-sample channel lists into an NCHW tensor.
pub fn batch_tensor(samples: &[Vec<&Image>]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| invalid("empty batch"))?;
    let c = first.len();
    let (h, w) = first[0].dims();
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if s.len() != c {
            return Err(invalid("ragged batch"));
        }
        for img in s {
            if img.dims() != (h, w) {
                return Err(invalid("batch images differ in size"));
            }
            data.extend_from_slice(img.data());
        }
    }
    Ok(Tensor::new(&[samples.len(), c, h, w], data)?)
}

/// Channel `c` of sample `n` as an image.
pub fn tensor_image(t: &Tensor, n: usize, c: usize) -> Image {
    let (_, ch, h, w) = t.dims4();
    let off = (n * ch + c) * h * w;
    Image::new(h, w, t.data()[off..off + h * w].to_vec()).expect("slice matches dims")
}

/// Writes `img` into channel `c` of sample `n`.
pub fn set_tensor_image(t: &mut Tensor, n: usize, c: usize, img: &Image) {
    let (_, ch, h, w) = t.dims4();
    let off = (n * ch + c) * h * w;
    t.data_mut()[off..off + h * w].copy_from_slice(img.data());
}
