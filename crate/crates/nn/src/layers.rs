use rand::Rng;

use crate::{ParamId, ParamStore, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Conv2dConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2dConfig {
    /// Stride-1 "same" convolution with bias.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad: kernel / 2,
            bias: true,
        }
    }

    pub fn with_stride(mut self, stride: usize, pad: usize) -> Self {
        self.stride = stride;
        self.pad = pad;
        self
    }
}

/// 2-D convolution whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// Registers `{name}.weight` (and `{name}.bias`) using He-uniform
    /// initialization scaled by `gain`. Bias starts at zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: Conv2dConfig,
        gain: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cfg.in_channels * cfg.kernel * cfg.kernel;
        let bound = gain * (6.0 / fan_in as f32).sqrt();
        let shape = [cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel];
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.register(
            format!("{name}.weight"),
            Tensor::new(&shape, data).expect("kernel shape"),
        );
        let bias = cfg
            .bias
            .then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[cfg.out_channels])));
        Self {
            weight,
            bias,
            stride: cfg.stride,
            pad: cfg.pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_padding_keeps_spatial_size() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(&mut store, "c", Conv2dConfig::same(3, 5, 3), 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 3, 8, 8]));
        let y = conv.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 5, 8, 8]);
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let build = |seed| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Conv2d::new(&mut store, "c", Conv2dConfig::same(2, 2, 3), 1.0, &mut rng);
            store.value(ParamId(0)).clone()
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }
}
