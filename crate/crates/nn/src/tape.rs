use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::{NnError, ParamId, ParamStore, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Scale(Var, f32),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Sigmoid(Var),
    Clamp(Var, f32, f32),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of every parameter leaf on `tape` into `store`.
    ///
    /// All parameter leaves on the tape must come from `store`.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &self.grads[i] {
                    store.grad_mut(id).add_assign(g);
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf. Gradients still flow to it so callers can read them.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// A constant leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, kh, kw) = self.value(w).dims4();
        if wc != c {
            return Err(NnError::Shape(format!(
                "conv2d: input has {c} channels, kernel expects {wc}"
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(NnError::Shape(format!(
                "conv2d: {h}x{wd} input smaller than {kh}x{kw} kernel"
            )));
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad);
        let y = conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            o,
        );
        let value = Tensor::new(&[n, o, geom.ho, geom.wo], y)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = self.value(*p).dims4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(NnError::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    self.value(*p).shape()
                )));
            }
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for p in parts {
                let t = self.value(*p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if start + len > c {
            return Err(NnError::Shape(format!(
                "narrow: channels {start}..{} of {c}",
                start + len
            )));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            data.extend_from_slice(&src[(s * c + start) * plane..(s * c + start + len) * plane]);
        }
        let value = Tensor::new(&[n, len, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, start }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { v * slope });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f32::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient passes wherever the input lies
    /// inside the closed interval.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let src = t.data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    let o = (nc * ho + oy) * wo + ox;
                    out[o] = plane[best];
                    argmax[o] = (nc * h * w + best) as u32;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out).expect("pool shape");
        let rg = self.rg(x);
        self.push(value, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let src = t.data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * ho * wo];
        for nc in 0..n * c {
            for oy in 0..ho {
                let srow = &src[(nc * h + oy / 2) * w..(nc * h + oy / 2 + 1) * w];
                let drow = &mut out[(nc * ho + oy) * wo..(nc * ho + oy + 1) * wo];
                for (ox, d) in drow.iter_mut().enumerate() {
                    *d = srow[ox / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out).expect("upsample shape");
        let rg = self.rg(x);
        self.push(value, Op::Upsample2(x), rg)
    }

    /// Reverse pass seeded with `d(loss)/d(var)` for each `(var, grad)` pair.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Result<Grads> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(NnError::Shape(format!(
                    "seed gradient {:?} for value {:?}",
                    g.shape(),
                    self.value(v).shape()
                )));
            }
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[i] {
                Some(g) => g,
                None => continue,
            };
            let upstream = match &node.op {
                Op::Input | Op::Param(_) => continue,
                _ => self.local_backward(i, g),
            };
            // Keep leaf gradients; interior ones are no longer needed.
            grads[i] = None;
            for (v, gv) in upstream {
                if self.rg(v) {
                    accumulate(&mut grads, v, gv);
                }
            }
        }
        Ok(Grads { grads })
    }

    fn local_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, ..) = xv.dims4();
                let o = wv.shape()[0];
                let mut dw = Tensor::zeros(wv.shape());
                let mut db = b.map(|b| Tensor::zeros(self.value(b).shape()));
                let dx = conv2d_backward(
                    xv.data(),
                    n,
                    geom,
                    wv.data(),
                    o,
                    g.data(),
                    dw.data_mut(),
                    db.as_mut().map(|d| d.data_mut()),
                    self.rg(*x),
                );
                let mut out = vec![(*w, dw)];
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                if let Some(dx) = dx {
                    out.push((*x, Tensor::new(xv.shape(), dx).expect("dx shape")));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::Concat(parts) => {
                let (n, total, h, w) = g.dims4();
                let plane = h * w;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    let mut d = Vec::with_capacity(n * c * plane);
                    for s in 0..n {
                        let base = (s * total + offset) * plane;
                        d.extend_from_slice(&g.data()[base..base + c * plane]);
                    }
                    offset += c;
                    out.push((*p, Tensor::new(&[n, c, h, w], d).expect("concat grad")));
                }
                out
            }
            Op::Narrow { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = g.shape()[1];
                let plane = h * w;
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for s in 0..n {
                    let dst = (s * c + start) * plane;
                    d.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[s * len * plane..(s + 1) * len * plane]);
                }
                vec![(*x, d)]
            }
            Op::Relu(a) => vec![(*a, zip_map(g, &node.value, |g, y| if y > 0.0 { g } else { 0.0 }))],
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                vec![(*a, zip_map(g, self.value(*a), |g, x| if x > 0.0 { g } else { g * s }))]
            }
            Op::Tanh(a) => vec![(*a, zip_map(g, &node.value, |g, y| g * (1.0 - y * y)))],
            Op::Sigmoid(a) => vec![(*a, zip_map(g, &node.value, |g, y| g * y * (1.0 - y)))],
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *a,
                    zip_map(g, self.value(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
                )]
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let dd = d.data_mut();
                for (gv, &idx) in g.data().iter().zip(argmax) {
                    dd[idx as usize] += gv;
                }
                vec![(*x, d)]
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let wo = 2 * w;
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let dd = d.data_mut();
                let gd = g.data();
                for nc in 0..n * c {
                    for oy in 0..2 * h {
                        let grow = &gd[(nc * 2 * h + oy) * wo..(nc * 2 * h + oy + 1) * wo];
                        let drow = &mut dd[(nc * h + oy / 2) * w..(nc * h + oy / 2 + 1) * w];
                        for (ox, gv) in grow.iter().enumerate() {
                            drow[ox / 2] += gv;
                        }
                    }
                }
                vec![(*x, d)]
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(g.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize], seed: u32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| (((i as u32).wrapping_mul(2246822519).wrapping_add(seed)) % 997) as f32 / 498.5 - 1.0)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Builds a small graph touching every op and returns sum(out * r).
    fn graph(x: &Tensor, store: &ParamStore, r: &Tensor) -> (Tape, Var, f64) {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let w = tape.param(store, ParamId(0));
        let b = tape.param(store, ParamId(1));
        let h = tape.conv2d(xv, w, Some(b), 1, 1).unwrap();
        let h = tape.leaky_relu(h, 0.2);
        let p = tape.max_pool2(h);
        let u = tape.upsample2(p);
        let t = tape.tanh(u);
        let s = tape.sigmoid(h);
        let c = tape.concat(&[t, s]).unwrap();
        let nrw = tape.narrow(c, 1, 3).unwrap();
        let sc = tape.scale(nrw, 1.5);
        let rl = tape.relu(sc);
        let xs = tape.narrow(xv, 0, 1).unwrap();
        let xs3 = tape.concat(&[xs, xs, xs]).unwrap();
        let out = tape.add(rl, xs3).unwrap();
        let out = tape.clamp(out, -0.8, 0.9);
        let loss: f64 = tape
            .value(out)
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        (tape, out, loss)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = seq(&[2, 2, 6, 6], 11);
        let mut store = ParamStore::new();
        store.register("w", seq(&[2, 2, 3, 3], 5).map(|v| v * 0.5));
        store.register("b", Tensor::new(&[2], vec![0.05, -0.1]).unwrap());
        let r = seq(&[2, 3, 6, 6], 23);
        let (tape, out, _) = graph(&x, &store, &r);
        let grads = tape.backward(vec![(out, r.clone())]).unwrap();
        grads.accumulate_into(&tape, &mut store);
        let dx = grads.get(Var(0)).unwrap().clone();

        let h = 1e-3f32;
        let mut checked = 0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (graph(&xp, &store, &r).2 - graph(&xm, &store, &r).2) / (2.0 * h as f64);
            // Skip points where a kink (relu, clamp, pool tie) sits inside the stencil.
            if (fd - dx.data()[i] as f64).abs() > 2e-2 {
                let fd_small = {
                    let h2 = 1e-4f32;
                    let mut xp = x.clone();
                    xp.data_mut()[i] += h2;
                    let mut xm = x.clone();
                    xm.data_mut()[i] -= h2;
                    (graph(&xp, &store, &r).2 - graph(&xm, &store, &r).2) / (2.0 * h2 as f64)
                };
                assert!(
                    (fd_small - dx.data()[i] as f64).abs() < 5e-2,
                    "dx[{i}]: fd {fd} / {fd_small} vs {}",
                    dx.data()[i]
                );
            }
            checked += 1;
        }
        assert_eq!(checked, x.len());

        let dw = store.grad(ParamId(0)).clone();
        for i in 0..dw.len() {
            let mut sp = store.clone();
            sp.value_mut(ParamId(0)).data_mut()[i] += h;
            let mut sm = store.clone();
            sm.value_mut(ParamId(0)).data_mut()[i] -= h;
            let fd = (graph(&x, &sp, &r).2 - graph(&x, &sm, &r).2) / (2.0 * h as f64);
            assert!((fd - dw.data()[i] as f64).abs() < 5e-2 * (1.0 + fd.abs()), "dw[{i}]: {fd} vs {}", dw.data()[i]);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tape.input(Tensor::full(&[1, 1, 2, 2], 2.0));
        let c = tape.add(a, b).unwrap();
        let g = tape.backward(vec![(c, Tensor::full(&[1, 1, 2, 2], 1.0))]).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[1, 1, 2, 2]));
        let b = tape.input(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(tape.add(a, b).is_err());
        let w = tape.input(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(tape.conv2d(a, w, None, 1, 1).is_err());
    }
}
