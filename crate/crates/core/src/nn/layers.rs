//! The fixed layer set: 3×3 same-padded convolution, ReLU, 2×2 max-pool, flatten and
//! fully-connected. Every layer computes exact gradients for its parameters and inputs.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable array with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn zeros(n: usize) -> Self {
        Param {
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    fn uniform<R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Param {
            value: (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

const K: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in, 3, 3]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * K * K;
        Conv2d {
            in_channels,
            out_channels,
            weight: Param::uniform(out_channels * fan_in, fan_in, rng),
            bias: Param::zeros(out_channels),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Param::uniform(out_features * in_features, in_features, rng),
            bias: Param::zeros(out_features),
        }
    }

    pub fn from_weights(in_features: usize, out_features: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_features * out_features || bias.len() != out_features {
            return Err(Error::contract("linear weight/bias sizes do not match the declared dims"));
        }
        let (wn, bn) = (weight.len(), bias.len());
        Ok(Linear {
            in_features,
            out_features,
            weight: Param { value: weight, grad: vec![0.0; wn] },
            bias: Param { value: bias, grad: vec![0.0; bn] },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool,
    Flatten,
    Linear(Linear),
}

#[derive(Clone, Debug)]
pub(crate) enum Cache {
    Input(Tensor),
    Mask(Vec<bool>),
    Pool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Shape(Vec<usize>),
}

impl Layer {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(c) => match input {
                [ch, h, w] if *ch == c.in_channels => Ok(vec![c.out_channels, *h, *w]),
                _ => Err(Error::contract(format!(
                    "conv expects [{}, H, W] input, got {input:?}",
                    c.in_channels
                ))),
            },
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool => match input {
                [ch, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*ch, h / 2, w / 2]),
                _ => Err(Error::contract(format!("max-pool needs [C, H≥2, W≥2], got {input:?}"))),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Linear(l) => match input {
                [n] if *n == l.in_features => Ok(vec![l.out_features]),
                _ => Err(Error::contract(format!(
                    "linear expects [{}] input, got {input:?}",
                    l.in_features
                ))),
            },
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => vec![],
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<Cache>)> {
        let out_shape = self.output_shape(&x.shape()[1..])?;
        let n = x.batch();
        let mut shape = vec![n];
        shape.extend(&out_shape);
        match self {
            Layer::Conv(c) => {
                let out = conv_forward(c, x, shape);
                Ok((out, keep.then(|| Cache::Input(x.clone()))))
            }
            Layer::Linear(l) => {
                let out = linear_forward(l, x, shape);
                Ok((out, keep.then(|| Cache::Input(x.clone()))))
            }
            Layer::Relu => {
                let data: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
                let cache = keep.then(|| Cache::Mask(x.data().iter().map(|&v| v > 0.0).collect()));
                Ok((Tensor::new(shape, data)?, cache))
            }
            Layer::Flatten => Ok((
                x.clone().reshaped(shape),
                keep.then(|| Cache::Shape(x.shape().to_vec())),
            )),
            Layer::MaxPool => {
                let (out, argmax) = pool_forward(x, shape);
                Ok((
                    out,
                    keep.then(|| Cache::Pool {
                        argmax,
                        input_shape: x.shape().to_vec(),
                    }),
                ))
            }
        }
    }

    /// Fills this layer's gradient slots from `grad` (the loss gradient w.r.t. the
    /// layer output) and returns the gradient w.r.t. the layer input when asked.
    pub(crate) fn backward(&mut self, cache: Cache, grad: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        match (self, cache) {
            (Layer::Conv(c), Cache::Input(x)) => Ok(conv_backward(c, &x, grad, want_input)),
            (Layer::Linear(l), Cache::Input(x)) => Ok(linear_backward(l, &x, grad, want_input)),
            (Layer::Relu, Cache::Mask(mask)) => {
                let data = grad
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| if m { g } else { 0.0 })
                    .collect();
                Ok(Some(Tensor::new(grad.shape().to_vec(), data)?))
            }
            (Layer::Flatten, Cache::Shape(shape)) => Ok(Some(grad.clone().reshaped(shape))),
            (Layer::MaxPool, Cache::Pool { argmax, input_shape }) => {
                let mut gx = Tensor::zeros(input_shape);
                let gd = gx.data_mut();
                for (&src, &g) in argmax.iter().zip(grad.data()) {
                    gd[src] += g;
                }
                Ok(Some(gx))
            }
            _ => Err(Error::contract("layer cache does not belong to this layer")),
        }
    }
}

/// Unfolds one `[C, H, W]` sample into `[C·9, H·W]` patch columns (zero padded).
fn im2col(sample: &[f64], channels: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for ch in 0..channels {
        let plane = &sample[ch * hw..(ch + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut col[((ch * K + ky) * K + kx) * hw..][..hw];
                row.fill(0.0);
                let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let src = &plane[(sy - 1) * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    for xx in x0..x1 {
                        dst[xx] = src[xx + kx - 1];
                    }
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`]: accumulates patch-column gradients into a sample.
fn col2im(col: &[f64], channels: usize, h: usize, w: usize, sample: &mut [f64]) {
    let hw = h * w;
    for ch in 0..channels {
        let plane = &mut sample[ch * hw..(ch + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &col[((ch * K + ky) * K + kx) * hw..][..hw];
                let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let dst = &mut plane[(sy - 1) * w..][..w];
                    let src = &row[y * w..][..w];
                    for xx in x0..x1 {
                        dst[xx + kx - 1] += src[xx];
                    }
                }
            }
        }
    }
}

fn conv_forward(c: &Conv2d, x: &Tensor, shape: Vec<usize>) -> Tensor {
    let (cin, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let kk = cin * K * K;
    let mut out = Tensor::zeros(shape);
    let mut col = vec![0.0; kk * hw];
    let per_out = c.out_channels * hw;
    for (sample, o) in x.rows().zip(out.data_mut().chunks_exact_mut(per_out)) {
        im2col(sample, cin, h, w, &mut col);
        for (oc, plane) in o.chunks_exact_mut(hw).enumerate() {
            plane.fill(c.bias.value[oc]);
            let wrow = &c.weight.value[oc * kk..(oc + 1) * kk];
            for (k, &wv) in wrow.iter().enumerate() {
                let crow = &col[k * hw..(k + 1) * hw];
                for (p, &cv) in plane.iter_mut().zip(crow) {
                    *p += wv * cv;
                }
            }
        }
    }
    out
}

fn conv_backward(c: &mut Conv2d, x: &Tensor, grad: &Tensor, want_input: bool) -> Option<Tensor> {
    let (cin, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let kk = cin * K * K;
    c.weight.grad.fill(0.0);
    c.bias.grad.fill(0.0);
    let mut gx = want_input.then(|| Tensor::zeros(x.shape().to_vec()));
    let mut col = vec![0.0; kk * hw];
    let mut gcol = vec![0.0; kk * hw];
    let per_out = c.out_channels * hw;
    let per_in = cin * hw;
    for (i, (sample, g)) in x.rows().zip(grad.data().chunks_exact(per_out)).enumerate() {
        im2col(sample, cin, h, w, &mut col);
        for (oc, gplane) in g.chunks_exact(hw).enumerate() {
            c.bias.grad[oc] += gplane.iter().sum::<f64>();
            let wgrad = &mut c.weight.grad[oc * kk..(oc + 1) * kk];
            for (k, wg) in wgrad.iter_mut().enumerate() {
                let crow = &col[k * hw..(k + 1) * hw];
                *wg += crow.iter().zip(gplane).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if let Some(gx) = gx.as_mut() {
            gcol.fill(0.0);
            for (oc, gplane) in g.chunks_exact(hw).enumerate() {
                let wrow = &c.weight.value[oc * kk..(oc + 1) * kk];
                for (k, &wv) in wrow.iter().enumerate() {
                    let grow = &mut gcol[k * hw..(k + 1) * hw];
                    for (d, &gv) in grow.iter_mut().zip(gplane) {
                        *d += wv * gv;
                    }
                }
            }
            col2im(&gcol, cin, h, w, &mut gx.data_mut()[i * per_in..(i + 1) * per_in]);
        }
    }
    gx
}

fn linear_forward(l: &Linear, x: &Tensor, shape: Vec<usize>) -> Tensor {
    let mut out = Tensor::zeros(shape);
    for (xi, oi) in x.rows().zip(out.data_mut().chunks_exact_mut(l.out_features)) {
        for (o, (wrow, b)) in oi
            .iter_mut()
            .zip(l.weight.value.chunks_exact(l.in_features).zip(&l.bias.value))
        {
            *o = b + wrow.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

fn linear_backward(l: &mut Linear, x: &Tensor, grad: &Tensor, want_input: bool) -> Option<Tensor> {
    let (fin, fout) = (l.in_features, l.out_features);
    l.weight.grad.fill(0.0);
    l.bias.grad.fill(0.0);
    let mut gx = want_input.then(|| Tensor::zeros(x.shape().to_vec()));
    for (i, (xi, gi)) in x.rows().zip(grad.data().chunks_exact(fout)).enumerate() {
        for (o, &g) in gi.iter().enumerate() {
            l.bias.grad[o] += g;
            for (wg, &xv) in l.weight.grad[o * fin..(o + 1) * fin].iter_mut().zip(xi) {
                *wg += g * xv;
            }
        }
        if let Some(gx) = gx.as_mut() {
            let row = &mut gx.data_mut()[i * fin..(i + 1) * fin];
            for (o, &g) in gi.iter().enumerate() {
                for (d, &wv) in row.iter_mut().zip(&l.weight.value[o * fin..(o + 1) * fin]) {
                    *d += g * wv;
                }
            }
        }
    }
    gx
}

fn pool_forward(x: &Tensor, shape: Vec<usize>) -> (Tensor, Vec<usize>) {
    let (n, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (shape[2], shape[3]);
    let mut out = Tensor::zeros(shape);
    let mut argmax = Vec::with_capacity(n * ch * oh * ow);
    let xd = x.data();
    let od = out.data_mut();
    let mut o = 0;
    for plane in 0..n * ch {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                od[o] = xd[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    (out, argmax)
}
