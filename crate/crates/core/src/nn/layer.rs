//! Layer graph with forward and reverse-mode passes over single samples.
//!
//! Batch normalisation always uses its stored running statistics, so every
//! sample is independent of the rest of the batch and a batch is processed as
//! a set of per-sample passes whose gradients are summed.

use super::gemm::gemm;
use super::network::{Gradients, ParamId};
use super::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// TensorFlow-style "same": output extent `ceil(in / stride)`, extra
    /// padding goes after.
    Same,
    Explicit { h: usize, w: usize },
}

impl Padding {
    fn resolve(self, input: usize, kernel: usize, stride: usize, explicit: usize) -> (usize, usize) {
        match self {
            Padding::Valid => {
                assert!(input >= kernel, "input extent {input} smaller than kernel {kernel}");
                (0, (input - kernel) / stride + 1)
            }
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                (total / 2, out)
            }
            Padding::Explicit { .. } => {
                let padded = input + 2 * explicit;
                assert!(padded >= kernel, "padded extent {padded} smaller than kernel {kernel}");
                (explicit, (padded - kernel) / stride + 1)
            }
        }
    }

    fn explicit(self) -> (usize, usize) {
        match self {
            Padding::Explicit { h, w } => (h, w),
            _ => (0, 0),
        }
    }
}

/// Kernel footprint shared by convolutions and pooling windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl Window {
    pub fn square(k: usize, stride: usize, padding: Padding) -> Self {
        Self { kh: k, kw: k, sh: stride, sw: stride, padding }
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (eh, ew) = self.padding.explicit();
        let (pad_top, out_h) = self.padding.resolve(h, self.kh, self.sh, eh);
        let (pad_left, out_w) = self.padding.resolve(w, self.kw, self.sw, ew);
        Geometry { pad_top, pad_left, out_h, out_w }
    }

    fn is_pointwise(&self, g: &Geometry) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && g.pad_top == 0 && g.pad_left == 0
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub window: Window,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Option<ParamId>,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub channels: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    Relu6,
    MaxPool(Window),
    AvgPool(Window),
    GlobalAvgPool,
    Flatten,
    Dense(Dense),
    Sequential(Vec<Layer>),
    /// `body(x) + shortcut(x)`; a missing shortcut is the identity.
    Residual { body: Box<Layer>, shortcut: Option<Box<Layer>> },
    /// Channel-wise concatenation of parallel branches.
    Concat(Vec<Layer>),
}

/// Saved activations for the reverse pass.
#[derive(Debug)]
pub(crate) enum Cache {
    None,
    Input(Tensor),
    Output(Tensor),
    Argmax { indices: Vec<usize>, input: Shape },
    Shape(Shape),
    Seq(Vec<Cache>),
    Residual { body: Box<Cache>, shortcut: Box<Cache> },
    Concat { branches: Vec<Cache>, channels: Vec<usize> },
}

impl Layer {
    /// Number of leaf (non-container) layers.
    pub fn leaf_count(&self) -> usize {
        match self {
            Layer::Sequential(ls) | Layer::Concat(ls) => ls.iter().map(Layer::leaf_count).sum(),
            Layer::Residual { body, shortcut } => {
                body.leaf_count() + shortcut.as_ref().map_or(0, |s| s.leaf_count())
            }
            _ => 1,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        match self {
            Layer::Conv(conv) => {
                let g = conv.window.geometry(input.h, input.w);
                Shape::new(conv.out_channels, g.out_h, g.out_w)
            }
            Layer::BatchNorm(_) | Layer::Relu | Layer::Relu6 => input,
            Layer::MaxPool(win) | Layer::AvgPool(win) => {
                let g = win.geometry(input.h, input.w);
                Shape::new(input.c, g.out_h, g.out_w)
            }
            Layer::GlobalAvgPool => Shape::vector(input.c),
            Layer::Flatten => Shape::vector(input.len()),
            Layer::Dense(d) => Shape::vector(d.outputs),
            Layer::Sequential(ls) => ls.iter().fold(input, |s, l| l.output_shape(s)),
            Layer::Residual { body, .. } => body.output_shape(input),
            Layer::Concat(branches) => {
                let shapes: Vec<Shape> = branches.iter().map(|b| b.output_shape(input)).collect();
                let c = shapes.iter().map(|s| s.c).sum();
                Shape::new(c, shapes[0].h, shapes[0].w)
            }
        }
    }

    pub(crate) fn forward(&self, p: &[Vec<f64>], x: Tensor, record: bool) -> (Tensor, Cache) {
        match self {
            Layer::Conv(conv) => {
                let y = conv_forward(conv, p, &x);
                (y, if record { Cache::Input(x) } else { Cache::None })
            }
            Layer::BatchNorm(bn) => {
                let y = bn_forward(bn, p, &x);
                (y, if record { Cache::Input(x) } else { Cache::None })
            }
            Layer::Relu | Layer::Relu6 => {
                let cap = if matches!(self, Layer::Relu6) { 6.0 } else { f64::INFINITY };
                let mut y = x;
                for v in y.data_mut() {
                    *v = v.clamp(0.0, cap);
                }
                let cache = if record { Cache::Output(y.clone()) } else { Cache::None };
                (y, cache)
            }
            Layer::MaxPool(win) => {
                let (y, indices) = max_pool_forward(win, &x);
                let cache = if record {
                    Cache::Argmax { indices, input: x.shape() }
                } else {
                    Cache::None
                };
                (y, cache)
            }
            Layer::AvgPool(win) => (avg_pool_forward(win, &x), Cache::Shape(x.shape())),
            Layer::GlobalAvgPool => {
                let s = x.shape();
                let inv = 1.0 / s.plane() as f64;
                let data = (0..s.c).map(|c| x.channel(c).iter().sum::<f64>() * inv).collect();
                (Tensor::from_vec(Shape::vector(s.c), data), Cache::Shape(s))
            }
            Layer::Flatten => {
                let s = x.shape();
                (x.reshape(Shape::vector(s.len())), Cache::Shape(s))
            }
            Layer::Dense(d) => {
                assert_eq!(x.shape().len(), d.inputs, "dense input width");
                let mut y = p[d.bias].clone();
                gemm(d.outputs, d.inputs, 1, &p[d.weight], false, x.data(), false, 1.0, &mut y);
                let y = Tensor::from_vec(Shape::vector(d.outputs), y);
                (y, if record { Cache::Input(x) } else { Cache::None })
            }
            Layer::Sequential(layers) => {
                let mut caches = Vec::with_capacity(if record { layers.len() } else { 0 });
                let mut cur = x;
                for layer in layers {
                    let (y, c) = layer.forward(p, cur, record);
                    if record {
                        caches.push(c);
                    }
                    cur = y;
                }
                (cur, if record { Cache::Seq(caches) } else { Cache::None })
            }
            Layer::Residual { body, shortcut } => {
                let (side, sc_cache) = match shortcut {
                    Some(s) => s.forward(p, x.clone(), record),
                    None => (x.clone(), Cache::None),
                };
                let (mut y, body_cache) = body.forward(p, x, record);
                y.add_assign(&side);
                let cache = if record {
                    Cache::Residual { body: Box::new(body_cache), shortcut: Box::new(sc_cache) }
                } else {
                    Cache::None
                };
                (y, cache)
            }
            Layer::Concat(branches) => {
                let mut outs = Vec::with_capacity(branches.len());
                let mut caches = Vec::new();
                for b in branches {
                    let (y, c) = b.forward(p, x.clone(), record);
                    outs.push(y);
                    if record {
                        caches.push(c);
                    }
                }
                let (h, w) = (outs[0].shape().h, outs[0].shape().w);
                let channels: Vec<usize> = outs.iter().map(|t| t.shape().c).collect();
                let mut data = Vec::with_capacity(channels.iter().sum::<usize>() * h * w);
                for t in outs {
                    assert_eq!((t.shape().h, t.shape().w), (h, w), "concat branch extents differ");
                    data.extend_from_slice(t.data());
                }
                let y = Tensor::from_vec(Shape::new(channels.iter().sum(), h, w), data);
                let cache = if record { Cache::Concat { branches: caches, channels } } else { Cache::None };
                (y, cache)
            }
        }
    }

    /// Propagates `grad` (d loss / d output) back through the layer,
    /// accumulating parameter gradients into `grads`, and returns
    /// d loss / d input.
    pub(crate) fn backward(&self, p: &[Vec<f64>], cache: Cache, grad: Tensor, grads: &mut Gradients) -> Tensor {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Input(x)) => conv_backward(conv, p, &x, &grad, grads),
            (Layer::BatchNorm(bn), Cache::Input(x)) => bn_backward(bn, p, &x, grad, grads),
            (Layer::Relu | Layer::Relu6, Cache::Output(y)) => {
                let cap = if matches!(self, Layer::Relu6) { 6.0 } else { f64::INFINITY };
                let mut g = grad;
                for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    if !(yv > 0.0 && yv < cap) {
                        *gv = 0.0;
                    }
                }
                g
            }
            (Layer::MaxPool(_), Cache::Argmax { indices, input }) => {
                let mut dx = Tensor::zeros(input);
                let d = dx.data_mut();
                for (&i, &g) in indices.iter().zip(grad.data()) {
                    d[i] += g;
                }
                dx
            }
            (Layer::AvgPool(win), Cache::Shape(input)) => avg_pool_backward(win, input, &grad),
            (Layer::GlobalAvgPool, Cache::Shape(input)) => {
                let inv = 1.0 / input.plane() as f64;
                let mut dx = Tensor::zeros(input);
                let plane = input.plane();
                for (c, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                    chunk.fill(grad.data()[c] * inv);
                }
                dx
            }
            (Layer::Flatten, Cache::Shape(input)) => grad.reshape(input),
            (Layer::Dense(d), Cache::Input(x)) => {
                if let Some(dw) = grads.slot_mut(d.weight) {
                    gemm(d.outputs, 1, d.inputs, grad.data(), false, x.data(), false, 1.0, dw);
                }
                if let Some(db) = grads.slot_mut(d.bias) {
                    for (b, g) in db.iter_mut().zip(grad.data()) {
                        *b += g;
                    }
                }
                let mut dx = vec![0.0; d.inputs];
                gemm(d.inputs, d.outputs, 1, &p[d.weight], true, grad.data(), false, 0.0, &mut dx);
                Tensor::from_vec(x.shape(), dx)
            }
            (Layer::Sequential(layers), Cache::Seq(caches)) => {
                let mut g = grad;
                for (layer, c) in layers.iter().zip(caches).rev() {
                    g = layer.backward(p, c, g, grads);
                }
                g
            }
            (Layer::Residual { body, shortcut }, Cache::Residual { body: bc, shortcut: sc }) => {
                let side = match shortcut {
                    Some(s) => s.backward(p, *sc, grad.clone(), grads),
                    None => grad.clone(),
                };
                let mut dx = body.backward(p, *bc, grad, grads);
                dx.add_assign(&side);
                dx
            }
            (Layer::Concat(branches), Cache::Concat { branches: caches, channels }) => {
                let s = grad.shape();
                let plane = s.plane();
                let mut offset = 0;
                let mut total: Option<Tensor> = None;
                for ((b, c), ch) in branches.iter().zip(caches).zip(channels) {
                    let slice = grad.data()[offset * plane..(offset + ch) * plane].to_vec();
                    offset += ch;
                    let g = b.backward(p, c, Tensor::from_vec(Shape::new(ch, s.h, s.w), slice), grads);
                    match total.as_mut() {
                        Some(t) => t.add_assign(&g),
                        None => total = Some(g),
                    }
                }
                total.expect("concat has at least one branch")
            }
            (layer, _) => panic!("backward called without a recorded forward pass for {layer:?}"),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], channels: usize, h: usize, w: usize, win: &Window, g: &Geometry, cols: &mut [f64]) {
    let ohw = g.out_h * g.out_w;
    for c in 0..channels {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (c * win.kh + ki) * win.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * win.sh + ki) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * win.sw + kj) as isize - g.pad_left as isize;
                        *v = if ix >= 0 && ix < w as isize { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], channels: usize, h: usize, w: usize, win: &Window, g: &Geometry, dx: &mut [f64]) {
    let ohw = g.out_h * g.out_w;
    for c in 0..channels {
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (c * win.kh + ki) * win.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * win.sh + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..g.out_w {
                        let ix = (ox * win.sw + kj) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < w as isize {
                            dxc[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(conv: &Conv2d, p: &[Vec<f64>], x: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(s.c, conv.in_channels, "conv input channels");
    let win = &conv.window;
    let g = win.geometry(s.h, s.w);
    let groups = conv.groups;
    let cg = conv.in_channels / groups;
    let og = conv.out_channels / groups;
    let kk = cg * win.kh * win.kw;
    let ohw = g.out_h * g.out_w;
    let weight = &p[conv.weight];
    let mut out = vec![0.0; conv.out_channels * ohw];
    let pointwise = win.is_pointwise(&g);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * ohw] };
    for gi in 0..groups {
        let xin = &x.data()[gi * cg * s.plane()..(gi + 1) * cg * s.plane()];
        let rhs: &[f64] = if pointwise {
            xin
        } else {
            im2col(xin, cg, s.h, s.w, win, &g, &mut cols);
            &cols
        };
        gemm(
            og,
            kk,
            ohw,
            &weight[gi * og * kk..(gi + 1) * og * kk],
            false,
            rhs,
            false,
            0.0,
            &mut out[gi * og * ohw..(gi + 1) * og * ohw],
        );
    }
    if let Some(b) = conv.bias {
        for (chunk, &bv) in out.chunks_mut(ohw).zip(&p[b]) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::from_vec(Shape::new(conv.out_channels, g.out_h, g.out_w), out)
}

fn conv_backward(conv: &Conv2d, p: &[Vec<f64>], x: &Tensor, grad: &Tensor, grads: &mut Gradients) -> Tensor {
    let s = x.shape();
    let win = &conv.window;
    let g = win.geometry(s.h, s.w);
    let groups = conv.groups;
    let cg = conv.in_channels / groups;
    let og = conv.out_channels / groups;
    let kk = cg * win.kh * win.kw;
    let ohw = g.out_h * g.out_w;
    let weight = &p[conv.weight];
    let pointwise = win.is_pointwise(&g);
    let mut dx = Tensor::zeros(s);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * ohw] };
    let mut dcols = vec![0.0; kk * ohw];
    for gi in 0..groups {
        let xin = &x.data()[gi * cg * s.plane()..(gi + 1) * cg * s.plane()];
        let gout = &grad.data()[gi * og * ohw..(gi + 1) * og * ohw];
        let wg = &weight[gi * og * kk..(gi + 1) * og * kk];
        if let Some(dw) = grads.slot_mut(conv.weight) {
            let rhs: &[f64] = if pointwise {
                xin
            } else {
                im2col(xin, cg, s.h, s.w, win, &g, &mut cols);
                &cols
            };
            gemm(og, ohw, kk, gout, false, rhs, true, 1.0, &mut dw[gi * og * kk..(gi + 1) * og * kk]);
        }
        let dxg = &mut dx.data_mut()[gi * cg * s.plane()..(gi + 1) * cg * s.plane()];
        if pointwise {
            gemm(kk, og, ohw, wg, true, gout, false, 1.0, dxg);
        } else {
            gemm(kk, og, ohw, wg, true, gout, false, 0.0, &mut dcols);
            col2im_add(&dcols, cg, s.h, s.w, win, &g, dxg);
        }
    }
    if let Some(b) = conv.bias {
        if let Some(db) = grads.slot_mut(b) {
            for (d, chunk) in db.iter_mut().zip(grad.data().chunks(ohw)) {
                *d += chunk.iter().sum::<f64>();
            }
        }
    }
    dx
}

fn bn_coefficients(bn: &BatchNorm, p: &[Vec<f64>], c: usize) -> (f64, f64) {
    let inv = 1.0 / (p[bn.var][c] + bn.eps).sqrt();
    let gamma = bn.gamma.map_or(1.0, |gm| p[gm][c]);
    (gamma * inv, inv)
}

fn bn_forward(bn: &BatchNorm, p: &[Vec<f64>], x: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(s.c, bn.channels, "batch-norm channels");
    let mut y = x.clone();
    let plane = s.plane();
    for (c, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let (scale, _) = bn_coefficients(bn, p, c);
        let mean = p[bn.mean][c];
        let beta = p[bn.beta][c];
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * scale + beta);
    }
    y
}

fn bn_backward(bn: &BatchNorm, p: &[Vec<f64>], x: &Tensor, grad: Tensor, grads: &mut Gradients) -> Tensor {
    let plane = x.shape().plane();
    for c in 0..bn.channels {
        let gc = &grad.data()[c * plane..(c + 1) * plane];
        if let Some(db) = grads.slot_mut(bn.beta) {
            db[c] += gc.iter().sum::<f64>();
        }
        if let Some(gm) = bn.gamma {
            if let Some(dg) = grads.slot_mut(gm) {
                let (_, inv) = bn_coefficients(bn, p, c);
                let mean = p[bn.mean][c];
                let xc = x.channel(c);
                dg[c] += gc.iter().zip(xc).map(|(g, xv)| g * (xv - mean) * inv).sum::<f64>();
            }
        }
    }
    let mut dx = grad;
    for (c, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
        let (scale, _) = bn_coefficients(bn, p, c);
        chunk.iter_mut().for_each(|v| *v *= scale);
    }
    dx
}

fn max_pool_forward(win: &Window, x: &Tensor) -> (Tensor, Vec<usize>) {
    let s = x.shape();
    let g = win.geometry(s.h, s.w);
    let mut out = Vec::with_capacity(s.c * g.out_h * g.out_w);
    let mut idx = Vec::with_capacity(out.capacity());
    for c in 0..s.c {
        let base = c * s.plane();
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ki in 0..win.kh {
                    let iy = (oy * win.sh + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kj in 0..win.kw {
                        let ix = (ox * win.sw + kj) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * s.w + ix as usize;
                        let v = x.data()[i];
                        if v > best || best_i == usize::MAX {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i);
            }
        }
    }
    (Tensor::from_vec(Shape::new(s.c, g.out_h, g.out_w), out), idx)
}

/// Visits every output cell with the in-bounds input indices of its window.
fn for_each_window(win: &Window, s: Shape, mut f: impl FnMut(usize, &[usize])) {
    let g = win.geometry(s.h, s.w);
    let mut members = Vec::with_capacity(win.kh * win.kw);
    let mut o = 0;
    for c in 0..s.c {
        let base = c * s.plane();
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                members.clear();
                for ki in 0..win.kh {
                    let iy = (oy * win.sh + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kj in 0..win.kw {
                        let ix = (ox * win.sw + kj) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < s.w as isize {
                            members.push(base + iy as usize * s.w + ix as usize);
                        }
                    }
                }
                f(o, &members);
                o += 1;
            }
        }
    }
}

fn avg_pool_forward(win: &Window, x: &Tensor) -> Tensor {
    let s = x.shape();
    let g = win.geometry(s.h, s.w);
    let mut out = vec![0.0; s.c * g.out_h * g.out_w];
    for_each_window(win, s, |o, members| {
        out[o] = members.iter().map(|&i| x.data()[i]).sum::<f64>() / members.len() as f64;
    });
    Tensor::from_vec(Shape::new(s.c, g.out_h, g.out_w), out)
}

fn avg_pool_backward(win: &Window, input: Shape, grad: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input);
    let d = dx.data_mut();
    for_each_window(win, input, |o, members| {
        let share = grad.data()[o] / members.len() as f64;
        for &i in members {
            d[i] += share;
        }
    });
    dx
}
