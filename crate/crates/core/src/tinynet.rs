//! A small fully convolutional segmentation network with hand-written
//! backpropagation.
//!
//! Layout: `conv3x3(in->w1) relu conv3x3(w1->w1) relu maxpool2 conv3x3(w1->w2)
//! relu upsample2 conv1x1(w2->K)`, all convolutions zero-padded so the output
//! has the input's spatial size. Activations are `[channel][row][col]`.

use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, ProbMaps};
use crate::metrics::argmax_planes;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"LSSEG1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Channels of the two full-resolution convolutions.
    pub width1: usize,
    /// Channels of the half-resolution convolution.
    pub width2: usize,
    pub num_classes: usize,
}

impl NetConfig {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        NetConfig {
            in_channels,
            width1: 16,
            width2: 32,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width1 == 0 || self.width2 == 0 || self.num_classes < 2 {
            return Err(Error::InvalidParameter(format!("invalid network shape {self:?}")));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        conv(self.width1, self.in_channels, 3)
            + conv(self.width1, self.width1, 3)
            + conv(self.width2, self.width1, 3)
            + conv(self.num_classes, self.width2, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Conv2d {
            out_channels,
            in_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    fn he_normal(out_channels: usize, in_channels: usize, kernel: usize, rng: &mut Xoshiro256PlusPlus) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut conv = Self::zeros(out_channels, in_channels, kernel);
        for w in &mut conv.weight {
            *w = dist.sample(rng);
        }
        conv
    }

    /// Valid output range for a tap offset `d` along an axis of length `n`.
    fn span(n: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (n as isize - d).min(n as isize).max(0) as usize;
        (lo, hi.max(lo))
    }

    fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let plane = h * w;
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; self.out_channels * plane];
        for o in 0..self.out_channels {
            let op = &mut out[o * plane..(o + 1) * plane];
            op.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let ip = &input[i * plane..(i + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = Self::span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = Self::span(w, dx);
                        let wv = self.weight[((o * self.in_channels + i) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let dst = &mut op[y * w + x0..y * w + x1];
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let src = &ip[sy * w + sx..sy * w + sx + (x1 - x0)];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the input gradient when `want_input` is set.
    fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        h: usize,
        w: usize,
        grad: &mut LayerGrad,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let plane = h * w;
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut grad_in = want_input.then(|| vec![0.0; self.in_channels * plane]);
        for o in 0..self.out_channels {
            let gp = &grad_out[o * plane..(o + 1) * plane];
            grad.bias[o] += gp.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let ip = &input[i * plane..(i + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = Self::span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = Self::span(w, dx);
                        let widx = ((o * self.in_channels + i) * k + ky) * k + kx;
                        let wv = self.weight[widx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let g = &gp[y * w + x0..y * w + x1];
                            let sy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let start = sy * w + sx;
                            let src = &ip[start..start + (x1 - x0)];
                            acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(gi) = grad_in.as_mut() {
                                let dst = &mut gi[i * plane + start..i * plane + start + (x1 - x0)];
                                for (d, gv) in dst.iter_mut().zip(g) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        grad.weight[widx] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

/// Gradient (or momentum buffer) for one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// One [`LayerGrad`] per convolution, in network order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGradients {
    pub layers: Vec<LayerGrad>,
}

impl NetGradients {
    pub fn zeros_like(net: &TinyNet) -> Self {
        NetGradients {
            layers: net
                .layers
                .iter()
                .map(|c| LayerGrad {
                    weight: vec![0.0; c.weight.len()],
                    bias: vec![0.0; c.bias.len()],
                })
                .collect(),
        }
    }

    /// Flattened in the same order as [`TinyNet::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn add_scaled(&mut self, other: &NetGradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

/// Activations kept from [`TinyNet::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    height: usize,
    width: usize,
    input: Vec<f64>,
    act1: Vec<f64>,
    act2: Vec<f64>,
    pool_argmax: Vec<usize>,
    pooled: Vec<f64>,
    act3: Vec<f64>,
    upsampled: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[class][row][col]`
    pub logits: Vec<f64>,
    pub probs: ProbMaps,
    pub cache: ForwardCache,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyNet {
    config: NetConfig,
    layers: Vec<Conv2d>,
    /// Bumped on every parameter update so stale caches are detected.
    version: u64,
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_mask(grad: &mut [f64], act: &[f64]) {
    for (g, a) in grad.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn maxpool2(input: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * oh * ow];
    let mut arg = vec![0usize; channels * oh * ow];
    for c in 0..channels {
        let base = c * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = (c * oh + y) * ow + x;
                out[o] = input[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

/// Source taps for 2x bilinear upsampling of an axis of length `n` (half-pixel centers, edge clamped).
fn upsample_taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                [(i.saturating_sub(1), 0.25), (i, 0.75)]
            } else {
                [(i, 0.75), ((i + 1).min(n - 1), 0.25)]
            }
        })
        .collect()
}

fn upsample2(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut rows = vec![0.0; channels * h * ow];
    for c in 0..channels {
        for y in 0..h {
            let src = &input[(c * h + y) * w..(c * h + y + 1) * w];
            let dst = &mut rows[(c * h + y) * ow..(c * h + y + 1) * ow];
            for (d, taps) in dst.iter_mut().zip(&tx) {
                *d = taps[0].1 * src[taps[0].0] + taps[1].1 * src[taps[1].0];
            }
        }
    }
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        for (y, taps) in ty.iter().enumerate() {
            let dst = &mut out[(c * oh + y) * ow..(c * oh + y + 1) * ow];
            let a = &rows[(c * h + taps[0].0) * ow..(c * h + taps[0].0 + 1) * ow];
            let b = &rows[(c * h + taps[1].0) * ow..(c * h + taps[1].0 + 1) * ow];
            for ((d, &av), &bv) in dst.iter_mut().zip(a).zip(b) {
                *d = taps[0].1 * av + taps[1].1 * bv;
            }
        }
    }
    out
}

/// Transpose of [`upsample2`].
fn upsample2_backward(grad_out: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut rows = vec![0.0; channels * h * ow];
    for c in 0..channels {
        for (y, taps) in ty.iter().enumerate() {
            let g = &grad_out[(c * oh + y) * ow..(c * oh + y + 1) * ow];
            for &(src_row, wt) in taps {
                let dst = &mut rows[(c * h + src_row) * ow..(c * h + src_row + 1) * ow];
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += wt * gv;
                }
            }
        }
    }
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        for y in 0..h {
            let g = &rows[(c * h + y) * ow..(c * h + y + 1) * ow];
            let dst = &mut out[(c * h + y) * w..(c * h + y + 1) * w];
            for (gv, taps) in g.iter().zip(&tx) {
                dst[taps[0].0] += taps[0].1 * gv;
                dst[taps[1].0] += taps[1].1 * gv;
            }
        }
    }
    out
}

impl TinyNet {
    /// He-normal weights, zero biases, deterministic in `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let layers = vec![
            Conv2d::he_normal(config.width1, config.in_channels, 3, &mut rng),
            Conv2d::he_normal(config.width1, config.width1, 3, &mut rng),
            Conv2d::he_normal(config.width2, config.width1, 3, &mut rng),
            Conv2d::he_normal(config.num_classes, config.width2, 1, &mut rng),
        ];
        Ok(TinyNet {
            config,
            layers,
            version: 0,
        })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(TinyNet {
            config,
            layers: vec![
                Conv2d::zeros(config.width1, config.in_channels, 3),
                Conv2d::zeros(config.width1, config.width1, 3),
                Conv2d::zeros(config.width2, config.width1, 3),
                Conv2d::zeros(config.num_classes, config.width2, 1),
            ],
            version: 0,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    /// All parameters flattened: per layer, weights then biases.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|c| c.weight.iter().chain(&c.bias).copied())
            .collect()
    }

    /// Overwrites parameters from the layout of [`parameters`](Self::parameters).
    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_parameters()
            )));
        }
        let mut it = flat.iter().copied();
        for c in &mut self.layers {
            for w in c.weight.iter_mut().chain(c.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn forward(&self, img: &Image) -> Result<ForwardPass> {
        let cfg = &self.config;
        if img.channels() != cfg.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, image has {}",
                cfg.in_channels,
                img.channels()
            )));
        }
        let (h, w) = (img.height(), img.width());
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("input size {h}x{w} must be even")));
        }
        let input = img.data().to_vec();
        let mut act1 = self.layers[0].forward(&input, h, w);
        relu_in_place(&mut act1);
        let mut act2 = self.layers[1].forward(&act1, h, w);
        relu_in_place(&mut act2);
        let (pooled, pool_argmax) = maxpool2(&act2, cfg.width1, h, w);
        let mut act3 = self.layers[2].forward(&pooled, h / 2, w / 2);
        relu_in_place(&mut act3);
        let upsampled = upsample2(&act3, cfg.width2, h / 2, w / 2);
        let logits = self.layers[3].forward(&upsampled, h, w);
        let probs = ProbMaps::from_logits(cfg.num_classes, h, w, &logits)?;
        Ok(ForwardPass {
            logits,
            probs,
            cache: ForwardCache {
                version: self.version,
                height: h,
                width: w,
                input,
                act1,
                act2,
                pool_argmax,
                pooled,
                act3,
                upsampled,
            },
        })
    }

    pub fn predict(&self, img: &Image) -> Result<LabelMap> {
        let pass = self.forward(img)?;
        Ok(argmax_planes(
            self.config.num_classes,
            img.height(),
            img.width(),
            &pass.logits,
        ))
    }

    pub fn backward(&self, cache: &ForwardCache, logit_grad: &[f64]) -> Result<NetGradients> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cache: cache.version,
                net: self.version,
            });
        }
        let cfg = &self.config;
        let (h, w) = (cache.height, cache.width);
        if logit_grad.len() != cfg.num_classes * h * w {
            return Err(Error::Shape(format!(
                "{} logit gradients for {} logits",
                logit_grad.len(),
                cfg.num_classes * h * w
            )));
        }
        let mut grads = NetGradients::zeros_like(self);
        let g_up = self.layers[3]
            .backward(&cache.upsampled, logit_grad, h, w, &mut grads.layers[3], true)
            .expect("input gradient requested");
        let mut g_act3 = upsample2_backward(&g_up, cfg.width2, h / 2, w / 2);
        relu_mask(&mut g_act3, &cache.act3);
        let g_pooled = self.layers[2]
            .backward(&cache.pooled, &g_act3, h / 2, w / 2, &mut grads.layers[2], true)
            .expect("input gradient requested");
        let mut g_act2 = vec![0.0; cache.act2.len()];
        for (&src, g) in cache.pool_argmax.iter().zip(&g_pooled) {
            g_act2[src] += g;
        }
        relu_mask(&mut g_act2, &cache.act2);
        let mut g_act1 = self.layers[1]
            .backward(&cache.act1, &g_act2, h, w, &mut grads.layers[1], true)
            .expect("input gradient requested");
        relu_mask(&mut g_act1, &cache.act1);
        self.layers[0].backward(&cache.input, &g_act1, h, w, &mut grads.layers[0], false);
        Ok(grads)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for c in &self.layers {
            for d in [c.out_channels, c.in_channels, c.kernel, c.kernel] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in c.weight.iter().chain(&c.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<(usize, &[u8])> {
            if bytes.len() < pos + n {
                return Err(Error::format(pos, format!("truncated checkpoint while reading {what}")));
            }
            let at = pos;
            pos += n;
            Ok((at, &bytes[at..at + n]))
        };
        let (_, magic) = take(6, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let (at, b) = take(4, "layer count")?;
        let count = read_u32(b);
        if count != 4 {
            return Err(Error::format(at, format!("expected 4 layers, found {count}")));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (at, b) = take(16, "layer header")?;
            let dims: Vec<usize> = b.chunks_exact(4).map(read_u32).collect();
            let (o, i, kh, kw) = (dims[0], dims[1], dims[2], dims[3]);
            if kh != kw || o == 0 || i == 0 || kh == 0 {
                return Err(Error::format(at, format!("bad layer shape {o}x{i}x{kh}x{kw}")));
            }
            let n = o * i * kh * kw;
            let (_, payload) = take(8 * (n + o), "layer parameters")?;
            let vals: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            layers.push(Conv2d {
                out_channels: o,
                in_channels: i,
                kernel: kh,
                weight: vals[..n].to_vec(),
                bias: vals[n..].to_vec(),
            });
        }
        if pos != bytes.len() {
            return Err(Error::format(pos, "trailing bytes after checkpoint"));
        }
        let config = NetConfig {
            in_channels: layers[0].in_channels,
            width1: layers[0].out_channels,
            width2: layers[2].out_channels,
            num_classes: layers[3].out_channels,
        };
        let expected = TinyNet::zeros(config)?;
        for (got, want) in layers.iter().zip(&expected.layers) {
            if (got.out_channels, got.in_channels, got.kernel)
                != (want.out_channels, want.in_channels, want.kernel)
            {
                return Err(Error::format(0, "layer shapes do not chain into the expected architecture"));
            }
        }
        Ok(TinyNet {
            config,
            layers,
            version: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pgm::write_atomic(path, &self.to_checkpoint_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: usize,
    pub poly_power: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_iter: 2000,
            poly_power: 0.9,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && self.lr0.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.poly_power >= 0.0
            && self.max_iter >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid SGD configuration {self:?}")))
        }
    }
}

/// `lr0 * (1 - iter / max_iter)^power`.
pub fn poly_lr(cfg: &SgdConfig, iter: usize) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::IterationOutOfRange {
            iter,
            max_iter: cfg.max_iter,
        });
    }
    Ok(cfg.lr0 * (1.0 - iter as f64 / cfg.max_iter as f64).powf(cfg.poly_power))
}

/// `v <- momentum v - lr (g + wd w); w <- w + v` elementwise.
pub fn sgd_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, cfg: &SgdConfig) {
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v - lr * (g + cfg.weight_decay * *w);
        *w += *v;
    }
}

/// One momentum step on every layer; nothing is modified if any gradient is non-finite.
pub fn sgd_step(
    net: &mut TinyNet,
    grads: &NetGradients,
    velocity: &mut NetGradients,
    cfg: &SgdConfig,
    iter: usize,
) -> Result<()> {
    for (layer, g) in grads.layers.iter().enumerate() {
        if let Some(index) = g.weight.iter().chain(&g.bias).position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer, index });
        }
    }
    let lr = poly_lr(cfg, iter)?;
    for ((c, g), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut velocity.layers) {
        sgd_update(&mut c.weight, &g.weight, &mut v.weight, lr, cfg);
        sgd_update(&mut c.bias, &g.bias, &mut v.bias, lr, cfg);
    }
    net.version += 1;
    Ok(())
}
