//! A small convolutional network: six 3x3 convolutions with ReLU, 2x2 max
//! pooling after every second convolution, two ReLU fully connected layers
//! and a softmax output. The second fully connected layer doubles as a
//! learned image code.

use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::AddAssign;
use std::path::Path;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodedVector, EncodingKind};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub trait Real: ndarray::LinalgScalar + Float + FromPrimitive + ToPrimitive + Sum + AddAssign + Send + Sync + std::fmt::Debug + 'static {}
impl Real for f32 {}
impl Real for f64 {}

#[inline]
fn lit<T: Real>(v: f64) -> T {
    T::from_f64(v).unwrap()
}

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_side: usize,
    pub conv_channels: [usize; 6],
    pub fc1: usize,
    pub fc2: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_side: 128,
            conv_channels: [32, 32, 64, 64, 128, 128],
            fc1: 512,
            fc2: 256,
            classes: 6,
            seed: 0,
        }
    }
}

impl NetConfig {
    /// Small network for single-core runs on downsampled inputs.
    pub fn desk() -> Self {
        Self {
            input_side: 32,
            conv_channels: [8, 8, 16, 16, 32, 32],
            fc1: 64,
            fc2: 32,
            classes: 6,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || self.input_side % 8 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input side {} must be a positive multiple of 8",
                self.input_side
            )));
        }
        if self.conv_channels.contains(&0) || self.fc1 == 0 || self.fc2 == 0 || self.classes < 2 {
            return Err(Error::ShapeMismatch("layer widths must be positive and classes >= 2".into()));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        INPUT_CHANNELS * self.input_side * self.input_side
    }

    pub fn flat_len(&self) -> usize {
        let s = self.input_side / 8;
        self.conv_channels[5] * s * s
    }
}

/// Weights and biases of one layer. Convolution weights are laid out
/// `[out][in][3][3]`, dense weights `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub inputs: usize,
    pub outputs: usize,
}

impl<T: Real> Layer<T> {
    fn zeros(inputs: usize, outputs: usize, taps: usize) -> Self {
        Self {
            weights: vec![T::zero(); inputs * outputs * taps],
            bias: vec![T::zero(); outputs],
            inputs,
            outputs,
        }
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn values(&self) -> impl Iterator<Item = &T> {
        self.weights.iter().chain(self.bias.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub convs: Vec<Layer<T>>,
    /// FC1, FC2 and the output layer.
    pub fcs: Vec<Layer<T>>,
}

impl<T: Real> NetParams<T> {
    pub fn zeros(config: &NetConfig) -> Self {
        let mut convs = Vec::with_capacity(6);
        let mut c_in = INPUT_CHANNELS;
        for &c in &config.conv_channels {
            convs.push(Layer::zeros(c_in, c, 9));
            c_in = c;
        }
        let fcs = vec![
            Layer::zeros(config.flat_len(), config.fc1, 1),
            Layer::zeros(config.fc1, config.fc2, 1),
            Layer::zeros(config.fc2, config.classes, 1),
        ];
        Self { convs, fcs }
    }

    /// He-normal weights, zero biases, drawn from `config.seed`.
    pub fn init(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (layer, taps) in p.convs.iter_mut().map(|l| (l, 9)).chain(p.fcs.iter_mut().map(|l| (l, 1))) {
            let std = (2.0 / (layer.inputs * taps) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            layer.weights.iter_mut().for_each(|w| *w = lit(normal.sample(&mut rng)));
        }
        Ok(p)
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.convs.iter().chain(self.fcs.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.convs.iter_mut().chain(self.fcs.iter_mut())
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.layers().flat_map(Layer::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers_mut().flat_map(Layer::values_mut)
    }

    pub fn len(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// `self += a * other`
    pub fn scaled_add(&mut self, a: T, other: &NetParams<T>) {
        for (x, &y) in self.values_mut().zip(other.values()) {
            *x += a * y;
        }
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        let map = |l: &Layer<T>| Layer {
            weights: l.weights.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
            bias: l.bias.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
            inputs: l.inputs,
            outputs: l.outputs,
        };
        NetParams {
            convs: self.convs.iter().map(map).collect(),
            fcs: self.fcs.iter().map(map).collect(),
        }
    }
}

/// Single-sample layer kernels on `[channel][row][col]` buffers.
pub mod layers {
    use ndarray::linalg::general_mat_mul;
    use ndarray::{Array2, ArrayView2, ArrayViewMut2};

    use super::{Layer, Real};

    /// Patch matrix `[in * 9][side * side]` of a zero-padded 3x3 neighbourhood.
    fn im2col<T: Real>(input: &[T], channels: usize, side: usize) -> Array2<T> {
        let plane = side * side;
        let mut cols = Array2::zeros((channels * 9, plane));
        for i in 0..channels {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut row = cols.row_mut(i * 9 + ky * 3 + kx);
                    let row = row.as_slice_mut().unwrap();
                    let (x0, x1, sx0) = shifted(kx, side);
                    for y in shifted(ky, side).0..shifted(ky, side).1 {
                        let sy = y + ky - 1;
                        row[y * side + x0..y * side + x1].copy_from_slice(&src[sy * side + sx0..sy * side + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
        cols
    }

    /// Output range `[lo, hi)` whose tap `k` stays inside the image, and the
    /// source start for `lo`.
    #[inline]
    fn shifted(k: usize, side: usize) -> (usize, usize, usize) {
        match k {
            0 => (1, side, 0),
            1 => (0, side, 0),
            _ => (0, side - 1, 1),
        }
    }

    fn col2im<T: Real>(cols: &Array2<T>, channels: usize, side: usize) -> Vec<T> {
        let plane = side * side;
        let mut out = vec![T::zero(); channels * plane];
        for i in 0..channels {
            let dst = &mut out[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = cols.row(i * 9 + ky * 3 + kx);
                    let row = row.as_slice().unwrap();
                    let (x0, x1, sx0) = shifted(kx, side);
                    for y in shifted(ky, side).0..shifted(ky, side).1 {
                        let sy = y + ky - 1;
                        let d = &mut dst[sy * side + sx0..sy * side + sx0 + (x1 - x0)];
                        for (a, &b) in d.iter_mut().zip(&row[y * side + x0..y * side + x1]) {
                            *a += b;
                        }
                    }
                }
            }
        }
        out
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    pub fn conv3x3_forward<T: Real>(input: &[T], side: usize, layer: &Layer<T>) -> Vec<T> {
        let plane = side * side;
        let cols = im2col(input, layer.inputs, side);
        let w = ArrayView2::from_shape((layer.outputs, layer.inputs * 9), &layer.weights).unwrap();
        let mut out = Array2::from_shape_fn((layer.outputs, plane), |(o, _)| layer.bias[o]);
        general_mat_mul(T::one(), &w, &cols, T::one(), &mut out);
        out.into_raw_vec_and_offset().0
    }

    /// Accumulates weight and bias gradients into `grad` and, when asked,
    /// returns the gradient with respect to the input.
    pub fn conv3x3_backward<T: Real>(
        input: &[T],
        side: usize,
        layer: &Layer<T>,
        gout: &[T],
        grad: &mut Layer<T>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        let plane = side * side;
        let cols = im2col(input, layer.inputs, side);
        let g = ArrayView2::from_shape((layer.outputs, plane), gout).unwrap();
        for (b, row) in grad.bias.iter_mut().zip(g.outer_iter()) {
            *b += row.iter().copied().sum();
        }
        let mut gw = ArrayViewMut2::from_shape((layer.outputs, layer.inputs * 9), &mut grad.weights).unwrap();
        general_mat_mul(T::one(), &g, &cols.t(), T::one(), &mut gw);
        want_input.then(|| {
            let w = ArrayView2::from_shape((layer.outputs, layer.inputs * 9), &layer.weights).unwrap();
            let gcols = w.t().dot(&g);
            col2im(&gcols, layer.inputs, side)
        })
    }

    pub fn relu_inplace<T: Real>(v: &mut [T]) {
        v.iter_mut().for_each(|x| {
            if *x < T::zero() {
                *x = T::zero()
            }
        });
    }

    /// Zeroes gradient entries whose forward output was not positive.
    pub fn relu_backward<T: Real>(out: &[T], g: &mut [T]) {
        for (gi, &o) in g.iter_mut().zip(out) {
            if o <= T::zero() {
                *gi = T::zero();
            }
        }
    }

    /// 2x2 max pooling, stride 2; returns the pooled map and, per output,
    /// the flat input index of the first maximum.
    pub fn maxpool_forward<T: Real>(input: &[T], channels: usize, side: usize) -> (Vec<T>, Vec<usize>) {
        let half = side / 2;
        let mut out = Vec::with_capacity(channels * half * half);
        let mut arg = Vec::with_capacity(channels * half * half);
        for c in 0..channels {
            for y in 0..half {
                for x in 0..half {
                    let mut best = c * side * side + 2 * y * side + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = c * side * side + (2 * y + dy) * side + 2 * x + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                    out.push(input[best]);
                    arg.push(best);
                }
            }
        }
        (out, arg)
    }

    pub fn maxpool_backward<T: Real>(gout: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
        let mut gin = vec![T::zero(); input_len];
        for (&g, &i) in gout.iter().zip(argmax) {
            gin[i] += g;
        }
        gin
    }

    pub fn fc_forward<T: Real>(input: &[T], layer: &Layer<T>) -> Vec<T> {
        (0..layer.outputs)
            .map(|o| {
                let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                layer.bias[o] + w.iter().zip(input).map(|(&a, &b)| a * b).sum::<T>()
            })
            .collect()
    }

    pub fn fc_backward<T: Real>(input: &[T], layer: &Layer<T>, gout: &[T], grad: &mut Layer<T>) -> Vec<T> {
        let mut gin = vec![T::zero(); layer.inputs];
        for (o, &g) in gout.iter().enumerate() {
            grad.bias[o] += g;
            let row = o * layer.inputs..(o + 1) * layer.inputs;
            for ((gw, &x), (gi, &w)) in grad.weights[row.clone()]
                .iter_mut()
                .zip(input)
                .zip(gin.iter_mut().zip(&layer.weights[row]))
            {
                *gw += g * x;
                *gi += g * w;
            }
        }
        gin
    }

    pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Cross-entropy of the softmax at `label` and its gradient `p - onehot`
    /// with respect to the logits.
    pub fn softmax_ce<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        let mut grad = softmax(logits);
        grad[label] = grad[label] - T::one();
        (lse - logits[label], grad)
    }
}

use layers::*;

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct SampleCache<T> {
    conv_in: Vec<Vec<T>>,
    conv_out: Vec<Vec<T>>,
    pool_arg: Vec<Vec<usize>>,
    flat: Vec<T>,
    fc1: Vec<T>,
    fc2: Vec<T>,
    pub logits: Vec<T>,
}

fn check_input<T>(config: &NetConfig, input: &[T]) -> Result<()> {
    if input.len() != config.input_len() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} values, expected {}",
            input.len(),
            config.input_len()
        )));
    }
    Ok(())
}

pub fn forward_sample<T: Real>(params: &NetParams<T>, config: &NetConfig, input: &[T]) -> Result<SampleCache<T>> {
    check_input(config, input)?;
    let mut cur = input.to_vec();
    let mut side = config.input_side;
    let mut conv_in = Vec::with_capacity(6);
    let mut conv_out = Vec::with_capacity(6);
    let mut pool_arg = Vec::with_capacity(3);
    for (l, layer) in params.convs.iter().enumerate() {
        let mut out = conv3x3_forward(&cur, side, layer);
        relu_inplace(&mut out);
        conv_in.push(std::mem::take(&mut cur));
        if l % 2 == 1 {
            let (pooled, arg) = maxpool_forward(&out, layer.outputs, side);
            pool_arg.push(arg);
            cur = pooled;
            side /= 2;
        } else {
            cur = out.clone();
        }
        conv_out.push(out);
    }
    let mut fc1 = fc_forward(&cur, &params.fcs[0]);
    relu_inplace(&mut fc1);
    let mut fc2 = fc_forward(&fc1, &params.fcs[1]);
    relu_inplace(&mut fc2);
    let logits = fc_forward(&fc2, &params.fcs[2]);
    Ok(SampleCache {
        conv_in,
        conv_out,
        pool_arg,
        flat: cur,
        fc1,
        fc2,
        logits,
    })
}

/// Gradient of one sample's loss, given the gradient at the logits.
fn backward_sample<T: Real>(
    params: &NetParams<T>,
    config: &NetConfig,
    cache: &SampleCache<T>,
    glogits: &[T],
    grad: &mut NetParams<T>,
) {
    let mut g = fc_backward(&cache.fc2, &params.fcs[2], glogits, &mut grad.fcs[2]);
    relu_backward(&cache.fc2, &mut g);
    let mut g = fc_backward(&cache.fc1, &params.fcs[1], &g, &mut grad.fcs[1]);
    relu_backward(&cache.fc1, &mut g);
    let mut g = fc_backward(&cache.flat, &params.fcs[0], &g, &mut grad.fcs[0]);
    let mut side = config.input_side / 8;
    for l in (0..6).rev() {
        if l % 2 == 1 {
            side *= 2;
            g = maxpool_backward(&g, &cache.pool_arg[l / 2], cache.conv_out[l].len());
        }
        relu_backward(&cache.conv_out[l], &mut g);
        match conv3x3_backward(&cache.conv_in[l], side, &params.convs[l], &g, &mut grad.convs[l], l > 0) {
            Some(gin) => g = gin,
            None => break,
        }
    }
}

/// Logits and class probabilities for each input.
pub fn forward<T: Real>(params: &NetParams<T>, config: &NetConfig, batch: &[Vec<T>]) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
    let logits: Vec<Vec<T>> = batch
        .par_iter()
        .map(|x| forward_sample(params, config, x).map(|c| c.logits))
        .collect::<Result<_>>()?;
    let probs = logits.iter().map(|z| softmax(z)).collect();
    Ok((logits, probs))
}

/// Samples per gradient chunk; chunks are summed in a fixed order so the
/// result does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_grad<T: Real>(
    params: &NetParams<T>,
    config: &NetConfig,
    batch: &[Vec<T>],
    labels: &[usize],
) -> Result<(T, NetParams<T>)> {
    if batch.len() != labels.len() || batch.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} inputs for {} labels", batch.len(), labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= config.classes) {
        return Err(Error::ShapeMismatch(format!("label {l} outside {} classes", config.classes)));
    }
    let pairs: Vec<(&Vec<T>, usize)> = batch.iter().zip(labels.iter().copied()).collect();
    let partial: Vec<(T, NetParams<T>)> = pairs
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = NetParams::zeros(config);
            let mut loss = T::zero();
            for &(x, label) in chunk {
                let cache = forward_sample(params, config, x)?;
                let (l, glogits) = softmax_ce(&cache.logits, label);
                loss += l;
                backward_sample(params, config, &cache, &glogits, &mut grad);
            }
            Ok((loss, grad))
        })
        .collect::<Result<_>>()?;
    let scale = T::one() / lit(batch.len() as f64);
    let mut grad = NetParams::zeros(config);
    let mut loss = T::zero();
    for (l, g) in &partial {
        loss += *l;
        grad.scaled_add(scale, g);
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub decay_step: usize,
    pub total_iters: usize,
    pub batch: usize,
    pub momentum: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            decay: 0.5,
            decay_step: 4000,
            total_iters: 50_000,
            batch: 32,
            momentum: 0.9,
        }
    }
}

impl TrainSchedule {
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr0 * self.decay.powi((iter / self.decay_step.max(1)) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: NetParams<T>,
    pub log: Vec<LogRow>,
}

/// Mini-batch SGD with momentum over `count` samples produced on demand by
/// `sample(i) -> (input, label)`. Batches walk a seeded permutation that is
/// redrawn every epoch.
pub fn train_with<T: Real>(
    mut params: NetParams<T>,
    config: &NetConfig,
    schedule: &TrainSchedule,
    count: usize,
    sample: impl Fn(usize) -> (Vec<T>, usize) + Sync,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    if count == 0 {
        return Err(Error::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut velocity = NetParams::zeros(config);
    let momentum: T = lit(schedule.momentum);
    let mut log = Vec::with_capacity(schedule.total_iters);
    for iter in 0..schedule.total_iters {
        let mut picks = Vec::with_capacity(schedule.batch);
        while picks.len() < schedule.batch.max(1) {
            if cursor == count {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        let (inputs, labels): (Vec<Vec<T>>, Vec<usize>) = picks.par_iter().map(|&i| sample(i)).unzip();
        let (loss, grad) = loss_and_grad(&params, config, &inputs, &labels)?;
        let lr = schedule.lr_at(iter);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        for (v, &g) in velocity.values_mut().zip(grad.values()) {
            *v = momentum * *v - lit::<T>(lr) * g;
        }
        params.scaled_add(T::one(), &velocity);
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        log.push(LogRow {
            iter,
            lr,
            loss: loss.to_f64().unwrap(),
        });
        if iter % 500 == 0 {
            log::debug!("iter {iter} lr {lr} loss {}", loss.to_f64().unwrap());
        }
    }
    Ok(TrainOutcome { params, log })
}

pub fn train<T: Real>(
    params: NetParams<T>,
    config: &NetConfig,
    schedule: &TrainSchedule,
    inputs: &[Vec<T>],
    labels: &[usize],
    seed: u64,
) -> Result<TrainOutcome<T>> {
    if inputs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} inputs for {} labels", inputs.len(), labels.len())));
    }
    train_with(params, config, schedule, inputs.len(), |i| (inputs[i].clone(), labels[i]), seed)
}

pub fn write_log(log: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "lr", "loss"])?;
    for row in log {
        w.write_record([row.iter.to_string(), row.lr.to_string(), row.loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Resizes to the network input and lays out channels first, centered on 0.
pub fn image_to_input<T: Real>(img: &RgbImage, side: usize) -> Vec<T> {
    let img = if img.width() == side && img.height() == side {
        img.clone()
    } else {
        img.resize(side, side)
    };
    let mut out = vec![T::zero(); 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let px = img.get(x, y);
            for c in 0..3 {
                out[c * side * side + y * side + x] = lit(px[c] - 0.5);
            }
        }
    }
    out
}

pub fn predict<T: Real>(params: &NetParams<T>, config: &NetConfig, inputs: &[Vec<T>]) -> Result<Vec<usize>> {
    let (logits, _) = forward(params, config, inputs)?;
    Ok(logits
        .iter()
        .map(|z| crate::classification::argmax(&z.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>()))
        .collect())
}

/// L2-normalized FC2 activations.
pub fn extract_codes<T: Real>(params: &NetParams<T>, config: &NetConfig, inputs: &[Vec<T>]) -> Result<Vec<EncodedVector>> {
    inputs
        .par_iter()
        .map(|x| {
            let cache = forward_sample(params, config, x)?;
            let mut v: Vec<f64> = cache.fc2.iter().map(|v| v.to_f64().unwrap()).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|a| *a /= norm);
            }
            Ok(EncodedVector {
                kind: EncodingKind::Dunnet,
                values: v,
            })
        })
        .collect()
}

const PARAMS_MAGIC: &[u8; 4] = b"DNN1";
const PARAMS_VERSION: u16 = 1;

/// Writes `DNN1`, version, the config block, then per layer a tag byte
/// (1 conv, 2 dense), its index, and length-prefixed f32 weights and biases.
pub fn write_params<T: Real>(params: &NetParams<T>, config: &NetConfig, mut w: impl Write) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    w.write_all(&(config.input_side as u32).to_le_bytes())?;
    for c in config.conv_channels {
        w.write_all(&(c as u32).to_le_bytes())?;
    }
    for v in [config.fc1, config.fc2, config.classes] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&config.seed.to_le_bytes())?;
    let tagged = params.convs.iter().enumerate().map(|(i, l)| (1u8, i, l));
    let tagged = tagged.chain(params.fcs.iter().enumerate().map(|(i, l)| (2u8, i, l)));
    for (tag, index, layer) in tagged {
        w.write_all(&[tag, index as u8])?;
        for tensor in [&layer.weights, &layer.bias] {
            w.write_all(&(tensor.len() as u32).to_le_bytes())?;
            for v in tensor.iter() {
                w.write_all(&v.to_f32().unwrap().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_params<T: Real>(mut r: impl Read) -> Result<(NetParams<T>, NetConfig)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Container("truncated network parameters".into()))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != PARAMS_MAGIC {
        return Err(Error::Container("not a network parameter file".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != PARAMS_VERSION {
        return Err(Error::Container(format!("unsupported network version {version}")));
    }
    let mut u32s = [0usize; 10];
    for v in u32s.iter_mut() {
        *v = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    }
    let config = NetConfig {
        input_side: u32s[0],
        conv_channels: u32s[1..7].try_into().unwrap(),
        fc1: u32s[7],
        fc2: u32s[8],
        classes: u32s[9],
        seed: u64::from_le_bytes(take(8)?.try_into().unwrap()),
    };
    config.validate()?;
    let mut params = NetParams::<T>::zeros(&config);
    for (expect_tag, layer) in params
        .convs
        .iter_mut()
        .map(|l| (1u8, l))
        .chain(params.fcs.iter_mut().map(|l| (2u8, l)))
    {
        let head = take(2)?;
        if head[0] != expect_tag {
            return Err(Error::Container(format!("unexpected layer tag {}", head[0])));
        }
        for tensor in [&mut layer.weights, &mut layer.bias] {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            if len != tensor.len() {
                return Err(Error::Container(format!("layer tensor has {len} values, expected {}", tensor.len())));
            }
            for v in tensor.iter_mut() {
                *v = lit(f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64);
            }
        }
    }
    Ok((params, config))
}

pub fn save_params<T: Real>(params: &NetParams<T>, config: &NetConfig, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(params, config, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_params<T: Real>(path: &Path) -> Result<(NetParams<T>, NetConfig)> {
    if !path.is_file() {
        return Err(Error::MissingModel(path.display().to_string()));
    }
    read_params(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> NetConfig {
        NetConfig {
            input_side: 8,
            conv_channels: [2; 6],
            fc1: 6,
            fc2: 5,
            classes: 6,
            seed: 3,
        }
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    /// Perturbed biases keep ReLU units away from their kink.
    fn tiny_params() -> NetParams<f64> {
        let mut p = NetParams::<f64>::init(&tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for l in p.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = 0.1 + 0.2 * rng.random::<f64>());
        }
        p
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    const EPS: f64 = 1e-5;

    #[test]
    fn probabilities_and_uniform_zero_net() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<Vec<f64>> = (0..3).map(|_| random_vec(cfg.input_len(), &mut rng)).collect();
        let (_, probs) = forward(&tiny_params(), &cfg, &batch).unwrap();
        for p in &probs {
            assert_eq!(p.len(), 6);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let (_, probs) = forward(&NetParams::<f64>::zeros(&cfg), &cfg, &batch).unwrap();
        assert!(probs.iter().flatten().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        let (loss, _) = loss_and_grad(&NetParams::<f64>::zeros(&cfg), &cfg, &batch, &[0, 1, 2]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!((6f64.ln() - 1.7918).abs() < 1e-4);
        assert!(matches!(
            forward(&tiny_params(), &cfg, &[vec![0.0; 5]]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn relu_and_one_hot_loss() {
        let mut v = vec![-1.0, 0.5, -0.0, 2.0];
        relu_inplace(&mut v);
        assert_eq!(v, vec![0.0, 0.5, 0.0, 2.0]);
        let (loss, grad) = softmax_ce(&[1000.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| g.abs() < 1e-300));
    }

    #[test]
    fn softmax_ce_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for label in 0..6 {
            let z = random_vec(6, &mut rng).iter().map(|v| v * 4.0).collect::<Vec<_>>();
            let (_, grad) = softmax_ce(&z, label);
            let p = softmax(&z);
            for k in 0..6 {
                let onehot = if k == label { 1.0 } else { 0.0 };
                assert!((grad[k] - (p[k] - onehot)).abs() < 1e-12);
                let mut zp = z.clone();
                zp[k] += EPS;
                let mut zm = z.clone();
                zm[k] -= EPS;
                let fd = (softmax_ce(&zp, label).0 - softmax_ce(&zm, label).0) / (2.0 * EPS);
                assert!(rel_err(grad[k], fd) < 1e-4);
            }
        }
    }

    /// Checks `d(sum r * f(x))` against central differences in both the
    /// layer parameters and the input.
    fn check_layer(
        layer: &Layer<f64>,
        input: &[f64],
        f: impl Fn(&Layer<f64>, &[f64]) -> Vec<f64>,
        back: impl Fn(&Layer<f64>, &[f64], &[f64], &mut Layer<f64>) -> Vec<f64>,
    ) {
        let out = f(layer, input);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = random_vec(out.len(), &mut rng);
        let obj = |l: &Layer<f64>, x: &[f64]| f(l, x).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        let mut grad = Layer::zeros(layer.inputs, layer.outputs, layer.weights.len() / (layer.inputs * layer.outputs));
        let gin = back(layer, input, &r, &mut grad);
        let mut probe = layer.clone();
        let analytic: Vec<f64> = grad.values().copied().collect();
        for (k, a) in analytic.into_iter().enumerate() {
            let orig = *probe.values_mut().nth(k).unwrap();
            *probe.values_mut().nth(k).unwrap() = orig + EPS;
            let up = obj(&probe, input);
            *probe.values_mut().nth(k).unwrap() = orig - EPS;
            let down = obj(&probe, input);
            *probe.values_mut().nth(k).unwrap() = orig;
            assert!(rel_err(a, (up - down) / (2.0 * EPS)) < 1e-4, "param {k}");
        }
        for k in 0..input.len() {
            let mut x = input.to_vec();
            x[k] += EPS;
            let up = obj(layer, &x);
            x[k] -= 2.0 * EPS;
            let down = obj(layer, &x);
            assert!(rel_err(gin[k], (up - down) / (2.0 * EPS)) < 1e-4, "input {k}");
        }
    }

    #[test]
    fn conv_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = Layer {
            weights: random_vec(3 * 2 * 9, &mut rng),
            bias: random_vec(2, &mut rng),
            inputs: 3,
            outputs: 2,
        };
        let input = random_vec(3 * 5 * 5, &mut rng);
        check_layer(
            &layer,
            &input,
            |l, x| conv3x3_forward(x, 5, l),
            |l, x, g, grad| conv3x3_backward(x, 5, l, g, grad, true).unwrap(),
        );
    }

    #[test]
    fn fc_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Layer {
            weights: random_vec(4 * 7, &mut rng),
            bias: random_vec(4, &mut rng),
            inputs: 7,
            outputs: 4,
        };
        let input = random_vec(7, &mut rng);
        check_layer(&layer, &input, |l, x| fc_forward(x, l), |l, x, g, grad| fc_backward(x, l, g, grad));
    }

    #[test]
    fn pool_gradient_check_and_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_vec(2 * 6 * 6, &mut rng);
        let (out, arg) = maxpool_forward(&input, 2, 6);
        assert_eq!(out.len(), 2 * 9);
        let r = random_vec(out.len(), &mut rng);
        let gin = maxpool_backward(&r, &arg, input.len());
        assert!((gin.iter().sum::<f64>() - r.iter().sum::<f64>()).abs() < 1e-12);
        // gradient lands only on argmax positions
        for (i, &g) in gin.iter().enumerate() {
            if !arg.contains(&i) {
                assert_eq!(g, 0.0);
            }
        }
        for k in 0..input.len() {
            let obj = |x: &[f64]| maxpool_forward(x, 2, 6).0.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
            let mut x = input.clone();
            x[k] += EPS;
            let up = obj(&x);
            x[k] -= 2.0 * EPS;
            let down = obj(&x);
            assert!(rel_err(gin[k], (up - down) / (2.0 * EPS)) < 1e-4);
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let cfg = tiny();
        let params = tiny_params();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<Vec<f64>> = (0..2).map(|_| random_vec(cfg.input_len(), &mut rng)).collect();
        let labels = [1, 4];
        let (_, grad) = loss_and_grad(&params, &cfg, &batch, &labels).unwrap();
        let analytic: Vec<f64> = grad.values().copied().collect();
        let mut probe = params.clone();
        let loss = |p: &NetParams<f64>| loss_and_grad(p, &cfg, &batch, &labels).unwrap().0;
        let mut worst: f64 = 0.0;
        for (k, a) in analytic.iter().enumerate() {
            let orig = *probe.values_mut().nth(k).unwrap();
            *probe.values_mut().nth(k).unwrap() = orig + EPS;
            let up = loss(&probe);
            *probe.values_mut().nth(k).unwrap() = orig - EPS;
            let down = loss(&probe);
            *probe.values_mut().nth(k).unwrap() = orig;
            worst = worst.max(rel_err(*a, (up - down) / (2.0 * EPS)));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
        assert_eq!(analytic.len(), params.len());
    }

    #[test]
    fn schedule_values() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr_at(0), 0.001);
        assert_eq!(s.lr_at(3999), 0.001);
        assert_eq!(s.lr_at(4000), 0.0005);
        assert_eq!(s.lr_at(8000), 0.00025);
        assert!(s.lr_at(49_999) > 0.0);
    }

    #[test]
    fn single_sample_loss_decreases() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_vec(cfg.input_len(), &mut rng);
        let schedule = TrainSchedule {
            lr0: 0.01,
            total_iters: 50,
            batch: 1,
            ..TrainSchedule::default()
        };
        let out = train(tiny_params(), &cfg, &schedule, &[x], &[2], 0).unwrap();
        let ups = out.log.windows(2).filter(|w| w[1].loss > w[0].loss).count();
        assert!(ups as f64 <= 0.05 * 50.0, "{ups} increases");
        assert!(out.log.last().unwrap().loss < out.log[0].loss);
    }

    #[test]
    fn codes_and_determinism() {
        let cfg = tiny();
        let params = tiny_params();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch: Vec<Vec<f64>> = (0..4).map(|_| random_vec(cfg.input_len(), &mut rng)).collect();
        let codes = extract_codes(&params, &cfg, &batch).unwrap();
        for c in &codes {
            assert_eq!(c.values.len(), 5);
            assert!(c.values.iter().all(|&v| v >= 0.0));
            let n = c.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
        }
        let a = forward(&params, &cfg, &batch).unwrap();
        let b = forward(&params, &cfg, &batch).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(NetConfig::default().fc2, 256);
    }

    #[test]
    fn params_file_round_trip() {
        let cfg = tiny();
        let p = NetParams::<f32>::init(&cfg).unwrap();
        let mut buf = Vec::new();
        write_params(&p, &cfg, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"DNN1");
        let (q, cfg2) = read_params::<f32>(&buf[..]).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(q, p);
        assert!(read_params::<f32>(&buf[..buf.len() - 1]).is_err());
    }
}
