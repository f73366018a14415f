//! Convolutional encoder mapping a sample covariance to decoder latents.
//!
//! Input is the `M×M` covariance split into two real channels (real and
//! imaginary parts). A stack of `3×3` convolutions with ReLU is followed by
//! a hidden fully-connected layer (ReLU) and a linear head whose outputs are
//! the pre-activations of `{θ, Λ, L, σ²}`.
//!
//! Parameters live in one flat vector; [`EncoderArchitecture::manifest`]
//! fixes the layout and is also the order used on disk.

mod adam;
mod format;
mod train;

pub use adam::{Adam, AdamConfig};
pub use format::{read_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{train, train_with_observer, BatchStats, LossTrace, TrainConfig, TrainOutcome};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::array::LatentParams;
use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;
use crate::objective::{LatentGradient, PreActivation};
use crate::scalar::Real;

/// Assumed structure of the signal covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovarianceMode {
    /// `L̂ = I`; no factor outputs.
    Diag,
    /// Free strictly-lower entries of `L̂`.
    Full,
}

impl CovarianceMode {
    pub fn is_full(self) -> bool {
        matches!(self, CovarianceMode::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            CovarianceMode::Diag => "diag",
            CovarianceMode::Full => "full",
        }
    }
}

const INPUT_CHANNELS: usize = 2;

/// Layer sizes of the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderArchitecture {
    /// `M`.
    pub input_side: usize,
    /// `K`.
    pub sources: usize,
    pub covariance_mode: CovarianceMode,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub paddings: Vec<usize>,
    pub hidden: usize,
}

/// One named block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl EncoderArchitecture {
    /// Four conv layers with the given channels, strides (1, 2, 2, 2) and
    /// paddings (1, 1, 1, 0).
    pub fn with_channels(input_side: usize, sources: usize, mode: CovarianceMode, channels: [usize; 4], hidden: usize) -> Self {
        Self {
            input_side,
            sources,
            covariance_mode: mode,
            conv_channels: channels.to_vec(),
            kernel: 3,
            strides: vec![1, 2, 2, 2],
            paddings: vec![1, 1, 1, 0],
            hidden,
        }
    }

    /// Full-size network: channels 64/128/256/512, hidden 512.
    pub fn full_scale(input_side: usize, sources: usize, mode: CovarianceMode) -> Self {
        Self::with_channels(input_side, sources, mode, [64, 128, 256, 512], 512)
    }

    /// Reduced network for quick runs: channels 16/32/64/128, hidden 512.
    pub fn desk(input_side: usize, sources: usize, mode: CovarianceMode) -> Self {
        Self::with_channels(input_side, sources, mode, [16, 32, 64, 128], 512)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.conv_channels.len();
        if n == 0 || self.strides.len() != n || self.paddings.len() != n {
            return Err(Error::Config(format!(
                "conv layer lists disagree: {} channels, {} strides, {} paddings",
                n,
                self.strides.len(),
                self.paddings.len()
            )));
        }
        if self.sources == 0 || self.input_side < 2 || self.kernel == 0 || self.hidden == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.conv_channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("conv channels and strides must be positive".into()));
        }
        let mut side = self.input_side;
        for (i, (&s, &p)) in self.strides.iter().zip(&self.paddings).enumerate() {
            if side + 2 * p < self.kernel {
                return Err(Error::Config(format!(
                    "conv layer {i}: input side {side} with padding {p} is smaller than the kernel"
                )));
            }
            side = (side + 2 * p - self.kernel) / s + 1;
        }
        Ok(())
    }

    /// Spatial side length after each conv layer, starting with the input.
    pub fn spatial_sides(&self) -> Vec<usize> {
        let mut sides = vec![self.input_side];
        let mut side = self.input_side;
        for (&s, &p) in self.strides.iter().zip(&self.paddings) {
            side = (side + 2 * p - self.kernel) / s + 1;
            sides.push(side);
        }
        sides
    }

    pub fn flat_features(&self) -> usize {
        let side = *self.spatial_sides().last().expect("at least the input side");
        self.conv_channels.last().copied().unwrap_or(INPUT_CHANNELS) * side * side
    }

    /// `2K + 1`, plus `K(K−1)` for a full factor.
    pub fn head_dim(&self) -> usize {
        PreActivation::<f64>::dimension(self.sources, self.covariance_mode.is_full())
    }

    pub fn manifest(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let b = ParamBlock { name, offset, shape };
            offset += b.len();
            blocks.push(b);
        };
        let mut cin = INPUT_CHANNELS;
        for (i, &cout) in self.conv_channels.iter().enumerate() {
            push(format!("conv{i}.weight"), vec![cout, cin, self.kernel, self.kernel]);
            push(format!("conv{i}.bias"), vec![cout]);
            cin = cout;
        }
        push("hidden.weight".into(), vec![self.hidden, self.flat_features()]);
        push("hidden.bias".into(), vec![self.hidden]);
        push("head.weight".into(), vec![self.head_dim(), self.hidden]);
        push("head.bias".into(), vec![self.head_dim()]);
        blocks
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let mut cin = INPUT_CHANNELS;
        let mut total = 0;
        for &cout in &self.conv_channels {
            total += cout * cin * k2 + cout;
            cin = cout;
        }
        total + self.hidden * self.flat_features() + self.hidden + self.head_dim() * self.hidden + self.head_dim()
    }
}

/// Encoder architecture plus its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    architecture: EncoderArchitecture,
    params: Vec<T>,
    /// Bumped on every mutable access to `params`; ties caches to a state.
    generation: u64,
}

impl<T: Real> EncoderModel<T> {
    pub fn from_params(architecture: EncoderArchitecture, params: Vec<T>) -> Result<Self> {
        architecture.validate()?;
        if params.len() != architecture.parameter_count() {
            return Err(Error::Config(format!(
                "{} parameters supplied, architecture needs {}",
                params.len(),
                architecture.parameter_count()
            )));
        }
        Ok(Self {
            architecture,
            params,
            generation: 0,
        })
    }

    pub fn zeros(architecture: EncoderArchitecture) -> Result<Self> {
        let n = architecture.parameter_count();
        Self::from_params(architecture, vec![T::zero(); n])
    }

    pub fn architecture(&self) -> &EncoderArchitecture {
        &self.architecture
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        self.generation += 1;
        &mut self.params
    }

    pub fn into_params(self) -> Vec<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel {
            architecture: self.architecture.clone(),
            params: self.params.iter().map(|p| U::lit(p.to_f64_lossy())).collect(),
            generation: 0,
        }
    }
}

/// He initialization: weights `N(0, 2/fan_in)`, biases zero.
pub fn init_params<T: Real, R: Rng + ?Sized>(architecture: &EncoderArchitecture, rng: &mut R) -> Result<EncoderModel<T>> {
    architecture.validate()?;
    let mut params = vec![T::zero(); architecture.parameter_count()];
    for block in architecture.manifest() {
        if !block.name.ends_with(".weight") {
            continue;
        }
        let fan_in: usize = block.shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for p in &mut params[block.range()] {
            *p = T::lit(normal.sample(rng));
        }
    }
    EncoderModel::from_params(architecture.clone(), params)
}

/// Activations recorded by [`encoder_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    generation: u64,
    param_count: usize,
    /// Unfolded input patches of each conv layer, `[position][patch]`.
    patches: Vec<Vec<T>>,
    /// Post-ReLU output of each conv layer.
    conv_outputs: Vec<Vec<T>>,
    /// Post-ReLU hidden layer.
    hidden: Vec<T>,
    /// Raw head outputs (pre-activation latent).
    pub head: Vec<T>,
}

/// Four-lane dot product; lets the compiler vectorize despite strict FP.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += a x`.
#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

struct ConvShape {
    cin: usize,
    cout: usize,
    side_in: usize,
    side_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl ConvShape {
    fn layers(arch: &EncoderArchitecture) -> Vec<ConvShape> {
        let sides = arch.spatial_sides();
        let mut cin = INPUT_CHANNELS;
        arch.conv_channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let s = ConvShape {
                    cin,
                    cout,
                    side_in: sides[i],
                    side_out: sides[i + 1],
                    kernel: arch.kernel,
                    stride: arch.strides[i],
                    padding: arch.paddings[i],
                };
                cin = cout;
                s
            })
            .collect()
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// Input offset read by output `o` at kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&i| i < self.side_in)
    }

    /// Patch `j = (ci·k + kh)·k + kw` of output position `p`, zero-padded;
    /// the same order as the weight tensor `[co][ci][kh][kw]`.
    fn unfold<T: Real>(&self, input: &[T]) -> Vec<T> {
        let (si, so, k) = (self.side_in, self.side_out, self.kernel);
        let j_len = self.patch_len();
        let mut cols = vec![T::zero(); so * so * j_len];
        for oh in 0..so {
            for ow in 0..so {
                let patch = &mut cols[(oh * so + ow) * j_len..(oh * so + ow + 1) * j_len];
                for ci in 0..self.cin {
                    for kh in 0..k {
                        let Some(ih) = self.source(oh, kh) else { continue };
                        for kw in 0..k {
                            if let Some(iw) = self.source(ow, kw) {
                                patch[(ci * k + kh) * k + kw] = input[(ci * si + ih) * si + iw];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::unfold`].
    fn fold<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let (si, so, k) = (self.side_in, self.side_out, self.kernel);
        let j_len = self.patch_len();
        let mut image = vec![T::zero(); self.cin * si * si];
        for oh in 0..so {
            for ow in 0..so {
                let patch = &cols[(oh * so + ow) * j_len..(oh * so + ow + 1) * j_len];
                for ci in 0..self.cin {
                    for kh in 0..k {
                        let Some(ih) = self.source(oh, kh) else { continue };
                        for kw in 0..k {
                            if let Some(iw) = self.source(ow, kw) {
                                image[(ci * si + ih) * si + iw] += patch[(ci * k + kh) * k + kw];
                            }
                        }
                    }
                }
            }
        }
        image
    }

    /// Post-ReLU output `[co][oh][ow]` from unfolded patches.
    fn forward<T: Real>(&self, weight: &[T], bias: &[T], cols: &[T]) -> Vec<T> {
        let positions = self.side_out * self.side_out;
        let j_len = self.patch_len();
        let mut out = vec![T::zero(); self.cout * positions];
        for co in 0..self.cout {
            let w = &weight[co * j_len..(co + 1) * j_len];
            for p in 0..positions {
                let v = bias[co] + dot(w, &cols[p * j_len..(p + 1) * j_len]);
                out[co * positions + p] = v.max(T::zero());
            }
        }
        out
    }

    /// `grad_out` is with respect to the post-ReLU `output`. Accumulates
    /// weight/bias gradients; returns the input gradient when requested.
    #[allow(clippy::too_many_arguments)]
    fn backward<T: Real>(
        &self,
        weight: &[T],
        cols: &[T],
        output: &[T],
        grad_out: &[T],
        grad_weight: &mut [T],
        grad_bias: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let positions = self.side_out * self.side_out;
        let j_len = self.patch_len();
        let mut grad_cols = want_input_grad.then(|| vec![T::zero(); positions * j_len]);
        for co in 0..self.cout {
            let w = &weight[co * j_len..(co + 1) * j_len];
            let gw = &mut grad_weight[co * j_len..(co + 1) * j_len];
            for p in 0..positions {
                let idx = co * positions + p;
                if !(output[idx] > T::zero()) || grad_out[idx].is_zero() {
                    continue;
                }
                let g = grad_out[idx];
                grad_bias[co] += g;
                axpy(g, &cols[p * j_len..(p + 1) * j_len], gw);
                if let Some(gc) = grad_cols.as_mut() {
                    axpy(g, w, &mut gc[p * j_len..(p + 1) * j_len]);
                }
            }
        }
        grad_cols.map(|gc| self.fold(&gc))
    }
}

fn dense_forward<T: Real>(weight: &[T], bias: &[T], input: &[T], relu: bool) -> Vec<T> {
    let n_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let v = b + dot(&weight[o * n_in..(o + 1) * n_in], input);
            if relu {
                v.max(T::zero())
            } else {
                v
            }
        })
        .collect()
}

/// Accumulates gradients of `y = W x + b` given `dy`; returns `dx`.
fn dense_backward<T: Real>(weight: &[T], input: &[T], dy: &[T], grad_weight: &mut [T], grad_bias: &mut [T]) -> Vec<T> {
    let n_in = input.len();
    let mut dx = vec![T::zero(); n_in];
    for (o, &g) in dy.iter().enumerate() {
        if g.is_zero() {
            continue;
        }
        grad_bias[o] += g;
        axpy(g, input, &mut grad_weight[o * n_in..(o + 1) * n_in]);
        axpy(g, &weight[o * n_in..(o + 1) * n_in], &mut dx);
    }
    dx
}

/// Two-channel `[Re Ĉ, Im Ĉ]` input tensor.
fn input_tensor<T: Real>(sample_cov: &ComplexMatrix<T>) -> Vec<T> {
    let n = sample_cov.rows() * sample_cov.cols();
    let mut x = Vec::with_capacity(2 * n);
    x.extend(sample_cov.as_slice().iter().map(|z| z.re));
    x.extend(sample_cov.as_slice().iter().map(|z| z.im));
    x
}

/// Runs the encoder and the head activations.
pub fn encoder_forward<T: Real>(
    model: &EncoderModel<T>,
    sample_cov: &ComplexMatrix<T>,
) -> Result<(LatentParams<T>, ForwardCache<T>)> {
    let arch = &model.architecture;
    if sample_cov.rows() != arch.input_side || sample_cov.cols() != arch.input_side {
        return Err(Error::Config(format!(
            "encoder expects a {m}x{m} covariance, got {}x{}",
            sample_cov.rows(),
            sample_cov.cols(),
            m = arch.input_side
        )));
    }
    let manifest = arch.manifest();
    let p = &model.params;
    let mut x = input_tensor(sample_cov);
    let layers = arch.conv_channels.len();
    let mut patches = Vec::with_capacity(layers);
    let mut conv_outputs = Vec::with_capacity(layers);
    for (i, shape) in ConvShape::layers(arch).iter().enumerate() {
        let cols = shape.unfold(&x);
        x = shape.forward(&p[manifest[2 * i].range()], &p[manifest[2 * i + 1].range()], &cols);
        patches.push(cols);
        conv_outputs.push(x.clone());
    }
    let nb = manifest.len();
    let hidden = dense_forward(&p[manifest[nb - 4].range()], &p[manifest[nb - 3].range()], &x, true);
    let head = dense_forward(&p[manifest[nb - 2].range()], &p[manifest[nb - 1].range()], &hidden, false);
    let pre = PreActivation::from_flat(&head, arch.sources, arch.covariance_mode.is_full())?;
    let latent = pre.to_latent();
    Ok((
        latent,
        ForwardCache {
            generation: model.generation,
            param_count: p.len(),
            patches,
            conv_outputs,
            hidden,
            head,
        },
    ))
}

/// Backpropagates a head (pre-activation) gradient to a flat parameter
/// gradient. In diagonal mode the factor block of `head_gradient` is ignored.
pub fn encoder_backward<T: Real>(
    model: &EncoderModel<T>,
    cache: &ForwardCache<T>,
    head_gradient: &LatentGradient<T>,
) -> Result<Vec<T>> {
    let mut grad = vec![T::zero(); model.params.len()];
    encoder_backward_into(model, cache, head_gradient, &mut grad)?;
    Ok(grad)
}

/// As [`encoder_backward`], accumulating into `grad`.
pub fn encoder_backward_into<T: Real>(
    model: &EncoderModel<T>,
    cache: &ForwardCache<T>,
    head_gradient: &LatentGradient<T>,
    grad: &mut [T],
) -> Result<()> {
    let arch = &model.architecture;
    if cache.generation != model.generation || cache.param_count != model.params.len() {
        return Err(Error::StaleCache(format!(
            "cache from parameter generation {}, model is at {}",
            cache.generation, model.generation
        )));
    }
    if grad.len() != model.params.len() {
        return Err(Error::Dimension("gradient buffer length".into()));
    }
    let d_head = head_gradient.to_flat(arch.covariance_mode.is_full());
    if d_head.len() != arch.head_dim() || head_gradient.d_angles.len() != arch.sources {
        return Err(Error::Dimension(format!(
            "head gradient of length {} for head dimension {}",
            d_head.len(),
            arch.head_dim()
        )));
    }
    let manifest = arch.manifest();
    let p = &model.params;
    let nb = manifest.len();

    let (gw, gb) = split_block(grad, &manifest[nb - 2], &manifest[nb - 1]);
    let d_hidden = dense_backward(&p[manifest[nb - 2].range()], &cache.hidden, &d_head, gw, gb);
    let d_hidden: Vec<T> = d_hidden
        .iter()
        .zip(&cache.hidden)
        .map(|(&g, &h)| if h > T::zero() { g } else { T::zero() })
        .collect();
    let flat = cache.conv_outputs.last().expect("conv output");
    let (gw, gb) = split_block(grad, &manifest[nb - 4], &manifest[nb - 3]);
    let mut d_out = dense_backward(&p[manifest[nb - 4].range()], flat, &d_hidden, gw, gb);

    let shapes = ConvShape::layers(arch);
    for i in (0..shapes.len()).rev() {
        let (gw, gb) = split_block(grad, &manifest[2 * i], &manifest[2 * i + 1]);
        let d_in = shapes[i].backward(
            &p[manifest[2 * i].range()],
            &cache.patches[i],
            &cache.conv_outputs[i],
            &d_out,
            gw,
            gb,
            i > 0,
        );
        if let Some(d) = d_in {
            d_out = d;
        }
    }
    Ok(())
}

/// Disjoint mutable views of a weight block and the bias block right after it.
fn split_block<'a, T>(grad: &'a mut [T], weight: &ParamBlock, bias: &ParamBlock) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(weight.offset + weight.len(), bias.offset);
    let (w, b) = grad[weight.offset..bias.offset + bias.len()].split_at_mut(weight.len());
    (w, b)
}
