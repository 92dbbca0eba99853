//! First-principles differentiable kernels: 3D convolution, non-overlapping
//! max-pooling with argmax, activations, softmax, and the classification
//! loss.
//!
//! Convolution is implemented as cross-correlation; true convolution is
//! obtained by pairing it with [`flip_kernel`]. Every dot product accumulates
//! in `f64` with a fixed reduction order, so results are bit-reproducible and
//! the `f64` storage mode is exact.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Shape4, Volume};

/// Weights and biases of one convolutional bank: `K` output maps over `J`
/// input channels with cubic `n`×`n`×`n` kernels, one bias per output map.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<T = f32> {
    out_maps: usize,
    in_channels: usize,
    size: usize,
    weights: Vec<T>,
    biases: Vec<T>,
}

impl<T: Scalar> KernelBank<T> {
    pub fn new(
        out_maps: usize,
        in_channels: usize,
        size: usize,
        weights: Vec<T>,
        biases: Vec<T>,
    ) -> Result<Self> {
        if out_maps == 0 || in_channels == 0 || size == 0 {
            return Err(Error::InvalidParam("kernel bank dims must be >= 1".into()));
        }
        let expected = out_maps * in_channels * size * size * size;
        if weights.len() != expected {
            return Err(Error::LengthMismatch {
                left: expected,
                right: weights.len(),
            });
        }
        if biases.len() != out_maps {
            return Err(Error::LengthMismatch {
                left: out_maps,
                right: biases.len(),
            });
        }
        if let Some(index) = weights
            .iter()
            .chain(biases.iter())
            .position(|v| !v.is_finite_scalar())
        {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            out_maps,
            in_channels,
            size,
            weights,
            biases,
        })
    }

    pub fn zeros(out_maps: usize, in_channels: usize, size: usize) -> Result<Self> {
        Self::new(
            out_maps,
            in_channels,
            size,
            vec![T::zero(); out_maps * in_channels * size * size * size],
            vec![T::zero(); out_maps],
        )
    }

    /// Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero biases.
    pub fn glorot(out_maps: usize, in_channels: usize, size: usize, rng: &mut impl Rng) -> Result<Self> {
        let n3 = size * size * size;
        let fan_in = in_channels * n3;
        let fan_out = out_maps * n3;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..out_maps * in_channels * n3)
            .map(|_| T::from_f64(rng.random_range(-limit..limit)))
            .collect();
        Self::new(out_maps, in_channels, size, weights, vec![T::zero(); out_maps])
    }

    pub fn out_maps(&self) -> usize {
        self.out_maps
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[T] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [T] {
        &mut self.biases
    }

    #[inline]
    pub fn weight_index(&self, k: usize, j: usize, dz: usize, dy: usize, dx: usize) -> usize {
        (((k * self.in_channels + j) * self.size + dz) * self.size + dy) * self.size + dx
    }

    pub fn map_to<U: Scalar>(&self) -> KernelBank<U> {
        KernelBank {
            out_maps: self.out_maps,
            in_channels: self.in_channels,
            size: self.size,
            weights: self.weights.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            biases: self.biases.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Point nonlinearity applied after each dot product.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Relu => u.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-u).exp()),
            Activation::Linear => u,
        }
    }

    /// Exact derivative at the pre-activation value (ReLU uses the
    /// subgradient 0 at the kink).
    #[inline]
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-u).exp());
                s * (1.0 - s)
            }
            Activation::Linear => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Linear => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// Spatial padding of the convolution window.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    /// Zero-fill the surround so output extents equal input extents.
    /// Requires an odd kernel size.
    Same,
    /// No padding; each output extent shrinks by `n - 1`.
    Valid,
}

fn conv_output_shape(x: Shape4, bank_size: usize, out_maps: usize, pad: Padding) -> Result<Shape4> {
    match pad {
        Padding::Same => {
            if bank_size % 2 == 0 {
                return Err(Error::InvalidParam(
                    "same padding requires an odd kernel size".into(),
                ));
            }
            Shape4::new(out_maps, x.depth, x.height, x.width)
        }
        Padding::Valid => {
            if x.depth < bank_size || x.height < bank_size || x.width < bank_size {
                return Err(Error::InvalidParam(format!(
                    "valid padding needs every spatial extent >= {bank_size}, input is {x}"
                )));
            }
            Shape4::new(
                out_maps,
                x.depth - bank_size + 1,
                x.height - bank_size + 1,
                x.width - bank_size + 1,
            )
        }
    }
}

/// Pre-activation sums of the convolution, in `f64`.
fn conv3d_preact<T: Scalar>(
    x: &Volume<T>,
    bank: &KernelBank<T>,
    pad: Padding,
) -> Result<(Shape4, Vec<f64>)> {
    let xs = x.shape();
    if xs.channels != bank.in_channels {
        return Err(Error::ChannelMismatch {
            expected: bank.in_channels,
            found: xs.channels,
        });
    }
    let out_shape = conv_output_shape(xs, bank.size, bank.out_maps, pad)?;
    let offset = match pad {
        Padding::Same => (bank.size - 1) / 2,
        Padding::Valid => 0,
    };

    let n = bank.size;
    let (depth, height, width) = xs.spatial();
    let xdata = x.data();
    let wdata = &bank.weights;
    let mut pre = vec![0.0f64; out_shape.elements()];

    let mut out_idx = 0usize;
    for k in 0..bank.out_maps {
        let bias = bank.biases[k].to_f64();
        for oz in 0..out_shape.depth {
            let dz_lo = offset.saturating_sub(oz);
            let dz_hi = (depth + offset - oz).min(n);
            for oy in 0..out_shape.height {
                let dy_lo = offset.saturating_sub(oy);
                let dy_hi = (height + offset - oy).min(n);
                for ox in 0..out_shape.width {
                    let dx_lo = offset.saturating_sub(ox);
                    let dx_hi = (width + offset - ox).min(n);
                    let mut acc = bias;
                    for j in 0..bank.in_channels {
                        for dz in dz_lo..dz_hi {
                            let iz = oz + dz - offset;
                            for dy in dy_lo..dy_hi {
                                let iy = oy + dy - offset;
                                let w_row = bank.weight_index(k, j, dz, dy, dx_lo);
                                let x_row = xs.index(j, iz, iy, ox + dx_lo - offset);
                                for (w, xv) in wdata[w_row..w_row + (dx_hi - dx_lo)]
                                    .iter()
                                    .zip(&xdata[x_row..x_row + (dx_hi - dx_lo)])
                                {
                                    acc += w.to_f64() * xv.to_f64();
                                }
                            }
                        }
                    }
                    pre[out_idx] = acc;
                    out_idx += 1;
                }
            }
        }
    }
    Ok((out_shape, pre))
}

pub(crate) struct ConvForward<T> {
    pub out: Volume<T>,
    pub preact: Vec<f64>,
}

pub(crate) fn conv3d_forward_full<T: Scalar>(
    x: &Volume<T>,
    bank: &KernelBank<T>,
    act: Activation,
    pad: Padding,
) -> Result<ConvForward<T>> {
    let (shape, preact) = conv3d_preact(x, bank, pad)?;
    let data = preact.iter().map(|&u| T::from_f64(act.apply(u))).collect();
    Ok(ConvForward {
        out: Volume::from_vec(shape, data)?,
        preact,
    })
}

/// Moving-window 3D convolution over all input channels followed by the
/// activation; one bias per output map.
pub fn conv3d_forward<T: Scalar>(
    x: &Volume<T>,
    bank: &KernelBank<T>,
    act: Activation,
    pad: Padding,
) -> Result<Volume<T>> {
    Ok(conv3d_forward_full(x, bank, act, pad)?.out)
}

/// Gradients of the convolution with respect to its input, weights, and
/// biases. Weight gradients share the bank's storage layout.
#[derive(Clone, Debug)]
pub struct ConvGradients<T> {
    pub input: Volume<T>,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

/// `f64` gradient buffers of one convolution, used by training loops so
/// batch accumulation never rounds through the storage type.
pub(crate) struct ConvGradientsRaw {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

pub(crate) fn conv3d_backward_raw<T: Scalar>(
    x: &Volume<T>,
    bank: &KernelBank<T>,
    act: Activation,
    pad: Padding,
    preact: &[f64],
    upstream: &[f64],
) -> Result<ConvGradientsRaw> {
    let xs = x.shape();
    let out_shape = conv_output_shape(xs, bank.size, bank.out_maps, pad)?;
    if upstream.len() != out_shape.elements() {
        return Err(Error::LengthMismatch {
            left: out_shape.elements(),
            right: upstream.len(),
        });
    }
    let offset = match pad {
        Padding::Same => (bank.size - 1) / 2,
        Padding::Valid => 0,
    };

    let n = bank.size;
    let (depth, height, width) = xs.spatial();
    let xdata = x.data();
    let wdata = &bank.weights;

    // delta = upstream ⊙ act'(pre)
    let delta: Vec<f64> = upstream
        .iter()
        .zip(preact)
        .map(|(u, &p)| u * act.derivative(p))
        .collect();

    let mut grad_w = vec![0.0f64; bank.weights.len()];
    let mut grad_b = vec![0.0f64; bank.out_maps];
    let mut grad_x = vec![0.0f64; xs.elements()];

    let mut out_idx = 0usize;
    for k in 0..bank.out_maps {
        for oz in 0..out_shape.depth {
            let dz_lo = offset.saturating_sub(oz);
            let dz_hi = (depth + offset - oz).min(n);
            for oy in 0..out_shape.height {
                let dy_lo = offset.saturating_sub(oy);
                let dy_hi = (height + offset - oy).min(n);
                for ox in 0..out_shape.width {
                    let d = delta[out_idx];
                    out_idx += 1;
                    if d == 0.0 {
                        continue;
                    }
                    grad_b[k] += d;
                    let dx_lo = offset.saturating_sub(ox);
                    let dx_hi = (width + offset - ox).min(n);
                    for j in 0..bank.in_channels {
                        for dz in dz_lo..dz_hi {
                            let iz = oz + dz - offset;
                            for dy in dy_lo..dy_hi {
                                let iy = oy + dy - offset;
                                let w_row = bank.weight_index(k, j, dz, dy, dx_lo);
                                let x_row = xs.index(j, iz, iy, ox + dx_lo - offset);
                                for step in 0..dx_hi - dx_lo {
                                    grad_w[w_row + step] += d * xdata[x_row + step].to_f64();
                                    grad_x[x_row + step] += d * wdata[w_row + step].to_f64();
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGradientsRaw {
        input: grad_x,
        weights: grad_w,
        biases: grad_b,
    })
}

/// Exact gradients of `conv3d_forward` given the upstream gradient of its
/// output, chained through the activation.
pub fn conv3d_backward<T: Scalar>(
    x: &Volume<T>,
    bank: &KernelBank<T>,
    act: Activation,
    pad: Padding,
    upstream: &Volume<T>,
) -> Result<ConvGradients<T>> {
    let (out_shape, preact) = conv3d_preact(x, bank, pad)?;
    if upstream.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            expected: out_shape,
            found: upstream.shape(),
        });
    }
    let up: Vec<f64> = upstream.data().iter().map(|u| u.to_f64()).collect();
    let raw = conv3d_backward_raw(x, bank, act, pad, &preact, &up)?;
    Ok(ConvGradients {
        input: Volume::from_vec(x.shape(), raw.input.into_iter().map(T::from_f64).collect())?,
        weights: raw.weights.into_iter().map(T::from_f64).collect(),
        biases: raw.biases.into_iter().map(T::from_f64).collect(),
    })
}

/// Ties a decoder bank to an encoder bank: every cubic slab is reversed
/// along all three spatial axes and the in-channel/out-map roles are
/// transposed, so a `K`-map encoder over `J` channels becomes a `J`-map
/// decoder over `K` channels. Biases are not carried over; the caller
/// supplies independent decoder biases.
pub fn flip_kernel<T: Scalar>(bank: &KernelBank<T>) -> KernelBank<T> {
    let n = bank.size;
    let mut weights = vec![T::zero(); bank.weights.len()];
    let flipped_channels = bank.out_maps;
    let flipped_maps = bank.in_channels;
    for j in 0..flipped_maps {
        for k in 0..flipped_channels {
            for dz in 0..n {
                for dy in 0..n {
                    for dx in 0..n {
                        let src = bank.weight_index(k, j, n - 1 - dz, n - 1 - dy, n - 1 - dx);
                        let dst = (((j * flipped_channels + k) * n + dz) * n + dy) * n + dx;
                        weights[dst] = bank.weights[src];
                    }
                }
            }
        }
    }
    KernelBank {
        out_maps: flipped_maps,
        in_channels: flipped_channels,
        size: n,
        weights,
        biases: vec![T::zero(); flipped_maps],
    }
}

/// Output of max pooling plus the flat input index of each block maximum.
#[derive(Clone, Debug)]
pub struct PoolRecord<T = f32> {
    pub output: Volume<T>,
    pub argmax: Vec<usize>,
    pub input_shape: Shape4,
}

/// Non-overlapping max pooling over `size`³ blocks per channel. Odd extents
/// are padded on the high side, so output extents are `ceil(extent / size)`;
/// padding voxels never win the max, which keeps every recorded argmax
/// inside the real input. Ties resolve to the lowest flat index.
pub fn maxpool3d_forward<T: Scalar>(x: &Volume<T>, size: usize) -> Result<PoolRecord<T>> {
    if size == 0 {
        return Err(Error::InvalidParam("pool size must be >= 1".into()));
    }
    let xs = x.shape();
    let out_shape = Shape4::new(
        xs.channels,
        xs.depth.div_ceil(size),
        xs.height.div_ceil(size),
        xs.width.div_ceil(size),
    )?;
    let xdata = x.data();
    let mut out = Vec::with_capacity(out_shape.elements());
    let mut argmax = Vec::with_capacity(out_shape.elements());
    for c in 0..xs.channels {
        for oz in 0..out_shape.depth {
            let z_hi = ((oz + 1) * size).min(xs.depth);
            for oy in 0..out_shape.height {
                let y_hi = ((oy + 1) * size).min(xs.height);
                for ox in 0..out_shape.width {
                    let x_hi = ((ox + 1) * size).min(xs.width);
                    let mut best_idx = usize::MAX;
                    let mut best = f64::NEG_INFINITY;
                    for z in oz * size..z_hi {
                        for y in oy * size..y_hi {
                            for xi in ox * size..x_hi {
                                let idx = xs.index(c, z, y, xi);
                                let v = xdata[idx].to_f64();
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(xdata[best_idx]);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok(PoolRecord {
        output: Volume::from_vec(out_shape, out)?,
        argmax,
        input_shape: xs,
    })
}

/// Routes the upstream gradient to the recorded argmax positions; all other
/// voxels stay zero.
pub fn maxpool3d_backward<T: Scalar>(rec: &PoolRecord<T>, upstream: &Volume<T>) -> Result<Volume<T>> {
    if upstream.shape() != rec.output.shape() {
        return Err(Error::ShapeMismatch {
            expected: rec.output.shape(),
            found: upstream.shape(),
        });
    }
    let up: Vec<f64> = upstream.data().iter().map(|u| u.to_f64()).collect();
    let grad = maxpool3d_backward_raw(&rec.argmax, rec.input_shape.elements(), &up);
    Volume::from_vec(rec.input_shape, grad.into_iter().map(T::from_f64).collect())
}

pub(crate) fn maxpool3d_backward_raw(
    argmax: &[usize],
    input_elements: usize,
    upstream: &[f64],
) -> Vec<f64> {
    let mut grad = vec![0.0f64; input_elements];
    for (&idx, u) in argmax.iter().zip(upstream) {
        grad[idx] += u;
    }
    grad
}

/// Numerically stable softmax: the maximum logit is subtracted before
/// exponentiation. Panics on an empty slice (precondition).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "softmax needs at least one logit");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&u| (u - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Negated log-likelihood of the true class plus its gradient with respect
/// to the logits that produced `probs` (softmax composition), i.e.
/// `probs − one_hot(true_class)`.
pub fn nll_loss(probs: &[f64], true_class: usize) -> Result<(f64, Vec<f64>)> {
    if true_class >= probs.len() {
        return Err(Error::ClassOutOfRange {
            class: true_class,
            count: probs.len(),
        });
    }
    let loss = -probs[true_class].ln();
    let grad = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == true_class { p - 1.0 } else { p })
        .collect();
    Ok((loss, grad))
}
