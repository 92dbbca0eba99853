//! The deeply supervised volumetric classifier: pretrained conv/pool stages,
//! fully connected layers with auxiliary softmax heads, function-preserving
//! weight transplantation from an autoencoder stack, and fine-tuning.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cae::CaeStack;
use crate::error::{Error, Result};
use crate::nnops::{
    conv3d_backward_raw, conv3d_forward_full, maxpool3d_backward_raw, maxpool3d_forward, nll_loss,
    softmax, Activation, KernelBank, Padding, PoolRecord,
};
use crate::optim::{epoch_order, mix_seed, OptimizerSpec, TensorOptimizer};
use crate::scalar::Scalar;
use crate::volume::{Shape4, Volume};

/// Shape of one convolutional stage of the classifier.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConvLayerSpec {
    pub maps: usize,
    pub kernel: usize,
    pub pool: usize,
    pub activation: Activation,
}

/// Architecture and loss weighting of the classifier.
#[derive(Clone, PartialEq, Debug)]
pub struct NetworkConfig {
    pub input_shape: Shape4,
    pub conv: Vec<ConvLayerSpec>,
    pub fc_widths: Vec<usize>,
    pub classes: usize,
    /// One auxiliary-head loss weight per fully connected layer.
    pub aux_weights: Vec<f64>,
    pub top_weight: f64,
    /// Scale of the seeded perturbation applied to duplicated maps when the
    /// transplant widens a layer.
    pub widen_noise: f64,
}

impl NetworkConfig {
    /// The stock desk-scale architecture: 1-channel 32³ input, three conv
    /// stages of (8, 16, 32) maps with 3³ kernels and pool 2, fully
    /// connected widths (128, 64).
    pub fn default_for(classes: usize) -> Self {
        Self {
            input_shape: Shape4::new(1, 32, 32, 32).expect("static shape"),
            conv: [8, 16, 32]
                .into_iter()
                .map(|maps| ConvLayerSpec {
                    maps,
                    kernel: 3,
                    pool: 2,
                    activation: Activation::Relu,
                })
                .collect(),
            fc_widths: vec![128, 64],
            classes,
            aux_weights: vec![0.3, 0.3],
            top_weight: 1.0,
            widen_noise: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidParam("class count must be >= 2".into()));
        }
        if self.conv.is_empty() {
            return Err(Error::InvalidParam("at least one conv stage".into()));
        }
        if self.fc_widths.is_empty() {
            return Err(Error::InvalidParam(
                "at least one fully connected layer".into(),
            ));
        }
        if self.aux_weights.len() != self.fc_widths.len() {
            return Err(Error::LengthMismatch {
                left: self.fc_widths.len(),
                right: self.aux_weights.len(),
            });
        }
        for spec in &self.conv {
            if spec.maps == 0 || spec.pool == 0 || spec.kernel == 0 || spec.kernel % 2 == 0 {
                return Err(Error::InvalidParam(
                    "conv stages need maps >= 1, pool >= 1, odd kernel".into(),
                ));
            }
        }
        if self.fc_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParam("fc widths must be >= 1".into()));
        }
        if !(self.top_weight > 0.0) || !self.top_weight.is_finite() {
            return Err(Error::InvalidParam("top loss weight must be positive".into()));
        }
        if self
            .aux_weights
            .iter()
            .any(|w| *w < 0.0 || !w.is_finite())
        {
            return Err(Error::InvalidParam(
                "auxiliary loss weights must be finite and >= 0".into(),
            ));
        }
        if self.widen_noise < 0.0 || !self.widen_noise.is_finite() {
            return Err(Error::InvalidParam("widen noise must be >= 0".into()));
        }
        Ok(())
    }

    /// Length of the flattened representation entering the first fully
    /// connected layer.
    pub fn flattened_len(&self) -> usize {
        let (mut d, mut h, mut w) = self.input_shape.spatial();
        let mut channels = self.input_shape.channels;
        for spec in &self.conv {
            channels = spec.maps;
            d = d.div_ceil(spec.pool);
            h = h.div_ceil(spec.pool);
            w = w.div_ceil(spec.pool);
        }
        channels * d * h * w
    }
}

/// Affine stage `y = act(Wx + b)` with row-major `out x in` weights.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub weights: Vec<T>,
    pub biases: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl<T: Scalar> Dense<T> {
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Dense {
            weights: (0..in_dim * out_dim)
                .map(|_| T::from_f64(rng.random_range(-limit..limit)))
                .collect(),
            biases: vec![T::zero(); out_dim],
            in_dim,
            out_dim,
            activation,
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut preact = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.biases[o].to_f64();
            for (w, v) in row.iter().zip(x) {
                acc += w.to_f64() * v;
            }
            preact.push(acc);
        }
        let out = preact.iter().map(|&u| self.activation.apply(u)).collect();
        (preact, out)
    }

    /// Gradients given the upstream gradient of the stage output.
    fn backward(&self, x: &[f64], preact: &[f64], upstream: &[f64]) -> DenseGradients {
        let delta: Vec<f64> = upstream
            .iter()
            .zip(preact)
            .map(|(u, &p)| u * self.activation.derivative(p))
            .collect();
        let mut weights = vec![0.0f64; self.weights.len()];
        let mut input = vec![0.0f64; self.in_dim];
        for o in 0..self.out_dim {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            let row = o * self.in_dim;
            for i in 0..self.in_dim {
                weights[row + i] += d * x[i];
                input[i] += d * self.weights[row + i].to_f64();
            }
        }
        DenseGradients {
            weights,
            biases: delta,
            input,
        }
    }

    pub fn map_to<U: Scalar>(&self) -> Dense<U> {
        Dense {
            weights: self.weights.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            biases: self.biases.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            activation: self.activation,
        }
    }
}

struct DenseGradients {
    weights: Vec<f64>,
    biases: Vec<f64>,
    input: Vec<f64>,
}

/// One conv stage of the classifier: bank, activation, pool factor.
#[derive(Clone, Debug)]
pub struct ConvStage<T> {
    pub bank: KernelBank<T>,
    pub activation: Activation,
    pub pool: usize,
}

/// The assembled classifier.
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    pub input_shape: Shape4,
    pub conv: Vec<ConvStage<T>>,
    pub fc: Vec<Dense<T>>,
    /// One affine+softmax probe per fully connected stage.
    pub aux: Vec<Dense<T>>,
    pub top: Dense<T>,
    pub classes: usize,
}

impl<T: Scalar> Network<T> {
    pub fn map_to<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape,
            conv: self
                .conv
                .iter()
                .map(|s| ConvStage {
                    bank: s.bank.map_to(),
                    activation: s.activation,
                    pool: s.pool,
                })
                .collect(),
            fc: self.fc.iter().map(Dense::map_to).collect(),
            aux: self.aux.iter().map(Dense::map_to).collect(),
            top: self.top.map_to(),
            classes: self.classes,
        }
    }
}

/// Copies a source kernel slab into a (possibly differently sized) target
/// slab, centered; the surround is zero-filled when growing and cropped when
/// shrinking.
fn resize_slab(
    src: &[f64],
    n_src: usize,
    dst: &mut [f64],
    n_dst: usize,
) {
    let shift = n_dst as isize - n_src as isize;
    let off = shift / 2;
    for dz in 0..n_dst {
        for dy in 0..n_dst {
            for dx in 0..n_dst {
                let sz = dz as isize - off;
                let sy = dy as isize - off;
                let sx = dx as isize - off;
                let v = if sz >= 0
                    && sy >= 0
                    && sx >= 0
                    && sz < n_src as isize
                    && sy < n_src as isize
                    && sx < n_src as isize
                {
                    src[((sz as usize * n_src) + sy as usize) * n_src + sx as usize]
                } else {
                    0.0
                };
                dst[(dz * n_dst + dy) * n_dst + dx] = v;
            }
        }
    }
}

/// Builds the classifier from a pretrained stack.
///
/// Conv stage `l` receives the encoder weights of stack layer `l`: equal
/// kernel sizes copy exactly, larger targets embed the source kernel
/// centered in a zero surround, smaller targets center-crop. When the target
/// has more maps than the source, the extra maps duplicate randomly chosen
/// source maps (plus `widen_noise` perturbation) and the next stage's
/// incoming weights are split across replicas so the function is preserved
/// at zero noise. Fully connected stages and heads are freshly
/// Glorot-initialized from `seed`.
pub fn transfer_weights<T: Scalar>(
    stack: &CaeStack<T>,
    cfg: &NetworkConfig,
    seed: u64,
) -> Result<Network<T>> {
    cfg.validate()?;
    if cfg.conv.len() != stack.layers.len() {
        return Err(Error::LengthMismatch {
            left: stack.layers.len(),
            right: cfg.conv.len(),
        });
    }
    if stack.layers[0].encoder.in_channels() != cfg.input_shape.channels {
        return Err(Error::ChannelMismatch {
            expected: stack.layers[0].encoder.in_channels(),
            found: cfg.input_shape.channels,
        });
    }

    // Map of each target channel to its source map, per layer boundary.
    let mut prev_map: Vec<usize> = (0..cfg.input_shape.channels).collect();
    let mut prev_counts: Vec<usize> = vec![1; cfg.input_shape.channels];

    let mut conv = Vec::with_capacity(cfg.conv.len());
    for (l, spec) in cfg.conv.iter().enumerate() {
        let src = &stack.layers[l].encoder;
        let k_src = src.out_maps();
        let j_src = src.in_channels();
        let n_src = src.size();
        let k_tgt = spec.maps;
        let n_tgt = spec.kernel;
        let j_tgt = prev_map.len();
        if k_tgt < k_src {
            return Err(Error::InvalidParam(format!(
                "conv stage {l}: target map count {k_tgt} below source {k_src}"
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, l as u64));
        let map: Vec<usize> = (0..k_tgt)
            .map(|m| if m < k_src { m } else { rng.random_range(0..k_src) })
            .collect();
        let mut counts = vec![0usize; k_src];
        for &s in &map {
            counts[s] += 1;
        }

        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let n3_src = n_src * n_src * n_src;
        let n3_tgt = n_tgt * n_tgt * n_tgt;
        let mut weights = vec![T::zero(); k_tgt * j_tgt * n3_tgt];
        let mut biases = vec![T::zero(); k_tgt];
        let mut src_slab = vec![0.0f64; n3_src];
        let mut dst_slab = vec![0.0f64; n3_tgt];
        for (k_t, &s_k) in map.iter().enumerate() {
            let duplicated = k_t >= k_src;
            for (j_t, &s_j) in prev_map.iter().enumerate() {
                if s_j >= j_src {
                    return Err(Error::ChannelMismatch {
                        expected: j_src,
                        found: s_j + 1,
                    });
                }
                let scale = 1.0 / prev_counts[s_j] as f64;
                for (d, slot) in src_slab.iter_mut().enumerate() {
                    let dz = d / (n_src * n_src);
                    let dy = d / n_src % n_src;
                    let dx = d % n_src;
                    *slot = src.weights()[src.weight_index(s_k, s_j, dz, dy, dx)].to_f64() * scale;
                }
                resize_slab(&src_slab, n_src, &mut dst_slab, n_tgt);
                let base = (k_t * j_tgt + j_t) * n3_tgt;
                for (d, &v) in dst_slab.iter().enumerate() {
                    let jitter = if duplicated && cfg.widen_noise > 0.0 {
                        cfg.widen_noise * noise.sample(&mut rng)
                    } else {
                        if duplicated {
                            // keep the RNG stream independent of the noise scale
                            let _ = noise.sample(&mut rng);
                        }
                        0.0
                    };
                    weights[base + d] = T::from_f64(v + jitter);
                }
            }
            let jitter = if duplicated && cfg.widen_noise > 0.0 {
                cfg.widen_noise * noise.sample(&mut rng)
            } else {
                if duplicated {
                    let _ = noise.sample(&mut rng);
                }
                0.0
            };
            biases[k_t] = T::from_f64(src.biases()[s_k].to_f64() + jitter);
        }

        conv.push(ConvStage {
            bank: KernelBank::new(k_tgt, j_tgt, n_tgt, weights, biases)?,
            activation: spec.activation,
            pool: spec.pool,
        });
        prev_map = map;
        prev_counts = counts;
    }

    let flat_len = cfg.flattened_len();
    let mut fc = Vec::with_capacity(cfg.fc_widths.len());
    let mut in_dim = flat_len;
    for (i, &width) in cfg.fc_widths.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1000 + i as u64));
        fc.push(Dense::glorot(in_dim, width, Activation::Relu, &mut rng));
        in_dim = width;
    }
    let mut aux = Vec::with_capacity(cfg.fc_widths.len());
    for (i, &width) in cfg.fc_widths.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2000 + i as u64));
        aux.push(Dense::glorot(width, cfg.classes, Activation::Linear, &mut rng));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3000));
    let top = Dense::glorot(
        *cfg.fc_widths.last().expect("validated nonempty"),
        cfg.classes,
        Activation::Linear,
        &mut rng,
    );

    Ok(Network {
        input_shape: cfg.input_shape,
        conv,
        fc,
        aux,
        top,
        classes: cfg.classes,
    })
}

/// Activations retained by the forward pass for backpropagation.
pub struct ForwardCache<T> {
    conv_inputs: Vec<Volume<T>>,
    conv_preacts: Vec<Vec<f64>>,
    pool_records: Vec<PoolRecord<T>>,
    fc_inputs: Vec<Vec<f64>>,
    fc_preacts: Vec<Vec<f64>>,
    fc_outputs: Vec<Vec<f64>>,
}

/// Everything the forward pass produces: the top-head class probabilities,
/// one probability vector per auxiliary head, the feature vector of the last
/// fully connected stage (the view used for manifold plots), and the cached
/// activations.
pub struct NetworkOutput<T> {
    pub top_probs: Vec<f64>,
    pub aux_probs: Vec<Vec<f64>>,
    pub features: Vec<f64>,
    pub cache: ForwardCache<T>,
}

fn conv_chain<T: Scalar>(
    net: &Network<T>,
    x: &Volume<T>,
) -> Result<(Vec<Volume<T>>, Vec<Vec<f64>>, Vec<PoolRecord<T>>, Vec<f64>)> {
    if x.shape() != net.input_shape {
        return Err(Error::ShapeMismatch {
            expected: net.input_shape,
            found: x.shape(),
        });
    }
    let mut conv_inputs = Vec::with_capacity(net.conv.len());
    let mut conv_preacts = Vec::with_capacity(net.conv.len());
    let mut pool_records = Vec::with_capacity(net.conv.len());
    let mut current = x.clone();
    for stage in &net.conv {
        let full = conv3d_forward_full(&current, &stage.bank, stage.activation, Padding::Same)?;
        let pooled = maxpool3d_forward(&full.out, stage.pool)?;
        conv_inputs.push(current);
        conv_preacts.push(full.preact);
        current = pooled.output.clone();
        pool_records.push(pooled);
    }
    let flat: Vec<f64> = current.data().iter().map(|v| v.to_f64()).collect();
    Ok((conv_inputs, conv_preacts, pool_records, flat))
}

fn fc_chain<T: Scalar>(
    net: &Network<T>,
    flat: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let mut fc_inputs = Vec::with_capacity(net.fc.len());
    let mut fc_preacts = Vec::with_capacity(net.fc.len());
    let mut fc_outputs = Vec::with_capacity(net.fc.len());
    let mut current = flat.to_vec();
    for stage in &net.fc {
        let (preact, out) = stage.forward(&current);
        fc_inputs.push(current);
        fc_preacts.push(preact);
        fc_outputs.push(out.clone());
        current = out;
    }
    let mut aux_probs = Vec::with_capacity(net.aux.len());
    for (head, out) in net.aux.iter().zip(&fc_outputs) {
        let (_, logits) = head.forward(out);
        aux_probs.push(softmax(&logits));
    }
    let (_, top_logits) = net.top.forward(&current);
    let top_probs = softmax(&top_logits);
    (fc_inputs, fc_preacts, fc_outputs, aux_probs, top_probs)
}

/// Full forward pass. Probability vectors are `f64` and sum to 1 up to
/// floating-point addition error.
pub fn network_forward<T: Scalar>(net: &Network<T>, x: &Volume<T>) -> Result<NetworkOutput<T>> {
    let (conv_inputs, conv_preacts, pool_records, flat) = conv_chain(net, x)?;
    let (fc_inputs, fc_preacts, fc_outputs, aux_probs, top_probs) = fc_chain(net, &flat);
    let features = fc_outputs.last().cloned().unwrap_or_default();
    Ok(NetworkOutput {
        top_probs,
        aux_probs,
        features,
        cache: ForwardCache {
            conv_inputs,
            conv_preacts,
            pool_records,
            fc_inputs,
            fc_preacts,
            fc_outputs,
        },
    })
}

/// Weighted deep-supervision objective: `top_weight` times the top-head
/// negated log-likelihood plus each auxiliary weight times its head's loss.
/// Returns the total and the per-head losses, top first.
pub fn deep_supervised_loss<T: Scalar>(
    output: &NetworkOutput<T>,
    true_class: usize,
    cfg: &NetworkConfig,
) -> Result<(f64, Vec<f64>)> {
    if output.aux_probs.len() != cfg.aux_weights.len() {
        return Err(Error::LengthMismatch {
            left: cfg.aux_weights.len(),
            right: output.aux_probs.len(),
        });
    }
    let (top, _) = nll_loss(&output.top_probs, true_class)?;
    let mut per_head = vec![top];
    let mut total = cfg.top_weight * top;
    for (probs, weight) in output.aux_probs.iter().zip(&cfg.aux_weights) {
        let (loss, _) = nll_loss(probs, true_class)?;
        per_head.push(loss);
        total += weight * loss;
    }
    Ok((total, per_head))
}

/// Gradients of the deep-supervised objective for every parameter tensor.
/// `conv` is empty when the conv stages are frozen.
pub struct NetworkGradients {
    pub conv: Vec<(Vec<f64>, Vec<f64>)>,
    pub fc: Vec<(Vec<f64>, Vec<f64>)>,
    pub aux: Vec<(Vec<f64>, Vec<f64>)>,
    pub top: (Vec<f64>, Vec<f64>),
    pub total_loss: f64,
    pub per_head: Vec<f64>,
    pub predicted: usize,
}

fn backprop_fc<T: Scalar>(
    net: &Network<T>,
    cache: &ForwardCache<T>,
    output: &NetworkOutput<T>,
    true_class: usize,
    cfg: &NetworkConfig,
) -> Result<(NetworkGradients, Vec<f64>)> {
    let (total_loss, per_head) = deep_supervised_loss(output, true_class, cfg)?;

    // Top head.
    let (_, top_grad_logits) = nll_loss(&output.top_probs, true_class)?;
    let top_upstream: Vec<f64> = top_grad_logits
        .iter()
        .map(|g| cfg.top_weight * g)
        .collect();
    let last_out = cache.fc_outputs.last().expect("at least one fc stage");
    let last_pre: Vec<f64> = last_out.clone(); // linear head: preact unused
    let top_grads = net.top.backward(last_out, &last_pre, &top_upstream);

    // Auxiliary heads; their input gradients feed the fc chain.
    let mut aux_grads = Vec::with_capacity(net.aux.len());
    let mut aux_input_grads = Vec::with_capacity(net.aux.len());
    for (i, head) in net.aux.iter().enumerate() {
        let (_, grad_logits) = nll_loss(&output.aux_probs[i], true_class)?;
        let upstream: Vec<f64> = grad_logits
            .iter()
            .map(|g| cfg.aux_weights[i] * g)
            .collect();
        let out = &cache.fc_outputs[i];
        let pre: Vec<f64> = out.clone();
        let g = head.backward(out, &pre, &upstream);
        aux_grads.push((g.weights, g.biases));
        aux_input_grads.push(g.input);
    }

    // Fully connected chain, last to first.
    let mut fc_grads: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); net.fc.len()];
    let mut downstream = top_grads.input;
    for i in (0..net.fc.len()).rev() {
        for (d, a) in downstream.iter_mut().zip(&aux_input_grads[i]) {
            *d += a;
        }
        let g = net.fc[i].backward(&cache.fc_inputs[i], &cache.fc_preacts[i], &downstream);
        fc_grads[i] = (g.weights, g.biases);
        downstream = g.input;
    }

    let predicted = argmax_tie_low(&output.top_probs);
    Ok((
        NetworkGradients {
            conv: Vec::new(),
            fc: fc_grads,
            aux: aux_grads,
            top: (top_grads.weights, top_grads.biases),
            total_loss,
            per_head,
            predicted,
        },
        downstream,
    ))
}

/// Forward plus backward pass for one sample. With `freeze_conv` the conv
/// gradients are skipped entirely.
pub fn deep_supervised_gradients<T: Scalar>(
    net: &Network<T>,
    x: &Volume<T>,
    true_class: usize,
    cfg: &NetworkConfig,
    freeze_conv: bool,
) -> Result<NetworkGradients> {
    let output = network_forward(net, x)?;
    let (mut grads, flat_grad) = backprop_fc(net, &output.cache, &output, true_class, cfg)?;
    if !freeze_conv {
        grads.conv = backprop_conv(net, &output.cache, flat_grad)?;
    }
    Ok(grads)
}

fn backprop_conv<T: Scalar>(
    net: &Network<T>,
    cache: &ForwardCache<T>,
    flat_grad: Vec<f64>,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut conv_grads: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); net.conv.len()];
    let mut upstream = flat_grad;
    for l in (0..net.conv.len()).rev() {
        let rec = &cache.pool_records[l];
        let pre_pool = maxpool3d_backward_raw(&rec.argmax, rec.input_shape.elements(), &upstream);
        let g = conv3d_backward_raw(
            &cache.conv_inputs[l],
            &net.conv[l].bank,
            net.conv[l].activation,
            Padding::Same,
            &cache.conv_preacts[l],
            &pre_pool,
        )?;
        conv_grads[l] = (g.weights, g.biases);
        upstream = g.input;
    }
    Ok(conv_grads)
}

/// Lowest index wins ties.
pub fn argmax_tie_low(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Class decision for one volume: argmax of the top-head probabilities with
/// ties broken toward the lower index.
pub fn predict<T: Scalar>(net: &Network<T>, x: &Volume<T>) -> Result<(usize, Vec<f64>)> {
    let output = network_forward(net, x)?;
    Ok((argmax_tie_low(&output.top_probs), output.top_probs))
}

/// Per-epoch mean training loss and accuracy.
#[derive(Clone, Debug, Default)]
pub struct FinetuneLog {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

/// Fine-tunes the classifier on labeled volumes by per-sample stochastic
/// updates of the deep-supervised objective.
///
/// With `freeze_conv` (the transfer-learning default) the conv stages stay
/// untouched: their features are computed once per sample up front and only
/// the fully connected stages and heads train. Parameter tensors update in a
/// fixed order per sample — conv stages in depth order (when unfrozen), then
/// fully connected stages, auxiliary heads, and the top head, weights before
/// biases.
pub fn finetune<T: Scalar>(
    net: &mut Network<T>,
    volumes: &[Volume<T>],
    classes: &[usize],
    cfg: &NetworkConfig,
    optimizer: OptimizerSpec,
    epochs: usize,
    seed: u64,
    freeze_conv: bool,
) -> Result<FinetuneLog> {
    if volumes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if volumes.len() != classes.len() {
        return Err(Error::LengthMismatch {
            left: volumes.len(),
            right: classes.len(),
        });
    }
    if let Some(&class) = classes.iter().find(|&&c| c >= net.classes) {
        return Err(Error::ClassOutOfRange {
            class,
            count: net.classes,
        });
    }
    cfg.validate()?;

    let mut conv_opts: Vec<(TensorOptimizer, TensorOptimizer)> = Vec::new();
    if !freeze_conv {
        for stage in &net.conv {
            conv_opts.push((
                TensorOptimizer::new(optimizer, stage.bank.weights().len())?,
                TensorOptimizer::new(optimizer, stage.bank.biases().len())?,
            ));
        }
    }
    let mut fc_opts: Vec<(TensorOptimizer, TensorOptimizer)> = net
        .fc
        .iter()
        .map(|s| {
            Ok((
                TensorOptimizer::new(optimizer, s.weights.len())?,
                TensorOptimizer::new(optimizer, s.biases.len())?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut aux_opts: Vec<(TensorOptimizer, TensorOptimizer)> = net
        .aux
        .iter()
        .map(|s| {
            Ok((
                TensorOptimizer::new(optimizer, s.weights.len())?,
                TensorOptimizer::new(optimizer, s.biases.len())?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut top_opts = (
        TensorOptimizer::new(optimizer, net.top.weights.len())?,
        TensorOptimizer::new(optimizer, net.top.biases.len())?,
    );

    // Frozen conv stages make the flattened features constant per sample;
    // compute them once.
    let frozen_flats: Vec<Vec<f64>> = if freeze_conv {
        volumes
            .iter()
            .map(|x| conv_chain(net, x).map(|(_, _, _, flat)| flat))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let apply = |opt: &mut TensorOptimizer, params: &mut [T], grads: &[f64]| -> Result<()> {
        let grads_t: Vec<T> = grads.iter().map(|&g| T::from_f64(g)).collect();
        opt.step(params, &grads_t)
    };

    let mut log = FinetuneLog::default();
    for epoch in 0..epochs {
        let order = epoch_order(seed, epoch, volumes.len());
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for &i in &order {
            let grads = if freeze_conv {
                let flat = &frozen_flats[i];
                let (fc_inputs, fc_preacts, fc_outputs, aux_probs, top_probs) =
                    fc_chain(net, flat);
                let features = fc_outputs.last().cloned().unwrap_or_default();
                let output = NetworkOutput {
                    top_probs,
                    aux_probs,
                    features,
                    cache: ForwardCache {
                        conv_inputs: Vec::new(),
                        conv_preacts: Vec::new(),
                        pool_records: Vec::new(),
                        fc_inputs,
                        fc_preacts,
                        fc_outputs,
                    },
                };
                backprop_fc(net, &output.cache, &output, classes[i], cfg)?.0
            } else {
                deep_supervised_gradients(net, &volumes[i], classes[i], cfg, false)?
            };

            loss_sum += grads.total_loss;
            if grads.predicted == classes[i] {
                correct += 1;
            }

            if !freeze_conv {
                for (stage, ((ow, ob), (gw, gb))) in net
                    .conv
                    .iter_mut()
                    .zip(conv_opts.iter_mut().zip(&grads.conv))
                {
                    apply(ow, stage.bank.weights_mut(), gw)?;
                    apply(ob, stage.bank.biases_mut(), gb)?;
                }
            }
            for (stage, ((ow, ob), (gw, gb))) in
                net.fc.iter_mut().zip(fc_opts.iter_mut().zip(&grads.fc))
            {
                apply(ow, &mut stage.weights, gw)?;
                apply(ob, &mut stage.biases, gb)?;
            }
            for (stage, ((ow, ob), (gw, gb))) in
                net.aux.iter_mut().zip(aux_opts.iter_mut().zip(&grads.aux))
            {
                apply(ow, &mut stage.weights, gw)?;
                apply(ob, &mut stage.biases, gb)?;
            }
            apply(&mut top_opts.0, &mut net.top.weights, &grads.top.0)?;
            apply(&mut top_opts.1, &mut net.top.biases, &grads.top.1)?;
        }
        log.epoch_loss.push(loss_sum / volumes.len() as f64);
        log.epoch_accuracy
            .push(correct as f64 / volumes.len() as f64);
    }
    Ok(log)
}

const DSA_MAGIC: [u8; 4] = *b"DSA1";

/// Writes a network: config block, then all tensors as little-endian `f32`
/// in declaration order (conv banks, fc stages, aux heads, top head; weights
/// before biases).
pub fn save_network(net: &Network<f32>, path: &Path) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let put_u32 = |w: &mut BufWriter<File>, v: usize| -> Result<()> {
        w.write_all(&(v as u32).to_le_bytes()).map_err(io)
    };
    w.write_all(&DSA_MAGIC).map_err(io)?;
    put_u32(&mut w, net.conv.len())?;
    for stage in &net.conv {
        put_u32(&mut w, stage.bank.out_maps())?;
        put_u32(&mut w, stage.bank.in_channels())?;
        put_u32(&mut w, stage.bank.size())?;
        put_u32(&mut w, stage.pool)?;
        w.write_all(&[stage.activation.code()]).map_err(io)?;
    }
    put_u32(&mut w, net.fc.len())?;
    for stage in &net.fc {
        put_u32(&mut w, stage.in_dim)?;
        put_u32(&mut w, stage.out_dim)?;
        w.write_all(&[stage.activation.code()]).map_err(io)?;
    }
    put_u32(&mut w, net.aux.len())?;
    for head in &net.aux {
        put_u32(&mut w, head.in_dim)?;
        put_u32(&mut w, head.out_dim)?;
    }
    put_u32(&mut w, net.top.in_dim)?;
    put_u32(&mut w, net.top.out_dim)?;
    for extent in [
        net.input_shape.channels,
        net.input_shape.depth,
        net.input_shape.height,
        net.input_shape.width,
    ] {
        put_u32(&mut w, extent)?;
    }
    put_u32(&mut w, net.classes)?;

    let put_f32s = |w: &mut BufWriter<File>, values: &[f32]| -> Result<()> {
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    };
    for stage in &net.conv {
        put_f32s(&mut w, stage.bank.weights())?;
        put_f32s(&mut w, stage.bank.biases())?;
    }
    for stage in &net.fc {
        put_f32s(&mut w, &stage.weights)?;
        put_f32s(&mut w, &stage.biases)?;
    }
    for head in &net.aux {
        put_f32s(&mut w, &head.weights)?;
        put_f32s(&mut w, &head.biases)?;
    }
    put_f32s(&mut w, &net.top.weights)?;
    put_f32s(&mut w, &net.top.biases)?;
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network<f32>> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut r = BufReader::new(File::open(path).map_err(io)?);

    fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut filled = 0;
        while filled < n {
            match r.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        expected: n,
                        found: filled,
                    })
                }
                Ok(m) => filled += m,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    return Err(Error::Io {
                        path: "<stream>".into(),
                        source: e,
                    })
                }
            }
        }
        Ok(buf)
    }
    fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
        let b = read_bytes(r, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
    fn read_act<R: Read>(r: &mut R) -> Result<Activation> {
        let b = read_bytes(r, 1)?;
        Activation::from_code(b[0])
            .ok_or_else(|| Error::InvalidParam(format!("bad activation code {}", b[0])))
    }
    fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
        let b = read_bytes(r, n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    let magic = read_bytes(&mut r, 4)?;
    if magic != DSA_MAGIC {
        return Err(Error::BadMagic {
            expected: DSA_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let conv_count = read_u32(&mut r)?;
    let mut conv_dims = Vec::with_capacity(conv_count);
    for _ in 0..conv_count {
        let k = read_u32(&mut r)?;
        let j = read_u32(&mut r)?;
        let n = read_u32(&mut r)?;
        let pool = read_u32(&mut r)?;
        let act = read_act(&mut r)?;
        conv_dims.push((k, j, n, pool, act));
    }
    let fc_count = read_u32(&mut r)?;
    let mut fc_dims = Vec::with_capacity(fc_count);
    for _ in 0..fc_count {
        let in_dim = read_u32(&mut r)?;
        let out_dim = read_u32(&mut r)?;
        let act = read_act(&mut r)?;
        fc_dims.push((in_dim, out_dim, act));
    }
    let aux_count = read_u32(&mut r)?;
    let mut aux_dims = Vec::with_capacity(aux_count);
    for _ in 0..aux_count {
        let in_dim = read_u32(&mut r)?;
        let out_dim = read_u32(&mut r)?;
        aux_dims.push((in_dim, out_dim));
    }
    let top_in = read_u32(&mut r)?;
    let top_out = read_u32(&mut r)?;
    let shape = Shape4::new(
        read_u32(&mut r)?,
        read_u32(&mut r)?,
        read_u32(&mut r)?,
        read_u32(&mut r)?,
    )?;
    let classes = read_u32(&mut r)?;

    let mut conv = Vec::with_capacity(conv_count);
    for (k, j, n, pool, act) in conv_dims {
        let weights = read_f32s(&mut r, k * j * n * n * n)?;
        let biases = read_f32s(&mut r, k)?;
        conv.push(ConvStage {
            bank: KernelBank::new(k, j, n, weights, biases)?,
            activation: act,
            pool,
        });
    }
    let mut fc = Vec::with_capacity(fc_count);
    for (in_dim, out_dim, act) in fc_dims {
        let weights = read_f32s(&mut r, in_dim * out_dim)?;
        let biases = read_f32s(&mut r, out_dim)?;
        fc.push(Dense {
            weights,
            biases,
            in_dim,
            out_dim,
            activation: act,
        });
    }
    let mut aux = Vec::with_capacity(aux_count);
    for (in_dim, out_dim) in aux_dims {
        let weights = read_f32s(&mut r, in_dim * out_dim)?;
        let biases = read_f32s(&mut r, out_dim)?;
        aux.push(Dense {
            weights,
            biases,
            in_dim,
            out_dim,
            activation: Activation::Linear,
        });
    }
    let weights = read_f32s(&mut r, top_in * top_out)?;
    let biases = read_f32s(&mut r, top_out)?;
    let top = Dense {
        weights,
        biases,
        in_dim: top_in,
        out_dim: top_out,
        activation: Activation::Linear,
    };

    Ok(Network {
        input_shape: shape,
        conv,
        fc,
        aux,
        top,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cae::{build_stack, CaeLayerSpec, CaeStack};
    use crate::volume::Volume;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_volume(shape: Shape4, seed: u64) -> Volume<f64> {
        let mut r = rng(seed);
        Volume::from_vec(
            shape,
            (0..shape.elements()).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn small_cfg(stack: &CaeStack<f64>, input: Shape4, classes: usize) -> NetworkConfig {
        NetworkConfig {
            input_shape: input,
            conv: stack
                .layers
                .iter()
                .map(|l| ConvLayerSpec {
                    maps: l.encoder.out_maps(),
                    kernel: l.encoder.size(),
                    pool: l.pool,
                    activation: Activation::Relu,
                })
                .collect(),
            fc_widths: vec![10, 6],
            classes,
            aux_weights: vec![0.3, 0.3],
            top_weight: 1.0,
            widen_noise: 0.01,
        }
    }

    fn small_stack(seed: u64) -> CaeStack<f64> {
        let specs = [
            CaeLayerSpec { maps: 2, ..Default::default() },
            CaeLayerSpec { maps: 3, ..Default::default() },
        ];
        build_stack(1, &specs, seed).unwrap()
    }

    #[test]
    fn equal_size_transplant_copies_weights_bit_exactly() {
        let stack = small_stack(3);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let cfg = small_cfg(&stack, input, 3);
        let net = transfer_weights(&stack, &cfg, 9).unwrap();
        for (stage, layer) in net.conv.iter().zip(&stack.layers) {
            assert_eq!(stage.bank.weights(), layer.encoder.weights());
            assert_eq!(stage.bank.biases(), layer.encoder.biases());
        }
    }

    #[test]
    fn enlarged_kernel_preserves_forward_outputs() {
        let stack = small_stack(5);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let cfg = small_cfg(&stack, input, 2);
        let mut grown = cfg.clone();
        for spec in &mut grown.conv {
            spec.kernel = 5;
        }
        let baseline = transfer_weights(&stack, &cfg, 11).unwrap();
        let embedded = transfer_weights(&stack, &grown, 11).unwrap();
        for trial in 0..3 {
            let x = random_volume(input, 700 + trial);
            let (_, _, _, flat_a) = conv_chain(&baseline, &x).unwrap();
            let (_, _, _, flat_b) = conv_chain(&embedded, &x).unwrap();
            for (a, b) in flat_a.iter().zip(&flat_b) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn widening_at_zero_noise_keeps_first_maps_and_duplicates() {
        let stack = small_stack(7);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let mut cfg = small_cfg(&stack, input, 2);
        cfg.conv[0].maps = 4; // source has 2
        cfg.conv[1].maps = 5; // source has 3
        cfg.widen_noise = 0.0;
        let net = transfer_weights(&stack, &cfg, 13).unwrap();

        // First source maps are copied verbatim; duplicated maps equal their
        // randomly chosen sources.
        let src = &stack.layers[0].encoder;
        let dst = &net.conv[0].bank;
        let n3 = 27;
        for k in 0..2 {
            for d in 0..n3 {
                assert_eq!(dst.weights()[k * n3 + d], src.weights()[k * n3 + d]);
            }
            assert_eq!(dst.biases()[k], src.biases()[k]);
        }
        for k in 2..4 {
            let slab = &dst.weights()[k * n3..(k + 1) * n3];
            let matches_some_source = (0..2).any(|s| {
                slab == &src.weights()[s * n3..(s + 1) * n3]
                    && dst.biases()[k] == src.biases()[s]
            });
            assert!(matches_some_source, "duplicated map {k} matches no source");
        }
    }

    #[test]
    fn widening_at_zero_noise_preserves_the_whole_feature_chain() {
        let stack = small_stack(17);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let cfg = small_cfg(&stack, input, 2);
        let mut wide = cfg.clone();
        wide.conv[0].maps = 4;
        wide.conv[1].maps = 6;
        wide.widen_noise = 0.0;
        let narrow_net = transfer_weights(&stack, &cfg, 19).unwrap();
        let wide_net = transfer_weights(&stack, &wide, 19).unwrap();

        // The widened network's maps are duplicates; summing the incoming
        // splits must reproduce the original features. Compare per-position
        // by mapping wide channels back to their sources.
        let x = random_volume(input, 900);
        let (_, _, recs_a, _) = conv_chain(&narrow_net, &x).unwrap();
        let (_, _, recs_b, _) = conv_chain(&wide_net, &x).unwrap();
        let narrow_out = &recs_a.last().unwrap().output;
        let wide_out = &recs_b.last().unwrap().output;
        let spatial = narrow_out.shape().elements() / narrow_out.shape().channels;
        // Each of the first 3 wide channels matches the narrow channel.
        for c in 0..3 {
            for i in 0..spatial {
                let (d, hh, ww) = {
                    let s = narrow_out.shape();
                    let z = i / (s.height * s.width);
                    let y = i / s.width % s.height;
                    let xq = i % s.width;
                    (z, y, xq)
                };
                let a = narrow_out.at(c, d, hh, ww);
                let b = wide_out.at(c, d, hh, ww);
                assert!((a - b).abs() <= 1e-6, "channel {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_network_predicts_uniformly() {
        let stack = small_stack(23);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let cfg = small_cfg(&stack, input, 3);
        let mut net = transfer_weights(&stack, &cfg, 29).unwrap();
        for stage in &mut net.conv {
            stage.bank.weights_mut().iter_mut().for_each(|v| *v = 0.0);
            stage.bank.biases_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for stage in net.fc.iter_mut().chain(net.aux.iter_mut()) {
            stage.weights.iter_mut().for_each(|v| *v = 0.0);
            stage.biases.iter_mut().for_each(|v| *v = 0.0);
        }
        net.top.weights.iter_mut().for_each(|v| *v = 0.0);
        net.top.biases.iter_mut().for_each(|v| *v = 0.0);

        let out = network_forward(&net, &random_volume(input, 31)).unwrap();
        for p in std::iter::once(&out.top_probs).chain(&out.aux_probs) {
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let stack = small_stack(37);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let cfg = small_cfg(&stack, input, 3);
        let net = transfer_weights(&stack, &cfg, 41).unwrap();
        for trial in 0..5 {
            let out = network_forward(&net, &random_volume(input, 500 + trial)).unwrap();
            let total: f64 = out.top_probs.iter().sum();
            assert!((total - 1.0).abs() <= 1e-9);
            for aux in &out.aux_probs {
                assert!((aux.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn scalar_toy_network_matches_hand_composition() {
        // All extents 1, linear activations: the network is an affine chain.
        let input = Shape4::new(1, 1, 1, 1).unwrap();
        let bank = KernelBank::new(1, 1, 1, vec![2.0f64], vec![0.5]).unwrap();
        let net = Network {
            input_shape: input,
            conv: vec![ConvStage {
                bank,
                activation: Activation::Linear,
                pool: 1,
            }],
            fc: vec![Dense {
                weights: vec![1.5f64],
                biases: vec![-0.25],
                in_dim: 1,
                out_dim: 1,
                activation: Activation::Linear,
            }],
            aux: vec![Dense {
                weights: vec![0.3f64, -0.7],
                biases: vec![0.1, 0.2],
                in_dim: 1,
                out_dim: 2,
                activation: Activation::Linear,
            }],
            top: Dense {
                weights: vec![1.0f64, -1.0],
                biases: vec![0.0, 0.3],
                in_dim: 1,
                out_dim: 2,
                activation: Activation::Linear,
            },
            classes: 2,
        };
        let x = Volume::from_vec(input, vec![0.8f64]).unwrap();
        let out = network_forward(&net, &x).unwrap();

        let conv_out = 2.0 * 0.8 + 0.5;
        let fc_out = 1.5 * conv_out - 0.25;
        let top_logits = [fc_out, -fc_out + 0.3];
        let expect = softmax(&top_logits);
        for (a, b) in out.top_probs.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-9);
        }
        let aux_logits = [0.3 * fc_out + 0.1, -0.7 * fc_out + 0.2];
        let expect_aux = softmax(&aux_logits);
        for (a, b) in out.aux_probs[0].iter().zip(&expect_aux) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert!((out.features[0] - fc_out).abs() <= 1e-12);
    }

    #[test]
    fn loss_with_zero_aux_weights_is_plain_top_nll() {
        let stack = small_stack(43);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let mut cfg = small_cfg(&stack, input, 3);
        cfg.aux_weights = vec![0.0, 0.0];
        let net = transfer_weights(&stack, &cfg, 47).unwrap();
        let out = network_forward(&net, &random_volume(input, 49)).unwrap();
        let (total, per_head) = deep_supervised_loss(&out, 1, &cfg).unwrap();
        let (top, _) = nll_loss(&out.top_probs, 1).unwrap();
        assert!((total - top).abs() <= 1e-12);
        assert_eq!(per_head.len(), 3);
    }

    #[test]
    fn uniform_prediction_loss_closed_form() {
        // Uniform probabilities at every head with weights (1, 0.3, 0.3):
        // total = 1.6 * ln 3.
        let stack = small_stack(53);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let cfg = small_cfg(&stack, input, 3);
        let mut net = transfer_weights(&stack, &cfg, 59).unwrap();
        for stage in net.fc.iter_mut().chain(net.aux.iter_mut()) {
            stage.weights.iter_mut().for_each(|v| *v = 0.0);
            stage.biases.iter_mut().for_each(|v| *v = 0.0);
        }
        net.top.weights.iter_mut().for_each(|v| *v = 0.0);
        net.top.biases.iter_mut().for_each(|v| *v = 0.0);
        let out = network_forward(&net, &random_volume(input, 61)).unwrap();
        let (total, _) = deep_supervised_loss(&out, 0, &cfg).unwrap();
        assert!((total - 1.6 * 3.0f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn total_loss_recomposes_from_per_head_losses() {
        let stack = small_stack(67);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let mut cfg = small_cfg(&stack, input, 3);
        cfg.aux_weights = vec![0.45, 0.2];
        cfg.top_weight = 1.3;
        let net = transfer_weights(&stack, &cfg, 71).unwrap();
        let out = network_forward(&net, &random_volume(input, 73)).unwrap();
        let (total, per_head) = deep_supervised_loss(&out, 2, &cfg).unwrap();
        let recomposed = 1.3 * per_head[0] + 0.45 * per_head[1] + 0.2 * per_head[2];
        assert!((total - recomposed).abs() <= 1e-12);
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let stack = small_stack(79);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let cfg = small_cfg(&stack, input, 2);
        let mut net = transfer_weights(&stack, &cfg, 83).unwrap();
        let before = net.clone();
        let data = vec![random_volume(input, 89)];
        let log = finetune(
            &mut net,
            &data,
            &[0],
            &cfg,
            OptimizerSpec::default(),
            0,
            7,
            true,
        )
        .unwrap();
        assert!(log.epoch_loss.is_empty());
        assert_eq!(net.top.weights, before.top.weights);
        assert_eq!(net.fc[0].weights, before.fc[0].weights);
    }

    #[test]
    fn deep_supervised_gradients_match_finite_differences() {
        let step = 1e-3;
        let stack = small_stack(97);
        let input = Shape4::new(1, 6, 6, 6).unwrap();
        let cfg = small_cfg(&stack, input, 3);
        let net = transfer_weights(&stack, &cfg, 101).unwrap();
        let x = random_volume(input, 103);
        let truth = 1usize;
        let grads = deep_supervised_gradients(&net, &x, truth, &cfg, false).unwrap();

        let loss_of = |net: &Network<f64>| -> f64 {
            let out = network_forward(net, &x).unwrap();
            deep_supervised_loss(&out, truth, &cfg).unwrap().0
        };

        // Sample a handful of parameters in every tensor class.
        for widx in [0usize, 11, 23] {
            let mut plus = net.clone();
            plus.fc[0].weights[widx] += step;
            let mut minus = net.clone();
            minus.fc[0].weights[widx] -= step;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            let an = grads.fc[0].0[widx];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
            assert!(rel <= 1e-4, "fc0 weight {widx}: fd={fd} an={an}");
        }
        for widx in [0usize, 5] {
            let mut plus = net.clone();
            plus.top.weights[widx] += step;
            let mut minus = net.clone();
            minus.top.weights[widx] -= step;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            let an = grads.top.0[widx];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
            assert!(rel <= 1e-4, "top weight {widx}: fd={fd} an={an}");
        }
        for widx in [0usize, 3] {
            let mut plus = net.clone();
            plus.aux[1].weights[widx] += step;
            let mut minus = net.clone();
            minus.aux[1].weights[widx] -= step;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            let an = grads.aux[1].0[widx];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
            assert!(rel <= 1e-4, "aux1 weight {widx}: fd={fd} an={an}");
        }
        for widx in [0usize, 13, 29] {
            let mut plus = net.clone();
            plus.conv[0].bank.weights_mut()[widx] += step;
            let mut minus = net.clone();
            minus.conv[0].bank.weights_mut()[widx] -= step;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            let an = grads.conv[0].0[widx];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
            assert!(rel <= 1e-4, "conv0 weight {widx}: fd={fd} an={an}");
        }
    }

    #[test]
    fn freeze_conv_keeps_conv_parameters_bit_identical() {
        let stack = small_stack(107);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let cfg = small_cfg(&stack, input, 2);
        let mut net = transfer_weights(&stack, &cfg, 109).unwrap();
        let before: Vec<Vec<f64>> = net.conv.iter().map(|s| s.bank.weights().to_vec()).collect();
        let data: Vec<Volume<f64>> = (0..4).map(|i| random_volume(input, 300 + i)).collect();
        let classes = vec![0, 1, 0, 1];
        finetune(
            &mut net,
            &data,
            &classes,
            &cfg,
            OptimizerSpec::default(),
            3,
            11,
            true,
        )
        .unwrap();
        for (stage, snapshot) in net.conv.iter().zip(&before) {
            assert_eq!(stage.bank.weights(), snapshot.as_slice());
        }
    }

    #[test]
    fn finetuning_actually_learns_a_separable_toy_problem() {
        let stack = small_stack(113);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let cfg = small_cfg(&stack, input, 2);
        let mut net = transfer_weights(&stack, &cfg, 127).unwrap();
        // Class 0: negative offset, class 1: positive offset.
        let mut data = Vec::new();
        let mut classes = Vec::new();
        for i in 0..10 {
            let base = random_volume(input, 400 + i);
            let offset = if i % 2 == 0 { -1.0 } else { 1.0 };
            let shifted = Volume::from_vec(
                input,
                base.data().iter().map(|v| v * 0.1 + offset).collect(),
            )
            .unwrap();
            data.push(shifted);
            classes.push(i as usize % 2);
        }
        let log = finetune(
            &mut net,
            &data,
            &classes,
            &cfg,
            OptimizerSpec::default(),
            30,
            13,
            true,
        )
        .unwrap();
        assert!(
            *log.epoch_accuracy.last().unwrap() >= 0.9,
            "final accuracy {:?}",
            log.epoch_accuracy.last()
        );
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_index() {
        assert_eq!(argmax_tie_low(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(argmax_tie_low(&[0.5, 0.5]), 0);
        assert_eq!(argmax_tie_low(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn predict_agrees_with_forward_argmax_and_is_shift_invariant() {
        let stack = small_stack(131);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let cfg = small_cfg(&stack, input, 3);
        let net = transfer_weights(&stack, &cfg, 137).unwrap();
        for trial in 0..5 {
            let x = random_volume(input, 600 + trial);
            let (class, probs) = predict(&net, &x).unwrap();
            let out = network_forward(&net, &x).unwrap();
            assert_eq!(class, argmax_tie_low(&out.top_probs));
            assert_eq!(probs, out.top_probs);

            // Adding a constant to every top logit leaves the decision alone.
            let mut shifted = net.clone();
            for b in &mut shifted.top.biases {
                *b += 3.7;
            }
            let (class_shifted, _) = predict(&shifted, &x).unwrap();
            assert_eq!(class, class_shifted);
        }
    }

    #[test]
    fn network_round_trips_through_dsa_file() {
        use tempfile::tempdir;
        let stack = small_stack(139);
        let input = Shape4::new(1, 8, 8, 8).unwrap();
        let cfg = small_cfg(&stack, input, 3);
        let net: Network<f32> = transfer_weights(&stack.map_to(), &cfg, 149).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.dsa1");
        save_network(&net, &path).unwrap();
        let back = load_network(&path).unwrap();
        assert_eq!(back.classes, net.classes);
        assert_eq!(back.input_shape, net.input_shape);
        for (a, b) in net.conv.iter().zip(&back.conv) {
            assert_eq!(a.bank.weights(), b.bank.weights());
            assert_eq!(a.pool, b.pool);
        }
        for (a, b) in net.fc.iter().zip(&back.fc) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.biases, b.biases);
        }
        assert_eq!(net.top.weights, back.top.weights);

        // Identical predictions after the round trip.
        let x: Volume<f32> = random_volume(input, 151).map_to();
        let (class_a, probs_a) = predict(&net, &x).unwrap();
        let (class_b, probs_b) = predict(&back, &x).unwrap();
        assert_eq!(class_a, class_b);
        assert_eq!(probs_a, probs_b);
    }
}
