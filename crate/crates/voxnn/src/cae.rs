//! One 3D convolutional autoencoder layer with tied decoder weights, and the
//! greedy stack training that feeds pooled encodings to the next layer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nnops::{
    conv3d_backward_raw, conv3d_forward_full, flip_kernel, maxpool3d_forward, Activation,
    KernelBank, Padding,
};
use crate::optim::{epoch_order, mix_seed, OptimizerSpec, TensorOptimizer};
use crate::scalar::Scalar;
use crate::volume::{Shape4, Volume};

/// One autoencoder layer. Decoder weights are never stored: decoding always
/// derives them from the encoder by [`flip_kernel`], so the tying cannot
/// drift. Only the decoder biases are independent parameters.
#[derive(Clone, Debug)]
pub struct CaeLayer<T = f32> {
    pub encoder: KernelBank<T>,
    pub decoder_biases: Vec<T>,
    pub encoder_activation: Activation,
    pub decoder_activation: Activation,
    pub pool: usize,
}

impl<T: Scalar> CaeLayer<T> {
    pub fn new(
        encoder: KernelBank<T>,
        encoder_activation: Activation,
        decoder_activation: Activation,
        pool: usize,
    ) -> Result<Self> {
        if pool == 0 {
            return Err(Error::InvalidParam("pool size must be >= 1".into()));
        }
        let decoder_biases = vec![T::zero(); encoder.in_channels()];
        Ok(Self {
            encoder,
            decoder_biases,
            encoder_activation,
            decoder_activation,
            pool,
        })
    }

    /// The tied decoder bank: flipped encoder weights with this layer's
    /// decoder biases.
    fn decoder_bank(&self) -> KernelBank<T> {
        let mut bank = flip_kernel(&self.encoder);
        bank.biases_mut().copy_from_slice(&self.decoder_biases);
        bank
    }

    pub fn map_to<U: Scalar>(&self) -> CaeLayer<U> {
        CaeLayer {
            encoder: self.encoder.map_to(),
            decoder_biases: self
                .decoder_biases
                .iter()
                .map(|v| U::from_f64(v.to_f64()))
                .collect(),
            encoder_activation: self.encoder_activation,
            decoder_activation: self.decoder_activation,
            pool: self.pool,
        }
    }
}

/// Shape of one stack layer used when building a fresh (untrained) stack.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CaeLayerSpec {
    pub maps: usize,
    pub kernel: usize,
    pub pool: usize,
    pub encoder_activation: Activation,
    pub decoder_activation: Activation,
}

impl Default for CaeLayerSpec {
    fn default() -> Self {
        Self {
            maps: 8,
            kernel: 3,
            pool: 2,
            encoder_activation: Activation::Relu,
            decoder_activation: Activation::Linear,
        }
    }
}

/// Ordered autoencoder layers; layer `l` consumes the pooled encodings of
/// layer `l-1`.
#[derive(Clone, Debug)]
pub struct CaeStack<T = f32> {
    pub layers: Vec<CaeLayer<T>>,
}

impl<T: Scalar> CaeStack<T> {
    pub fn new(layers: Vec<CaeLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParam("stack needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].encoder.in_channels() != pair[0].encoder.out_maps() {
                return Err(Error::ChannelMismatch {
                    expected: pair[0].encoder.out_maps(),
                    found: pair[1].encoder.in_channels(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn map_to<U: Scalar>(&self) -> CaeStack<U> {
        CaeStack {
            layers: self.layers.iter().map(CaeLayer::map_to).collect(),
        }
    }
}

/// Builds a stack with Glorot-initialized encoders and zero biases.
pub fn build_stack<T: Scalar>(
    input_channels: usize,
    specs: &[CaeLayerSpec],
    seed: u64,
) -> Result<CaeStack<T>> {
    let mut layers = Vec::with_capacity(specs.len());
    let mut channels = input_channels;
    for (l, spec) in specs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, l as u64));
        let encoder = KernelBank::glorot(spec.maps, channels, spec.kernel, &mut rng)?;
        layers.push(CaeLayer::new(
            encoder,
            spec.encoder_activation,
            spec.decoder_activation,
            spec.pool,
        )?);
        channels = spec.maps;
    }
    CaeStack::new(layers)
}

/// Encodes a volume into the layer's feature maps (same-padded convolution
/// plus the encoder activation).
pub fn cae_encode<T: Scalar>(layer: &CaeLayer<T>, x: &Volume<T>) -> Result<Volume<T>> {
    Ok(conv3d_forward_full(x, &layer.encoder, layer.encoder_activation, Padding::Same)?.out)
}

/// Reconstructs the input space from feature maps through the tied decoder:
/// per-map contributions are summed and the decoder bias is added once per
/// output channel before the decoder activation.
pub fn cae_decode<T: Scalar>(layer: &CaeLayer<T>, h: &Volume<T>) -> Result<Volume<T>> {
    let bank = layer.decoder_bank();
    Ok(conv3d_forward_full(h, &bank, layer.decoder_activation, Padding::Same)?.out)
}

/// Mean over the batch of the per-image squared l2 reconstruction norm
/// (the per-image value is a sum over voxels, not a mean).
pub fn reconstruction_error<T: Scalar>(
    batch: &[Volume<T>],
    reconstructions: &[Volume<T>],
) -> Result<f64> {
    if batch.len() != reconstructions.len() {
        return Err(Error::LengthMismatch {
            left: batch.len(),
            right: reconstructions.len(),
        });
    }
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0f64;
    for (x, xhat) in batch.iter().zip(reconstructions) {
        if x.shape() != xhat.shape() {
            return Err(Error::ShapeMismatch {
                expected: x.shape(),
                found: xhat.shape(),
            });
        }
        let mut sq = 0.0f64;
        for (a, b) in x.data().iter().zip(xhat.data()) {
            let d = b.to_f64() - a.to_f64();
            sq += d * d;
        }
        total += sq;
    }
    Ok(total / batch.len() as f64)
}

/// Per-sample gradients of the squared reconstruction norm with respect to
/// every trainable parameter of the layer, with the tied-weight chain rule:
/// the encoder weight gradient is the direct encoding term plus the decoder
/// term mapped back through the flip.
#[derive(Clone, Debug)]
pub struct CaeGradients {
    pub encoder_weights: Vec<f64>,
    pub encoder_biases: Vec<f64>,
    pub decoder_biases: Vec<f64>,
    pub squared_error: f64,
}

pub fn cae_gradients<T: Scalar>(layer: &CaeLayer<T>, x: &Volume<T>) -> Result<CaeGradients> {
    let enc = conv3d_forward_full(x, &layer.encoder, layer.encoder_activation, Padding::Same)?;
    let dec_bank = layer.decoder_bank();
    let dec = conv3d_forward_full(&enc.out, &dec_bank, layer.decoder_activation, Padding::Same)?;

    let mut squared_error = 0.0f64;
    let upstream: Vec<f64> = dec
        .out
        .data()
        .iter()
        .zip(x.data())
        .map(|(xhat, xv)| {
            let e = xhat.to_f64() - xv.to_f64();
            squared_error += e * e;
            2.0 * e
        })
        .collect();

    let dec_grads = conv3d_backward_raw(
        &enc.out,
        &dec_bank,
        layer.decoder_activation,
        Padding::Same,
        &dec.preact,
        &upstream,
    )?;
    let enc_grads = conv3d_backward_raw(
        x,
        &layer.encoder,
        layer.encoder_activation,
        Padding::Same,
        &enc.preact,
        &dec_grads.input,
    )?;

    // Map the decoder-weight gradient back into encoder layout: the tying is
    // an involution, so the same transpose-and-flip applies.
    let k_maps = layer.encoder.out_maps();
    let j_channels = layer.encoder.in_channels();
    let n = layer.encoder.size();
    let mut encoder_weights = enc_grads.weights;
    for k in 0..k_maps {
        for j in 0..j_channels {
            for dz in 0..n {
                for dy in 0..n {
                    for dx in 0..n {
                        let enc_idx = layer.encoder.weight_index(k, j, dz, dy, dx);
                        let dec_idx = (((j * k_maps + k) * n + (n - 1 - dz)) * n + (n - 1 - dy))
                            * n
                            + (n - 1 - dx);
                        encoder_weights[enc_idx] += dec_grads.weights[dec_idx];
                    }
                }
            }
        }
    }

    Ok(CaeGradients {
        encoder_weights,
        encoder_biases: enc_grads.biases,
        decoder_biases: dec_grads.biases,
        squared_error,
    })
}

fn check_training_inputs<T: Scalar>(layer: &CaeLayer<T>, data: &[Volume<T>]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shape = data[0].shape();
    for v in data {
        if v.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found: v.shape(),
            });
        }
    }
    if shape.channels != layer.encoder.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: layer.encoder.in_channels(),
            found: shape.channels,
        });
    }
    Ok(())
}

/// Trains one layer by minibatch gradient descent on the reconstruction
/// objective. Returns the full-dataset objective after each epoch; zero
/// epochs leaves the parameters untouched and the log empty.
pub fn train_cae_layer<T: Scalar>(
    layer: &mut CaeLayer<T>,
    data: &[Volume<T>],
    optimizer: OptimizerSpec,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_training_inputs(layer, data)?;
    if batch_size == 0 {
        return Err(Error::InvalidParam("batch size must be >= 1".into()));
    }

    let w_len = layer.encoder.weights().len();
    let b_len = layer.encoder.biases().len();
    let d_len = layer.decoder_biases.len();
    let mut opt_w = TensorOptimizer::new(optimizer, w_len)?;
    let mut opt_b = TensorOptimizer::new(optimizer, b_len)?;
    let mut opt_d = TensorOptimizer::new(optimizer, d_len)?;

    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = epoch_order(seed, epoch, data.len());
        for batch in order.chunks(batch_size) {
            let mut gw = vec![0.0f64; w_len];
            let mut gb = vec![0.0f64; b_len];
            let mut gd = vec![0.0f64; d_len];
            for &i in batch {
                let g = cae_gradients(layer, &data[i])?;
                for (acc, v) in gw.iter_mut().zip(&g.encoder_weights) {
                    *acc += v;
                }
                for (acc, v) in gb.iter_mut().zip(&g.encoder_biases) {
                    *acc += v;
                }
                for (acc, v) in gd.iter_mut().zip(&g.decoder_biases) {
                    *acc += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let gw: Vec<T> = gw.into_iter().map(|v| T::from_f64(v * scale)).collect();
            let gb: Vec<T> = gb.into_iter().map(|v| T::from_f64(v * scale)).collect();
            let gd: Vec<T> = gd.into_iter().map(|v| T::from_f64(v * scale)).collect();
            opt_w.step(layer.encoder.weights_mut(), &gw)?;
            opt_b.step(layer.encoder.biases_mut(), &gb)?;
            opt_d.step(&mut layer.decoder_biases, &gd)?;
        }
        log.push(layer_objective(layer, data)?);
    }
    Ok(log)
}

/// Full-dataset reconstruction objective of one layer.
pub fn layer_objective<T: Scalar>(layer: &CaeLayer<T>, data: &[Volume<T>]) -> Result<f64> {
    let mut recons = Vec::with_capacity(data.len());
    for x in data {
        recons.push(cae_decode(layer, &cae_encode(layer, x)?)?);
    }
    reconstruction_error(data, &recons)
}

/// Per-layer training budget of the greedy stack procedure.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct PretrainConfig {
    pub optimizer: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerSpec::default(),
            epochs: 20,
            batch_size: 5,
        }
    }
}

/// Outcome of greedy stack training: the per-epoch objective of every layer
/// and the shape of each layer's pooled representation.
#[derive(Clone, Debug)]
pub struct StackTraining {
    pub layer_logs: Vec<Vec<f64>>,
    pub pooled_shapes: Vec<Shape4>,
}

/// Greedy layerwise pretraining: layer 0 trains on the raw volumes, each
/// subsequent layer on the pooled encodings of the previous trained layer.
/// Training a layer never touches the parameters of earlier layers.
pub fn train_stack<T: Scalar>(
    stack: &mut CaeStack<T>,
    data: &[Volume<T>],
    per_layer: &[PretrainConfig],
    seed: u64,
) -> Result<StackTraining> {
    if per_layer.len() != stack.layers.len() {
        return Err(Error::LengthMismatch {
            left: stack.layers.len(),
            right: per_layer.len(),
        });
    }
    let mut current: Vec<Volume<T>> = data.to_vec();
    let mut layer_logs = Vec::with_capacity(stack.layers.len());
    let mut pooled_shapes = Vec::with_capacity(stack.layers.len());
    for (l, cfg) in per_layer.iter().enumerate() {
        let layer = &mut stack.layers[l];
        let log = train_cae_layer(
            layer,
            &current,
            cfg.optimizer,
            cfg.epochs,
            cfg.batch_size,
            mix_seed(seed, l as u64),
        )?;
        layer_logs.push(log);
        let mut next = Vec::with_capacity(current.len());
        for x in &current {
            let pooled = maxpool3d_forward(&cae_encode(layer, x)?, layer.pool)?;
            next.push(pooled.output);
        }
        pooled_shapes.push(next[0].shape());
        current = next;
    }
    Ok(StackTraining {
        layer_logs,
        pooled_shapes,
    })
}

/// Pooled encodings of the full stack for one volume (the classifier's view
/// of the data).
pub fn stack_encode<T: Scalar>(stack: &CaeStack<T>, x: &Volume<T>) -> Result<Volume<T>> {
    let mut current = x.clone();
    for layer in &stack.layers {
        current = maxpool3d_forward(&cae_encode(layer, &current)?, layer.pool)?.output;
    }
    Ok(current)
}

const CAES_MAGIC: [u8; 4] = *b"CAES";

/// Writes a trained stack: magic "CAES", layer count, then per layer the
/// activation codes, pool size, bank dims, and little-endian `f32` weights
/// and biases.
pub fn save_stack(stack: &CaeStack<f32>, path: &Path) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&CAES_MAGIC).map_err(io)?;
    w.write_all(&(stack.layers.len() as u32).to_le_bytes())
        .map_err(io)?;
    for layer in &stack.layers {
        w.write_all(&[
            layer.encoder_activation.code(),
            layer.decoder_activation.code(),
        ])
        .map_err(io)?;
        w.write_all(&(layer.pool as u32).to_le_bytes()).map_err(io)?;
        for dim in [
            layer.encoder.out_maps(),
            layer.encoder.in_channels(),
            layer.encoder.size(),
        ] {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
        }
        for v in layer.encoder.weights() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in layer.encoder.biases() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in &layer.decoder_biases {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_stack(path: &Path) -> Result<CaeStack<f32>> {
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
    fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
        let b = read_bytes(r, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
        let b = read_bytes(r, n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    let magic = read_bytes(&mut r, 4)?;
    if magic != CAES_MAGIC {
        return Err(Error::BadMagic {
            expected: CAES_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let acts = read_bytes(&mut r, 2)?;
        let enc_act = Activation::from_code(acts[0])
            .ok_or_else(|| Error::InvalidParam(format!("bad activation code {}", acts[0])))?;
        let dec_act = Activation::from_code(acts[1])
            .ok_or_else(|| Error::InvalidParam(format!("bad activation code {}", acts[1])))?;
        let pool = read_u32(&mut r)? as usize;
        let k = read_u32(&mut r)? as usize;
        let j = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let weights = read_f32s(&mut r, k * j * n * n * n)?;
        let enc_biases = read_f32s(&mut r, k)?;
        let dec_biases = read_f32s(&mut r, j)?;
        let encoder = KernelBank::new(k, j, n, weights, enc_biases)?;
        let mut layer = CaeLayer::new(encoder, enc_act, dec_act, pool)?;
        layer.decoder_biases = dec_biases;
        layers.push(layer);
    }
    CaeStack::new(layers)
}
