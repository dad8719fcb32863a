//! The three networks: context encoder-decoder, discriminator, and the
//! fixed feature network used by the structural loss and the refiner.
//!
//! All forward passes run on a [`Tape`](crate::tensor::tape::Tape) so the
//! same code path serves inference (read the value) and training (call
//! backward). Parameters are plain tensors bound onto a tape per pass;
//! binding as constants freezes them.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Encoder convolutions: 4x4 filters, stride 2, pad 1 (each layer halves
/// the spatial extent).
pub const ENC_KERNEL: usize = 4;
pub const ENC_STRIDE: usize = 2;
pub const ENC_PAD: usize = 1;
/// Decoder convolutions after nearest-neighbor upsampling: 3x3, stride 1,
/// pad 1 (extent preserved).
pub const DEC_KERNEL: usize = 3;

/// One convolutional layer: kernels kh x kw x c_in x c_out plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// One fully connected layer: weight out x in plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

// ---- context encoder ----------------------------------------------------

/// Geometry and widths of the context encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CeConfig {
    /// Input image side M (square).
    pub input_size: usize,
    /// Side of the masked square.
    pub hole_size: usize,
    /// Side of the predicted square (= M/2; hole + 2 * band).
    pub prediction_size: usize,
    /// Output channels of each encoder convolution.
    pub encoder_channels: Vec<usize>,
    /// Width of the fully connected bottleneck.
    pub bottleneck: usize,
    /// Output channels of each decoder convolution; the last entry is 3.
    pub decoder_channels: Vec<usize>,
}

impl CeConfig {
    /// Full-scale preset: 128-pixel inputs, 64-pixel prediction, 56-pixel
    /// hole, five encoder layers, bottleneck 2000.
    pub fn paper() -> Self {
        CeConfig {
            input_size: 128,
            hole_size: 56,
            prediction_size: 64,
            encoder_channels: vec![64, 64, 128, 256, 512],
            bottleneck: 2000,
            decoder_channels: vec![256, 128, 64, 3],
        }
    }

    /// Desk preset with the same geometry ratios: 32-pixel inputs, 16-pixel
    /// prediction, 12-pixel hole.
    pub fn desk() -> Self {
        CeConfig {
            input_size: 32,
            hole_size: 12,
            prediction_size: 16,
            encoder_channels: vec![16, 16, 32, 64],
            bottleneck: 128,
            decoder_channels: vec![32, 16, 3],
        }
    }

    /// Width of the overlap band between prediction and known context.
    pub fn band_width(&self) -> usize {
        (self.prediction_size - self.hole_size) / 2
    }

    /// Spatial extent of the last encoder map.
    pub fn encoder_out_extent(&self) -> usize {
        self.input_size >> self.encoder_channels.len()
    }

    /// Element count of the last encoder map (the bottleneck's input).
    pub fn encoder_out_elems(&self) -> usize {
        let e = self.encoder_out_extent();
        e * e * *self.encoder_channels.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.encoder_channels.len();
        if n < 2 {
            return Err(Error::Config("need at least two encoder layers".into()));
        }
        if self.input_size % (1 << n) != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^{} encoder layers",
                self.input_size, n
            )));
        }
        if self.prediction_size * 2 != self.input_size {
            return Err(Error::Config(format!(
                "prediction size {} must be half of input size {}",
                self.prediction_size, self.input_size
            )));
        }
        if self.hole_size >= self.prediction_size
            || (self.prediction_size - self.hole_size) % 2 != 0
        {
            return Err(Error::Config(format!(
                "hole {} must fit centrally inside prediction {}",
                self.hole_size, self.prediction_size
            )));
        }
        if self.decoder_channels.len() != n - 1 {
            return Err(Error::Config(format!(
                "decoder must mirror the last {} encoder layers, got {} layers",
                n - 1,
                self.decoder_channels.len()
            )));
        }
        if self.decoder_channels.last() != Some(&3) {
            return Err(Error::Config("decoder must end in 3 channels".into()));
        }
        Ok(())
    }
}

/// Learnable weights of the context encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CeParams {
    pub config: CeConfig,
    pub encoder: Vec<ConvLayer>,
    pub fc_encode: DenseLayer,
    pub fc_decode: DenseLayer,
    pub decoder: Vec<ConvLayer>,
}

impl CeParams {
    /// He-style fan-in scaled random initialization, reproducible from the
    /// seed. Biases start at zero.
    pub fn init(config: &CeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let mut encoder = Vec::new();
        for &c_out in &config.encoder_channels {
            encoder.push(he_conv(&mut rng, ENC_KERNEL, ENC_KERNEL, c_in, c_out));
            c_in = c_out;
        }
        let flat = config.encoder_out_elems();
        let fc_encode = he_dense(&mut rng, config.bottleneck, flat);
        let fc_decode = he_dense(&mut rng, flat, config.bottleneck);
        let mut decoder = Vec::new();
        for &c_out in &config.decoder_channels {
            decoder.push(he_conv(&mut rng, DEC_KERNEL, DEC_KERNEL, c_in, c_out));
            c_in = c_out;
        }
        Ok(CeParams {
            config: config.clone(),
            encoder,
            fc_encode,
            fc_decode,
            decoder,
        })
    }

    /// All-zero weights; useful for contract tests (output is sigmoid(0)).
    pub fn zeros(config: &CeConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(p)
    }

    /// Parameter tensors in canonical order (encoder, bottleneck, decoder).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push(&l.kernels);
            out.push(&l.bias);
        }
        out.push(&self.fc_encode.weight);
        out.push(&self.fc_encode.bias);
        out.push(&self.fc_decode.weight);
        out.push(&self.fc_decode.bias);
        for l in &self.decoder {
            out.push(&l.kernels);
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.kernels);
            out.push(&mut l.bias);
        }
        out.push(&mut self.fc_encode.weight);
        out.push(&mut self.fc_encode.bias);
        out.push(&mut self.fc_decode.weight);
        out.push(&mut self.fc_decode.bias);
        for l in &mut self.decoder {
            out.push(&mut l.kernels);
            out.push(&mut l.bias);
        }
        out
    }

    /// Bind onto a tape. With `trainable` false the parameters act as
    /// constants (no gradients).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CeVars {
        CeVars {
            config: self.config.clone(),
            vars: self
                .tensors()
                .iter()
                .map(|t| tape.leaf((*t).clone(), trainable))
                .collect(),
        }
    }
}

/// Tape handles of a bound [`CeParams`], in canonical tensor order.
pub struct CeVars {
    pub config: CeConfig,
    vars: Vec<Var>,
}

impl CeVars {
    /// Gradients in canonical order (zeros where nothing flowed).
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad_or_zero(v)).collect()
    }
}

/// Run the context encoder: masked M x M x 3 image in, (M/2) x (M/2) x 3
/// prediction in [0,1] out.
pub fn ce_forward(tape: &mut Tape, vars: &CeVars, x: Var) -> Result<Var> {
    let cfg = &vars.config;
    let m = cfg.input_size;
    if tape.value(x).shape() != [m, m, 3] {
        return Err(Error::Shape(format!(
            "context encoder expects {m}x{m}x3 input, got {:?}",
            tape.value(x).shape()
        )));
    }
    let n_enc = cfg.encoder_channels.len();
    let mut h = x;
    let mut vi = 0;
    let mut next = || {
        let pair = (vars.vars[vi], vars.vars[vi + 1]);
        vi += 2;
        pair
    };
    for _ in 0..n_enc {
        let (k, b) = next();
        h = tape.conv2d(h, k, b, ENC_STRIDE, ENC_PAD)?;
        h = tape.relu(h);
    }
    let flat = cfg.encoder_out_elems();
    h = tape.reshape(h, &[flat])?;
    let (w1, b1) = next();
    h = tape.fully_connected(h, w1, b1)?;
    h = tape.relu(h);
    let (w2, b2) = next();
    h = tape.fully_connected(h, w2, b2)?;
    h = tape.relu(h);
    let e = cfg.encoder_out_extent();
    h = tape.reshape(h, &[e, e, *cfg.encoder_channels.last().unwrap()])?;
    let n_dec = cfg.decoder_channels.len();
    for i in 0..n_dec {
        let (k, b) = next();
        h = tape.upsample_nearest2(h)?;
        h = tape.conv2d(h, k, b, 1, 1)?;
        h = if i + 1 == n_dec {
            tape.sigmoid(h)
        } else {
            tape.relu(h)
        };
    }
    debug_assert_eq!(
        tape.value(h).shape(),
        [cfg.prediction_size, cfg.prediction_size, 3]
    );
    Ok(h)
}

/// Inference helper: forward on a throwaway tape and return the prediction.
pub fn ce_predict(params: &CeParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = params.bind(&mut tape, false);
    let y = ce_forward(&mut tape, &vars, xv)?;
    Ok(tape.value(y).clone())
}

// ---- discriminator --------------------------------------------------------

/// Discriminator geometry: stacked 4x4 stride-2 convolutions then a single
/// scalar head on the flattened final map.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscConfig {
    /// Input patch side (= prediction size of the paired encoder).
    pub input_size: usize,
    pub channels: Vec<usize>,
}

impl DiscConfig {
    pub fn paper() -> Self {
        DiscConfig {
            input_size: 64,
            channels: vec![32, 64, 128, 256],
        }
    }

    pub fn desk() -> Self {
        DiscConfig {
            input_size: 16,
            channels: vec![8, 16, 32, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("discriminator needs conv layers".into()));
        }
        if self.input_size % (1 << self.channels.len()) != 0 {
            return Err(Error::Config(format!(
                "discriminator input {} not divisible by 2^{}",
                self.input_size,
                self.channels.len()
            )));
        }
        Ok(())
    }

    fn head_inputs(&self) -> usize {
        let e = self.input_size >> self.channels.len();
        e * e * *self.channels.last().unwrap()
    }
}

/// Learnable weights of the discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscParams {
    pub config: DiscConfig,
    pub convs: Vec<ConvLayer>,
    pub head: DenseLayer,
}

impl DiscParams {
    pub fn init(config: &DiscConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let mut convs = Vec::new();
        for &c_out in &config.channels {
            convs.push(he_conv(&mut rng, ENC_KERNEL, ENC_KERNEL, c_in, c_out));
            c_in = c_out;
        }
        let head = he_dense(&mut rng, 1, config.head_inputs());
        Ok(DiscParams {
            config: config.clone(),
            convs,
            head,
        })
    }

    pub fn zeros(config: &DiscConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.convs {
            out.push(&l.kernels);
            out.push(&l.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.convs {
            out.push(&mut l.kernels);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DiscVars {
        DiscVars {
            config: self.config.clone(),
            vars: self
                .tensors()
                .iter()
                .map(|t| tape.leaf((*t).clone(), trainable))
                .collect(),
        }
    }
}

pub struct DiscVars {
    pub config: DiscConfig,
    vars: Vec<Var>,
}

impl DiscVars {
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad_or_zero(v)).collect()
    }
}

/// Probability that `patch` is natural, strictly inside (0,1).
pub fn disc_forward(tape: &mut Tape, vars: &DiscVars, patch: Var) -> Result<Var> {
    let s = vars.config.input_size;
    if tape.value(patch).shape() != [s, s, 3] {
        return Err(Error::Shape(format!(
            "discriminator expects {s}x{s}x3 input, got {:?}",
            tape.value(patch).shape()
        )));
    }
    let mut h = patch;
    let mut vi = 0;
    for _ in 0..vars.config.channels.len() {
        h = tape.conv2d(h, vars.vars[vi], vars.vars[vi + 1], ENC_STRIDE, ENC_PAD)?;
        h = tape.relu(h);
        vi += 2;
    }
    let flat = vars.config.head_inputs();
    h = tape.reshape(h, &[flat])?;
    h = tape.fully_connected(h, vars.vars[vi], vars.vars[vi + 1])?;
    h = tape.reshape(h, &[])?;
    Ok(tape.sigmoid(h))
}

pub fn disc_predict(params: &DiscParams, patch: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.constant(patch.clone());
    let vars = params.bind(&mut tape, false);
    let d = disc_forward(&mut tape, &vars, pv)?;
    tape.value(d).scalar_value()
}

// ---- feature network ------------------------------------------------------

/// Topology of the fixed feature network: blocks of 3x3 stride-1 pad-1
/// convolutions (each followed by ReLU) separated by 2x2 max pools. Layer
/// `j` of block `i` is addressed as tap `conv{i+1}_{j+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetConfig {
    pub block_channels: Vec<Vec<usize>>,
}

impl FeatureNetConfig {
    /// Recognition-net-sized topology down to conv4_1.
    pub fn paper() -> Self {
        FeatureNetConfig {
            block_channels: vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256, 256],
                vec![512],
            ],
        }
    }

    /// Same shape family at desk widths.
    pub fn desk() -> Self {
        FeatureNetConfig {
            block_channels: vec![vec![8, 8], vec![16, 16], vec![32, 32, 32], vec![64]],
        }
    }

    /// Resolve a tap name like `conv2_1` to (block index, conv index).
    pub fn resolve_tap(&self, tap: &str) -> Result<(usize, usize)> {
        let rest = tap
            .strip_prefix("conv")
            .ok_or_else(|| Error::Config(format!("unknown tap name {tap:?}")))?;
        let (b, i) = rest
            .split_once('_')
            .ok_or_else(|| Error::Config(format!("unknown tap name {tap:?}")))?;
        let (b, i): (usize, usize) = match (b.parse(), i.parse()) {
            (Ok(b), Ok(i)) => (b, i),
            _ => return Err(Error::Config(format!("unknown tap name {tap:?}"))),
        };
        if b == 0 || i == 0 || b > self.block_channels.len() || i > self.block_channels[b - 1].len()
        {
            return Err(Error::Config(format!(
                "tap {tap} does not exist in this feature net"
            )));
        }
        Ok((b - 1, i - 1))
    }

    /// Cumulative downsampling factor at a tap (2^pools before it).
    pub fn tap_stride(&self, tap: &str) -> Result<usize> {
        let (b, _) = self.resolve_tap(tap)?;
        Ok(1 << b)
    }

    /// Channel count of a tap's feature map.
    pub fn tap_channels(&self, tap: &str) -> Result<usize> {
        let (b, i) = self.resolve_tap(tap)?;
        Ok(self.block_channels[b][i])
    }
}

/// Fixed weights of the feature network. Always bound as constants; a full
/// training run leaves them bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetParams {
    pub config: FeatureNetConfig,
    pub blocks: Vec<Vec<ConvLayer>>,
    /// Per-channel mean subtracted from inputs before the first convolution.
    pub channel_mean: [f64; 3],
}

impl FeatureNetParams {
    /// Seeded random, frozen weights. The channel mean defaults to mid-gray
    /// and may be replaced by a dataset mean before training.
    pub fn init(config: &FeatureNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let mut blocks = Vec::new();
        for chans in &config.block_channels {
            let mut layers = Vec::new();
            for &c_out in chans {
                layers.push(he_conv(&mut rng, 3, 3, c_in, c_out));
                c_in = c_out;
            }
            blocks.push(layers);
        }
        FeatureNetParams {
            config: config.clone(),
            blocks,
            channel_mean: [0.5, 0.5, 0.5],
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for l in b {
                out.push(&l.kernels);
                out.push(&l.bias);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for l in b {
                out.push(&mut l.kernels);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> FeatureNetVars {
        FeatureNetVars {
            config: self.config.clone(),
            channel_mean: self.channel_mean,
            vars: self
                .tensors()
                .iter()
                .map(|t| tape.constant((*t).clone()))
                .collect(),
        }
    }
}

pub struct FeatureNetVars {
    pub config: FeatureNetConfig,
    channel_mean: [f64; 3],
    vars: Vec<Var>,
}

/// Feature maps at the requested taps. The input is mean-subtracted, then
/// run through conv+ReLU layers with a 2x2 max pool between blocks; each
/// tap yields the post-ReLU activation of its layer. Spatial extents must
/// stay divisible by 2 up to the deepest requested tap.
pub fn featnet_forward(
    tape: &mut Tape,
    vars: &FeatureNetVars,
    img: Var,
    taps: &[String],
) -> Result<BTreeMap<String, Var>> {
    let mut out = BTreeMap::new();
    if taps.is_empty() {
        return Ok(out);
    }
    // Deepest (block, conv) needed.
    let mut deepest = (0usize, 0usize);
    for t in taps {
        let bi = vars.config.resolve_tap(t)?;
        if bi > deepest {
            deepest = bi;
        }
    }
    let shape = tape.value(img).shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Shape(format!(
            "feature net expects h x w x 3 input, got {shape:?}"
        )));
    }
    let mean = Tensor::from_fn(&shape, |i| vars.channel_mean[i % 3]);
    let mean = tape.constant(mean);
    let mut h = tape.sub(img, mean)?;

    let mut vi = 0;
    for (b, block) in vars.config.block_channels.iter().enumerate() {
        if b > 0 {
            // Pool down before entering this block.
            h = tape.maxpool2(h).map_err(|e| {
                let first_needy = taps
                    .iter()
                    .find(|t| vars.config.resolve_tap(t).map(|r| r.0 >= b).unwrap_or(false))
                    .cloned()
                    .unwrap_or_default();
                Error::Shape(format!("cannot reach tap {first_needy}: {e}"))
            })?;
        }
        for i in 0..block.len() {
            let (k, bias) = (vars.vars[vi], vars.vars[vi + 1]);
            vi += 2;
            h = tape.conv2d(h, k, bias, 1, 1)?;
            h = tape.relu(h);
            let name = format!("conv{}_{}", b + 1, i + 1);
            if taps.contains(&name) {
                out.insert(name, h);
            }
            if (b, i) == deepest {
                return Ok(out);
            }
        }
    }
    Ok(out)
}

/// Plain-tensor feature extraction on a throwaway tape.
pub fn featnet_features(
    params: &FeatureNetParams,
    img: &Tensor,
    taps: &[String],
) -> Result<BTreeMap<String, Tensor>> {
    let mut tape = Tape::new();
    let iv = tape.constant(img.clone());
    let vars = params.bind(&mut tape);
    let map = featnet_forward(&mut tape, &vars, iv, taps)?;
    Ok(map
        .into_iter()
        .map(|(k, v)| (k, tape.value(v).clone()))
        .collect())
}

// ---- initialization helpers ------------------------------------------------

fn he_conv(rng: &mut ChaCha8Rng, kh: usize, kw: usize, c_in: usize, c_out: usize) -> ConvLayer {
    let fan_in = (kh * kw * c_in) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
    ConvLayer {
        kernels: Tensor::from_fn(&[kh, kw, c_in, c_out], |_| normal.sample(rng)),
        bias: Tensor::zeros(&[c_out]),
    }
}

fn he_dense(rng: &mut ChaCha8Rng, n_out: usize, n_in: usize) -> DenseLayer {
    let normal = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).unwrap();
    DenseLayer {
        weight: Tensor::from_fn(&[n_out, n_in], |_| normal.sample(rng)),
        bias: Tensor::zeros(&[n_out]),
    }
}
