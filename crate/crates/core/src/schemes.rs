//! The four transmission strategies: multi-decoder, residual, single-decoder
//! with masking, and the single-layer baseline. Each composes codec + channel
//! into a differentiable end-to-end graph.
//!
//! Every transmitted layer block is power-normalized on its own, then sent
//! through the channel; under slow fading one complex gain covers all blocks
//! of one image within a forward pass.

use ndarray::{s, Array2, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    apply_channel, channel_backward, normalize_backward, normalize_slice, sample_fading_gain,
    sample_noise, ChannelKind, ChannelSpec,
};
use crate::codec::{
    feature_to_flat, flat_to_feature, CodecConfig, Decoder, Encoder, ImageBatch, OutputActivation,
};
use crate::error::{Error, Result};
use crate::nn::ParamArena;

/// Per-layer channel bandwidths `k_i` against a source of dimension `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub bandwidths: Vec<usize>,
    pub source_dim: usize,
}

impl LayerPlan {
    pub fn new(bandwidths: Vec<usize>, source_dim: usize) -> Self {
        Self { bandwidths, source_dim }
    }

    pub fn num_layers(&self) -> usize {
        self.bandwidths.len()
    }

    /// `k = sum k_i`.
    pub fn total_symbols(&self) -> usize {
        self.bandwidths.iter().sum()
    }

    /// Cumulative symbol counts `sum_{j<=i} k_j` for `i = 1..=L`.
    pub fn cumulative(&self) -> Vec<usize> {
        let mut acc = 0;
        self.bandwidths
            .iter()
            .map(|k| {
                acc += k;
                acc
            })
            .collect()
    }

    /// Bandwidth compression ratio of layer `i` as an exact reduced rational.
    pub fn ratio(&self, layer: usize) -> (usize, usize) {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let k = self.bandwidths[layer];
        let g = gcd(k, self.source_dim);
        (k / g, self.source_dim / g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::InvalidConfig("layer plan needs at least one layer".into()));
        }
        if self.bandwidths.iter().any(|&k| k == 0) {
            return Err(Error::InvalidConfig("layer bandwidths must be positive".into()));
        }
        if self.source_dim == 0 {
            return Err(Error::InvalidConfig("source dimension must be positive".into()));
        }
        Ok(())
    }

    /// Interleaved-real index ranges of each layer block in the flat vector.
    fn block_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.bandwidths.len());
        let mut start = 0;
        for &k in &self.bandwidths {
            out.push((start, start + 2 * k));
            start += 2 * k;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    MultiDecoder,
    Residual,
    SingleDecoder,
    SingleLayerBaseline,
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SchemeKind::MultiDecoder => "multi-decoder",
            SchemeKind::Residual => "residual",
            SchemeKind::SingleDecoder => "single-decoder",
            SchemeKind::SingleLayerBaseline => "baseline",
        };
        write!(f, "{s}")
    }
}

/// How a residual transmitter learns what the receiver decoded so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feedback {
    /// Transmitter-side Monte-Carlo estimate over `m` channel realizations.
    Estimated,
    /// Idealized perfect channel output feedback.
    Perfect,
}

/// Prefix mask over the received symbol vector of a single-decoder model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSample {
    /// Number of leading symbols kept.
    pub prefix_symbols: usize,
    /// Total symbols in the full vector.
    pub total_symbols: usize,
}

impl MaskSample {
    pub fn full(total_symbols: usize) -> Self {
        Self { prefix_symbols: total_symbols, total_symbols }
    }

    pub fn is_full(&self) -> bool {
        self.prefix_symbols == self.total_symbols
    }

    /// Binary mask over the `2k` interleaved reals: ones on the prefix.
    pub fn as_binary(&self) -> Vec<f64> {
        let mut m = vec![0.0; 2 * self.total_symbols];
        m[..2 * self.prefix_symbols].iter_mut().for_each(|v| *v = 1.0);
        m
    }
}

/// Uniform draw over the `L` cumulative bandwidths; one mask per batch.
pub fn sample_mask(plan: &LayerPlan, rng: &mut impl Rng) -> MaskSample {
    let cum = plan.cumulative();
    let idx = rng.gen_range(0..cum.len());
    MaskSample { prefix_symbols: cum[idx], total_symbols: plan.total_symbols() }
}

/// Channel gain/noise draws for one batched transmission of flat width `2k`.
pub struct TransmissionDraw {
    /// One gain per (image, layer); `None` under AWGN.
    gains: Vec<Option<(f64, f64)>>,
    noise: Array2<f64>,
    num_layers: usize,
}

impl TransmissionDraw {
    fn gain(&self, image: usize, layer: usize) -> Option<(f64, f64)> {
        self.gains[image * self.num_layers + layer]
    }
}

/// A trained (or initialized) encoder/decoder ensemble for one scheme.
pub struct SchemeModel {
    pub kind: SchemeKind,
    pub plan: LayerPlan,
    pub codec: CodecConfig,
    pub channel_kind: ChannelKind,
    pub train_snr_db: f64,
    pub seed: u64,
    /// Channel realizations used for transmitter-side receiver estimates.
    pub m_eval: usize,
    /// Draw an independent fading gain per layer instead of per image.
    pub per_layer_fading: bool,
    pub params: ParamArena,
    encoders: Vec<Encoder>,
    decoders: Vec<Decoder>,
}

impl SchemeModel {
    /// Build and randomly initialize a model; `seed` fixes the parameters.
    pub fn build(
        kind: SchemeKind,
        plan: LayerPlan,
        mut codec: CodecConfig,
        channel_kind: ChannelKind,
        train_snr_db: f64,
        seed: u64,
        m_eval: usize,
    ) -> Result<Self> {
        plan.validate()?;
        codec.total_symbols = plan.total_symbols();
        codec.validate()?;
        if codec.source_dim() != plan.source_dim {
            return Err(Error::ConfigMismatch(format!(
                "plan source_dim {} vs image shape {:?}",
                plan.source_dim, codec.image_shape
            )));
        }
        for &k in &plan.bandwidths {
            codec.depth_for_symbols(k)?;
        }
        if m_eval == 0 {
            return Err(Error::InvalidM(0));
        }

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamArena::new();
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        let total = plan.total_symbols();
        match kind {
            SchemeKind::MultiDecoder => {
                encoders.push(Encoder::new(&mut params, "encoder", &codec, total, &mut rng)?);
                for (i, cum) in plan.cumulative().into_iter().enumerate() {
                    decoders.push(Decoder::new(
                        &mut params,
                        &format!("decoder{i}"),
                        &codec,
                        cum,
                        OutputActivation::Sigmoid,
                        &mut rng,
                    )?);
                }
            }
            SchemeKind::Residual => {
                for (i, &k) in plan.bandwidths.iter().enumerate() {
                    encoders.push(Encoder::new(
                        &mut params,
                        &format!("encoder{i}"),
                        &codec,
                        k,
                        &mut rng,
                    )?);
                    let act =
                        if i == 0 { OutputActivation::Sigmoid } else { OutputActivation::Tanh };
                    decoders.push(Decoder::new(
                        &mut params,
                        &format!("decoder{i}"),
                        &codec,
                        k,
                        act,
                        &mut rng,
                    )?);
                }
            }
            SchemeKind::SingleDecoder | SchemeKind::SingleLayerBaseline => {
                encoders.push(Encoder::new(&mut params, "encoder", &codec, total, &mut rng)?);
                decoders.push(Decoder::new(
                    &mut params,
                    "decoder",
                    &codec,
                    total,
                    OutputActivation::Sigmoid,
                    &mut rng,
                )?);
            }
        }
        Ok(Self {
            kind,
            plan,
            codec,
            channel_kind,
            train_snr_db,
            seed,
            m_eval,
            per_layer_fading: false,
            params,
            encoders,
            decoders,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }

    pub fn num_layers(&self) -> usize {
        self.plan.num_layers()
    }

    /// Number of progressively refined reconstructions the model can emit.
    pub fn eval_layer_count(&self) -> usize {
        match self.kind {
            SchemeKind::SingleLayerBaseline => 1,
            _ => self.plan.num_layers(),
        }
    }

    pub fn encoder(&self, i: usize) -> &Encoder {
        &self.encoders[i]
    }

    pub fn decoder(&self, i: usize) -> &Decoder {
        &self.decoders[i]
    }

    /// Raw (unnormalized) symbol reals `(batch, 2k)` of the first encoder.
    pub fn encode(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        crate::codec::encode_raw(&self.params, &self.encoders[0], &self.codec, x)
    }

    /// Decode received symbol reals with the decoder matching their width;
    /// single-decoder models zero-pad shorter prefixes to full width.
    pub fn decode(&self, zhat: &Array2<f64>) -> Result<ImageBatch> {
        let width = zhat.dim().1;
        match self.kind {
            SchemeKind::SingleDecoder => {
                let full = 2 * self.plan.total_symbols();
                if width > full || width == 0 {
                    return Err(Error::ShapeMismatch {
                        expected: format!("between 2 and {full} reals"),
                        got: format!("{width}"),
                    });
                }
                let mut padded = Array2::zeros((zhat.dim().0, full));
                padded.slice_mut(s![.., 0..width]).assign(zhat);
                crate::codec::decode_flat(&self.params, &self.decoders[0], &self.codec, &padded)
            }
            SchemeKind::MultiDecoder => {
                for (i, cum) in self.plan.cumulative().into_iter().enumerate() {
                    if width == 2 * cum {
                        return crate::codec::decode_flat(
                            &self.params,
                            &self.decoders[i],
                            &self.codec,
                            zhat,
                        );
                    }
                }
                Err(Error::ShapeMismatch {
                    expected: "a cumulative layer width".into(),
                    got: format!("{width}"),
                })
            }
            SchemeKind::Residual | SchemeKind::SingleLayerBaseline => {
                crate::codec::decode_flat(&self.params, &self.decoders[0], &self.codec, zhat)
            }
        }
    }

    /// Power budget; fixed at 1 (SNR is the only free channel parameter).
    pub fn power_budget(&self) -> f64 {
        1.0
    }

    /// Sample gains and noise for one batched transmission over `blocks`
    /// layer blocks and flat width `width`.
    pub fn sample_transmission(
        &self,
        batch: usize,
        width: usize,
        blocks: usize,
        spec: &ChannelSpec,
        rng: &mut impl Rng,
    ) -> TransmissionDraw {
        let sigma2 = spec.noise_power(self.power_budget());
        let fading = spec.kind == ChannelKind::RayleighSlow;
        let mut gains = Vec::with_capacity(batch * blocks);
        let mut noise = Array2::zeros((batch, width));
        for b in 0..batch {
            if fading {
                if self.per_layer_fading {
                    for _ in 0..blocks {
                        gains.push(Some(sample_fading_gain(rng)));
                    }
                } else {
                    let g = Some(sample_fading_gain(rng));
                    for _ in 0..blocks {
                        gains.push(g);
                    }
                }
            } else {
                for _ in 0..blocks {
                    gains.push(None);
                }
            }
            if sigma2 > 0.0 {
                let row = sample_noise(width, sigma2, rng);
                noise.row_mut(b).assign(&ndarray::Array1::from_vec(row));
            }
        }
        TransmissionDraw { gains, noise, num_layers: blocks }
    }
}

/// Per-image block power normalization of `raw` under the given ranges.
///
/// With `substitute_degenerate`, an (almost) all-zero block is perturbed in
/// place by an alternating epsilon before normalizing, which keeps early
/// training alive; otherwise the degenerate block is an error.
fn normalize_blocks(
    raw: &mut Array2<f64>,
    ranges: &[(usize, usize)],
    p: f64,
    substitute_degenerate: bool,
) -> Result<Array2<f64>> {
    let (batch, width) = raw.dim();
    let mut z = Array2::zeros((batch, width));
    let raw_flat = raw.as_slice_mut().expect("standard layout");
    let z_flat = z.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for &(start, end) in ranges {
            let (rs, re) = (b * width + start, b * width + end);
            let block = &mut raw_flat[rs..re];
            if block.iter().map(|v| v * v).sum::<f64>().sqrt() < crate::channel::ALL_ZERO_NORM {
                if !substitute_degenerate {
                    return Err(Error::AllZeroInput);
                }
                for (i, v) in block.iter_mut().enumerate() {
                    *v += if i % 2 == 0 { 1e-8 } else { -1e-8 };
                }
            }
            normalize_slice(block, p, &mut z_flat[rs..re])?;
        }
    }
    Ok(z)
}

fn normalize_blocks_backward(
    raw: &Array2<f64>,
    ranges: &[(usize, usize)],
    p: f64,
    gz: &Array2<f64>,
    graw: &mut Array2<f64>,
) {
    let (batch, width) = raw.dim();
    let raw_flat = raw.as_slice().expect("standard layout");
    let gz_flat = gz.as_slice().expect("standard layout");
    let graw_flat = graw.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for &(start, end) in ranges {
            let (rs, re) = (b * width + start, b * width + end);
            normalize_backward(&raw_flat[rs..re], p, &gz_flat[rs..re], &mut graw_flat[rs..re]);
        }
    }
}

fn apply_transmission(
    z: &Array2<f64>,
    ranges: &[(usize, usize)],
    draw: &TransmissionDraw,
) -> Array2<f64> {
    let (batch, width) = z.dim();
    let mut zhat = Array2::zeros((batch, width));
    let z_flat = z.as_slice().expect("standard layout");
    let n_flat = draw.noise.as_slice().expect("standard layout");
    let o_flat = zhat.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for (l, &(start, end)) in ranges.iter().enumerate() {
            let (rs, re) = (b * width + start, b * width + end);
            apply_channel(&z_flat[rs..re], draw.gain(b, l), &n_flat[rs..re], &mut o_flat[rs..re]);
        }
    }
    zhat
}

fn transmission_backward(
    gzhat: &Array2<f64>,
    ranges: &[(usize, usize)],
    draw: &TransmissionDraw,
    gz: &mut Array2<f64>,
) {
    let (batch, width) = gzhat.dim();
    let g_flat = gzhat.as_slice().expect("standard layout");
    let o_flat = gz.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for (l, &(start, end)) in ranges.iter().enumerate() {
            let (rs, re) = (b * width + start, b * width + end);
            channel_backward(&g_flat[rs..re], draw.gain(b, l), &mut o_flat[rs..re]);
        }
    }
}

/// Mean over pixels of the squared error, per image, in `[0,1]` scale.
pub(crate) fn per_image_mse01(x: &Array4<f64>, y: &Array4<f64>) -> Vec<f64> {
    let (batch, c, h, w) = x.dim();
    let n = (c * h * w) as f64;
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice().expect("standard layout");
    (0..batch)
        .map(|b| {
            let off = b * (c * h * w);
            let mut acc = 0.0;
            for i in 0..(c * h * w) {
                let d = xs[off + i] - ys[off + i];
                acc += d * d;
            }
            acc / n
        })
        .collect()
}

/// Double average of the per-image MSE distortion over layers and batch,
/// computed on `[0,1]` pixels.
pub fn multi_layer_loss(x: &ImageBatch, reconstructions: &[ImageBatch]) -> Result<f64> {
    if reconstructions.is_empty() || x.batch_size() == 0 {
        return Err(Error::EmptyBatch);
    }
    let layers = reconstructions.len() as f64;
    let batch = x.batch_size() as f64;
    let mut total = 0.0;
    for r in reconstructions {
        if r.pixels.dim() != x.pixels.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", x.pixels.dim()),
                got: format!("{:?}", r.pixels.dim()),
            });
        }
        total += per_image_mse01(&x.pixels, &r.pixels).iter().sum::<f64>();
    }
    Ok(total / (layers * batch))
}

fn check_kind(model: &SchemeModel, kind: SchemeKind) -> Result<()> {
    if model.kind != kind {
        return Err(Error::ConfigMismatch(format!(
            "operation requires a {kind} model, got {}",
            model.kind
        )));
    }
    Ok(())
}

fn check_input(model: &SchemeModel, x: &ImageBatch) -> Result<()> {
    if x.image_shape() != model.codec.image_shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", model.codec.image_shape),
            got: format!("{:?}", x.image_shape()),
        });
    }
    if x.batch_size() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// One encoder pass, per-layer normalization and transmission, then every
/// decoder reads its cumulative prefix. Returns `L` reconstructions.
pub fn multi_decoder_forward(
    model: &SchemeModel,
    x: &ImageBatch,
    spec: &ChannelSpec,
    rng: &mut impl Rng,
) -> Result<Vec<ImageBatch>> {
    check_kind(model, SchemeKind::MultiDecoder)?;
    let zhat = shared_encoder_transmit(model, x, spec, rng)?;
    let mut out = Vec::with_capacity(model.plan.num_layers());
    for (i, cum) in model.plan.cumulative().into_iter().enumerate() {
        let prefix = zhat.slice(s![.., 0..2 * cum]).to_owned();
        let feat = flat_to_feature(&prefix, model.codec.grid())?;
        let (recon, _) = model.decoders[i].forward(&model.params, &feat);
        out.push(ImageBatch::new(recon));
    }
    Ok(out)
}

/// Single-layer reference: one encoder, one transmission over all `k`
/// symbols, one decoder.
pub fn baseline_forward(
    model: &SchemeModel,
    x: &ImageBatch,
    spec: &ChannelSpec,
    rng: &mut impl Rng,
) -> Result<ImageBatch> {
    check_kind(model, SchemeKind::SingleLayerBaseline)?;
    let zhat = shared_encoder_transmit(model, x, spec, rng)?;
    let feat = flat_to_feature(&zhat, model.codec.grid())?;
    let (recon, _) = model.decoders[0].forward(&model.params, &feat);
    Ok(ImageBatch::new(recon))
}

/// Full-width encoding and transmission, then the received vector is
/// element-wise masked before the single decoder.
pub fn single_decoder_forward(
    model: &SchemeModel,
    x: &ImageBatch,
    spec: &ChannelSpec,
    mask: &MaskSample,
    rng: &mut impl Rng,
) -> Result<ImageBatch> {
    check_kind(model, SchemeKind::SingleDecoder)?;
    if mask.total_symbols != model.plan.total_symbols() {
        return Err(Error::ShapeMismatch {
            expected: format!("mask over {} symbols", model.plan.total_symbols()),
            got: format!("{}", mask.total_symbols),
        });
    }
    let mut zhat = shared_encoder_transmit(model, x, spec, rng)?;
    apply_mask(&mut zhat, mask);
    let feat = flat_to_feature(&zhat, model.codec.grid())?;
    let (recon, _) = model.decoders[0].forward(&model.params, &feat);
    Ok(ImageBatch::new(recon))
}

fn apply_mask(zhat: &mut Array2<f64>, mask: &MaskSample) {
    let keep = 2 * mask.prefix_symbols;
    let width = zhat.dim().1;
    if keep < width {
        zhat.slice_mut(s![.., keep..]).fill(0.0);
    }
}

/// Encode with the shared encoder, normalize each block, transmit.
fn shared_encoder_transmit(
    model: &SchemeModel,
    x: &ImageBatch,
    spec: &ChannelSpec,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    check_input(model, x)?;
    let (feat, _) = model.encoders[0].forward(&model.params, &x.pixels);
    let mut raw = feature_to_flat(&feat);
    let ranges = model.plan.block_ranges();
    let z = normalize_blocks(&mut raw, &ranges, model.power_budget(), false)?;
    let draw = model.sample_transmission(x.batch_size(), z.dim().1, ranges.len(), spec, rng);
    Ok(apply_transmission(&z, &ranges, &draw))
}

/// One frozen residual-pair pipeline pass: encode `input`, transmit `k_i`
/// symbols, decode the contribution.
fn residual_pair_pass(
    model: &SchemeModel,
    layer: usize,
    input: &Array4<f64>,
    spec: &ChannelSpec,
    rng: &mut impl Rng,
) -> Result<Array4<f64>> {
    let (feat, _) = model.encoders[layer].forward(&model.params, input);
    let mut raw = feature_to_flat(&feat);
    let ranges = [(0, raw.dim().1)];
    let z = normalize_blocks(&mut raw, &ranges, model.power_budget(), false)?;
    let draw = model.sample_transmission(input.dim().0, z.dim().1, 1, spec, rng);
    let zhat = apply_transmission(&z, &ranges, &draw);
    let feat_hat = flat_to_feature(&zhat, model.codec.grid())?;
    let (contrib, _) = model.decoders[layer].forward(&model.params, &feat_hat);
    Ok(contrib)
}

/// Transmitter-side estimate of the receiver's decoded contribution of
/// `layer` (0-based): the frozen pipeline is run `m` times with independent
/// channel draws and averaged pixel-wise. Estimates of earlier layers feed
/// the residual input of later ones.
pub fn estimate_receiver_output(
    model: &SchemeModel,
    x: &ImageBatch,
    layer: usize,
    spec: &ChannelSpec,
    m: usize,
    rng: &mut impl Rng,
) -> Result<ImageBatch> {
    check_kind(model, SchemeKind::Residual)?;
    check_input(model, x)?;
    if m < 1 {
        return Err(Error::InvalidM(m));
    }
    let mut estimates: Vec<Array4<f64>> = Vec::with_capacity(layer + 1);
    for l in 0..=layer {
        let mut input = x.pixels.clone();
        for est in &estimates {
            input -= est;
        }
        let mut mean = Array4::zeros(x.pixels.dim());
        for _ in 0..m {
            mean += &residual_pair_pass(model, l, &input, spec, rng)?;
        }
        mean /= m as f64;
        estimates.push(mean);
    }
    Ok(ImageBatch::new(estimates.pop().expect("layer estimate")))
}

/// Everything the residual chain produced, for diagnostics and tests.
pub struct ResidualTrace {
    /// Actual decoded contribution of each layer at the receiver.
    pub contributions: Vec<Array4<f64>>,
    /// Input each layer's encoder saw (layer 0 sees the image itself).
    pub encoder_inputs: Vec<Array4<f64>>,
    /// Clamped progressive reconstructions after each layer.
    pub reconstructions: Vec<ImageBatch>,
}

/// Sequential residual transmission: layer 1 sends the image, each later
/// layer sends the difference between the image and the transmitter's view
/// of what the receiver holds so far.
pub fn residual_forward(
    model: &SchemeModel,
    x: &ImageBatch,
    spec: &ChannelSpec,
    m: usize,
    feedback: Feedback,
    rng: &mut impl Rng,
) -> Result<Vec<ImageBatch>> {
    Ok(residual_forward_detailed(model, x, spec, m, feedback, rng)?.reconstructions)
}

pub fn residual_forward_detailed(
    model: &SchemeModel,
    x: &ImageBatch,
    spec: &ChannelSpec,
    m: usize,
    feedback: Feedback,
    rng: &mut impl Rng,
) -> Result<ResidualTrace> {
    check_kind(model, SchemeKind::Residual)?;
    check_input(model, x)?;
    if m < 1 {
        return Err(Error::InvalidM(m));
    }
    let layers = model.plan.num_layers();
    let mut contributions: Vec<Array4<f64>> = Vec::with_capacity(layers);
    let mut encoder_inputs: Vec<Array4<f64>> = Vec::with_capacity(layers);
    let mut estimates: Vec<Array4<f64>> = Vec::with_capacity(layers);
    let mut reconstructions = Vec::with_capacity(layers);
    let mut partial = Array4::zeros(x.pixels.dim());

    for l in 0..layers {
        // the transmitter's view of the receiver state before this layer
        let mut input = x.pixels.clone();
        for est in &estimates {
            input -= est;
        }
        let contrib = residual_pair_pass(model, l, &input, spec, rng)?;
        partial += &contrib;
        reconstructions.push(ImageBatch::new(partial.clone()).clamped());
        let estimate = match feedback {
            Feedback::Perfect => contrib.clone(),
            Feedback::Estimated => {
                let mut mean = Array4::zeros(x.pixels.dim());
                for _ in 0..m {
                    mean += &residual_pair_pass(model, l, &input, spec, rng)?;
                }
                mean / m as f64
            }
        };
        encoder_inputs.push(input);
        contributions.push(contrib);
        estimates.push(estimate);
    }
    Ok(ResidualTrace { contributions, encoder_inputs, reconstructions })
}

/// Loss value and per-layer distortions of one training step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub per_layer_mse01: Vec<f64>,
}

/// Training step of the multi-decoder scheme (also covers the baseline,
/// whose graph is the one-layer special case). Accumulates gradients.
pub fn multi_decoder_step(
    model: &mut SchemeModel,
    x: &ImageBatch,
    spec: &ChannelSpec,
    rng: &mut impl Rng,
) -> Result<StepStats> {
    debug_assert!(matches!(
        model.kind,
        SchemeKind::MultiDecoder | SchemeKind::SingleLayerBaseline
    ));
    check_input(model, x)?;
    let batch = x.batch_size();
    let n = model.codec.source_dim() as f64;
    let layers = model.decoders.len();
    let ranges = model.plan.block_ranges();
    let p = model.power_budget();

    let (feat, enc_cache) = model.encoders[0].forward(&model.params, &x.pixels);
    let mut raw = feature_to_flat(&feat);
    let z = normalize_blocks(&mut raw, &ranges, p, true)?;
    let draw = model.sample_transmission(batch, z.dim().1, ranges.len(), spec, rng);
    let zhat = apply_transmission(&z, &ranges, &draw);

    let cum = model.plan.cumulative();
    let mut gzhat = Array2::zeros(zhat.dim());
    let mut per_layer = Vec::with_capacity(layers);
    let mut loss = 0.0;
    for i in 0..layers {
        let width = 2 * cum[i];
        let prefix = zhat.slice(s![.., 0..width]).to_owned();
        let feat_i = flat_to_feature(&prefix, model.codec.grid())?;
        let (recon, dec_cache) = model.decoders[i].forward(&model.params, &feat_i);
        let mse: f64 = per_image_mse01(&x.pixels, &recon).iter().sum::<f64>() / batch as f64;
        per_layer.push(mse);
        loss += mse / layers as f64;

        // d(loss)/d(recon) of the layer-averaged batch-mean MSE
        let scale = 2.0 / (layers as f64 * batch as f64 * n);
        let grecon = (&recon - &x.pixels) * scale;
        let gfeat = model.decoders[i].backward(&mut model.params, &dec_cache, &grecon);
        let gflat = feature_to_flat(&gfeat);
        let mut slot = gzhat.slice_mut(s![.., 0..width]);
        slot += &gflat;
    }

    let mut gz = Array2::zeros(z.dim());
    transmission_backward(&gzhat, &ranges, &draw, &mut gz);
    let mut graw = Array2::zeros(raw.dim());
    normalize_blocks_backward(&raw, &ranges, p, &gz, &mut graw);
    let gfeat_enc = flat_to_feature(&graw, model.codec.grid())?;
    model.encoders[0].backward(&mut model.params, &enc_cache, &gfeat_enc);

    Ok(StepStats { loss, per_layer_mse01: per_layer })
}

/// Training step of the single-decoder scheme under a batch-level prefix
/// mask of the received symbols.
pub fn single_decoder_step(
    model: &mut SchemeModel,
    x: &ImageBatch,
    spec: &ChannelSpec,
    mask: &MaskSample,
    rng: &mut impl Rng,
) -> Result<StepStats> {
    debug_assert_eq!(model.kind, SchemeKind::SingleDecoder);
    check_input(model, x)?;
    let batch = x.batch_size();
    let n = model.codec.source_dim() as f64;
    let ranges = model.plan.block_ranges();
    let p = model.power_budget();

    let (feat, enc_cache) = model.encoders[0].forward(&model.params, &x.pixels);
    let mut raw = feature_to_flat(&feat);
    let z = normalize_blocks(&mut raw, &ranges, p, true)?;
    let draw = model.sample_transmission(batch, z.dim().1, ranges.len(), spec, rng);
    let mut zhat = apply_transmission(&z, &ranges, &draw);
    apply_mask(&mut zhat, mask);

    let feat_in = flat_to_feature(&zhat, model.codec.grid())?;
    let (recon, dec_cache) = model.decoders[0].forward(&model.params, &feat_in);
    let mse: f64 = per_image_mse01(&x.pixels, &recon).iter().sum::<f64>() / batch as f64;

    let scale = 2.0 / (batch as f64 * n);
    let grecon = (&recon - &x.pixels) * scale;
    let gfeat_in = model.decoders[0].backward(&mut model.params, &dec_cache, &grecon);
    let mut gzhat = feature_to_flat(&gfeat_in);
    apply_mask(&mut gzhat, mask); // masked symbols carry no gradient

    let mut gz = Array2::zeros(z.dim());
    transmission_backward(&gzhat, &ranges, &draw, &mut gz);
    let mut graw = Array2::zeros(raw.dim());
    normalize_blocks_backward(&raw, &ranges, p, &gz, &mut graw);
    let gfeat_enc = flat_to_feature(&graw, model.codec.grid())?;
    model.encoders[0].backward(&mut model.params, &enc_cache, &gfeat_enc);

    Ok(StepStats { loss: mse, per_layer_mse01: vec![mse] })
}

/// Training step of one residual layer; earlier layers run frozen with
/// fresh channel noise to produce this batch's residual target.
pub fn residual_step(
    model: &mut SchemeModel,
    layer: usize,
    x: &ImageBatch,
    spec: &ChannelSpec,
    rng: &mut impl Rng,
) -> Result<StepStats> {
    debug_assert_eq!(model.kind, SchemeKind::Residual);
    check_input(model, x)?;
    let batch = x.batch_size();
    let n = model.codec.source_dim() as f64;
    let p = model.power_budget();

    // frozen earlier layers: in-graph realizations, resampled every batch;
    // subtracting each contribution leaves exactly this layer's residual
    let mut input = x.pixels.clone();
    for l in 0..layer {
        let contrib = residual_pair_pass(model, l, &input.clone(), spec, rng)?;
        input -= &contrib;
    }
    let target = input.clone();

    let (feat, enc_cache) = model.encoders[layer].forward(&model.params, &input);
    let mut raw = feature_to_flat(&feat);
    let ranges = [(0, raw.dim().1)];
    let z = normalize_blocks(&mut raw, &ranges, p, true)?;
    let draw = model.sample_transmission(batch, z.dim().1, 1, spec, rng);
    let zhat = apply_transmission(&z, &ranges, &draw);
    let feat_hat = flat_to_feature(&zhat, model.codec.grid())?;
    let (contrib, dec_cache) = model.decoders[layer].forward(&model.params, &feat_hat);

    let mse: f64 = per_image_mse01(&target, &contrib).iter().sum::<f64>() / batch as f64;
    let scale = 2.0 / (batch as f64 * n);
    let gcontrib = (&contrib - &target) * scale;
    let gfeat_hat = model.decoders[layer].backward(&mut model.params, &dec_cache, &gcontrib);
    let gzhat = feature_to_flat(&gfeat_hat);
    let mut gz = Array2::zeros(z.dim());
    transmission_backward(&gzhat, &ranges, &draw, &mut gz);
    let mut graw = Array2::zeros(raw.dim());
    normalize_blocks_backward(&raw, &ranges, p, &gz, &mut graw);
    let gfeat_enc = flat_to_feature(&graw, model.codec.grid())?;
    model.encoders[layer].backward(&mut model.params, &enc_cache, &gfeat_enc);

    Ok(StepStats { loss: mse, per_layer_mse01: vec![mse] })
}

/// Progressive reconstructions of a trained model at evaluation time, one
/// per layer, regardless of scheme kind.
pub fn progressive_forward(
    model: &SchemeModel,
    x: &ImageBatch,
    spec: &ChannelSpec,
    feedback: Feedback,
    rng: &mut impl Rng,
) -> Result<Vec<ImageBatch>> {
    match model.kind {
        SchemeKind::MultiDecoder => multi_decoder_forward(model, x, spec, rng),
        SchemeKind::SingleLayerBaseline => Ok(vec![baseline_forward(model, x, spec, rng)?]),
        SchemeKind::Residual => residual_forward(model, x, spec, model.m_eval, feedback, rng),
        SchemeKind::SingleDecoder => {
            let zhat = shared_encoder_transmit(model, x, spec, rng)?;
            let mut out = Vec::with_capacity(model.plan.num_layers());
            for cum in model.plan.cumulative() {
                let mask =
                    MaskSample { prefix_symbols: cum, total_symbols: model.plan.total_symbols() };
                let mut masked = zhat.clone();
                apply_mask(&mut masked, &mask);
                let feat = flat_to_feature(&masked, model.codec.grid())?;
                let (recon, _) = model.decoders[0].forward(&model.params, &feat);
                out.push(ImageBatch::new(recon));
            }
            Ok(out)
        }
    }
}

/// Ids of all parameters belonging to one residual layer pair.
pub fn residual_layer_param_ids(model: &SchemeModel, layer: usize) -> Vec<crate::nn::ParamId> {
    let enc_prefix = format!("encoder{layer}.");
    let dec_prefix = format!("decoder{layer}.");
    model
        .params
        .ids()
        .filter(|&id| {
            let name = model.params.name(id);
            name.starts_with(&enc_prefix) || name.starts_with(&dec_prefix)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelKind;
    use ndarray::Array4;

    fn small_cfg() -> CodecConfig {
        // 16x16x3 images, 4x4 grid: keeps unit tests fast
        CodecConfig::with_geometry((16, 16, 3), 64)
    }

    fn plan2() -> LayerPlan {
        LayerPlan::new(vec![32, 32], 768)
    }

    fn images(rng: &mut ChaCha12Rng, batch: usize, side: usize) -> ImageBatch {
        ImageBatch::new(Array4::from_shape_simple_fn((batch, 3, side, side), || rng.gen::<f64>()))
    }

    fn awgn(snr: f64) -> ChannelSpec {
        ChannelSpec::new(ChannelKind::Awgn, snr, 0)
    }

    #[test]
    fn layer_plan_arithmetic() {
        let plan = LayerPlan::new(vec![256; 5], 3072);
        assert_eq!(plan.total_symbols(), 1280);
        assert_eq!(plan.cumulative(), vec![256, 512, 768, 1024, 1280]);
        assert_eq!(plan.ratio(0), (1, 12));
        // the deepest decoder of a five-layer stack consumes all 1280 symbols
        assert_eq!(*plan.cumulative().last().unwrap(), 1280);
    }

    #[test]
    fn multi_layer_loss_examples() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = images(&mut rng, 3, 16);
        // identical reconstructions: zero loss
        let loss = multi_layer_loss(&x, &[x.clone(), x.clone()]).unwrap();
        assert_eq!(loss, 0.0);
        // layer MSEs 0.02 and 0.01 average to 0.015
        let mut r1 = x.clone();
        r1.pixels += (0.02f64).sqrt(); // uniform per-pixel offset d gives MSE d^2
        let mut r2 = x.clone();
        r2.pixels += (0.01f64).sqrt();
        let loss = multi_layer_loss(&x, &[r1, r2]).unwrap();
        assert!((loss - 0.015).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn multi_layer_loss_matches_bruteforce_double_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = images(&mut rng, 3, 16);
        let recons: Vec<ImageBatch> = (0..3).map(|_| images(&mut rng, 3, 16)).collect();
        let loss = multi_layer_loss(&x, &recons).unwrap();

        // brute force: plain double loop over layers and samples
        let (b, c, h, w) = x.pixels.dim();
        let n = (c * h * w) as f64;
        let mut acc = 0.0;
        for r in &recons {
            for bi in 0..b {
                let mut d = 0.0;
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            let e = x.pixels[[bi, ci, hi, wi]] - r.pixels[[bi, ci, hi, wi]];
                            d += e * e;
                        }
                    }
                }
                acc += d / n;
            }
        }
        let brute = acc / (recons.len() as f64 * b as f64);
        assert!((loss - brute).abs() < 1e-9, "loss {loss} vs brute {brute}");
    }

    #[test]
    fn multi_layer_loss_rejects_empty() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = images(&mut rng, 2, 16);
        assert!(matches!(multi_layer_loss(&x, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn mask_sampling_is_uniform_over_cumulative_lengths() {
        let plan = plan2();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut counts = [0usize; 2];
        let draws = 10_000;
        for _ in 0..draws {
            let m = sample_mask(&plan, &mut rng);
            match m.prefix_symbols {
                32 => counts[0] += 1,
                64 => counts[1] += 1,
                other => panic!("unexpected prefix {other}"),
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.5).abs() < 0.02, "frequency {f}");
        }
        // single layer: always the full mask
        let plan1 = LayerPlan::new(vec![64], 768);
        let m = sample_mask(&plan1, &mut rng);
        assert!(m.is_full());
        // structural invariant: contiguous prefix of ones then zeros
        let bin = MaskSample { prefix_symbols: 32, total_symbols: 64 }.as_binary();
        assert!(bin[..64].iter().all(|&v| v == 1.0));
        assert!(bin[64..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_layer_block_is_power_normalized() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for kind in [
            SchemeKind::MultiDecoder,
            SchemeKind::Residual,
            SchemeKind::SingleDecoder,
            SchemeKind::SingleLayerBaseline,
        ] {
            let model =
                SchemeModel::build(kind, plan2(), small_cfg(), ChannelKind::Awgn, 10.0, 9, 1)
                    .unwrap();
            let x = images(&mut rng, 2, 16);
            let (feat, _) = model.encoders[0].forward(&model.params, &x.pixels);
            let mut raw = feature_to_flat(&feat);
            let ranges = match kind {
                SchemeKind::Residual => vec![(0, raw.dim().1)],
                _ => model.plan.block_ranges(),
            };
            let z = normalize_blocks(&mut raw, &ranges, 1.0, false).unwrap();
            for b in 0..2 {
                for &(s0, s1) in &ranges {
                    let block = z.slice(s![b, s0..s1]);
                    let k = (s1 - s0) as f64 / 2.0;
                    let power = block.iter().map(|v| v * v).sum::<f64>() / k;
                    assert!((power - 1.0).abs() < 1e-6, "block power {power} for {kind}");
                }
            }
        }
    }

    #[test]
    fn full_mask_is_bit_identical_to_unmasked_graph() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let model = SchemeModel::build(
            SchemeKind::SingleDecoder,
            plan2(),
            small_cfg(),
            ChannelKind::Awgn,
            10.0,
            11,
            1,
        )
        .unwrap();
        let x = images(&mut rng, 2, 16);
        let spec = awgn(10.0);
        let full = MaskSample::full(64);
        let masked = {
            let mut r = ChaCha12Rng::seed_from_u64(99);
            single_decoder_forward(&model, &x, &spec, &full, &mut r).unwrap()
        };
        let unmasked = {
            let mut r = ChaCha12Rng::seed_from_u64(99);
            let zhat = shared_encoder_transmit(&model, &x, &spec, &mut r).unwrap();
            let feat = flat_to_feature(&zhat, model.codec.grid()).unwrap();
            let (recon, _) = model.decoders[0].forward(&model.params, &feat);
            ImageBatch::new(recon)
        };
        assert_eq!(masked.pixels, unmasked.pixels);
    }

    #[test]
    fn residual_telescoping_under_perfect_noiseless_feedback() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let model = SchemeModel::build(
            SchemeKind::Residual,
            LayerPlan::new(vec![32, 32, 32], 768),
            small_cfg(),
            ChannelKind::Awgn,
            10.0,
            13,
            1,
        )
        .unwrap();
        let x = images(&mut rng, 2, 16);
        let spec = awgn(250.0); // noiseless
        let trace = residual_forward_detailed(
            &model,
            &x,
            &spec,
            1,
            Feedback::Perfect,
            &mut ChaCha12Rng::seed_from_u64(1),
        )
        .unwrap();
        // encoder input of layer i equals x minus the unclamped partial sum
        let mut partial = Array4::zeros(x.pixels.dim());
        for l in 0..3 {
            let expect = &x.pixels - &partial;
            let diff = (&trace.encoder_inputs[l] - &expect)
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-6, "layer {l} residual input off by {diff}");
            partial += &trace.contributions[l];
        }
        // progressive reconstructions are the clamped partial sums
        let mut acc = Array4::zeros(x.pixels.dim());
        for l in 0..3 {
            acc += &trace.contributions[l];
            let clamped = acc.mapv(|v: f64| v.clamp(0.0, 1.0));
            let diff = (&trace.reconstructions[l].pixels - &clamped)
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn estimate_is_independent_of_m_without_noise() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let model = SchemeModel::build(
            SchemeKind::Residual,
            plan2(),
            small_cfg(),
            ChannelKind::Awgn,
            10.0,
            17,
            1,
        )
        .unwrap();
        let x = images(&mut rng, 1, 16);
        let spec = awgn(300.0);
        let e1 =
            estimate_receiver_output(&model, &x, 0, &spec, 1, &mut ChaCha12Rng::seed_from_u64(2))
                .unwrap();
        let e5 =
            estimate_receiver_output(&model, &x, 0, &spec, 5, &mut ChaCha12Rng::seed_from_u64(3))
                .unwrap();
        let diff = (&e1.pixels - &e5.pixels).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
        assert!(matches!(
            estimate_receiver_output(&model, &x, 0, &spec, 0, &mut rng),
            Err(Error::InvalidM(0))
        ));
    }

    #[test]
    fn estimate_variance_shrinks_roughly_as_one_over_m() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let model = SchemeModel::build(
            SchemeKind::Residual,
            plan2(),
            small_cfg(),
            ChannelKind::Awgn,
            10.0,
            19,
            1,
        )
        .unwrap();
        let x = images(&mut rng, 1, 16);
        let spec = awgn(5.0);
        let reps = 24;
        let var_of = |m: usize| -> f64 {
            let runs: Vec<Array4<f64>> = (0..reps)
                .map(|r| {
                    let mut rr = ChaCha12Rng::seed_from_u64(1000 + r as u64 + m as u64 * 7919);
                    estimate_receiver_output(&model, &x, 0, &spec, m, &mut rr).unwrap().pixels
                })
                .collect();
            let mut mean = Array4::zeros(x.pixels.dim());
            for r in &runs {
                mean += r;
            }
            mean /= reps as f64;
            let mut var = 0.0;
            for r in &runs {
                var += (r - &mean).iter().map(|v| v * v).sum::<f64>();
            }
            var / (reps as f64 * 768.0)
        };
        let v1 = var_of(1);
        let v100 = var_of(100);
        let factor = v1 / v100;
        assert!(
            (50.0..=200.0).contains(&factor),
            "variance shrink factor {factor} (v1={v1}, v100={v100})"
        );
    }

    #[test]
    fn schemes_degenerate_to_the_same_single_layer_graph() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let plan = LayerPlan::new(vec![64], 768);
        let x = images(&mut rng, 2, 16);
        let spec = awgn(10.0);
        let mut losses = Vec::new();
        let mut counts = Vec::new();
        for kind in [
            SchemeKind::MultiDecoder,
            SchemeKind::Residual,
            SchemeKind::SingleDecoder,
            SchemeKind::SingleLayerBaseline,
        ] {
            let mut model =
                SchemeModel::build(kind, plan.clone(), small_cfg(), ChannelKind::Awgn, 10.0, 42, 1)
                    .unwrap();
            counts.push(model.param_count());
            let mut crng = ChaCha12Rng::seed_from_u64(77);
            let stats = match kind {
                SchemeKind::MultiDecoder | SchemeKind::SingleLayerBaseline => {
                    multi_decoder_step(&mut model, &x, &spec, &mut crng).unwrap()
                }
                SchemeKind::SingleDecoder => {
                    let mask = MaskSample::full(64);
                    single_decoder_step(&mut model, &x, &spec, &mask, &mut crng).unwrap()
                }
                SchemeKind::Residual => residual_step(&mut model, 0, &x, &spec, &mut crng).unwrap(),
            };
            losses.push(stats.loss);
        }
        for c in &counts[1..] {
            assert_eq!(*c, counts[0], "architectures differ: {counts:?}");
        }
        for l in &losses[1..] {
            assert!((l - losses[0]).abs() < 1e-12, "losses {losses:?}");
        }
    }

    #[test]
    fn multi_decoder_emits_one_reconstruction_per_layer() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let model = SchemeModel::build(
            SchemeKind::MultiDecoder,
            LayerPlan::new(vec![16, 16, 32], 768),
            small_cfg(),
            ChannelKind::Awgn,
            10.0,
            5,
            1,
        )
        .unwrap();
        let x = images(&mut rng, 2, 16);
        let outs = multi_decoder_forward(&model, &x, &awgn(10.0), &mut rng).unwrap();
        assert_eq!(outs.len(), 3);
        for o in &outs {
            assert_eq!(o.pixels.dim(), x.pixels.dim());
            assert!(o.in_unit_range());
        }
    }

    #[test]
    fn baseline_matches_single_layer_multi_decoder() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let plan = LayerPlan::new(vec![64], 768);
        let md = SchemeModel::build(
            SchemeKind::MultiDecoder,
            plan.clone(),
            small_cfg(),
            ChannelKind::Awgn,
            10.0,
            23,
            1,
        )
        .unwrap();
        let bl = SchemeModel::build(
            SchemeKind::SingleLayerBaseline,
            plan,
            small_cfg(),
            ChannelKind::Awgn,
            10.0,
            23,
            1,
        )
        .unwrap();
        let x = images(&mut rng, 2, 16);
        let spec = awgn(7.0);
        let a = multi_decoder_forward(&md, &x, &spec, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
        let b = baseline_forward(&bl, &x, &spec, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a[0].pixels, b.pixels);
    }

    #[test]
    fn fading_gain_shared_across_layer_blocks_of_one_image() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let model = SchemeModel::build(
            SchemeKind::MultiDecoder,
            plan2(),
            small_cfg(),
            ChannelKind::RayleighSlow,
            10.0,
            31,
            1,
        )
        .unwrap();
        let x = images(&mut rng, 2, 16);
        let spec = ChannelSpec::new(ChannelKind::RayleighSlow, 300.0, 0); // noiseless
        let (feat, _) = model.encoders[0].forward(&model.params, &x.pixels);
        let mut raw = feature_to_flat(&feat);
        let ranges = model.plan.block_ranges();
        let z = normalize_blocks(&mut raw, &ranges, 1.0, false).unwrap();
        let draw = model.sample_transmission(2, z.dim().1, 2, &spec, &mut rng);
        let zhat = apply_transmission(&z, &ranges, &draw);
        // noiseless: per-image complex ratio constant across both blocks
        for b in 0..2 {
            let ratio = |i: usize| {
                let (zr, zi) = (z[[b, 2 * i]], z[[b, 2 * i + 1]]);
                let (or, oi) = (zhat[[b, 2 * i]], zhat[[b, 2 * i + 1]]);
                let d = zr * zr + zi * zi;
                ((or * zr + oi * zi) / d, (oi * zr - or * zi) / d)
            };
            let (r0, i0) = ratio(0);
            for idx in 1..64 {
                let (r, i) = ratio(idx);
                assert!((r - r0).abs() < 1e-9 && (i - i0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn residual_layer_param_ids_cover_exactly_one_pair() {
        let model = SchemeModel::build(
            SchemeKind::Residual,
            plan2(),
            small_cfg(),
            ChannelKind::Awgn,
            10.0,
            3,
            1,
        )
        .unwrap();
        let ids0 = residual_layer_param_ids(&model, 0);
        let ids1 = residual_layer_param_ids(&model, 1);
        let len0: usize = ids0.iter().map(|&id| model.params.value(id).len()).sum();
        let len1: usize = ids1.iter().map(|&id| model.params.value(id).len()).sum();
        assert_eq!(len0 + len1, model.param_count());
        assert!(ids0.iter().all(|id| !ids1.contains(id)));
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // fixed channel draw, 4-image micro-batch, random parameter subset
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let mut model = SchemeModel::build(
            SchemeKind::MultiDecoder,
            plan2(),
            small_cfg(),
            ChannelKind::Awgn,
            10.0,
            51,
            1,
        )
        .unwrap();
        let x = images(&mut rng, 4, 16);
        let spec = awgn(10.0);

        let loss_at = |model: &SchemeModel| -> f64 {
            let mut crng = ChaCha12Rng::seed_from_u64(5150);
            let recons = multi_decoder_forward(model, &x, &spec, &mut crng).unwrap();
            multi_layer_loss(&x, &recons).unwrap()
        };

        model.params.zero_grads();
        {
            let mut crng = ChaCha12Rng::seed_from_u64(5150);
            let stats = multi_decoder_step(&mut model, &x, &spec, &mut crng).unwrap();
            let direct = loss_at(&model);
            assert!((stats.loss - direct).abs() < 1e-12, "loss paths disagree");
        }

        let total = model.params.total_len();
        let mut pick = ChaCha12Rng::seed_from_u64(15);
        let eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        for _ in 0..32 {
            let flat = pick.gen_range(0..total);
            let orig = model.params.get_flat(flat);
            model.params.set_flat(flat, orig + eps);
            let lp = loss_at(&model);
            model.params.set_flat(flat, orig - eps);
            let lm = loss_at(&model);
            model.params.set_flat(flat, orig);
            let fd = (lp - lm) / (2.0 * eps);
            let an = model.params.grad_flat(flat);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-9);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-3, "max relative gradient error {max_rel}");
    }
}
