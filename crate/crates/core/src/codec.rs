//! The convolutional encoder (image -> channel symbols) and decoder
//! (received symbols -> image).
//!
//! The encoder downsamples twice (stride 2) and compresses into a feature
//! map of depth `c` on an `(h/4, w/4)` grid, so a bandwidth of `k` complex
//! symbols corresponds to `2k = (h/4)*(w/4)*c` reals. Decoders mirror the
//! stack with transposed convolutions and end in a saturating activation.

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, PRelu, ParamArena, Sigmoid, Tanh};

/// Pixel ceiling of the original integer images; PSNR is reported against it.
pub const ORIGINAL_RANGE_MAX: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    PRelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    /// `[0, 1]` range, for decoders that emit images.
    Sigmoid,
    /// `[-1, 1]` range, for decoders that emit residual corrections.
    Tanh,
}

/// Hyperparameters of one encoder/decoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// `(height, width, channels)` of the input images.
    pub image_shape: (usize, usize, usize),
    /// Total complex channel symbols `k` emitted by the encoder.
    pub total_symbols: usize,
    /// Feature depths of the four intermediate convolution stages.
    pub layer_widths: Vec<usize>,
    pub kernel_size: usize,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl CodecConfig {
    /// Conventional stack: strides (2,2,1,1,1), depths 16-32-32-32, kernel 5.
    pub fn with_geometry(image_shape: (usize, usize, usize), total_symbols: usize) -> Self {
        Self {
            image_shape,
            total_symbols,
            layer_widths: vec![16, 32, 32, 32],
            kernel_size: 5,
            activation: Activation::PRelu,
            output_activation: OutputActivation::Sigmoid,
        }
    }

    /// Source bandwidth `n = h*w*channels`.
    pub fn source_dim(&self) -> usize {
        self.image_shape.0 * self.image_shape.1 * self.image_shape.2
    }

    /// Spatial grid the encoder compresses to.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_shape.0 / 4, self.image_shape.1 / 4)
    }

    /// Feature depth holding `symbols` complex symbols on the grid.
    pub fn depth_for_symbols(&self, symbols: usize) -> Result<usize> {
        let (gh, gw) = self.grid();
        let cells = gh * gw;
        if 2 * symbols % cells != 0 || symbols == 0 {
            return Err(Error::InvalidConfig(format!(
                "2*k = {} must be a positive multiple of the {}x{} feature grid",
                2 * symbols,
                gh,
                gw
            )));
        }
        Ok(2 * symbols / cells)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image_shape;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidConfig(format!(
                "image shape {h}x{w}x{c} must have positive dims divisible by 4"
            )));
        }
        if self.layer_widths.len() != 4 || self.layer_widths.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(
                "layer_widths must hold four positive depths".into(),
            ));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig("kernel size must be odd".into()));
        }
        self.depth_for_symbols(self.total_symbols)?;
        Ok(())
    }
}

/// Batch of images in `[0, 1]`, stored `(batch, channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>) -> Self {
        Self { pixels }
    }

    pub fn batch_size(&self) -> usize {
        self.pixels.dim().0
    }

    /// `(height, width, channels)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.pixels.dim();
        (h, w, c)
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn clamped(mut self) -> Self {
        self.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }
}

fn check_image_shape(cfg: &CodecConfig, x: &ImageBatch) -> Result<()> {
    let (h, w, c) = cfg.image_shape;
    if x.image_shape() != (h, w, c) {
        return Err(Error::ShapeMismatch {
            expected: format!("images of {h}x{w}x{c}"),
            got: format!("{:?}", x.image_shape()),
        });
    }
    Ok(())
}

enum MidAct {
    PRelu(PRelu),
    Relu,
}

impl MidAct {
    fn new(
        arena: &mut ParamArena,
        name: &str,
        kind: Activation,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            Activation::PRelu => MidAct::PRelu(PRelu::new(arena, name, channels, rng)),
            Activation::Relu => MidAct::Relu,
        }
    }

    fn forward(&self, params: &ParamArena, x: &Array4<f64>) -> Array4<f64> {
        match self {
            MidAct::PRelu(p) => p.forward(params, x),
            MidAct::Relu => x.mapv(|v| v.max(0.0)),
        }
    }

    fn backward(&self, params: &mut ParamArena, x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
        match self {
            MidAct::PRelu(p) => p.backward(params, x, gy),
            MidAct::Relu => {
                let mut gx = gy.clone();
                ndarray::Zip::from(&mut gx).and(x).for_each(|g, &xv| {
                    if xv < 0.0 {
                        *g = 0.0;
                    }
                });
                gx
            }
        }
    }

    fn param_count(&self) -> usize {
        match self {
            MidAct::PRelu(p) => p.param_count(),
            MidAct::Relu => 0,
        }
    }
}

/// Convolutional image encoder emitting a `(batch, out_depth, h/4, w/4)`
/// feature map of raw (unnormalized) symbol reals.
pub struct Encoder {
    convs: Vec<Conv2d>,
    acts: Vec<MidAct>,
    pub out_depth: usize,
    image_shape: (usize, usize, usize),
}

pub struct EncoderCache {
    conv_caches: Vec<crate::nn::conv::ConvCache>,
    act_inputs: Vec<Array4<f64>>,
}

impl Encoder {
    pub fn new(
        arena: &mut ParamArena,
        name: &str,
        cfg: &CodecConfig,
        symbols: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let out_depth = cfg.depth_for_symbols(symbols)?;
        let k = cfg.kernel_size;
        let pad = k / 2;
        let w = &cfg.layer_widths;
        let chain = [
            (cfg.image_shape.2, w[0], 2),
            (w[0], w[1], 2),
            (w[1], w[2], 1),
            (w[2], w[3], 1),
            (w[3], out_depth, 1),
        ];
        let mut convs = Vec::new();
        let mut acts = Vec::new();
        for (i, &(ic, oc, stride)) in chain.iter().enumerate() {
            convs.push(Conv2d::new(arena, &format!("{name}.conv{i}"), ic, oc, k, stride, pad, rng));
            if i + 1 < chain.len() {
                acts.push(MidAct::new(arena, &format!("{name}.act{i}"), cfg.activation, oc, rng));
            }
        }
        Ok(Self { convs, acts, out_depth, image_shape: cfg.image_shape })
    }

    pub fn forward(&self, params: &ParamArena, x: &Array4<f64>) -> (Array4<f64>, EncoderCache) {
        let mut conv_caches = Vec::with_capacity(self.convs.len());
        let mut act_inputs = Vec::with_capacity(self.acts.len());
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (y, cache) = conv.forward(params, &cur);
            conv_caches.push(cache);
            cur = y;
            if let Some(act) = self.acts.get(i) {
                act_inputs.push(cur.clone());
                cur = act.forward(params, &cur);
            }
        }
        (cur, EncoderCache { conv_caches, act_inputs })
    }

    pub fn backward(
        &self,
        params: &mut ParamArena,
        cache: &EncoderCache,
        gy: &Array4<f64>,
    ) -> Array4<f64> {
        let mut g = gy.clone();
        for i in (0..self.convs.len()).rev() {
            if let Some(act) = self.acts.get(i) {
                g = act.backward(params, &cache.act_inputs[i], &g);
            }
            g = self.convs[i].backward(params, &cache.conv_caches[i], &g);
        }
        g
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum::<usize>()
            + self.acts.iter().map(MidAct::param_count).sum::<usize>()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }
}

/// Transposed-convolution decoder turning a `(batch, in_depth, h/4, w/4)`
/// feature map back into images (or residual corrections).
pub struct Decoder {
    deconvs: Vec<ConvTranspose2d>,
    acts: Vec<MidAct>,
    out_act: OutputActivation,
    pub in_depth: usize,
}

pub struct DecoderCache {
    deconv_caches: Vec<crate::nn::conv::DeconvCache>,
    act_inputs: Vec<Array4<f64>>,
    out: Array4<f64>,
}

impl Decoder {
    pub fn new(
        arena: &mut ParamArena,
        name: &str,
        cfg: &CodecConfig,
        symbols: usize,
        out_act: OutputActivation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let in_depth = cfg.depth_for_symbols(symbols)?;
        let k = cfg.kernel_size;
        let pad = k / 2;
        let w = &cfg.layer_widths;
        // mirror of the encoder chain
        let chain = [
            (in_depth, w[3], 1, 0),
            (w[3], w[2], 1, 0),
            (w[2], w[1], 1, 0),
            (w[1], w[0], 2, 1),
            (w[0], cfg.image_shape.2, 2, 1),
        ];
        let mut deconvs = Vec::new();
        let mut acts = Vec::new();
        for (i, &(ic, oc, stride, opad)) in chain.iter().enumerate() {
            deconvs.push(ConvTranspose2d::new(
                arena,
                &format!("{name}.deconv{i}"),
                ic,
                oc,
                k,
                stride,
                pad,
                opad,
                rng,
            ));
            if i + 1 < chain.len() {
                acts.push(MidAct::new(arena, &format!("{name}.act{i}"), cfg.activation, oc, rng));
            }
        }
        Ok(Self { deconvs, acts, out_act, in_depth })
    }

    pub fn forward(&self, params: &ParamArena, z: &Array4<f64>) -> (Array4<f64>, DecoderCache) {
        let mut deconv_caches = Vec::with_capacity(self.deconvs.len());
        let mut act_inputs = Vec::with_capacity(self.acts.len());
        let mut cur = z.clone();
        for (i, deconv) in self.deconvs.iter().enumerate() {
            let (y, cache) = deconv.forward(params, &cur);
            deconv_caches.push(cache);
            cur = y;
            if let Some(act) = self.acts.get(i) {
                act_inputs.push(cur.clone());
                cur = act.forward(params, &cur);
            }
        }
        let out = match self.out_act {
            OutputActivation::Sigmoid => Sigmoid.forward(&cur),
            OutputActivation::Tanh => Tanh.forward(&cur),
        };
        (out.clone(), DecoderCache { deconv_caches, act_inputs, out })
    }

    pub fn backward(
        &self,
        params: &mut ParamArena,
        cache: &DecoderCache,
        gy: &Array4<f64>,
    ) -> Array4<f64> {
        let mut g = match self.out_act {
            OutputActivation::Sigmoid => Sigmoid.backward(&cache.out, gy),
            OutputActivation::Tanh => Tanh.backward(&cache.out, gy),
        };
        for i in (0..self.deconvs.len()).rev() {
            if let Some(act) = self.acts.get(i) {
                g = act.backward(params, &cache.act_inputs[i], &g);
            }
            g = self.deconvs[i].backward(params, &cache.deconv_caches[i], &g);
        }
        g
    }

    pub fn param_count(&self) -> usize {
        self.deconvs.iter().map(ConvTranspose2d::param_count).sum::<usize>()
            + self.acts.iter().map(MidAct::param_count).sum::<usize>()
    }
}

/// Flatten an encoder feature map into `(batch, 2k)` symbol reals.
pub fn feature_to_flat(y: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = y.dim();
    y.clone().into_shape_with_order((b, c * h * w)).expect("standard layout")
}

/// Reshape `(batch, 2k)` symbol reals onto the decoder grid.
pub fn flat_to_feature(z: &Array2<f64>, grid: (usize, usize)) -> Result<Array4<f64>> {
    let (b, width) = z.dim();
    let cells = grid.0 * grid.1;
    if width % cells != 0 || width == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("flat width divisible by grid cells {cells}"),
            got: format!("{width}"),
        });
    }
    let c = width / cells;
    Ok(z.clone().into_shape_with_order((b, c, grid.0, grid.1)).expect("standard layout"))
}

/// Encode a batch of images into raw symbol reals `(batch, 2k)`.
///
/// The output is not yet power-normalized; layered schemes split it into
/// per-layer blocks and normalize each block on its own power budget.
pub fn encode_raw(
    params: &ParamArena,
    encoder: &Encoder,
    cfg: &CodecConfig,
    x: &ImageBatch,
) -> Result<Array2<f64>> {
    check_image_shape(cfg, x)?;
    let (y, _) = encoder.forward(params, &x.pixels);
    Ok(feature_to_flat(&y))
}

/// Decode `(batch, 2k_received)` symbol reals into an image batch.
pub fn decode_flat(
    params: &ParamArena,
    decoder: &Decoder,
    cfg: &CodecConfig,
    zhat: &Array2<f64>,
) -> Result<ImageBatch> {
    let feat = flat_to_feature(zhat, cfg.grid())?;
    if feat.dim().1 != decoder.in_depth {
        return Err(Error::ShapeMismatch {
            expected: format!("decoder input depth {}", decoder.in_depth),
            got: format!("{}", feat.dim().1),
        });
    }
    let (out, _) = decoder.forward(params, &feat);
    Ok(ImageBatch::new(out))
}
