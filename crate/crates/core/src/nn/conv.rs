//! Convolution and transposed convolution with explicit backward passes.
//!
//! Both layers lower to a single GEMM per batch: convolution through
//! im2col, transposed convolution through the adjoint col2im scatter.
//! Tensors are `(batch, channels, height, width)` in standard layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::{fan_in_normal, ParamArena, ParamId};

/// Output side of a strided convolution with floor semantics.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output side of a transposed convolution.
pub fn deconv_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> usize {
    (input - 1) * stride + kernel + output_pad - 2 * pad
}

/// Gather patches of `src` into a `(channels*k*k, batch*grid_h*grid_w)` matrix.
///
/// Grid position `(gh, gw)` reads `src[.., gh*stride + kh - pad, gw*stride + kw - pad]`;
/// out-of-bounds taps stay zero.
fn im2col(
    src: &Array4<f64>,
    grid_h: usize,
    grid_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (batch, channels, src_h, src_w) = src.dim();
    let cols_w = batch * grid_h * grid_w;
    let mut cols = Array2::<f64>::zeros((channels * kernel * kernel, cols_w));
    let src_flat = src.as_slice().expect("standard layout");
    let cols_flat = cols.as_slice_mut().expect("standard layout");

    for c in 0..channels {
        for kh in 0..kernel {
            for kw in 0..kernel {
                let row = (c * kernel + kh) * kernel + kw;
                let row_off = row * cols_w;
                // grid w range whose source column lands in bounds
                let gw_lo = if pad > kw { (pad - kw + stride - 1) / stride } else { 0 };
                let gw_hi = if src_w + pad > kw {
                    ((src_w + pad - kw - 1) / stride + 1).min(grid_w)
                } else {
                    0
                };
                if gw_lo >= gw_hi {
                    continue;
                }
                for b in 0..batch {
                    for gh in 0..grid_h {
                        let sh = (gh * stride + kh) as isize - pad as isize;
                        if sh < 0 || sh >= src_h as isize {
                            continue;
                        }
                        let src_row = ((b * channels + c) * src_h + sh as usize) * src_w;
                        let dst_row = row_off + (b * grid_h + gh) * grid_w;
                        if stride == 1 {
                            let sw0 = gw_lo + kw - pad;
                            let n = gw_hi - gw_lo;
                            cols_flat[dst_row + gw_lo..dst_row + gw_hi]
                                .copy_from_slice(&src_flat[src_row + sw0..src_row + sw0 + n]);
                        } else {
                            for gw in gw_lo..gw_hi {
                                let sw = gw * stride + kw - pad;
                                cols_flat[dst_row + gw] = src_flat[src_row + sw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add the column matrix back onto an image.
fn col2im(
    cols: &Array2<f64>,
    batch: usize,
    channels: usize,
    dst_h: usize,
    dst_w: usize,
    grid_h: usize,
    grid_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let cols_w = batch * grid_h * grid_w;
    debug_assert_eq!(cols.dim(), (channels * kernel * kernel, cols_w));
    let mut dst = Array4::<f64>::zeros((batch, channels, dst_h, dst_w));
    let cols_flat = cols.as_slice().expect("standard layout");
    let dst_flat = dst.as_slice_mut().expect("standard layout");

    for c in 0..channels {
        for kh in 0..kernel {
            for kw in 0..kernel {
                let row = (c * kernel + kh) * kernel + kw;
                let row_off = row * cols_w;
                let gw_lo = if pad > kw { (pad - kw + stride - 1) / stride } else { 0 };
                let gw_hi = if dst_w + pad > kw {
                    ((dst_w + pad - kw - 1) / stride + 1).min(grid_w)
                } else {
                    0
                };
                if gw_lo >= gw_hi {
                    continue;
                }
                for b in 0..batch {
                    for gh in 0..grid_h {
                        let dh = (gh * stride + kh) as isize - pad as isize;
                        if dh < 0 || dh >= dst_h as isize {
                            continue;
                        }
                        let dst_row = ((b * channels + c) * dst_h + dh as usize) * dst_w;
                        let src_row = row_off + (b * grid_h + gh) * grid_w;
                        if stride == 1 {
                            let dw0 = gw_lo + kw - pad;
                            for (d, s) in dst_flat[dst_row + dw0..dst_row + dw0 + gw_hi - gw_lo]
                                .iter_mut()
                                .zip(&cols_flat[src_row + gw_lo..src_row + gw_hi])
                            {
                                *d += *s;
                            }
                        } else {
                            for gw in gw_lo..gw_hi {
                                let dw = gw * stride + kw - pad;
                                dst_flat[dst_row + dw] += cols_flat[src_row + gw];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

/// `(b, c, h*w)` tensor -> `(c, b*h*w)` matrix.
fn batch_to_channel_major(x: &Array4<f64>) -> Array2<f64> {
    let (batch, channels, h, w) = x.dim();
    let hw = h * w;
    let mut out = Array2::<f64>::zeros((channels, batch * hw));
    let src = x.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for c in 0..channels {
            let s = ((b * channels) + c) * hw;
            let d = c * batch * hw + b * hw;
            dst[d..d + hw].copy_from_slice(&src[s..s + hw]);
        }
    }
    out
}

/// Inverse of [`batch_to_channel_major`].
fn channel_major_to_batch(x0: &Array2<f64>, batch: usize, h: usize, w: usize) -> Array4<f64> {
    let channels = x0.dim().0;
    let hw = h * w;
    debug_assert_eq!(x0.dim().1, batch * hw);
    let mut out = Array4::<f64>::zeros((batch, channels, h, w));
    let src = x0.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for c in 0..channels {
            let s = c * batch * hw + b * hw;
            let d = ((b * channels) + c) * hw;
            dst[d..d + hw].copy_from_slice(&src[s..s + hw]);
        }
    }
    out
}

fn add_channel_bias(y: &mut Array4<f64>, bias: &[f64]) {
    let (batch, channels, h, w) = y.dim();
    let hw = h * w;
    let flat = y.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for c in 0..channels {
            let off = ((b * channels) + c) * hw;
            let bc = bias[c];
            for v in &mut flat[off..off + hw] {
                *v += bc;
            }
        }
    }
}

fn channel_bias_grad(gy: &Array4<f64>, gb: &mut [f64]) {
    let (batch, channels, h, w) = gy.dim();
    let hw = h * w;
    let flat = gy.as_slice().expect("standard layout");
    for b in 0..batch {
        for c in 0..channels {
            let off = ((b * channels) + c) * hw;
            gb[c] += flat[off..off + hw].iter().sum::<f64>();
        }
    }
}

/// Strided 2-D convolution, weight shape `(out_c, in_c, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Forward-pass state a convolution needs for its backward pass.
pub struct ConvCache {
    cols: Array2<f64>,
    in_dims: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        arena: &mut ParamArena,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = arena.alloc(
            format!("{name}.weight"),
            &[out_c, in_c, kernel, kernel],
            fan_in_normal(rng, out_c * fan_in, fan_in, 2.0),
        );
        let bias = arena.alloc(format!("{name}.bias"), &[out_c], vec![0.0; out_c]);
        Self { weight, bias, in_c, out_c, kernel, stride, pad }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_dim(h, self.kernel, self.stride, self.pad),
            conv_out_dim(w, self.kernel, self.stride, self.pad),
        )
    }

    pub fn forward(&self, params: &ParamArena, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (batch, in_c, h, w) = x.dim();
        assert_eq!(in_c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_dims(h, w);
        let cols = im2col(x, oh, ow, self.kernel, self.stride, self.pad);
        let ckk = self.in_c * self.kernel * self.kernel;
        let w_mat = ArrayView2::from_shape((self.out_c, ckk), params.value(self.weight)).unwrap();
        let mut y0 = Array2::<f64>::zeros((self.out_c, batch * oh * ow));
        general_mat_mul(1.0, &w_mat, &cols, 0.0, &mut y0);
        let mut y = channel_major_to_batch(&y0, batch, oh, ow);
        add_channel_bias(&mut y, params.value(self.bias));
        (y, ConvCache { cols, in_dims: (batch, in_c, h, w) })
    }

    /// Accumulates weight/bias gradients into the arena and returns the
    /// gradient with respect to the layer input.
    pub fn backward(
        &self,
        params: &mut ParamArena,
        cache: &ConvCache,
        gy: &Array4<f64>,
    ) -> Array4<f64> {
        let (batch, _, h, w) = cache.in_dims;
        let (gb_batch, oc, oh, ow) = gy.dim();
        assert_eq!(gb_batch, batch);
        assert_eq!(oc, self.out_c);
        let ckk = self.in_c * self.kernel * self.kernel;

        let gy0 = batch_to_channel_major(gy);
        {
            let mut gw = ArrayViewMut2::from_shape((self.out_c, ckk), params.grad_mut(self.weight))
                .unwrap();
            general_mat_mul(1.0, &gy0.view(), &cache.cols.t(), 1.0, &mut gw);
        }
        channel_bias_grad(gy, params.grad_mut(self.bias));

        let w_mat = ArrayView2::from_shape((self.out_c, ckk), params.value(self.weight)).unwrap();
        let mut gcols = Array2::<f64>::zeros((ckk, batch * oh * ow));
        general_mat_mul(1.0, &w_mat.t(), &gy0.view(), 0.0, &mut gcols);
        col2im(&gcols, batch, self.in_c, h, w, oh, ow, self.kernel, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel + self.out_c
    }
}

/// Strided 2-D transposed convolution, weight shape `(in_c, out_c, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

pub struct DeconvCache {
    x0: Array2<f64>,
    in_dims: (usize, usize, usize, usize),
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arena: &mut ParamArena,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(output_pad < stride, "output padding must be smaller than stride");
        let fan_in = in_c * kernel * kernel;
        let weight = arena.alloc(
            format!("{name}.weight"),
            &[in_c, out_c, kernel, kernel],
            fan_in_normal(rng, out_c * fan_in, fan_in, 2.0),
        );
        let bias = arena.alloc(format!("{name}.bias"), &[out_c], vec![0.0; out_c]);
        Self { weight, bias, in_c, out_c, kernel, stride, pad, output_pad }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            deconv_out_dim(h, self.kernel, self.stride, self.pad, self.output_pad),
            deconv_out_dim(w, self.kernel, self.stride, self.pad, self.output_pad),
        )
    }

    pub fn forward(&self, params: &ParamArena, x: &Array4<f64>) -> (Array4<f64>, DeconvCache) {
        let (batch, in_c, h, w) = x.dim();
        assert_eq!(in_c, self.in_c, "deconv input channels");
        let (oh, ow) = self.out_dims(h, w);
        let ockk = self.out_c * self.kernel * self.kernel;

        let x0 = batch_to_channel_major(x);
        let m = ArrayView2::from_shape((self.in_c, ockk), params.value(self.weight)).unwrap();
        let mut cols = Array2::<f64>::zeros((ockk, batch * h * w));
        general_mat_mul(1.0, &m.t(), &x0.view(), 0.0, &mut cols);
        let mut y =
            col2im(&cols, batch, self.out_c, oh, ow, h, w, self.kernel, self.stride, self.pad);
        add_channel_bias(&mut y, params.value(self.bias));
        (y, DeconvCache { x0, in_dims: (batch, in_c, h, w) })
    }

    pub fn backward(
        &self,
        params: &mut ParamArena,
        cache: &DeconvCache,
        gy: &Array4<f64>,
    ) -> Array4<f64> {
        let (batch, _, h, w) = cache.in_dims;
        let ockk = self.out_c * self.kernel * self.kernel;

        let gcols = im2col(gy, h, w, self.kernel, self.stride, self.pad);
        {
            let mut gm = ArrayViewMut2::from_shape((self.in_c, ockk), params.grad_mut(self.weight))
                .unwrap();
            general_mat_mul(1.0, &cache.x0.view(), &gcols.t(), 1.0, &mut gm);
        }
        channel_bias_grad(gy, params.grad_mut(self.bias));

        let m = ArrayView2::from_shape((self.in_c, ockk), params.value(self.weight)).unwrap();
        let mut gx0 = Array2::<f64>::zeros((self.in_c, batch * h * w));
        general_mat_mul(1.0, &m, &gcols.view(), 0.0, &mut gx0);
        channel_major_to_batch(&gx0, batch, h, w)
    }

    pub fn param_count(&self) -> usize {
        self.in_c * self.out_c * self.kernel * self.kernel + self.out_c
    }
}
