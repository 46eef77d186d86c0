//! Pointwise activations with explicit backward passes.

use ndarray::Array4;
use rand::Rng;

use super::{ParamArena, ParamId};

/// Parametric ReLU with one learnable negative slope per channel.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamId,
    pub channels: usize,
}

impl PRelu {
    pub fn new(arena: &mut ParamArena, name: &str, channels: usize, _rng: &mut impl Rng) -> Self {
        let slope = arena.alloc(format!("{name}.slope"), &[channels], vec![0.25; channels]);
        Self { slope, channels }
    }

    pub fn forward(&self, params: &ParamArena, x: &Array4<f64>) -> Array4<f64> {
        let a = params.value(self.slope);
        let mut y = x.clone();
        for (c, mut lane) in y.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let ac = a[c];
            lane.mapv_inplace(|v| if v >= 0.0 { v } else { ac * v });
        }
        y
    }

    /// Needs the layer *input* as cache.
    pub fn backward(
        &self,
        params: &mut ParamArena,
        x: &Array4<f64>,
        gy: &Array4<f64>,
    ) -> Array4<f64> {
        let channels = self.channels;
        let mut gx = gy.clone();
        let mut ga = vec![0.0; channels];
        {
            let a = params.value(self.slope).to_vec();
            for c in 0..channels {
                let xs = x.index_axis(ndarray::Axis(1), c);
                let mut gs = gx.index_axis_mut(ndarray::Axis(1), c);
                let mut acc = 0.0;
                ndarray::Zip::from(&mut gs).and(&xs).for_each(|g, &xv| {
                    if xv < 0.0 {
                        acc += *g * xv;
                        *g *= a[c];
                    }
                });
                ga[c] = acc;
            }
        }
        let gslope = params.grad_mut(self.slope);
        for c in 0..channels {
            gslope[c] += ga[c];
        }
        gx
    }

    pub fn param_count(&self) -> usize {
        self.channels
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Saturating output nonlinearity of a decoder.
#[derive(Debug, Clone, Copy)]
pub struct Sigmoid;

impl Sigmoid {
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        x.mapv(sigmoid_scalar)
    }

    /// Needs the layer *output* as cache.
    pub fn backward(&self, y: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
        let mut gx = gy.clone();
        ndarray::Zip::from(&mut gx).and(y).for_each(|g, &yv| *g *= yv * (1.0 - yv));
        gx
    }
}

/// Zero-centered saturating nonlinearity, used by residual refinement
/// decoders whose targets can be negative.
#[derive(Debug, Clone, Copy)]
pub struct Tanh;

impl Tanh {
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        x.mapv(f64::tanh)
    }

    pub fn backward(&self, y: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
        let mut gx = gy.clone();
        ndarray::Zip::from(&mut gx).and(y).for_each(|g, &yv| *g *= 1.0 - yv * yv);
        gx
    }
}
