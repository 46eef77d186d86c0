//! Differentiable simulation of the wireless link: average-power
//! normalization, AWGN, and slow Rayleigh fading, parameterized by SNR in dB.
//!
//! Complex channel symbols are stored as interleaved real pairs, so a block
//! of `k` symbols occupies `2k` reals. All functions are pure given an
//! explicit random source.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SNR at or above this value is treated as a noiseless channel.
pub const NOISELESS_SNR_DB: f64 = 200.0;

/// Norm below which an encoder output counts as degenerate.
pub const ALL_ZERO_NORM: f64 = 1e-12;

/// A block of `k` complex channel symbols under an average power budget `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolVector {
    /// Interleaved real pairs, length `2k`.
    pub values: Vec<f64>,
    /// Average per-symbol power budget `P`.
    pub power_budget: f64,
}

impl SymbolVector {
    /// Number of complex symbols.
    pub fn k(&self) -> usize {
        self.values.len() / 2
    }

    /// `(1/k) * sum |z_j|^2`.
    pub fn average_power(&self) -> f64 {
        let k = self.k() as f64;
        self.values.iter().map(|v| v * v).sum::<f64>() / k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    Awgn,
    RayleighSlow,
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelKind::Awgn => write!(f, "awgn"),
            ChannelKind::RayleighSlow => write!(f, "rayleigh-slow"),
        }
    }
}

/// Channel model selection plus the quality point it runs at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelSpec {
    pub fn new(kind: ChannelKind, snr_db: f64, seed: u64) -> Self {
        Self { kind, snr_db, seed }
    }

    /// Noise power for a unit power budget.
    pub fn noise_power(&self, power_budget: f64) -> f64 {
        snr_to_noise_power(self.snr_db, power_budget)
    }
}

/// `sigma^2 = P / 10^(snr_db/10)`, clamped to zero in the noiseless limit.
pub fn snr_to_noise_power(snr_db: f64, power_budget: f64) -> f64 {
    assert!(power_budget > 0.0, "power budget must be positive");
    if snr_db >= NOISELESS_SNR_DB {
        0.0
    } else {
        power_budget / 10f64.powf(snr_db / 10.0)
    }
}

/// Scale factor that maps `raw` onto the power-`p` sphere: `sqrt(k*p) / ||raw||`.
fn norm_scale(raw: &[f64], p: f64) -> Result<f64> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < ALL_ZERO_NORM {
        return Err(Error::AllZeroInput);
    }
    let k = raw.len() / 2;
    Ok((k as f64 * p).sqrt() / norm)
}

/// In-place core of [`normalize_power`], shared with the batched graphs.
pub(crate) fn normalize_slice(raw: &[f64], p: f64, out: &mut [f64]) -> Result<()> {
    let s = norm_scale(raw, p)?;
    for (o, r) in out.iter_mut().zip(raw) {
        *o = r * s;
    }
    Ok(())
}

/// Gradient of the normalization: `graw = s*(gz - raw * <gz, raw>/||raw||^2)`.
pub(crate) fn normalize_backward(raw: &[f64], p: f64, gz: &[f64], graw: &mut [f64]) {
    let r2: f64 = raw.iter().map(|v| v * v).sum();
    let k = raw.len() / 2;
    let s = (k as f64 * p).sqrt() / r2.sqrt();
    let dot: f64 = gz.iter().zip(raw).map(|(g, r)| g * r).sum();
    for i in 0..raw.len() {
        graw[i] += s * (gz[i] - raw[i] * dot / r2);
    }
}

/// Hard per-vector power normalization: the output satisfies
/// `(1/k) * sum |z_j|^2 = P` exactly. Interprets consecutive real pairs as
/// one complex symbol.
pub fn normalize_power(raw: &[f64], power_budget: f64) -> Result<SymbolVector> {
    assert!(raw.len() >= 2 && raw.len() % 2 == 0, "need at least one complex symbol");
    let mut values = vec![0.0; raw.len()];
    normalize_slice(raw, power_budget, &mut values)?;
    Ok(SymbolVector { values, power_budget })
}

/// One complex fading gain `h ~ CN(0, 1)` as a `(re, im)` pair.
pub fn sample_fading_gain(rng: &mut impl Rng) -> (f64, f64) {
    let s = 0.5f64.sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    (re * s, im * s)
}

/// Circularly-symmetric complex Gaussian noise with per-symbol variance
/// `sigma2`, flattened to interleaved reals (`sigma2/2` per real component).
pub fn sample_noise(len: usize, sigma2: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma2 == 0.0 {
        return vec![0.0; len];
    }
    let std = (sigma2 / 2.0).sqrt();
    (0..len)
        .map(|_| {
            let n: f64 = rng.sample(StandardNormal);
            n * std
        })
        .collect()
}

/// `out = h*z + n` over interleaved real pairs; `gain = None` means `h = 1`.
pub(crate) fn apply_channel(z: &[f64], gain: Option<(f64, f64)>, noise: &[f64], out: &mut [f64]) {
    match gain {
        None => {
            for i in 0..z.len() {
                out[i] = z[i] + noise[i];
            }
        }
        Some((hr, hi)) => {
            for j in 0..z.len() / 2 {
                let (re, im) = (z[2 * j], z[2 * j + 1]);
                out[2 * j] = hr * re - hi * im + noise[2 * j];
                out[2 * j + 1] = hr * im + hi * re + noise[2 * j + 1];
            }
        }
    }
}

/// Backward pass of [`apply_channel`]: noise and gain are constants, so the
/// upstream gradient is multiplied by `conj(h)` per complex pair.
pub(crate) fn channel_backward(gout: &[f64], gain: Option<(f64, f64)>, gz: &mut [f64]) {
    match gain {
        None => {
            for i in 0..gout.len() {
                gz[i] += gout[i];
            }
        }
        Some((hr, hi)) => {
            for j in 0..gout.len() / 2 {
                let (gr, gi) = (gout[2 * j], gout[2 * j + 1]);
                gz[2 * j] += hr * gr + hi * gi;
                gz[2 * j + 1] += hr * gi - hi * gr;
            }
        }
    }
}

/// AWGN transmission `z_hat = z + n`.
pub fn transmit_awgn(z: &SymbolVector, spec: &ChannelSpec, rng: &mut impl Rng) -> SymbolVector {
    assert_eq!(spec.kind, ChannelKind::Awgn, "channel spec kind must be AWGN");
    let sigma2 = spec.noise_power(z.power_budget);
    let noise = sample_noise(z.values.len(), sigma2, rng);
    let mut values = vec![0.0; z.values.len()];
    apply_channel(&z.values, None, &noise, &mut values);
    SymbolVector { values, power_budget: z.power_budget }
}

/// Slow Rayleigh fading transmission `z_hat = h*z + n`; one gain for the
/// whole block, and the receiver is never told `h`.
pub fn transmit_rayleigh_slow(
    z: &SymbolVector,
    spec: &ChannelSpec,
    rng: &mut impl Rng,
) -> SymbolVector {
    assert_eq!(spec.kind, ChannelKind::RayleighSlow, "channel spec kind must be Rayleigh");
    let gain = sample_fading_gain(rng);
    transmit_rayleigh_slow_with_gain(z, spec, gain, rng)
}

/// Test hook: slow Rayleigh transmission with a forced gain.
pub fn transmit_rayleigh_slow_with_gain(
    z: &SymbolVector,
    spec: &ChannelSpec,
    gain: (f64, f64),
    rng: &mut impl Rng,
) -> SymbolVector {
    assert_eq!(spec.kind, ChannelKind::RayleighSlow, "channel spec kind must be Rayleigh");
    let sigma2 = spec.noise_power(z.power_budget);
    let noise = sample_noise(z.values.len(), sigma2, rng);
    let mut values = vec![0.0; z.values.len()];
    apply_channel(&z.values, Some(gain), &noise, &mut values);
    SymbolVector { values, power_budget: z.power_budget }
}
