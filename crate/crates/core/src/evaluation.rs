//! Distortion metrics, test-SNR sweeps across trained models, per-layer
//! curve extraction, and the layer-independence study.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelKind, ChannelSpec};
use crate::codec::{ImageBatch, ORIGINAL_RANGE_MAX};
use crate::error::{Error, Result};
use crate::schemes::{progressive_forward, Feedback, SchemeKind, SchemeModel};
use crate::training::Dataset;

/// PSNR reported for a perfect reconstruction (zero MSE).
pub const PSNR_CAP_DB: f64 = 100.0;

/// Per-image mean squared error in the 0-255 pixel scale.
pub fn mse(x: &ImageBatch, xhat: &ImageBatch) -> Result<Vec<f64>> {
    if x.pixels.dim() != xhat.pixels.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.pixels.dim()),
            got: format!("{:?}", xhat.pixels.dim()),
        });
    }
    let scale = ORIGINAL_RANGE_MAX * ORIGINAL_RANGE_MAX;
    Ok(crate::schemes::per_image_mse01(&x.pixels, &xhat.pixels)
        .into_iter()
        .map(|m| m * scale)
        .collect())
}

/// `10*log10(255^2 / mse)`, capped at 100 dB; zero MSE maps to the cap.
pub fn psnr(mse_value: f64) -> Result<f64> {
    if mse_value < 0.0 {
        return Err(Error::NegativeMse(mse_value));
    }
    if mse_value == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let max2 = ORIGINAL_RANGE_MAX * ORIGINAL_RANGE_MAX;
    Ok((10.0 * (max2 / mse_value).log10()).min(PSNR_CAP_DB))
}

/// The 1-25 dB sweep grid with 3 dB spacing.
pub fn default_snr_grid() -> Vec<f64> {
    (0..9).map(|i| 1.0 + 3.0 * i as f64).collect()
}

/// Per-layer mean PSNR as a function of test SNR, with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub model_id: String,
    pub scheme: SchemeKind,
    pub num_layers: usize,
    pub train_snr_db: f64,
    pub channel_kind: ChannelKind,
    pub test_snrs_db: Vec<f64>,
    /// `[layer][snr]` mean of per-image PSNR in dB.
    pub per_layer_psnr: Vec<Vec<f64>>,
    /// Matching standard errors of the mean.
    pub std_err: Vec<Vec<f64>>,
    pub realizations_per_point: usize,
    pub feedback: Feedback,
    pub seed: u64,
}

impl SweepResult {
    pub fn layer(&self, i: usize) -> &[f64] {
        &self.per_layer_psnr[i]
    }

    /// Value at (layer, snr) by exact grid lookup.
    pub fn at(&self, layer: usize, snr_db: f64) -> Option<(f64, f64)> {
        let idx = self.test_snrs_db.iter().position(|&s| s == snr_db)?;
        Some((self.per_layer_psnr[layer][idx], self.std_err[layer][idx]))
    }
}

/// Pointwise maximum PSNR over layers per test SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeResult {
    pub test_snrs_db: Vec<f64>,
    pub psnr_db: Vec<f64>,
}

pub struct EvalOptions {
    pub realizations: usize,
    pub feedback: Feedback,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { realizations: 10, feedback: Feedback::Estimated, batch_size: 64 }
    }
}

fn mix_seed(master: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the tuple, so every (snr, realization) pair owns an
    // independent stream regardless of loop order
    let mut x = master ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Sweep a frozen model over test SNRs, averaging per-image PSNR over the
/// test set and `realizations` independent channel draws per point.
pub fn evaluate_sweep(
    model: &SchemeModel,
    test: &Dataset,
    test_snrs_db: &[f64],
    realizations: usize,
    rng: &mut impl Rng,
) -> Result<SweepResult> {
    evaluate_sweep_with(
        model,
        test,
        test_snrs_db,
        &EvalOptions { realizations, ..EvalOptions::default() },
        rng,
    )
}

pub fn evaluate_sweep_with(
    model: &SchemeModel,
    test: &Dataset,
    test_snrs_db: &[f64],
    opts: &EvalOptions,
    rng: &mut impl Rng,
) -> Result<SweepResult> {
    if opts.realizations < 1 {
        return Err(Error::InvalidM(opts.realizations));
    }
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let layers = model.eval_layer_count();
    let master: u64 = rng.gen();
    let mut psnr_mean = vec![vec![0.0; test_snrs_db.len()]; layers];
    let mut err = vec![vec![0.0; test_snrs_db.len()]; layers];

    for (si, &snr) in test_snrs_db.iter().enumerate() {
        let spec = ChannelSpec::new(model.channel_kind, snr, master);
        let mut sums = vec![0.0f64; layers];
        let mut sq_sums = vec![0.0f64; layers];
        let mut count = 0usize;
        for r in 0..opts.realizations {
            let mut point_rng = ChaCha12Rng::seed_from_u64(mix_seed(master, si as u64, r as u64));
            let mut start = 0;
            while start < test.len() {
                let end = (start + opts.batch_size).min(test.len());
                let idx: Vec<usize> = (start..end).collect();
                let x = test.batch(&idx);
                let recons = progressive_forward(model, &x, &spec, opts.feedback, &mut point_rng)?;
                for (l, recon) in recons.iter().enumerate() {
                    for m01 in crate::schemes::per_image_mse01(&x.pixels, &recon.pixels) {
                        let p = psnr(m01 * ORIGINAL_RANGE_MAX * ORIGINAL_RANGE_MAX)?;
                        sums[l] += p;
                        sq_sums[l] += p * p;
                    }
                }
                start = end;
            }
            count += test.len();
        }
        for l in 0..layers {
            let n = count as f64;
            let mean = sums[l] / n;
            let var = (sq_sums[l] / n - mean * mean).max(0.0);
            psnr_mean[l][si] = mean;
            err[l][si] = (var / n).sqrt();
        }
    }

    Ok(SweepResult {
        model_id: format!(
            "{}_L{}_{}_snr{}",
            model.kind,
            model.plan.num_layers(),
            model.channel_kind,
            model.train_snr_db
        ),
        scheme: model.kind,
        num_layers: layers,
        train_snr_db: model.train_snr_db,
        channel_kind: model.channel_kind,
        test_snrs_db: test_snrs_db.to_vec(),
        per_layer_psnr: psnr_mean,
        std_err: err,
        realizations_per_point: opts.realizations,
        feedback: opts.feedback,
        seed: master,
    })
}

/// Pointwise maximum over layers per test SNR.
pub fn envelope(sweep: &SweepResult) -> EnvelopeResult {
    let psnr_db = (0..sweep.test_snrs_db.len())
        .map(|si| {
            sweep
                .per_layer_psnr
                .iter()
                .map(|row| row[si])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    EnvelopeResult { test_snrs_db: sweep.test_snrs_db.clone(), psnr_db }
}

/// One model's first- and second-layer PSNR at matched test SNRs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndependenceRow {
    pub num_layers: usize,
    pub first_layer_psnr: Vec<f64>,
    pub second_layer_psnr: Vec<f64>,
}

/// Comparison of early-layer performance across models trained with
/// different layer counts but identical per-layer bandwidths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub test_snrs_db: Vec<f64>,
    pub rows: Vec<IndependenceRow>,
    /// Max over SNRs of the max pairwise deviation across models.
    pub max_first_layer_spread_db: f64,
    pub max_second_layer_spread_db: f64,
}

pub fn layer_independence_report(
    models: &[&SchemeModel],
    test: &Dataset,
    test_snrs_db: &[f64],
    realizations: usize,
    rng: &mut impl Rng,
) -> Result<IndependenceReport> {
    if models.is_empty() {
        return Err(Error::EmptyResults);
    }
    let base = &models[0];
    for m in models {
        if m.plan.bandwidths[0] != base.plan.bandwidths[0]
            || m.plan.source_dim != base.plan.source_dim
            || m.train_snr_db != base.train_snr_db
        {
            return Err(Error::ConfigMismatch(
                "models must share per-layer bandwidth and train SNR".into(),
            ));
        }
        if m.num_layers() < 2 {
            return Err(Error::ConfigMismatch("models need at least two layers".into()));
        }
    }
    // paired comparison: every model faces the same channel draws
    let master: u64 = rng.gen();
    let mut rows = Vec::with_capacity(models.len());
    for m in models {
        let mut model_rng = ChaCha12Rng::seed_from_u64(master);
        let sweep = evaluate_sweep(m, test, test_snrs_db, realizations, &mut model_rng)?;
        rows.push(IndependenceRow {
            num_layers: m.num_layers(),
            first_layer_psnr: sweep.per_layer_psnr[0].clone(),
            second_layer_psnr: sweep.per_layer_psnr[1].clone(),
        });
    }
    let spread = |pick: fn(&IndependenceRow) -> &Vec<f64>| -> f64 {
        let mut worst = 0.0f64;
        for si in 0..test_snrs_db.len() {
            let vals: Vec<f64> = rows.iter().map(|r| pick(r)[si]).collect();
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            worst = worst.max(hi - lo);
        }
        worst
    };
    Ok(IndependenceReport {
        test_snrs_db: test_snrs_db.to_vec(),
        max_first_layer_spread_db: spread(|r| &r.first_layer_psnr),
        max_second_layer_spread_db: spread(|r| &r.second_layer_psnr),
        rows,
    })
}
