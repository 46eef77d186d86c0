//! Sweep results as delimiter-separated tables with a JSON metadata
//! sidecar, and the loader the plot/compare commands share.

use std::path::Path;

use serde::{Deserialize, Serialize};

use deep_jscc::evaluation::SweepResult;

/// Columns of the results table, one row per (layer, test SNR) point.
const HEADER: [&str; 9] = [
    "model_id",
    "scheme",
    "num_layers",
    "layer",
    "train_snr_db",
    "test_snr_db",
    "psnr_db",
    "std_err",
    "realizations",
];

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    tool_version: String,
    sweep: SweepResult,
}

/// Write the CSV table and a `<path>.meta.json` sidecar.
pub fn write_results(path: &Path, sweep: &SweepResult) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| e.to_string())?;
    w.write_record(HEADER).map_err(|e| e.to_string())?;
    for (l, row) in sweep.per_layer_psnr.iter().enumerate() {
        for (si, &snr) in sweep.test_snrs_db.iter().enumerate() {
            w.write_record([
                sweep.model_id.as_str(),
                &sweep.scheme.to_string(),
                &sweep.num_layers.to_string(),
                &(l + 1).to_string(),
                &sweep.train_snr_db.to_string(),
                &snr.to_string(),
                &row[si].to_string(),
                &sweep.std_err[l][si].to_string(),
                &sweep.realizations_per_point.to_string(),
            ])
            .map_err(|e| e.to_string())?;
        }
    }
    w.flush().map_err(|e| e.to_string())?;

    let sidecar = Sidecar {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        sweep: sweep.clone(),
    };
    let meta = serde_json::to_string_pretty(&sidecar).map_err(|e| e.to_string())?;
    std::fs::write(sidecar_path(path), meta).map_err(|e| e.to_string())?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// A results table read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSweep {
    pub model_id: String,
    pub scheme: String,
    pub num_layers: usize,
    pub train_snr_db: f64,
    pub test_snrs_db: Vec<f64>,
    /// `[layer][snr]`.
    pub per_layer_psnr: Vec<Vec<f64>>,
    pub std_err: Vec<Vec<f64>>,
    pub realizations: usize,
}

pub fn read_results(path: &Path) -> Result<LoadedSweep, String> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows: Vec<(String, String, usize, usize, f64, f64, f64, f64, usize)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        if rec.len() != HEADER.len() {
            return Err(format!("{}: expected {} columns", path.display(), HEADER.len()));
        }
        let parse = |i: usize| -> Result<f64, String> {
            rec[i].parse().map_err(|_| format!("bad number '{}' in column {}", &rec[i], HEADER[i]))
        };
        rows.push((
            rec[0].to_string(),
            rec[1].to_string(),
            rec[2].parse().map_err(|_| "bad num_layers".to_string())?,
            rec[3].parse().map_err(|_| "bad layer".to_string())?,
            parse(4)?,
            parse(5)?,
            parse(6)?,
            parse(7)?,
            rec[8].parse().map_err(|_| "bad realizations".to_string())?,
        ));
    }
    if rows.is_empty() {
        return Err(format!("{}: no result rows", path.display()));
    }
    let model_id = rows[0].0.clone();
    let scheme = rows[0].1.clone();
    let num_layers = rows.iter().map(|r| r.3).max().unwrap_or(1);
    let train_snr_db = rows[0].4;
    let realizations = rows[0].8;
    let test_snrs_db: Vec<f64> = rows.iter().filter(|r| r.3 == 1).map(|r| r.5).collect();
    if test_snrs_db.is_empty() {
        return Err(format!("{}: table is missing layer 1", path.display()));
    }
    let n_snrs = test_snrs_db.len();
    let mut per_layer_psnr = vec![vec![f64::NAN; n_snrs]; num_layers];
    let mut std_err = vec![vec![0.0; n_snrs]; num_layers];
    for row in &rows {
        let layer = row.3 - 1;
        let Some(si) = test_snrs_db.iter().position(|&s| s == row.5) else {
            return Err(format!("{}: inconsistent SNR grid across layers", path.display()));
        };
        per_layer_psnr[layer][si] = row.6;
        std_err[layer][si] = row.7;
    }
    if per_layer_psnr.iter().flatten().any(|v| v.is_nan()) {
        return Err(format!("{}: incomplete layer/SNR matrix", path.display()));
    }
    Ok(LoadedSweep {
        model_id,
        scheme,
        num_layers,
        train_snr_db,
        test_snrs_db,
        per_layer_psnr,
        std_err,
        realizations,
    })
}
