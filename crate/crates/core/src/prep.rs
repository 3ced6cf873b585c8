//! Profile preprocessing: per-well median aggregation, per-plate robust
//! normalization, and PCA whitening fit on training wells only.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arena::{ArenaDataset, WellRecord};
use crate::linalg::{principal_axes, Matrix};

/// Floor applied to IQRs and covariance eigenvalues.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum PrepError {
    #[error("input error: {0}")]
    Input(String),
    #[error("plate {plate} has {n} wells; normalization needs at least 4")]
    TooFewWells { plate: usize, n: usize },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("whitener file {path}: {message}")]
    Io { path: String, message: String },
}

/// Elementwise median over cells. Even counts take the lower of the two
/// middle values.
pub fn aggregate_well(cells: &Matrix) -> Result<Vec<f64>, PrepError> {
    if cells.rows() == 0 || cells.cols() == 0 {
        return Err(PrepError::Input("cannot aggregate an empty well".into()));
    }
    if !cells.is_finite() {
        return Err(PrepError::Input("cell features must be finite".into()));
    }
    let n = cells.rows();
    let mut col = vec![0.0; n];
    Ok((0..cells.cols())
        .map(|j| {
            for (i, c) in col.iter_mut().enumerate() {
                *c = cells[(i, j)];
            }
            col.sort_by(f64::total_cmp);
            col[(n - 1) / 2]
        })
        .collect())
}

/// Linear-interpolation quantile of sorted data (the "type 7" definition).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per plate and feature: `x' = (x − median) / max(IQR, eps)`, quantiles by
/// linear interpolation. Output keeps input order.
pub fn normalize_plate(wells: &[WellRecord], eps: f64) -> Result<Vec<WellRecord>, PrepError> {
    let d = wells.first().map_or(0, |w| w.features.len());
    if wells.iter().any(|w| w.features.len() != d) {
        return Err(PrepError::Input("wells have differing feature dimensions".into()));
    }
    let mut by_plate: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in wells.iter().enumerate() {
        by_plate.entry(w.plate).or_default().push(i);
    }
    if let Some((&plate, idx)) = by_plate.iter().find(|(_, idx)| idx.len() < 4) {
        return Err(PrepError::TooFewWells { plate, n: idx.len() });
    }

    let stats: Vec<(usize, Vec<(f64, f64)>)> = by_plate
        .par_iter()
        .map(|(&plate, idx)| {
            let mut col = vec![0.0; idx.len()];
            let per_feature = (0..d)
                .map(|j| {
                    for (c, &i) in col.iter_mut().zip(idx) {
                        *c = wells[i].features[j];
                    }
                    col.sort_by(f64::total_cmp);
                    let median = quantile_sorted(&col, 0.5);
                    let iqr = quantile_sorted(&col, 0.75) - quantile_sorted(&col, 0.25);
                    (median, iqr.max(eps))
                })
                .collect();
            (plate, per_feature)
        })
        .collect();
    let stats: BTreeMap<usize, Vec<(f64, f64)>> = stats.into_iter().collect();

    Ok(wells
        .iter()
        .map(|w| {
            let s = &stats[&w.plate];
            let mut out = w.clone();
            for (x, (median, scale)) in out.features.iter_mut().zip(s) {
                *x = (*x - median) / scale;
            }
            out
        })
        .collect())
}

/// Fingerprint of a set of well ids, stored with a whitener to detect leakage.
pub fn well_fingerprint<'a>(ids: impl IntoIterator<Item = &'a usize>) -> String {
    let sorted: BTreeSet<usize> = ids.into_iter().copied().collect();
    let mut h = Sha256::new();
    for id in sorted {
        h.update((id as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Whitener {
    pub mean: Vec<f64>,
    pub d_feat: usize,
    pub d_out: usize,
    /// `d_feat × d_out`, row-major; columns are orthonormal principal axes.
    pub components: Vec<f64>,
    /// Inverse square roots of the (floored) eigenvalues.
    pub scales: Vec<f64>,
    pub eps: f64,
    pub fit_fingerprint: String,
    pub n_fit: usize,
}

impl Whitener {
    pub fn component(&self, i: usize, k: usize) -> f64 {
        self.components[i * self.d_out + k]
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>, PrepError> {
        if x.len() != self.d_feat {
            return Err(PrepError::Input(format!(
                "feature dimension {} does not match whitener input {}",
                x.len(),
                self.d_feat
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.d_out)
            .map(|k| {
                let proj: f64 = centered.iter().enumerate().map(|(i, c)| c * self.component(i, k)).sum();
                proj * self.scales[k]
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), PrepError> {
        let io = |e: String| PrepError::Io {
            path: path.display().to_string(),
            message: e,
        };
        let text = serde_json::to_string_pretty(self).map_err(|e| io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PrepError> {
        let io = |e: String| PrepError::Io {
            path: path.display().to_string(),
            message: e,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }
}

/// Fits a PCA whitener keeping the top `d_out` components.
pub fn fit_whitener(train_wells: &[WellRecord], d_out: usize, eps: f64) -> Result<Whitener, PrepError> {
    let n = train_wells.len();
    let d = train_wells.first().map_or(0, |w| w.features.len());
    if d_out == 0 || d_out > d {
        return Err(PrepError::Dimension(format!("d_out {d_out} must lie in 1..={d}")));
    }
    if n <= d_out {
        return Err(PrepError::Dimension(format!(
            "need more than {d_out} training wells, got {n}"
        )));
    }
    let rows: Vec<&[f64]> = train_wells.iter().map(|w| w.features.as_slice()).collect();
    if rows.iter().any(|r| r.len() != d) {
        return Err(PrepError::Input("wells have differing feature dimensions".into()));
    }
    let data = Matrix::from_rows(&rows);
    if !data.is_finite() {
        return Err(PrepError::Input("training features must be finite".into()));
    }
    let pa = principal_axes(&data);
    let top = pa.variances[0];
    let rank = pa
        .variances
        .iter()
        .filter(|&&v| v > 1e-10 * top.max(f64::MIN_POSITIVE))
        .count();
    if d_out > rank {
        return Err(PrepError::Dimension(format!("d_out {d_out} exceeds data rank {rank}")));
    }
    let mut components = vec![0.0; d * d_out];
    for i in 0..d {
        for k in 0..d_out {
            components[i * d_out + k] = pa.axes[(i, k)];
        }
    }
    let scales = pa.variances[..d_out].iter().map(|v| 1.0 / v.max(eps).sqrt()).collect();
    Ok(Whitener {
        mean: pa.mean,
        d_feat: d,
        d_out,
        components,
        scales,
        eps,
        fit_fingerprint: well_fingerprint(train_wells.iter().map(|w| &w.well_id)),
        n_fit: n,
    })
}

pub fn apply_whitener(w: &Whitener, wells: &[WellRecord]) -> Result<Vec<WellRecord>, PrepError> {
    wells
        .iter()
        .map(|well| {
            let mut out = well.clone();
            out.features = w.transform(&well.features)?;
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepOptions {
    pub normalize_plates: bool,
    /// Whitened dimension; `None` keeps every feature.
    pub d_out: Option<usize>,
    pub eps: f64,
}

impl Default for PrepOptions {
    fn default() -> Self {
        Self {
            normalize_plates: true,
            d_out: None,
            eps: DEFAULT_EPS,
        }
    }
}

/// Full preprocessing of a dataset. The whitener sees training wells only.
pub fn preprocess(ds: &ArenaDataset, opts: &PrepOptions) -> Result<(ArenaDataset, Whitener), PrepError> {
    let wells = if opts.normalize_plates {
        normalize_plate(&ds.wells, opts.eps)?
    } else {
        ds.wells.clone()
    };
    let train: Vec<WellRecord> = wells
        .iter()
        .filter(|w| ds.split_of(w) == crate::arena::Split::Train)
        .cloned()
        .collect();
    let d_out = opts.d_out.unwrap_or(ds.d_feat());
    let whitener = fit_whitener(&train, d_out, opts.eps)?;
    let wells = apply_whitener(&whitener, &wells)?;
    Ok((ArenaDataset { wells, ..ds.clone() }, whitener))
}
