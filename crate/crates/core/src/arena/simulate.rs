//! Forward process: perturbation + nuisance context → per-cell feature vectors.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::universe::Universe;
use super::ArenaError;
use crate::linalg::Matrix;
use crate::rng;

/// Plate geometry used to normalize well positions for the position gradient.
pub const POSITION_ROWS: f64 = 16.0;
pub const POSITION_COLS: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PertType {
    Compound,
    Crispr,
    Control,
}

impl PertType {
    pub fn as_str(self) -> &'static str {
        match self {
            PertType::Compound => "compound",
            PertType::Crispr => "crispr",
            PertType::Control => "control",
        }
    }
}

impl std::str::FromStr for PertType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "compound" => Ok(PertType::Compound),
            "crispr" => Ok(PertType::Crispr),
            "control" => Ok(PertType::Control),
            other => Err(format!("unknown pert_type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    Control,
    Compound(usize),
    Crispr(usize),
}

impl Perturbation {
    pub fn new(kind: PertType, id: usize) -> Self {
        match kind {
            PertType::Control => Perturbation::Control,
            PertType::Compound => Perturbation::Compound(id),
            PertType::Crispr => Perturbation::Crispr(id),
        }
    }
}

/// Where a well sits in the experimental hierarchy. `None` disables that
/// nuisance component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NuisanceContext {
    pub plate: Option<usize>,
    pub batch: Option<usize>,
    pub source: Option<usize>,
    pub position: Option<(usize, usize)>,
}

impl NuisanceContext {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn at(plate: usize, batch: usize, source: usize, row: usize, col: usize) -> Self {
        Self {
            plate: Some(plate),
            batch: Some(batch),
            source: Some(source),
            position: Some((row, col)),
        }
    }
}

fn normals(seed: u64, tag: &str, n: usize, sd: f64) -> Vec<f64> {
    let mut r = rng::stream(seed, tag);
    (0..n).map(|_| sd * r.sample::<f64, _>(StandardNormal)).collect()
}

impl Universe {
    pub fn plate_offset(&self, plate: usize) -> Vec<f64> {
        normals(
            self.seed,
            &format!("nuisance/plate/{plate}"),
            self.d_feat(),
            self.config.nuisance.plate_sd,
        )
    }

    pub fn batch_offset(&self, batch: usize) -> Vec<f64> {
        normals(
            self.seed,
            &format!("nuisance/batch/{batch}"),
            self.d_feat(),
            self.config.nuisance.batch_sd,
        )
    }

    pub fn source_gain(&self, source: usize) -> Vec<f64> {
        normals(
            self.seed,
            &format!("nuisance/source/{source}"),
            self.d_feat(),
            self.config.nuisance.source_gain_sd,
        )
        .into_iter()
        .map(|g| 1.0 + g)
        .collect()
    }

    /// Smooth linear gradient across the plate, zero at the plate centre.
    pub fn position_offset(&self, row: usize, col: usize) -> Vec<f64> {
        let sd = self.config.nuisance.position_sd;
        let g = normals(self.seed, "nuisance/position", 2 * self.d_feat(), sd);
        let u = row as f64 / POSITION_ROWS - 0.5;
        let v = col as f64 / POSITION_COLS - 0.5;
        (0..self.d_feat()).map(|j| u * g[2 * j] + v * g[2 * j + 1]).collect()
    }

    /// Latent effect vector and potency of a perturbation; controls have none.
    fn latent_effect(&self, pert: Perturbation) -> Result<Option<(&[f64], f64)>, ArenaError> {
        match pert {
            Perturbation::Control => Ok(None),
            Perturbation::Compound(id) => {
                let c = self
                    .compound(id)
                    .ok_or_else(|| ArenaError::Invalid(format!("unknown compound {id}")))?;
                Ok(Some((&c.effect, c.potency)))
            }
            Perturbation::Crispr(id) => {
                let p = self
                    .crispr(id)
                    .ok_or_else(|| ArenaError::Invalid(format!("unknown crispr perturbation {id}")))?;
                Ok(Some((&p.effect, 1.0)))
            }
        }
    }

    /// Noise-free phenotype: `gain ⊙ (control + potency·M·effect + offsets)`.
    ///
    /// The additive offsets are the plate offset, the batch offset of the
    /// enclosing batch, and the position gradient.
    pub fn expected_phenotype(&self, pert: Perturbation, nuisance: &NuisanceContext) -> Result<Vec<f64>, ArenaError> {
        let mut x = self.control_mean.clone();
        if let Some((effect, potency)) = self.latent_effect(pert)? {
            let scale = potency * self.config.effect_scale;
            for (j, xj) in x.iter_mut().enumerate() {
                let row = self.feature_map.row(j);
                *xj += scale * row.iter().zip(effect).map(|(m, e)| m * e).sum::<f64>();
            }
        }
        let mut add = |v: Vec<f64>| x.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        if let Some(p) = nuisance.plate {
            add(self.plate_offset(p));
        }
        if let Some(b) = nuisance.batch {
            add(self.batch_offset(b));
        }
        if let Some((r, c)) = nuisance.position {
            add(self.position_offset(r, c));
        }
        if let Some(s) = nuisance.source {
            x.iter_mut().zip(self.source_gain(s)).for_each(|(a, g)| *a *= g);
        }
        Ok(x)
    }
}

/// Draws `n_cells` single-cell feature vectors for one perturbation in one
/// nuisance context.
pub fn simulate_cells(
    universe: &Universe,
    pert: Perturbation,
    nuisance: &NuisanceContext,
    n_cells: usize,
    seed: u64,
) -> Result<Matrix, ArenaError> {
    if n_cells == 0 {
        return Err(ArenaError::Invalid("n_cells must be at least 1".into()));
    }
    let mean = universe.expected_phenotype(pert, nuisance)?;
    let gain = match nuisance.source {
        Some(s) => universe.source_gain(s),
        None => vec![1.0; universe.d_feat()],
    };
    let sd = universe.config.noise_sd;
    let mut r = rng::stream(seed, "cells");
    let d = universe.d_feat();
    let mut out = Matrix::zeros(n_cells, d);
    for i in 0..n_cells {
        let row = out.row_mut(i);
        for j in 0..d {
            let z: f64 = r.sample(StandardNormal);
            row[j] = mean[j] + gain[j] * sd * z;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::universe::{generate_universe, NuisanceScales, UniverseConfig};

    fn cfg() -> UniverseConfig {
        UniverseConfig {
            n_targets: 4,
            n_moas: 2,
            n_compounds: 8,
            n_crispr: 2,
            ..UniverseConfig::default()
        }
    }

    #[test]
    fn noiseless_control_equals_control_mean() {
        let u = generate_universe(&UniverseConfig { noise_sd: 0.0, ..cfg() }, 1).unwrap();
        let cells = simulate_cells(&u, Perturbation::Control, &NuisanceContext::none(), 5, 9).unwrap();
        for i in 0..5 {
            assert_eq!(cells.row(i), u.control_mean.as_slice());
        }
    }

    #[test]
    fn zero_effect_matches_control_distribution() {
        let u = generate_universe(
            &UniverseConfig {
                effect_scale: 0.0,
                ..cfg()
            },
            1,
        )
        .unwrap();
        let ctx = NuisanceContext::at(1, 0, 0, 3, 4);
        let a = simulate_cells(&u, Perturbation::Compound(2), &ctx, 7, 11).unwrap();
        let b = simulate_cells(&u, Perturbation::Control, &ctx, 7, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shared_target_gives_shared_mean() {
        let base = UniverseConfig {
            offset_scale: 0.0,
            potency_min: 1.0,
            potency_max: 1.0,
            nuisance: NuisanceScales::none(),
            ..cfg()
        };
        let u = generate_universe(&base, 5).unwrap();
        let t = u.compounds[0].target_id;
        let other = u
            .compounds
            .iter()
            .find(|c| c.target_id == t && c.compound_id != 0)
            .expect("two compounds per target")
            .compound_id;
        let n = 10_000;
        let ctx = NuisanceContext::none();
        let a = simulate_cells(&u, Perturbation::Compound(0), &ctx, n, 1)
            .unwrap()
            .column_means();
        let b = simulate_cells(&u, Perturbation::Compound(other), &ctx, n, 2)
            .unwrap()
            .column_means();
        // difference of two independent means has sd·√2/√n
        let tol = 3.0 * u.config.noise_sd * 2f64.sqrt() / (n as f64).sqrt();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn sample_mean_matches_expected_phenotype() {
        let u = generate_universe(&cfg(), 2).unwrap();
        let ctx = NuisanceContext::at(2, 1, 1, 5, 7);
        let expected = u.expected_phenotype(Perturbation::Compound(3), &ctx).unwrap();
        let gain = u.source_gain(1);
        let n = 20_000;
        let m = simulate_cells(&u, Perturbation::Compound(3), &ctx, n, 4)
            .unwrap()
            .column_means();
        for j in 0..u.d_feat() {
            let tol = 4.0 * gain[j].abs() * u.config.noise_sd / (n as f64).sqrt();
            assert!((m[j] - expected[j]).abs() < tol);
        }
        // independent assembly of the expectation from its parts
        let c = &u.compounds[3];
        let plate = u.plate_offset(2);
        let batch = u.batch_offset(1);
        let pos = u.position_offset(5, 7);
        for j in 0..u.d_feat() {
            let signal: f64 = (0..u.config.d_latent)
                .map(|k| u.feature_map[(j, k)] * c.effect[k])
                .sum();
            let want = gain[j] * (u.control_mean[j] + c.potency * signal + plate[j] + batch[j] + pos[j]);
            assert!((want - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn potency_strictly_increases_distance_from_control() {
        let mut u = generate_universe(&UniverseConfig { noise_sd: 0.0, ..cfg() }, 3).unwrap();
        let ctx = NuisanceContext::none();
        let control = u.expected_phenotype(Perturbation::Control, &ctx).unwrap();
        let mut last = -1.0;
        for step in 1..=10 {
            u.compounds[0].potency = 0.25 * step as f64;
            let x = u.expected_phenotype(Perturbation::Compound(0), &ctx).unwrap();
            let dist: f64 = x
                .iter()
                .zip(&control)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist > last);
            last = dist;
        }
    }

    #[test]
    fn unknown_perturbation_rejected() {
        let u = generate_universe(&cfg(), 2).unwrap();
        let ctx = NuisanceContext::none();
        assert!(simulate_cells(&u, Perturbation::Compound(99), &ctx, 1, 0).is_err());
        assert!(simulate_cells(&u, Perturbation::Crispr(99), &ctx, 1, 0).is_err());
        assert!(simulate_cells(&u, Perturbation::Control, &ctx, 0, 0).is_err());
    }
}
