use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ArenaError;
use crate::linalg::Matrix;
use crate::rng;

/// Scales of the additive and multiplicative nuisance effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NuisanceScales {
    /// Per-plate additive offset, standard deviation per feature.
    pub plate_sd: f64,
    /// Per-batch additive offset shared by every plate of the batch.
    pub batch_sd: f64,
    /// Per-source multiplicative gain is `1 + N(0, gain_sd)` per feature.
    pub source_gain_sd: f64,
    /// Amplitude of the linear row/column gradient across a plate.
    pub position_sd: f64,
}

impl Default for NuisanceScales {
    fn default() -> Self {
        Self {
            plate_sd: 0.3,
            batch_sd: 0.3,
            source_gain_sd: 0.05,
            position_sd: 0.1,
        }
    }
}

impl NuisanceScales {
    pub fn none() -> Self {
        Self {
            plate_sd: 0.0,
            batch_sd: 0.0,
            source_gain_sd: 0.0,
            position_sd: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniverseConfig {
    pub n_targets: usize,
    pub n_moas: usize,
    pub n_compounds: usize,
    /// Number of genes with a CRISPR knockout; must not exceed `n_targets`.
    pub n_crispr: usize,
    pub d_latent: usize,
    pub d_feat: usize,
    /// Spread of targets around their MoA centroid in latent space.
    pub moa_spread: f64,
    /// Scale of the compound-specific latent offset.
    pub offset_scale: f64,
    pub potency_min: f64,
    pub potency_max: f64,
    /// Fraction of compounds that inhibit their target (effect along `-target`).
    pub antagonist_fraction: f64,
    /// Global multiplier on perturbation effects; 0 removes all molecule signal.
    pub effect_scale: f64,
    /// Per-cell measurement noise, standard deviation per feature.
    pub noise_sd: f64,
    pub nuisance: NuisanceScales,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            n_targets: 20,
            n_moas: 20,
            n_compounds: 100,
            n_crispr: 12,
            d_latent: 8,
            d_feat: 32,
            moa_spread: 0.5,
            offset_scale: 0.3,
            potency_min: 0.5,
            potency_max: 1.5,
            antagonist_fraction: 1.0,
            effect_scale: 1.0,
            noise_sd: 1.0,
            nuisance: NuisanceScales::default(),
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<(), ArenaError> {
        let fail = |m: &str| Err(ArenaError::Config(m.to_string()));
        if self.n_targets == 0 || self.n_moas == 0 || self.n_compounds == 0 {
            return fail("target, MoA and compound counts must be at least 1");
        }
        if self.n_moas > self.n_targets {
            return fail("MoA groups partition targets, so n_moas must not exceed n_targets");
        }
        if self.n_crispr > self.n_targets {
            return fail("n_crispr must not exceed n_targets");
        }
        if self.d_latent < 2 {
            return fail("d_latent must be at least 2");
        }
        if self.d_feat == 0 {
            return fail("d_feat must be at least 1");
        }
        if !(self.potency_min > 0.0 && self.potency_max >= self.potency_min) {
            return fail("potency range must satisfy 0 < potency_min <= potency_max");
        }
        if !(0.0..=1.0).contains(&self.antagonist_fraction) {
            return fail("antagonist_fraction must lie in [0, 1]");
        }
        let scales = [
            self.moa_spread,
            self.offset_scale,
            self.effect_scale,
            self.noise_sd,
            self.nuisance.plate_sd,
            self.nuisance.batch_sd,
            self.nuisance.source_gain_sd,
            self.nuisance.position_sd,
        ];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return fail("scales must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Agonist,
    Antagonist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundSpec {
    pub compound_id: usize,
    pub target_id: usize,
    pub moa_id: usize,
    pub mode: ActionMode,
    /// Signed latent effect: `±(target + offset)`.
    pub effect: Vec<f64>,
    pub potency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrisprSpec {
    pub pert_id: usize,
    /// The knocked-out gene, identified with its target id.
    pub gene_id: usize,
    pub effect: Vec<f64>,
}

/// Synthetic ground truth: targets grouped into MoAs, compounds acting on
/// targets, CRISPR knockouts, and the fixed latent → feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    pub config: UniverseConfig,
    pub seed: u64,
    pub targets: Vec<Vec<f64>>,
    /// `moas[m]` lists the target ids of MoA `m`.
    pub moas: Vec<Vec<usize>>,
    pub target_moa: Vec<usize>,
    pub compounds: Vec<CompoundSpec>,
    pub crispr_perts: Vec<CrisprSpec>,
    pub control_mean: Vec<f64>,
    /// `d_feat × d_latent`.
    pub feature_map: Matrix,
}

fn normals<R: Rng>(rng: &mut R, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn generate_universe(cfg: &UniverseConfig, seed: u64) -> Result<Universe, ArenaError> {
    cfg.validate()?;
    let d = cfg.d_latent;

    let mut r = rng::stream(seed, "universe/moa");
    let centroids: Vec<Vec<f64>> = (0..cfg.n_moas).map(|_| normals(&mut r, d, 1.0)).collect();

    let target_moa: Vec<usize> = (0..cfg.n_targets).map(|t| t % cfg.n_moas).collect();
    let mut moas = vec![Vec::new(); cfg.n_moas];
    for (t, &m) in target_moa.iter().enumerate() {
        moas[m].push(t);
    }

    let mut r = rng::stream(seed, "universe/targets");
    let targets: Vec<Vec<f64>> = target_moa
        .iter()
        .map(|&m| {
            let dev = normals(&mut r, d, cfg.moa_spread);
            centroids[m].iter().zip(dev).map(|(c, e)| c + e).collect()
        })
        .collect();

    let mut assignment: Vec<usize> = (0..cfg.n_compounds).map(|i| i % cfg.n_targets).collect();
    assignment.shuffle(&mut rng::stream(seed, "universe/assign"));

    let mut r = rng::stream(seed, "universe/compounds");
    let compounds = assignment
        .iter()
        .enumerate()
        .map(|(compound_id, &target_id)| {
            let mode = if r.random::<f64>() < cfg.antagonist_fraction {
                ActionMode::Antagonist
            } else {
                ActionMode::Agonist
            };
            let sign = match mode {
                ActionMode::Agonist => 1.0,
                ActionMode::Antagonist => -1.0,
            };
            let offset = normals(&mut r, d, cfg.offset_scale);
            let effect = targets[target_id]
                .iter()
                .zip(offset)
                .map(|(t, o)| sign * (t + o))
                .collect();
            let potency = cfg.potency_min + (cfg.potency_max - cfg.potency_min) * r.random::<f64>();
            CompoundSpec {
                compound_id,
                target_id,
                moa_id: target_moa[target_id],
                mode,
                effect,
                potency,
            }
        })
        .collect();

    let mut genes: Vec<usize> = (0..cfg.n_targets).collect();
    genes.shuffle(&mut rng::stream(seed, "universe/crispr"));
    genes.truncate(cfg.n_crispr);
    genes.sort_unstable();
    let crispr_perts = genes
        .into_iter()
        .enumerate()
        .map(|(pert_id, gene_id)| CrisprSpec {
            pert_id,
            gene_id,
            effect: targets[gene_id].iter().map(|t| -t).collect(),
        })
        .collect();

    let mut r = rng::stream(seed, "universe/features");
    let control_mean = normals(&mut r, cfg.d_feat, 1.0);
    let map_sd = 1.0 / (d as f64).sqrt();
    let feature_map = Matrix::from_vec(cfg.d_feat, d, normals(&mut r, cfg.d_feat * d, map_sd));

    Ok(Universe {
        config: cfg.clone(),
        seed,
        targets,
        moas,
        target_moa,
        compounds,
        crispr_perts,
        control_mean,
        feature_map,
    })
}

impl Universe {
    pub fn d_feat(&self) -> usize {
        self.config.d_feat
    }

    pub fn compound(&self, id: usize) -> Option<&CompoundSpec> {
        self.compounds.get(id)
    }

    pub fn crispr(&self, id: usize) -> Option<&CrisprSpec> {
        self.crispr_perts.get(id)
    }

    /// Checks the structural invariants tying compounds, targets and MoAs together.
    pub fn check_invariants(&self) -> Result<(), String> {
        let d = self.config.d_latent;
        for c in &self.compounds {
            if c.target_id >= self.targets.len() {
                return Err(format!("compound {} has invalid target", c.compound_id));
            }
            if !self.moas[c.moa_id].contains(&c.target_id) {
                return Err(format!("compound {} MoA does not contain its target", c.compound_id));
            }
            if !(c.potency > 0.0) || c.effect.len() != d {
                return Err(format!("compound {} has invalid potency or effect", c.compound_id));
            }
        }
        for p in &self.crispr_perts {
            if p.gene_id >= self.targets.len() {
                return Err(format!("crispr {} has invalid gene", p.pert_id));
            }
        }
        let mut seen = vec![0usize; self.targets.len()];
        for group in &self.moas {
            for &t in group {
                seen[t] += 1;
            }
        }
        if seen.iter().any(|&n| n != 1) {
            return Err("MoA groups do not partition targets".into());
        }
        Ok(())
    }
}
