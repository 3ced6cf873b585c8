use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::simulate::{simulate_cells, NuisanceContext, PertType, Perturbation};
use super::universe::Universe;
use super::ArenaError;
use crate::prep::aggregate_well;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellRecord {
    pub well_id: usize,
    pub features: Vec<f64>,
    pub plate: usize,
    pub batch: usize,
    pub source: usize,
    pub row: usize,
    pub col: usize,
    pub pert_type: PertType,
    pub pert_id: usize,
    pub replicate_index: usize,
}

impl WellRecord {
    pub fn compound_id(&self) -> Option<usize> {
        (self.pert_type == PertType::Compound).then_some(self.pert_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ArenaHoldout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompoundLabels {
    pub moa_id: usize,
    pub target_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArenaDataset {
    pub wells: Vec<WellRecord>,
    /// Split tag per well id.
    pub split: BTreeMap<usize, Split>,
    /// Ground-truth labels for every compound present in the dataset.
    pub label_maps: BTreeMap<usize, CompoundLabels>,
    /// Compounds scored by the arena tasks.
    pub arena_compounds: BTreeSet<usize>,
    /// Training-only compounds, disjoint from the arena.
    pub ood_pool: BTreeSet<usize>,
    /// CRISPR perturbation id → knocked-out gene (target id).
    pub crispr_genes: BTreeMap<usize, usize>,
    /// Replicates per compound before any subsampling.
    pub replicates: usize,
}

impl ArenaDataset {
    pub fn split_of(&self, well: &WellRecord) -> Split {
        self.split.get(&well.well_id).copied().unwrap_or(Split::Train)
    }

    pub fn d_feat(&self) -> usize {
        self.wells.first().map_or(0, |w| w.features.len())
    }

    pub fn train_wells(&self) -> impl Iterator<Item = &WellRecord> {
        self.wells.iter().filter(|w| self.split_of(w) == Split::Train)
    }

    pub fn holdout_wells(&self) -> impl Iterator<Item = &WellRecord> {
        self.wells.iter().filter(|w| self.split_of(w) == Split::ArenaHoldout)
    }

    pub fn train_ids(&self) -> BTreeSet<usize> {
        self.train_wells().map(|w| w.well_id).collect()
    }

    pub fn holdout_ids(&self) -> BTreeSet<usize> {
        self.holdout_wells().map(|w| w.well_id).collect()
    }

    /// Number of OOD training wells, i.e. the non-unique OOD molecule count.
    pub fn ood_train_wells(&self) -> usize {
        self.train_wells()
            .filter(|w| w.compound_id().is_some_and(|c| self.ood_pool.contains(&c)))
            .count()
    }

    /// Checks holdout hygiene, label coverage and well uniqueness.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.arena_compounds.is_disjoint(&self.ood_pool) {
            return Err("OOD pool intersects the arena".into());
        }
        let mut positions = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for w in &self.wells {
            if !ids.insert(w.well_id) {
                return Err(format!("duplicate well id {}", w.well_id));
            }
            if !positions.insert((w.plate, w.row, w.col)) {
                return Err(format!("duplicate position on plate {}", w.plate));
            }
            if w.features.iter().any(|x| !x.is_finite()) {
                return Err(format!("non-finite features in well {}", w.well_id));
            }
            if let Some(c) = w.compound_id() {
                let tracked = self.arena_compounds.contains(&c) || self.ood_pool.contains(&c);
                if tracked && !self.label_maps.contains_key(&c) {
                    return Err(format!("compound {c} has no labels"));
                }
                if self.ood_pool.contains(&c) && self.split_of(w) == Split::ArenaHoldout {
                    return Err(format!("OOD compound {c} has a holdout well"));
                }
            }
            let gene_known = self.crispr_genes.is_empty() || self.crispr_genes.contains_key(&w.pert_id);
            if w.pert_type == PertType::Crispr && !gene_known {
                return Err(format!("unknown crispr perturbation {}", w.pert_id));
            }
        }
        Ok(())
    }
}

/// Layout and split of a synthetic screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPlan {
    pub n_arena: usize,
    /// OOD compounds in the pool; `None` takes every non-arena compound.
    pub n_ood: Option<usize>,
    pub replicates: usize,
    /// Replicates of each arena compound reserved for arena evaluation.
    pub holdout_replicates: usize,
    pub crispr_replicates: usize,
    pub n_plates: usize,
    pub n_batches: usize,
    pub n_sources: usize,
    /// Fraction of each plate's wells that are negative controls.
    pub control_fraction: f64,
    pub cells_per_well: usize,
    pub plate_rows: usize,
    pub plate_cols: usize,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            n_arena: 40,
            n_ood: None,
            replicates: 5,
            holdout_replicates: 2,
            crispr_replicates: 5,
            n_plates: 8,
            n_batches: 4,
            n_sources: 2,
            control_fraction: 0.1,
            cells_per_well: 16,
            plate_rows: 16,
            plate_cols: 24,
        }
    }
}

impl SplitPlan {
    fn validate(&self, universe: &Universe) -> Result<usize, ArenaError> {
        let fail = |m: String| Err(ArenaError::Config(m));
        let n_comp = universe.compounds.len();
        if self.n_arena > n_comp {
            return fail(format!(
                "plan asks for {} arena compounds but the universe has {n_comp}",
                self.n_arena
            ));
        }
        let n_ood = self.n_ood.unwrap_or(n_comp - self.n_arena);
        if self.n_arena + n_ood > n_comp {
            return fail(format!(
                "arena plus OOD compounds ({}) exceed the universe ({n_comp})",
                self.n_arena + n_ood
            ));
        }
        if self.replicates == 0 || self.cells_per_well == 0 {
            return fail("replicates and cells_per_well must be at least 1".into());
        }
        if self.n_arena > 0 && self.holdout_replicates >= self.replicates {
            return fail("holdout_replicates must leave at least one training replicate".into());
        }
        if self.n_plates == 0 || self.n_batches == 0 || self.n_sources == 0 {
            return fail("plate, batch and source counts must be at least 1".into());
        }
        if self.n_batches > self.n_plates || self.n_sources > self.n_batches {
            return fail("need n_sources <= n_batches <= n_plates".into());
        }
        if !(0.0..1.0).contains(&self.control_fraction) {
            return fail("control_fraction must lie in [0, 1)".into());
        }
        Ok(n_ood)
    }
}

struct Slot {
    pert: Perturbation,
    pert_type: PertType,
    pert_id: usize,
    replicate_index: usize,
    split: Split,
}

/// Lays out a screen: picks arena and OOD compounds, spreads replicate wells
/// over plates, adds controls to every plate, and simulates every well as the
/// median of its cells.
pub fn assemble_dataset(universe: &Universe, plan: &SplitPlan, seed: u64) -> Result<ArenaDataset, ArenaError> {
    let n_ood = plan.validate(universe)?;

    let mut order: Vec<usize> = (0..universe.compounds.len()).collect();
    order.shuffle(&mut rng::stream(seed, "assemble/select"));
    let arena: BTreeSet<usize> = order[..plan.n_arena].iter().copied().collect();
    let ood: BTreeSet<usize> = order[plan.n_arena..plan.n_arena + n_ood].iter().copied().collect();

    let mut slots = Vec::new();
    for &c in arena.iter().chain(ood.iter()) {
        let is_arena = arena.contains(&c);
        for r in 0..plan.replicates {
            let split = if is_arena && r >= plan.replicates - plan.holdout_replicates {
                Split::ArenaHoldout
            } else {
                Split::Train
            };
            slots.push(Slot {
                pert: Perturbation::Compound(c),
                pert_type: PertType::Compound,
                pert_id: c,
                replicate_index: r,
                split,
            });
        }
    }
    for p in &universe.crispr_perts {
        for r in 0..plan.crispr_replicates {
            slots.push(Slot {
                pert: Perturbation::Crispr(p.pert_id),
                pert_type: PertType::Crispr,
                pert_id: p.pert_id,
                replicate_index: r,
                split: Split::ArenaHoldout,
            });
        }
    }
    slots.shuffle(&mut rng::stream(seed, "assemble/layout"));

    let mut plates: Vec<Vec<Slot>> = (0..plan.n_plates).map(|_| Vec::new()).collect();
    for (i, s) in slots.into_iter().enumerate() {
        plates[i % plan.n_plates].push(s);
    }
    let capacity = plan.plate_rows * plan.plate_cols;
    for (p, plate) in plates.iter_mut().enumerate() {
        let n_pert = plate.len();
        let n_ctrl = if plan.control_fraction > 0.0 {
            ((n_pert as f64) * plan.control_fraction / (1.0 - plan.control_fraction)).ceil() as usize
        } else {
            0
        };
        for r in 0..n_ctrl {
            plate.push(Slot {
                pert: Perturbation::Control,
                pert_type: PertType::Control,
                pert_id: 0,
                replicate_index: r,
                split: Split::Train,
            });
        }
        if plate.len() > capacity {
            return Err(ArenaError::Config(format!(
                "plate {p} needs {} wells but holds {capacity}",
                plate.len()
            )));
        }
        plate.shuffle(&mut rng::stream(seed, &format!("assemble/positions/{p}")));
    }

    let mut jobs = Vec::new();
    for (p, plate) in plates.into_iter().enumerate() {
        let batch = p * plan.n_batches / plan.n_plates;
        let source = batch * plan.n_sources / plan.n_batches;
        for (pos, slot) in plate.into_iter().enumerate() {
            let well_id = jobs.len();
            let (row, col) = (pos / plan.plate_cols, pos % plan.plate_cols);
            jobs.push((well_id, p, batch, source, row, col, slot));
        }
    }

    let wells: Vec<WellRecord> = jobs
        .par_iter()
        .map(|(well_id, plate, batch, source, row, col, slot)| {
            let ctx = NuisanceContext::at(*plate, *batch, *source, *row, *col);
            let well_seed = rng::derive_seed(seed, &format!("assemble/well/{well_id}"));
            let cells = simulate_cells(universe, slot.pert, &ctx, plan.cells_per_well, well_seed)?;
            let features = aggregate_well(&cells).map_err(|e| ArenaError::Invalid(e.to_string()))?;
            Ok(WellRecord {
                well_id: *well_id,
                features,
                plate: *plate,
                batch: *batch,
                source: *source,
                row: *row,
                col: *col,
                pert_type: slot.pert_type,
                pert_id: slot.pert_id,
                replicate_index: slot.replicate_index,
            })
        })
        .collect::<Result<_, ArenaError>>()?;

    let split = jobs.iter().map(|(id, .., slot)| (*id, slot.split)).collect();
    let label_maps = arena
        .iter()
        .chain(ood.iter())
        .map(|&c| {
            let spec = &universe.compounds[c];
            (
                c,
                CompoundLabels {
                    moa_id: spec.moa_id,
                    target_id: spec.target_id,
                },
            )
        })
        .collect();
    let crispr_genes = universe.crispr_perts.iter().map(|p| (p.pert_id, p.gene_id)).collect();

    Ok(ArenaDataset {
        wells,
        split,
        label_maps,
        arena_compounds: arena,
        ood_pool: ood,
        crispr_genes,
        replicates: plan.replicates,
    })
}

/// Number of training wells kept per compound at `fraction` of `replicates`.
pub fn kept_replicates(replicates: usize, fraction: f64) -> usize {
    // the epsilon absorbs products such as 0.6·5 landing a hair above 3
    ((fraction * replicates as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Training view with `ood_count` OOD compounds and a fraction of each kept
/// compound's replicates. Holdout, CRISPR and control wells are kept untouched.
pub fn subsample_view(
    dataset: &ArenaDataset,
    ood_count: usize,
    replicate_fraction: f64,
    seed: u64,
) -> Result<ArenaDataset, ArenaError> {
    if !(replicate_fraction > 0.0 && replicate_fraction <= 1.0) {
        return Err(ArenaError::Range(format!(
            "replicate_fraction {replicate_fraction} outside (0, 1]"
        )));
    }
    if ood_count > dataset.ood_pool.len() {
        return Err(ArenaError::Range(format!(
            "ood_count {ood_count} exceeds the pool of {}",
            dataset.ood_pool.len()
        )));
    }
    let mut pool: Vec<usize> = dataset.ood_pool.iter().copied().collect();
    pool.shuffle(&mut rng::stream(seed, "view/ood"));
    let chosen: BTreeSet<usize> = pool[..ood_count].iter().copied().collect();

    let keep_n = kept_replicates(dataset.replicates, replicate_fraction);
    let mut train_by_compound: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for w in dataset.train_wells() {
        if let Some(c) = w.compound_id() {
            train_by_compound.entry(c).or_default().push(w.well_id);
        }
    }
    let mut keep: BTreeSet<usize> = BTreeSet::new();
    for (c, mut ids) in train_by_compound {
        if !(dataset.arena_compounds.contains(&c) || chosen.contains(&c)) {
            continue;
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng::stream(seed, &format!("view/replicates/{c}")));
        keep.extend(ids.into_iter().take(keep_n));
    }

    let wells: Vec<WellRecord> = dataset
        .wells
        .iter()
        .filter(|w| match (w.pert_type, dataset.split_of(w)) {
            (PertType::Compound, Split::Train) => keep.contains(&w.well_id),
            _ => true,
        })
        .cloned()
        .collect();
    let split = wells.iter().map(|w| (w.well_id, dataset.split_of(w))).collect();
    let label_maps = dataset
        .label_maps
        .iter()
        .filter(|(c, _)| dataset.arena_compounds.contains(c) || chosen.contains(c))
        .map(|(c, l)| (*c, *l))
        .collect();

    Ok(ArenaDataset {
        wells,
        split,
        label_maps,
        arena_compounds: dataset.arena_compounds.clone(),
        ood_pool: chosen,
        crispr_genes: dataset.crispr_genes.clone(),
        replicates: dataset.replicates,
    })
}
