//! Deterministic synthetic screening data: a latent universe of targets,
//! MoAs, compounds and CRISPR knockouts, a forward process with plate, batch,
//! source and position nuisances, and the arena/OOD split.

mod dataset;
pub mod io;
mod simulate;
mod universe;

pub use dataset::{
    assemble_dataset, kept_replicates, subsample_view, ArenaDataset, CompoundLabels, Split, SplitPlan, WellRecord,
};
pub use simulate::{simulate_cells, NuisanceContext, PertType, Perturbation};
pub use universe::{generate_universe, ActionMode, CompoundSpec, CrisprSpec, NuisanceScales, Universe, UniverseConfig};

#[derive(Debug, thiserror::Error)]
pub enum ArenaError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Data {
        path: String,
        line: Option<usize>,
        message: String,
    },
}
