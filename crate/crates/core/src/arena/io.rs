//! Dataset files: a comma-separated well table plus two JSON sidecars
//! (compound labels and the split manifest).
//!
//! The well table is the ingestion point for real profiles: any table with
//! the same header can be loaded, with or without sidecars.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{ArenaDataset, CompoundLabels, Split, WellRecord};
use super::simulate::PertType;
use super::ArenaError;

pub const WELLS_FILE: &str = "wells.csv";
pub const LABELS_FILE: &str = "labels.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

const FIXED_COLUMNS: [&str; 9] = [
    "well_id",
    "plate",
    "batch",
    "source",
    "row",
    "col",
    "pert_type",
    "pert_id",
    "replicate_index",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsFile {
    pub schema_version: u32,
    pub compounds: BTreeMap<usize, CompoundLabels>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub replicates: usize,
    pub arena_compounds: BTreeSet<usize>,
    pub ood_pool: BTreeSet<usize>,
    pub holdout_wells: BTreeSet<usize>,
    pub crispr_genes: BTreeMap<usize, usize>,
}

fn data_err(path: &Path, line: Option<usize>, msg: impl Into<String>) -> ArenaError {
    ArenaError::Data {
        path: path.display().to_string(),
        line,
        message: msg.into(),
    }
}

pub fn write_wells_csv(wells: &[WellRecord], path: &Path) -> Result<(), ArenaError> {
    let d = wells.first().map_or(0, |w| w.features.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| data_err(path, None, e.to_string()))?;
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header)
        .map_err(|e| data_err(path, None, e.to_string()))?;
    for well in wells {
        let mut rec = vec![
            well.well_id.to_string(),
            well.plate.to_string(),
            well.batch.to_string(),
            well.source.to_string(),
            well.row.to_string(),
            well.col.to_string(),
            well.pert_type.as_str().to_string(),
            well.pert_id.to_string(),
            well.replicate_index.to_string(),
        ];
        rec.extend(well.features.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(|e| data_err(path, None, e.to_string()))?;
    }
    w.flush().map_err(|e| data_err(path, None, e.to_string()))?;
    Ok(())
}

pub fn read_wells_csv(path: &Path) -> Result<Vec<WellRecord>, ArenaError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| data_err(path, None, e.to_string()))?;
    let header = r.headers().map_err(|e| data_err(path, Some(1), e.to_string()))?.clone();
    for (i, want) in FIXED_COLUMNS.iter().enumerate() {
        if header.get(i) != Some(*want) {
            return Err(data_err(
                path,
                Some(1),
                format!("expected column {want:?} at position {i}"),
            ));
        }
    }
    let d = header.len() - FIXED_COLUMNS.len();
    for j in 0..d {
        if header.get(FIXED_COLUMNS.len() + j) != Some(format!("f{j}").as_str()) {
            return Err(data_err(path, Some(1), format!("expected feature column f{j}")));
        }
    }
    let mut wells = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| data_err(path, Some(line), e.to_string()))?;
        let int = |k: usize| -> Result<usize, ArenaError> {
            rec.get(k).unwrap_or("").parse().map_err(|_| {
                data_err(
                    path,
                    Some(line),
                    format!("column {} is not an integer", FIXED_COLUMNS[k]),
                )
            })
        };
        let pert_type: PertType = rec
            .get(6)
            .unwrap_or("")
            .parse()
            .map_err(|e: String| data_err(path, Some(line), e))?;
        let features = (0..d)
            .map(|j| {
                rec.get(FIXED_COLUMNS.len() + j)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|_| data_err(path, Some(line), format!("feature f{j} is not a number")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        wells.push(WellRecord {
            well_id: int(0)?,
            plate: int(1)?,
            batch: int(2)?,
            source: int(3)?,
            row: int(4)?,
            col: int(5)?,
            pert_type,
            pert_id: int(7)?,
            replicate_index: int(8)?,
            features,
        });
    }
    Ok(wells)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), ArenaError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| data_err(path, None, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| data_err(path, None, e.to_string()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ArenaError> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, None, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| data_err(path, Some(e.line()), e.to_string()))
}

/// Writes `wells.csv`, `labels.json` and `manifest.json` into `dir`.
pub fn save_dataset(ds: &ArenaDataset, dir: &Path) -> Result<(), ArenaError> {
    fs::create_dir_all(dir).map_err(|e| data_err(dir, None, e.to_string()))?;
    write_wells_csv(&ds.wells, &dir.join(WELLS_FILE))?;
    write_json(
        &LabelsFile {
            schema_version: SCHEMA_VERSION,
            compounds: ds.label_maps.clone(),
        },
        &dir.join(LABELS_FILE),
    )?;
    write_json(
        &Manifest {
            schema_version: SCHEMA_VERSION,
            replicates: ds.replicates,
            arena_compounds: ds.arena_compounds.clone(),
            ood_pool: ds.ood_pool.clone(),
            holdout_wells: ds.holdout_ids(),
            crispr_genes: ds.crispr_genes.clone(),
        },
        &dir.join(MANIFEST_FILE),
    )
}

/// Loads a dataset directory. Without a manifest every well is a training
/// well and every labelled compound belongs to the arena.
pub fn load_dataset(dir: &Path) -> Result<ArenaDataset, ArenaError> {
    let wells = read_wells_csv(&dir.join(WELLS_FILE))?;
    let labels_path = dir.join(LABELS_FILE);
    let labels: LabelsFile = if labels_path.exists() {
        read_json(&labels_path)?
    } else {
        LabelsFile {
            schema_version: SCHEMA_VERSION,
            compounds: BTreeMap::new(),
        }
    };
    if labels.schema_version != SCHEMA_VERSION {
        return Err(data_err(
            &labels_path,
            None,
            format!("unsupported schema version {}", labels.schema_version),
        ));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = if manifest_path.exists() {
        read_json(&manifest_path)?
    } else {
        let replicates = {
            let mut per: BTreeMap<usize, usize> = BTreeMap::new();
            for w in wells.iter().filter(|w| w.pert_type == PertType::Compound) {
                *per.entry(w.pert_id).or_default() += 1;
            }
            per.values().copied().max().unwrap_or(1)
        };
        Manifest {
            schema_version: SCHEMA_VERSION,
            replicates,
            arena_compounds: labels.compounds.keys().copied().collect(),
            ood_pool: BTreeSet::new(),
            holdout_wells: BTreeSet::new(),
            crispr_genes: BTreeMap::new(),
        }
    };
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(data_err(
            &manifest_path,
            None,
            format!("unsupported schema version {}", manifest.schema_version),
        ));
    }
    let split = wells
        .iter()
        .map(|w| {
            let s = if manifest.holdout_wells.contains(&w.well_id) {
                Split::ArenaHoldout
            } else {
                Split::Train
            };
            (w.well_id, s)
        })
        .collect();
    let ds = ArenaDataset {
        wells,
        split,
        label_maps: labels.compounds,
        arena_compounds: manifest.arena_compounds,
        ood_pool: manifest.ood_pool,
        crispr_genes: manifest.crispr_genes,
        replicates: manifest.replicates,
    };
    ds.check_invariants().map_err(|m| data_err(dir, None, m))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::{assemble_dataset, generate_universe, SplitPlan, UniverseConfig};

    fn dataset() -> ArenaDataset {
        let cfg = UniverseConfig {
            n_targets: 4,
            n_moas: 2,
            n_compounds: 12,
            n_crispr: 2,
            d_feat: 5,
            ..UniverseConfig::default()
        };
        let u = generate_universe(&cfg, 1).unwrap();
        let plan = SplitPlan {
            n_arena: 6,
            n_plates: 2,
            n_batches: 2,
            n_sources: 1,
            ..SplitPlan::default()
        };
        assemble_dataset(&u, &plan, 5).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let ds = dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn serialization_is_byte_stable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(&dataset(), a.path()).unwrap();
        save_dataset(&dataset(), b.path()).unwrap();
        for f in [WELLS_FILE, LABELS_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn bare_table_is_ingestible() {
        let ds = dataset();
        let dir = tempfile::tempdir().unwrap();
        write_wells_csv(&ds.wells, &dir.path().join(WELLS_FILE)).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.wells, ds.wells);
        assert!(back.holdout_ids().is_empty());
    }

    #[test]
    fn bad_header_names_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(WELLS_FILE), "well,plate\n1,2\n").unwrap();
        match load_dataset(dir.path()) {
            Err(ArenaError::Data { line: Some(1), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let good =
            "well_id,plate,batch,source,row,col,pert_type,pert_id,replicate_index,f0\n0,0,0,0,0,0,compound,1,0,x\n";
        fs::write(dir.path().join(WELLS_FILE), good).unwrap();
        match read_wells_csv(&dir.path().join(WELLS_FILE)) {
            Err(ArenaError::Data { line: Some(2), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
