//! Dataset ingestion, synthetic generation and persistence.
//!
//! A dataset directory holds:
//!
//! ```text
//! hierarchy.json         label space
//! train.json, test.json  manifests (either may be absent)
//! train_triplets.json    optional; defaults to the triplets of train.json
//! grids/<id>.hsgt        one feature grid per image
//! ```

pub mod container;
pub mod logits;
pub mod manifest;
pub mod params;
pub mod synthetic;
pub mod vg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub use container::Container;
pub use logits::{load_external_logits, parse_external_logits, ExternalEdge};
pub use manifest::{DatasetManifest, DropCounts, ImageRecord, Split};
pub use params::{load_params, save_params, CheckpointHeader};
pub use synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec};
pub use vg::parse_vg_annotations;

use crate::assembly::FeatureGrid;
use crate::error::{Error, Result};
use crate::eval::TripletSet;
use crate::hierarchy::LabelSpace;

pub const HIERARCHY_FILE: &str = "hierarchy.json";
pub const TRAIN_FILE: &str = "train.json";
pub const TEST_FILE: &str = "test.json";
pub const TRIPLETS_FILE: &str = "train_triplets.json";
pub const GRID_DIR: &str = "grids";

/// Label space, manifests and feature grids held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub space: LabelSpace,
    pub train: Option<DatasetManifest>,
    pub test: Option<DatasetManifest>,
    /// Keyed by image id.
    pub grids: BTreeMap<String, FeatureGrid>,
    pub train_triplets: Option<TripletSet>,
}

fn grid_header(id: &str) -> serde_json::Value {
    serde_json::json!({"kind": "grid", "image_id": id})
}

pub fn write_grid(grid: &FeatureGrid, id: &str, path: &Path) -> Result<()> {
    let mut c = Container::new(grid_header(id));
    c.push("features", grid.values().clone());
    c.write(path)
}

pub fn read_grid(path: &Path) -> Result<FeatureGrid> {
    let c = Container::read(path)?;
    if c.header.get("kind").and_then(|k| k.as_str()) != Some("grid") {
        return Err(Error::Mismatch(format!("{} is not a feature grid", path.display())));
    }
    let t = c
        .get("features")
        .cloned()
        .ok_or_else(|| Error::Corrupt(format!("{}: no features tensor", path.display())))?;
    FeatureGrid::new(t)
}

impl Dataset {
    pub fn split(&self, split: Split) -> Result<&DatasetManifest> {
        match split {
            Split::Train => self.train.as_ref(),
            Split::Test => self.test.as_ref(),
        }
        .ok_or_else(|| Error::invalid(format!("dataset has no {split:?} split")))
    }

    pub fn grid(&self, image_id: &str) -> Result<&FeatureGrid> {
        self.grids
            .get(image_id)
            .ok_or_else(|| Error::invalid(format!("no feature grid for image {image_id:?}")))
    }

    /// Training triplets for zero-shot recall: the stored set, else those of the train split.
    pub fn seen_triplets(&self) -> Option<TripletSet> {
        self.train_triplets
            .clone()
            .or_else(|| self.train.as_ref().map(|m| m.triplets()))
    }

    pub fn validate(&self) -> Result<()> {
        for m in self.train.iter().chain(self.test.iter()) {
            m.validate(&self.space)?;
            for img in &m.images {
                self.grid(&img.id)?;
            }
        }
        Ok(())
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let grid_dir = dir.join(GRID_DIR);
        std::fs::create_dir_all(&grid_dir).map_err(|e| Error::io(&grid_dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write(HIERARCHY_FILE, self.space.to_json_pretty() + "\n")?;
        if let Some(m) = &self.train {
            m.save(&dir.join(TRAIN_FILE))?;
        }
        if let Some(m) = &self.test {
            m.save(&dir.join(TEST_FILE))?;
        }
        if let Some(t) = &self.train_triplets {
            write(TRIPLETS_FILE, manifest::triplets_to_json(t, &self.space)?)?;
        }
        for (id, g) in &self.grids {
            write_grid(g, id, &grid_dir.join(format!("{id}.hsgt")))?;
        }
        Ok(())
    }

    /// Loads a dataset directory. `hierarchy` overrides `hierarchy.json`.
    pub fn load_dir(dir: &Path, hierarchy: Option<&Path>) -> Result<Self> {
        let hpath = hierarchy.map(Path::to_path_buf).unwrap_or_else(|| dir.join(HIERARCHY_FILE));
        let space = LabelSpace::load(&hpath)?;
        let load_split = |name: &str| -> Result<Option<DatasetManifest>> {
            let p = dir.join(name);
            p.exists().then(|| DatasetManifest::load(&p)).transpose()
        };
        let train = load_split(TRAIN_FILE)?;
        let test = load_split(TEST_FILE)?;
        if train.is_none() && test.is_none() {
            return Err(Error::invalid(format!("{} holds neither {TRAIN_FILE} nor {TEST_FILE}", dir.display())));
        }
        let tpath = dir.join(TRIPLETS_FILE);
        let train_triplets = tpath.exists().then(|| manifest::load_triplets(&tpath, &space)).transpose()?;
        let mut grids = BTreeMap::new();
        for img in train.iter().chain(test.iter()).flat_map(|m| &m.images) {
            if let Some(rel) = &img.grid {
                grids.insert(img.id.clone(), read_grid(&dir.join(rel))?);
            }
        }
        let ds = Dataset {
            space,
            train,
            test,
            grids,
            train_triplets,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// SHA-256 over the sorted relative paths and contents of every file under `dir`.
pub fn dir_digest(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = std::fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
