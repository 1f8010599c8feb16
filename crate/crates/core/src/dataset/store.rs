//! Dataset directories, object-level splits and nested subsets.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::{load_record, save_record, SampleRecord};
use super::{caption, generate_objects, render_views, ObjectSpec, DEFAULT_HOLDOUT, DEFAULT_RESOLUTION, DEFAULT_VIEWS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::shading::LightRig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub objects: usize,
    pub views: usize,
    pub resolution: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            objects: 64,
            views: DEFAULT_VIEWS,
            resolution: DEFAULT_RESOLUTION,
            seed: 1,
            holdout_fraction: DEFAULT_HOLDOUT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub spec: ObjectSpec,
    pub caption: String,
    pub eval: bool,
    pub records: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub light_rig: LightRig,
    pub objects: Vec<ObjectEntry>,
}

/// Holds every record of a dataset directory in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    /// Renders all objects and writes the directory; existing files are
    /// overwritten.
    pub fn generate(config: &DatasetConfig, root: &Path) -> Result<Self> {
        if !(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "holdout_fraction {} outside (0, 1)",
                config.holdout_fraction
            )));
        }
        let rig = LightRig::default();
        let specs = generate_objects(config.objects, config.seed)?;
        let ids: Vec<usize> = specs.iter().map(|s| s.id).collect();
        let (_, eval_ids) = split_objects(&ids, config.holdout_fraction, config.seed)?;
        std::fs::create_dir_all(root.join("records"))?;
        let mut records = Vec::new();
        let mut objects = Vec::new();
        for spec in specs {
            let mut files = Vec::new();
            for rec in render_views(&spec, config.views, config.resolution, &rig)? {
                let name = format!("records/o{:05}_v{:02}.pbrd", spec.id, rec.meta.view_id);
                save_record(&rec, &root.join(&name))?;
                files.push(name);
                records.push(rec);
            }
            objects.push(ObjectEntry {
                caption: caption(&spec.prompt()),
                eval: eval_ids.contains(&spec.id),
                spec,
                records: files,
            });
        }
        let manifest = Manifest {
            config: config.clone(),
            light_rig: rig,
            objects,
        };
        std::fs::write(root.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            records,
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingDataset(root.to_path_buf()));
        }
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(&path)?)?;
        let mut records = Vec::new();
        for obj in &manifest.objects {
            for f in &obj.records {
                records.push(load_record(&root.join(f))?);
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            records,
        })
    }

    pub fn resolution(&self) -> usize {
        self.manifest.config.resolution
    }

    fn object_indices(&self, keep: impl Fn(&ObjectEntry) -> bool) -> Vec<usize> {
        let chosen: BTreeSet<usize> = self
            .manifest
            .objects
            .iter()
            .filter(|o| keep(o))
            .map(|o| o.spec.id)
            .collect();
        (0..self.records.len())
            .filter(|&i| chosen.contains(&self.records[i].meta.object_id))
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.object_indices(|o| !o.eval)
    }

    pub fn eval_indices(&self) -> Vec<usize> {
        self.object_indices(|o| o.eval)
    }

    /// Train records of the nested `fraction` subset of training objects.
    pub fn train_subset(&self, fraction: f64) -> Result<Vec<usize>> {
        let ids: Vec<usize> = self
            .manifest
            .objects
            .iter()
            .filter(|o| !o.eval)
            .map(|o| o.spec.id)
            .collect();
        let keep: BTreeSet<usize> = fraction_subset(&ids, fraction, self.manifest.config.seed)?
            .into_iter()
            .collect();
        Ok(self.object_indices(|o| keep.contains(&o.spec.id)))
    }

    pub fn spec(&self, object_id: usize) -> Option<&ObjectSpec> {
        self.manifest
            .objects
            .iter()
            .map(|o| &o.spec)
            .find(|s| s.id == object_id)
    }
}

fn unique_sorted(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

/// Object-level holdout: `round(fraction * n)` objects (at least one on each
/// side) go to the eval set. Returns sorted `(train, eval)` ids.
pub fn split_objects(ids: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("holdout fraction {fraction} outside (0, 1)")));
    }
    let mut ids = unique_sorted(ids);
    let n = ids.len();
    if n < 2 {
        return Err(Error::invalid("splitting needs at least two objects"));
    }
    Rng::new(seed).fork_named("holdout").shuffle(&mut ids);
    let n_eval = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut eval = ids.split_off(n - n_eval);
    ids.sort_unstable();
    eval.sort_unstable();
    Ok((ids, eval))
}

/// Splits records by object; returns `(train, eval)` record indices.
pub fn split(records: &[SampleRecord], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let ids: Vec<usize> = records.iter().map(|r| r.meta.object_id).collect();
    let (_, eval) = split_objects(&ids, fraction, seed)?;
    let eval: BTreeSet<usize> = eval.into_iter().collect();
    Ok((0..records.len()).partition(|&i| !eval.contains(&records[i].meta.object_id)))
}

/// First `ceil(fraction * n)` objects of one fixed permutation, so subsets
/// for growing fractions are nested.
pub fn fraction_subset(ids: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("data fraction {fraction} outside (0, 1]")));
    }
    let mut ids = unique_sorted(ids);
    if ids.is_empty() {
        return Err(Error::invalid("no objects to subset"));
    }
    Rng::new(seed).fork_named("fraction").shuffle(&mut ids);
    let k = ((fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len());
    ids.truncate(k);
    ids.sort_unstable();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_split_of_ten_objects() {
        let ids: Vec<usize> = (0..10).collect();
        let (train, eval) = split_objects(&ids, 0.5, 3).unwrap();
        assert_eq!((train.len(), eval.len()), (5, 5));
        assert!(train.iter().all(|i| !eval.contains(i)));
        assert_eq!(split_objects(&ids, 0.5, 3).unwrap(), (train, eval));
        assert!(split_objects(&[4], 0.5, 3).is_err());
        assert!(split_objects(&ids, 1.0, 3).is_err());
    }

    #[test]
    fn default_holdout_keeps_one_object_out_of_64() {
        let ids: Vec<usize> = (0..64).collect();
        let (train, eval) = split_objects(&ids, DEFAULT_HOLDOUT, 1).unwrap();
        assert_eq!((train.len(), eval.len()), (63, 1));
    }

    #[test]
    fn fraction_subsets_are_nested() {
        let ids: Vec<usize> = (0..300).collect();
        let sets: Vec<BTreeSet<usize>> = [0.01, 0.05, 0.2, 0.98]
            .iter()
            .map(|&f| fraction_subset(&ids, f, 9).unwrap().into_iter().collect())
            .collect();
        assert_eq!(sets[0].len(), 3);
        for w in sets.windows(2) {
            assert!(w[0].is_subset(&w[1]));
        }
    }
}
