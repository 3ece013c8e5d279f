//! On-disk datasets: a `manifest.json` plus GTF files referenced by relative
//! paths.

use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use gradirn_core::registration::normalize_min_max;
use gradirn_core::{DisplacementField, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gtf;
use crate::synth::{pair_rng, synth_pair, SamplePair, Split, SynthParams};

pub const MANIFEST: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub size: usize,
    pub deform_scale: f64,
    pub smoothness: f64,
    pub texture: f64,
    pub num_pairs: usize,
    pub val_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    /// `train` or `val` for generated data; free-form otherwise.
    pub split: String,
    pub moving: String,
    pub fixed: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_seg: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_seg: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_disp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
    pub samples: Vec<SampleEntry>,
}

/// A loaded manifest and the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

fn check_relative(p: &str) -> Result<()> {
    let path = Path::new(p);
    if path.is_absolute() || path.components().any(|c| matches!(c, Component::ParentDir)) {
        return Err(Error::Dataset(format!(
            "path `{p}` must be relative to the manifest and stay inside it"
        )));
    }
    Ok(())
}

impl Dataset {
    /// Loads `dir/manifest.json` and checks ids and referenced files.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        let mut ids = HashSet::new();
        for s in &manifest.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate sample id `{}`", s.id)));
            }
            let paths = [
                Some(&s.moving),
                Some(&s.fixed),
                s.moving_seg.as_ref(),
                s.fixed_seg.as_ref(),
                s.gt_disp.as_ref(),
            ];
            for p in paths.into_iter().flatten() {
                check_relative(p)?;
                if !dir.join(p).is_file() {
                    return Err(Error::Dataset(format!("sample `{}`: missing file `{p}`", s.id)));
                }
            }
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
        })
    }

    /// Entries of one split, or all entries for `None`.
    pub fn entries(&self, split: Option<&str>) -> Vec<&SampleEntry> {
        self.manifest
            .samples
            .iter()
            .filter(|s| split.is_none_or(|want| s.split == want))
            .collect()
    }

    pub fn has_split(&self, split: &str) -> bool {
        self.manifest.samples.iter().any(|s| s.split == split)
    }

    /// Reads one sample; images are min-max normalized to `[0, 1]`.
    pub fn load(&self, e: &SampleEntry) -> Result<SamplePair> {
        let img = |p: &str| -> Result<Tensor<f32>> {
            let t = gtf::read_tensor::<f32>(&self.root.join(p))?;
            let (c, _, _) = t.chw()?;
            if c != 1 {
                return Err(Error::Dataset(format!(
                    "`{p}`: images must be [1, H, W], got {:?}",
                    t.shape()
                )));
            }
            Ok(normalize_min_max(&t))
        };
        let moving = img(&e.moving)?;
        let fixed = img(&e.fixed)?;
        if moving.shape() != fixed.shape() {
            return Err(Error::Dataset(format!(
                "sample `{}`: moving and fixed sizes differ",
                e.id
            )));
        }
        let (h, w) = (moving.shape()[1], moving.shape()[2]);
        let mask = |p: &Option<String>| -> Result<_> {
            p.as_ref()
                .map(|p| {
                    let m = gtf::read_mask(&self.root.join(p))?;
                    if (m.height(), m.width()) != (h, w) {
                        return Err(Error::Dataset(format!(
                            "sample `{}`: mask `{p}` has the wrong size",
                            e.id
                        )));
                    }
                    Ok(m)
                })
                .transpose()
        };
        let gt_disp = e
            .gt_disp
            .as_ref()
            .map(|p| -> Result<_> {
                let t = gtf::read_tensor::<f32>(&self.root.join(p))?;
                if t.shape() != [2, h, w] {
                    return Err(Error::Dataset(format!(
                        "sample `{}`: field `{p}` has the wrong shape",
                        e.id
                    )));
                }
                Ok(DisplacementField::new(t, 0)?)
            })
            .transpose()?;
        Ok(SamplePair {
            id: e.id.clone(),
            moving,
            fixed,
            moving_seg: mask(&e.moving_seg)?,
            fixed_seg: mask(&e.fixed_seg)?,
            gt_disp,
        })
    }

    pub fn load_split(&self, split: Option<&str>) -> Result<Vec<SamplePair>> {
        self.entries(split).into_iter().map(|e| self.load(e)).collect()
    }
}

/// Writes the files of one pair under `root/pairs/` and returns its entry.
pub fn write_pair(root: &Path, pair: &SamplePair, split: &str) -> Result<SampleEntry> {
    let dir = root.join("pairs");
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let rel = |suffix: &str| format!("pairs/{}_{suffix}.gtf", pair.id);
    let entry = SampleEntry {
        id: pair.id.clone(),
        split: split.to_string(),
        moving: rel("moving"),
        fixed: rel("fixed"),
        moving_seg: pair.moving_seg.as_ref().map(|_| rel("moving_seg")),
        fixed_seg: pair.fixed_seg.as_ref().map(|_| rel("fixed_seg")),
        gt_disp: pair.gt_disp.as_ref().map(|_| rel("gt_disp")),
    };
    gtf::write_tensor(&root.join(&entry.moving), &pair.moving)?;
    gtf::write_tensor(&root.join(&entry.fixed), &pair.fixed)?;
    if let (Some(m), Some(p)) = (&pair.moving_seg, &entry.moving_seg) {
        gtf::write_mask(&root.join(p), m)?;
    }
    if let (Some(m), Some(p)) = (&pair.fixed_seg, &entry.fixed_seg) {
        gtf::write_mask(&root.join(p), m)?;
    }
    if let (Some(d), Some(p)) = (&pair.gt_disp, &entry.gt_disp) {
        gtf::write_tensor(&root.join(p), d.grid())?;
    }
    Ok(entry)
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest).map_err(Error::json(&path))?;
    fs::write(&path, text + "\n").map_err(Error::io(&path))
}

/// Generates `num_pairs` training pairs and `val_pairs` validation pairs into
/// `root`. Content depends only on the seed and parameters.
pub fn generate(
    root: &Path,
    seed: u64,
    params: &SynthParams,
    num_pairs: usize,
    val_pairs: usize,
) -> Result<DatasetManifest> {
    params.validate()?;
    fs::create_dir_all(root).map_err(Error::io(root))?;
    let jobs: Vec<(Split, usize)> = (0..num_pairs)
        .map(|i| (Split::Train, i))
        .chain((0..val_pairs).map(|i| (Split::Val, i)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(split, i)| {
            let (prefix, name) = match split {
                Split::Train => ("train", "train"),
                Split::Val => ("val", "val"),
            };
            let pair = synth_pair(&mut pair_rng(seed, split, i as u64), format!("{prefix}-{i:04}"), params)?;
            write_pair(root, &pair, name)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        generator: Some(GeneratorInfo {
            seed,
            size: params.size,
            deform_scale: params.deform_scale,
            smoothness: params.smoothness,
            texture: params.texture,
            num_pairs,
            val_pairs,
        }),
        samples,
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}
