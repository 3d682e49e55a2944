//! RICE-layout trees: `cloud/`, `label/` and optional `mask/` with one file
//! per pair under a shared stem, plus an optional `manifest.csv` naming the
//! split of each id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::io::{write_atomic, write_image, write_mask};
use super::{DatasetSplit, PairSource};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RiceVariant {
    Rice1,
    Rice2,
}

impl RiceVariant {
    /// Leading pairs (by filename) that form the training pool.
    pub fn train_pool(self) -> usize {
        match self {
            RiceVariant::Rice1 => 400,
            RiceVariant::Rice2 => 588,
        }
    }
}

impl FromStr for RiceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rice1" => Ok(RiceVariant::Rice1),
            "rice2" => Ok(RiceVariant::Rice2),
            _ => Err(Error::InvalidArgument(format!("unknown RICE variant {s}; expected rice1 or rice2"))),
        }
    }
}

/// Numeric stems order numerically, then everything else lexically.
fn sort_key(stem: &str) -> (bool, u128, String) {
    match stem.parse::<u128>() {
        Ok(n) if stem.bytes().all(|b| b.is_ascii_digit()) => (false, n, stem.to_string()),
        _ => (true, 0, stem.to_string()),
    }
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !matches!(ext.as_deref(), Some("png" | "ppm" | "pgm" | "pnm")) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Data(format!("{} and {} share the id {stem}", prev.display(), path.display())));
        }
    }
    Ok(out)
}

fn dims(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Every pair in the tree, sorted by id, with sizes checked.
fn scan_pairs(root: &Path) -> Result<Vec<PairSource>> {
    let cloud = list_images(&root.join("cloud"))?;
    let label = list_images(&root.join("label"))?;
    let mask_dir = root.join("mask");
    let masks = if mask_dir.is_dir() { Some(list_images(&mask_dir)?) } else { None };
    for (id, path) in &cloud {
        if !label.contains_key(id) {
            return Err(Error::Data(format!("{} has no matching label image", path.display())));
        }
    }
    for (id, path) in &label {
        if !cloud.contains_key(id) {
            return Err(Error::Data(format!("{} has no matching cloud image", path.display())));
        }
    }
    if let Some(masks) = &masks {
        for (id, path) in masks {
            if !cloud.contains_key(id) {
                return Err(Error::Data(format!("{} has no matching cloud image", path.display())));
            }
        }
    }
    let mut ids: Vec<&String> = cloud.keys().collect();
    ids.sort_by_key(|id| sort_key(id));
    ids.into_iter()
        .map(|id| {
            let (c, l) = (cloud[id].clone(), label[id].clone());
            let m = match &masks {
                Some(ms) => Some(
                    ms.get(id)
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("{} has no matching mask image", c.display())))?,
                ),
                None => None,
            };
            let d = dims(&c)?;
            for other in std::iter::once(&l).chain(m.as_ref()) {
                let od = dims(other)?;
                if od != d {
                    return Err(Error::Data(format!(
                        "{} is {}x{} but {} is {}x{}",
                        other.display(),
                        od.0,
                        od.1,
                        c.display(),
                        d.0,
                        d.1
                    )));
                }
            }
            Ok(PairSource::Files { id: id.clone(), cloudy: c, clean: l, mask: m })
        })
        .collect()
}

/// Filename-sorted pairs: the leading pool trains, the tail tests, and every
/// fifth pool pair starting from the first is held out for validation.
pub fn load_rice(root: &Path, variant: RiceVariant) -> Result<DatasetSplit> {
    let mut pairs = scan_pairs(root)?;
    let pool = variant.train_pool();
    if pairs.len() <= pool {
        return Err(Error::Data(format!(
            "{variant:?} tree at {} has {} pairs; more than {pool} are needed",
            root.display(),
            pairs.len()
        )));
    }
    let test = pairs.split_off(pool);
    let val_count = pool / 5;
    let mut split = DatasetSplit { test, ..Default::default() };
    for (i, p) in pairs.into_iter().enumerate() {
        if i % 5 == 0 && i / 5 < val_count {
            split.val.push(p);
        } else {
            split.train.push(p);
        }
    }
    Ok(split)
}

/// Uses the split listed in `manifest.csv`.
pub fn load_manifest(root: &Path) -> Result<DatasetSplit> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut by_id: BTreeMap<String, PairSource> =
        scan_pairs(root)?.into_iter().map(|p| (p.id().to_string(), p)).collect();
    let mut split = DatasetSplit::default();
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id,split") {
        return Err(Error::Data(format!("{}: header must be id,split", path.display())));
    }
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, which) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("{}:{}: expected id,split", path.display(), n + 2)))?;
        let pair = by_id
            .remove(id)
            .ok_or_else(|| Error::Data(format!("{}: {id} is missing or listed twice", path.display())))?;
        match which.trim() {
            "train" => split.train.push(pair),
            "val" => split.val.push(pair),
            "test" => split.test.push(pair),
            other => return Err(Error::Data(format!("{}: unknown split {other} for {id}", path.display()))),
        }
    }
    if let Some(id) = by_id.keys().next() {
        return Err(Error::Data(format!("{}: pair {id} is not listed", path.display())));
    }
    Ok(split)
}

/// Manifest split when no variant is given, otherwise the RICE rule.
pub fn load_dataset(root: &Path, variant: Option<RiceVariant>) -> Result<DatasetSplit> {
    match variant {
        Some(v) => load_rice(root, v),
        None if root.join(MANIFEST).is_file() => load_manifest(root),
        None => Err(Error::Data(format!(
            "{} has no {MANIFEST}; pass a RICE variant to split by filename",
            root.display()
        ))),
    }
}

/// Writes every pair as PNG in the RICE layout plus `manifest.csv`.
pub fn write_dataset(split: &DatasetSplit, root: &Path) -> Result<()> {
    let with_masks = split.train.iter().chain(&split.val).chain(&split.test).any(|p| match p {
        PairSource::Memory(p) => p.mask.is_some(),
        PairSource::Files { mask, .. } => mask.is_some(),
    });
    let mut dirs = vec!["cloud", "label"];
    if with_masks {
        dirs.push("mask");
    }
    for d in &dirs {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::from("id,split\n");
    for (name, sources) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for src in sources {
            let pair = src.load()?;
            let file = format!("{}.png", pair.id);
            write_image(&root.join("cloud").join(&file), &pair.cloudy)?;
            write_image(&root.join("label").join(&file), &pair.clean)?;
            if let Some(m) = &pair.mask {
                write_mask(&root.join("mask").join(&file), m)?;
            }
            manifest.push_str(&format!("{},{name}\n", pair.id));
        }
    }
    write_atomic(&root.join(MANIFEST), manifest.as_bytes())
}
