//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PGCR"  u32 version  u32 kind (0 generator, 1 discriminator)
//! u32 len + UTF-8 config block ("key=value\n" lines, sorted by key)
//! u32 tensor count, then per tensor:
//!   u32 len + UTF-8 name, u32 rank, rank × u64 dims, f32 data (row-major)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::write_atomic;
use crate::discriminator::{DiscriminatorConfig, DiscriminatorModel};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorModel};
use crate::nn::{named_tensors, ParamTree};
use crate::patch::PatchGrid;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PGCR";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Generator,
    Discriminator,
}

impl ModelKind {
    fn tag(self) -> u32 {
        match self {
            ModelKind::Generator => 0,
            ModelKind::Discriminator => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Generator),
            1 => Ok(ModelKind::Discriminator),
            t => Err(Error::Checkpoint(format!("unknown model kind tag {t}"))),
        }
    }
}

pub type ConfigMap = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ConfigMap,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn config_text(config: &ConfigMap) -> String {
    config.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_config_text(text: &str) -> Result<ConfigMap> {
    let mut out = ConfigMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("config line without '=': {line}")))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Checkpoint(format!("duplicate config key {k}")));
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Checkpoint("string longer than 4 GiB".into()))?;
    put_u32(out, len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.kind.tag());
        put_str(&mut out, &config_text(&self.config))?;
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}; not a PGCR checkpoint")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}; expected {VERSION}")));
        }
        let kind = ModelKind::from_tag(r.u32("kind")?)?;
        let config = parse_config_text(&r.string("config")?)?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("dim").and_then(|d| usize::try_from(d).map_err(|_| Error::Checkpoint("dim overflow".into()))))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = n
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let raw = r.take(bytes, &name)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", buf.len() - r.pos)));
        }
        Ok(Checkpoint { kind, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn grid_entries(grid: &PatchGrid, map: &mut ConfigMap) {
    map.insert("image_size".into(), grid.image_size.to_string());
    map.insert("patch_size".into(), grid.patch_size.to_string());
    map.insert("channels".into(), grid.channels.to_string());
}

pub fn generator_config_map(c: &GeneratorConfig) -> ConfigMap {
    let mut m = ConfigMap::new();
    grid_entries(&c.grid, &mut m);
    for (k, v) in [
        ("enc_dim", c.enc_dim),
        ("enc_depth", c.enc_depth),
        ("enc_heads", c.enc_heads),
        ("dec_dim", c.dec_dim),
        ("dec_depth", c.dec_depth),
        ("dec_heads", c.dec_heads),
    ] {
        m.insert(k.into(), v.to_string());
    }
    m
}

pub fn discriminator_config_map(c: &DiscriminatorConfig) -> ConfigMap {
    let mut m = ConfigMap::new();
    grid_entries(&c.grid, &mut m);
    let hidden: Vec<String> = c.hidden_dims.iter().map(|d| d.to_string()).collect();
    m.insert("hidden_dims".into(), hidden.join(","));
    m
}

fn get_usize(map: &ConfigMap, key: &str) -> Result<usize> {
    let v = map.get(key).ok_or_else(|| Error::Checkpoint(format!("config is missing {key}")))?;
    v.parse().map_err(|_| Error::Checkpoint(format!("config {key}={v} is not a non-negative integer")))
}

fn grid_from(map: &ConfigMap) -> Result<PatchGrid> {
    PatchGrid::new(get_usize(map, "image_size")?, get_usize(map, "patch_size")?, get_usize(map, "channels")?)
}

pub fn generator_config_from(map: &ConfigMap) -> Result<GeneratorConfig> {
    Ok(GeneratorConfig {
        grid: grid_from(map)?,
        enc_dim: get_usize(map, "enc_dim")?,
        enc_depth: get_usize(map, "enc_depth")?,
        enc_heads: get_usize(map, "enc_heads")?,
        dec_dim: get_usize(map, "dec_dim")?,
        dec_depth: get_usize(map, "dec_depth")?,
        dec_heads: get_usize(map, "dec_heads")?,
    })
}

pub fn discriminator_config_from(map: &ConfigMap) -> Result<DiscriminatorConfig> {
    let raw = map.get("hidden_dims").ok_or_else(|| Error::Checkpoint("config is missing hidden_dims".into()))?;
    let hidden_dims = raw
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad hidden width {s}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscriminatorConfig { grid: grid_from(map)?, hidden_dims })
}

/// Moves named tensors into `params`, which must already have every name.
fn fill_params<M: ParamTree<Tensor>>(params: &mut M, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (n, t) in tensors {
        if by_name.insert(n.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("tensor {n} appears twice")));
        }
    }
    let mut status = Ok(());
    params.visit_params_mut("", &mut |name, slot| {
        if status.is_err() {
            return;
        }
        match by_name.remove(name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                status = Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())))
            }
            None => status = Err(Error::Checkpoint(format!("checkpoint lacks tensor {name}"))),
        }
    });
    status?;
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

/// `extra` entries (run settings) are stored alongside the model config.
pub fn generator_checkpoint(model: &GeneratorModel, extra: &ConfigMap) -> Checkpoint {
    let mut config = extra.clone();
    config.extend(generator_config_map(&model.config));
    Checkpoint { kind: ModelKind::Generator, config, tensors: named_tensors(&model.params) }
}

pub fn discriminator_checkpoint(model: &DiscriminatorModel, extra: &ConfigMap) -> Checkpoint {
    let mut config = extra.clone();
    config.extend(discriminator_config_map(&model.config));
    Checkpoint { kind: ModelKind::Discriminator, config, tensors: named_tensors(&model.params) }
}

fn expect_kind(ckpt: &Checkpoint, kind: ModelKind) -> Result<()> {
    if ckpt.kind != kind {
        return Err(Error::Checkpoint(format!("checkpoint holds a {:?}, expected a {kind:?}", ckpt.kind)));
    }
    Ok(())
}

pub fn generator_from_checkpoint(ckpt: Checkpoint) -> Result<GeneratorModel> {
    expect_kind(&ckpt, ModelKind::Generator)?;
    let config = generator_config_from(&ckpt.config)?;
    let mut model = GeneratorModel::init(config, 0)?;
    fill_params(&mut model.params, ckpt.tensors)?;
    Ok(model)
}

pub fn discriminator_from_checkpoint(ckpt: Checkpoint) -> Result<DiscriminatorModel> {
    expect_kind(&ckpt, ModelKind::Discriminator)?;
    let config = discriminator_config_from(&ckpt.config)?;
    let mut model = DiscriminatorModel::init(config, 0)?;
    fill_params(&mut model.params, ckpt.tensors)?;
    Ok(model)
}

pub fn save_generator(path: &Path, model: &GeneratorModel, extra: &ConfigMap) -> Result<()> {
    generator_checkpoint(model, extra).save(path)
}

pub fn load_generator(path: &Path) -> Result<(GeneratorModel, ConfigMap)> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.config.clone();
    Ok((generator_from_checkpoint(ckpt)?, config))
}

pub fn save_discriminator(path: &Path, model: &DiscriminatorModel, extra: &ConfigMap) -> Result<()> {
    discriminator_checkpoint(model, extra).save(path)
}

pub fn load_discriminator(path: &Path) -> Result<(DiscriminatorModel, ConfigMap)> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.config.clone();
    Ok((discriminator_from_checkpoint(ckpt)?, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let m = GeneratorModel::init(GeneratorConfig::toy(), 5).unwrap();
        let mut extra = ConfigMap::new();
        extra.insert("mask_ratio".into(), "0.75".into());
        let ck = generator_checkpoint(&m, &extra);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.config["mask_ratio"], "0.75");
        assert_eq!(generator_from_checkpoint(back).unwrap(), m);
    }

    #[test]
    fn header_layout() {
        let m = DiscriminatorModel::init(DiscriminatorConfig { grid: PatchGrid::toy(), hidden_dims: vec![] }, 1).unwrap();
        let b = discriminator_checkpoint(&m, &ConfigMap::new()).to_bytes().unwrap();
        assert_eq!(&b[0..4], b"PGCR");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        let len = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&b[16..16 + len]).unwrap();
        assert_eq!(text, "channels=3\nhidden_dims=\nimage_size=64\npatch_size=8\n");
        // weight [192, 1] and bias [1]
        let expected = 16 + len + 4 + (4 + 15 + 4 + 16 + 192 * 4) + (4 + 13 + 4 + 8 + 4);
        assert_eq!(b.len(), expected);
    }

    #[test]
    fn rejects_bad_headers() {
        let m = DiscriminatorModel::init(DiscriminatorConfig::new(PatchGrid::toy()), 1).unwrap();
        let good = discriminator_checkpoint(&m, &ConfigMap::new()).to_bytes().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(msg)) if msg.contains("magic")));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(msg)) if msg.contains("version 9")));
        assert!(Checkpoint::from_bytes(&good[..good.len() - 3]).is_err());
        let ck = Checkpoint::from_bytes(&good).unwrap();
        assert!(generator_from_checkpoint(ck).is_err());
    }

    #[test]
    fn missing_or_misshapen_tensors_rejected() {
        let m = DiscriminatorModel::init(DiscriminatorConfig::new(PatchGrid::toy()), 1).unwrap();
        let mut ck = discriminator_checkpoint(&m, &ConfigMap::new());
        ck.tensors.pop();
        assert!(discriminator_from_checkpoint(ck.clone()).is_err());
        let mut ck = discriminator_checkpoint(&m, &ConfigMap::new());
        ck.tensors[0].1 = Tensor::zeros(&[3, 3]);
        assert!(discriminator_from_checkpoint(ck).is_err());
    }
}
