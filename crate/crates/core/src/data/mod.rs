//! Paired cloudy/clean imagery: on-disk datasets, synthetic generation,
//! cropping and conversion to model tensors.

mod io;
mod rice;
mod synthetic;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::metrics::ImageU8;
use crate::tensor::Tensor;

pub(crate) use io::write_atomic;
pub use io::{read_image, read_mask, write_image, write_mask};
pub use rice::{load_dataset, load_manifest, load_rice, write_dataset, RiceVariant, MANIFEST};
pub use synthetic::{cloud_alpha, gen_pair, gen_synthetic_dataset, terrain, CloudParams, CloudRange};

/// Single-channel binary image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn mean(&self) -> f64 {
        self.data.iter().filter(|&&b| b).count() as f64 / self.data.len() as f64
    }

    fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Mask {
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| self.data[(y0 + y) * self.width + x0 + x]).collect();
        Mask { width: w, height: h, data }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePair {
    pub cloudy: ImageU8,
    pub clean: ImageU8,
    pub mask: Option<Mask>,
    pub id: String,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, cloudy: ImageU8, clean: ImageU8, mask: Option<Mask>) -> Result<Self> {
        let id = id.into();
        if cloudy.dims() != clean.dims() {
            return Err(shape_err!("pair {id}: cloudy {:?} and clean {:?} differ in size", cloudy.dims(), clean.dims()));
        }
        if let Some(m) = &mask {
            if (m.width, m.height) != clean.dims() {
                return Err(shape_err!("pair {id}: mask {}x{} does not match image {:?}", m.width, m.height, clean.dims()));
            }
        }
        Ok(ImagePair { cloudy, clean, mask, id })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.clean.dims()
    }

    /// Same window applied to every member.
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Result<ImagePair> {
        Ok(ImagePair {
            cloudy: self.cloudy.crop(x0, y0, size, size)?,
            clean: self.clean.crop(x0, y0, size, size)?,
            mask: self.mask.as_ref().map(|m| m.crop(x0, y0, size, size)),
            id: self.id.clone(),
        })
    }
}

fn check_crop(pair: &ImagePair, size: usize) -> Result<(usize, usize)> {
    let (w, h) = pair.dims();
    if size == 0 || w < size || h < size {
        return Err(Error::Data(format!("pair {} is {w}x{h}, smaller than crop {size}", pair.id)));
    }
    Ok((w, h))
}

/// `size×size` window at a uniformly drawn offset.
pub fn random_crop(pair: &ImagePair, size: usize, seed: u64) -> Result<ImagePair> {
    let (w, h) = check_crop(pair, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.random_range(0..=w - size);
    let y0 = rng.random_range(0..=h - size);
    pair.crop(x0, y0, size)
}

pub fn center_crop(pair: &ImagePair, size: usize) -> Result<ImagePair> {
    let (w, h) = check_crop(pair, size)?;
    pair.crop((w - size) / 2, (h - size) / 2, size)
}

/// `[3, H, W]` floats in `[0, 1]`.
pub fn normalize(img: &ImageU8) -> Tensor {
    let (w, h) = img.dims();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, rem) = (i / (w * h), i % (w * h));
        img.get(rem % w, rem / w, c) as f32 / 255.0
    })
}

/// Clamps to `[0, 1]`, scales by 255 and rounds half to even.
pub fn denormalize(t: &Tensor) -> Result<ImageU8> {
    let &[3, h, w] = t.shape() else {
        return Err(shape_err!("expected a [3, H, W] tensor, got {:?}", t.shape()));
    };
    let d = t.data();
    Ok(ImageU8::from_fn(w, h, |x, y, c| {
        let v = d[(c * h + y) * w + x];
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * 255.0).round_ties_even() as u8
    }))
}

/// Stacks `[3, S, S]` images into `[B, 3, S, S]`.
pub fn stack(images: &[&ImageU8]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.dims() != (w, h) {
            return Err(shape_err!("batch mixes {w}x{h} and {:?} images", img.dims()));
        }
        data.extend_from_slice(normalize(img).data());
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// A pair held in memory or read from disk on demand.
#[derive(Clone, Debug)]
pub enum PairSource {
    Memory(ImagePair),
    Files { id: String, cloudy: PathBuf, clean: PathBuf, mask: Option<PathBuf> },
}

impl PairSource {
    pub fn id(&self) -> &str {
        match self {
            PairSource::Memory(p) => &p.id,
            PairSource::Files { id, .. } => id,
        }
    }

    pub fn load(&self) -> Result<ImagePair> {
        match self {
            PairSource::Memory(p) => Ok(p.clone()),
            PairSource::Files { id, cloudy, clean, mask } => {
                let mask = mask.as_deref().map(read_mask).transpose()?;
                ImagePair::new(id.clone(), read_image(cloudy)?, read_image(clean)?, mask)
                    .map_err(|e| Error::Data(e.to_string()))
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<PairSource>,
    pub val: Vec<PairSource>,
    pub test: Vec<PairSource>,
    /// Seed behind the split; the stride rule for RICE trees ignores it.
    pub seed: u64,
}

impl DatasetSplit {
    pub fn split(&self, name: &str) -> Result<&[PairSource]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::InvalidArgument(format!("unknown split {name}; expected train, val or test"))),
        }
    }

    pub fn load_all(sources: &[PairSource]) -> Result<Vec<ImagePair>> {
        sources.iter().map(PairSource::load).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(w: usize, h: usize) -> ImagePair {
        let cloudy = ImageU8::from_fn(w, h, |x, y, c| (x * 3 + y * 5 + c) as u8);
        let clean = ImageU8::from_fn(w, h, |x, y, c| (x + y * 7 + c * 2) as u8);
        let mask = Mask { width: w, height: h, data: (0..w * h).map(|i| i % 3 == 0).collect() };
        ImagePair::new("p", cloudy, clean, Some(mask)).unwrap()
    }

    #[test]
    fn normalize_round_trip_is_exact() {
        let img = ImageU8::from_fn(16, 16, |x, y, c| ((y * 16 + x + c * 85) % 256) as u8);
        assert_eq!(denormalize(&normalize(&img)).unwrap(), img);
        let ends = ImageU8::from_fn(2, 1, |x, _, _| if x == 0 { 0 } else { 255 });
        let t = normalize(&ends);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
    }

    #[test]
    fn denormalize_clamps() {
        let t = Tensor::new(vec![3, 1, 2], vec![1.7, -0.2, 0.5, f32::NAN, 2.0 / 255.0, 0.5 / 255.0]).unwrap();
        let img = denormalize(&t).unwrap();
        assert_eq!(img.get(0, 0, 0), 255);
        assert_eq!(img.get(1, 0, 0), 0);
        assert_eq!(img.get(0, 0, 1), 128);
        assert_eq!(img.get(1, 0, 2), 0);
    }

    #[test]
    fn crop_examples() {
        let p = pair(16, 16);
        for seed in 0..5 {
            assert_eq!(random_crop(&p, 16, seed).unwrap(), p);
        }
        let big = pair(40, 30);
        let a = random_crop(&big, 20, 9).unwrap();
        assert_eq!(a, random_crop(&big, 20, 9).unwrap());
        assert_eq!(a.dims(), (20, 20));
        assert!(random_crop(&big, 31, 0).is_err());
        let c = center_crop(&big, 20).unwrap();
        assert_eq!(c.clean.get(0, 0, 0), big.clean.get(10, 5, 0));
        assert_eq!(c.mask.as_ref().unwrap().data[0], big.mask.as_ref().unwrap().data[5 * 40 + 10]);
    }

    #[test]
    fn crop_offsets_span_full_range() {
        // Pixel values encode their own coordinates.
        let img = ImageU8::from_fn(48, 40, |x, y, c| if c == 0 { x as u8 } else { y as u8 });
        let p = ImagePair::new("p", img.clone(), img, None).unwrap();
        let (mut xs, mut ys) = (std::collections::BTreeSet::new(), std::collections::BTreeSet::new());
        for seed in 0..300 {
            let c = random_crop(&p, 32, seed).unwrap();
            xs.insert(c.clean.get(0, 0, 0));
            ys.insert(c.clean.get(0, 0, 1));
        }
        assert_eq!(xs, (0..=16).collect());
        assert_eq!(ys, (0..=8).collect());
    }

    #[test]
    fn mismatched_pair_rejected() {
        let a = ImageU8::filled(4, 4, [0, 0, 0]);
        let b = ImageU8::filled(4, 5, [0, 0, 0]);
        assert!(ImagePair::new("x", a, b, None).is_err());
    }
}
