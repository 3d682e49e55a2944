//! Procedural land-cover textures under fractal value-noise clouds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetSplit, ImagePair, Mask, PairSource};
use crate::error::{Error, Result};
use crate::metrics::ImageU8;
use crate::patch::PatchGrid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudParams {
    /// Target fraction of the image under cloud.
    pub coverage: f64,
    pub octaves: u32,
    /// Width of the alpha ramp around the threshold, in noise units.
    pub softness: f64,
    /// Cloud whiteness in `[0, 1]`.
    pub brightness: f64,
    pub seed: u64,
}

impl Default for CloudParams {
    fn default() -> Self {
        CloudParams { coverage: 0.4, octaves: 4, softness: 0.08, brightness: 0.95, seed: 0 }
    }
}

/// Per-image parameters are drawn uniformly from these ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudRange {
    pub coverage: (f64, f64),
    pub brightness: (f64, f64),
    pub octaves: u32,
    pub softness: f64,
}

impl Default for CloudRange {
    fn default() -> Self {
        CloudRange { coverage: (0.3, 0.5), brightness: (0.85, 1.0), octaves: 4, softness: 0.08 }
    }
}

impl CloudRange {
    pub fn fixed(coverage: f64) -> Self {
        CloudRange { coverage: (coverage, coverage), ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        let unit = |(lo, hi): (f64, f64)| (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi;
        if !unit(self.coverage) || !unit(self.brightness) || !(self.softness >= 0.0) || self.octaves == 0 {
            return Err(Error::InvalidArgument(format!("invalid cloud parameter range {self:?}")));
        }
        Ok(())
    }
}

fn hash(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut z = seed
        .wrapping_add((ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (smoothstep(x - x0), smoothstep(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let top = hash(ix, iy, seed) * (1.0 - tx) + hash(ix + 1, iy, seed) * tx;
    let bottom = hash(ix, iy + 1, seed) * (1.0 - tx) + hash(ix + 1, iy + 1, seed) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Fractal sum of value noise, normalized to `[0, 1]`.
fn fbm(x: f64, y: f64, octaves: u32, cell: f64, seed: u64) -> f64 {
    let (mut total, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0 / cell);
    for o in 0..octaves {
        total += amp * value_noise(x * freq, y * freq, seed.wrapping_add(o as u64 * 7919));
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    total / norm
}

const PALETTE: [[f64; 3]; 4] = [[38.0, 64.0, 112.0], [156.0, 148.0, 96.0], [72.0, 122.0, 58.0], [42.0, 84.0, 44.0]];
const BANDS: [f64; 3] = [0.42, 0.5, 0.57];
const BAND_WIDTH: f64 = 0.03;

/// Terrain: elevation bands mapped through a four-colour palette with soft
/// boundaries.
pub fn terrain(size: usize, seed: u64) -> ImageU8 {
    let cell = (size as f64 / 2.0).max(4.0);
    ImageU8::from_fn(size, size, |x, y, c| {
        let h = fbm(x as f64, y as f64, 5, cell, seed);
        let mut col = PALETTE[0][c];
        for (k, &b) in BANDS.iter().enumerate() {
            let w = smoothstep((h - b) / BAND_WIDTH + 0.5);
            col = col * (1.0 - w) + PALETTE[k + 1][c] * w;
        }
        col.round().clamp(0.0, 255.0) as u8
    })
}

/// Cloud opacity per pixel, row-major. The threshold sits at the
/// `1 − coverage` quantile of the noise field, softened by `softness`.
pub fn cloud_alpha(size: usize, params: &CloudParams) -> Vec<f64> {
    let n = size * size;
    if params.coverage <= 0.0 {
        return vec![0.0; n];
    }
    if params.coverage >= 1.0 {
        return vec![1.0; n];
    }
    let cell = (size as f64 / 3.0).max(4.0);
    let field: Vec<f64> = (0..n)
        .map(|i| fbm((i % size) as f64, (i / size) as f64, params.octaves, cell, params.seed))
        .collect();
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let q = (((1.0 - params.coverage) * n as f64).floor() as usize).min(n - 1);
    let t = sorted[q];
    field
        .into_iter()
        .map(|v| {
            if params.softness == 0.0 {
                if v >= t { 1.0 } else { 0.0 }
            } else {
                smoothstep((v - t) / params.softness + 0.5)
            }
        })
        .collect()
}

/// One synthetic pair: `cloudy = round(α·brightness·255 + (1 − α)·clean)`,
/// with the mask set where `α > 0.5`.
pub fn gen_pair(id: impl Into<String>, size: usize, terrain_seed: u64, cloud: &CloudParams) -> Result<ImagePair> {
    let clean = terrain(size, terrain_seed);
    let alpha = cloud_alpha(size, cloud);
    let white = cloud.brightness * 255.0;
    let cloudy = ImageU8::from_fn(size, size, |x, y, c| {
        let a = alpha[y * size + x];
        if a == 0.0 {
            clean.get(x, y, c)
        } else {
            (a * white + (1.0 - a) * clean.get(x, y, c) as f64).round().clamp(0.0, 255.0) as u8
        }
    });
    let mask = Mask { width: size, height: size, data: alpha.iter().map(|&a| a > 0.5).collect() };
    ImagePair::new(id, cloudy, clean, Some(mask))
}

/// `n` pairs split 64/16/20 into train/val/test in generation order.
pub fn gen_synthetic_dataset(n: usize, size: usize, range: &CloudRange, seed: u64) -> Result<DatasetSplit> {
    if n < 5 {
        return Err(Error::InvalidArgument(format!("need at least 5 pairs, got {n}")));
    }
    let p = PatchGrid::toy().patch_size;
    if size == 0 || size % p != 0 {
        return Err(Error::InvalidArgument(format!("image size {size} is not a positive multiple of {p}")));
    }
    range.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let terrain_seed: u64 = rng.random();
        let cloud = CloudParams {
            coverage: rng.random_range(range.coverage.0..=range.coverage.1),
            brightness: rng.random_range(range.brightness.0..=range.brightness.1),
            octaves: range.octaves,
            softness: range.softness,
            seed: rng.random(),
        };
        pairs.push(PairSource::Memory(gen_pair(format!("syn_{i:04}"), size, terrain_seed, &cloud)?));
    }
    let n_train = n * 16 / 25;
    let n_val = n * 4 / 25;
    let test = pairs.split_off(n_train + n_val);
    let val = pairs.split_off(n_train);
    Ok(DatasetSplit { train: pairs, val, test, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coverage_is_clean() {
        let p = gen_pair("a", 32, 1, &CloudParams { coverage: 0.0, ..Default::default() }).unwrap();
        assert_eq!(p.cloudy, p.clean);
        assert!(p.mask.unwrap().data.iter().all(|&b| !b));
    }

    #[test]
    fn full_coverage_is_white() {
        let c = CloudParams { coverage: 1.0, softness: 0.0, brightness: 1.0, ..Default::default() };
        let p = gen_pair("a", 32, 2, &c).unwrap();
        assert!(p.cloudy.data.iter().all(|&v| v == 255));
    }

    #[test]
    fn alpha_mean_tracks_coverage() {
        for (i, cov) in [0.1, 0.3, 0.4, 0.5, 0.8].into_iter().enumerate() {
            let a = cloud_alpha(64, &CloudParams { coverage: cov, seed: i as u64, ..Default::default() });
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            assert!((mean - cov).abs() <= 0.1, "coverage {cov}: mean {mean}");
        }
    }

    #[test]
    fn hard_edges_match_clean_outside_clouds() {
        let c = CloudParams { coverage: 0.4, softness: 0.0, ..Default::default() };
        let p = gen_pair("a", 32, 3, &c).unwrap();
        let m = p.mask.as_ref().unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if !m.data[y * 32 + x] {
                    for ch in 0..3 {
                        assert_eq!(p.cloudy.get(x, y, ch), p.clean.get(x, y, ch));
                    }
                }
            }
        }
    }

    #[test]
    fn terrain_uses_several_colours() {
        let t = terrain(64, 11);
        let greens = (0..64 * 64).filter(|i| t.data[i * 3 + 1] > t.data[i * 3 + 2]).count();
        let blues = (0..64 * 64).filter(|i| t.data[i * 3 + 2] > t.data[i * 3 + 1]).count();
        assert!(greens > 0 && blues > 0 || greens + blues == 64 * 64);
        assert_eq!(t, terrain(64, 11));
    }

    #[test]
    fn split_sizes() {
        let d = gen_synthetic_dataset(50, 16, &CloudRange::default(), 0).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (32, 8, 10));
        let d = gen_synthetic_dataset(200, 16, &CloudRange::default(), 0).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (128, 32, 40));
        assert!(gen_synthetic_dataset(4, 16, &CloudRange::default(), 0).is_err());
        assert!(gen_synthetic_dataset(10, 20, &CloudRange::default(), 0).is_err());
    }
}
