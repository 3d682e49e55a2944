//! Patch decomposition, fixed 2-D sin-cos positional tables, and MAE-style
//! random masking.
//!
//! Within a patch, values are flattened channel-major: all of channel 0 in
//! row-major order, then channel 1, then channel 2. Patches are numbered in
//! raster order over the image.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(image_size: usize, patch_size: usize, channels: usize) -> Result<Self> {
        if image_size == 0 || patch_size == 0 || channels == 0 {
            return Err(Error::InvalidArgument("patch grid sizes must be positive".into()));
        }
        if image_size % patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {image_size} is not divisible by patch size {patch_size}"
            )));
        }
        Ok(PatchGrid { image_size, patch_size, channels })
    }

    /// 224×224 RGB in 16×16 patches.
    pub fn paper() -> Self {
        PatchGrid { image_size: 224, patch_size: 16, channels: 3 }
    }

    /// 64×64 RGB in 8×8 patches.
    pub fn toy() -> Self {
        PatchGrid { image_size: 64, patch_size: 8, channels: 3 }
    }

    /// Patches per side.
    pub fn side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.side() * self.side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// `index[k·patch_dim + e]` is the flat image offset feeding element `e` of patch `k`.
    pub fn patchify_index(&self) -> Vec<usize> {
        let (s, p, side) = (self.image_size, self.patch_size, self.side());
        let mut index = Vec::with_capacity(self.channels * s * s);
        for py in 0..side {
            for px in 0..side {
                for c in 0..self.channels {
                    for i in 0..p {
                        let row = c * s * s + (py * p + i) * s + px * p;
                        index.extend(row..row + p);
                    }
                }
            }
        }
        index
    }

    /// Inverse permutation of [`PatchGrid::patchify_index`].
    pub fn unpatchify_index(&self) -> Vec<usize> {
        let fwd = self.patchify_index();
        let mut inv = vec![0; fwd.len()];
        for (k, &src) in fwd.iter().enumerate() {
            inv[src] = k;
        }
        inv
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape != self.image_shape() {
            return Err(shape_err!("image of shape {shape:?} does not match grid {:?}", self.image_shape()));
        }
        Ok(())
    }

    fn check_patches(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.num_patches(), self.patch_dim()] {
            return Err(shape_err!(
                "patches of shape {shape:?} do not match grid [{}, {}]",
                self.num_patches(),
                self.patch_dim()
            ));
        }
        Ok(())
    }
}

fn batch_index(base: &[usize], batch: usize) -> Vec<usize> {
    let n = base.len();
    (0..batch).flat_map(|b| base.iter().map(move |&i| b * n + i)).collect()
}

/// `[C, S, S]` image to `[P, patch_dim]` rows.
pub fn patchify(image: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    grid.check_image(image.shape())?;
    let data = image.data();
    let out = grid.patchify_index().into_iter().map(|i| data[i]).collect();
    Tensor::new(vec![grid.num_patches(), grid.patch_dim()], out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    grid.check_patches(patches.shape())?;
    let data = patches.data();
    let out = grid.unpatchify_index().into_iter().map(|i| data[i]).collect();
    Tensor::new(grid.image_shape().to_vec(), out)
}

/// Differentiable patchify of a `[B, C, S, S]` batch into `[B, P, patch_dim]`.
pub fn patchify_var<T: Scalar>(g: &mut Graph<T>, images: Var, grid: &PatchGrid) -> Result<Var> {
    let shape = g.shape(images).to_vec();
    if shape.len() != 4 || shape[1..] != grid.image_shape() {
        return Err(shape_err!("image batch {shape:?} does not match grid {:?}", grid.image_shape()));
    }
    let index = batch_index(&grid.patchify_index(), shape[0]);
    g.gather(images, index, &[shape[0], grid.num_patches(), grid.patch_dim()])
}

/// Differentiable unpatchify of `[B, P, patch_dim]` into `[B, C, S, S]`.
pub fn unpatchify_var<T: Scalar>(g: &mut Graph<T>, patches: Var, grid: &PatchGrid) -> Result<Var> {
    let shape = g.shape(patches).to_vec();
    if shape.len() != 3 || shape[1..] != [grid.num_patches(), grid.patch_dim()] {
        return Err(shape_err!(
            "patch batch {shape:?} does not match grid [{}, {}]",
            grid.num_patches(),
            grid.patch_dim()
        ));
    }
    let index = batch_index(&grid.unpatchify_index(), shape[0]);
    let [c, s, _] = grid.image_shape();
    g.gather(patches, index, &[shape[0], c, s, s])
}

/// Which patches the encoder sees.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Visible patch indices, in the order their tokens are fed to the encoder.
    pub keep_indices: Vec<usize>,
    /// `mask[p] == 1` iff patch `p` is hidden.
    pub mask: Vec<u8>,
    /// `[visible tokens ++ mask tokens][restore_order[p]]` is the token for patch `p`.
    pub restore_order: Vec<usize>,
}

impl MaskPlan {
    /// Uniform random permutation prefix of length `round((1 − ratio)·P)`.
    pub fn random(num_patches: usize, mask_ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&mask_ratio) {
            return Err(Error::InvalidArgument(format!("mask ratio {mask_ratio} outside [0, 1)")));
        }
        let keep = ((1.0 - mask_ratio) * num_patches as f64).round() as usize;
        if keep == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask ratio {mask_ratio} leaves no visible patch out of {num_patches}"
            )));
        }
        let mut shuffle: Vec<usize> = (0..num_patches).collect();
        if keep < num_patches {
            shuffle.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Self::from_shuffle(shuffle, keep))
    }

    /// Every patch visible, in natural order.
    pub fn full(num_patches: usize) -> Self {
        Self::from_shuffle((0..num_patches).collect(), num_patches)
    }

    fn from_shuffle(shuffle: Vec<usize>, keep: usize) -> Self {
        let mut restore_order = vec![0; shuffle.len()];
        for (pos, &p) in shuffle.iter().enumerate() {
            restore_order[p] = pos;
        }
        let mut mask = vec![1u8; shuffle.len()];
        for &p in &shuffle[..keep] {
            mask[p] = 0;
        }
        MaskPlan { keep_indices: shuffle[..keep].to_vec(), mask, restore_order }
    }

    pub fn num_patches(&self) -> usize {
        self.mask.len()
    }

    pub fn num_visible(&self) -> usize {
        self.keep_indices.len()
    }

    pub fn num_masked(&self) -> usize {
        self.mask.len() - self.keep_indices.len()
    }

    /// Hidden patch indices in ascending order.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m == 1).map(|(i, _)| i).collect()
    }
}

/// Selects the visible rows of `tokens` (`[P, d]`) under a fresh random plan.
pub fn random_masking(tokens: &Tensor, mask_ratio: f64, seed: u64) -> Result<(Tensor, MaskPlan)> {
    let [p, d] = tokens.shape() else {
        return Err(shape_err!("tokens must be [P, d], got {:?}", tokens.shape()));
    };
    let plan = MaskPlan::random(*p, mask_ratio, seed)?;
    let data = tokens.data();
    let visible = plan.keep_indices.iter().flat_map(|&k| data[k * d..(k + 1) * d].iter().copied()).collect();
    Ok((Tensor::new(vec![plan.num_visible(), *d], visible)?, plan))
}

/// Fixed 2-D sine-cosine table `[P, d]`: the first half of each row encodes
/// the patch column, the second half its row.
pub fn sincos_positional_embedding(grid: &PatchGrid, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::InvalidArgument(format!("embedding width {d} is not divisible by 4")));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let side = grid.side();
    let mut out = Vec::with_capacity(grid.num_patches() * d);
    for row in 0..side {
        for col in 0..side {
            for pos in [col as f64, row as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin() as f32));
                out.extend(omega.iter().map(|w| (pos * w).cos() as f32));
            }
        }
    }
    Tensor::new(vec![grid.num_patches(), d], out)
}
