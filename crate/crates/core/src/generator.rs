//! MAE-style ViT encoder/decoder used as the cloud-removal generator.
//!
//! The encoder embeds patches linearly, adds a fixed sin-cos position table,
//! and runs only over visible tokens. The decoder re-inserts a learned mask
//! token at hidden positions, adds its own position table, and predicts one
//! `patch_dim` row per patch. With no mask plan every patch is visible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, join, truncated_normal, Block, LayerNorm, Linear, ParamTree, INIT_STD};
use crate::patch::{self, sincos_positional_embedding, MaskPlan, PatchGrid};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub grid: PatchGrid,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
}

impl GeneratorConfig {
    pub fn toy() -> Self {
        GeneratorConfig {
            grid: PatchGrid::toy(),
            enc_dim: 64,
            enc_depth: 2,
            enc_heads: 4,
            dec_dim: 32,
            dec_depth: 1,
            dec_heads: 4,
        }
    }

    /// ViT-large encoder with the MAE-large decoder on the 224/16 grid.
    pub fn paper() -> Self {
        GeneratorConfig {
            grid: PatchGrid::paper(),
            enc_dim: 1024,
            enc_depth: 24,
            enc_heads: 16,
            dec_dim: 512,
            dec_depth: 8,
            dec_heads: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        PatchGrid::new(self.grid.image_size, self.grid.patch_size, self.grid.channels)?;
        for (name, dim, heads) in [("encoder", self.enc_dim, self.enc_heads), ("decoder", self.dec_dim, self.dec_heads)] {
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} width {dim} is not divisible by {heads} heads"
                )));
            }
            if dim % 4 != 0 {
                return Err(Error::InvalidArgument(format!("{name} width {dim} is not divisible by 4")));
            }
        }
        Ok(())
    }

    /// Number of layer-wise learning-rate groups (see [`generator_group_index`]).
    pub fn num_lr_groups(&self) -> usize {
        self.enc_depth + self.dec_depth + 3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<P = Tensor> {
    pub patch_embed: Linear<P>,
    pub enc_blocks: Vec<Block<P>>,
    pub enc_norm: LayerNorm<P>,
    pub dec_embed: Linear<P>,
    pub mask_token: P,
    pub dec_blocks: Vec<Block<P>>,
    pub dec_norm: LayerNorm<P>,
    pub pred_head: Linear<P>,
}

impl<P> ParamTree<P> for GeneratorParams<P> {
    type Mapped<Q> = GeneratorParams<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> GeneratorParams<Q> {
        GeneratorParams {
            patch_embed: self.patch_embed.map_params(&join(prefix, "patch_embed"), f),
            enc_blocks: self.enc_blocks.map_params(&join(prefix, "enc_blocks"), f),
            enc_norm: self.enc_norm.map_params(&join(prefix, "enc_norm"), f),
            dec_embed: self.dec_embed.map_params(&join(prefix, "dec_embed"), f),
            mask_token: f(&join(prefix, "mask_token"), &self.mask_token),
            dec_blocks: self.dec_blocks.map_params(&join(prefix, "dec_blocks"), f),
            dec_norm: self.dec_norm.map_params(&join(prefix, "dec_norm"), f),
            pred_head: self.pred_head.map_params(&join(prefix, "pred_head"), f),
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        self.patch_embed.collect_params_mut(&join(prefix, "patch_embed"), out);
        self.enc_blocks.collect_params_mut(&join(prefix, "enc_blocks"), out);
        self.enc_norm.collect_params_mut(&join(prefix, "enc_norm"), out);
        self.dec_embed.collect_params_mut(&join(prefix, "dec_embed"), out);
        out.push((join(prefix, "mask_token"), &mut self.mask_token));
        self.dec_blocks.collect_params_mut(&join(prefix, "dec_blocks"), out);
        self.dec_norm.collect_params_mut(&join(prefix, "dec_norm"), out);
        self.pred_head.collect_params_mut(&join(prefix, "pred_head"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub params: GeneratorParams,
    enc_pos: Tensor,
    dec_pos: Tensor,
}

/// Layer-wise learning-rate group of a generator parameter, from 0 (input
/// side) to `num_lr_groups − 1` (prediction head).
///
/// Groups: patch embedding; one per encoder block; encoder norm with the
/// decoder embedding and mask token; one per decoder block; decoder norm
/// with the prediction head.
pub fn generator_group_index(config: &GeneratorConfig, name: &str) -> Result<usize> {
    let block_index = |rest: &str| rest.split('.').next().and_then(|s| s.parse::<usize>().ok());
    let idx = if name.starts_with("patch_embed.") {
        Some(0)
    } else if let Some(rest) = name.strip_prefix("enc_blocks.") {
        block_index(rest).filter(|&i| i < config.enc_depth).map(|i| 1 + i)
    } else if name.starts_with("enc_norm.") || name.starts_with("dec_embed.") || name == "mask_token" {
        Some(config.enc_depth + 1)
    } else if let Some(rest) = name.strip_prefix("dec_blocks.") {
        block_index(rest).filter(|&i| i < config.dec_depth).map(|i| config.enc_depth + 2 + i)
    } else if name.starts_with("dec_norm.") || name.starts_with("pred_head.") {
        Some(config.num_lr_groups() - 1)
    } else {
        None
    };
    idx.ok_or_else(|| Error::InvalidArgument(format!("unknown generator parameter {name}")))
}

impl GeneratorModel {
    /// Truncated-normal weights (σ = 0.02), zero biases, unit layer-norm gains.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pd = config.grid.patch_dim();
        let (e, d) = (config.enc_dim, config.dec_dim);
        let patch_embed = Linear::init(pd, e, &mut rng);
        let enc_blocks = (0..config.enc_depth).map(|_| Block::init(e, &mut rng)).collect();
        let dec_embed = Linear::init(e, d, &mut rng);
        let mask_token = truncated_normal(&[d], INIT_STD, &mut rng);
        let dec_blocks = (0..config.dec_depth).map(|_| Block::init(d, &mut rng)).collect();
        let pred_head = Linear::init(d, pd, &mut rng);
        let params = GeneratorParams {
            patch_embed,
            enc_blocks,
            enc_norm: LayerNorm::init(e),
            dec_embed,
            mask_token,
            dec_blocks,
            dec_norm: LayerNorm::init(d),
            pred_head,
        };
        Self::from_params(config, params)
    }

    pub fn from_params(config: GeneratorConfig, params: GeneratorParams) -> Result<Self> {
        config.validate()?;
        Ok(GeneratorModel {
            enc_pos: sincos_positional_embedding(&config.grid, config.enc_dim)?,
            dec_pos: sincos_positional_embedding(&config.grid, config.dec_dim)?,
            config,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.params)
    }

    /// Ablation hook: zeros every attention and MLP output projection.
    pub fn zero_block_branches(&mut self) {
        self.params.enc_blocks.iter_mut().chain(&mut self.params.dec_blocks).for_each(Block::zero_residual_branches);
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> BoundGenerator {
        BoundGenerator {
            config: self.config,
            params: nn::bind(&self.params, g, trainable),
            enc_pos: g.constant(&self.enc_pos),
            dec_pos: g.constant(&self.dec_pos),
        }
    }

    pub fn accumulate_grads<T: Scalar>(&mut self, g: &Graph<T>, bound: &BoundGenerator) -> Result<()> {
        nn::accumulate_grads(&mut self.params, g, &bound.params)
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.params.visit_params("", &mut |_, t| ok &= t.is_finite());
        ok
    }
}

/// Generator weights bound into a graph.
pub struct BoundGenerator {
    pub config: GeneratorConfig,
    pub params: GeneratorParams<Var>,
    enc_pos: Var,
    dec_pos: Var,
}

/// Flat gather indices selecting `rows[b]` from each `[P, width]` slab of a batch.
fn row_index(rows: &[&[usize]], num_rows: usize, width: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(rows.iter().map(|r| r.len()).sum::<usize>() * width);
    for (b, rs) in rows.iter().enumerate() {
        for &r in rs.iter() {
            let base = (b * num_rows + r) * width;
            index.extend(base..base + width);
        }
    }
    index
}

impl BoundGenerator {
    fn check_plans(&self, batch: usize, plans: Option<&[MaskPlan]>) -> Result<Option<usize>> {
        let Some(plans) = plans else { return Ok(None) };
        let p = self.config.grid.num_patches();
        if plans.len() != batch {
            return Err(Error::InvalidArgument(format!("{} mask plans for a batch of {batch}", plans.len())));
        }
        let k = plans[0].num_visible();
        for plan in plans {
            if plan.num_patches() != p || plan.num_visible() != k {
                return Err(Error::InvalidArgument(format!(
                    "mask plan over {} patches keeping {} does not fit {p} patches keeping {k}",
                    plan.num_patches(),
                    plan.num_visible()
                )));
            }
        }
        Ok(Some(k))
    }

    /// `[B, P, patch_dim]` → `[B, K, enc_dim]` over the visible tokens.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, patches: Var, plans: Option<&[MaskPlan]>) -> Result<Var> {
        let grid = self.config.grid;
        let (p, pd, e) = (grid.num_patches(), grid.patch_dim(), self.config.enc_dim);
        let &[b, np, w] = g.shape(patches) else {
            return Err(shape_err!("patch batch must be [B, P, patch_dim], got {:?}", g.shape(patches)));
        };
        if np != p || w != pd {
            return Err(shape_err!("patch batch [{b}, {np}, {w}] does not match grid [{p}, {pd}]"));
        }
        let k = self.check_plans(b, plans)?;
        let x = self.params.patch_embed.forward(g, patches)?;
        let mut x = g.add_broadcast(x, self.enc_pos)?;
        if let (Some(plans), Some(k)) = (plans, k) {
            let rows: Vec<&[usize]> = plans.iter().map(|pl| pl.keep_indices.as_slice()).collect();
            x = g.gather(x, row_index(&rows, p, e), &[b, k, e])?;
        }
        for blk in &self.params.enc_blocks {
            x = blk.forward(g, x, self.config.enc_heads)?;
        }
        self.params.enc_norm.forward(g, x)
    }

    /// `[B, K, enc_dim]` → `[B, P, patch_dim]`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, latents: Var, plans: Option<&[MaskPlan]>) -> Result<Var> {
        let grid = self.config.grid;
        let (p, d) = (grid.num_patches(), self.config.dec_dim);
        let &[b, k, e] = g.shape(latents) else {
            return Err(shape_err!("latents must be [B, K, enc_dim], got {:?}", g.shape(latents)));
        };
        if e != self.config.enc_dim {
            return Err(shape_err!("latent width {e} does not match encoder width {}", self.config.enc_dim));
        }
        let expected_k = self.check_plans(b, plans)?.unwrap_or(p);
        if k != expected_k {
            return Err(Error::InvalidArgument(format!("{k} latents for a plan keeping {expected_k} patches")));
        }
        let mut x = self.params.dec_embed.forward(g, latents)?;
        if let Some(plans) = plans.filter(|_| k < p) {
            let tokens = g.gather(self.params.mask_token, (0..b * (p - k)).flat_map(|_| 0..d).collect(), &[b, p - k, d])?;
            let full = g.concat(x, tokens, 1)?;
            let rows: Vec<&[usize]> = plans.iter().map(|pl| pl.restore_order.as_slice()).collect();
            x = g.gather(full, row_index(&rows, p, d), &[b, p, d])?;
        } else if let Some(plans) = plans {
            // Nothing hidden: only the shuffle needs undoing.
            let rows: Vec<&[usize]> = plans.iter().map(|pl| pl.restore_order.as_slice()).collect();
            x = g.gather(x, row_index(&rows, p, d), &[b, p, d])?;
        }
        x = g.add_broadcast(x, self.dec_pos)?;
        for blk in &self.params.dec_blocks {
            x = blk.forward(g, x, self.config.dec_heads)?;
        }
        let x = self.params.dec_norm.forward(g, x)?;
        self.params.pred_head.forward(g, x)
    }

    /// `[B, 3, S, S]` cloudy batch → raw (unclamped) `[B, 3, S, S]` prediction.
    pub fn generate<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let patches = patch::patchify_var(g, images, &self.config.grid)?;
        let latents = self.encode(g, patches, None)?;
        let pred = self.decode(g, latents, None)?;
        patch::unpatchify_var(g, pred, &self.config.grid)
    }
}

fn with_batch(t: &Tensor, rank: usize) -> Result<Tensor> {
    if t.shape().len() == rank {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(&shape)
    } else {
        Ok(t.clone())
    }
}

fn drop_batch(t: Tensor) -> Result<Tensor> {
    let shape = t.shape()[1..].to_vec();
    t.reshape(&shape)
}

/// `[P, patch_dim]` patches → `[K, enc_dim]` latents.
pub fn encode(model: &GeneratorModel, patches: &Tensor, plan: Option<&MaskPlan>) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let x = g.constant(&with_batch(patches, 2)?);
    let plans = plan.map(|p| vec![p.clone()]);
    let y = bound.encode(&mut g, x, plans.as_deref())?;
    drop_batch(g.to_tensor(y))
}

/// `[K, enc_dim]` latents → `[P, patch_dim]` predictions.
pub fn decode(model: &GeneratorModel, latents: &Tensor, plan: Option<&MaskPlan>) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let x = g.constant(&with_batch(latents, 2)?);
    let plans = plan.map(|p| vec![p.clone()]);
    let y = bound.decode(&mut g, x, plans.as_deref())?;
    drop_batch(g.to_tensor(y))
}

/// Cloud-free estimate of a `[3, S, S]` image in `[0, 1]` (evaluation mode:
/// the output is clamped).
pub fn generate(model: &GeneratorModel, cloudy: &Tensor) -> Result<Tensor> {
    let mut out = generate_batch(model, &with_batch(cloudy, 3)?)?;
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    drop_batch(out)
}

/// Raw predictions for a `[B, 3, S, S]` batch.
pub fn generate_batch(model: &GeneratorModel, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let x = g.constant(images);
    let y = bound.generate(&mut g, x)?;
    Ok(g.to_tensor(y))
}

/// Masked-autoencoding forward pass: predictions for all `P` patches of
/// `image` given a random subset of them.
pub fn reconstruct(model: &GeneratorModel, image: &Tensor, mask_ratio: f64, seed: u64) -> Result<(Tensor, MaskPlan)> {
    let grid = model.config.grid;
    let plan = MaskPlan::random(grid.num_patches(), mask_ratio, seed)?;
    let patches = patch::patchify(image, &grid)?;
    let latents = encode(model, &patches, Some(&plan))?;
    let pred = decode(model, &latents, Some(&plan))?;
    Ok((pred, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = GeneratorModel::init(GeneratorConfig::toy(), 7).unwrap();
        let b = GeneratorModel::init(GeneratorConfig::toy(), 7).unwrap();
        let c = GeneratorModel::init(GeneratorConfig::toy(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_values() {
        let m = GeneratorModel::init(GeneratorConfig::toy(), 0).unwrap();
        assert_eq!(m.params.pred_head.weight.shape(), &[32, 192]);
        assert_eq!(m.params.pred_head.bias.shape(), &[192]);
        m.params.visit_params("", &mut |name, t| {
            if name.ends_with("gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with("bias") || name.ends_with("beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        });
        assert!(m.is_finite());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = GeneratorConfig::toy();
        c.enc_heads = 3;
        assert!(GeneratorModel::init(c, 0).is_err());
        let mut c = GeneratorConfig::toy();
        c.grid.image_size = 60;
        assert!(GeneratorModel::init(c, 0).is_err());
    }

    #[test]
    fn group_indices_cover_every_parameter() {
        let cfg = GeneratorConfig::toy();
        let m = GeneratorModel::init(cfg, 0).unwrap();
        let mut seen = vec![false; cfg.num_lr_groups()];
        m.params.visit_params("", &mut |name, _| {
            seen[generator_group_index(&cfg, name).unwrap()] = true;
        });
        assert!(seen.iter().all(|&s| s));
        assert_eq!(generator_group_index(&cfg, "patch_embed.weight").unwrap(), 0);
        assert_eq!(generator_group_index(&cfg, "enc_blocks.1.fc1.bias").unwrap(), 2);
        assert_eq!(generator_group_index(&cfg, "pred_head.weight").unwrap(), 5);
        assert!(generator_group_index(&cfg, "enc_blocks.9.fc1.bias").is_err());
    }
}
