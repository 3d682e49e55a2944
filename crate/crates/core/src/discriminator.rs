//! Patch-wise fully-connected discriminator.
//!
//! Each flattened patch goes through the same MLP independently, so the
//! output is one real/fake probability per patch with no cross-patch mixing
//! and no positional input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Linear, ParamTree};
use crate::patch::{self, PatchGrid};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub grid: PatchGrid,
    pub hidden_dims: Vec<usize>,
}

impl DiscriminatorConfig {
    pub fn new(grid: PatchGrid) -> Self {
        DiscriminatorConfig { grid, hidden_dims: vec![512, 256] }
    }

    /// Input width of every layer followed by its output width.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.grid.patch_dim()];
        w.extend(&self.hidden_dims);
        w.push(1);
        w
    }

    pub fn validate(&self) -> Result<()> {
        PatchGrid::new(self.grid.image_size, self.grid.patch_size, self.grid.channels)?;
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("discriminator hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<P = Tensor> {
    pub layers: Vec<Linear<P>>,
}

impl<P> ParamTree<P> for DiscriminatorParams<P> {
    type Mapped<Q> = DiscriminatorParams<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> DiscriminatorParams<Q> {
        DiscriminatorParams { layers: self.layers.map_params(&nn::join(prefix, "layers"), f) }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        self.layers.collect_params_mut(&nn::join(prefix, "layers"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel {
    pub config: DiscriminatorConfig,
    pub params: DiscriminatorParams,
}

impl DiscriminatorModel {
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config.layer_widths().windows(2).map(|w| Linear::init(w[0], w[1], &mut rng)).collect();
        Ok(DiscriminatorModel { config, params: DiscriminatorParams { layers } })
    }

    pub fn from_params(config: DiscriminatorConfig, params: DiscriminatorParams) -> Result<Self> {
        config.validate()?;
        let widths = config.layer_widths();
        let ok = params.layers.len() == widths.len() - 1
            && params.layers.iter().zip(widths.windows(2)).all(|(l, w)| l.weight.shape() == [w[0], w[1]] && l.bias.shape() == [w[1]]);
        if !ok {
            return Err(shape_err!("discriminator parameters do not match widths {widths:?}"));
        }
        Ok(DiscriminatorModel { config, params })
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.params)
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> BoundDiscriminator {
        BoundDiscriminator { grid: self.config.grid, params: nn::bind(&self.params, g, trainable) }
    }

    pub fn accumulate_grads<T: Scalar>(&mut self, g: &Graph<T>, bound: &BoundDiscriminator) -> Result<()> {
        nn::accumulate_grads(&mut self.params, g, &bound.params)
    }
}

pub struct BoundDiscriminator {
    pub grid: PatchGrid,
    pub params: DiscriminatorParams<Var>,
}

impl BoundDiscriminator {
    /// `[B, P, patch_dim]` → `[B, P]` probabilities.
    pub fn score_patches<T: Scalar>(&self, g: &mut Graph<T>, patches: Var) -> Result<Var> {
        let &[b, p, _] = g.shape(patches) else {
            return Err(shape_err!("patch batch must be [B, P, patch_dim], got {:?}", g.shape(patches)));
        };
        let mut x = patches;
        let last = self.params.layers.len() - 1;
        for (i, layer) in self.params.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        let logits = g.reshape(x, &[b, p])?;
        Ok(g.sigmoid(logits))
    }

    /// `[B, 3, S, S]` images → `[B, P]` probabilities.
    pub fn discriminate<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let patches = patch::patchify_var(g, images, &self.grid)?;
        self.score_patches(g, patches)
    }
}

/// Per-patch real/fake probabilities for a `[3, S, S]` image.
pub fn discriminate(model: &DiscriminatorModel, image: &Tensor) -> Result<Tensor> {
    let grid = model.config.grid;
    if image.shape() != grid.image_shape() {
        return Err(shape_err!("image of shape {:?} does not match grid {:?}", image.shape(), grid.image_shape()));
    }
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, false);
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = g.constant(&image.clone().reshape(&shape)?);
    let y = bound.discriminate(&mut g, x)?;
    g.to_tensor(y).reshape(&[grid.num_patches()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_layer_shapes() {
        let m = DiscriminatorModel::init(DiscriminatorConfig::new(PatchGrid::paper()), 0).unwrap();
        let shapes: Vec<Vec<usize>> = m.params.layers.iter().map(|l| l.weight.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![768, 512], vec![512, 256], vec![256, 1]]);
    }

    #[test]
    fn empty_hidden_is_single_affine() {
        let cfg = DiscriminatorConfig { grid: PatchGrid::paper(), hidden_dims: vec![] };
        let m = DiscriminatorModel::init(cfg, 0).unwrap();
        assert_eq!(m.params.layers.len(), 1);
        assert_eq!(m.params.layers[0].weight.shape(), &[768, 1]);
        let out = discriminate(&m, &Tensor::full(&[3, 224, 224], 0.5)).unwrap();
        assert_eq!(out.shape(), &[196]);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = DiscriminatorConfig::new(PatchGrid::toy());
        assert_eq!(DiscriminatorModel::init(cfg.clone(), 3).unwrap(), DiscriminatorModel::init(cfg.clone(), 3).unwrap());
        assert_ne!(DiscriminatorModel::init(cfg.clone(), 3).unwrap(), DiscriminatorModel::init(cfg, 4).unwrap());
    }

    #[test]
    fn zero_final_layer_gives_one_half() {
        let mut m = DiscriminatorModel::init(DiscriminatorConfig::new(PatchGrid::toy()), 1).unwrap();
        m.params.layers.last_mut().unwrap().zero();
        let img = Tensor::from_fn(&[3, 64, 64], |i| (i % 7) as f32 / 7.0);
        let out = discriminate(&m, &img).unwrap();
        assert_eq!(out.shape(), &[64]);
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_wrong_image_size() {
        let m = DiscriminatorModel::init(DiscriminatorConfig::new(PatchGrid::toy()), 1).unwrap();
        assert!(discriminate(&m, &Tensor::zeros(&[3, 32, 32])).is_err());
    }
}
