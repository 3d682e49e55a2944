//! Finite-difference verification of every tape op and of the end-to-end
//! generator and discriminator losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::gradcheck::{finite_diff_check_with, CheckOptions, CheckReport, Precision, ScalarFn};
use crate::autograd::{Graph, Scalar, Var, OP_NAMES};
use crate::discriminator::{DiscriminatorConfig, DiscriminatorModel};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorModel};
use crate::losses::{combined_var, d_loss_var, g_adv_loss_var, mse_var, DEFAULT_EPS, DEFAULT_LAMBDA_ADV};
use crate::nn::ParamTree;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-3;
/// Step refinements for the model losses, whose gradients span many orders
/// of magnitude and whose LeakyReLU kinks sit close to many pre-activations.
pub const MODEL_REFINEMENTS: usize = 4;

pub const GENERATOR_ROW: &str = "generator mse+adv";
pub const DISCRIMINATOR_ROW: &str = "discriminator loss";

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-2.0f32..2.0))
}

fn projection<T: Scalar>(g: &mut Graph<T>, shape: &[usize], seed: u64) -> Var {
    g.constant(&random_tensor(shape, seed ^ 0x5eed))
}

fn weighted_sum<T: Scalar>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = projection(g, &shape, seed);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// One probe per differentiable primitive; each maps its input to a scalar
/// through a fixed random projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpProbe {
    MatMulLhs,
    MatMulRhs,
    BatchedMatMul,
    Add,
    Sub,
    Mul,
    AddBroadcast,
    Scale,
    Affine,
    Sum,
    Mean,
    Square,
    Softmax,
    LayerNormX,
    LayerNormGamma,
    Gelu,
    LeakyRelu,
    Sigmoid,
    Log,
    Clamp,
    Gather,
    Permute,
    Narrow,
    Concat,
    Reshape,
}

pub const OP_PROBES: &[OpProbe] = &[
    OpProbe::MatMulLhs,
    OpProbe::MatMulRhs,
    OpProbe::BatchedMatMul,
    OpProbe::Add,
    OpProbe::Sub,
    OpProbe::Mul,
    OpProbe::AddBroadcast,
    OpProbe::Scale,
    OpProbe::Affine,
    OpProbe::Sum,
    OpProbe::Mean,
    OpProbe::Square,
    OpProbe::Softmax,
    OpProbe::LayerNormX,
    OpProbe::LayerNormGamma,
    OpProbe::Gelu,
    OpProbe::LeakyRelu,
    OpProbe::Sigmoid,
    OpProbe::Log,
    OpProbe::Clamp,
    OpProbe::Gather,
    OpProbe::Permute,
    OpProbe::Narrow,
    OpProbe::Concat,
    OpProbe::Reshape,
];

impl OpProbe {
    /// The tape op under test. Permute and narrow are recorded as gathers.
    pub fn op(self) -> &'static str {
        match self {
            OpProbe::MatMulLhs | OpProbe::MatMulRhs | OpProbe::BatchedMatMul => "matmul",
            OpProbe::Add => "add",
            OpProbe::Sub => "sub",
            OpProbe::Mul => "mul",
            OpProbe::AddBroadcast => "add_broadcast",
            OpProbe::Scale => "scale",
            OpProbe::Affine => "affine",
            OpProbe::Sum => "sum",
            OpProbe::Mean => "mean",
            OpProbe::Square => "square",
            OpProbe::Softmax => "softmax",
            OpProbe::LayerNormX | OpProbe::LayerNormGamma => "layer_norm",
            OpProbe::Gelu => "gelu",
            OpProbe::LeakyRelu => "leaky_relu",
            OpProbe::Sigmoid => "sigmoid",
            OpProbe::Log => "log",
            OpProbe::Clamp => "clamp",
            OpProbe::Gather | OpProbe::Permute | OpProbe::Narrow => "gather",
            OpProbe::Concat => "concat",
            OpProbe::Reshape => "reshape",
        }
    }

    pub fn input_shape(self) -> Vec<usize> {
        match self {
            OpProbe::BatchedMatMul => vec![2, 3, 4],
            OpProbe::LayerNormGamma => vec![4],
            _ => vec![3, 4],
        }
    }
}

impl ScalarFn for OpProbe {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = match self {
            OpProbe::MatMulLhs => {
                let w = projection(g, &[4, 5], 1);
                g.matmul(x, w)?
            }
            OpProbe::MatMulRhs => {
                let a = projection(g, &[2, 3], 2);
                g.matmul(a, x)?
            }
            OpProbe::BatchedMatMul => {
                let w = projection(g, &[2, 4, 2], 3);
                g.matmul(x, w)?
            }
            OpProbe::Add => {
                let c = projection(g, &[3, 4], 4);
                let s = g.add(x, c)?;
                g.mul(s, s)?
            }
            OpProbe::Sub => {
                let c = projection(g, &[3, 4], 5);
                let s = g.sub(c, x)?;
                g.mul(s, s)?
            }
            OpProbe::Mul => {
                let c = projection(g, &[3, 4], 6);
                g.mul(x, c)?
            }
            OpProbe::AddBroadcast => {
                let b = projection(g, &[4], 7);
                let s = g.add_broadcast(x, b)?;
                g.square(s)
            }
            OpProbe::Scale => g.scale(x, -0.7),
            OpProbe::Affine => {
                let a = g.affine(x, 1.3, 0.4);
                g.square(a)
            }
            OpProbe::Sum => {
                let s = g.square(x);
                return Ok(g.sum(s));
            }
            OpProbe::Mean => {
                let s = g.square(x);
                return Ok(g.mean(s));
            }
            OpProbe::Square => g.square(x),
            OpProbe::Softmax => g.softmax(x, 1)?,
            OpProbe::LayerNormX => {
                let gamma = projection(g, &[4], 8);
                let beta = projection(g, &[4], 9);
                g.layer_norm(x, gamma, beta, 1e-6)?
            }
            OpProbe::LayerNormGamma => {
                let inp = projection(g, &[3, 4], 10);
                let beta = projection(g, &[4], 11);
                g.layer_norm(inp, x, beta, 1e-6)?
            }
            OpProbe::Gelu => g.gelu(x),
            OpProbe::LeakyRelu => g.leaky_relu(x, 0.2),
            OpProbe::Sigmoid => g.sigmoid(x),
            OpProbe::Log => {
                let sq = g.square(x);
                let pos = g.affine(sq, 1.0, 0.5);
                g.log(pos)
            }
            OpProbe::Clamp => {
                let c = g.clamp(x, -1.0, 1.0);
                g.square(c)
            }
            OpProbe::Gather => g.gather(x, vec![0, 5, 5, 11, 2, 7], &[2, 3])?,
            OpProbe::Permute => g.permute(x, &[1, 0])?,
            OpProbe::Narrow => g.narrow(x, 1, 1, 2)?,
            OpProbe::Concat => {
                let c = projection(g, &[3, 2], 12);
                let cat = g.concat(x, c, 1)?;
                g.square(cat)
            }
            OpProbe::Reshape => g.reshape(x, &[2, 6])?,
        };
        weighted_sum(g, y, 99)
    }
}

/// Rebinds the named tensor of a bound parameter tree to `x`.
fn substitute<M: ParamTree<Var>, T: Scalar>(g: &Graph<T>, tree: &mut M, name: &str, x: Var) -> Result<()> {
    let mut refs = Vec::new();
    tree.collect_params_mut("", &mut refs);
    let (_, slot) = refs
        .into_iter()
        .find(|(n, _)| n == name)
        .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
    if g.shape(*slot) != g.shape(x) {
        return Err(Error::Shape(format!("{name} is {:?}, probe is {:?}", g.shape(*slot), g.shape(x))));
    }
    *slot = x;
    Ok(())
}

/// `mse(G(cloudy), clean) + λ·g_adv(D(G(cloudy)))` as a function of one
/// generator tensor, with the discriminator held fixed.
pub struct GeneratorLoss<'a> {
    pub gen: &'a GeneratorModel,
    pub disc: &'a DiscriminatorModel,
    pub cloudy: Tensor,
    pub clean: Tensor,
    pub lambda_adv: f64,
    pub param: String,
}

impl ScalarFn for GeneratorLoss<'_> {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut bound = self.gen.bind(g, false);
        substitute(g, &mut bound.params, &self.param, x)?;
        let critic = self.disc.bind(g, false);
        let input = g.constant(&self.cloudy);
        let target = g.constant(&self.clean);
        let fake = bound.generate(g, input)?;
        let mse = mse_var(g, fake, target)?;
        let scores = critic.discriminate(g, fake)?;
        let adv = g_adv_loss_var(g, scores, DEFAULT_EPS)?;
        combined_var(g, mse, adv, self.lambda_adv)
    }
}

/// Discriminator loss on fixed real and fake batches as a function of one
/// discriminator tensor.
pub struct DiscriminatorLoss<'a> {
    pub disc: &'a DiscriminatorModel,
    pub real: Tensor,
    pub fake: Tensor,
    pub param: String,
}

impl ScalarFn for DiscriminatorLoss<'_> {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut bound = self.disc.bind(g, false);
        substitute(g, &mut bound.params, &self.param, x)?;
        let (r, f) = (g.constant(&self.real), g.constant(&self.fake));
        let sr = bound.discriminate(g, r)?;
        let sf = bound.discriminate(g, f)?;
        d_loss_var(g, sr, sf, DEFAULT_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub checks: usize,
    pub max_rel_error: f64,
    /// Where the worst error occurred, with its analytic and numeric values.
    pub worst: String,
}

impl CheckRow {
    fn new(name: &str) -> Self {
        CheckRow { name: name.into(), checks: 0, max_rel_error: 0.0, worst: String::new() }
    }

    fn absorb(&mut self, label: &str, report: &CheckReport, coords: &[usize]) {
        self.checks += report.analytic.len();
        if report.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            let k = coords.iter().position(|&c| c == report.worst_coord).unwrap_or(0);
            self.max_rel_error = report.max_rel_error;
            self.worst = format!(
                "{label}[{}] analytic {:.6e} numeric {:.6e}",
                report.worst_coord, report.analytic[k], report.numeric[k]
            );
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub generator: GeneratorConfig,
    pub seed: u64,
    /// Coordinates probed per parameter tensor in the end-to-end checks.
    pub coords_per_tensor: usize,
    /// Initial central-difference step.
    pub step: f64,
    /// Refinements of the step for the end-to-end losses.
    pub refinements: usize,
    /// Precision of the backward pass under test.
    pub analytic: Precision,
    /// Op whose backward is deliberately skewed (harness self-test).
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            generator: GeneratorConfig::toy(),
            seed: 0,
            coords_per_tensor: 3,
            step: STEP,
            refinements: MODEL_REFINEMENTS,
            analytic: Precision::F32,
            corrupt: None,
        }
    }
}

impl GradCheckOptions {
    fn check(&self, coords: Option<Vec<usize>>, refinements: usize) -> CheckOptions {
        CheckOptions { h: self.step, coords, analytic: self.analytic, corrupt: self.corrupt.clone(), refinements }
    }
}

fn sample_coords(numel: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= count {
        return (0..numel).collect();
    }
    rand::seq::index::sample(rng, numel, count).into_vec()
}

fn unit_image(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[1, shape[0], shape[1], shape[2]], |_| rng.random_range(0.0f32..1.0))
}

/// Named tensors with their element counts, in tree order.
fn tensor_sizes<M: ParamTree<Tensor>>(m: &M) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |n, t| out.push((n.to_string(), t.numel())));
    out
}

/// One row per tape op, then the end-to-end generator and discriminator rows.
pub fn run_grad_check(opts: &GradCheckOptions) -> Result<Vec<CheckRow>> {
    if let Some(op) = &opts.corrupt {
        if !OP_NAMES.contains(&op.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown op {op}; known ops: {}", OP_NAMES.join(", "))));
        }
    }
    let mut rows: Vec<CheckRow> = OP_NAMES.iter().map(|n| CheckRow::new(n)).collect();
    for &p in OP_PROBES {
        let row = rows.iter_mut().find(|r| r.name == p.op()).expect("probe op is registered");
        for s in 0..3 {
            let x = random_tensor(&p.input_shape(), opts.seed.wrapping_mul(31).wrapping_add(1000 + s));
            let report = finite_diff_check_with(&p, &x, &opts.check(None, 0))?;
            let all: Vec<usize> = (0..x.numel()).collect();
            row.absorb(&format!("{p:?}"), &report, &all);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let gen = GeneratorModel::init(opts.generator, rng.random())?;
    let disc = DiscriminatorModel::init(DiscriminatorConfig::new(opts.generator.grid), rng.random())?;
    let shape = opts.generator.grid.image_shape();

    let mut g_row = CheckRow::new(GENERATOR_ROW);
    let cloudy = unit_image(shape, &mut rng);
    let clean = unit_image(shape, &mut rng);
    for (name, numel) in tensor_sizes(&gen.params) {
        let f = GeneratorLoss {
            gen: &gen,
            disc: &disc,
            cloudy: cloudy.clone(),
            clean: clean.clone(),
            lambda_adv: DEFAULT_LAMBDA_ADV,
            param: name.clone(),
        };
        let coords = sample_coords(numel, opts.coords_per_tensor, &mut rng);
        let x = named(&gen.params, &name);
        let report = finite_diff_check_with(&f, &x, &opts.check(Some(coords.clone()), opts.refinements))?;
        g_row.absorb(&name, &report, &coords);
    }
    rows.push(g_row);

    let mut d_row = CheckRow::new(DISCRIMINATOR_ROW);
    let real = unit_image(shape, &mut rng);
    let fake = unit_image(shape, &mut rng);
    for (name, numel) in tensor_sizes(&disc.params) {
        let f = DiscriminatorLoss { disc: &disc, real: real.clone(), fake: fake.clone(), param: name.clone() };
        let coords = sample_coords(numel, opts.coords_per_tensor, &mut rng);
        let x = named(&disc.params, &name);
        let report =
            finite_diff_check_with(&f, &x, &opts.check(Some(coords.clone()), opts.refinements))?;
        d_row.absorb(&name, &report, &coords);
    }
    rows.push(d_row);
    Ok(rows)
}

fn named<M: ParamTree<Tensor>>(m: &M, name: &str) -> Tensor {
    let mut found = None;
    m.visit_params("", &mut |n, t| {
        if n == name {
            found = Some(t.clone());
        }
    });
    found.expect("name taken from the same tree")
}

/// Fixed-width table, one line per row plus a verdict column.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<20} {:>8} {:>14}  {:<6} {}\n", "check", "points", "max_rel_err", "result", "worst");
    for r in rows {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        out.push_str(&format!("{:<20} {:>8} {:>14.3e}  {verdict:<6} {}\n", r.name, r.checks, r.max_rel_error, r.worst));
    }
    out
}
