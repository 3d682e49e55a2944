//! Pixel MSE, the per-patch discriminator and generator adversarial losses,
//! and their combinations. Logs are natural; probabilities are clamped to
//! `[eps, 1 − eps]` before taking them.

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-7;
pub const DEFAULT_LAMBDA_ADV: f64 = 0.1;

/// Mean over all elements of `|p − g|²`.
pub fn mse_var<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(shape_err!("mse of {:?} and {:?}", g.shape(pred), g.shape(target)));
    }
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

fn check_scores<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.value(a).len() != g.value(b).len() {
        return Err(shape_err!("score vectors of {:?} and {:?}", g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// `−(1/P)·Σ[ln x_k + ln(1 − x̂_k)]` over real scores `x` and fake scores `x̂`.
pub fn d_loss_var<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var, eps: f64) -> Result<Var> {
    check_scores(g, real, fake)?;
    let r = g.clamp(real, eps, 1.0 - eps);
    let log_r = g.log(r);
    let one_minus = g.affine(fake, -1.0, 1.0);
    let f = g.clamp(one_minus, eps, 1.0 - eps);
    let log_f = g.log(f);
    let total = g.add(log_r, log_f)?;
    let m = g.mean(total);
    Ok(g.scale(m, -1.0))
}

/// `−(1/P)·Σ ln x̂_k`.
pub fn g_adv_loss_var<T: Scalar>(g: &mut Graph<T>, fake: Var, eps: f64) -> Result<Var> {
    let f = g.clamp(fake, eps, 1.0 - eps);
    let l = g.log(f);
    let m = g.mean(l);
    Ok(g.scale(m, -1.0))
}

/// `mse + λ·g_adv`.
pub fn combined_var<T: Scalar>(g: &mut Graph<T>, mse: Var, g_adv: Var, lambda_adv: f64) -> Result<Var> {
    check_lambda(lambda_adv)?;
    let w = g.scale(g_adv, lambda_adv);
    g.add(mse, w)
}

fn check_lambda(lambda_adv: f64) -> Result<()> {
    if !(lambda_adv >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_adv must be non-negative, got {lambda_adv}")));
    }
    Ok(())
}

fn eval1(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let v = f(&mut g)?;
    Ok(g.scalar(v))
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    eval1(|g| {
        let (p, t) = (g.constant(pred), g.constant(target));
        mse_var(g, p, t)
    })
}

pub fn d_loss(real: &Tensor, fake: &Tensor, eps: f64) -> Result<f64> {
    eval1(|g| {
        let (r, f) = (g.constant(real), g.constant(fake));
        d_loss_var(g, r, f, eps)
    })
}

pub fn g_adv_loss(fake: &Tensor, eps: f64) -> Result<f64> {
    eval1(|g| {
        let f = g.constant(fake);
        g_adv_loss_var(g, f, eps)
    })
}

pub fn combined_generator_loss(mse: f64, g_adv: f64, lambda_adv: f64) -> Result<f64> {
    check_lambda(lambda_adv)?;
    Ok(mse + lambda_adv * g_adv)
}

/// Losses of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub mse: f64,
    pub g_adv: f64,
    pub d_loss: f64,
    /// Discriminator plus generator adversarial loss.
    pub gan_total: f64,
    /// `mse + lambda_adv·g_adv`, the generator's objective.
    pub g_total: f64,
    pub lambda_adv: f64,
}

impl LossReport {
    pub fn new(mse: f64, g_adv: f64, d_loss: f64, lambda_adv: f64) -> Self {
        LossReport { mse, g_adv, d_loss, gan_total: d_loss + g_adv, g_total: mse + lambda_adv * g_adv, lambda_adv }
    }

    pub fn is_finite(&self) -> bool {
        [self.mse, self.g_adv, self.d_loss, self.gan_total, self.g_total].iter().all(|v| v.is_finite())
    }
}
