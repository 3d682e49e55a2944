//! Central finite-difference verification of the tape's backward pass.

use super::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar-valued function of one tensor, expressible at any [`Scalar`] precision.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Precision used for the analytic (backward-pass) side of a check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub h: f64,
    /// Flat coordinates to probe; `None` checks every coordinate.
    pub coords: Option<Vec<usize>>,
    pub analytic: Precision,
    /// Op whose backward is deliberately skewed (harness self-test).
    pub corrupt: Option<String>,
    /// Extra steps `h/10, h/100, …` tried per coordinate. The estimate from
    /// the adjacent pair that agrees best is kept, which steps over kinks
    /// and away from both truncation and rounding error.
    pub refinements: usize,
}

impl CheckOptions {
    pub fn new(h: f64) -> Self {
        CheckOptions { h, coords: None, analytic: Precision::F32, corrupt: None, refinements: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between the `f32` backward pass and central differences
/// evaluated in promoted `f64` precision.
pub fn finite_diff_check<F: ScalarFn + ?Sized>(f: &F, x: &Tensor, h: f64) -> Result<f64> {
    Ok(finite_diff_check_with(f, x, &CheckOptions::new(h))?.max_rel_error)
}

fn analytic_grad<F: ScalarFn + ?Sized, T: Scalar>(f: &F, x: &Tensor, corrupt: Option<&str>) -> Result<Vec<f64>> {
    let mut g = Graph::<T>::new();
    if let Some(op) = corrupt {
        g.corrupt_backward(op);
    }
    let xv = g.param(x);
    let loss = f.eval(&mut g, xv)?;
    g.backward(loss)?;
    Ok(match g.grad(xv) {
        Some(gr) => gr.iter().map(|v| v.to_f64().unwrap()).collect(),
        None => vec![0.0; x.numel()],
    })
}

fn eval_f64<F: ScalarFn + ?Sized>(f: &F, shape: &[usize], data: Vec<f64>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.leaf_raw(shape, data, false)?;
    let loss = f.eval(&mut g, xv)?;
    if g.value(loss).len() != 1 {
        return Err(Error::InvalidArgument("finite-difference target must be scalar".into()));
    }
    Ok(g.scalar(loss))
}

fn central_difference<F: ScalarFn + ?Sized>(f: &F, shape: &[usize], base: &[f64], c: usize, h: f64) -> Result<f64> {
    let mut plus = base.to_vec();
    plus[c] += h;
    let mut minus = base.to_vec();
    minus[c] -= h;
    Ok((eval_f64(f, shape, plus)? - eval_f64(f, shape, minus)?) / (2.0 * h))
}

pub fn finite_diff_check_with<F: ScalarFn + ?Sized>(f: &F, x: &Tensor, opts: &CheckOptions) -> Result<CheckReport> {
    if opts.h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {}", opts.h)));
    }
    let corrupt = opts.corrupt.as_deref();
    let full = match opts.analytic {
        Precision::F32 => analytic_grad::<F, f32>(f, x, corrupt)?,
        Precision::F64 => analytic_grad::<F, f64>(f, x, corrupt)?,
    };
    let coords: Vec<usize> = match &opts.coords {
        Some(c) => c.clone(),
        None => (0..x.numel()).collect(),
    };
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut report = CheckReport { max_rel_error: 0.0, worst_coord: 0, analytic: vec![], numeric: vec![] };
    for &c in &coords {
        if c >= base.len() {
            return Err(Error::InvalidArgument(format!("coordinate {c} out of range")));
        }
        let mut ladder = Vec::with_capacity(opts.refinements + 1);
        let mut h = opts.h;
        for _ in 0..=opts.refinements {
            ladder.push(central_difference(f, x.shape(), &base, c, h)?);
            h /= 10.0;
        }
        let numeric = ladder
            .windows(2)
            .min_by(|a, b| (a[0] - a[1]).abs().total_cmp(&(b[0] - b[1]).abs()))
            .map_or(ladder[0], |w| w[0]);
        let analytic = full[c];
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = c;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
