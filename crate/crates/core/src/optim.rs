//! Adam with per-group learning rates and layer-wise learning-rate decay.

use std::collections::BTreeMap;

use crate::discriminator::DiscriminatorModel;
use crate::error::{Error, Result};
use crate::generator::{generator_group_index, GeneratorModel};
use crate::nn::ParamTree;
use crate::tensor::Tensor;

/// `base_lr · decay^(num_groups − 1 − group_index)`: the output-most group
/// trains at `base_lr`, groups nearer the input progressively slower.
pub fn layer_wise_lr(base_lr: f64, decay: f64, group_index: usize, num_groups: usize) -> Result<f64> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::InvalidArgument(format!("decay must be in (0, 1], got {decay}")));
    }
    if !(base_lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {base_lr}")));
    }
    if group_index >= num_groups {
        return Err(Error::InvalidArgument(format!("group {group_index} out of {num_groups}")));
    }
    Ok(base_lr * decay.powi((num_groups - 1 - group_index) as i32))
}

pub struct ParamGroup<'a> {
    pub name: String,
    pub params: Vec<(String, &'a mut Tensor)>,
    pub lr: f64,
    pub group_index: usize,
}

/// Layer-wise decayed groups over all generator parameters.
pub fn generator_param_groups(model: &mut GeneratorModel, base_lr: f64, decay: f64) -> Result<Vec<ParamGroup<'_>>> {
    let config = model.config;
    let num_groups = config.num_lr_groups();
    let mut groups = (0..num_groups)
        .map(|i| {
            Ok(ParamGroup {
                name: format!("generator.{i}"),
                params: Vec::new(),
                lr: layer_wise_lr(base_lr, decay, i, num_groups)?,
                group_index: i,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut failure = None;
    let mut refs: Vec<(String, &mut Tensor)> = Vec::new();
    model.params.collect_params_mut("", &mut refs);
    for (name, t) in refs {
        match generator_group_index(&config, &name) {
            Ok(i) => groups[i].params.push((name, t)),
            Err(e) => failure = Some(e),
        }
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(groups),
    }
}

/// The discriminator trains from scratch at a single learning rate.
pub fn discriminator_param_groups(model: &mut DiscriminatorModel, lr: f64) -> Result<Vec<ParamGroup<'_>>> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    let mut refs = Vec::new();
    model.params.collect_params_mut("", &mut refs);
    Ok(vec![ParamGroup { name: "discriminator".into(), params: refs, lr, group_index: 0 }])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rng_seed: u64,
    pub lambda_adv: f64,
}

impl TrainState {
    pub fn new(rng_seed: u64, lambda_adv: f64) -> Self {
        TrainState {
            step: 0,
            moments: BTreeMap::new(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rng_seed,
            lambda_adv,
        }
    }
}

/// One bias-corrected Adam update across `groups`; gradients are zeroed after.
pub fn adam_step(state: &mut TrainState, groups: &mut [ParamGroup<'_>]) -> Result<()> {
    for group in groups.iter() {
        for (name, t) in &group.params {
            if t.grad().is_none() {
                return Err(Error::InvalidArgument(format!("parameter {name} has no gradient")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for group in groups.iter_mut() {
        let step_size = (group.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1f, b2f, eps) = (b1 as f32, b2 as f32, state.eps as f32);
        for (name, param) in group.params.iter_mut() {
            let n = param.numel();
            let mo = state
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            if mo.m.len() != n {
                return Err(Error::InvalidArgument(format!("moment buffer for {name} does not match its shape")));
            }
            let grad = param.grad().expect("checked above").to_vec();
            let data = param.data_mut();
            for i in 0..n {
                let g = grad[i];
                mo.m[i] = b1f * mo.m[i] + (1.0 - b1f) * g;
                mo.v[i] = b2f * mo.v[i] + (1.0 - b2f) * g * g;
                data[i] -= step_size * mo.m[i] / (mo.v[i].sqrt() / bc2_sqrt + eps);
            }
            param.zero_grad();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    #[test]
    fn lr_examples() {
        assert_eq!(layer_wise_lr(1e-3, 0.75, 5, 6).unwrap(), 1e-3);
        for i in 0..6 {
            assert_eq!(layer_wise_lr(2e-4, 1.0, i, 6).unwrap(), 2e-4);
        }
        assert!((layer_wise_lr(1e-3, 0.5, 0, 4).unwrap() - 1.25e-4).abs() < 1e-18);
        assert!(layer_wise_lr(1e-3, 0.0, 0, 4).is_err());
        assert!(layer_wise_lr(1e-3, 1.5, 0, 4).is_err());
        assert!(layer_wise_lr(1e-3, 0.5, 4, 4).is_err());
    }

    #[test]
    fn lr_is_monotone_in_group_index() {
        for decay in [0.1, 0.5, 0.75, 1.0] {
            let lrs: Vec<f64> = (0..8).map(|i| layer_wise_lr(1e-3, decay, i, 8).unwrap()).collect();
            assert!(lrs.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    fn scalar_param(v: f32) -> Tensor {
        Tensor::scalar(v).with_requires_grad(true)
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = scalar_param(0.3);
        p.accumulate_grad(&[0.0]).unwrap();
        let mut state = TrainState::new(0, 0.1);
        let mut groups = vec![ParamGroup { name: "g".into(), params: vec![("p".into(), &mut p)], lr: 0.1, group_index: 0 }];
        adam_step(&mut state, &mut groups).unwrap();
        assert_eq!(p.data(), &[0.3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(1.0);
        p.accumulate_grad(&[1.0]).unwrap();
        let mut state = TrainState::new(0, 0.1);
        let mut groups = vec![ParamGroup { name: "g".into(), params: vec![("p".into(), &mut p)], lr: 0.1, group_index: 0 }];
        adam_step(&mut state, &mut groups).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(p.grad().unwrap(), &[0.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn two_steps_match_reference_trajectory() {
        // Reference: textbook Adam in f64 with constant gradient 0.5.
        let (lr, b1, b2, eps, grad) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64, 0.5f64);
        let (mut x, mut m, mut v) = (2.0f64, 0.0, 0.0);
        let mut expected = vec![];
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * grad;
            v = b2 * v + (1.0 - b2) * grad * grad;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            expected.push(x);
        }
        let mut p = scalar_param(2.0);
        let mut state = TrainState::new(0, 0.1);
        for want in expected {
            p.accumulate_grad(&[grad as f32]).unwrap();
            let mut groups = vec![ParamGroup { name: "g".into(), params: vec![("p".into(), &mut p)], lr, group_index: 0 }];
            adam_step(&mut state, &mut groups).unwrap();
            assert!((p.data()[0] as f64 - want).abs() < 1e-6, "{} vs {want}", p.data()[0]);
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = scalar_param(1.0);
        let mut state = TrainState::new(0, 0.1);
        let mut groups = vec![ParamGroup { name: "g".into(), params: vec![("enc.w".into(), &mut p)], lr: 0.1, group_index: 0 }];
        match adam_step(&mut state, &mut groups) {
            Err(Error::InvalidArgument(msg)) => assert!(msg.contains("enc.w")),
            other => panic!("{other:?}"),
        }
        assert_eq!(state.step, 0);
    }

    #[test]
    fn generator_groups_partition_parameters() {
        let mut m = GeneratorModel::init(GeneratorConfig::toy(), 0).unwrap();
        let total = m.param_count();
        let groups = generator_param_groups(&mut m, 1e-3, 0.75).unwrap();
        assert_eq!(groups.len(), 6);
        let counted: usize = groups.iter().flat_map(|g| g.params.iter().map(|(_, t)| t.numel())).sum();
        assert_eq!(counted, total);
        assert_eq!(groups.last().unwrap().lr, 1e-3);
        assert!(groups[0].params.iter().all(|(n, _)| n.starts_with("patch_embed")));
    }
}
