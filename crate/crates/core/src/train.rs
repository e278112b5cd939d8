//! Full-batch Adam on a fixed training set.

use std::io::Write;

use crate::datagen::Prompt;
use crate::error::{Error, Result};
use crate::grad::{batch_gradient, GradBundle};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-5, epochs: 1500, beta1: 0.9, beta2: 0.999, eps_adam: 1e-8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Domain(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Domain(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let m: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { v: m.clone(), m, step: 0 }
    }
}

/// Applies one bias-corrected Adam update to flat tensors.
pub fn adam_update(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, config: &TrainConfig) {
    assert_eq!(params.len(), grads.len(), "tensor count mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    state.step += 1;
    let inv_bc1 = 1.0 / (1.0 - config.beta1.powi(state.step as i32));
    let inv_bc2 = 1.0 / (1.0 - config.beta2.powi(state.step as i32));
    let (b1, b2) = (config.beta1, config.beta2);
    for (ti, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[ti], &mut state.v[ti]);
        assert_eq!(p.len(), g.len());
        for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= config.lr * (*m * inv_bc1) / ((*v * inv_bc2).sqrt() + config.eps_adam);
        }
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &GradBundle, state: &mut AdamState, config: &TrainConfig) {
    let g = grads.tensors();
    adam_update(&mut params.tensors_mut(), &g, state, config);
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// Mean training loss before any update.
    pub initial_loss: f64,
    /// Entry `e` is the mean training loss after the update of epoch `e+1`.
    pub loss_curve: Vec<f64>,
}

impl TrainOutput {
    /// Training risk of the returned parameters.
    pub fn train_risk(&self) -> f64 {
        self.loss_curve.last().copied().unwrap_or(self.initial_loss)
    }

    pub fn write_loss_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,loss")?;
        writeln!(w, "0,{:e}", self.initial_loss)?;
        for (e, l) in self.loss_curve.iter().enumerate() {
            writeln!(w, "{},{:e}", e + 1, l)?;
        }
        Ok(())
    }
}

/// Trains on the given prompts only; validation data never reaches this
/// function.
pub fn train(train_prompts: &[Prompt], params: ModelParams, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let t = train_prompts.first().ok_or_else(|| Error::Shape("empty training set".into()))?.t();
    if t != params.t_max {
        return Err(Error::Shape(format!("training prompts have t={t}, model was built for t={}", params.t_max)));
    }
    let mut params = params;
    let mut state = AdamState::new(&params);
    let mut grads = batch_gradient(&params, train_prompts)?;
    let initial_loss = grads.loss;
    if !initial_loss.is_finite() {
        return Err(Error::NonFinite(format!("initial training loss is {initial_loss}")));
    }
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        adam_step(&mut params, &grads, &mut state, config);
        grads = batch_gradient(&params, train_prompts)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("training loss {} at epoch {epoch}", grads.loss)));
        }
        loss_curve.push(grads.loss);
    }
    Ok(TrainOutput { params, initial_loss, loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::risk;
    use crate::datagen::{build_dataset, InputDist};
    use crate::model::{init_params, Activation, Compiled, PeMode};
    use crate::rng::stream_rng;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let g = vec![0.0, 0.0];
        let config = TrainConfig::default();
        let mut state = AdamState { m: vec![vec![0.0; 2]], v: vec![vec![0.0; 2]], step: 0 };
        adam_update(&mut [&mut p[..]], &[&g[..]], &mut state, &config);
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn constant_gradient_gives_unit_steps() {
        let config = TrainConfig { lr: 1e-3, ..TrainConfig::default() };
        let mut p = vec![0.0];
        let mut state = AdamState { m: vec![vec![0.0]], v: vec![vec![0.0]], step: 0 };
        let mut last = 0.0;
        for _ in 0..500 {
            let before = p[0];
            adam_update(&mut [&mut p[..]], &[&[0.37][..]], &mut state, &config);
            last = (p[0] - before).abs();
        }
        assert!((last / config.lr - 1.0).abs() < 0.01, "{last}");
    }

    #[test]
    fn zero_epochs_returns_params_unchanged() {
        let ds = build_dataset(0, 8, 1, 4, 2, InputDist::Gaussian);
        let mut rng = stream_rng(0, 0);
        let p = init_params(&mut rng, 2, 4, 4, PeMode::None, 1.0, Activation::Relu);
        let out = train(ds.train_prompts(), p.clone(), &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(out.params, p);
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn linear_toy_learns_and_is_deterministic() {
        let ds = build_dataset(3, 32, 1, 6, 1, InputDist::Gaussian);
        let mut rng = stream_rng(3, 0);
        let p = init_params(&mut rng, 1, 2, 6, PeMode::None, 1.0, Activation::Identity);
        let config = TrainConfig { lr: 1e-2, epochs: 1500, ..TrainConfig::default() };
        let a = train(ds.train_prompts(), p.clone(), &config).unwrap();
        assert!(a.train_risk() < 0.5 * a.initial_loss, "{} vs {}", a.train_risk(), a.initial_loss);
        let b = train(ds.train_prompts(), p, &config).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.params, b.params);
        let c = Compiled::new(&a.params, 6).unwrap();
        assert_eq!(risk(&c, ds.train_prompts()), a.train_risk());
    }

    #[test]
    fn mismatched_context_length_is_rejected() {
        let ds = build_dataset(0, 4, 1, 5, 2, InputDist::Gaussian);
        let mut rng = stream_rng(0, 0);
        let p = init_params(&mut rng, 2, 4, 4, PeMode::None, 1.0, Activation::Relu);
        assert!(train(ds.train_prompts(), p, &TrainConfig::default()).is_err());
    }
}
