//! L2 (Frobenius) projected gradient ascent on the covariate block of a prompt.
//!
//! Starts from zero perturbation, takes `k` normalized-gradient steps of size
//! `alpha`, projects onto the ε-ball after each step and returns the
//! highest-loss iterate seen. The label column is never touched.

use rayon::prelude::*;

use crate::datagen::Prompt;
use crate::grad::tree_reduce;
use crate::linalg::Mat;
use crate::model::Predictor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub eps: f64,
    pub k: usize,
    pub alpha: f64,
    /// Leave the query row unperturbed.
    pub freeze_query: bool,
}

impl AttackSpec {
    /// 40 iterations with step `eps/10`.
    pub fn new(eps: f64) -> Self {
        Self { eps, k: 40, alpha: eps / 10.0, freeze_query: false }
    }

    /// Zeroes every coordinate the attacker may not move.
    pub fn mask(&self, g: &mut Mat) {
        let (rows, cols) = g.shape();
        for i in 0..rows {
            g[(i, cols - 1)] = 0.0;
        }
        if self.freeze_query {
            g.row_mut(rows - 1).fill(0.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_adv: Mat,
    pub clean_loss: f64,
    pub loss: f64,
    /// Every iterate visited, starting with the clean prompt.
    pub iterates: usize,
}

/// Attacks one prompt.
pub fn pgd<P: Predictor + ?Sized>(model: &P, x: &Mat, y_q: f64, spec: &AttackSpec) -> AttackResult {
    if spec.eps <= 0.0 || spec.k == 0 {
        let loss = (model.predict(x) - y_q).powi(2);
        return AttackResult { x_adv: x.clone(), clean_loss: loss, loss, iterates: 1 };
    }
    let (rows, cols) = x.shape();
    let mut delta = Mat::zeros(rows, cols);
    let mut current = x.clone();
    let mut best_x = x.clone();
    let mut best_loss = f64::NEG_INFINITY;
    let mut clean_loss = f64::NAN;
    let mut iterates = 0;
    // the ball radius is shrunk by one part in 1e12 so X + Δ − X stays inside
    let radius = spec.eps * (1.0 - 1e-12);
    for it in 0..=spec.k {
        let (loss, mut g) = model.loss_and_grad(&current, y_q);
        iterates += 1;
        if it == 0 {
            clean_loss = loss;
        }
        if loss > best_loss {
            best_loss = loss;
            best_x = current.clone();
        }
        if it == spec.k {
            break;
        }
        spec.mask(&mut g);
        let gn = g.frobenius_norm();
        if gn == 0.0 || !gn.is_finite() {
            break;
        }
        let step = spec.alpha / gn;
        for (dv, gv) in delta.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *dv += step * gv;
        }
        let dn = delta.frobenius_norm();
        if dn > radius {
            let s = radius / dn;
            for dv in delta.as_mut_slice() {
                *dv *= s;
            }
        }
        for ((c, xv), dv) in current.as_mut_slice().iter_mut().zip(x.as_slice()).zip(delta.as_slice()) {
            *c = xv + dv;
        }
    }
    AttackResult { x_adv: best_x, clean_loss, loss: best_loss, iterates }
}

/// Attacks every prompt; results are in prompt order.
pub fn pgd_all<P: Predictor + ?Sized>(model: &P, prompts: &[Prompt], spec: &AttackSpec) -> Vec<AttackResult> {
    prompts.par_iter().map(|p| pgd(model, &p.x, p.query_label, spec)).collect()
}

/// Mean attacked loss.
pub fn adversarial_risk<P: Predictor + ?Sized>(model: &P, prompts: &[Prompt], spec: &AttackSpec) -> f64 {
    let losses: Vec<f64> = pgd_all(model, prompts, spec).iter().map(|r| r.loss).collect();
    mean_tree(losses)
}

pub(crate) fn mean_tree(values: Vec<f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    tree_reduce(values, |a, b| a + b).expect("non-empty") * (1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, InputDist};
    use crate::linalg::dot;
    use crate::model::{init_params, Activation, Compiled, PeMode};
    use crate::rng::stream_rng;

    /// `f(X) = wᵀx_q`
    struct LinearQuery(Vec<f64>);

    impl Predictor for LinearQuery {
        fn predict(&self, x: &Mat) -> f64 {
            dot(&self.0, &x.row(x.rows() - 1)[..self.0.len()])
        }
        fn loss_and_grad(&self, x: &Mat, y: f64) -> (f64, Mat) {
            let r = self.predict(x) - y;
            let mut g = Mat::zeros(x.rows(), x.cols());
            for (k, w) in self.0.iter().enumerate() {
                g[(x.rows() - 1, k)] = 2.0 * r * w;
            }
            (r * r, g)
        }
    }

    #[test]
    fn zero_budget_is_identity() {
        let ds = build_dataset(0, 3, 1, 5, 2, InputDist::Gaussian);
        let m = LinearQuery(vec![1.0, 2.0]);
        let p = &ds.train_prompts()[0];
        let r = pgd(&m, &p.x, p.query_label, &AttackSpec::new(0.0));
        assert_eq!(r.x_adv, p.x);
        assert_eq!(r.loss, r.clean_loss);
    }

    #[test]
    fn one_step_matches_closed_form_for_linear_model() {
        let ds = build_dataset(1, 4, 1, 5, 3, InputDist::Gaussian);
        let w = vec![0.5, -1.0, 2.0];
        let m = LinearQuery(w.clone());
        let wn = dot(&w, &w).sqrt();
        for p in ds.train_prompts() {
            let eps = 0.3;
            let spec = AttackSpec { eps, k: 1, alpha: eps, freeze_query: false };
            let r = pgd(&m, &p.x, p.query_label, &spec);
            let resid = m.predict(&p.x) - p.query_label;
            let want = (resid.abs() + eps * wn).powi(2);
            assert!((r.loss - want).abs() < 1e-8, "{} vs {want}", r.loss);
            let q = p.x.rows() - 1;
            for k in 0..3 {
                let moved = r.x_adv[(q, k)] - p.x[(q, k)];
                let dir = resid.signum() * w[k] / wn * eps;
                assert!((moved - dir).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn budget_mask_and_monotone_loss_on_model() {
        let ds = build_dataset(2, 12, 1, 8, 3, InputDist::Gaussian);
        for mode in PeMode::ALL {
            let mut rng = stream_rng(2, 0);
            let params = init_params(&mut rng, 3, 8, 8, mode, 1.0, Activation::Relu);
            let c = Compiled::new(&params, 8).unwrap();
            for eps in [0.05, 0.3, 1.0] {
                for r in pgd_all(&c, ds.train_prompts(), &AttackSpec::new(eps)).iter().zip(ds.train_prompts()) {
                    let (res, p) = r;
                    assert!(res.x_adv.sub(&p.x).frobenius_norm() <= eps + 1e-9);
                    for i in 0..p.x.rows() {
                        assert_eq!(res.x_adv[(i, 3)].to_bits(), p.x[(i, 3)].to_bits());
                    }
                    assert!(res.loss >= res.clean_loss);
                }
            }
        }
    }

    #[test]
    fn frozen_query_row_stays_put() {
        let ds = build_dataset(3, 2, 1, 6, 2, InputDist::Gaussian);
        let mut rng = stream_rng(3, 0);
        let params = init_params(&mut rng, 2, 8, 6, PeMode::None, 1.0, Activation::Relu);
        let c = Compiled::new(&params, 6).unwrap();
        let p = &ds.train_prompts()[0];
        let spec = AttackSpec { freeze_query: true, ..AttackSpec::new(0.5) };
        let r = pgd(&c, &p.x, p.query_label, &spec);
        assert_eq!(r.x_adv.row(6), p.x.row(6));
    }

    #[test]
    fn adversarial_risk_at_zero_budget_is_clean_risk() {
        let ds = build_dataset(4, 9, 1, 6, 2, InputDist::Gaussian);
        let mut rng = stream_rng(4, 0);
        let params = init_params(&mut rng, 2, 8, 6, PeMode::Trainable, 1.0, Activation::Relu);
        let c = Compiled::new(&params, 6).unwrap();
        assert_eq!(adversarial_risk(&c, ds.train_prompts(), &AttackSpec::new(0.0)), crate::analysis::risk(&c, ds.train_prompts()));
        let one = &ds.train_prompts()[..1];
        let r = pgd(&c, &one[0].x, one[0].query_label, &AttackSpec::new(0.2));
        assert_eq!(adversarial_risk(&c, one, &AttackSpec::new(0.2)), r.loss);
    }
}
