//! Risks, generalization gaps and the empirical quantities fed into the
//! bounds: effective linear weights, the PE effect size, Rademacher
//! complexity of the bias class and input-Lipschitz estimates.

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::attack::{mean_tree, pgd_all, AttackResult, AttackSpec};
use crate::datagen::{gram_mean, Dataset, Prompt};
use crate::error::{Error, Result};
use crate::linalg::{least_squares, norm2, spectral_norm, Mat};
use crate::model::{Compiled, ModelParams, PeMode, Predictor};
use crate::rng::{stream, stream_rng};
use crate::theory::delta_cov_bound;

/// Mean squared query loss, summed in a fixed pairwise tree.
pub fn risk<P: Predictor + ?Sized>(model: &P, prompts: &[Prompt]) -> f64 {
    let losses: Vec<f64> = prompts.par_iter().map(|p| (model.predict(&p.x) - p.query_label).powi(2)).collect();
    mean_tree(losses)
}

/// One experiment cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GapRecord {
    pub t: usize,
    pub eps: f64,
    pub pe_mode: PeMode,
    pub seed: u64,
    pub attacked: bool,
    pub train_risk: f64,
    pub val_risk: f64,
    pub gap: f64,
}

impl GapRecord {
    pub const CSV_HEADER: &'static str = "t,eps,pe_mode,seed,attacked,train_risk,val_risk,gap";

    pub fn new(t: usize, eps: f64, pe_mode: PeMode, seed: u64, attacked: bool, train_risk: f64, val_risk: f64) -> Self {
        Self { t, eps, pe_mode, seed, attacked, train_risk, val_risk, gap: val_risk - train_risk }
    }

    /// Non-finite records come from diverged runs and are kept but flagged.
    pub fn is_finite(&self) -> bool {
        self.train_risk.is_finite() && self.val_risk.is_finite() && self.gap.is_finite()
    }

    /// Floats use Rust's shortest round-trip formatting.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.t,
            self.eps,
            self.pe_mode.name(),
            self.seed,
            self.attacked,
            self.train_risk,
            self.val_risk,
            self.gap
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("expected 8 fields, got {}: {line:?}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("bad number {s:?}: {e}")));
        let int = |s: &str| s.parse::<u64>().map_err(|e| Error::Format(format!("bad integer {s:?}: {e}")));
        let attacked = match f[4] {
            "true" => true,
            "false" => false,
            other => return Err(Error::Format(format!("bad flag {other:?}"))),
        };
        Ok(Self {
            t: int(f[0])? as usize,
            eps: num(f[1])?,
            pe_mode: PeMode::parse(f[2])?,
            seed: int(f[3])?,
            attacked,
            train_risk: num(f[5])?,
            val_risk: num(f[6])?,
            gap: num(f[7])?,
        })
    }
}

pub fn write_gap_csv<W: Write>(mut w: W, records: &[GapRecord], header: bool) -> Result<()> {
    if header {
        writeln!(w, "{}", GapRecord::CSV_HEADER)?;
    }
    for r in records {
        writeln!(w, "{}", r.to_csv_row())?;
    }
    Ok(())
}

/// Train/validation risks at one budget. With an attack of positive budget,
/// both the training prompts and the validation prompts are attacked before
/// the risks are taken.
pub fn generalization_gap(
    params: &ModelParams,
    dataset: &Dataset,
    eval_seed: u64,
    attack: Option<&AttackSpec>,
) -> Result<GapRecord> {
    let val = dataset.val_prompts(eval_seed);
    Ok(evaluate_gap(params, dataset, &val, attack)?.record)
}

/// A gap record together with the attacks behind it.
#[derive(Debug, Clone)]
pub struct GapEvaluation {
    pub record: GapRecord,
    /// Empty for clean evaluations.
    pub train_attacks: Vec<AttackResult>,
    pub val_attacks: Vec<AttackResult>,
}

/// [`generalization_gap`] on an explicit validation set, keeping the attack
/// results.
pub fn evaluate_gap(
    params: &ModelParams,
    dataset: &Dataset,
    val: &[Prompt],
    attack: Option<&AttackSpec>,
) -> Result<GapEvaluation> {
    if dataset.t != params.t_max {
        return Err(Error::Shape(format!("dataset has t={}, model has t={}", dataset.t, params.t_max)));
    }
    let c = Compiled::new(params, dataset.t)?;
    for p in val {
        c.check(&p.x)?;
    }
    let eval = match attack {
        Some(spec) if spec.eps > 0.0 => {
            let train_attacks = pgd_all(&c, dataset.train_prompts(), spec);
            let val_attacks = pgd_all(&c, val, spec);
            let tr = mean_tree(train_attacks.iter().map(|r| r.loss).collect());
            let va = mean_tree(val_attacks.iter().map(|r| r.loss).collect());
            let record = GapRecord::new(dataset.t, spec.eps, params.pe_mode, dataset.seed, true, tr, va);
            GapEvaluation { record, train_attacks, val_attacks }
        }
        _ => {
            let record = GapRecord::new(
                dataset.t,
                0.0,
                params.pe_mode,
                dataset.seed,
                false,
                risk(&c, dataset.train_prompts()),
                risk(&c, val),
            );
            GapEvaluation { record, train_attacks: Vec::new(), val_attacks: Vec::new() }
        }
    };
    Ok(eval)
}

/// Property checks over a set of attacked prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackDiagnostics {
    pub n: usize,
    /// Largest `‖X' − X‖_F − ε`.
    pub budget_excess: f64,
    /// Prompts whose label column changed in any bit.
    pub label_changes: usize,
    /// Prompts whose attacked loss fell below the clean loss.
    pub loss_decreases: usize,
    /// Largest `‖G'_t − G_t‖₂ − (ε²/t + 2√d·ε/√t)`.
    pub cov_excess: f64,
    /// Input-Lipschitz estimate used for the surrogate check.
    pub l_x: f64,
    /// Prompts with attacked loss above `(|f(X) − y| + L_x·ε)²`.
    pub surrogate_violations: usize,
}

impl AttackDiagnostics {
    pub fn surrogate_rate(&self) -> f64 {
        if self.n == 0 {
            return 1.0;
        }
        1.0 - self.surrogate_violations as f64 / self.n as f64
    }
}

/// Checks budget, label mask, monotonicity, the Gram-perturbation bound and
/// surrogate domination for one batch of attacks. `L_x` is estimated on the
/// clean prompts and the attacked points, times `safety`.
pub fn attack_diagnostics<P: Predictor + ?Sized>(
    model: &P,
    prompts: &[Prompt],
    attacks: &[AttackResult],
    spec: &AttackSpec,
    safety: f64,
) -> Result<AttackDiagnostics> {
    if prompts.len() != attacks.len() {
        return Err(Error::Shape(format!("{} prompts but {} attacks", prompts.len(), attacks.len())));
    }
    let extra: Vec<Mat> = attacks.iter().map(|a| a.x_adv.clone()).collect();
    let l_x = lipschitz_est(model, prompts, &extra, safety);
    let mut diag = AttackDiagnostics {
        n: prompts.len(),
        budget_excess: f64::NEG_INFINITY,
        label_changes: 0,
        loss_decreases: 0,
        cov_excess: f64::NEG_INFINITY,
        l_x,
        surrogate_violations: 0,
    };
    for (p, a) in prompts.iter().zip(attacks) {
        let (t, d) = (p.t(), p.d());
        diag.budget_excess = diag.budget_excess.max(a.x_adv.sub(&p.x).frobenius_norm() - spec.eps);
        if (0..=t).any(|i| a.x_adv[(i, d)].to_bits() != p.x[(i, d)].to_bits()) {
            diag.label_changes += 1;
        }
        if a.loss < a.clean_loss {
            diag.loss_decreases += 1;
        }
        let shift = spectral_norm(&gram_mean(&a.x_adv).sub(&gram_mean(&p.x)));
        diag.cov_excess = diag.cov_excess.max(shift - delta_cov_bound(spec.eps, t, d)?);
        let surrogate = (a.clean_loss.sqrt() + l_x * spec.eps).powi(2);
        if a.loss > surrogate {
            diag.surrogate_violations += 1;
        }
    }
    Ok(diag)
}

/// Least-squares linear readout of a model with its context held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct EffWeight {
    pub w_eff: Vec<f64>,
    pub residual_rms: f64,
}

fn probe_queries(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, stream::PROBE);
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

fn effective_weight_on<P: Predictor + ?Sized>(model: &P, context: &Prompt, queries: &[Vec<f64>]) -> Result<EffWeight> {
    let d = context.d();
    let q = context.t();
    let mut design = Mat::zeros(queries.len(), d);
    let mut preds = Vec::with_capacity(queries.len());
    let mut x = context.x.clone();
    for (i, xq) in queries.iter().enumerate() {
        design.row_mut(i).copy_from_slice(xq);
        x.row_mut(q)[..d].copy_from_slice(xq);
        x[(q, d)] = 0.0;
        preds.push(model.predict(&x));
    }
    let w_eff = least_squares(&design, &preds)?;
    let resid = design.mul_vec(&w_eff);
    let ss: f64 = resid.iter().zip(&preds).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(EffWeight { w_eff, residual_rms: (ss / queries.len() as f64).sqrt() })
}

/// Regresses predictions on `n_queries` Gaussian queries placed into the
/// context prompt's query row.
pub fn effective_weight<P: Predictor + ?Sized>(model: &P, context: &Prompt, n_queries: usize, seed: u64) -> Result<EffWeight> {
    let d = context.d();
    if n_queries < 10 * d {
        return Err(Error::Domain(format!("need at least {} probe queries, got {n_queries}", 10 * d)));
    }
    effective_weight_on(model, context, &probe_queries(n_queries, d, seed))
}

/// Per-context distances between the effective weights of two models,
/// probed with the same queries.
#[derive(Debug, Clone, PartialEq)]
pub struct CpeEstimate {
    pub per_context: Vec<f64>,
    pub mean: f64,
}

pub fn c_pe_estimate<A, B>(pe: &A, nope: &B, contexts: &[Prompt], n_queries: usize, seed: u64) -> Result<CpeEstimate>
where
    A: Predictor + ?Sized,
    B: Predictor + ?Sized,
{
    let first = contexts.first().ok_or_else(|| Error::Shape("no contexts".into()))?;
    let d = first.d();
    if n_queries < 10 * d {
        return Err(Error::Domain(format!("need at least {} probe queries, got {n_queries}", 10 * d)));
    }
    let queries = probe_queries(n_queries, d, seed);
    let per_context = contexts
        .iter()
        .map(|ctx| {
            let a = effective_weight_on(pe, ctx, &queries)?;
            let b = effective_weight_on(nope, ctx, &queries)?;
            let diff: Vec<f64> = a.w_eff.iter().zip(&b.w_eff).map(|(x, y)| x - y).collect();
            Ok(norm2(&diff))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_context.iter().sum::<f64>() / per_context.len() as f64;
    Ok(CpeEstimate { per_context, mean })
}

/// Monte-Carlo Rademacher complexity of `{x ↦ bᵀx : ‖b‖ ≤ c_pe}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// `(c_pe/m)·√(Σ‖x_j‖²)`.
    pub jensen_bound: f64,
}

pub fn bias_rc_mc(c_pe: f64, queries: &[Vec<f64>], n_sigma: usize, seed: u64) -> Result<RcEstimate> {
    let m = queries.len();
    if m == 0 {
        return Err(Error::Shape("no queries".into()));
    }
    if n_sigma == 0 {
        return Err(Error::Domain("need at least one sign draw".into()));
    }
    let d = queries[0].len();
    let scale = c_pe / m as f64;
    let mut rng = stream_rng(seed, stream::RADEMACHER);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut acc = vec![0.0; d];
    for _ in 0..n_sigma {
        acc.fill(0.0);
        for q in queries {
            let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            crate::linalg::axpy(s, q, &mut acc);
        }
        let v = scale * norm2(&acc);
        sum += v;
        sum_sq += v * v;
    }
    let n = n_sigma as f64;
    let estimate = sum / n;
    let var = if n_sigma > 1 { ((sum_sq - n * estimate * estimate) / (n - 1.0)).max(0.0) } else { 0.0 };
    let total_sq: f64 = queries.iter().map(|q| q.iter().map(|v| v * v).sum::<f64>()).sum();
    Ok(RcEstimate { estimate, stderr: (var / n).sqrt(), jensen_bound: scale * total_sq.sqrt() })
}

/// Norm of `∂ŷ_q/∂X` over the covariate columns.
pub fn input_gradient_norm<P: Predictor + ?Sized>(model: &P, x: &Mat) -> f64 {
    // with target ŷ − 1/2 the loss gradient is exactly ∂ŷ/∂X
    let y = model.predict(x) - 0.5;
    let (_, mut g) = model.loss_and_grad(x, y);
    AttackSpec::new(0.0).mask(&mut g);
    g.frobenius_norm()
}

/// Largest input-gradient norm over `prompts` and any extra points (for
/// instance PGD iterates), times `safety`.
pub fn lipschitz_est<P: Predictor + ?Sized>(model: &P, prompts: &[Prompt], extra: &[Mat], safety: f64) -> f64 {
    let over_prompts = prompts.par_iter().map(|p| input_gradient_norm(model, &p.x)).reduce(|| 0.0, f64::max);
    let over_extra = extra.par_iter().map(|x| input_gradient_norm(model, x)).reduce(|| 0.0, f64::max);
    safety * over_prompts.max(over_extra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, InputDist};
    use crate::linalg::dot;
    use crate::model::{init_params, Activation};

    /// `f(X) = wᵀx_q + c`
    struct Affine(Vec<f64>, f64);

    impl Predictor for Affine {
        fn predict(&self, x: &Mat) -> f64 {
            dot(&self.0, &x.row(x.rows() - 1)[..self.0.len()]) + self.1
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
    fn risk_of_exact_and_zero_predictors() {
        let ds = build_dataset(0, 20_000, 1, 4, 5, InputDist::Gaussian);
        let zero = Affine(vec![0.0; 5], 0.0);
        let r = risk(&zero, ds.train_prompts());
        assert!((r - 1.0).abs() < 0.03, "{r}");
        // a task-specific linear stub is exact on its own task
        let p = &ds.train_prompts()[0];
        let exact = Affine(p.task.mu.clone(), 0.0);
        assert!(risk(&exact, std::slice::from_ref(p)) < 1e-28);
        assert_eq!(risk(&zero, std::slice::from_ref(p)), p.query_label.powi(2));
    }

    #[test]
    fn gap_arithmetic_is_exact_and_csv_round_trips() {
        let r = GapRecord::new(10, 0.2, PeMode::Rope, 3, true, 0.1 + 0.2, 1.0 / 3.0);
        assert_eq!(r.gap.to_bits(), (1.0f64 / 3.0 - (0.1 + 0.2)).to_bits());
        let back = GapRecord::parse_csv_row(&r.to_csv_row()).unwrap();
        assert_eq!(back, r);
        assert!(GapRecord::parse_csv_row("1,2,3").is_err());
    }

    #[test]
    fn zero_budget_attack_matches_clean_record() {
        let ds = build_dataset(1, 16, 32, 6, 2, InputDist::Gaussian);
        let mut rng = stream_rng(1, stream::INIT);
        let params = init_params(&mut rng, 2, 8, 6, PeMode::Trainable, 1.0, Activation::Relu);
        let clean = generalization_gap(&params, &ds, 0, None).unwrap();
        let zero = generalization_gap(&params, &ds, 0, Some(&AttackSpec::new(0.0))).unwrap();
        assert_eq!(clean, zero);
        let att = generalization_gap(&params, &ds, 0, Some(&AttackSpec::new(0.2))).unwrap();
        assert!(att.attacked && att.train_risk >= clean.train_risk && att.val_risk >= clean.val_risk);
    }

    #[test]
    fn effective_weight_recovers_linear_stubs() {
        let ds = build_dataset(2, 1, 1, 5, 3, InputDist::Gaussian);
        let ctx = &ds.train_prompts()[0];
        let w = vec![0.3, -1.2, 0.7];
        let e = effective_weight(&Affine(w.clone(), 0.0), ctx, 200, 9).unwrap();
        for (a, b) in e.w_eff.iter().zip(&w) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(e.residual_rms < 1e-8);

        let c = 0.25;
        let e = effective_weight(&Affine(w.clone(), c), ctx, 20_000, 9).unwrap();
        for (a, b) in e.w_eff.iter().zip(&w) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
        assert!((e.residual_rms - c).abs() < 0.01 * c + 0.005, "{}", e.residual_rms);
        assert_eq!(e, effective_weight(&Affine(w, c), ctx, 20_000, 9).unwrap());
        assert!(effective_weight(&Affine(vec![0.0; 3], 0.0), ctx, 29, 0).is_err());
    }

    #[test]
    fn c_pe_of_constructed_shift() {
        let ds = build_dataset(3, 4, 1, 5, 3, InputDist::Gaussian);
        let base = Affine(vec![1.0, 0.5, -0.5], 0.0);
        assert_eq!(c_pe_estimate(&base, &base, ds.train_prompts(), 60, 0).unwrap().mean, 0.0);
        let shifted = Affine(vec![1.3, 0.5, -0.9], 0.0);
        let est = c_pe_estimate(&shifted, &base, ds.train_prompts(), 60, 0).unwrap();
        assert!((est.mean - 0.5).abs() < 1e-9, "{}", est.mean);
        assert_eq!(est.per_context.len(), 4);
    }

    #[test]
    fn bias_rc_trivial_cases() {
        let qs = vec![vec![3.0, 4.0]];
        let r = bias_rc_mc(2.0, &qs, 50, 0).unwrap();
        assert_eq!(r.estimate, 10.0);
        assert_eq!(bias_rc_mc(0.0, &qs, 50, 0).unwrap().estimate, 0.0);
        assert!(bias_rc_mc(1.0, &[], 5, 0).is_err());
    }

    #[test]
    fn bias_rc_respects_jensen_bound() {
        let mut rng = stream_rng(11, 0);
        for inst in 0..100u64 {
            let m = rng.gen_range(1..40);
            let d = rng.gen_range(1..6);
            let qs: Vec<Vec<f64>> =
                (0..m).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
            let c = rng.gen_range(0.1..3.0);
            let r = bias_rc_mc(c, &qs, 400, inst).unwrap();
            assert!(r.estimate <= r.jensen_bound * (1.0 + 1e-12) + 3.0 * r.stderr, "{r:?}");
        }
    }

    #[test]
    fn lipschitz_of_stubs() {
        let ds = build_dataset(4, 10, 1, 5, 3, InputDist::Gaussian);
        assert_eq!(lipschitz_est(&Affine(vec![0.0; 3], 1.0), ds.train_prompts(), &[], 2.0), 0.0);
        let l = lipschitz_est(&Affine(vec![3.0, 0.0, 4.0], 1.0), ds.train_prompts(), &[], 2.0);
        assert!((l - 10.0).abs() < 1e-12);
    }
}
