//! Invariant suite behind the `selfcheck` command.
//!
//! Every check is seeded and prints only rounded numbers, so a fixed seed
//! gives an identical report.

use icl_pe::analysis::{attack_diagnostics, bias_rc_mc};
use icl_pe::attack::{pgd_all, AttackSpec};
use icl_pe::datagen::{build_dataset, gram_mean, InputDist};
use icl_pe::grad::{backward, fd_check_with, GradBundle};
use icl_pe::linalg::{dot, norm2, row_softmax, Mat};
use icl_pe::model::{init_params, rope_rotate, Activation, Compiled, ModelParams, PeMode};
use icl_pe::rng::{substream_rng, Rng};
use icl_pe::theory::{
    delta_cov_bound, dudley_quadrature, ellipsoid_diameter, phi, sigma_min_tail_mc, solution_diameter_clean,
    weyl_check,
};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::theory_report::{render, report, verify, ReportParams};

/// Substream families used by the suite.
mod family {
    pub const FD: u64 = 101;
    pub const SOFTMAX: u64 = 102;
    pub const WEYL: u64 = 103;
    pub const ROPE: u64 = 104;
    pub const DIAMETER: u64 = 105;
    pub const ATTACK: u64 = 106;
    pub const RC: u64 = 107;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self { name, pass, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {:<24} {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Worst FD relative error over `draws` random models and prompts per
/// activation at `d=3, d_m=8, t=6`, cycling through the PE modes.
pub fn gradient_fd<G>(seed: u64, draws: usize, grad: G) -> Check
where
    G: Fn(&ModelParams, &Mat, f64) -> icl_pe::Result<GradBundle> + Copy,
{
    let mut worst = 0.0f64;
    let mut errors = 0;
    for (a, act) in [Activation::Relu, Activation::Identity].into_iter().enumerate() {
        for i in 0..draws {
            let index = (a * draws + i) as u64;
            let mode = PeMode::ALL[i % 3];
            let mut rng = substream_rng(seed, family::FD, index);
            let params = init_params(&mut rng, 3, 8, 6, mode, 1.0, act);
            let ds = build_dataset(seed.wrapping_add(index), 1, 1, 6, 3, InputDist::Gaussian);
            let p = &ds.train_prompts()[0];
            match fd_check_with(&params, &p.x, p.query_label, 1e-5, grad) {
                Ok(e) => worst = worst.max(e),
                Err(_) => errors += 1,
            }
        }
    }
    Check::new(
        "gradient_fd",
        errors == 0 && worst < 1e-5,
        format!("worst relative error {worst:.2e} over {} draws (limit 1e-5)", 2 * draws),
    )
}

pub fn softmax(seed: u64) -> Check {
    let mut worst_sum = 0.0f64;
    let mut worst_shift = 0.0f64;
    let mut negative = false;
    for i in 0..200 {
        let mut rng = substream_rng(seed, family::SOFTMAX, i);
        let scale = [1.0, 30.0, 700.0][i as usize % 3];
        let m = gaussian(&mut rng, 4, 9).scale(scale);
        let s = row_softmax(&m);
        let shift: f64 = rng.gen_range(-50.0..50.0);
        let shifted = row_softmax(&Mat::from_fn(4, 9, |r, c| m[(r, c)] + shift));
        for r in 0..4 {
            worst_sum = worst_sum.max((s.row(r).iter().sum::<f64>() - 1.0).abs());
            negative |= s.row(r).iter().any(|v| !(*v >= 0.0));
            for c in 0..9 {
                worst_shift = worst_shift.max((s[(r, c)] - shifted[(r, c)]).abs());
            }
        }
    }
    Check::new(
        "softmax",
        !negative && worst_sum <= 1e-12 && worst_shift <= 1e-12,
        format!("row sums within {worst_sum:.1e}, shift changes {worst_shift:.1e}"),
    )
}

/// Weyl perturbation inequality on `pairs` random `6×4` pairs.
pub fn weyl(seed: u64, pairs: u64) -> Check {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..pairs {
        let mut rng = substream_rng(seed, family::WEYL, i);
        let a = gaussian(&mut rng, 6, 4);
        let b = gaussian(&mut rng, 6, 4).scale([1e-3, 0.1, 1.0, 10.0][i as usize % 4]);
        worst = worst.max(weyl_check(&a, &b).unwrap_or(f64::INFINITY));
    }
    Check::new("weyl", worst <= 1e-9, format!("max violation {worst:.2e} over {pairs} pairs (limit 1e-9)"))
}

/// `σ_min` tail rates for `k ∈ {1, 2}` at `(50, 5)` and `(200, 20)`.
pub fn sigma_min_tails(seed: u64, trials: usize) -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    for (t, d) in [(50, 5), (200, 20)] {
        for k in [1.0, 2.0] {
            match sigma_min_tail_mc(t, d, k, trials, seed) {
                Ok(e) => {
                    pass &= e.rate <= e.allowed;
                    parts.push(format!("({t},{d},k={k}) {:.4}<={:.4}", e.rate, e.allowed));
                }
                Err(err) => {
                    pass = false;
                    parts.push(format!("({t},{d},k={k}) error {err}"));
                }
            }
        }
    }
    Check::new("sigma_min_tail", pass, parts.join(" "))
}

/// Entropy integral against its closed form at `K = 1`.
pub fn dudley(diam_values: &[f64]) -> Check {
    let mut worst = 0.0f64;
    for &diam in diam_values {
        let want = diam * std::f64::consts::PI.sqrt() / 2.0;
        worst = worst.max(dudley_quadrature(diam, 1.0).map_or(f64::INFINITY, |v| (v - want).abs()));
    }
    Check::new("dudley", worst <= 1e-6, format!("K=1 error {worst:.1e} (limit 1e-6)"))
}

/// Median exact-fit diameter at `t = 100` over that at `t = 400`, `d = 5`.
pub fn diameter_scaling(seed: u64, draws: u64) -> Check {
    let median = |t: usize, offset: u64| {
        let mut v: Vec<f64> = (0..draws)
            .map(|i| {
                let mut rng = substream_rng(seed, family::DIAMETER, offset + i);
                solution_diameter_clean(&gaussian(&mut rng, t, 5), 1.0).unwrap_or(f64::NAN)
            })
            .collect();
        v.sort_by(f64::total_cmp);
        0.5 * (v[(v.len() - 1) / 2] + v[v.len() / 2])
    };
    let ratio = median(100, 0) / median(400, draws);
    let mut rng = substream_rng(seed, family::DIAMETER, 2 * draws);
    let x = gaussian(&mut rng, 30, 5);
    let agree = match (solution_diameter_clean(&x, 1.0), ellipsoid_diameter(&x.t_matmul(&x), 1.0)) {
        (Ok(a), Ok(b)) => (a - b).abs(),
        _ => f64::INFINITY,
    };
    Check::new(
        "solution_diameter",
        (1.6..=2.4).contains(&ratio) && agree <= 1e-9,
        format!("median ratio t=100/t=400 {ratio:.3} (want 2 ± 20%), two paths agree to {agree:.1e}"),
    )
}

/// Rotations preserve norms, compose additively and make scores depend
/// only on the position offset.
pub fn rope_identities(seed: u64, draws: u64) -> Check {
    let mut worst = 0.0f64;
    for i in 0..draws {
        let mut rng = substream_rng(seed, family::ROPE, i);
        let n = 2 * rng.gen_range(1..=8);
        let q: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let k: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (m, p, s) = (rng.gen_range(0..40) as f64, rng.gen_range(0..40) as f64, rng.gen_range(0..40) as f64);
        let base = dot(&rope_rotate(&q, m), &rope_rotate(&k, p));
        let moved = dot(&rope_rotate(&q, m + s), &rope_rotate(&k, p + s));
        let scale = norm2(&q) * norm2(&k);
        worst = worst.max((base - moved).abs() / scale);
        worst = worst.max((norm2(&rope_rotate(&q, m)) - norm2(&q)).abs() / norm2(&q));
        let twice = rope_rotate(&rope_rotate(&q, m), p);
        let once = rope_rotate(&q, m + p);
        worst = worst.max(twice.iter().zip(&once).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / norm2(&q));
        let zero = rope_rotate(&q, 0.0);
        worst = worst.max(zero.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Check::new("rope_identities", worst <= 1e-9, format!("max deviation {worst:.1e} over {draws} draws"))
}

/// PGD budget, label mask, loss monotonicity and the Gram-perturbation
/// bound on a small random model in every PE mode.
pub fn attack_contract(seed: u64) -> Vec<Check> {
    let mut budget = f64::NEG_INFINITY;
    let mut labels = 0;
    let mut decreases = 0;
    let mut cov = f64::NEG_INFINITY;
    let mut random_cov = f64::NEG_INFINITY;
    let mut total = 0;
    for (i, mode) in PeMode::ALL.into_iter().enumerate() {
        let mut rng = substream_rng(seed, family::ATTACK, i as u64);
        let params = init_params(&mut rng, 3, 8, 10, mode, 1.0, Activation::Relu);
        let ds = build_dataset(seed.wrapping_add(i as u64), 16, 1, 10, 3, InputDist::Gaussian);
        let Ok(c) = Compiled::new(&params, 10) else {
            return vec![Check::new("pgd_contract", false, format!("{mode:?}: model build failed"))];
        };
        for eps in [0.05, 0.2, 0.5] {
            let spec = AttackSpec::new(eps);
            let attacks = pgd_all(&c, ds.train_prompts(), &spec);
            match attack_diagnostics(&c, ds.train_prompts(), &attacks, &spec, 2.0) {
                Ok(d) => {
                    budget = budget.max(d.budget_excess);
                    labels += d.label_changes;
                    decreases += d.loss_decreases;
                    cov = cov.max(d.cov_excess);
                    total += d.n;
                }
                Err(e) => return vec![Check::new("pgd_contract", false, e.to_string())],
            }
            // arbitrary covariate perturbations on the sphere of radius eps
            for p in ds.train_prompts() {
                let mut delta = gaussian(&mut rng, 11, 4);
                spec.mask(&mut delta);
                let delta = delta.scale(eps / delta.frobenius_norm());
                let shift = icl_pe::linalg::spectral_norm(&gram_mean(&p.x.add(&delta)).sub(&gram_mean(&p.x)));
                random_cov = random_cov.max(shift - delta_cov_bound(eps, 10, 3).unwrap_or(f64::NAN));
            }
        }
    }
    vec![
        Check::new(
            "pgd_contract",
            budget <= 1e-9 && labels == 0 && decreases == 0,
            format!("{total} prompts: budget excess {budget:.1e}, label changes {labels}, loss decreases {decreases}"),
        ),
        Check::new(
            "gram_perturbation",
            cov <= 1e-9 && random_cov <= 1e-9,
            format!("slack to bound: attacked {:.3}, random {:.3}", -cov, -random_cov),
        ),
    ]
}

/// Φ identity, bias-class complexity and the theory report round trip.
pub fn theory_identities(seed: u64) -> Vec<Check> {
    let mut worst = 0.0f64;
    for t in [6, 10, 20, 50, 400] {
        for d in [1, 3, 5] {
            if t <= d {
                continue;
            }
            let limit = (t as f64).sqrt() - (d as f64).sqrt();
            for j in 0..10 {
                let eps = limit * j as f64 / 10.5;
                let v = phi(eps, t, d).unwrap_or(f64::NAN);
                let back = v * (1.0 - (d as f64 / t as f64).sqrt() - eps / (t as f64).sqrt());
                worst = worst.max((back - 1.0).abs());
            }
        }
    }
    let phi_check = Check::new("phi_identity", worst <= 1e-12, format!("max |Φ·denominator − 1| {worst:.1e}"));

    let mut violations = 0;
    for i in 0..100u64 {
        let mut rng = substream_rng(seed, family::RC, i);
        let m = rng.gen_range(5..60);
        let d = rng.gen_range(1..6);
        let queries: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let c_pe = rng.gen_range(0.1..3.0);
        match bias_rc_mc(c_pe, &queries, 200, seed.wrapping_add(i)) {
            Ok(r) if r.estimate <= r.jensen_bound * (1.0 + 1e-12) + 3.0 * r.stderr => {}
            _ => violations += 1,
        }
    }
    let rc_check =
        Check::new("bias_rc_jensen", violations == 0, format!("{violations} of 100 instances above the Jensen bound"));

    let text = render(&report(&ReportParams::default()));
    let round = verify(&text);
    let report_check = Check::new(
        "theory_round_trip",
        matches!(round, Ok(e) if e <= 1e-12),
        match round {
            Ok(e) => format!("re-evaluation error {e:.1e}"),
            Err(e) => format!("error: {e}"),
        },
    );
    vec![phi_check, rc_check, report_check]
}

/// The full suite.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = vec![
        gradient_fd(seed, 20, backward),
        softmax(seed),
        weyl(seed, 1000),
        sigma_min_tails(seed, 10_000),
        dudley(&[0.1, 1.0, 3.7]),
        diameter_scaling(seed, 100),
        rope_identities(seed, 1000),
    ];
    out.extend(attack_contract(seed));
    out.extend(theory_identities(seed));
    out
}

pub fn render_report(checks: &[Check]) -> String {
    let mut s: String = checks.iter().map(|c| format!("{}\n", c.line())).collect();
    let failed = checks.iter().filter(|c| !c.pass).count();
    s.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn injected_gradient_bug_fails_fd() {
        let buggy = |p: &ModelParams, x: &Mat, y: f64| {
            let mut g = backward(p, x, y)?;
            g.d_w_c[0] += 0.1;
            Ok(g)
        };
        assert!(!gradient_fd(0, 3, buggy).pass);
        assert!(gradient_fd(0, 3, backward).pass);
    }

    #[test]
    fn quick_checks_pass_and_repeat() {
        let a = [softmax(3), weyl(3, 50), dudley(&[1.0]), rope_identities(3, 50)];
        assert!(a.iter().all(|c| c.pass), "{a:?}");
        let b = [softmax(3), weyl(3, 50), dudley(&[1.0]), rope_identities(3, 50)];
        assert_eq!(render_report(&a), render_report(&b));
    }
}
