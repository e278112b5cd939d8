use icl_pe::analysis::GapRecord;
use icl_pe::attack::{pgd, AttackSpec};
use icl_pe::datagen::{build_dataset, design_of, gram_mean, Dataset, InputDist};
use icl_pe::linalg::{dot, norm2, row_softmax, singular_values, spectral_norm, sym_eigen, Mat};
use icl_pe::model::{forward, init_params, rope_rotate, Activation, Compiled, ModelParams, PeMode};
use icl_pe::rng::stream_rng;
use icl_pe::theory::{delta_cov_bound, phi, weyl_check};
use proptest::prelude::*;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Mat::from_vec(rows, cols, v).unwrap())
}

fn mode() -> impl Strategy<Value = PeMode> {
    prop::sample::select(PeMode::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rope_preserves_norm_and_depends_on_offset_only(
        half in 1usize..12,
        seed in any::<u64>(),
        m in 0u32..64,
        n in 0u32..64,
        shift in 0u32..64,
    ) {
        let mut rng = stream_rng(seed, 0);
        let dim = 2 * half;
        let q: Vec<f64> = (0..dim).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
        let k: Vec<f64> = (0..dim).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
        let (m, n, s) = (m as f64, n as f64, shift as f64);
        let scale = norm2(&q) * norm2(&k) + 1e-300;
        prop_assert!((norm2(&rope_rotate(&q, m)) - norm2(&q)).abs() <= 1e-12 * (1.0 + norm2(&q)));
        let a = dot(&rope_rotate(&q, m), &rope_rotate(&k, n));
        let b = dot(&rope_rotate(&q, m + s), &rope_rotate(&k, n + s));
        prop_assert!((a - b).abs() <= 1e-10 * scale);
    }

    #[test]
    fn softmax_rows_are_distributions(m in mat(3, 7), shift in -100.0f64..100.0, big in 1.0f64..500.0) {
        let m = m.scale(big);
        let s = row_softmax(&m);
        let shifted = row_softmax(&Mat::from_fn(3, 7, |r, c| m[(r, c)] + shift));
        for r in 0..3 {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|v| *v >= 0.0));
        }
        prop_assert!(s.max_abs_diff(&shifted) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn transpose_of_product(a in mat(4, 3), b in mat(3, 5)) {
        let lhs = a.matmul(&b).transpose();
        let rhs = b.transpose().matmul(&a.transpose());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        prop_assert!(a.t_matmul(&a).max_abs_diff(&a.transpose().matmul(&a)) < 1e-12);
        prop_assert!(a.matmul_t(&a).max_abs_diff(&a.matmul(&a.transpose())) < 1e-12);
    }

    #[test]
    fn norm_inequalities(a in mat(5, 4), b in mat(4, 3)) {
        let (s, f) = (spectral_norm(&a), a.frobenius_norm());
        prop_assert!(s <= f * (1.0 + 1e-12) + 1e-12);
        prop_assert!(f <= 2.0 * s * (1.0 + 1e-12) + 1e-12); // rank ≤ 4
        prop_assert!(a.matmul(&b).frobenius_norm() <= s * b.frobenius_norm() * (1.0 + 1e-10) + 1e-12);
        let sv = singular_values(&a);
        let ss: f64 = sv.iter().map(|v| v * v).sum();
        prop_assert!((ss - f * f).abs() < 1e-9 * (1.0 + f * f));
    }

    #[test]
    fn eigen_decomposition_reconstructs(a in mat(5, 5)) {
        let sym = a.add(&a.transpose()).scale(0.5);
        let (vals, vecs) = sym_eigen(&sym).unwrap();
        prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let back = vecs.matmul(&Mat::diag(&vals)).matmul(&vecs.transpose());
        prop_assert!(back.max_abs_diff(&sym) < 1e-9);
        prop_assert!(vecs.t_matmul(&vecs).max_abs_diff(&Mat::identity(5)) < 1e-9);
    }

    #[test]
    fn weyl_never_violated(a in mat(6, 4), b in mat(6, 4), scale in 1e-4f64..10.0) {
        prop_assert!(weyl_check(&a, &b.scale(scale)).unwrap() <= 1e-9);
    }

    #[test]
    fn phi_times_denominator_is_one(t in 2usize..500, d in 1usize..50, frac in 0.0f64..0.999) {
        prop_assume!(t > d);
        let limit = (t as f64).sqrt() - (d as f64).sqrt();
        let eps = frac * limit;
        let v = phi(eps, t, d).unwrap();
        let denom = 1.0 - (d as f64 / t as f64).sqrt() - eps / (t as f64).sqrt();
        prop_assert!((v * denom - 1.0).abs() < 1e-12);
        prop_assert!(phi(limit * 1.0001 + 1e-9, t, d).is_err());
    }

    #[test]
    fn gram_shift_respects_bound(seed in any::<u64>(), t in 2usize..40, d in 1usize..6, eps in 0.0f64..2.0) {
        let ds = build_dataset(seed, 1, 1, t, d, InputDist::Gaussian);
        let x = &ds.train_prompts()[0].x;
        let mut rng = stream_rng(seed, 99);
        let mut delta = Mat::from_fn(t + 1, d + 1, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
        AttackSpec::new(eps).mask(&mut delta);
        let delta = delta.scale(eps / delta.frobenius_norm());
        let shift = spectral_norm(&gram_mean(&x.add(&delta)).sub(&gram_mean(x)));
        let top = spectral_norm(&design_of(x));
        let tf = t as f64;
        prop_assert!(shift <= (2.0 * top * eps + eps * eps) / tf + 1e-9);
        // the closed form assumes ‖X_t‖₂ ≤ √(td), which holds with high probability
        if top <= (tf * d as f64).sqrt() {
            prop_assert!(shift <= delta_cov_bound(eps, t, d).unwrap() + 1e-9);
        }
    }

    #[test]
    fn fast_path_matches_reference_forward(seed in any::<u64>(), m in mode(), t in 1usize..10, relu in any::<bool>()) {
        let act = if relu { Activation::Relu } else { Activation::Identity };
        let mut rng = stream_rng(seed, 0);
        let params = init_params(&mut rng, 2, 6, t, m, 1.0, act);
        let ds = build_dataset(seed, 2, 1, t, 2, InputDist::Gaussian);
        let c = Compiled::new(&params, t).unwrap();
        for p in ds.train_prompts() {
            let fast = c.predict(&p.x).unwrap();
            let (slow, _) = forward(&params, &p.x).unwrap();
            prop_assert!((fast - slow).abs() < 1e-12 * (1.0 + slow.abs()));
        }
    }

    #[test]
    fn pgd_stays_in_budget(seed in any::<u64>(), m in mode(), eps in 0.0f64..1.5, k in 0usize..12, freeze in any::<bool>()) {
        let mut rng = stream_rng(seed, 0);
        let params = init_params(&mut rng, 2, 6, 5, m, 1.0, Activation::Relu);
        let c = Compiled::new(&params, 5).unwrap();
        let ds = build_dataset(seed, 1, 1, 5, 2, InputDist::Gaussian);
        let p = &ds.train_prompts()[0];
        let spec = AttackSpec { eps, k, alpha: eps / 4.0, freeze_query: freeze };
        let r = pgd(&c, &p.x, p.query_label, &spec);
        prop_assert!(r.x_adv.sub(&p.x).frobenius_norm() <= eps + 1e-9);
        prop_assert!(r.loss >= r.clean_loss);
        for i in 0..6 {
            prop_assert_eq!(r.x_adv[(i, 2)].to_bits(), p.x[(i, 2)].to_bits());
        }
        if freeze {
            prop_assert_eq!(r.x_adv.row(5), p.x.row(5));
        }
    }

    #[test]
    fn gap_records_round_trip(t in 1usize..100, eps in 0.0f64..1.0, m in mode(), seed in any::<u64>(), tr in -1e3f64..1e3, va in -1e3f64..1e3) {
        let r = GapRecord::new(t, eps, m, seed, eps > 0.0, tr, va);
        prop_assert_eq!(GapRecord::parse_csv_row(&r.to_csv_row()).unwrap(), r);
    }
}

#[test]
fn dataset_and_checkpoint_round_trip() {
    for dist in [InputDist::Gaussian, InputDist::Rademacher, InputDist::UniformUnitCov] {
        let ds = build_dataset(7, 5, 3, 4, 2, dist);
        let mut buf = Vec::new();
        ds.write_binary(&mut buf).unwrap();
        assert_eq!(Dataset::read_binary(&buf[..]).unwrap(), ds);
        assert!(Dataset::read_binary(&buf[..buf.len() - 1]).is_err());
    }
    for m in PeMode::ALL {
        let mut rng = stream_rng(1, 0);
        let params = init_params(&mut rng, 3, 4, 6, m, 2.0, Activation::Identity);
        let mut buf = Vec::new();
        params.write_checkpoint(&mut buf).unwrap();
        assert_eq!(ModelParams::read_checkpoint(&buf[..]).unwrap(), params);
        buf[0] ^= 1;
        assert!(ModelParams::read_checkpoint(&buf[..]).is_err());
    }
}
