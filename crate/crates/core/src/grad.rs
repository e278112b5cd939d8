//! Reverse-mode gradients of the query loss `(ŷ_q − y_q)²`.
//!
//! Gradients are first taken with respect to the folded matrices of
//! [`Compiled`] (score kernel and value map), which is where per-prompt work
//! is cheap, and then pulled back once to `W_in`, `W_QK`/`W_Q`/`W_K`, `W_V`
//! and `P`. Batch gradients sum the folded per-prompt gradients with a fixed
//! pairwise tree, so the result does not depend on thread count.

use rayon::prelude::*;

use crate::datagen::Prompt;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Mat};
use crate::model::{forward, Attention, Compiled, Kernel, ModelParams};

/// Gradients shaped like the parameters, plus the input gradient when asked.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_w_in: Mat,
    pub d_attn: Attention,
    pub d_w_v: Mat,
    pub d_w_c: Vec<f64>,
    pub d_p: Option<Mat>,
    /// `(t+1)×(d+1)`, including the label column.
    pub d_x: Option<Mat>,
    pub loss: f64,
}

impl GradBundle {
    /// Parameter gradients in the same order as [`ModelParams::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.d_w_in.as_slice()];
        match &self.d_attn {
            Attention::Combined { w_qk } => out.push(w_qk.as_slice()),
            Attention::Rotary { w_q, w_k } => {
                out.push(w_q.as_slice());
                out.push(w_k.as_slice());
            }
        }
        out.push(self.d_w_v.as_slice());
        out.push(&self.d_w_c);
        if let Some(p) = &self.d_p {
            out.push(p.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
            && self.d_x.as_ref().map_or(true, Mat::is_finite)
    }
}

/// Gradient with respect to the folded matrices.
#[derive(Debug, Clone)]
pub(crate) struct FoldedGrad {
    /// Bilinear: `dM` (`p×p`). Rotary: `dA_Q`, stacked over `dA_K` (`2p×d_m`).
    kernel: Mat,
    value: Mat,
    w_c: Vec<f64>,
    loss: f64,
}

/// Per-prompt pieces of the folded gradient. Rank-one terms are kept as
/// their factors and summed over the batch in index order.
pub(crate) struct PromptParts {
    loss: f64,
    /// Bilinear: `dM`. Rotary: `dA_K`.
    kernel: Mat,
    /// `dV = ctx ⊗ dpre`.
    ctx: Vec<f64>,
    dpre: Vec<f64>,
    /// `dW_c = 2(ŷ − y)·h_q`.
    d_w_c: Vec<f64>,
    /// Rotary only: `dA_Q = z_q ⊗ dq`.
    query: Option<(Vec<f64>, Vec<f64>)>,
}

/// Output of one query-row backward pass.
pub(crate) struct PromptGrad {
    pub loss: f64,
    pub parts: Option<PromptParts>,
    pub d_x: Option<Mat>,
}

/// One backward pass through the query row.
pub(crate) fn prompt_backward(
    c: &Compiled<'_>,
    x: &Mat,
    y_q: f64,
    want_params: bool,
    want_input: bool,
) -> PromptGrad {
    let params = c.params;
    let pass = c.query_pass(x);
    let n = c.t + 1;
    let q_row = c.t;
    let d1 = params.d + 1;
    let d_m = params.d_m;
    let p = c.width();
    let resid = pass.prediction - y_q;
    let loss = resid * resid;
    let g = 2.0 * resid;

    let act = params.activation;
    let dpre: Vec<f64> = (0..d_m).map(|k| g * params.w_c[k] * act.derivative(pass.pre[k])).collect();
    let dctx: Vec<f64> = (0..p).map(|k| dot(c.value.row(k), &dpre)).collect();
    let da: Vec<f64> = (0..n).map(|j| c.z_dot(x, j, &dctx)).collect();
    let mean = dot(&pass.attn, &da);
    let ds: Vec<f64> = pass.attn.iter().zip(&da).map(|(a, g)| a * (g - mean)).collect();

    let mut d_x = want_input.then(|| Mat::zeros(n, d1));
    if let Some(dx) = d_x.as_mut() {
        for j in 0..n {
            axpy(pass.attn[j], &dctx[..d1], dx.row_mut(j));
        }
    }

    let (kernel_grad, query) = match &c.kernel {
        Kernel::Bilinear { m, .. } => {
            let u = &pass.query_vec;
            let mut r = vec![0.0; p];
            for (j, &dsj) in ds.iter().enumerate() {
                c.z_axpy(dsj, x, j, &mut r);
            }
            if let Some(dx) = d_x.as_mut() {
                for (j, &dsj) in ds.iter().enumerate() {
                    axpy(dsj, &u[..d1], dx.row_mut(j));
                }
                // query side: M r
                let mr: Vec<f64> = (0..d1).map(|k| dot(m.row(k), &r)).collect();
                axpy(1.0, &mr, dx.row_mut(q_row));
            }
            let kernel = want_params.then(|| {
                let mut zq = vec![0.0; p];
                c.z_axpy(1.0, x, q_row, &mut zq);
                outer(&zq, &r)
            });
            (kernel, None)
        }
        Kernel::Rotary { a_q, a_k } => {
            let keys = pass.keys.as_ref().expect("rotary pass keeps keys");
            let s = 1.0 / (d_m as f64).sqrt();
            let q = &pass.query_vec;
            let mut dq = vec![0.0; d_m];
            for (j, &dsj) in ds.iter().enumerate() {
                axpy(s * dsj, keys.row(j), &mut dq);
            }
            let table = c.rope.as_ref().expect("rotary kernel has a table");
            table.rotate(&mut dq, q_row, true);
            let mut dk = Mat::zeros(n, d_m);
            for (j, &dsj) in ds.iter().enumerate() {
                let row = dk.row_mut(j);
                axpy(s * dsj, q, row);
                table.rotate(row, j, true);
            }
            if let Some(dx) = d_x.as_mut() {
                for j in 0..n {
                    let row = dk.row(j);
                    for k in 0..d1 {
                        dx[(j, k)] += dot(a_k.row(k), row);
                    }
                }
                for k in 0..d1 {
                    dx[(q_row, k)] += dot(a_q.row(k), &dq);
                }
            }
            if want_params {
                let mut d_ak = Mat::zeros(p, d_m);
                for j in 0..n {
                    for (k, &xk) in x.row(j).iter().enumerate() {
                        if xk != 0.0 {
                            axpy(xk, dk.row(j), d_ak.row_mut(k));
                        }
                    }
                    if p > d1 {
                        axpy(1.0, dk.row(j), d_ak.row_mut(d1 + j));
                    }
                }
                let mut zq = vec![0.0; p];
                c.z_axpy(1.0, x, q_row, &mut zq);
                (Some(d_ak), Some((zq, dq)))
            } else {
                (None, None)
            }
        }
    };

    let parts = kernel_grad.map(|kernel| PromptParts {
        loss,
        kernel,
        ctx: pass.ctx,
        dpre,
        d_w_c: pass.h_q.iter().map(|h| g * h).collect(),
        query,
    });
    PromptGrad { loss, parts, d_x }
}

fn outer(u: &[f64], v: &[f64]) -> Mat {
    let mut m = Mat::zeros(u.len(), v.len());
    accumulate_outer(&mut m, u, v);
    m
}

/// `m += u ⊗ v`.
fn accumulate_outer(m: &mut Mat, u: &[f64], v: &[f64]) {
    for (i, &ui) in u.iter().enumerate() {
        if ui != 0.0 {
            axpy(ui, v, m.row_mut(i));
        }
    }
}

/// Sums per-prompt parts and scales by `scale`. Kernel blocks and losses are
/// combined in a fixed pairwise tree; rank-one terms are accumulated in
/// index order.
fn combine(parts: Vec<PromptParts>, p: usize, d_m: usize, scale: f64) -> FoldedGrad {
    let mut value = Mat::zeros(p, d_m);
    let mut w_c = vec![0.0; d_m];
    let mut d_aq = parts[0].query.as_ref().map(|_| Mat::zeros(p, d_m));
    let mut blocks = Vec::with_capacity(parts.len());
    for part in parts {
        accumulate_outer(&mut value, &part.ctx, &part.dpre);
        axpy(1.0, &part.d_w_c, &mut w_c);
        if let (Some(acc), Some((zq, dq))) = (d_aq.as_mut(), part.query.as_ref()) {
            accumulate_outer(acc, zq, dq);
        }
        blocks.push((part.kernel, part.loss));
    }
    let (kernel_sum, loss) = tree_reduce(blocks, |(mut k, l), (k2, l2)| {
        k.add_assign(k2);
        (k, l + l2)
    })
    .expect("non-empty batch");
    let kernel = match d_aq {
        Some(aq) => {
            let mut stacked = Mat::zeros(2 * p, d_m);
            stacked.as_mut_slice()[..p * d_m].copy_from_slice(aq.as_slice());
            stacked.as_mut_slice()[p * d_m..].copy_from_slice(kernel_sum.as_slice());
            stacked
        }
        None => kernel_sum,
    };
    FoldedGrad {
        kernel: kernel.scale(scale),
        value: value.scale(scale),
        w_c: w_c.iter().map(|v| v * scale).collect(),
        loss: loss * scale,
    }
}

/// Pulls folded gradients back to the parameters.
fn unfold(c: &Compiled<'_>, folded: &FoldedGrad) -> (Mat, Attention, Mat, Option<Mat>) {
    let params = c.params;
    let w = &c.w_aug;
    let p = c.width();
    // V = W W_V
    let mut d_w = folded.value.matmul_t(&params.w_v);
    let d_w_v = w.t_matmul(&folded.value);
    let d_attn = match &params.attn {
        Attention::Combined { w_qk } => {
            // M = s W K Wᵀ
            let s = 1.0 / (params.d_m as f64).sqrt();
            let dm = &folded.kernel;
            let Kernel::Bilinear { w_qk: wk, .. } = &c.kernel else { unreachable!("combined attention compiles to a bilinear kernel") };
            let wk = wk.scale(s);
            let wkt = w.matmul_t(w_qk).scale(s);
            d_w.add_assign(&dm.matmul(&wkt));
            d_w.add_assign(&dm.t_matmul(&wk));
            let d_k = w.t_matmul(&dm.matmul(w)).scale(s);
            Attention::Combined { w_qk: d_k }
        }
        Attention::Rotary { w_q, w_k } => {
            let d_aq = folded.kernel.slice_rows(0, p);
            let d_ak = folded.kernel.slice_rows(p, 2 * p);
            d_w.add_assign(&d_aq.matmul_t(w_q));
            d_w.add_assign(&d_ak.matmul_t(w_k));
            Attention::Rotary { w_q: w.t_matmul(&d_aq), w_k: w.t_matmul(&d_ak) }
        }
    };
    let d1 = params.d + 1;
    let d_w_in = d_w.slice_rows(0, d1);
    let d_p = params.p.as_ref().map(|full| {
        let mut dp = Mat::zeros(full.rows(), full.cols());
        let used = d_w.slice_rows(d1, p);
        dp.as_mut_slice()[..used.as_slice().len()].copy_from_slice(used.as_slice());
        dp
    });
    (d_w_in, d_attn, d_w_v, d_p)
}

/// Gradient of `(ŷ_q − y_q)²` for a single prompt, including `∂/∂X`.
pub fn backward(params: &ModelParams, x: &Mat, y_q: f64) -> Result<GradBundle> {
    params.validate_input(x)?;
    let c = Compiled::new(params, x.rows() - 1)?;
    let pg = prompt_backward(&c, x, y_q, true, true);
    let folded = combine(vec![pg.parts.expect("requested")], c.width(), params.d_m, 1.0);
    let (d_w_in, d_attn, d_w_v, d_p) = unfold(&c, &folded);
    Ok(GradBundle { d_w_in, d_attn, d_w_v, d_w_c: folded.w_c, d_p, d_x: pg.d_x, loss: pg.loss })
}

/// Loss and input gradient only; what an attacker needs.
pub fn input_gradient(c: &Compiled<'_>, x: &Mat, y_q: f64) -> Result<(f64, Mat)> {
    c.check(x)?;
    let pg = prompt_backward(c, x, y_q, false, true);
    Ok((pg.loss, pg.d_x.expect("requested")))
}

/// Sums in a fixed pairwise tree over index order.
pub(crate) fn tree_reduce<T>(mut items: Vec<T>, combine: impl Fn(T, &T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, &b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Mean query loss over `prompts` and its parameter gradient.
pub fn batch_gradient(params: &ModelParams, prompts: &[Prompt]) -> Result<GradBundle> {
    let first = prompts.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let c = Compiled::new(params, first.t())?;
    for p in prompts {
        c.check(&p.x)?;
    }
    let per: Vec<PromptParts> = prompts
        .par_iter()
        .map(|p| prompt_backward(&c, &p.x, p.query_label, true, false).parts.expect("requested"))
        .collect();
    let mean = combine(per, c.width(), params.d_m, 1.0 / prompts.len() as f64);
    let (d_w_in, d_attn, d_w_v, d_p) = unfold(&c, &mean);
    Ok(GradBundle { d_w_in, d_attn, d_w_v, d_w_c: mean.w_c, d_p, d_x: None, loss: mean.loss })
}

fn reference_loss(params: &ModelParams, x: &Mat, y_q: f64) -> (f64, Vec<bool>) {
    let (pred, trace) = forward(params, x).expect("validated shapes");
    let q = trace.pre.rows() - 1;
    let pattern = trace.pre.row(q).iter().map(|v| *v > 0.0).collect();
    ((pred - y_q).powi(2), pattern)
}

/// Central-difference check of [`backward`] over every parameter and every
/// input coordinate. Returns the worst relative error.
pub fn fd_check(params: &ModelParams, x: &Mat, y_q: f64, h: f64) -> Result<f64> {
    fd_check_with(params, x, y_q, h, backward)
}

/// [`fd_check`] against an arbitrary gradient routine.
///
/// The finite differences use the full reference forward pass. A coordinate
/// is skipped when the ±h probe flips any ReLU on the query row. The relative
/// error divides by `max(|analytic|, |fd|, 1e-3)` so near-zero gradients are
/// judged on absolute disagreement.
pub fn fd_check_with(
    params: &ModelParams,
    x: &Mat,
    y_q: f64,
    h: f64,
    grad: impl Fn(&ModelParams, &Mat, f64) -> Result<GradBundle>,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = grad(params, x, y_q)?;
    let (_, base_pattern) = reference_loss(params, x, y_q);
    let mut worst = 0.0f64;
    let mut record = |g: f64, plus: (f64, Vec<bool>), minus: (f64, Vec<bool>)| {
        if plus.1 != base_pattern || minus.1 != base_pattern {
            return;
        }
        let fd = (plus.0 - minus.0) / (2.0 * h);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-3));
    };

    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.to_vec()).collect();
    let n_tensors = grads.len();
    for ti in 0..n_tensors {
        for k in 0..grads[ti].len() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti][k] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti][k] -= h;
            record(grads[ti][k], reference_loss(&plus, x, y_q), reference_loss(&minus, x, y_q));
        }
    }
    if let Some(dx) = &analytic.d_x {
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                record(dx[(i, j)], reference_loss(params, &xp, y_q), reference_loss(params, &xm, y_q));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, InputDist};
    use crate::model::{init_params, Activation, PeMode};
    use crate::rng::stream_rng;

    fn setup(mode: PeMode, act: Activation, seed: u64) -> (ModelParams, Prompt) {
        let mut rng = stream_rng(seed, 0);
        let params = init_params(&mut rng, 3, 8, 6, mode, 1.0, act);
        let ds = build_dataset(seed, 1, 1, 6, 3, InputDist::Gaussian);
        (params, ds.train_prompts()[0].clone())
    }

    #[test]
    fn readout_gradient_is_residual_times_hidden() {
        let (params, p) = setup(PeMode::None, Activation::Relu, 1);
        let g = backward(&params, &p.x, p.query_label).unwrap();
        let (pred, trace) = forward(&params, &p.x).unwrap();
        for (k, v) in g.d_w_c.iter().enumerate() {
            let want = 2.0 * (pred - p.query_label) * trace.h_q[k];
            assert!((v - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn exact_fit_gives_zero_gradients() {
        let (params, p) = setup(PeMode::Trainable, Activation::Relu, 2);
        let pred = forward(&params, &p.x).unwrap().0;
        let g = backward(&params, &p.x, pred).unwrap();
        // tiny residual from the two evaluation orders
        for t in g.tensors() {
            assert!(t.iter().all(|v| v.abs() < 1e-12));
        }
        assert!(g.d_x.unwrap().as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn finite_differences_agree_in_every_mode() {
        for mode in PeMode::ALL {
            for act in [Activation::Relu, Activation::Identity] {
                for seed in 0..3 {
                    let (params, p) = setup(mode, act, seed);
                    let err = fd_check(&params, &p.x, p.query_label, 1e-5).unwrap();
                    let tol = if act == Activation::Identity { 1e-6 } else { 1e-5 };
                    assert!(err < tol, "{mode:?} {act:?} seed {seed}: {err}");
                }
            }
        }
    }

    #[test]
    fn zero_model_has_zero_error() {
        let (mut params, p) = setup(PeMode::None, Activation::Relu, 0);
        for t in params.tensors_mut() {
            t.fill(0.0);
        }
        let g = backward(&params, &p.x, p.query_label).unwrap();
        assert!(g.d_w_c.iter().all(|v| *v == 0.0));
        assert!(fd_check(&params, &p.x, p.query_label, 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn injected_bug_is_caught() {
        let (params, p) = setup(PeMode::None, Activation::Identity, 4);
        let buggy = |pr: &ModelParams, x: &Mat, y: f64| {
            let mut g = backward(pr, x, y)?;
            g.d_w_v.as_mut_slice()[3] *= 1.5;
            Ok(g)
        };
        assert!(fd_check_with(&params, &p.x, p.query_label, 1e-5, buggy).unwrap() > 1e-3);
    }

    #[test]
    fn batch_gradient_is_mean_of_prompt_gradients() {
        for mode in PeMode::ALL {
            let mut rng = stream_rng(5, 0);
            let params = init_params(&mut rng, 3, 8, 6, mode, 1.0, Activation::Relu);
            let ds = build_dataset(5, 7, 1, 6, 3, InputDist::Gaussian);
            let batch = batch_gradient(&params, ds.train_prompts()).unwrap();
            let singles: Vec<GradBundle> =
                ds.train_prompts().iter().map(|p| backward(&params, &p.x, p.query_label).unwrap()).collect();
            let n = singles.len() as f64;
            for (ti, t) in batch.tensors().iter().enumerate() {
                for (k, v) in t.iter().enumerate() {
                    let sum: f64 = singles.iter().map(|g| g.tensors()[ti][k]).sum::<f64>() / n;
                    assert!((v - sum).abs() < 1e-12 * (1.0 + sum.abs()), "{mode:?} tensor {ti}");
                }
            }
            let loss: f64 = singles.iter().map(|g| g.loss).sum::<f64>() / n;
            assert!((batch.loss - loss).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_reduce_order() {
        let v: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let r = tree_reduce(v, |a, b| format!("({a}{b})")).unwrap();
        assert_eq!(r, "(((01)(23))4)");
    }
}
