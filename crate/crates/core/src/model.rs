//! Single-layer, single-head transformer for in-context regression.
//!
//! ```text
//! H  = X W_in (+ P)
//! A  = RowSoftmax(H W_QK Hᵀ / √d_m)         (RoPE: rotated q/k inner products)
//! H' = σ(A H W_V)
//! ŷ  = W_cᵀ h'_q                             (last row of H')
//! ```
//!
//! [`forward`] evaluates every intermediate and is the reference
//! implementation. [`Compiled`] reassociates the same computation around the
//! query row only: with `Z = [X | I]` (the identity block only when `P` is
//! trainable) and `W = [W_in; P]`, the scores become `z_q M Zᵀ` with
//! `M = W W_QK Wᵀ/√d_m` and the value path becomes `(aᵀZ)(W W_V)`. That is what
//! training and attacks run on.

use std::io::{Read, Write};

use crate::datagen::{read_f64s, read_u32, read_u64, write_f64s};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, row_softmax, softmax_in_place, Mat};
use crate::rng::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PeMode {
    None,
    Trainable,
    Rope,
}

impl PeMode {
    pub const ALL: [PeMode; 3] = [PeMode::None, PeMode::Trainable, PeMode::Rope];

    pub fn name(self) -> &'static str {
        match self {
            PeMode::None => "none",
            PeMode::Trainable => "trainable",
            PeMode::Rope => "rope",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "nope" => Ok(PeMode::None),
            "trainable" | "pe" => Ok(PeMode::Trainable),
            "rope" => Ok(PeMode::Rope),
            other => Err(Error::Format(format!("unknown PE mode '{other}'"))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            PeMode::None => 0,
            PeMode::Trainable => 1,
            PeMode::Rope => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(PeMode::None),
            1 => Ok(PeMode::Trainable),
            2 => Ok(PeMode::Rope),
            _ => Err(Error::Format(format!("unknown PE mode tag {tag}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative; the ReLU subgradient at 0 is 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Format(format!("unknown activation '{other}'"))),
        }
    }
}

/// Query/key weights: combined `W_QK` for additive or no PE, separate for RoPE.
#[derive(Debug, Clone, PartialEq)]
pub enum Attention {
    Combined { w_qk: Mat },
    Rotary { w_q: Mat, w_k: Mat },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    pub d_m: usize,
    pub t_max: usize,
    pub pe_mode: PeMode,
    pub activation: Activation,
    pub w_in: Mat,
    pub attn: Attention,
    pub w_v: Mat,
    pub w_c: Vec<f64>,
    /// `(t_max+1)×d_m`, present only for trainable PE.
    pub p: Option<Mat>,
}

/// Sinusoidal table: `sin(pos/10000^(2i/d_m))` in even columns, `cos` in odd.
pub fn sinusoidal_table(rows: usize, d_m: usize) -> Mat {
    Mat::from_fn(rows, d_m, |pos, c| {
        let i = (c / 2) as f64;
        let angle = pos as f64 / ROPE_BASE.powf(2.0 * i / d_m as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn gaussian_mat(rng: &mut Rng, rows: usize, cols: usize, var: f64) -> Mat {
    let sd = var.sqrt();
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * sd
    })
}

/// Draws fresh parameters.
///
/// Draw order is `W_in`, query/key, `W_V`, `W_c`, so models that differ only
/// in PE mode share `W_in` (and, between none and trainable, every weight).
pub fn init_params(
    rng: &mut Rng,
    d: usize,
    d_m: usize,
    t: usize,
    pe_mode: PeMode,
    pe_init_scale: f64,
    activation: Activation,
) -> ModelParams {
    assert!(d_m >= 1 && t >= 1, "d_m and t must be positive");
    let w_in = gaussian_mat(rng, d + 1, d_m, 1.0 / (d + 1) as f64);
    let var = 1.0 / d_m as f64;
    let attn = match pe_mode {
        PeMode::Rope => {
            let w_q = gaussian_mat(rng, d_m, d_m, var);
            let w_k = gaussian_mat(rng, d_m, d_m, var);
            Attention::Rotary { w_q, w_k }
        }
        _ => Attention::Combined { w_qk: gaussian_mat(rng, d_m, d_m, var) },
    };
    let w_v = gaussian_mat(rng, d_m, d_m, var);
    let w_c = gaussian_mat(rng, 1, d_m, var).into_vec();
    let p = (pe_mode == PeMode::Trainable).then(|| sinusoidal_table(t + 1, d_m).scale(pe_init_scale));
    ModelParams { d, d_m, t_max: t, pe_mode, activation, w_in, attn, w_v, w_c, p }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub h: Mat,
    pub scores: Mat,
    pub attn: Mat,
    pub pre: Mat,
    pub h_out: Mat,
    pub h_q: Vec<f64>,
    pub prediction: f64,
}

/// Rotates consecutive pairs `(2u, 2u+1)` by `pos·θ_u`, `θ_u = base^(-2u/d_m)`.
pub fn rope_rotate(v: &[f64], pos: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    rope_rotate_in_place(&mut out, pos);
    out
}

pub fn rope_rotate_in_place(v: &mut [f64], pos: f64) {
    let n = v.len();
    debug_assert!(n % 2 == 0);
    for u in 0..n / 2 {
        let theta = ROPE_BASE.powf(-2.0 * u as f64 / n as f64);
        let (s, c) = (pos * theta).sin_cos();
        let (a, b) = (v[2 * u], v[2 * u + 1]);
        v[2 * u] = c * a - s * b;
        v[2 * u + 1] = s * a + c * b;
    }
}

/// Precomputed `(cos, sin)` of `pos·θ_u` for positions `0..rows`.
#[derive(Debug, Clone)]
pub(crate) struct RopeTable {
    cos: Mat,
    sin: Mat,
}

impl RopeTable {
    pub(crate) fn new(rows: usize, d_m: usize) -> Self {
        let half = d_m / 2;
        let mut cos = Mat::zeros(rows, half);
        let mut sin = Mat::zeros(rows, half);
        for pos in 0..rows {
            for u in 0..half {
                let theta = ROPE_BASE.powf(-2.0 * u as f64 / d_m as f64);
                let (s, c) = (pos as f64 * theta).sin_cos();
                cos[(pos, u)] = c;
                sin[(pos, u)] = s;
            }
        }
        Self { cos, sin }
    }

    /// Rotates by `+pos`, or by `−pos` when `inverse`.
    #[inline]
    pub(crate) fn rotate(&self, v: &mut [f64], pos: usize, inverse: bool) {
        let (cs, sn) = (self.cos.row(pos), self.sin.row(pos));
        for u in 0..cs.len() {
            let (c, s) = (cs[u], if inverse { -sn[u] } else { sn[u] });
            let (a, b) = (v[2 * u], v[2 * u + 1]);
            v[2 * u] = c * a - s * b;
            v[2 * u + 1] = s * a + c * b;
        }
    }
}

impl ModelParams {
    pub fn validate_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.d + 1 {
            return Err(Error::Shape(format!("prompt has {} columns, model expects {}", x.cols(), self.d + 1)));
        }
        if x.rows() < 2 || x.rows() > self.t_max + 1 {
            return Err(Error::Shape(format!(
                "prompt has {} rows, model accepts 2..={}",
                x.rows(),
                self.t_max + 1
            )));
        }
        Ok(())
    }

    /// Content plus positional embedding `H`.
    pub fn embed(&self, x: &Mat) -> Mat {
        let mut h = x.matmul(&self.w_in);
        if let Some(p) = &self.p {
            for i in 0..h.rows() {
                axpy(1.0, p.row(i), h.row_mut(i));
            }
        }
        h
    }

    /// Trainable tensors in canonical order: `W_in`, `W_QK` (or `W_Q`, `W_K`),
    /// `W_V`, `W_c`, then `P` when present.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.w_in.as_slice()];
        match &self.attn {
            Attention::Combined { w_qk } => out.push(w_qk.as_slice()),
            Attention::Rotary { w_q, w_k } => {
                out.push(w_q.as_slice());
                out.push(w_k.as_slice());
            }
        }
        out.push(self.w_v.as_slice());
        out.push(&self.w_c);
        if let Some(p) = &self.p {
            out.push(p.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.w_in.as_mut_slice()];
        match &mut self.attn {
            Attention::Combined { w_qk } => out.push(w_qk.as_mut_slice()),
            Attention::Rotary { w_q, w_k } => {
                out.push(w_q.as_mut_slice());
                out.push(w_k.as_mut_slice());
            }
        }
        out.push(self.w_v.as_mut_slice());
        out.push(&mut self.w_c);
        if let Some(p) = &mut self.p {
            out.push(p.as_mut_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `‖W_cᵀ‖_{1,∞}`; for a row vector this is the largest absolute entry.
    pub fn w_c_norm(&self) -> f64 {
        self.w_c.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `‖W_Vᵀ‖_{1,∞}`.
    pub fn w_v_norm(&self) -> f64 {
        self.w_v.transpose().norm_1_inf()
    }

    pub fn p_norm(&self) -> f64 {
        self.p.as_ref().map_or(0.0, Mat::frobenius_norm)
    }

    pub fn param_count(&self) -> ParamCount {
        param_count(self.d, self.d_m, self.pe_mode, self.t_max)
    }

    /// Checkpoint layout:
    ///
    /// ```text
    /// magic "ICLM" | version u32 | pe_mode u8 | activation u8 | d d_m t_max: u64
    /// tensors in canonical order, row-major f64
    /// ```
    /// All values little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let act = match self.activation {
            Activation::Relu => 0u8,
            Activation::Identity => 1u8,
        };
        w.write_all(&[self.pe_mode.tag(), act])?;
        for v in [self.d, self.d_m, self.t_max] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for t in self.tensors() {
            write_f64s(&mut w, t)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut tags = [0u8; 2];
        r.read_exact(&mut tags)?;
        let pe_mode = PeMode::from_tag(tags[0])?;
        let activation = match tags[1] {
            0 => Activation::Relu,
            1 => Activation::Identity,
            t => return Err(Error::Format(format!("unknown activation tag {t}"))),
        };
        let d = read_u64(&mut r)? as usize;
        let d_m = read_u64(&mut r)? as usize;
        let t_max = read_u64(&mut r)? as usize;
        let mut mat = |rows: usize, cols: usize| -> Result<Mat> { Mat::from_vec(rows, cols, read_f64s(&mut r, rows * cols)?) };
        let w_in = mat(d + 1, d_m)?;
        let attn = match pe_mode {
            PeMode::Rope => {
                let w_q = mat(d_m, d_m)?;
                let w_k = mat(d_m, d_m)?;
                Attention::Rotary { w_q, w_k }
            }
            _ => Attention::Combined { w_qk: mat(d_m, d_m)? },
        };
        let w_v = mat(d_m, d_m)?;
        let w_c = mat(1, d_m)?.into_vec();
        let p = if pe_mode == PeMode::Trainable { Some(mat(t_max + 1, d_m)?) } else { None };
        Ok(ModelParams { d, d_m, t_max, pe_mode, activation, w_in, attn, w_v, w_c, p })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ICLM";
const CHECKPOINT_VERSION: u32 = 1;

/// Rotated-query/rotated-key scores `⟨R_i q_i, R_j k_j⟩/√d_m` for RoPE models.
pub fn rope_score(params: &ModelParams, h: &Mat) -> Result<Mat> {
    let Attention::Rotary { w_q, w_k } = &params.attn else {
        return Err(Error::Domain("rope_score needs a RoPE model".into()));
    };
    if params.d_m % 2 != 0 {
        return Err(Error::Domain(format!("RoPE needs an even d_m, got {}", params.d_m)));
    }
    let mut q = h.matmul(w_q);
    let mut k = h.matmul(w_k);
    for i in 0..h.rows() {
        rope_rotate_in_place(q.row_mut(i), i as f64);
        rope_rotate_in_place(k.row_mut(i), i as f64);
    }
    Ok(q.matmul_t(&k).scale(1.0 / (params.d_m as f64).sqrt()))
}

/// Full forward pass.
pub fn forward(params: &ModelParams, x: &Mat) -> Result<(f64, ForwardTrace)> {
    params.validate_input(x)?;
    let h = params.embed(x);
    let scores = match &params.attn {
        Attention::Combined { w_qk } => h.matmul(w_qk).matmul_t(&h).scale(1.0 / (params.d_m as f64).sqrt()),
        Attention::Rotary { .. } => rope_score(params, &h)?,
    };
    let attn = row_softmax(&scores);
    let pre = attn.matmul(&h).matmul(&params.w_v);
    let act = params.activation;
    let h_out = Mat::from_fn(pre.rows(), pre.cols(), |i, j| act.apply(pre[(i, j)]));
    let h_q = h_out.row(h_out.rows() - 1).to_vec();
    let prediction = dot(&params.w_c, &h_q);
    Ok((prediction, ForwardTrace { h, scores, attn, pre, h_out, h_q, prediction }))
}

/// Theory-side and actual trainable parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// `d·d_m + d_m²`
    pub theory: usize,
    pub actual: usize,
}

pub fn param_count(d: usize, d_m: usize, pe_mode: PeMode, t: usize) -> ParamCount {
    let theory = d * d_m + d_m * d_m;
    let qk = if pe_mode == PeMode::Rope { 2 * d_m * d_m } else { d_m * d_m };
    let pe = if pe_mode == PeMode::Trainable { (t + 1) * d_m } else { 0 };
    let actual = (d + 1) * d_m + qk + d_m * d_m + d_m + pe;
    ParamCount { theory, actual }
}

/// Score kernel of a compiled model.
#[derive(Debug, Clone)]
pub(crate) enum Kernel {
    /// `M = W W_QK Wᵀ / √d_m` (`p×p`), kept with `W W_QK` (`p×d_m`).
    Bilinear { m: Mat, w_qk: Mat },
    /// `W W_Q` and `W W_K`, each `p×d_m`.
    Rotary { a_q: Mat, a_k: Mat },
}

/// Parameters folded for fast query-row evaluation at a fixed context length.
///
/// Augmented inputs are `z_j = [x_j, e_j]` where the one-hot block exists only
/// for trainable PE; the augmented read-in is `W = [W_in; P[..t+1]]`.
#[derive(Debug, Clone)]
pub struct Compiled<'a> {
    pub(crate) params: &'a ModelParams,
    pub(crate) t: usize,
    /// `W`, `p×d_m`.
    pub(crate) w_aug: Mat,
    pub(crate) kernel: Kernel,
    /// `W W_V`, `p×d_m`.
    pub(crate) value: Mat,
    pub(crate) rope: Option<RopeTable>,
}

/// Everything the backward pass needs from one query-row forward.
#[derive(Debug, Clone)]
pub(crate) struct QueryPass {
    pub attn: Vec<f64>,
    /// Aggregated input `c = Σ a_j z_j`, length `p`.
    pub ctx: Vec<f64>,
    pub pre: Vec<f64>,
    pub h_q: Vec<f64>,
    pub prediction: f64,
    /// Bilinear: `u = z_q M`. Rotary: rotated query.
    pub query_vec: Vec<f64>,
    /// Rotary only: rotated keys, `(t+1)×d_m`.
    pub keys: Option<Mat>,
}

impl<'a> Compiled<'a> {
    pub fn new(params: &'a ModelParams, t: usize) -> Result<Self> {
        if t == 0 || t > params.t_max {
            return Err(Error::Shape(format!("context length {t} outside 1..={}", params.t_max)));
        }
        if params.pe_mode == PeMode::Rope && params.d_m % 2 != 0 {
            return Err(Error::Domain(format!("RoPE needs an even d_m, got {}", params.d_m)));
        }
        let w_aug = match &params.p {
            Some(p) => {
                let mut w = Mat::zeros(params.d + 1 + t + 1, params.d_m);
                w.as_mut_slice()[..params.w_in.as_slice().len()].copy_from_slice(params.w_in.as_slice());
                let off = params.w_in.as_slice().len();
                w.as_mut_slice()[off..].copy_from_slice(&p.as_slice()[..(t + 1) * params.d_m]);
                w
            }
            None => params.w_in.clone(),
        };
        let kernel = match &params.attn {
            Attention::Combined { w_qk } => {
                let s = 1.0 / (params.d_m as f64).sqrt();
                let wk = w_aug.matmul(w_qk);
                Kernel::Bilinear { m: wk.matmul_t(&w_aug).scale(s), w_qk: wk }
            }
            Attention::Rotary { w_q, w_k } => Kernel::Rotary { a_q: w_aug.matmul(w_q), a_k: w_aug.matmul(w_k) },
        };
        let value = w_aug.matmul(&params.w_v);
        let rope = matches!(kernel, Kernel::Rotary { .. }).then(|| RopeTable::new(t + 1, params.d_m));
        Ok(Self { params, t, w_aug, kernel, value, rope })
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Width of the augmented input.
    #[inline]
    pub(crate) fn width(&self) -> usize {
        self.w_aug.rows()
    }

    #[inline]
    fn has_positions(&self) -> bool {
        self.params.p.is_some()
    }

    /// `z_j · v` for row `j` of the prompt.
    #[inline]
    pub(crate) fn z_dot(&self, x: &Mat, j: usize, v: &[f64]) -> f64 {
        let d1 = self.params.d + 1;
        let mut s = dot(x.row(j), &v[..d1]);
        if self.has_positions() {
            s += v[d1 + j];
        }
        s
    }

    /// `out += a·z_j`.
    #[inline]
    pub(crate) fn z_axpy(&self, a: f64, x: &Mat, j: usize, out: &mut [f64]) {
        let d1 = self.params.d + 1;
        axpy(a, x.row(j), &mut out[..d1]);
        if self.has_positions() {
            out[d1 + j] += a;
        }
    }

    /// `z_j · A` for a `p×n` matrix.
    fn z_mul(&self, x: &Mat, j: usize, a: &Mat) -> Vec<f64> {
        let mut out = vec![0.0; a.cols()];
        self.z_mul_into(x, j, a, &mut out);
        out
    }

    /// `out = z_j · A`.
    fn z_mul_into(&self, x: &Mat, j: usize, a: &Mat, out: &mut [f64]) {
        let d1 = self.params.d + 1;
        out.fill(0.0);
        for (k, &xk) in x.row(j).iter().enumerate() {
            axpy(xk, a.row(k), out);
        }
        if self.has_positions() {
            axpy(1.0, a.row(d1 + j), out);
        }
    }

    pub(crate) fn check(&self, x: &Mat) -> Result<()> {
        if x.rows() != self.t + 1 || x.cols() != self.params.d + 1 {
            return Err(Error::Shape(format!(
                "prompt is {}x{}, compiled model expects {}x{}",
                x.rows(),
                x.cols(),
                self.t + 1,
                self.params.d + 1
            )));
        }
        Ok(())
    }

    pub(crate) fn query_pass(&self, x: &Mat) -> QueryPass {
        let n = self.t + 1;
        let q_row = self.t;
        let d_m = self.params.d_m;
        let (mut scores, query_vec, keys) = match &self.kernel {
            Kernel::Bilinear { m, .. } => {
                let u = self.z_mul(x, q_row, m);
                let scores: Vec<f64> = (0..n).map(|j| self.z_dot(x, j, &u)).collect();
                (scores, u, None)
            }
            Kernel::Rotary { a_q, a_k } => {
                let table = self.rope.as_ref().expect("rotary kernel has a table");
                let mut q = self.z_mul(x, q_row, a_q);
                table.rotate(&mut q, q_row, false);
                let mut keys = Mat::zeros(n, d_m);
                for j in 0..n {
                    let k = keys.row_mut(j);
                    self.z_mul_into(x, j, a_k, k);
                    table.rotate(k, j, false);
                }
                let s = 1.0 / (d_m as f64).sqrt();
                let scores = (0..n).map(|j| dot(&q, keys.row(j)) * s).collect();
                (scores, q, Some(keys))
            }
        };
        softmax_in_place(&mut scores);
        let attn = scores;
        let mut ctx = vec![0.0; self.width()];
        for (j, &a) in attn.iter().enumerate() {
            self.z_axpy(a, x, j, &mut ctx);
        }
        let pre = self.value.vec_mul(&ctx);
        let act = self.params.activation;
        let h_q: Vec<f64> = pre.iter().map(|&v| act.apply(v)).collect();
        let prediction = dot(&self.params.w_c, &h_q);
        QueryPass { attn, ctx, pre, h_q, prediction, query_vec, keys }
    }

    /// Query prediction `ŷ_q`.
    pub fn predict(&self, x: &Mat) -> Result<f64> {
        self.check(x)?;
        Ok(self.query_pass(x).prediction)
    }

    /// Query-row attention weights.
    pub fn query_attention(&self, x: &Mat) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.query_pass(x).attn)
    }
}

/// A scalar predictor on prompts with a differentiable squared query loss.
///
/// Shapes are assumed valid; callers check them once up front.
pub trait Predictor: Sync {
    fn predict(&self, x: &Mat) -> f64;
    /// `(ŷ_q − y)²` and its gradient with respect to `X`.
    fn loss_and_grad(&self, x: &Mat, y: f64) -> (f64, Mat);
}

impl Predictor for Compiled<'_> {
    fn predict(&self, x: &Mat) -> f64 {
        debug_assert!(self.check(x).is_ok());
        self.query_pass(x).prediction
    }

    fn loss_and_grad(&self, x: &Mat, y: f64) -> (f64, Mat) {
        debug_assert!(self.check(x).is_ok());
        let pg = crate::grad::prompt_backward(self, x, y, false, true);
        (pg.loss, pg.d_x.expect("requested"))
    }
}

/// Convenience wrapper: compile for the prompt's length and predict.
pub fn predict(params: &ModelParams, x: &Mat) -> Result<f64> {
    params.validate_input(x)?;
    Compiled::new(params, x.rows() - 1)?.predict(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_prompt, sample_task, InputDist};
    use crate::linalg::norm2;
    use crate::rng::stream_rng;

    fn prompt(seed: u64, t: usize, d: usize) -> Mat {
        let mut rng = stream_rng(seed, 77);
        let task = sample_task(&mut rng, d);
        sample_prompt(&mut rng, &task, t, d, InputDist::Gaussian).x
    }

    #[test]
    fn init_shapes_and_pe_scale() {
        let mut rng = stream_rng(0, 0);
        let none = init_params(&mut rng, 5, 16, 10, PeMode::None, 25.0, Activation::Relu);
        assert!(none.p.is_none());
        let mut rng = stream_rng(0, 0);
        let pe = init_params(&mut rng, 5, 16, 10, PeMode::Trainable, 25.0, Activation::Relu);
        let table = sinusoidal_table(11, 16);
        assert_eq!(pe.p.as_ref().unwrap().shape(), (11, 16));
        assert_eq!(pe.p_norm(), table.scale(25.0).frobenius_norm());
        assert!((pe.p_norm() - 25.0 * table.frobenius_norm()).abs() < 1e-9);
        // shared draws between none and trainable
        assert_eq!(none.w_in, pe.w_in);
        assert_eq!(none.attn, pe.attn);
        assert_eq!(none.w_c, pe.w_c);
        let mut rng = stream_rng(0, 0);
        let again = init_params(&mut rng, 5, 16, 10, PeMode::Trainable, 25.0, Activation::Relu);
        assert_eq!(pe, again);
    }

    #[test]
    fn zero_qk_gives_uniform_attention_hand_computed() {
        // d=1, d_m=2, t=2: X is 3x2
        let params = ModelParams {
            d: 1,
            d_m: 2,
            t_max: 2,
            pe_mode: PeMode::None,
            activation: Activation::Relu,
            w_in: Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]),
            attn: Attention::Combined { w_qk: Mat::zeros(2, 2) },
            w_v: Mat::from_rows(&[vec![1.0, -1.0], vec![0.5, 1.0]]),
            w_c: vec![2.0, 3.0],
            p: None,
        };
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![-2.0, 1.0], vec![4.0, 0.0]]);
        // H = [[1,4],[-2,2],[4,0]], mean(H) = [1, 2]
        // mean(H) W_V = [1 + 1, -1 + 2] = [2, 1] -> relu -> [2, 1]; y = 4 + 3 = 7
        let (y, trace) = forward(&params, &x).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((trace.attn[(r, c)] - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert!((y - 7.0).abs() < 1e-12);
        assert!((predict(&params, &x).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn zero_pe_matches_no_pe() {
        let mut rng = stream_rng(3, 0);
        let mut pe = init_params(&mut rng, 3, 8, 6, PeMode::Trainable, 25.0, Activation::Relu);
        pe.p = Some(Mat::zeros(7, 8));
        let mut nope = pe.clone();
        nope.p = None;
        nope.pe_mode = PeMode::None;
        let x = prompt(1, 6, 3);
        assert_eq!(forward(&pe, &x).unwrap().0, forward(&nope, &x).unwrap().0);
        assert!((predict(&pe, &x).unwrap() - predict(&nope, &x).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn no_pe_is_permutation_invariant() {
        let mut rng = stream_rng(4, 0);
        let params = init_params(&mut rng, 3, 8, 6, PeMode::None, 1.0, Activation::Relu);
        let x = prompt(2, 6, 3);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.row_mut(dst).copy_from_slice(x.row(src));
        }
        let a = forward(&params, &x).unwrap().0;
        let b = forward(&params, &xp).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn fast_path_matches_reference() {
        for mode in PeMode::ALL {
            for act in [Activation::Relu, Activation::Identity] {
                let mut rng = stream_rng(9, 1);
                let params = init_params(&mut rng, 4, 8, 7, mode, 1.0, act);
                let x = prompt(5, 7, 4);
                let (y_ref, trace) = forward(&params, &x).unwrap();
                let c = Compiled::new(&params, 7).unwrap();
                let y = c.predict(&x).unwrap();
                assert!((y - y_ref).abs() < 1e-12 * (1.0 + y_ref.abs()), "{mode:?} {y} {y_ref}");
                let a = c.query_attention(&x).unwrap();
                for j in 0..8 {
                    assert!((a[j] - trace.attn[(7, j)]).abs() < 1e-12);
                }
                for r in 0..8 {
                    assert!((trace.attn.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn readout_is_linear_in_w_c() {
        let mut rng = stream_rng(2, 0);
        let params = init_params(&mut rng, 3, 8, 6, PeMode::Rope, 1.0, Activation::Relu);
        let x = prompt(6, 6, 3);
        let y = forward(&params, &x).unwrap().0;
        let mut scaled = params.clone();
        for w in &mut scaled.w_c {
            *w *= 4.0;
        }
        assert_eq!(forward(&scaled, &x).unwrap().0, 4.0 * y);
    }

    #[test]
    fn rope_position_zero_is_identity_and_rotations_are_isometries() {
        let v: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos()).collect();
        assert_eq!(rope_rotate(&v, 0.0), v);
        for p in [1.0, 5.0, 31.0] {
            assert!((norm2(&rope_rotate(&v, p)) - norm2(&v)).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_rejects_odd_width() {
        let mut rng = stream_rng(2, 0);
        let mut params = init_params(&mut rng, 3, 8, 6, PeMode::Rope, 1.0, Activation::Relu);
        params.d_m = 7;
        assert!(rope_score(&params, &Mat::zeros(3, 8)).is_err());
        let mut rng = stream_rng(2, 0);
        let nope = init_params(&mut rng, 3, 8, 6, PeMode::None, 1.0, Activation::Relu);
        assert!(rope_score(&nope, &Mat::zeros(3, 8)).is_err());
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count(5, 64, PeMode::None, 10).theory, 4416);
        let none = param_count(5, 64, PeMode::None, 10).actual;
        assert_eq!(none, 6 * 64 + 2 * 64 * 64 + 64);
        assert_eq!(param_count(5, 64, PeMode::Trainable, 10).actual, none + 11 * 64);
        assert_eq!(param_count(5, 64, PeMode::Rope, 10).actual, none + 64 * 64);
        let mut rng = stream_rng(0, 0);
        let p = init_params(&mut rng, 5, 64, 10, PeMode::Trainable, 25.0, Activation::Relu);
        let n: usize = p.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(n, p.param_count().actual);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for mode in PeMode::ALL {
            let mut rng = stream_rng(12, 0);
            let p = init_params(&mut rng, 3, 6, 5, mode, 25.0, Activation::Identity);
            let mut buf = Vec::new();
            p.write_checkpoint(&mut buf).unwrap();
            let q = ModelParams::read_checkpoint(&buf[..]).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = stream_rng(0, 0);
        let p = init_params(&mut rng, 3, 8, 6, PeMode::None, 1.0, Activation::Relu);
        assert!(forward(&p, &Mat::zeros(7, 5)).is_err());
        assert!(forward(&p, &Mat::zeros(9, 4)).is_err());
    }
}
