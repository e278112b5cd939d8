//! The `theory` report: every bound expression evaluated at one parameter
//! set, as `name,value,error,inputs` rows.
//!
//! `inputs` lists the arguments as `key=value` pairs joined by `;`, so each
//! row can be re-evaluated from its own text.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail};
use icl_pe::model::{param_count, PeMode};
use icl_pe::theory::{
    arc_bound_nope, arc_bound_pe, covering_log_bound, delta_cov_bound, dudley_quadrature, l_h, m_y_bound, phi,
    rc_bound_nope, rc_bound_pe, TheoryParams,
};

use crate::config::parse_kv;

pub const CSV_HEADER: &str = "name,value,error,inputs";

/// Report inputs: the bound parameters plus the arguments of the helper
/// expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportParams {
    pub bound: TheoryParams,
    pub c_mu: f64,
    pub delta: f64,
    /// Diameter fed to the covering and entropy-integral rows.
    pub diam: f64,
    pub k: f64,
    pub cover_eps: f64,
}

impl Default for ReportParams {
    fn default() -> Self {
        let bound = TheoryParams::default();
        Self {
            diam: 2.0 * (bound.r / bound.gamma_eff).sqrt(),
            bound,
            c_mu: 1.0,
            delta: 0.05,
            k: 1.0,
            cover_eps: 0.1,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| anyhow!("bad value for `{key}`: {v:?}: {e}"))
}

impl ReportParams {
    /// Reads `key = value` text. `big_d` follows `d`, `d_m` and `t` unless
    /// given, `m_y` follows `c_mu` and `delta`, and `diam` follows `r` and
    /// `gamma_eff`.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let kv = parse_kv(text)?;
        let mut p = Self::default();
        let b = &mut p.bound;
        for (k, v) in &kv {
            match k.as_str() {
                "d" => b.d = num(k, v)?,
                "t" => b.t = num(k, v)?,
                "m" => b.m = num(k, v)?,
                "d_m" => b.d_m = num(k, v)?,
                "big_d" => b.big_d = num(k, v)?,
                "r" => b.r = num(k, v)?,
                "gamma_eff" => b.gamma_eff = num(k, v)?,
                "c_pe" => b.c_pe = num(k, v)?,
                "l_f" => b.l_f = num(k, v)?,
                "l_x" => b.l_x = num(k, v)?,
                "m_out" => b.m_out = num(k, v)?,
                "m_y" => b.m_y = num(k, v)?,
                "eps" => b.eps = num(k, v)?,
                "c_mu" => p.c_mu = num(k, v)?,
                "delta" => p.delta = num(k, v)?,
                "diam" => p.diam = num(k, v)?,
                "k" => p.k = num(k, v)?,
                "cover_eps" => p.cover_eps = num(k, v)?,
                other => bail!("unknown theory parameter `{other}`"),
            }
        }
        if !kv.contains_key("big_d") {
            p.bound.big_d = param_count(p.bound.d, p.bound.d_m, PeMode::None, p.bound.t).theory;
        }
        if !kv.contains_key("m_y") {
            p.bound.m_y = m_y_bound(p.c_mu, p.delta)?;
        }
        if !kv.contains_key("diam") {
            p.diam = 2.0 * (p.bound.r / p.bound.gamma_eff).sqrt();
        }
        Ok(p)
    }

    fn value(&self, key: &str) -> f64 {
        let b = &self.bound;
        match key {
            "d" => b.d as f64,
            "t" => b.t as f64,
            "m" => b.m as f64,
            "d_m" => b.d_m as f64,
            "big_d" => b.big_d as f64,
            "r" => b.r,
            "gamma_eff" => b.gamma_eff,
            "c_pe" => b.c_pe,
            "l_f" => b.l_f,
            "l_x" => b.l_x,
            "m_out" => b.m_out,
            "m_y" => b.m_y,
            "eps" => b.eps,
            "c_mu" => self.c_mu,
            "delta" => self.delta,
            "diam" => self.diam,
            "k" => self.k,
            "cover_eps" => self.cover_eps,
            _ => unreachable!("unknown key {key}"),
        }
    }
}

/// Report rows and the arguments each one echoes.
pub const ROWS: [(&str, &[&str]); 10] = [
    ("phi", &["eps", "t", "d"]),
    ("delta_cov_bound", &["eps", "t", "d"]),
    ("l_h", &["m_out", "m_y", "l_x", "eps"]),
    ("m_y_bound", &["c_mu", "delta"]),
    ("covering_log_bound", &["big_d", "diam", "cover_eps"]),
    ("dudley_quadrature", &["diam", "k"]),
    ("rc_bound_nope", &["l_f", "r", "big_d", "t", "m"]),
    ("rc_bound_pe", &["l_f", "r", "big_d", "t", "m", "c_pe", "d"]),
    ("arc_bound_nope", &["l_f", "r", "big_d", "t", "m", "d", "eps", "m_out", "m_y", "l_x"]),
    ("arc_bound_pe", &["l_f", "r", "big_d", "t", "m", "d", "eps", "m_out", "m_y", "l_x", "c_pe"]),
];

fn count(inputs: &BTreeMap<String, f64>, key: &str) -> anyhow::Result<usize> {
    let v = inputs[key];
    if !(v >= 0.0) || v.fract() != 0.0 {
        bail!("`{key}` must be a non-negative integer, got {v}");
    }
    Ok(v as usize)
}

/// Evaluates one row from its echoed inputs.
pub fn evaluate(name: &str, inputs: &BTreeMap<String, f64>) -> anyhow::Result<f64> {
    let (_, keys) = ROWS.iter().find(|(n, _)| *n == name).ok_or_else(|| anyhow!("unknown row `{name}`"))?;
    if let Some(k) = keys.iter().find(|k| !inputs.contains_key(**k)) {
        bail!("row `{name}` is missing input `{k}`");
    }
    let g = |k: &str| inputs[k];
    let bound = || -> anyhow::Result<TheoryParams> {
        let mut p = TheoryParams::default();
        for k in keys.iter().copied() {
            match k {
                "t" => p.t = count(inputs, k)?,
                "m" => p.m = count(inputs, k)?,
                "d" => p.d = count(inputs, k)?,
                "big_d" => p.big_d = count(inputs, k)?,
                "l_f" => p.l_f = g(k),
                "r" => p.r = g(k),
                "c_pe" => p.c_pe = g(k),
                "eps" => p.eps = g(k),
                "m_out" => p.m_out = g(k),
                "m_y" => p.m_y = g(k),
                "l_x" => p.l_x = g(k),
                _ => unreachable!("{k} is not a bound parameter"),
            }
        }
        Ok(p)
    };
    let v = match name {
        "phi" => phi(g("eps"), count(inputs, "t")?, count(inputs, "d")?)?,
        "delta_cov_bound" => delta_cov_bound(g("eps"), count(inputs, "t")?, count(inputs, "d")?)?,
        "l_h" => l_h(g("m_out"), g("m_y"), g("l_x"), g("eps"))?,
        "m_y_bound" => m_y_bound(g("c_mu"), g("delta"))?,
        "covering_log_bound" => covering_log_bound(g("big_d"), g("diam"), g("cover_eps"))?,
        "dudley_quadrature" => dudley_quadrature(g("diam"), g("k"))?,
        "rc_bound_nope" => rc_bound_nope(&bound()?)?,
        "rc_bound_pe" => rc_bound_pe(&bound()?)?,
        "arc_bound_nope" => arc_bound_nope(&bound()?)?,
        "arc_bound_pe" => arc_bound_pe(&bound()?)?,
        _ => unreachable!("row list checked above"),
    };
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    /// `Err` holds the domain error text.
    pub value: Result<f64, String>,
    pub inputs: BTreeMap<String, f64>,
}

impl ReportRow {
    pub fn to_csv_row(&self) -> String {
        let inputs: Vec<String> = self.inputs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let (value, error) = match &self.value {
            Ok(v) => (format!("{v:e}"), String::new()),
            Err(e) => ("NaN".to_string(), e.replace([',', '\n'], ";")),
        };
        format!("{},{value},{error},{}", self.name, inputs.join(";"))
    }

    pub fn parse_csv_row(line: &str) -> anyhow::Result<Self> {
        let f: Vec<&str> = line.trim_end().splitn(4, ',').collect();
        if f.len() != 4 {
            bail!("expected 4 fields: {line:?}");
        }
        let mut inputs = BTreeMap::new();
        for pair in f[3].split(';').filter(|s| !s.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| anyhow!("bad input pair {pair:?}"))?;
            inputs.insert(k.to_string(), num::<f64>(k, v)?);
        }
        let value = if f[2].is_empty() { Ok(num::<f64>("value", f[1])?) } else { Err(f[2].to_string()) };
        Ok(Self { name: f[0].to_string(), value, inputs })
    }
}

pub fn report(params: &ReportParams) -> Vec<ReportRow> {
    ROWS.iter()
        .map(|(name, keys)| {
            let inputs: BTreeMap<String, f64> = keys.iter().map(|k| (k.to_string(), params.value(k))).collect();
            let value = evaluate(name, &inputs).map_err(|e| e.to_string());
            ReportRow { name: name.to_string(), value, inputs }
        })
        .collect()
}

pub fn render(rows: &[ReportRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

/// Re-parses a rendered report and re-evaluates every row. Returns the
/// largest absolute disagreement; a row that errs on one side only fails.
pub fn verify(text: &str) -> anyhow::Result<f64> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        bail!("missing report header");
    }
    let mut worst = 0.0f64;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let row = ReportRow::parse_csv_row(line)?;
        match (&row.value, evaluate(&row.name, &row.inputs)) {
            (Ok(a), Ok(b)) => worst = worst.max((a - b).abs()),
            (Err(_), Err(_)) => {}
            (a, b) => bail!("row `{}` changed status on re-evaluation: {a:?} vs {b:?}", row.name),
        }
    }
    Ok(worst)
}
