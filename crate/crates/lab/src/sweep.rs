//! The experiment grid: every `(pe_mode, t, seed)` cell is trained once and
//! evaluated clean and under each attack budget.
//!
//! Cells run on the rayon pool. Their rows are appended to the run's CSVs in
//! grid order as soon as every earlier cell has finished, so the files are
//! identical whatever the thread count.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context};
use icl_pe::analysis::{attack_diagnostics, evaluate_gap, write_gap_csv, AttackDiagnostics, GapRecord};
use icl_pe::attack::AttackSpec;
use icl_pe::datagen::build_dataset;
use icl_pe::model::{init_params, Compiled, PeMode};
use icl_pe::rng::{stream, stream_rng};
use icl_pe::train::{train, TrainConfig};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::svg::{Chart, Point, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub pe_mode: PeMode,
    pub t: usize,
    pub seed: u64,
}

impl Cell {
    pub fn tag(&self) -> String {
        format!("{}_t{}_seed{}", self.pe_mode.name(), self.t, self.seed)
    }
}

/// Grid order: mode, then context length, then seed.
pub fn cells(config: &RunConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &pe_mode in &config.pe_modes {
        for &t in &config.t_list {
            for &seed in &config.seeds {
                out.push(Cell { pe_mode, t, seed });
            }
        }
    }
    out
}

/// Property checks of one attack batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackCheck {
    pub cell: Cell,
    pub eps: f64,
    /// `train` or `val`.
    pub split: String,
    pub diag: AttackDiagnostics,
}

impl AttackCheck {
    pub const CSV_HEADER: &'static str =
        "pe_mode,t,seed,eps,split,n,budget_excess,label_changes,loss_decreases,cov_excess,l_x,surrogate_violations";

    pub fn to_csv_row(&self) -> String {
        let d = &self.diag;
        format!(
            "{},{},{},{},{},{},{:e},{},{},{:e},{:e},{}",
            self.cell.pe_mode.name(),
            self.cell.t,
            self.cell.seed,
            self.eps,
            self.split,
            d.n,
            d.budget_excess,
            d.label_changes,
            d.loss_decreases,
            d.cov_excess,
            d.l_x,
            d.surrogate_violations
        )
    }

    pub fn parse_csv_row(line: &str) -> anyhow::Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 12 {
            bail!("expected 12 fields, got {}: {line:?}", f.len());
        }
        let cell = Cell { pe_mode: PeMode::parse(f[0])?, t: f[1].parse()?, seed: f[2].parse()? };
        let diag = AttackDiagnostics {
            n: f[5].parse()?,
            budget_excess: f[6].parse()?,
            label_changes: f[7].parse()?,
            loss_decreases: f[8].parse()?,
            cov_excess: f[9].parse()?,
            l_x: f[10].parse()?,
            surrogate_violations: f[11].parse()?,
        };
        Ok(Self { cell, eps: f[3].parse()?, split: f[4].to_string(), diag })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    /// `None` on success, otherwise why the cell failed.
    pub failure: Option<String>,
    pub initial_loss: f64,
    pub loss_curve: Vec<f64>,
    /// One record per budget, clean first. Failed cells carry NaN risks.
    pub records: Vec<GapRecord>,
    pub checks: Vec<AttackCheck>,
}

impl CellResult {
    pub const CSV_HEADER: &'static str = "pe_mode,t,seed,status,initial_loss,final_loss,message";

    pub fn to_csv_row(&self) -> String {
        let final_loss = self.loss_curve.last().copied().unwrap_or(f64::NAN);
        let (status, msg) = match &self.failure {
            None => ("ok", String::new()),
            Some(m) => ("failed", m.replace([',', '\n'], ";")),
        };
        format!(
            "{},{},{},{status},{:e},{:e},{msg}",
            self.cell.pe_mode.name(),
            self.cell.t,
            self.cell.seed,
            self.initial_loss,
            final_loss
        )
    }
}

fn attack_spec(config: &RunConfig, eps: f64) -> AttackSpec {
    AttackSpec { eps, k: config.attack_k, alpha: config.attack_alpha_ratio * eps, freeze_query: config.freeze_query }
}

/// Trains and evaluates one cell. Errors are folded into the result.
pub fn run_cell(config: &RunConfig, cell: Cell) -> CellResult {
    let mut result = CellResult {
        cell,
        failure: None,
        initial_loss: f64::NAN,
        loss_curve: Vec::new(),
        records: Vec::new(),
        checks: Vec::new(),
    };
    if let Err(e) = fill_cell(config, &mut result) {
        result.failure = Some(e.to_string());
    }
    if result.failure.is_none() && result.records.iter().any(|r| !r.is_finite()) {
        result.failure = Some("non-finite risk".into());
    }
    if result.failure.is_some() {
        result.records = config
            .budgets()
            .into_iter()
            .map(|eps| GapRecord::new(cell.t, eps, cell.pe_mode, cell.seed, eps > 0.0, f64::NAN, f64::NAN))
            .collect();
        result.checks.clear();
    }
    result
}

fn fill_cell(config: &RunConfig, out: &mut CellResult) -> icl_pe::Result<()> {
    let Cell { pe_mode, t, seed } = out.cell;
    let ds = build_dataset(seed, config.n_train, config.n_val, t, config.d, config.dist);
    let mut rng = stream_rng(seed, stream::INIT);
    let init = init_params(&mut rng, config.d, config.d_m, t, pe_mode, config.pe_init_scale, config.activation);
    let train_config = TrainConfig { lr: config.lr, epochs: config.epochs, seed, ..TrainConfig::default() };
    let trained = train(ds.train_prompts(), init, &train_config)?;
    out.initial_loss = trained.initial_loss;
    out.loss_curve = trained.loss_curve.clone();
    let params = trained.params;
    let val = ds.val_prompts(config.eval_seed);
    let compiled = Compiled::new(&params, t)?;
    for eps in config.budgets() {
        if eps == 0.0 {
            out.records.push(evaluate_gap(&params, &ds, &val, None)?.record);
            continue;
        }
        let spec = attack_spec(config, eps);
        let eval = evaluate_gap(&params, &ds, &val, Some(&spec))?;
        for (split, prompts, attacks) in
            [("train", ds.train_prompts(), &eval.train_attacks), ("val", &val[..], &eval.val_attacks)]
        {
            let diag = attack_diagnostics(&compiled, prompts, attacks, &spec, config.lx_safety)?;
            out.checks.push(AttackCheck { cell: out.cell, eps, split: split.into(), diag });
        }
        out.records.push(eval.record);
    }
    Ok(())
}

/// Mean/std/min/max of the gap over seeds for one `(pe_mode, eps, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggRow {
    pub pe_mode: PeMode,
    pub eps: f64,
    pub t: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_gap: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std_gap: f64,
    pub min_gap: f64,
    pub max_gap: f64,
    pub mean_train_risk: f64,
    pub mean_val_risk: f64,
}

impl AggRow {
    pub const CSV_HEADER: &'static str =
        "pe_mode,eps,t,n_ok,n_failed,mean_gap,std_gap,min_gap,max_gap,mean_train_risk,mean_val_risk";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.pe_mode.name(),
            self.eps,
            self.t,
            self.n_ok,
            self.n_failed,
            self.mean_gap,
            self.std_gap,
            self.min_gap,
            self.max_gap,
            self.mean_train_risk,
            self.mean_val_risk
        )
    }

    pub fn parse_csv_row(line: &str) -> anyhow::Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            bail!("expected 11 fields, got {}: {line:?}", f.len());
        }
        Ok(Self {
            pe_mode: PeMode::parse(f[0])?,
            eps: f[1].parse()?,
            t: f[2].parse()?,
            n_ok: f[3].parse()?,
            n_failed: f[4].parse()?,
            mean_gap: f[5].parse()?,
            std_gap: f[6].parse()?,
            min_gap: f[7].parse()?,
            max_gap: f[8].parse()?,
            mean_train_risk: f[9].parse()?,
            mean_val_risk: f[10].parse()?,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Aggregates records in config order (mode, budget, t). Non-finite records
/// count as failed and are left out of the statistics.
pub fn aggregate(config: &RunConfig, records: &[GapRecord]) -> Vec<AggRow> {
    let mut out = Vec::new();
    for &pe_mode in &config.pe_modes {
        for eps in config.budgets() {
            for &t in &config.t_list {
                let group: Vec<&GapRecord> =
                    records.iter().filter(|r| r.pe_mode == pe_mode && r.eps == eps && r.t == t).collect();
                let ok: Vec<&GapRecord> = group.iter().copied().filter(|r| r.is_finite()).collect();
                let gaps: Vec<f64> = ok.iter().map(|r| r.gap).collect();
                let (mean_gap, std_gap, min_gap, max_gap, tr, va) = if gaps.is_empty() {
                    (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
                } else {
                    let m = mean(&gaps);
                    let std = if gaps.len() > 1 {
                        (gaps.iter().map(|g| (g - m).powi(2)).sum::<f64>() / (gaps.len() - 1) as f64).sqrt()
                    } else {
                        0.0
                    };
                    let tr: Vec<f64> = ok.iter().map(|r| r.train_risk).collect();
                    let va: Vec<f64> = ok.iter().map(|r| r.val_risk).collect();
                    (
                        m,
                        std,
                        gaps.iter().copied().fold(f64::INFINITY, f64::min),
                        gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        mean(&tr),
                        mean(&va),
                    )
                };
                out.push(AggRow {
                    pe_mode,
                    eps,
                    t,
                    n_ok: ok.len(),
                    n_failed: group.len() - ok.len(),
                    mean_gap,
                    std_gap,
                    min_gap,
                    max_gap,
                    mean_train_risk: tr,
                    mean_val_risk: va,
                });
            }
        }
    }
    out
}

/// Clean mean gaps as a `t × pe_mode` table.
pub fn write_table_csv<W: Write>(mut w: W, config: &RunConfig, agg: &[AggRow]) -> std::io::Result<()> {
    let names: Vec<&str> = config.pe_modes.iter().map(|m| m.name()).collect();
    writeln!(w, "t,{}", names.join(","))?;
    for &t in &config.t_list {
        let cells: Vec<String> = config
            .pe_modes
            .iter()
            .map(|&m| {
                agg.iter()
                    .find(|r| r.pe_mode == m && r.eps == 0.0 && r.t == t)
                    .map_or("NaN".to_string(), |r| format!("{:e}", r.mean_gap))
            })
            .collect();
        writeln!(w, "{t},{}", cells.join(","))?;
    }
    Ok(())
}

fn series(label: String, rows: Vec<&AggRow>) -> Series {
    Series {
        label,
        points: rows
            .into_iter()
            .map(|r| Point { x: r.t as f64, mean: r.mean_gap, min: r.min_gap, max: r.max_gap })
            .collect(),
    }
}

/// Figure name, its aggregate rows and its chart.
pub fn figures(config: &RunConfig, agg: &[AggRow]) -> Vec<(String, Vec<AggRow>, Chart)> {
    let mut out = Vec::new();
    let clean: Vec<AggRow> = agg.iter().filter(|r| r.eps == 0.0).cloned().collect();
    let chart = Chart {
        title: "Mean generalization gap vs context length".into(),
        x_label: "context length t".into(),
        y_label: "val risk - train risk".into(),
        series: config
            .pe_modes
            .iter()
            .map(|&m| series(m.name().to_string(), clean.iter().filter(|r| r.pe_mode == m).collect()))
            .collect(),
    };
    out.push(("fig_clean_gap".to_string(), clean, chart));
    if config.budgets().len() > 1 {
        for &m in &config.pe_modes {
            let rows: Vec<AggRow> = agg.iter().filter(|r| r.pe_mode == m).cloned().collect();
            let chart = Chart {
                title: format!("Attacked gap vs context length ({})", m.name()),
                x_label: "context length t".into(),
                y_label: "attacked val risk - attacked train risk".into(),
                series: config
                    .budgets()
                    .into_iter()
                    .map(|eps| series(format!("eps={eps}"), rows.iter().filter(|r| r.eps == eps).collect()))
                    .collect(),
            };
            out.push((format!("fig_attacked_{}", m.name()), rows, chart));
        }
    }
    out
}

/// Creates `<output_dir>/<config hash>-<n>` with the first unused `n`.
pub fn create_run_dir(config: &RunConfig) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    let hash = config.content_hash();
    for n in 1.. {
        let dir = config.output_dir.join(format!("{hash}-{n}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!("run numbers are unbounded")
}

fn append(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Releases finished cells to disk in grid order.
struct OrderedSink {
    next: usize,
    pending: BTreeMap<usize, CellResult>,
    done: Vec<CellResult>,
    records: BufWriter<File>,
    cells: BufWriter<File>,
    checks: BufWriter<File>,
    curves: PathBuf,
}

impl OrderedSink {
    fn push(&mut self, index: usize, result: CellResult) -> anyhow::Result<()> {
        self.pending.insert(index, result);
        while let Some(r) = self.pending.remove(&self.next) {
            write_gap_csv(&mut self.records, &r.records, false)?;
            writeln!(self.cells, "{}", r.to_csv_row())?;
            for c in &r.checks {
                writeln!(self.checks, "{}", c.to_csv_row())?;
            }
            let mut curve = BufWriter::new(File::create(self.curves.join(format!("{}.csv", r.cell.tag())))?);
            writeln!(curve, "epoch,loss")?;
            writeln!(curve, "0,{:e}", r.initial_loss)?;
            for (e, l) in r.loss_curve.iter().enumerate() {
                writeln!(curve, "{},{:e}", e + 1, l)?;
            }
            curve.flush()?;
            for w in [&mut self.records, &mut self.cells, &mut self.checks] {
                w.flush()?;
            }
            self.done.push(r);
            self.next += 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub run_dir: PathBuf,
    pub cells: Vec<CellResult>,
    pub aggregate: Vec<AggRow>,
    pub warnings: Vec<String>,
}

impl SweepReport {
    pub fn records(&self) -> Vec<GapRecord> {
        self.cells.iter().flat_map(|c| c.records.iter().cloned()).collect()
    }

    pub fn checks(&self) -> Vec<AttackCheck> {
        self.cells.iter().flat_map(|c| c.checks.iter().cloned()).collect()
    }

    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.failure.is_some()).count()
    }
}

/// Runs the whole grid into a fresh run directory.
///
/// `progress` sees each cell as it is written.
pub fn run_sweep(config: &RunConfig, progress: &(dyn Fn(&CellResult) + Sync)) -> anyhow::Result<SweepReport> {
    config.validate()?;
    let run_dir = create_run_dir(config)?;
    fs::write(run_dir.join("config.txt"), config.to_text())?;
    let warnings = config.warnings();
    fs::write(run_dir.join("warnings.txt"), warnings.iter().map(|w| format!("{w}\n")).collect::<String>())?;
    let curves = run_dir.join("curves");
    fs::create_dir(&curves)?;

    let mut records = append(&run_dir.join("records.csv"))?;
    writeln!(records, "{}", GapRecord::CSV_HEADER)?;
    let mut cells_w = append(&run_dir.join("cells.csv"))?;
    writeln!(cells_w, "{}", CellResult::CSV_HEADER)?;
    let mut checks = append(&run_dir.join("attack_checks.csv"))?;
    writeln!(checks, "{}", AttackCheck::CSV_HEADER)?;
    let sink = Mutex::new(OrderedSink {
        next: 0,
        pending: BTreeMap::new(),
        done: Vec::new(),
        records,
        cells: cells_w,
        checks,
        curves,
    });

    let grid = cells(config);
    grid.par_iter().enumerate().try_for_each(|(i, &cell)| -> anyhow::Result<()> {
        let result = run_cell(config, cell);
        let mut s = sink.lock().expect("sink lock");
        let before = s.done.len();
        s.push(i, result)?;
        for r in &s.done[before..] {
            progress(r);
        }
        Ok(())
    })?;
    let sink = sink.into_inner().expect("sink lock");
    let done = sink.done;

    let all: Vec<GapRecord> = done.iter().flat_map(|c| c.records.iter().cloned()).collect();
    let agg = aggregate(config, &all);
    let mut w = BufWriter::new(File::create(run_dir.join("aggregate.csv"))?);
    writeln!(w, "{}", AggRow::CSV_HEADER)?;
    for r in &agg {
        writeln!(w, "{}", r.to_csv_row())?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(run_dir.join("table_gap.csv"))?);
    write_table_csv(&mut w, config, &agg)?;
    w.flush()?;
    for (name, rows, chart) in figures(config, &agg) {
        let mut w = BufWriter::new(File::create(run_dir.join(format!("{name}.csv")))?);
        writeln!(w, "{}", AggRow::CSV_HEADER)?;
        for r in &rows {
            writeln!(w, "{}", r.to_csv_row())?;
        }
        w.flush()?;
        fs::write(run_dir.join(format!("{name}.svg")), chart.render())?;
    }
    Ok(SweepReport { run_dir, cells: done, aggregate: agg, warnings })
}

/// Relative paths of every CSV under `dir`, sorted.
pub fn csv_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.push(path.strip_prefix(dir)?.to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Names of CSVs that differ (or exist on one side only) between two runs.
pub fn compare_runs(a: &Path, b: &Path) -> anyhow::Result<Vec<String>> {
    let (fa, fb) = (csv_files(a)?, csv_files(b)?);
    let mut diff = Vec::new();
    for f in fa.iter().filter(|f| !fb.contains(f)).chain(fb.iter().filter(|f| !fa.contains(f))) {
        diff.push(f.display().to_string());
    }
    for f in fa.iter().filter(|f| fb.contains(f)) {
        if fs::read(a.join(f))? != fs::read(b.join(f))? {
            diff.push(f.display().to_string());
        }
    }
    Ok(diff)
}
