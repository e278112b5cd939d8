//! Tasks, prompts and datasets for noiseless in-context linear regression.
//!
//! A prompt is the `(t+1)×(d+1)` matrix whose first `t` rows are `(x_i, y_i)`
//! with `y_i = μᵀx_i`, and whose last row is `(x_q, 0)`. Task vectors are drawn
//! from `N(0, I_d/d)`.

use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::rng::{stream, stream_rng, Rng};

/// True regression coefficients for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub mu: Vec<f64>,
}

/// Distribution of the covariates. All kinds have zero mean and identity
/// covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputDist {
    #[default]
    Gaussian,
    /// ±1 with equal probability.
    Rademacher,
    /// Uniform on `[-√3, √3]`.
    UniformUnitCov,
}

impl InputDist {
    pub fn name(self) -> &'static str {
        match self {
            InputDist::Gaussian => "gaussian",
            InputDist::Rademacher => "rademacher",
            InputDist::UniformUnitCov => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "standard-gaussian" | "normal" => Ok(InputDist::Gaussian),
            "rademacher" => Ok(InputDist::Rademacher),
            "uniform" | "uniform-unit-cov" => Ok(InputDist::UniformUnitCov),
            other => Err(Error::Format(format!("unknown input distribution '{other}'"))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            InputDist::Gaussian => 0,
            InputDist::Rademacher => 1,
            InputDist::UniformUnitCov => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(InputDist::Gaussian),
            1 => Ok(InputDist::Rademacher),
            2 => Ok(InputDist::UniformUnitCov),
            _ => Err(Error::Format(format!("unknown distribution tag {tag}"))),
        }
    }

    pub fn sample(self, rng: &mut Rng) -> f64 {
        match self {
            InputDist::Gaussian => StandardNormal.sample(rng),
            InputDist::Rademacher => {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            InputDist::UniformUnitCov => {
                let s = 3f64.sqrt();
                rng.gen_range(-s..s)
            }
        }
    }

    pub fn sample_vec(self, rng: &mut Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.sample(rng)).collect()
    }
}

/// One prompt together with the task that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub x: Mat,
    pub task: Task,
    pub query_label: f64,
}

impl Prompt {
    /// Number of labelled examples.
    pub fn t(&self) -> usize {
        self.x.rows() - 1
    }

    pub fn d(&self) -> usize {
        self.x.cols() - 1
    }

    pub fn query(&self) -> &[f64] {
        let d = self.d();
        &self.x.row(self.t())[..d]
    }

    /// The `t×d` design of the example covariates.
    pub fn design(&self) -> Mat {
        design_of(&self.x)
    }
}

/// Example covariates (first `t` rows, first `d` columns) of a prompt matrix.
pub fn design_of(x: &Mat) -> Mat {
    let t = x.rows() - 1;
    let d = x.cols() - 1;
    Mat::from_fn(t, d, |i, j| x[(i, j)])
}

/// Gram mean `G_t = (1/t) Σ x_i x_iᵀ` over the example rows of a prompt.
pub fn gram_mean(x: &Mat) -> Mat {
    let design = design_of(x);
    let t = design.rows() as f64;
    design.t_matmul(&design).scale(1.0 / t)
}

/// Draws `μ ~ N(0, I_d/d)`.
pub fn sample_task(rng: &mut Rng, d: usize) -> Task {
    let sd = 1.0 / (d as f64).sqrt();
    let mu = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        })
        .collect();
    Task { mu }
}

pub fn sample_prompt(rng: &mut Rng, task: &Task, t: usize, d: usize, dist: InputDist) -> Prompt {
    assert_eq!(task.mu.len(), d, "task dimension mismatch");
    let mut x = Mat::zeros(t + 1, d + 1);
    for i in 0..=t {
        let xi = dist.sample_vec(rng, d);
        let row = x.row_mut(i);
        row[..d].copy_from_slice(&xi);
        row[d] = if i < t { dot(&task.mu, &xi) } else { 0.0 };
    }
    let query_label = dot(&task.mu, &x.row(t)[..d]);
    Prompt { x, task: task.clone(), query_label }
}

/// A fixed training set plus held-out validation tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    train_prompts: Vec<Prompt>,
    pub val_tasks: Vec<Task>,
    pub t: usize,
    pub d: usize,
    pub seed: u64,
    pub dist: InputDist,
}

impl Dataset {
    pub fn train_prompts(&self) -> &[Prompt] {
        &self.train_prompts
    }

    /// Fresh validation prompts, one per validation task, for one evaluation.
    pub fn val_prompts(&self, eval_seed: u64) -> Vec<Prompt> {
        let mut rng = stream_rng(self.seed, stream::VAL_PROMPTS_BASE + eval_seed);
        self.val_tasks
            .iter()
            .map(|task| sample_prompt(&mut rng, task, self.t, self.d, self.dist))
            .collect()
    }

    /// Writes the binary format:
    ///
    /// ```text
    /// magic "ICLD" | version u32 | t d n_train n_val seed: u64 | dist u8
    /// per train prompt: X ((t+1)(d+1) f64) | mu (d f64) | y_q f64
    /// per val task: mu (d f64)
    /// ```
    /// All integers and floats little-endian, matrices row-major.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [self.t, self.d, self.train_prompts.len(), self.val_tasks.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&[self.dist.tag()])?;
        for p in &self.train_prompts {
            write_f64s(&mut w, p.x.as_slice())?;
            write_f64s(&mut w, &p.task.mu)?;
            write_f64s(&mut w, &[p.query_label])?;
        }
        for task in &self.val_tasks {
            write_f64s(&mut w, &task.mu)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let t = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let n_train = read_u64(&mut r)? as usize;
        let n_val = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dist = InputDist::from_tag(tag[0])?;
        let mut train_prompts = Vec::with_capacity(n_train);
        for _ in 0..n_train {
            let x = Mat::from_vec(t + 1, d + 1, read_f64s(&mut r, (t + 1) * (d + 1))?)?;
            let mu = read_f64s(&mut r, d)?;
            let query_label = read_f64s(&mut r, 1)?[0];
            train_prompts.push(Prompt { x, task: Task { mu }, query_label });
        }
        let mut val_tasks = Vec::with_capacity(n_val);
        for _ in 0..n_val {
            val_tasks.push(Task { mu: read_f64s(&mut r, d)? });
        }
        Ok(Dataset { train_prompts, val_tasks, t, d, seed, dist })
    }

    /// Human-readable dump: one line per training row, then one per
    /// validation task.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.d;
        let xs: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        writeln!(w, "kind,index,row,{},y", xs.join(","))?;
        for (k, p) in self.train_prompts.iter().enumerate() {
            for i in 0..p.x.rows() {
                let vals: Vec<String> = p.x.row(i).iter().map(|v| format!("{v:e}")).collect();
                writeln!(w, "train,{k},{i},{}", vals.join(","))?;
            }
        }
        for (k, task) in self.val_tasks.iter().enumerate() {
            let vals: Vec<String> = task.mu.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "val_mu,{k},0,{},", vals.join(","))?;
        }
        Ok(())
    }
}

pub fn build_dataset(
    seed: u64,
    n_train: usize,
    n_val: usize,
    t: usize,
    d: usize,
    dist: InputDist,
) -> Dataset {
    let mut task_rng = stream_rng(seed, stream::TRAIN_TASKS);
    let mut prompt_rng = stream_rng(seed, stream::TRAIN_PROMPTS);
    let train_prompts = (0..n_train)
        .map(|_| {
            let task = sample_task(&mut task_rng, d);
            sample_prompt(&mut prompt_rng, &task, t, d, dist)
        })
        .collect();
    let mut val_rng = stream_rng(seed, stream::VAL_TASKS);
    let val_tasks = (0..n_val).map(|_| sample_task(&mut val_rng, d)).collect();
    Dataset { train_prompts, val_tasks, t, d, seed, dist }
}

const DATASET_MAGIC: &[u8; 4] = b"ICLD";
const FORMAT_VERSION: u32 = 1;

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = [0u8; 8];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
