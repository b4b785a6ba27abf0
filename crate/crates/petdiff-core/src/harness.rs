//! Run configuration, optimization, checkpointing, and the four pipeline
//! operations behind the CLI: training, sampling, evaluation, and the
//! self-check suite.
//!
//! Determinism contract: a `(config, seed)` pair fully determines logs,
//! checkpoints, and samples. Every random draw comes from a ChaCha stream
//! derived from the master seed and a purpose tag, and each epoch re-derives
//! its own stream, so resuming from an epoch checkpoint reproduces the
//! uninterrupted run bitwise.
//!
//! Environment overrides: any scalar field of [`RunConfig`] can be overridden
//! by an environment variable named `PETDIFF_<FIELD>` (upper snake case), for
//! example `PETDIFF_EPOCHS=2` or `PETDIFF_USE_GP=false`. `PETDIFF_DIMS`
//! takes comma-separated extents. Unknown `PETDIFF_` keys are rejected.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{self, estimate_x0, make_schedule, q_sample, randn, Schedule, SigmaKind};
use crate::losses::{
    gradient_penalty, image_loss, noise_loss, relativistic_pair, standard_pair, total_d, total_g,
    LossReport,
};
use crate::metrics::{self, MetricsReport, SsimOptions, VolumeMetrics};
use crate::nn::{
    self, build_discriminator, build_generator, discriminator_forward, generator_forward,
    ConditionInfo, DiscriminatorConfig, GeneratorConfig, ModelParams,
};
use crate::oracle;
use crate::phantom::{
    self, load_manifest, load_sample, read_volume, write_volume, Manifest, PhantomSample, Volume,
    VolumeMeta, NUM_TRACERS, TRACER_NAMES,
};
use crate::tensor::{backward, GradMap, Tape, Tensor};

pub mod check;
pub use check::{check_run, CheckItem, CheckReport};

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss at {context}; diagnostics written to {dump}")]
    NonFinite { context: String, dump: PathBuf },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Diffusion(#[from] diffusion::DiffusionError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Phantom(#[from] phantom::PhantomError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn cfg_err(field: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Ablation switches; the full model keeps all four on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub use_relativistic: bool,
    pub use_gp: bool,
    pub use_t1: bool,
    pub use_t2f: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            use_relativistic: true,
            use_gp: true,
            use_t1: true,
            use_t2f: true,
        }
    }
}

/// Full training/sampling configuration. JSON on disk, versioned.
///
/// The default noise schedule keeps the reference total noise budget when the
/// step count is reduced: the linear-beta endpoints scale by `1000 / t_max`,
/// so `t_max = 1000` gives exactly (5e-4, 1.95e-2) and shorter schedules keep
/// `alpha_bar(t_max) ~ 0`, matching the N(0, I) chain start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub dims: Vec<usize>,
    pub t_max: usize,
    pub beta_1: f64,
    pub beta_t_max: f64,
    pub sigma_kind: SigmaKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lambda_adv: f64,
    pub toggles: Toggles,
    pub seed: u64,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub base_width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub use_bottleneck_attention: bool,
}

pub const CONFIG_VERSION: u32 = 1;
/// Reference linear-beta endpoints at 1000 steps.
pub const BETA_1_REF: f64 = 5e-4;
pub const BETA_T_REF: f64 = 1.95e-2;

/// Budget-preserving endpoints for a `t_max`-step linear schedule.
pub fn default_betas(t_max: usize) -> (f64, f64) {
    let scale = 1000.0 / t_max.max(1) as f64;
    (BETA_1_REF * scale, BETA_T_REF * scale)
}

impl Default for RunConfig {
    fn default() -> Self {
        let t_max = 200;
        let (beta_1, beta_t_max) = default_betas(t_max);
        RunConfig {
            version: CONFIG_VERSION,
            dims: vec![32, 32],
            t_max,
            beta_1,
            beta_t_max,
            sigma_kind: SigmaKind::SqrtBeta,
            batch_size: 3,
            epochs: 30,
            lr_g: 5e-5,
            lr_d: 5e-6,
            lambda_adv: 0.1,
            toggles: Toggles::default(),
            seed: 0,
            manifest: PathBuf::from("data/manifest.json"),
            out_dir: PathBuf::from("runs/full"),
            base_width: 16,
            depth: 3,
            embed_dim: 64,
            use_bottleneck_attention: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(cfg_err(
                "version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        if !(2..=3).contains(&self.dims.len()) {
            return Err(cfg_err("dims", format!("rank must be 2 or 3, got {:?}", self.dims)));
        }
        for (i, &e) in self.dims.iter().enumerate() {
            if e % (1 << self.depth) != 0 || e == 0 {
                return Err(cfg_err(
                    "dims",
                    format!("axis {i} extent {e} must be a positive multiple of 2^depth = {}", 1 << self.depth),
                ));
            }
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(cfg_err("epochs", "must be >= 1"));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(cfg_err(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.lambda_adv.is_finite() && self.lambda_adv >= 0.0) {
            return Err(cfg_err("lambda_adv", format!("must be >= 0, got {}", self.lambda_adv)));
        }
        if !self.toggles.use_t1 && !self.toggles.use_t2f {
            return Err(cfg_err("toggles", "at least one condition channel must stay enabled"));
        }
        make_schedule(self.t_max, self.beta_1, self.beta_t_max, self.sigma_kind)?;
        self.generator_config().validate()?;
        self.discriminator_config().validate()?;
        Ok(())
    }

    pub fn cond_channels(&self) -> usize {
        self.toggles.use_t1 as usize + self.toggles.use_t2f as usize
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: 1 + self.cond_channels(),
            base_width: self.base_width,
            depth: self.depth,
            num_tracers: NUM_TRACERS,
            embed_dim: self.embed_dim,
            use_bottleneck_attention: self.use_bottleneck_attention,
            spatial_rank: self.dims.len(),
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: 1,
            spatial_rank: self.dims.len(),
            ..DiscriminatorConfig::default()
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Ok(make_schedule(self.t_max, self.beta_1, self.beta_t_max, self.sigma_kind)?)
    }

    /// Trajectory-defining fields; a resumed run must agree on all of them
    /// (paths and the target epoch count may differ).
    fn trajectory_key(&self) -> impl PartialEq + std::fmt::Debug {
        (
            self.dims.clone(),
            self.t_max,
            self.beta_1.to_bits(),
            self.beta_t_max.to_bits(),
            self.sigma_kind,
            self.batch_size,
            (self.lr_g.to_bits(), self.lr_d.to_bits(), self.lambda_adv.to_bits()),
            self.toggles,
            self.seed,
            (self.base_width, self.depth, self.embed_dim, self.use_bottleneck_attention),
        )
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let cfg: RunConfig = serde_json::from_slice(&bytes)
        .map_err(|e| cfg_err("config", format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

/// Environment variable prefix for config overrides.
pub const ENV_PREFIX: &str = "PETDIFF_";

/// Applies `PETDIFF_*` overrides from an explicit key/value list. The real
/// CLI passes `std::env::vars()`; tests inject pairs directly.
pub fn apply_env_overrides(
    cfg: &mut RunConfig,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<()> {
    fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        v.parse()
            .map_err(|e| cfg_err(key, format!("cannot parse {v:?}: {e}")))
    }
    for (key, v) in vars {
        let Some(field) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        match field {
            "DIMS" => {
                cfg.dims = v
                    .split(',')
                    .map(|s| parse("DIMS", s.trim()))
                    .collect::<Result<_>>()?;
            }
            "T_MAX" => cfg.t_max = parse(field, &v)?,
            "BETA_1" => cfg.beta_1 = parse(field, &v)?,
            "BETA_T_MAX" => cfg.beta_t_max = parse(field, &v)?,
            "SIGMA_KIND" => {
                cfg.sigma_kind = serde_json::from_value(serde_json::Value::String(v.clone()))
                    .map_err(|e| cfg_err(field, format!("{e}")))?;
            }
            "BATCH_SIZE" => cfg.batch_size = parse(field, &v)?,
            "EPOCHS" => cfg.epochs = parse(field, &v)?,
            "LR_G" => cfg.lr_g = parse(field, &v)?,
            "LR_D" => cfg.lr_d = parse(field, &v)?,
            "LAMBDA_ADV" => cfg.lambda_adv = parse(field, &v)?,
            "SEED" => cfg.seed = parse(field, &v)?,
            "MANIFEST" => cfg.manifest = PathBuf::from(v),
            "OUT_DIR" => cfg.out_dir = PathBuf::from(v),
            "BASE_WIDTH" => cfg.base_width = parse(field, &v)?,
            "DEPTH" => cfg.depth = parse(field, &v)?,
            "EMBED_DIM" => cfg.embed_dim = parse(field, &v)?,
            "USE_BOTTLENECK_ATTENTION" => cfg.use_bottleneck_attention = parse(field, &v)?,
            "USE_RELATIVISTIC" => cfg.toggles.use_relativistic = parse(field, &v)?,
            "USE_GP" => cfg.toggles.use_gp = parse(field, &v)?,
            "USE_T1" => cfg.toggles.use_t1 = parse(field, &v)?,
            "USE_T2F" => cfg.toggles.use_t2f = parse(field, &v)?,
            other => {
                return Err(cfg_err(
                    other,
                    format!("unknown override {ENV_PREFIX}{other}"),
                ))
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

const TAG_G_INIT: u64 = 1;
const TAG_D_INIT: u64 = 2;
const TAG_EPOCH: u64 = 3;
const TAG_CHAIN: u64 = 4;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn subseed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C16))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn epoch_rng(master_seed: u64, epoch: usize) -> ChaCha8Rng {
    stream_rng(subseed(master_seed, TAG_EPOCH), epoch as u64)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment estimates plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    entries: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        AdamState {
            step: 0,
            entries: params
                .iter()
                .map(|(n, t)| (n.to_string(), vec![0.0; t.len()], vec![0.0; t.len()]))
                .collect(),
        }
    }
}

/// Extracts per-name gradient buffers for the watched parameter copies that
/// received a gradient. Parameters unused by the loss (for example embedding
/// rows of tracers absent from the batch) are simply missing, which
/// [`adam_step`] treats as a zero gradient.
pub fn named_grads(watched: &ModelParams, grads: &GradMap) -> HashMap<String, Vec<f32>> {
    watched
        .iter()
        .filter_map(|(n, t)| {
            t.node_id()
                .and_then(|id| grads.get(&id))
                .map(|g| (n.to_string(), g.to_vec()))
        })
        .collect()
}

/// One bias-corrected Adam update over every parameter, in insertion order.
/// Missing gradient entries count as zero (moments still decay).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &HashMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(cfg_err("lr", format!("must be positive and finite, got {lr}")));
    }
    if state.entries.len() != params.len() {
        return Err(cfg_err(
            "state",
            format!("{} moment entries for {} parameters", state.entries.len(), params.len()),
        ));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step.min(i32::MAX as u64) as i32);
    for (name, m, v) in &mut state.entries {
        let p = params.get(name);
        if p.len() != m.len() {
            return Err(cfg_err(
                "state",
                format!("moment length {} vs parameter `{name}` length {}", m.len(), p.len()),
            ));
        }
        if let Some(g) = grads.get(name) {
            if g.len() != m.len() {
                return Err(cfg_err(
                    "grads",
                    format!("gradient length {} vs parameter `{name}` length {}", g.len(), m.len()),
                ));
            }
        }
        let g = grads.get(name);
        let shape = p.shape().to_vec();
        let mut data = p.to_vec();
        for i in 0..data.len() {
            let gi = g.map_or(0.0, |gv| gv[i] as f64);
            let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            data[i] = (data[i] as f64 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
        }
        params.set(name, Tensor::from_vec(&shape, data));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"RDCK";

/// Exact ChaCha stream position, enough to rebuild the generator's epoch rng.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training bitwise after a completed epoch.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub generator: ModelParams,
    pub discriminator: ModelParams,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    /// State of the next epoch's rng stream.
    pub rng: RngState,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact_fmt(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| HarnessError::Format(format!("truncated while reading {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_fmt(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_fmt(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn write_adam(w: &mut impl Write, state: &AdamState) -> std::io::Result<()> {
    write_u64(w, state.step)?;
    write_u32(w, state.entries.len() as u32)?;
    for (name, m, v) in &state.entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        write_u64(w, m.len() as u64)?;
        for &x in m {
            w.write_all(&x.to_le_bytes())?;
        }
        for &x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_f32_vec(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact_fmt(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_adam(r: &mut impl Read) -> Result<AdamState> {
    let step = read_u64(r, "optimizer step")?;
    let count = read_u32(r, "optimizer entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut nl = [0u8; 2];
        read_exact_fmt(r, &mut nl, "optimizer name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
        read_exact_fmt(r, &mut name, "optimizer name")?;
        let name = String::from_utf8(name)
            .map_err(|e| HarnessError::Format(format!("invalid optimizer name: {e}")))?;
        let n = read_u64(r, "moment length")? as usize;
        let m = read_f32_vec(r, n, "first moments")?;
        let v = read_f32_vec(r, n, "second moments")?;
        entries.push((name, m, v));
    }
    Ok(AdamState { step, entries })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let inner = (|| -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut w, ck.version)?;
        let cfg = serde_json::to_vec(&ck.config).expect("config serializes");
        write_u64(&mut w, cfg.len() as u64)?;
        w.write_all(&cfg)?;
        write_u64(&mut w, ck.epoch as u64)?;
        w.write_all(&ck.rng.seed)?;
        write_u64(&mut w, ck.rng.stream)?;
        w.write_all(&ck.rng.word_pos.to_le_bytes())?;
        Ok(())
    })();
    inner.map_err(io_err(path))?;
    ck.generator
        .write_to(&mut w)
        .map_err(|e| HarnessError::Format(format!("writing generator params: {e}")))?;
    ck.discriminator
        .write_to(&mut w)
        .map_err(|e| HarnessError::Format(format!("writing discriminator params: {e}")))?;
    write_adam(&mut w, &ck.opt_g).map_err(io_err(path))?;
    write_adam(&mut w, &ck.opt_d).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact_fmt(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(HarnessError::Format(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(HarnessError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = read_u64(&mut r, "config length")? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exact_fmt(&mut r, &mut cfg_bytes, "config json")?;
    let config: RunConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| HarnessError::Format(format!("config snapshot: {e}")))?;
    let epoch = read_u64(&mut r, "epoch")? as usize;
    let mut seed = [0u8; 32];
    read_exact_fmt(&mut r, &mut seed, "rng seed")?;
    let stream = read_u64(&mut r, "rng stream")?;
    let mut wp = [0u8; 16];
    read_exact_fmt(&mut r, &mut wp, "rng word position")?;
    let rng = RngState {
        seed,
        stream,
        word_pos: u128::from_le_bytes(wp),
    };
    let generator = ModelParams::read_from(&mut r)
        .map_err(|e| HarnessError::Format(format!("generator params: {e}")))?;
    let discriminator = ModelParams::read_from(&mut r)
        .map_err(|e| HarnessError::Format(format!("discriminator params: {e}")))?;
    let opt_g = read_adam(&mut r)?;
    let opt_d = read_adam(&mut r)?;
    let ck = Checkpoint {
        version,
        config,
        generator,
        discriminator,
        opt_g,
        opt_d,
        epoch,
        rng,
    };
    for (params, opt, what) in [
        (&ck.generator, &ck.opt_g, "generator"),
        (&ck.discriminator, &ck.opt_d, "discriminator"),
    ] {
        if params.len() != opt.entries.len()
            || params
                .iter()
                .zip(&opt.entries)
                .any(|((pn, pt), (on, m, _))| pn != on || pt.len() != m.len())
        {
            return Err(HarnessError::Format(format!(
                "{what} optimizer state does not match its parameters"
            )));
        }
    }
    Ok(ck)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One JSONL line per training batch; `losses` fields are flattened in.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub t: usize,
    /// "relativistic" or "standard", per the use_relativistic toggle.
    pub adv: String,
    /// Generator input channels (varies under the condition ablations).
    pub in_channels: usize,
    #[serde(flatten)]
    pub losses: LossReport,
}

#[derive(Clone, Debug, Serialize)]
struct LogHeader {
    version: u32,
    kind: &'static str,
}

#[derive(Clone, Debug, Serialize)]
struct NanDump {
    epoch: usize,
    batch: usize,
    step: usize,
    t: usize,
    seed: u64,
    stream: u64,
    word_pos_at_batch: String,
    samples: Vec<String>,
    tracers: Vec<usize>,
    losses: BTreeMap<String, String>,
}

pub struct TrainOutcome {
    pub log_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub steps_run: usize,
}

fn to_symmetric(data: &[f32]) -> Vec<f32> {
    data.iter().map(|&v| 2.0 * v - 1.0).collect()
}

fn from_symmetric(data: &[f32]) -> Vec<f32> {
    data.iter().map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()
}

/// Stacks the enabled condition channels (t1 first, then t2f), mapped to
/// [-1, 1], for one sample.
fn cond_channels_data(sample: &PhantomSample, toggles: &Toggles) -> Vec<f32> {
    let mut out = Vec::new();
    if toggles.use_t1 {
        out.extend(to_symmetric(&sample.cond_t1.data));
    }
    if toggles.use_t2f {
        out.extend(to_symmetric(&sample.cond_t2f.data));
    }
    out
}

fn batch_tensors(
    samples: &[PhantomSample],
    chunk: &[(usize, usize)],
    toggles: &Toggles,
    dims: &[usize],
) -> (Tensor, Tensor, Vec<usize>) {
    let voxels: usize = dims.iter().product();
    let n = chunk.len();
    let cond_ch = toggles.use_t1 as usize + toggles.use_t2f as usize;
    let mut x0 = Vec::with_capacity(n * voxels);
    let mut cond = Vec::with_capacity(n * cond_ch * voxels);
    let mut tracers = Vec::with_capacity(n);
    for &(si, tr) in chunk {
        x0.extend(to_symmetric(&samples[si].targets[tr].data));
        cond.extend(cond_channels_data(&samples[si], toggles));
        tracers.push(tr);
    }
    let mut shape = vec![n, 1];
    shape.extend_from_slice(dims);
    let x0 = Tensor::from_vec(&shape, x0);
    shape[1] = cond_ch;
    let cond = Tensor::from_vec(&shape, cond);
    (x0, cond, tracers)
}

fn check_manifest(cfg: &RunConfig, manifest: &Manifest) -> Result<()> {
    if manifest.dims != cfg.dims {
        return Err(HarnessError::Data(format!(
            "manifest dims {:?} do not match config dims {:?}",
            manifest.dims, cfg.dims
        )));
    }
    if manifest.tracers.len() != NUM_TRACERS {
        return Err(HarnessError::Data(format!(
            "manifest lists {} tracers, expected {NUM_TRACERS}",
            manifest.tracers.len()
        )));
    }
    Ok(())
}

struct NanProbe<'a> {
    out_dir: &'a Path,
    epoch: usize,
    batch: usize,
    step: usize,
    t: usize,
    seed: u64,
    stream: u64,
    word_pos: u128,
    samples: Vec<String>,
    tracers: Vec<usize>,
}

impl NanProbe<'_> {
    fn ensure_finite(&self, losses: &[(&str, f64)]) -> Result<()> {
        if losses.iter().all(|(_, v)| v.is_finite()) {
            return Ok(());
        }
        let dump = NanDump {
            epoch: self.epoch,
            batch: self.batch,
            step: self.step,
            t: self.t,
            seed: self.seed,
            stream: self.stream,
            word_pos_at_batch: self.word_pos.to_string(),
            samples: self.samples.clone(),
            tracers: self.tracers.clone(),
            losses: losses
                .iter()
                .map(|(k, v)| (k.to_string(), format!("{v}")))
                .collect(),
        };
        let path = self.out_dir.join("nan_dump.json");
        let body = serde_json::to_vec_pretty(&dump).expect("dump serializes");
        fs::write(&path, body).map_err(io_err(&path))?;
        Err(HarnessError::NonFinite {
            context: format!("epoch {} batch {}", self.epoch, self.batch),
            dump: path,
        })
    }
}

/// Runs (or resumes) training. Per batch: draw a shared timestep and a noise
/// field, form the noisy target, predict the noise, rebuild the clean
/// estimate, take one generator step and then one discriminator step on the
/// same batch, and append one log record. A checkpoint lands after every
/// epoch.
pub fn train_run(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.manifest)?;
    check_manifest(cfg, &manifest)?;
    if manifest.train.is_empty() {
        return Err(HarnessError::Data("manifest has no training samples".into()));
    }
    let manifest_dir = cfg
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let samples: Vec<PhantomSample> = manifest
        .train
        .iter()
        .map(|e| load_sample(&manifest_dir, e))
        .collect::<std::result::Result<_, _>>()?;
    for (i, s) in samples.iter().enumerate() {
        if s.labels.dims != cfg.dims {
            return Err(HarnessError::Data(format!(
                "train sample {i} dims {:?} do not match config dims {:?}",
                s.labels.dims, cfg.dims
            )));
        }
    }

    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let snapshot = cfg.out_dir.join("config.json");
    fs::write(&snapshot, serde_json::to_vec_pretty(cfg)?).map_err(io_err(&snapshot))?;

    let gcfg = cfg.generator_config();
    let dcfg = cfg.discriminator_config();
    let sched = cfg.schedule()?;

    let (mut g, mut d, mut opt_g, mut opt_d, start_epoch) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config.trajectory_key() != cfg.trajectory_key() {
                return Err(cfg_err(
                    "resume",
                    "checkpoint config disagrees with the requested run on trajectory-defining fields",
                ));
            }
            if ck.epoch >= cfg.epochs {
                return Err(cfg_err(
                    "resume",
                    format!("checkpoint already covers {} epochs, target is {}", ck.epoch, cfg.epochs),
                ));
            }
            (ck.generator, ck.discriminator, ck.opt_g, ck.opt_d, ck.epoch)
        }
        None => {
            let g = build_generator(&gcfg, subseed(cfg.seed, TAG_G_INIT))?;
            let d = build_discriminator(&dcfg, subseed(cfg.seed, TAG_D_INIT))?;
            let opt_g = AdamState::new(&g);
            let opt_d = AdamState::new(&d);
            (g, d, opt_g, opt_d, 0)
        }
    };

    let log_path = cfg.out_dir.join("train_log.jsonl");
    let log_file = if resume.is_some() {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?
    } else {
        fs::File::create(&log_path).map_err(io_err(&log_path))?
    };
    let mut log = BufWriter::new(log_file);
    if resume.is_none() {
        let header = LogHeader {
            version: 1,
            kind: "train_log",
        };
        writeln!(log, "{}", serde_json::to_string(&header)?).map_err(io_err(&log_path))?;
    }

    let mut pairs_base = Vec::with_capacity(samples.len() * NUM_TRACERS);
    for si in 0..samples.len() {
        for tr in 0..NUM_TRACERS {
            pairs_base.push((si, tr));
        }
    }
    let batches_per_epoch = pairs_base.len().div_ceil(cfg.batch_size);
    let adv_name = if cfg.toggles.use_relativistic {
        "relativistic"
    } else {
        "standard"
    };

    let mut checkpoints = Vec::new();
    let mut steps_run = 0usize;
    let epoch_seed = subseed(cfg.seed, TAG_EPOCH);
    for epoch in start_epoch..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut pairs = pairs_base.clone();
        pairs.shuffle(&mut rng);
        for (batch_idx, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let step = epoch * batches_per_epoch + batch_idx;
            let word_pos = rng.get_word_pos();
            let t = rng.gen_range(1..=sched.t_max);
            let (x0, cond, tracers) = batch_tensors(&samples, chunk, &cfg.toggles, &cfg.dims);
            let eps = randn(x0.shape(), &mut rng);
            let x_t = q_sample(&x0, &eps, &sched, t)?;
            let infos: Vec<ConditionInfo> = tracers
                .iter()
                .map(|&c| ConditionInfo { t, c })
                .collect();
            let probe = NanProbe {
                out_dir: &cfg.out_dir,
                epoch,
                batch: batch_idx,
                step,
                t,
                seed: cfg.seed,
                stream: epoch as u64,
                word_pos,
                samples: chunk
                    .iter()
                    .map(|&(si, _)| manifest.train[si].path.clone())
                    .collect(),
                tracers: tracers.clone(),
            };

            // Generator step; the critic participates as a constant.
            let tape_g = Tape::new();
            let gw = g.watched(&tape_g);
            let eps_hat = generator_forward(&gw, &gcfg, &x_t, &cond, &infos)?;
            let x0_hat = estimate_x0(&x_t, &eps_hat, &sched, t)?;
            let l_noise = noise_loss(&eps, &eps_hat)?;
            let l_image = image_loss(&x0, &x0_hat)?;
            let d_real_g = discriminator_forward(&d, &dcfg, &x0)?;
            let d_fake_g = discriminator_forward(&d, &dcfg, &x0_hat)?;
            let (_, l_rel_g) = if cfg.toggles.use_relativistic {
                relativistic_pair(&d_real_g, &d_fake_g)?
            } else {
                standard_pair(&d_real_g, &d_fake_g)?
            };
            let tg = total_g(&l_noise, &l_image, &l_rel_g, cfg.lambda_adv)?;
            let v_noise = l_noise.item() as f64;
            let v_image = l_image.item() as f64;
            let v_rel_g = l_rel_g.item() as f64;
            probe.ensure_finite(&[
                ("l_noise", v_noise),
                ("l_image", v_image),
                ("l_rel_g", v_rel_g),
                ("total_g", tg.item() as f64),
            ])?;
            let grads_g = backward(&tg, false)?;
            adam_step(&mut g, &named_grads(&gw, &grads_g), &mut opt_g, cfg.lr_g)?;

            // Discriminator step on the same batch; the estimate is detached.
            let x0_hat_const = x0_hat.detach();
            let tape_d = Tape::new();
            let dw = d.watched(&tape_d);
            let d_real = discriminator_forward(&dw, &dcfg, &x0)?;
            let d_fake = discriminator_forward(&dw, &dcfg, &x0_hat_const)?;
            let (l_rel_d, _) = if cfg.toggles.use_relativistic {
                relativistic_pair(&d_real, &d_fake)?
            } else {
                standard_pair(&d_real, &d_fake)?
            };
            let l_gp = if cfg.toggles.use_gp {
                gradient_penalty(
                    |x| discriminator_forward(&dw, &dcfg, x).map_err(Into::into),
                    &x0,
                    &x0_hat_const,
                    &tape_d,
                )?
            } else {
                Tensor::scalar(0.0)
            };
            let td = total_d(&l_rel_d, &l_gp, cfg.lambda_adv)?;
            let v_rel_d = l_rel_d.item() as f64;
            let v_gp = l_gp.item() as f64;
            probe.ensure_finite(&[
                ("l_rel_d", v_rel_d),
                ("l_gp", v_gp),
                ("total_d", td.item() as f64),
            ])?;
            let grads_d = backward(&td, false)?;
            adam_step(&mut d, &named_grads(&dw, &grads_d), &mut opt_d, cfg.lr_d)?;

            let record = TrainLogRecord {
                epoch,
                step,
                t,
                adv: adv_name.to_string(),
                in_channels: gcfg.in_channels,
                losses: LossReport::from_parts(
                    v_noise,
                    v_image,
                    v_rel_g,
                    v_rel_d,
                    v_gp,
                    cfg.lambda_adv,
                ),
            };
            writeln!(log, "{}", serde_json::to_string(&record)?).map_err(io_err(&log_path))?;
            steps_run += 1;
        }
        log.flush().map_err(io_err(&log_path))?;

        let next_rng = stream_rng(epoch_seed, (epoch + 1) as u64);
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            generator: g.clone(),
            discriminator: d.clone(),
            opt_g: opt_g.clone(),
            opt_d: opt_d.clone(),
            epoch: epoch + 1,
            rng: RngState::capture(&next_rng),
        };
        let ck_path = cfg.out_dir.join(format!("checkpoint_ep{:04}.bin", epoch + 1));
        save_checkpoint(&ck_path, &ck)?;
        checkpoints.push(ck_path);
    }
    log.flush().map_err(io_err(&log_path))?;
    Ok(TrainOutcome {
        log_path,
        checkpoints,
        steps_run,
    })
}

/// Reads every record of a JSONL training log (the header line is skipped).
pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let body = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in body.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("kind").is_some() {
            continue;
        }
        out.push(serde_json::from_value(v)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleIndexEntry {
    /// Manifest-relative sample path, e.g. "test/sample_0003".
    pub sample: String,
    pub tracer: String,
    pub tracer_index: usize,
    /// File name inside the output directory.
    pub file: String,
    pub chain_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleIndex {
    pub version: u32,
    pub split: String,
    pub dims: Vec<usize>,
    pub entries: Vec<SampleIndexEntry>,
}

pub const SAMPLE_INDEX_FILE: &str = "index.json";

/// Runs the full reverse chain for every sample of the chosen split and every
/// tracer, writing one volume per (sample, tracer) plus an index. Outputs are
/// mapped back from [-1, 1] to the storage range [0, 1].
pub fn sample_run(
    checkpoint: &Path,
    manifest_path: &Path,
    split: &str,
    seed: u64,
    out_dir: &Path,
) -> Result<SampleIndex> {
    let ck = load_checkpoint(checkpoint)?;
    let manifest = load_manifest(manifest_path)?;
    if manifest.dims != ck.config.dims {
        return Err(HarnessError::Data(format!(
            "manifest dims {:?} do not match checkpoint dims {:?}",
            manifest.dims, ck.config.dims
        )));
    }
    check_manifest(&ck.config, &manifest)?;
    let entries = match split {
        "train" => &manifest.train,
        "test" => &manifest.test,
        other => {
            return Err(cfg_err("split", format!("must be `train` or `test`, got {other:?}")))
        }
    };
    let manifest_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let gcfg = ck.config.generator_config();
    let sched = ck.config.schedule()?;
    let dims = ck.config.dims.clone();
    let voxels: usize = dims.iter().product();
    let chain_seed_base = subseed(seed, TAG_CHAIN);

    let mut index = SampleIndex {
        version: 1,
        split: split.to_string(),
        dims: dims.clone(),
        entries: Vec::with_capacity(entries.len() * NUM_TRACERS),
    };
    for (i, entry) in entries.iter().enumerate() {
        let sample = load_sample(&manifest_dir, entry)?;
        if sample.labels.dims != dims {
            return Err(HarnessError::Data(format!(
                "sample {} dims {:?} do not match checkpoint dims {:?}",
                entry.path, sample.labels.dims, dims
            )));
        }
        let cond_one = cond_channels_data(&sample, &ck.config.toggles);
        let mut cond_data = Vec::with_capacity(NUM_TRACERS * cond_one.len());
        for _ in 0..NUM_TRACERS {
            cond_data.extend_from_slice(&cond_one);
        }
        let mut cond_shape = vec![NUM_TRACERS, ck.config.cond_channels()];
        cond_shape.extend_from_slice(&dims);
        let cond = Tensor::from_vec(&cond_shape, cond_data);
        let tracers: Vec<usize> = (0..NUM_TRACERS).collect();
        let mut rng = stream_rng(chain_seed_base, i as u64);
        let out = diffusion::sample(&ck.generator, &gcfg, &sched, &cond, &tracers, &mut rng)?;
        let out_data = out.data();
        for tr in 0..NUM_TRACERS {
            let vol_data = from_symmetric(&out_data[tr * voxels..(tr + 1) * voxels]);
            let meta = VolumeMeta {
                value_range: "[0,1]".to_string(),
                seed: chain_seed_base.wrapping_add(i as u64),
                kind: "prediction".to_string(),
            };
            let vol = Volume::new(&dims, 1, vol_data, meta)?;
            let file = format!("pred_{i:04}_{}.rdvf", TRACER_NAMES[tr]);
            write_volume(&out_dir.join(&file), &vol)?;
            index.entries.push(SampleIndexEntry {
                sample: entry.path.clone(),
                tracer: TRACER_NAMES[tr].to_string(),
                tracer_index: tr,
                file,
                chain_seed: chain_seed_base.wrapping_add(i as u64),
            });
        }
    }
    let index_path = out_dir.join(SAMPLE_INDEX_FILE);
    fs::write(&index_path, serde_json::to_vec_pretty(&index)?).map_err(io_err(&index_path))?;
    Ok(index)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TracerSection {
    pub tracer: String,
    pub report: MetricsReport,
    /// Mean absolute per-region uptake error across volumes, keyed by region.
    pub region_mean_abs_err: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub tracers: Vec<TracerSection>,
    pub missing: Vec<String>,
    pub warning: Option<String>,
}

pub const EVAL_REPORT_FILE: &str = "eval_report.json";

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Scores predictions against the ground-truth split and writes |pred - truth|
/// difference maps plus a JSON report. Missing volumes are listed and the
/// report is still produced, with a warning.
pub fn eval_run(pred_dir: &Path, manifest_path: &Path, out_dir: &Path) -> Result<EvalReport> {
    let index_path = pred_dir.join(SAMPLE_INDEX_FILE);
    let index_bytes = fs::read(&index_path).map_err(io_err(&index_path))?;
    let index: SampleIndex = serde_json::from_slice(&index_bytes)
        .map_err(|e| HarnessError::Data(format!("prediction index: {e}")))?;
    let manifest = load_manifest(manifest_path)?;
    let entries = match index.split.as_str() {
        "train" => &manifest.train,
        "test" => &manifest.test,
        other => return Err(HarnessError::Data(format!("index names unknown split {other:?}"))),
    };
    let manifest_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut by_key: HashMap<(String, usize), &SampleIndexEntry> = HashMap::new();
    for e in &index.entries {
        by_key.insert((e.sample.clone(), e.tracer_index), e);
    }

    let opts = SsimOptions::default();
    let mut missing = Vec::new();
    let mut sections = Vec::with_capacity(NUM_TRACERS);
    for tr in 0..NUM_TRACERS {
        let mut volumes = Vec::new();
        let mut region_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for entry in entries {
            let key = (entry.path.clone(), tr);
            let name = format!("{} {}", entry.path, TRACER_NAMES[tr]);
            let Some(ie) = by_key.get(&key) else {
                missing.push(name);
                continue;
            };
            let pred_path = pred_dir.join(&ie.file);
            if !pred_path.exists() {
                missing.push(name);
                continue;
            }
            let pred = read_volume(&pred_path)?;
            let sample = load_sample(&manifest_dir, entry)?;
            let truth = &sample.targets[tr];
            if pred.dims != truth.dims || pred.channels != 1 {
                return Err(HarnessError::Data(format!(
                    "prediction {} shape {:?}x{} does not match truth {:?}",
                    ie.file, pred.dims, pred.channels, truth.dims
                )));
            }
            let p = widen(&pred.data);
            let t = widen(&truth.data);
            let labels = widen(&sample.labels.data);
            let psnr = metrics::psnr(&p, &t, 1.0)?;
            let ssim = metrics::ssim(&p, &t, &truth.dims, &opts)?;
            let mae = metrics::mae(&p, &t)?;
            let regions = metrics::region_eval(&p, &t, &labels, &truth.dims, &opts)?;
            let mut per_region = BTreeMap::new();
            for (rid, stats) in regions {
                if let Some(err) = stats.abs_err {
                    let slot = region_sums.entry(rid.to_string()).or_insert((0.0, 0));
                    slot.0 += err;
                    slot.1 += 1;
                }
                per_region.insert(rid.to_string(), stats);
            }
            let diff: Vec<f32> = pred
                .data
                .iter()
                .zip(&truth.data)
                .map(|(&a, &b)| (a - b).abs())
                .collect();
            let diff_vol = Volume::new(
                &truth.dims,
                1,
                diff,
                VolumeMeta {
                    value_range: "[0,1]".to_string(),
                    seed: entry.seed,
                    kind: "diff".to_string(),
                },
            )?;
            let stem = entry.path.replace('/', "_");
            write_volume(
                &out_dir.join(format!("diff_{stem}_{}.rdvf", TRACER_NAMES[tr])),
                &diff_vol,
            )?;
            volumes.push(VolumeMetrics {
                id: name,
                psnr,
                ssim,
                mae,
                per_region,
            });
        }
        sections.push(TracerSection {
            tracer: TRACER_NAMES[tr].to_string(),
            report: MetricsReport::from_volumes(volumes),
            region_mean_abs_err: region_sums
                .into_iter()
                .map(|(k, (s, n))| (k, s / n.max(1) as f64))
                .collect(),
        });
    }
    let warning = if missing.is_empty() {
        None
    } else {
        Some(format!(
            "{} of {} expected volumes missing; partial report",
            missing.len(),
            entries.len() * NUM_TRACERS
        ))
    };
    let report = EvalReport {
        version: 1,
        tracers: sections,
        missing,
        warning,
    };
    let report_path = out_dir.join(EVAL_REPORT_FILE);
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?).map_err(io_err(&report_path))?;
    Ok(report)
}
