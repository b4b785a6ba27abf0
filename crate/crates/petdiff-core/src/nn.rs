//! Neural building blocks and the two model architectures: a conditional
//! U-Net noise predictor and a patch discriminator.
//!
//! Parameters live in a [`ModelParams`] table (insertion-ordered, named,
//! serializable to a versioned binary format). Forward passes are free
//! functions over a config plus a table, so the same code serves
//! initialization-time tables and per-step watched copies. Spatial rank is 2
//! or 3; every learnable spatial op is a convolution.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("config error: field {field}: {msg}")]
    Config { field: &'static str, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("params format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Timestep and tracer label conditioning one forward pass of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionInfo {
    /// 1-based diffusion timestep.
    pub t: usize,
    /// Tracer label in `[0, num_tracers)`.
    pub c: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Noisy target channels plus condition channels.
    pub in_channels: usize,
    pub base_width: usize,
    /// Down/up block count; spatial extents must divide by `2^depth`.
    pub depth: usize,
    pub num_tracers: usize,
    pub embed_dim: usize,
    pub use_bottleneck_attention: bool,
    /// 2 for images, 3 for volumes.
    pub spatial_rank: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 3,
            base_width: 16,
            depth: 3,
            num_tracers: 3,
            embed_dim: 64,
            use_bottleneck_attention: false,
            spatial_rank: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(NnError::Config {
                field: "depth",
                msg: "must be >= 1".into(),
            });
        }
        if self.in_channels == 0 {
            return Err(NnError::Config {
                field: "in_channels",
                msg: "must be >= 1".into(),
            });
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(NnError::Config {
                field: "embed_dim",
                msg: format!("must be positive and even, got {}", self.embed_dim),
            });
        }
        if self.num_tracers == 0 {
            return Err(NnError::Config {
                field: "num_tracers",
                msg: "must be >= 1".into(),
            });
        }
        if self.spatial_rank != 2 && self.spatial_rank != 3 {
            return Err(NnError::Config {
                field: "spatial_rank",
                msg: format!("must be 2 or 3, got {}", self.spatial_rank),
            });
        }
        for d in 0..=self.depth {
            let ch = self.base_width << d;
            let groups = group_count(ch);
            if ch % groups != 0 {
                return Err(NnError::Config {
                    field: "base_width",
                    msg: format!("channel count {ch} not divisible by {groups} norm groups"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Instance,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    /// Channel counts of the three strided stages.
    pub widths: [usize; 3],
    pub leaky_slope: f32,
    pub norm_kind: NormKind,
    pub spatial_rank: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 1,
            widths: [16, 32, 64],
            leaky_slope: 0.2,
            norm_kind: NormKind::Batch,
            spatial_rank: 2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(NnError::Config {
                field: "in_channels",
                msg: "must be >= 1".into(),
            });
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(NnError::Config {
                field: "widths",
                msg: format!("all stage widths must be >= 1, got {:?}", self.widths),
            });
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(NnError::Config {
                field: "leaky_slope",
                msg: format!("must be in [0,1), got {}", self.leaky_slope),
            });
        }
        if self.spatial_rank != 2 && self.spatial_rank != 3 {
            return Err(NnError::Config {
                field: "spatial_rank",
                msg: format!("must be 2 or 3, got {}", self.spatial_rank),
            });
        }
        Ok(())
    }
}

/// Named, insertion-ordered table of learnable tensors.
#[derive(Clone, Default)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl std::fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut map = f.debug_map();
        for (name, t) in &self.entries {
            map.entry(&name, &t.shape());
        }
        map.finish()
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.entries[i].1
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.entries[i].1 = t;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Copy of the table with every tensor registered on `tape`; gradients
    /// appear under the ids reported by [`ModelParams::node_ids`].
    pub fn watched(&self, tape: &Tape) -> ModelParams {
        let mut out = ModelParams::new();
        for (name, t) in &self.entries {
            out.insert(name, tape.watch(t));
        }
        out
    }

    pub fn node_ids(&self) -> Vec<Option<NodeId>> {
        self.entries.iter().map(|(_, t)| t.node_id()).collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&[PARAMS_VERSION])?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.shape().len() as u8])?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<ModelParams> {
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, &mut offset, "magic")?;
        if &magic != PARAMS_MAGIC {
            return Err(NnError::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected {PARAMS_MAGIC:?}"),
            });
        }
        let mut ver = [0u8; 1];
        read_exact(&mut r, &mut ver, &mut offset, "version")?;
        if ver[0] != PARAMS_VERSION {
            return Err(NnError::Format {
                offset: 4,
                msg: format!("unsupported version {}", ver[0]),
            });
        }
        let mut cnt = [0u8; 4];
        read_exact(&mut r, &mut cnt, &mut offset, "entry count")?;
        let count = u32::from_le_bytes(cnt);
        let mut out = ModelParams::new();
        for _ in 0..count {
            let mut nl = [0u8; 2];
            read_exact(&mut r, &mut nl, &mut offset, "name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
            read_exact(&mut r, &mut name, &mut offset, "name")?;
            let name = String::from_utf8(name).map_err(|e| NnError::Format {
                offset,
                msg: format!("invalid UTF-8 name: {e}"),
            })?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank, &mut offset, "rank")?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut e = [0u8; 4];
                read_exact(&mut r, &mut e, &mut offset, "extent")?;
                shape.push(u32::from_le_bytes(e) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0f32; n];
            for v in data.iter_mut() {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b, &mut offset, "tensor data")?;
                *v = f32::from_le_bytes(b);
            }
            out.insert(&name, Tensor::from_vec(&shape, data));
        }
        Ok(out)
    }
}

const PARAMS_MAGIC: &[u8; 4] = b"RDPT";
const PARAMS_VERSION: u8 = 1;

fn read_exact(r: &mut impl Read, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| NnError::Format {
        offset: *offset,
        msg: format!("truncated while reading {what}: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

fn group_count(channels: usize) -> usize {
    channels.min(8)
}

struct Init {
    rng: ChaCha8Rng,
    params: ModelParams,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ModelParams::new(),
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, sp: usize) {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat(k).take(sp));
        let fan_in = cin * k.pow(sp as u32);
        let w = self.uniform(&shape, 1.0 / (fan_in as f64).sqrt());
        self.params.insert(&format!("{name}.w"), w);
        self.params.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn conv_zero(&mut self, name: &str, cout: usize, cin: usize, k: usize, sp: usize) {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat(k).take(sp));
        self.params.insert(&format!("{name}.w"), Tensor::zeros(&shape));
        self.params.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) {
        let w = self.uniform(&[cin, cout], 1.0 / (cin as f64).sqrt());
        self.params.insert(&format!("{name}.w"), w);
        self.params.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn norm(&mut self, name: &str, channels: usize) {
        self.params.insert(&format!("{name}.g"), Tensor::ones(&[channels]));
        self.params.insert(&format!("{name}.b"), Tensor::zeros(&[channels]));
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, embed_dim: usize, sp: usize) {
        self.conv(&format!("{name}.conv1"), cout, cin, 3, sp);
        self.norm(&format!("{name}.gn1"), cout);
        self.linear(&format!("{name}.emb1"), embed_dim, cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3, sp);
        self.norm(&format!("{name}.gn2"), cout);
        self.linear(&format!("{name}.emb2"), embed_dim, cout);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cout, cin, 1, sp);
        }
    }
}

/// Deterministic generator parameter table; same `(cfg, seed)` gives a
/// bit-identical table.
pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let sp = cfg.spatial_rank;
    let mut init = Init::new(seed);
    let ed = cfg.embed_dim;
    let tracer = init.uniform(&[cfg.num_tracers, ed], 1.0 / (ed as f64).sqrt());
    init.params.insert("g.tracer_embed", tracer);
    init.conv("g.stem", cfg.base_width, cfg.in_channels, 3, sp);
    for d in 0..cfg.depth {
        let cin = cfg.base_width << d;
        let cout = cfg.base_width << (d + 1);
        init.conv(&format!("g.down{d}.reduce"), cout, cin, 3, sp);
        init.res_block(&format!("g.down{d}.res0"), cout, cout, ed, sp);
        init.res_block(&format!("g.down{d}.res1"), cout, cout, ed, sp);
    }
    let cb = cfg.base_width << cfg.depth;
    init.res_block("g.mid.res0", cb, cb, ed, sp);
    if cfg.use_bottleneck_attention {
        init.conv("g.mid.attn.q", cb, cb, 1, sp);
        init.conv("g.mid.attn.k", cb, cb, 1, sp);
        init.conv("g.mid.attn.v", cb, cb, 1, sp);
        init.conv_zero("g.mid.attn.proj", cb, cb, 1, sp);
    }
    init.res_block("g.mid.res1", cb, cb, ed, sp);
    for u in 0..cfg.depth {
        let cin = cfg.base_width << (cfg.depth - u);
        let cout = cin / 2;
        init.conv(&format!("g.up{u}.conv"), cout, cin, 3, sp);
        init.res_block(&format!("g.up{u}.res0"), 2 * cout, cout, ed, sp);
        init.res_block(&format!("g.up{u}.res1"), cout, cout, ed, sp);
    }
    init.norm("g.head.gn", cfg.base_width);
    init.conv_zero("g.head.conv", 1, cfg.base_width, 3, sp);
    Ok(init.params)
}

/// Deterministic discriminator parameter table.
pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let sp = cfg.spatial_rank;
    let mut init = Init::new(seed);
    let mut cin = cfg.in_channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        init.conv(&format!("d.stage{i}.conv"), w, cin, 4, sp);
        init.norm(&format!("d.stage{i}.norm"), w);
        cin = w;
    }
    init.conv("d.out", 1, cin, 3, sp);
    Ok(init.params)
}

/// Interleaved sinusoidal embedding of a timestep: position `2i` holds
/// `sin(t * f_i)`, position `2i+1` holds `cos(t * f_i)`, with geometric
/// frequencies from 1 down to 1/10000. At `t = 0` the pattern is
/// `[0, 1, 0, 1, ...]`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f32> {
    assert!(dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let ang = t as f64 * freq;
        out[2 * i] = ang.sin() as f32;
        out[2 * i + 1] = ang.cos() as f32;
    }
    out
}

/// Per-sample conditioning vectors: sinusoidal timestep embedding plus the
/// learned tracer embedding row, shape `[N, embed_dim]`. Per-block projection
/// happens inside the generator's residual blocks.
pub fn embed_condition(
    params: &ModelParams,
    cfg: &GeneratorConfig,
    infos: &[ConditionInfo],
) -> Result<Tensor> {
    if infos.is_empty() {
        return Err(NnError::Config {
            field: "infos",
            msg: "empty condition list".into(),
        });
    }
    for info in infos {
        if info.c >= cfg.num_tracers {
            return Err(NnError::Config {
                field: "c",
                msg: format!("tracer {} out of range [0, {})", info.c, cfg.num_tracers),
            });
        }
        if info.t == 0 {
            return Err(NnError::Config {
                field: "t",
                msg: "timestep is 1-based; got 0".into(),
            });
        }
    }
    let n = infos.len();
    let mut sin_data = Vec::with_capacity(n * cfg.embed_dim);
    for info in infos {
        sin_data.extend(sinusoidal_embedding(info.t, cfg.embed_dim));
    }
    let sin = Tensor::from_vec(&[n, cfg.embed_dim], sin_data);
    let indices: Vec<usize> = infos.iter().map(|i| i.c).collect();
    let tracer = params.get("g.tracer_embed").index_rows(&indices)?;
    Ok(sin.add(&tracer)?)
}

fn conv_layer(params: &ModelParams, name: &str, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let w = params.get(&format!("{name}.w"));
    let b = params.get(&format!("{name}.b"));
    let y = x.conv(w, stride, pad)?;
    let mut bshape = vec![1, b.shape()[0]];
    bshape.extend(std::iter::repeat(1).take(y.shape().len() - 2));
    Ok(y.add(&b.reshape(&bshape)?)?)
}

fn linear_layer(params: &ModelParams, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = params.get(&format!("{name}.w"));
    let b = params.get(&format!("{name}.b"));
    Ok(x.matmul(w, false, false)?.add(b)?)
}

const NORM_EPS: f64 = 1e-5;

/// Group normalization over `[N, C, spatial...]` with `min(8, C)` groups,
/// then per-channel affine.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let groups = group_count(c);
    let per = c / groups * spatial;
    let grouped = x.reshape(&[n, groups, per])?;
    let m = grouped.sum_to_shape(&[n, groups, 1])?.scale(1.0 / per as f64);
    let d = grouped.sub(&m)?;
    let v = d.square().sum_to_shape(&[n, groups, 1])?.scale(1.0 / per as f64);
    let y = d.div(&v.add_const(NORM_EPS).sqrt())?.reshape(&shape)?;
    affine_channels(&y, gamma, beta)
}

/// Normalizes over batch and spatial axes per channel (training-mode
/// statistics; this codebase never needs running inference statistics because
/// the discriminator only acts during training).
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    norm_over(x, gamma, beta, true)
}

/// Normalizes each sample and channel over its spatial extent alone.
pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    norm_over(x, gamma, beta, false)
}

fn norm_over(x: &Tensor, gamma: &Tensor, beta: &Tensor, over_batch: bool) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let mut stat_shape = vec![if over_batch { 1 } else { n }, c];
    stat_shape.extend(std::iter::repeat(1).take(shape.len() - 2));
    let count = if over_batch { n * spatial } else { spatial };
    let m = x.sum_to_shape(&stat_shape)?.scale(1.0 / count as f64);
    let d = x.sub(&m)?;
    let v = d.square().sum_to_shape(&stat_shape)?.scale(1.0 / count as f64);
    let y = d.div(&v.add_const(NORM_EPS).sqrt())?;
    affine_channels(&y, gamma, beta)
}

fn affine_channels(y: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mut cshape = vec![1, gamma.shape()[0]];
    cshape.extend(std::iter::repeat(1).take(y.shape().len() - 2));
    let g = gamma.reshape(&cshape)?;
    let b = beta.reshape(&cshape)?;
    Ok(y.mul(&g)?.add(&b)?)
}

fn res_block(params: &ModelParams, name: &str, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
    let spatial_ones = x.shape().len() - 2;
    let inject = |e: Tensor| -> Result<Tensor> {
        let mut s = e.shape().to_vec();
        s.extend(std::iter::repeat(1).take(spatial_ones));
        Ok(e.reshape(&s)?)
    };
    let e1 = inject(linear_layer(params, &format!("{name}.emb1"), emb)?)?;
    let h = conv_layer(params, &format!("{name}.conv1"), x, 1, 1)?;
    let h = group_norm(
        &h,
        params.get(&format!("{name}.gn1.g")),
        params.get(&format!("{name}.gn1.b")),
    )?;
    let h = h.add(&e1)?.silu();
    let e2 = inject(linear_layer(params, &format!("{name}.emb2"), emb)?)?;
    let h = conv_layer(params, &format!("{name}.conv2"), &h, 1, 1)?;
    let h = group_norm(
        &h,
        params.get(&format!("{name}.gn2.g")),
        params.get(&format!("{name}.gn2.b")),
    )?;
    let h = h.add(&e2)?.silu();
    let shortcut = if x.shape()[1] != h.shape()[1] {
        conv_layer(params, &format!("{name}.skip"), x, 1, 0)?
    } else {
        x.clone()
    };
    Ok(h.add(&shortcut)?)
}

fn bottleneck_attention(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let q = conv_layer(params, "g.mid.attn.q", x, 1, 0)?;
    let k = conv_layer(params, "g.mid.attn.k", x, 1, 0)?;
    let v = conv_layer(params, "g.mid.attn.v", x, 1, 0)?;
    let scale = 1.0 / (c as f64).sqrt();
    let mut outs = Vec::with_capacity(n);
    for b in 0..n {
        let qb = q.narrow(0, b, 1)?.reshape(&[c, s])?;
        let kb = k.narrow(0, b, 1)?.reshape(&[c, s])?;
        let vb = v.narrow(0, b, 1)?.reshape(&[c, s])?;
        // scores[i][j]: attention of query position i over key position j
        let scores = qb.matmul(&kb, true, false)?.scale(scale);
        let shift = Tensor::from_vec(
            &[s, 1],
            scores
                .data()
                .chunks(s)
                .map(|row| row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)))
                .collect(),
        );
        let centered = scores.sub(&shift)?;
        let e = centered.exp_via_sigmoid()?;
        let denom = e.sum_to_shape(&[s, 1])?;
        let attn = e.div(&denom)?;
        let ob = vb.matmul(&attn, false, true)?;
        outs.push(ob.reshape(&slice_shape(&shape))?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    let merged = Tensor::concat(&refs, 0)?;
    let proj = conv_layer(params, "g.mid.attn.proj", &merged, 1, 0)?;
    Ok(x.add(&proj)?)
}

fn slice_shape(full: &[usize]) -> Vec<usize> {
    let mut s = full.to_vec();
    s[0] = 1;
    s
}

/// Predicts the noise component from the noisy target, the stacked condition
/// channels, and per-sample (timestep, tracer) conditioning. Output has the
/// target's single-channel shape.
pub fn generator_forward(
    params: &ModelParams,
    cfg: &GeneratorConfig,
    x_t: &Tensor,
    cond: &Tensor,
    infos: &[ConditionInfo],
) -> Result<Tensor> {
    let n = *x_t.shape().first().unwrap_or(&0);
    if cond.shape().len() != x_t.shape().len()
        || cond.shape()[0] != n
        || cond.shape()[2..] != x_t.shape()[2..]
    {
        return Err(NnError::Tensor(TensorError::ShapeMismatch {
            op: "generator_forward",
            lhs: x_t.shape().to_vec(),
            rhs: cond.shape().to_vec(),
        }));
    }
    if x_t.shape()[1] + cond.shape()[1] != cfg.in_channels {
        return Err(NnError::Config {
            field: "in_channels",
            msg: format!(
                "x_t has {} + cond has {} channels, config expects {}",
                x_t.shape()[1],
                cond.shape()[1],
                cfg.in_channels
            ),
        });
    }
    if infos.len() != n {
        return Err(NnError::Config {
            field: "infos",
            msg: format!("{} condition infos for batch of {n}", infos.len()),
        });
    }
    for (i, &e) in x_t.shape()[2..].iter().enumerate() {
        if e % (1 << cfg.depth) != 0 {
            return Err(NnError::Config {
                field: "depth",
                msg: format!("spatial axis {i} extent {e} not divisible by 2^{}", cfg.depth),
            });
        }
    }
    let emb = embed_condition(params, cfg, infos)?;
    let input = Tensor::concat(&[x_t, cond], 1)?;
    let sp = cfg.spatial_rank;

    let mut h = conv_layer(params, "g.stem", &input, 1, 1)?;
    let mut skips = vec![h.clone()];
    for d in 0..cfg.depth {
        h = conv_layer(params, &format!("g.down{d}.reduce"), &h, 2, 1)?;
        h = res_block(params, &format!("g.down{d}.res0"), &h, &emb)?;
        h = res_block(params, &format!("g.down{d}.res1"), &h, &emb)?;
        if d + 1 < cfg.depth {
            skips.push(h.clone());
        }
    }
    h = res_block(params, "g.mid.res0", &h, &emb)?;
    if cfg.use_bottleneck_attention {
        h = bottleneck_attention(params, &h)?;
    }
    h = res_block(params, "g.mid.res1", &h, &emb)?;
    for u in 0..cfg.depth {
        h = h.upsample_nearest2(sp)?;
        h = conv_layer(params, &format!("g.up{u}.conv"), &h, 1, 1)?;
        let skip = &skips[cfg.depth - 1 - u];
        h = Tensor::concat(&[&h, skip], 1)?;
        h = res_block(params, &format!("g.up{u}.res0"), &h, &emb)?;
        h = res_block(params, &format!("g.up{u}.res1"), &h, &emb)?;
    }
    let h = group_norm(&h, params.get("g.head.gn.g"), params.get("g.head.gn.b"))?.silu();
    conv_layer(params, "g.head.conv", &h, 1, 1)
}

/// Patch discriminator: strided conv stages with normalization and LeakyReLU,
/// a final 1-channel conv, and a mean over the patch-logit map, yielding one
/// scalar per batch element (shape `[N]`).
pub fn discriminator_forward(
    params: &ModelParams,
    cfg: &DiscriminatorConfig,
    x: &Tensor,
) -> Result<Tensor> {
    if x.shape().len() != cfg.spatial_rank + 2 || x.shape()[1] != cfg.in_channels {
        return Err(NnError::Tensor(TensorError::ShapeMismatch {
            op: "discriminator_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![0, cfg.in_channels],
        }));
    }
    let n = x.shape()[0];
    let mut h = x.clone();
    for i in 0..3 {
        h = conv_layer(params, &format!("d.stage{i}.conv"), &h, 2, 1)?;
        let g = params.get(&format!("d.stage{i}.norm.g"));
        let b = params.get(&format!("d.stage{i}.norm.b"));
        h = match cfg.norm_kind {
            NormKind::Batch => batch_norm(&h, g, b)?,
            NormKind::Instance => instance_norm(&h, g, b)?,
        };
        h = h.leaky_relu(cfg.leaky_slope);
    }
    let logits = conv_layer(params, "d.out", &h, 1, 1)?;
    let patches: usize = logits.shape()[1..].iter().product();
    let mut per_sample = vec![n];
    per_sample.extend(std::iter::repeat(1).take(logits.shape().len() - 1));
    let summed = logits.sum_to_shape(&per_sample)?.reshape(&[n])?;
    Ok(summed.scale(1.0 / patches as f64))
}

impl Tensor {
    /// Elementwise `e^x = sigmoid(x) / sigmoid(-x)`, used by the attention
    /// softmax; stable for the pre-shifted scores (all `<= 0`) and the core
    /// op set needs no raw exponential anywhere else.
    fn exp_via_sigmoid(&self) -> crate::tensor::Result<Tensor> {
        let s = self.sigmoid();
        let ns = self.scale(-1.0).sigmoid();
        s.div(&ns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            in_channels: 3,
            base_width: 8,
            depth: 3,
            num_tracers: 3,
            embed_dim: 16,
            use_bottleneck_attention: false,
            spatial_rank: 2,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small_cfg();
        let a = build_generator(&cfg, 7).unwrap();
        let b = build_generator(&cfg, 7).unwrap();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let c = build_generator(&cfg, 8).unwrap();
        let differs = a
            .iter()
            .zip(c.iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
    }

    #[test]
    fn forward_shape_and_zero_head() {
        let cfg = small_cfg();
        let params = build_generator(&cfg, 3).unwrap();
        let x_t = Tensor::from_vec(&[3, 1, 32, 32], (0..3 * 1024).map(|i| (i % 7) as f32 * 0.1).collect());
        let cond = Tensor::from_vec(&[3, 2, 32, 32], (0..6 * 1024).map(|i| (i % 5) as f32 * 0.1).collect());
        let infos = [
            ConditionInfo { t: 1, c: 0 },
            ConditionInfo { t: 10, c: 1 },
            ConditionInfo { t: 200, c: 2 },
        ];
        let out = generator_forward(&params, &cfg, &x_t, &cond, &infos).unwrap();
        assert_eq!(out.shape(), &[3, 1, 32, 32]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottleneck_extent_matches_depth() {
        let cfg = small_cfg();
        assert_eq!(32 >> cfg.depth, 4);
    }

    #[test]
    fn tracer_label_changes_output() {
        let mut cfg = small_cfg();
        cfg.base_width = 8;
        let mut params = build_generator(&cfg, 11).unwrap();
        // the zero head hides everything; give it a nonzero kernel
        let hw = params.get("g.head.conv.w").clone();
        let bumped: Vec<f32> = hw.data().iter().map(|_| 0.05).collect();
        params.set("g.head.conv.w", Tensor::from_vec(hw.shape(), bumped));
        let x_t = Tensor::full(&[1, 1, 16, 16], 0.3);
        let cond = Tensor::full(&[1, 2, 16, 16], 0.2);
        let a = generator_forward(&params, &cfg, &x_t, &cond, &[ConditionInfo { t: 5, c: 0 }]).unwrap();
        let b = generator_forward(&params, &cfg, &x_t, &cond, &[ConditionInfo { t: 5, c: 1 }]).unwrap();
        let c = generator_forward(&params, &cfg, &x_t, &cond, &[ConditionInfo { t: 6, c: 0 }]).unwrap();
        let max_dc = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        let max_dt = a
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_dc > 0.0, "tracer label must influence output");
        assert!(max_dt > 0.0, "timestep must influence output");
    }

    #[test]
    fn sinusoidal_t0_alternates() {
        let e = sinusoidal_embedding(0, 8);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e1 = sinusoidal_embedding(1, 8);
        let e2 = sinusoidal_embedding(2, 8);
        assert_ne!(e1, e2);
    }

    #[test]
    fn embed_condition_is_deterministic_and_validates() {
        let cfg = small_cfg();
        let params = build_generator(&cfg, 1).unwrap();
        let a = embed_condition(&params, &cfg, &[ConditionInfo { t: 3, c: 1 }]).unwrap();
        let b = embed_condition(&params, &cfg, &[ConditionInfo { t: 3, c: 1 }]).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(embed_condition(&params, &cfg, &[ConditionInfo { t: 3, c: 9 }]).is_err());
        assert!(embed_condition(&params, &cfg, &[ConditionInfo { t: 0, c: 0 }]).is_err());
    }

    #[test]
    fn discriminator_contract() {
        let cfg = DiscriminatorConfig::default();
        let params = build_discriminator(&cfg, 5).unwrap();
        let x = Tensor::from_vec(&[3, 1, 32, 32], (0..3 * 1024).map(|i| ((i % 13) as f32 - 6.0) * 0.1).collect());
        let out = discriminator_forward(&params, &cfg, &x).unwrap();
        assert_eq!(out.shape(), &[3]);

        let mut zeroed = ModelParams::new();
        for (name, t) in params.iter() {
            zeroed.insert(name, Tensor::zeros(t.shape()));
        }
        let z = discriminator_forward(&zeroed, &cfg, &x).unwrap();
        assert_eq!(z.to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn group_norm_normalizes() {
        let x = Tensor::from_vec(&[1, 8, 2, 2], (0..32).map(|i| i as f32).collect());
        let y = group_norm(&x, &Tensor::ones(&[8]), &Tensor::zeros(&[8])).unwrap();
        // 8 groups of 1 channel: each 2x2 patch normalized on its own
        let mean: f32 = y.data()[0..4].iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-5);
        let var: f32 = y.data()[0..4].iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn params_table_round_trip() {
        let cfg = small_cfg();
        let params = build_generator(&cfg, 21).unwrap();
        let mut buf = Vec::new();
        params.write_to(&mut buf).unwrap();
        let loaded = ModelParams::read_from(&buf[..]).unwrap();
        assert_eq!(params.len(), loaded.len());
        for ((na, ta), (nb, tb)) in params.iter().zip(loaded.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn params_table_rejects_garbage() {
        let err = ModelParams::read_from(&b"nope"[..]).unwrap_err();
        assert!(matches!(err, NnError::Format { .. }));
        let mut buf = Vec::new();
        build_generator(&small_cfg(), 2).unwrap().write_to(&mut buf).unwrap();
        buf[4] = 9;
        assert!(matches!(
            ModelParams::read_from(&buf[..]),
            Err(NnError::Format { offset: 4, .. })
        ));
        let truncated = &buf[..buf.len() / 2];
        assert!(matches!(
            ModelParams::read_from(truncated),
            Err(NnError::Format { .. })
        ));
    }

    #[test]
    fn attention_path_runs() {
        let mut cfg = small_cfg();
        cfg.use_bottleneck_attention = true;
        let params = build_generator(&cfg, 9).unwrap();
        let x_t = Tensor::full(&[1, 1, 16, 16], 0.1);
        let cond = Tensor::full(&[1, 2, 16, 16], -0.2);
        let out = generator_forward(&params, &cfg, &x_t, &cond, &[ConditionInfo { t: 4, c: 2 }]).unwrap();
        assert_eq!(out.shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn three_d_paths_compile_and_run() {
        let cfg = GeneratorConfig {
            in_channels: 3,
            base_width: 8,
            depth: 2,
            num_tracers: 3,
            embed_dim: 8,
            use_bottleneck_attention: false,
            spatial_rank: 3,
        };
        let params = build_generator(&cfg, 13).unwrap();
        let x_t = Tensor::full(&[1, 1, 16, 16, 16], 0.2);
        let cond = Tensor::full(&[1, 2, 16, 16, 16], 0.1);
        let out = generator_forward(&params, &cfg, &x_t, &cond, &[ConditionInfo { t: 2, c: 0 }]).unwrap();
        assert_eq!(out.shape(), &[1, 1, 16, 16, 16]);

        let dcfg = DiscriminatorConfig {
            spatial_rank: 3,
            ..DiscriminatorConfig::default()
        };
        let dparams = build_discriminator(&dcfg, 14).unwrap();
        let score = discriminator_forward(&dparams, &dcfg, &Tensor::full(&[2, 1, 16, 16, 16], 0.3)).unwrap();
        assert_eq!(score.shape(), &[2]);
    }

    #[test]
    fn generator_gradients_reach_all_params() {
        let cfg = GeneratorConfig {
            in_channels: 3,
            base_width: 8,
            depth: 1,
            num_tracers: 2,
            embed_dim: 8,
            use_bottleneck_attention: false,
            spatial_rank: 2,
        };
        let params = build_generator(&cfg, 17).unwrap();
        let tape = Tape::new();
        let watched = params.watched(&tape);
        let x_t = Tensor::full(&[1, 1, 8, 8], 0.5);
        let cond = Tensor::full(&[1, 2, 8, 8], -0.1);
        let out = generator_forward(&watched, &cfg, &x_t, &cond, &[ConditionInfo { t: 3, c: 1 }]).unwrap();
        let loss = out.sum().unwrap();
        let grads = backward(&loss, false).unwrap();
        for (name, id) in watched.iter().map(|(n, t)| (n, t.node_id().unwrap())) {
            assert!(grads.contains_key(&id), "missing grad for {name}");
        }
        // the zero head kernel zeroes upstream gradients, but its own grad
        // sees the head input directly and must be live
        let head_id = watched.get("g.head.conv.w").node_id().unwrap();
        assert!(grads[&head_id].data().iter().any(|&v| v != 0.0));
    }
}
