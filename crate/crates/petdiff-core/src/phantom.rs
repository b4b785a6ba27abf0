//! Procedural paired phantoms, their on-disk volume format, and the
//! per-region mean baseline used to judge trained models.
//!
//! Every sample derives from a single seed: an elliptical mask, a smoothed
//! random field quantized into tissue regions, a shared set of lesion blobs,
//! two structural condition channels from fixed lookup tables, and one target
//! per tracer from a tracer-specific table. Lesions are imprinted into both
//! condition channels and, with tracer-specific amplitude, into every target,
//! so they are predictable from the conditions while a per-region constant
//! baseline must average them away. The recipe also makes the tracer label
//! test-visible: ignoring it leaves at least the table differences
//! unexplained.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_TRACERS: usize = 3;
pub const TRACER_NAMES: [&str; NUM_TRACERS] = ["tracer0", "tracer1", "tracer2"];
pub const DEFAULT_REGIONS: usize = 5;

const LUT_T1: [f32; 9] = [0.03, 0.82, 0.35, 0.60, 0.18, 0.70, 0.47, 0.28, 0.55];
const LUT_T2F: [f32; 9] = [0.05, 0.25, 0.75, 0.40, 0.62, 0.15, 0.55, 0.80, 0.35];
const LUT_TARGET: [[f32; 9]; NUM_TRACERS] = [
    [0.02, 0.55, 0.25, 0.70, 0.40, 0.15, 0.50, 0.30, 0.60],
    [0.02, 0.20, 0.65, 0.35, 0.75, 0.45, 0.25, 0.60, 0.40],
    [0.02, 0.40, 0.45, 0.15, 0.55, 0.70, 0.35, 0.50, 0.25],
];
const LESION_T1: f64 = 0.7;
const LESION_T2F: f64 = 1.0;
const LESION_TRACER: [f64; NUM_TRACERS] = [1.0, 0.7, 1.3];

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("config error: field {field}: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("volume format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PhantomError + '_ {
    move |source| PhantomError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub value_range: String,
    pub seed: u64,
    pub kind: String,
}

/// Dense multi-channel scalar field, 2 or 3 spatial dims, channel-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Vec<usize>,
    pub channels: usize,
    pub data: Vec<f32>,
    pub meta: VolumeMeta,
}

impl Volume {
    pub fn new(dims: &[usize], channels: usize, data: Vec<f32>, meta: VolumeMeta) -> Result<Self> {
        let expect = dims.iter().product::<usize>() * channels;
        if data.len() != expect {
            return Err(PhantomError::Data(format!(
                "volume data length {} does not match dims {dims:?} x {channels} channels",
                data.len()
            )));
        }
        if !(2..=3).contains(&dims.len()) {
            return Err(PhantomError::Config {
                field: "dims",
                msg: format!("rank must be 2 or 3, got {}", dims.len()),
            });
        }
        Ok(Volume {
            dims: dims.to_vec(),
            channels,
            data,
            meta,
        })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

/// One paired training example: two condition channels, one target per
/// tracer, and the ground-truth region labels (stored as exact small floats).
#[derive(Clone, Debug)]
pub struct PhantomSample {
    pub cond_t1: Volume,
    pub cond_t2f: Volume,
    pub targets: Vec<Volume>,
    pub labels: Volume,
}

impl PhantomSample {
    pub fn label_at(&self, idx: usize) -> usize {
        self.labels.data[idx] as usize
    }
}

/// Separable Gaussian blur with truncated, border-renormalized kernels.
fn smooth(data: &[f32], dims: &[usize], sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let r = ((3.0 * sigma) as usize).max(1);
    let kernel: Vec<f64> = (-(r as isize)..=r as isize)
        .map(|x| (-0.5 * (x as f64 / sigma).powi(2)).exp())
        .collect();
    let mut cur = data.to_vec();
    let strides = row_major_strides(dims);
    for (axis, &extent) in dims.iter().enumerate() {
        let stride = strides[axis];
        let lines = cur.len() / extent;
        let mut next = vec![0.0f32; cur.len()];
        for line in 0..lines {
            // decompose the line index into a base offset skipping `axis`
            let mut rem = line;
            let mut base = 0;
            for (ax, &e) in dims.iter().enumerate().rev() {
                if ax == axis {
                    continue;
                }
                base += (rem % e) * strides[ax];
                rem /= e;
            }
            for i in 0..extent {
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for (ki, w) in kernel.iter().enumerate() {
                    let j = i as isize + ki as isize - r as isize;
                    if j < 0 || j >= extent as isize {
                        continue;
                    }
                    num += w * cur[base + j as usize * stride] as f64;
                    den += w;
                }
                next[base + i * stride] = (num / den) as f32;
            }
        }
        cur = next;
    }
    cur
}

fn row_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    strides
}

fn coords_of(idx: usize, dims: &[usize]) -> Vec<usize> {
    let mut c = vec![0; dims.len()];
    let mut rem = idx;
    for ax in (0..dims.len()).rev() {
        c[ax] = rem % dims[ax];
        rem /= dims[ax];
    }
    c
}

fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Linear-interpolation quantile of already-sorted values at fraction `p`.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Deterministic phantom from a seed. `dims` are 2 or 3 extents each >= 16;
/// `k` tissue regions with `k` in `[2, 8]`.
pub fn gen_phantom(seed: u64, dims: &[usize], k: usize) -> Result<PhantomSample> {
    if !(2..=3).contains(&dims.len()) {
        return Err(PhantomError::Config {
            field: "dims",
            msg: format!("rank must be 2 or 3, got {}", dims.len()),
        });
    }
    if let Some(&d) = dims.iter().find(|&&d| d < 16) {
        return Err(PhantomError::Config {
            field: "dims",
            msg: format!("each extent must be >= 16, got {d}"),
        });
    }
    if !(2..=8).contains(&k) {
        return Err(PhantomError::Config {
            field: "k",
            msg: format!("region count must be in [2, 8], got {k}"),
        });
    }
    let n: usize = dims.iter().product();
    let min_extent = *dims.iter().min().unwrap() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let axes: Vec<f64> = dims
        .iter()
        .map(|&d| rng.gen_range(0.35..0.45) * d as f64)
        .collect();
    let centers: Vec<f64> = dims.iter().map(|&d| (d - 1) as f64 / 2.0).collect();
    let mask: Vec<bool> = (0..n)
        .map(|idx| {
            let c = coords_of(idx, dims);
            let mut s = 0.0;
            for ax in 0..dims.len() {
                let d = (c[ax] as f64 - centers[ax]) / axes[ax];
                s += d * d;
            }
            s <= 1.0
        })
        .collect();

    let noise = randn_vec(&mut rng, n);
    let noise_f32: Vec<f32> = noise.iter().map(|&v| v as f32).collect();
    let field = smooth(&noise_f32, dims, min_extent / 3.0);

    let mut inside: Vec<f64> = mask
        .iter()
        .zip(&field)
        .filter(|(m, _)| **m)
        .map(|(_, &v)| v as f64)
        .collect();
    inside.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let thresholds: Vec<f64> = (1..k)
        .map(|i| quantile_sorted(&inside, i as f64 / k as f64))
        .collect();
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            if mask[i] {
                1 + thresholds.partition_point(|&q| q < field[i] as f64)
            } else {
                0
            }
        })
        .collect();

    let meta = |kind: &str| VolumeMeta {
        value_range: "0..1".into(),
        seed,
        kind: kind.into(),
    };

    // shared lesion blobs: centers anywhere inside the mask, one amplitude
    // each, imprinted into conditions and targets below
    let cand: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let mut lesion = vec![0.0f64; n];
    let nblob = 1 + rng.gen_range(0..3usize);
    for _ in 0..nblob {
        let center = coords_of(cand[rng.gen_range(0..cand.len())], dims);
        let amp = rng.gen_range(0.12..0.18);
        let sig = rng.gen_range(0.04..0.07) * min_extent;
        for (idx, v) in lesion.iter_mut().enumerate() {
            let c = coords_of(idx, dims);
            let mut s = 0.0;
            for ax in 0..dims.len() {
                let d = (c[ax] as f64 - center[ax] as f64) / sig;
                s += d * d;
            }
            *v += amp * (-0.5 * s).exp();
        }
    }

    let cond_noise_1 = randn_vec(&mut rng, n);
    let cond_noise_2 = randn_vec(&mut rng, n);
    let t1: Vec<f32> = (0..n)
        .map(|i| {
            ((LUT_T1[labels[i]] as f64 + LESION_T1 * lesion[i] + 0.02 * cond_noise_1[i])
                .clamp(0.0, 1.0)) as f32
        })
        .collect();
    let t2f: Vec<f32> = (0..n)
        .map(|i| {
            ((LUT_T2F[labels[i]] as f64 + LESION_T2F * lesion[i] + 0.02 * cond_noise_2[i])
                .clamp(0.0, 1.0)) as f32
        })
        .collect();

    let mut targets = Vec::with_capacity(NUM_TRACERS);
    for tr in 0..NUM_TRACERS {
        let img: Vec<f32> = (0..n)
            .map(|i| (LUT_TARGET[tr][labels[i]] as f64 + LESION_TRACER[tr] * lesion[i]) as f32)
            .collect();
        let smoothed = smooth(&img, dims, 0.5);
        let tgt_noise = randn_vec(&mut rng, n);
        let out: Vec<f32> = (0..n)
            .map(|i| ((smoothed[i] as f64 + 0.01 * tgt_noise[i]).clamp(0.0, 1.0)) as f32)
            .collect();
        targets.push(Volume::new(dims, 1, out, meta(&format!("target{tr}")))?);
    }

    let labels_f32: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
    let mut labels_meta = meta("labels");
    labels_meta.value_range = format!("labels 0..{k}");
    Ok(PhantomSample {
        cond_t1: Volume::new(dims, 1, t1, meta("cond_t1"))?,
        cond_t2f: Volume::new(dims, 1, t2f, meta("cond_t2f"))?,
        targets,
        labels: Volume::new(dims, 1, labels_f32, labels_meta)?,
    })
}

const VOLUME_MAGIC: &[u8; 4] = b"RDVF";
const VOLUME_VERSION: u8 = 1;

/// Serializes a volume: magic, version, rank, channels, reserved byte,
/// little-endian u32 extents, raw little-endian f32 data channel-major, then
/// a u32-length-prefixed JSON metadata blob. Writes are atomic via a
/// temp-file rename.
pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + v.data.len() * 4);
    buf.extend_from_slice(VOLUME_MAGIC);
    buf.push(VOLUME_VERSION);
    buf.push(v.dims.len() as u8);
    buf.push(v.channels as u8);
    buf.push(0);
    for &d in &v.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in &v.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let meta = serde_json::to_vec(&v.meta)?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);

    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&buf).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(PhantomError::Format {
                offset: self.offset as u64,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_volume(&bytes)
}

pub fn parse_volume(bytes: &[u8]) -> Result<Volume> {
    let mut cur = Cursor { bytes, offset: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != VOLUME_MAGIC {
        return Err(PhantomError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {VOLUME_MAGIC:?}"),
        });
    }
    let version = cur.take(1, "version")?[0];
    if version != VOLUME_VERSION {
        return Err(PhantomError::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {VOLUME_VERSION}"),
        });
    }
    let rank = cur.take(1, "rank")?[0] as usize;
    if !(2..=3).contains(&rank) {
        return Err(PhantomError::Format {
            offset: 5,
            msg: format!("rank must be 2 or 3, got {rank}"),
        });
    }
    let channels = cur.take(1, "channels")?[0] as usize;
    cur.take(1, "reserved byte")?;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(cur.u32("extent")? as usize);
    }
    let n = dims.iter().product::<usize>() * channels;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let b = cur.take(4, "voxel data")?;
        data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    }
    let meta_len = cur.u32("metadata length")? as usize;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    let meta: VolumeMeta = serde_json::from_slice(meta_bytes).map_err(|e| PhantomError::Format {
        offset: (cur.offset - meta_len) as u64,
        msg: format!("invalid metadata JSON: {e}"),
    })?;
    Volume::new(&dims, channels, data, meta)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub top_seed: u64,
    pub dims: Vec<usize>,
    pub num_regions: usize,
    pub tracers: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

const SAMPLE_FILES: [&str; 6] = [
    "cond_t1.rdvf",
    "cond_t2f.rdvf",
    "target0.rdvf",
    "target1.rdvf",
    "target2.rdvf",
    "labels.rdvf",
];

fn write_sample(dir: &Path, sample: &PhantomSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_volume(&dir.join(SAMPLE_FILES[0]), &sample.cond_t1)?;
    write_volume(&dir.join(SAMPLE_FILES[1]), &sample.cond_t2f)?;
    for (tr, tgt) in sample.targets.iter().enumerate() {
        write_volume(&dir.join(SAMPLE_FILES[2 + tr]), tgt)?;
    }
    write_volume(&dir.join(SAMPLE_FILES[5]), &sample.labels)?;
    Ok(())
}

pub fn load_sample(manifest_dir: &Path, entry: &ManifestEntry) -> Result<PhantomSample> {
    let dir = manifest_dir.join(&entry.path);
    let cond_t1 = read_volume(&dir.join(SAMPLE_FILES[0]))?;
    let cond_t2f = read_volume(&dir.join(SAMPLE_FILES[1]))?;
    let targets = (0..NUM_TRACERS)
        .map(|tr| read_volume(&dir.join(SAMPLE_FILES[2 + tr])))
        .collect::<Result<Vec<_>>>()?;
    let labels = read_volume(&dir.join(SAMPLE_FILES[5]))?;
    Ok(PhantomSample {
        cond_t1,
        cond_t2f,
        targets,
        labels,
    })
}

/// Per-split sample seeds: train uses `top_seed + i`, test uses
/// `top_seed + 100_000 + i` (wrapping), so splits never collide for fewer
/// than 100 000 training samples.
fn split_seed(top_seed: u64, test: bool, index: usize) -> u64 {
    let base = if test { 100_000u64 } else { 0 };
    top_seed.wrapping_add(base).wrapping_add(index as u64)
}

/// Generates the dataset tree plus `manifest.json`. Refuses to write into an
/// existing non-empty directory unless `force` is set.
pub fn make_dataset(
    top_seed: u64,
    n_train: usize,
    n_test: usize,
    dims: &[usize],
    k: usize,
    out_dir: &Path,
    force: bool,
) -> Result<Manifest> {
    if n_train == 0 || n_test == 0 {
        return Err(PhantomError::Config {
            field: "n_train",
            msg: "both splits need at least one sample".into(),
        });
    }
    if n_train >= 100_000 {
        return Err(PhantomError::Config {
            field: "n_train",
            msg: "must stay below 100000 to keep split seeds disjoint".into(),
        });
    }
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(io_err(out_dir))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(PhantomError::Data(format!(
                "output directory {} is not empty; pass force to overwrite",
                out_dir.display()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut manifest = Manifest {
        version: 1,
        top_seed,
        dims: dims.to_vec(),
        num_regions: k,
        tracers: TRACER_NAMES.iter().map(|s| s.to_string()).collect(),
        train: Vec::with_capacity(n_train),
        test: Vec::with_capacity(n_test),
    };
    for (is_test, count) in [(false, n_train), (true, n_test)] {
        for i in 0..count {
            let seed = split_seed(top_seed, is_test, i);
            let split = if is_test { "test" } else { "train" };
            let rel = format!("{split}/sample_{i:04}");
            let sample = gen_phantom(seed, dims, k)?;
            write_sample(&out_dir.join(&rel), &sample)?;
            let entry = ManifestEntry { path: rel, seed };
            if is_test {
                manifest.test.push(entry);
            } else {
                manifest.train.push(entry);
            }
        }
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    let mpath = out_dir.join("manifest.json");
    fs::write(&mpath, json).map_err(io_err(&mpath))?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Per-region, per-tracer mean intensities fitted on training samples; the
/// strongest label-only predictor and the baseline trained models must beat.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionLut {
    /// `means[tracer][region]`, regions `0..=k`.
    pub means: Vec<Vec<f64>>,
}

pub fn fit_region_lut(samples: &[PhantomSample], k: usize) -> RegionLut {
    let mut sums = vec![vec![0.0f64; k + 1]; NUM_TRACERS];
    let mut counts = vec![vec![0.0f64; k + 1]; NUM_TRACERS];
    for s in samples {
        for tr in 0..NUM_TRACERS {
            for (i, &v) in s.targets[tr].data.iter().enumerate() {
                let l = s.label_at(i).min(k);
                sums[tr][l] += v as f64;
                counts[tr][l] += 1.0;
            }
        }
    }
    let means = sums
        .into_iter()
        .zip(counts)
        .map(|(srow, crow)| {
            srow.iter()
                .zip(&crow)
                .map(|(&s, &c)| if c > 0.0 { s / c } else { 0.0 })
                .collect()
        })
        .collect();
    RegionLut { means }
}

impl RegionLut {
    pub fn predict(&self, labels: &Volume, tracer: usize) -> Vec<f32> {
        labels
            .data
            .iter()
            .map(|&l| {
                let idx = (l as usize).min(self.means[tracer].len() - 1);
                self.means[tracer][idx] as f32
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic() {
        let a = gen_phantom(42, &[32, 32], 5).unwrap();
        let b = gen_phantom(42, &[32, 32], 5).unwrap();
        assert_eq!(a.cond_t1.data, b.cond_t1.data);
        assert_eq!(a.targets[2].data, b.targets[2].data);
        assert_eq!(a.labels.data, b.labels.data);
        let c = gen_phantom(43, &[32, 32], 5).unwrap();
        assert_ne!(a.cond_t1.data, c.cond_t1.data);
    }

    #[test]
    fn mask_area_fraction_in_bounds_over_200_seeds() {
        for seed in 0..200u64 {
            let s = gen_phantom(seed, &[32, 32], 5).unwrap();
            let inside = s.labels.data.iter().filter(|&&l| l > 0.0).count();
            let frac = inside as f64 / s.labels.voxels() as f64;
            assert!(
                (0.30..=0.65).contains(&frac),
                "seed {seed}: mask fraction {frac:.3}"
            );
        }
    }

    #[test]
    fn tracer_targets_differ() {
        for seed in [0u64, 7, 99] {
            let s = gen_phantom(seed, &[32, 32], 5).unwrap();
            for a in 0..NUM_TRACERS {
                for b in (a + 1)..NUM_TRACERS {
                    let max_d = s.targets[a]
                        .data
                        .iter()
                        .zip(&s.targets[b].data)
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0f32, f32::max);
                    assert!(max_d > 0.05, "seed {seed}: tracers {a},{b} max delta {max_d}");
                }
            }
        }
    }

    #[test]
    fn intensities_and_labels_in_range() {
        let s = gen_phantom(3, &[32, 32], 5).unwrap();
        for v in [&s.cond_t1, &s.cond_t2f, &s.targets[0], &s.targets[1], &s.targets[2]] {
            assert!(v.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        assert!(s.labels.data.iter().all(|&l| l >= 0.0 && l <= 5.0 && l.fract() == 0.0));
        let labels_present: std::collections::BTreeSet<u8> =
            s.labels.data.iter().map(|&l| l as u8).collect();
        assert!(labels_present.contains(&0), "background must exist");
        assert!(labels_present.len() >= 4, "most regions should appear");
    }

    #[test]
    fn rejects_bad_dims_and_k() {
        assert!(matches!(
            gen_phantom(0, &[8, 32], 5),
            Err(PhantomError::Config { field: "dims", .. })
        ));
        assert!(matches!(
            gen_phantom(0, &[32], 5),
            Err(PhantomError::Config { field: "dims", .. })
        ));
        assert!(matches!(
            gen_phantom(0, &[32, 32], 1),
            Err(PhantomError::Config { field: "k", .. })
        ));
        assert!(matches!(
            gen_phantom(0, &[32, 32], 9),
            Err(PhantomError::Config { field: "k", .. })
        ));
    }

    #[test]
    fn three_d_phantom_works() {
        let s = gen_phantom(5, &[16, 16, 16], 4).unwrap();
        assert_eq!(s.cond_t1.dims, vec![16, 16, 16]);
        let inside = s.labels.data.iter().filter(|&&l| l > 0.0).count();
        assert!(inside > 0);
    }

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = gen_phantom(11, &[32, 32], 5).unwrap();
        let path = dir.path().join("t.rdvf");
        write_volume(&path, &s.targets[1]).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, s.targets[1]);
        let a_bits: Vec<u32> = s.targets[1].data.iter().map(|v| v.to_bits()).collect();
        let b_bits: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a_bits, b_bits);
    }

    #[test]
    fn volume_format_errors_carry_offsets() {
        let s = gen_phantom(1, &[16, 16], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rdvf");
        write_volume(&path, &s.cond_t1).unwrap();
        let mut bytes = fs::read(&path).unwrap();

        let err = parse_volume(&bytes[..10]).unwrap_err();
        match err {
            PhantomError::Format { offset, ref msg } => {
                assert!(msg.contains("truncated"), "{msg}");
                assert!(offset >= 7, "offset {offset}");
            }
            other => panic!("unexpected error {other:?}"),
        }

        bytes[4] = 2;
        assert!(matches!(
            parse_volume(&bytes),
            Err(PhantomError::Format { offset: 4, .. })
        ));

        bytes[4] = 1;
        bytes[0] = b'X';
        assert!(matches!(
            parse_volume(&bytes),
            Err(PhantomError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn dataset_manifest_and_refusal() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let m = make_dataset(7, 3, 2, &[16, 16], 3, &out, false).unwrap();
        assert_eq!(m.train.len(), 3);
        assert_eq!(m.test.len(), 2);
        let train_seeds: Vec<u64> = m.train.iter().map(|e| e.seed).collect();
        let test_seeds: Vec<u64> = m.test.iter().map(|e| e.seed).collect();
        for s in &test_seeds {
            assert!(!train_seeds.contains(s));
        }
        let loaded = load_manifest(&out.join("manifest.json")).unwrap();
        assert_eq!(loaded.train.len(), 3);
        let sample = load_sample(&out, &loaded.train[0]).unwrap();
        assert_eq!(sample.targets.len(), NUM_TRACERS);

        let err = make_dataset(7, 3, 2, &[16, 16], 3, &out, false).unwrap_err();
        assert!(matches!(err, PhantomError::Data(_)));
        make_dataset(7, 3, 2, &[16, 16], 3, &out, true).unwrap();
    }

    #[test]
    fn dataset_regeneration_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        make_dataset(21, 2, 1, &[16, 16], 3, &out_a, false).unwrap();
        make_dataset(21, 2, 1, &[16, 16], 3, &out_b, false).unwrap();
        for rel in ["train/sample_0000/target0.rdvf", "test/sample_0000/labels.rdvf"] {
            let a = fs::read(out_a.join(rel)).unwrap();
            let b = fs::read(out_b.join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }
    }

    #[test]
    fn region_lut_baseline_beats_threshold() {
        let train: Vec<PhantomSample> = (0..60)
            .map(|i| gen_phantom(split_seed(77, false, i), &[32, 32], 5).unwrap())
            .collect();
        let test: Vec<PhantomSample> = (0..10)
            .map(|i| gen_phantom(split_seed(77, true, i), &[32, 32], 5).unwrap())
            .collect();
        let lut = fit_region_lut(&train, 5);
        for tr in 0..NUM_TRACERS {
            let mut mae = 0.0f64;
            for s in &test {
                let pred = lut.predict(&s.labels, tr);
                let err: f64 = pred
                    .iter()
                    .zip(&s.targets[tr].data)
                    .map(|(p, t)| (p - t).abs() as f64)
                    .sum();
                mae += err / s.targets[tr].data.len() as f64;
            }
            mae /= test.len() as f64;
            assert!(mae < 0.03, "tracer {tr}: baseline MAE {mae:.4}");
        }
    }
}
