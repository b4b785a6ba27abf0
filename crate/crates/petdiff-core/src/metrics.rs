//! Image-quality metrics (PSNR, SSIM, MAE) and per-region evaluation over a
//! label mask.
//!
//! Metrics operate on flat f64 slices plus explicit dims, rank 2 or 3 (the
//! pipeline stores volumes as f32 and widens before evaluating, which keeps
//! tight analytic oracles like the 40 dB PSNR identity exact). SSIM
//! uses Gaussian-weighted windows evaluated only where the window lies fully
//! inside the image; masked SSIM assigns each window to the region its
//! center voxel belongs to, so regions near the border may have no windows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_len(op: &'static str, data: &[f64], dims: &[usize]) -> Result<()> {
    let n: usize = dims.iter().product();
    if data.len() != n {
        return Err(MetricsError::Shape {
            op,
            lhs: vec![data.len()],
            rhs: dims.to_vec(),
        });
    }
    if !(2..=3).contains(&dims.len()) {
        return Err(MetricsError::Contract(format!(
            "{op}: rank must be 2 or 3, got {}",
            dims.len()
        )));
    }
    Ok(())
}

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MetricsError::Shape {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// `10 log10(data_range^2 / MSE)`; +infinity when the inputs are identical.
pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    check_pair("psnr", a, b)?;
    if a.is_empty() {
        return Err(MetricsError::Contract("psnr: empty input".into()));
    }
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Mean absolute voxel difference.
pub fn mae(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("mae", a, b)?;
    if a.is_empty() {
        return Err(MetricsError::Contract("mae: empty input".into()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

fn row_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    strides
}

/// Separable Gaussian-weighted filtering with valid boundaries: output extent
/// along each axis shrinks by `window - 1`.
fn valid_gaussian_filter(data: &[f64], dims: &[usize], window: usize, sigma: f64) -> (Vec<f64>, Vec<usize>) {
    let half = (window - 1) as f64 / 2.0;
    let mut kernel: Vec<f64> = (0..window)
        .map(|i| (-0.5 * ((i as f64 - half) / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= ksum;
    }
    let mut cur: Vec<f64> = data.to_vec();
    let mut cur_dims = dims.to_vec();
    for axis in 0..dims.len() {
        let in_strides = row_major_strides(&cur_dims);
        let mut out_dims = cur_dims.clone();
        out_dims[axis] = cur_dims[axis] - (window - 1);
        let out_strides = row_major_strides(&out_dims);
        let mut next = vec![0.0f64; out_dims.iter().product()];
        for (oi, slot) in next.iter_mut().enumerate() {
            let mut rem = oi;
            let mut in_base = 0;
            let mut axis_pos = 0;
            for ax in 0..out_dims.len() {
                let c = rem / out_strides[ax];
                rem %= out_strides[ax];
                if ax == axis {
                    axis_pos = c;
                } else {
                    in_base += c * in_strides[ax];
                }
            }
            let mut acc = 0.0;
            for (ki, &w) in kernel.iter().enumerate() {
                acc += w * cur[in_base + (axis_pos + ki) * in_strides[axis]];
            }
            *slot = acc;
        }
        cur = next;
        cur_dims = out_dims;
    }
    (cur, cur_dims)
}

/// SSIM map over valid window centers, returned with the map dims and the
/// offset of the first center along each axis.
fn ssim_map(
    a: &[f64],
    b: &[f64],
    dims: &[usize],
    opts: &SsimOptions,
) -> Result<(Vec<f64>, Vec<usize>, usize)> {
    check_len("ssim", a, dims)?;
    check_pair("ssim", a, b)?;
    if opts.window % 2 == 0 || opts.window < 3 {
        return Err(MetricsError::Contract(format!(
            "ssim: window must be odd and >= 3, got {}",
            opts.window
        )));
    }
    if let Some(&d) = dims.iter().find(|&&d| d < opts.window) {
        return Err(MetricsError::Contract(format!(
            "ssim: extent {d} smaller than window {}",
            opts.window
        )));
    }
    let aa: Vec<f64> = a.iter().map(|&x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|&x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let (mu_a, map_dims) = valid_gaussian_filter(a, dims, opts.window, opts.sigma);
    let (mu_b, _) = valid_gaussian_filter(b, dims, opts.window, opts.sigma);
    let (e_aa, _) = valid_gaussian_filter(&aa, dims, opts.window, opts.sigma);
    let (e_bb, _) = valid_gaussian_filter(&bb, dims, opts.window, opts.sigma);
    let (e_ab, _) = valid_gaussian_filter(&ab, dims, opts.window, opts.sigma);
    let c1 = (opts.k1 * opts.data_range).powi(2);
    let c2 = (opts.k2 * opts.data_range).powi(2);
    let map: Vec<f64> = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect();
    Ok((map, map_dims, (opts.window - 1) / 2))
}

/// Mean structural similarity over valid Gaussian windows.
pub fn ssim(a: &[f64], b: &[f64], dims: &[usize], opts: &SsimOptions) -> Result<f64> {
    let (map, _, _) = ssim_map(a, b, dims, opts)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Region-level stats; `None` fields mark regions with no voxels (means) or
/// no valid window centers (masked SSIM).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub mean_pred: Option<f64>,
    pub mean_true: Option<f64>,
    pub abs_err: Option<f64>,
    pub masked_ssim: Option<f64>,
}

/// Per-region mean uptake comparison plus masked SSIM, for every region id
/// in `0..=max(labels)`.
pub fn region_eval(
    pred: &[f64],
    truth: &[f64],
    labels: &[f64],
    dims: &[usize],
    opts: &SsimOptions,
) -> Result<BTreeMap<usize, RegionStats>> {
    check_len("region_eval", pred, dims)?;
    check_pair("region_eval", pred, truth)?;
    check_pair("region_eval", pred, labels)?;
    let max_label = labels.iter().fold(0usize, |m, &l| m.max(l as usize));
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); max_label + 1];
    for i in 0..pred.len() {
        let l = labels[i] as usize;
        sums[l].0 += pred[i];
        sums[l].1 += truth[i];
        sums[l].2 += 1;
    }
    let (map, map_dims, off) = ssim_map(pred, truth, dims, opts)?;
    let mut ssim_acc = vec![(0.0f64, 0usize); max_label + 1];
    let map_strides = row_major_strides(&map_dims);
    let full_strides = row_major_strides(dims);
    for (mi, &v) in map.iter().enumerate() {
        let mut rem = mi;
        let mut center = 0;
        for ax in 0..map_dims.len() {
            let c = rem / map_strides[ax];
            rem %= map_strides[ax];
            center += (c + off) * full_strides[ax];
        }
        let l = labels[center] as usize;
        ssim_acc[l].0 += v;
        ssim_acc[l].1 += 1;
    }
    let mut out = BTreeMap::new();
    for r in 0..=max_label {
        let (sp, st, n) = sums[r];
        let (ss, sn) = ssim_acc[r];
        let stats = if n == 0 {
            RegionStats {
                mean_pred: None,
                mean_true: None,
                abs_err: None,
                masked_ssim: None,
            }
        } else {
            let mp = sp / n as f64;
            let mt = st / n as f64;
            RegionStats {
                mean_pred: Some(mp),
                mean_true: Some(mt),
                abs_err: Some((mp - mt).abs()),
                masked_ssim: if sn > 0 { Some(ss / sn as f64) } else { None },
            }
        };
        out.insert(r, stats);
    }
    Ok(out)
}

/// f64 (de)serialization that writes non-finite values as the strings
/// "inf" / "-inf" instead of JSON null.
pub mod inf_encoding {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("bad float string {other:?}"))),
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    #[serde(with = "inf_encoding")]
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub per_region: BTreeMap<String, RegionStats>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MeanStd {
    #[serde(with = "inf_encoding")]
    pub mean: f64,
    #[serde(with = "inf_encoding")]
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    pub fn from_values(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if !mean.is_finite() {
            return MeanStd { mean, std: f64::INFINITY };
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub mae: MeanStd,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_volume: Vec<VolumeMetrics>,
    pub summary: MetricsSummary,
}

impl MetricsReport {
    pub fn from_volumes(per_volume: Vec<VolumeMetrics>) -> MetricsReport {
        let collect = |f: fn(&VolumeMetrics) -> f64| -> Vec<f64> {
            per_volume.iter().map(f).collect()
        };
        let summary = MetricsSummary {
            psnr: MeanStd::from_values(&collect(|v| v.psnr)),
            ssim: MeanStd::from_values(&collect(|v| v.ssim)),
            mae: MeanStd::from_values(&collect(|v| v.mae)),
        };
        MetricsReport {
            per_volume,
            summary,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i % 17) as f64 / 16.0).collect()
    }

    #[test]
    fn psnr_oracles() {
        let a = ramp(256);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b: Vec<f64> = a.iter().map(|&v| v + 0.01).collect();
        close(psnr(&a, &b, 1.0).unwrap(), 40.0, 1e-6);
        let c: Vec<f64> = a.iter().map(|&v| v + 0.1).collect();
        close(psnr(&a, &c, 1.0).unwrap(), 20.0, 1e-5);
    }

    #[test]
    fn psnr_and_mae_permutation_invariant() {
        let a = ramp(64);
        let b: Vec<f64> = a.iter().map(|&v| v * 0.9 + 0.03).collect();
        let perm: Vec<usize> = (0..64).map(|i| (i * 29) % 64).collect();
        let ap: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
        let bp: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        close(psnr(&a, &b, 1.0).unwrap(), psnr(&ap, &bp, 1.0).unwrap(), 1e-12);
        close(mae(&a, &b).unwrap(), mae(&ap, &bp).unwrap(), 1e-12);
    }

    #[test]
    fn mae_oracles() {
        let a = ramp(100);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|&v| v + 0.02).collect();
        close(mae(&a, &b).unwrap(), 0.02, 1e-7);
        close(mae(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 0.5, 1e-7);
    }

    #[test]
    fn ssim_identity_symmetry_range() {
        let dims = [16, 16];
        let a: Vec<f64> = (0..256).map(|i| (i / 16) as f64 * 0.05 + (i % 16) as f64 * 0.01).collect();
        let opts = SsimOptions::default();
        close(ssim(&a, &a, &dims, &opts).unwrap(), 1.0, 1e-9);
        let b: Vec<f64> = a.iter().map(|&v| 1.0 - v * 0.8).collect();
        let s_ab = ssim(&a, &b, &dims, &opts).unwrap();
        let s_ba = ssim(&b, &a, &dims, &opts).unwrap();
        close(s_ab, s_ba, 1e-7);
        assert!((-1.0..=1.0).contains(&s_ab));
    }

    #[test]
    fn ssim_detects_sign_flip() {
        let dims = [32, 32];
        let a: Vec<f64> = (0..1024).map(|i| if i % 32 < 16 { 0.0 } else { 1.0 }).collect();
        let b: Vec<f64> = a.iter().map(|&v| 1.0 - v).collect();
        let s = ssim(&a, &b, &dims, &SsimOptions::default()).unwrap();
        assert!(s < 0.0, "sign flip should give negative ssim, got {s}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = vec![0.5f64; 64];
        assert!(matches!(
            ssim(&a, &a, &[8, 8], &SsimOptions::default()),
            Err(MetricsError::Contract(_))
        ));
    }

    #[test]
    fn ssim_runs_in_three_dims() {
        let dims = [12, 12, 12];
        let a: Vec<f64> = (0..12 * 12 * 12).map(|i| (i % 23) as f64 / 23.0).collect();
        let s = ssim(&a, &a, &dims, &SsimOptions::default()).unwrap();
        close(s, 1.0, 1e-9);
    }

    #[test]
    fn region_eval_oracles() {
        let dims = [16, 16];
        let n = 256;
        let labels: Vec<f64> = (0..n).map(|i| if i < 128 { 1.0 } else { 2.0 }).collect();
        let truth: Vec<f64> = (0..n).map(|i| if i < 128 { 0.4 } else { 0.7 }).collect();
        let pred: Vec<f64> = (0..n).map(|i| if i < 128 { 0.5 } else { 0.7 }).collect();
        let r = region_eval(&pred, &truth, &labels, &dims, &SsimOptions::default()).unwrap();
        let r1 = &r[&1];
        close(r1.mean_pred.unwrap(), 0.5, 1e-7);
        close(r1.mean_true.unwrap(), 0.4, 1e-7);
        close(r1.abs_err.unwrap(), 0.1, 1e-7);
        let r2 = &r[&2];
        close(r2.abs_err.unwrap(), 0.0, 1e-9);
        // region 0 is in range but empty
        assert_eq!(r[&0].mean_pred, None);
        assert_eq!(r[&0].masked_ssim, None);
    }

    #[test]
    fn region_eval_identity_gives_unit_masked_ssim() {
        let dims = [16, 16];
        let img: Vec<f64> = (0..256).map(|i| (i % 11) as f64 / 11.0).collect();
        let labels: Vec<f64> = (0..256).map(|i| (i % 3) as f64).collect();
        let r = region_eval(&img, &img, &labels, &dims, &SsimOptions::default()).unwrap();
        for (id, stats) in &r {
            close(stats.abs_err.unwrap(), 0.0, 1e-12);
            if let Some(ms) = stats.masked_ssim {
                close(ms, 1.0, 1e-9);
            } else {
                panic!("region {id} had no window centers in a dense mask");
            }
        }
    }

    #[test]
    fn whole_image_region_matches_global_means() {
        let dims = [16, 16];
        let pred = ramp(256);
        let truth: Vec<f64> = pred.iter().map(|&v| v * 0.7 + 0.1).collect();
        let labels = vec![0.0f64; 256];
        let r = region_eval(&pred, &truth, &labels, &dims, &SsimOptions::default()).unwrap();
        let global_pred = pred.iter().sum::<f64>() / 256.0;
        let global_truth = truth.iter().sum::<f64>() / 256.0;
        assert_eq!(r[&0].mean_pred.unwrap(), global_pred);
        assert_eq!(r[&0].mean_true.unwrap(), global_truth);
    }

    #[test]
    fn report_json_encodes_infinity() {
        let vm = VolumeMetrics {
            id: "v0".into(),
            psnr: f64::INFINITY,
            ssim: 1.0,
            mae: 0.0,
            per_region: BTreeMap::new(),
        };
        let report = MetricsReport::from_volumes(vec![vm]);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""), "{json}");
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert!(back.per_volume[0].psnr.is_infinite());
        assert!(back.summary.psnr.mean.is_infinite());
    }

    #[test]
    fn summary_mean_std() {
        let ms = MeanStd::from_values(&[1.0, 2.0, 3.0]);
        close(ms.mean, 2.0, 1e-12);
        close(ms.std, (2.0f64 / 3.0).sqrt(), 1e-12);
    }
}
