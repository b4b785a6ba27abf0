//! Closed-form verification tools: the analytic optimal noise predictor for
//! isotropic Gaussian data, exact statistics of the sampler it drives, and a
//! finite-difference gradient checker.
//!
//! When every voxel of `x0` is drawn i.i.d. from `N(mu, sigma2)`, the
//! posterior mean `E[x0 | x_t]` is linear in `x_t` and the MSE-optimal noise
//! predictor follows in closed form. Substituting it for the generator
//! exercises the schedule, the clean-estimate inversion, and the full reverse
//! chain without any training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::diffusion::{DiffusionError, Schedule};
use crate::losses::LossError;
use crate::nn::{ModelParams, NnError};
use crate::tensor::{backward, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("config error: field {field}: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("{0}")]
    Contract(String),
    #[error("non-finite loss during {context}")]
    NonFinite { context: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Data distribution `x0 ~ N(mu, sigma2 * I)` with every voxel independent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianTarget {
    pub mu: f64,
    pub sigma2: f64,
}

impl GaussianTarget {
    pub fn new(mu: f64, sigma2: f64) -> Result<Self> {
        if !sigma2.is_finite() || sigma2 < 0.0 {
            return Err(OracleError::Config {
                field: "sigma2",
                msg: format!("variance must be finite and >= 0, got {sigma2}"),
            });
        }
        if !mu.is_finite() {
            return Err(OracleError::Config {
                field: "mu",
                msg: format!("mean must be finite, got {mu}"),
            });
        }
        Ok(Self { mu, sigma2 })
    }
}

fn check_t(sched: &Schedule, t: usize) -> Result<()> {
    if t == 0 || t > sched.t_max {
        return Err(OracleError::Diffusion(DiffusionError::BadTimestep {
            t,
            t_max: sched.t_max,
        }));
    }
    Ok(())
}

fn require_constant(x: &Tensor, op: &str) -> Result<()> {
    if x.node_id().is_some() {
        return Err(OracleError::Contract(format!(
            "{op} is a data-path operation; detach its input from the tape"
        )));
    }
    Ok(())
}

/// Coefficients of the affine posterior mean `E[x0 | x_t] = k_x * x_t + k_1`.
fn posterior_coeffs(sched: &Schedule, t: usize, target: &GaussianTarget) -> (f64, f64) {
    let ab = sched.alpha_bar[t - 1];
    let denom = ab * target.sigma2 + (1.0 - ab);
    let k_x = ab.sqrt() * target.sigma2 / denom;
    let k_1 = (1.0 - ab) * target.mu / denom;
    (k_x, k_1)
}

/// Posterior mean `E[x0 | x_t] = (sqrt(abar) sigma2 x_t + (1 - abar) mu) / (abar sigma2 + 1 - abar)`.
pub fn posterior_mean(
    x_t: &Tensor,
    t: usize,
    sched: &Schedule,
    target: &GaussianTarget,
) -> Result<Tensor> {
    check_t(sched, t)?;
    require_constant(x_t, "posterior_mean")?;
    let (k_x, k_1) = posterior_coeffs(sched, t, target);
    let data: Vec<f32> = x_t
        .data()
        .iter()
        .map(|&x| (k_x * x as f64 + k_1) as f32)
        .collect();
    Ok(Tensor::from_vec(x_t.shape(), data))
}

/// MSE-optimal noise predictor for the Gaussian target:
/// `eps* = (x_t - sqrt(abar) E[x0 | x_t]) / sqrt(1 - abar)`.
pub fn oracle_eps(
    x_t: &Tensor,
    t: usize,
    sched: &Schedule,
    target: &GaussianTarget,
) -> Result<Tensor> {
    check_t(sched, t)?;
    require_constant(x_t, "oracle_eps")?;
    let ab = sched.alpha_bar[t - 1];
    let sab = ab.sqrt();
    let s1ab = (1.0 - ab).sqrt();
    let (k_x, k_1) = posterior_coeffs(sched, t, target);
    let c_x = (1.0 - sab * k_x) / s1ab;
    let c_1 = -sab * k_1 / s1ab;
    let data: Vec<f32> = x_t
        .data()
        .iter()
        .map(|&x| (c_x * x as f64 + c_1) as f32)
        .collect();
    Ok(Tensor::from_vec(x_t.shape(), data))
}

/// Exact per-voxel mean and variance of `x_0` produced by the ancestral
/// sampler when [`oracle_eps`] is the predictor and `x_T ~ N(0, 1)`.
///
/// Each reverse step is affine in `x_t` plus independent Gaussian noise, so
/// the marginal propagates in closed form: `x_{t-1} = A x_t + B + sigma_t z`.
pub fn chain_stats(sched: &Schedule, target: &GaussianTarget) -> (f64, f64) {
    let (mut m, mut v) = (0.0f64, 1.0f64);
    for t in (1..=sched.t_max).rev() {
        let i = t - 1;
        let a = sched.alpha[i];
        let ab = sched.alpha_bar[i];
        let s1ab = (1.0 - ab).sqrt();
        let (k_x, k_1) = posterior_coeffs(sched, t, target);
        let c_x = (1.0 - ab.sqrt() * k_x) / s1ab;
        let c_1 = -ab.sqrt() * k_1 / s1ab;
        let c_eps = (1.0 - a) / s1ab;
        let big_a = (1.0 - c_eps * c_x) / a.sqrt();
        let big_b = -c_eps * c_1 / a.sqrt();
        m = big_a * m + big_b;
        v = big_a * big_a * v;
        if t > 1 {
            v += sched.sigma[i] * sched.sigma[i];
        }
    }
    (m, v)
}

/// Knobs of [`finite_diff_check`]. `floor` sets the gradient magnitude below
/// which the comparison becomes absolute (error divided by the floor instead
/// of the gradient), keeping f32 evaluation noise from dominating coordinates
/// whose true gradient is tiny.
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-3,
            floor: 1.0,
            max_coords_per_param: 16,
            seed: 0,
        }
    }
}

/// Worst coordinate found by the checker.
#[derive(Clone, Debug, Serialize)]
pub struct FdCoord {
    pub name: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub checked_coords: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
    pub worst: Option<FdCoord>,
}

fn scalar_loss(t: &Tensor, context: &str) -> Result<f64> {
    if t.len() != 1 {
        return Err(OracleError::Contract(format!(
            "loss must be scalar, got shape {:?}",
            t.shape()
        )));
    }
    let v = t.data()[0] as f64;
    if !v.is_finite() {
        return Err(OracleError::NonFinite {
            context: context.to_string(),
        });
    }
    Ok(v)
}

/// Central-difference check of tape gradients for a deterministic scalar loss.
///
/// The loss closure receives the tape and a parameter set; for the analytic
/// pass the parameters arrive watched on that tape, for the numeric
/// evaluations they arrive as plain constants with a coordinate perturbed.
/// Large parameters are subsampled to `max_coords_per_param` coordinates.
pub fn finite_diff_check<F>(params: &ModelParams, opts: &FdOptions, loss_fn: F) -> Result<FdReport>
where
    F: Fn(&Tape, &ModelParams) -> Result<Tensor>,
{
    if opts.step <= 0.0 {
        return Err(OracleError::Config {
            field: "step",
            msg: format!("must be positive, got {}", opts.step),
        });
    }
    let tape = Tape::new();
    let watched = params.watched(&tape);
    let loss = loss_fn(&tape, &watched)?;
    scalar_loss(&loss, "analytic evaluation")?;
    let grads = backward(&loss, true)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checked = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut worst: Option<FdCoord> = None;
    for ((name, tensor), watched_t) in params.iter().zip(watched.iter().map(|(_, t)| t)) {
        let analytic_full = watched_t.node_id().and_then(|id| grads.get(&id));
        let n = tensor.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, opts.max_coords_per_param).into_vec()
        };
        for coord in coords {
            let v = tensor.data()[coord] as f64;
            let vp = (v + opts.step) as f32;
            let vm = (v - opts.step) as f32;
            let h = vp as f64 - vm as f64;
            let eval = |pv: f32| -> Result<f64> {
                let mut data = tensor.to_vec();
                data[coord] = pv;
                let mut p = params.clone();
                p.set(name, Tensor::from_vec(tensor.shape(), data));
                let out = loss_fn(&Tape::new(), &p)?;
                scalar_loss(&out, &format!("perturbation of {name}[{coord}]"))
            };
            let numeric = (eval(vp)? - eval(vm)?) / h;
            let analytic = analytic_full.map_or(0.0, |g| g.data()[coord] as f64);
            let rel_err =
                (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            checked += 1;
            if rel_err > max_rel_err {
                max_rel_err = rel_err;
                worst = Some(FdCoord {
                    name: name.to_string(),
                    coord,
                    analytic,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(FdReport {
        checked_coords: checked,
        max_rel_err,
        tol: opts.tol,
        pass: max_rel_err < opts.tol,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{estimate_x0, make_schedule, sample_with, SigmaKind};
    use rand::Rng;

    fn sched50() -> Schedule {
        make_schedule(50, 0.01, 0.25, SigmaKind::SqrtBeta).unwrap()
    }

    #[test]
    fn gaussian_target_validates_fields() {
        assert!(GaussianTarget::new(0.3, 0.04).is_ok());
        assert!(GaussianTarget::new(0.3, 0.0).is_ok());
        assert!(matches!(
            GaussianTarget::new(0.3, -0.1),
            Err(OracleError::Config { field: "sigma2", .. })
        ));
        assert!(matches!(
            GaussianTarget::new(f64::NAN, 0.1),
            Err(OracleError::Config { field: "mu", .. })
        ));
    }

    #[test]
    fn oracle_eps_validates_timestep_and_constancy() {
        let s = sched50();
        let tg = GaussianTarget::new(0.0, 1.0).unwrap();
        let x = Tensor::zeros(&[4]);
        assert!(matches!(
            oracle_eps(&x, 0, &s, &tg),
            Err(OracleError::Diffusion(DiffusionError::BadTimestep { .. }))
        ));
        assert!(matches!(
            oracle_eps(&x, 51, &s, &tg),
            Err(OracleError::Diffusion(DiffusionError::BadTimestep { .. }))
        ));
        let tape = Tape::new();
        let w = tape.watch(&x);
        assert!(matches!(
            oracle_eps(&w, 1, &s, &tg),
            Err(OracleError::Contract(_))
        ));
    }

    #[test]
    fn degenerate_prior_pins_posterior_to_mu() {
        let s = sched50();
        let tg = GaussianTarget::new(0.4, 0.0).unwrap();
        let x = Tensor::from_vec(&[3], vec![-1.2, 0.1, 2.0]);
        for t in [1, 20, 50] {
            let pm = posterior_mean(&x, t, &s, &tg).unwrap();
            for &v in pm.data() {
                assert!((v - 0.4).abs() < 1e-7);
            }
            let e = oracle_eps(&x, t, &s, &tg).unwrap();
            let ab = s.alpha_bar[t - 1];
            for (i, &v) in e.data().iter().enumerate() {
                let want = (x.data()[i] as f64 - ab.sqrt() * 0.4) / (1.0 - ab).sqrt();
                assert!((v as f64 - want).abs() < 1e-6, "t={t}");
            }
        }
    }

    #[test]
    fn huge_variance_drives_eps_to_zero() {
        let s = sched50();
        let tg = GaussianTarget::new(0.3, 1e12).unwrap();
        let x = Tensor::from_vec(&[5], vec![-3.0, -0.5, 0.0, 1.0, 3.0]);
        for t in [1, 25, 50] {
            let e = oracle_eps(&x, t, &s, &tg).unwrap();
            for &v in e.data() {
                assert!(v.abs() < 1e-5, "t={t}, eps={v}");
            }
        }
    }

    #[test]
    fn estimate_x0_of_oracle_eps_is_posterior_mean() {
        let s = sched50();
        let tg = GaussianTarget::new(0.3, 0.04).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(&[64], (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect());
        for t in [1, 13, 25, 50] {
            let e = oracle_eps(&x, t, &s, &tg).unwrap();
            let est = estimate_x0(&x, &e, &s, t).unwrap();
            let pm = posterior_mean(&x, t, &s, &tg).unwrap();
            for (a, b) in est.data().iter().zip(pm.data()) {
                assert!((a - b).abs() < 1e-5, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn oracle_minimizes_mse_over_candidate_predictors() {
        let s = sched50();
        let tg = GaussianTarget::new(0.3, 0.04).unwrap();
        let t = 25;
        let ab = s.alpha_bar[t - 1];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut se_oracle = 0.0f64;
        let mut se_zero = 0.0f64;
        let mut se_scaled = 0.0f64;
        let mut se_shifted = 0.0f64;
        let (k_x, k_1) = posterior_coeffs(&s, t, &tg);
        let c_x = (1.0 - ab.sqrt() * k_x) / (1.0 - ab).sqrt();
        let c_1 = -ab.sqrt() * k_1 / (1.0 - ab).sqrt();
        for _ in 0..n {
            let x0 = tg.mu + tg.sigma2.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
            let star = c_x * xt + c_1;
            se_oracle += (eps - star) * (eps - star);
            se_zero += eps * eps;
            let sc = 1.05 * star;
            se_scaled += (eps - sc) * (eps - sc);
            let sh = star + 0.05;
            se_shifted += (eps - sh) * (eps - sh);
        }
        assert!(se_oracle < se_zero, "{se_oracle} vs zero {se_zero}");
        assert!(se_oracle < se_scaled, "{se_oracle} vs scaled {se_scaled}");
        assert!(se_oracle < se_shifted, "{se_oracle} vs shifted {se_shifted}");
    }

    #[test]
    fn chain_stats_is_schedule_faithful() {
        // closed-form terminal stats stay within a few percent of the target
        // for the verification schedule, and degrade if the chain is cut short
        let tg = GaussianTarget::new(0.3, 0.04).unwrap();
        let (m, v) = chain_stats(&sched50(), &tg);
        assert!((m / tg.mu - 1.0).abs() < 5e-3, "mean {m}");
        assert!((v / tg.sigma2 - 1.0).abs() < 0.05, "var {v}");
        for (mu, s2) in [(1.0, 0.25), (0.5, 0.1), (-0.2, 0.09)] {
            let tg = GaussianTarget::new(mu, s2).unwrap();
            let (m, v) = chain_stats(&sched50(), &tg);
            assert!((m / mu - 1.0).abs() < 0.01, "mu={mu}: mean {m}");
            assert!((v / s2 - 1.0).abs() < 0.05, "mu={mu}: var {v}");
        }
    }

    #[test]
    fn sampled_chains_match_closed_form_stats() {
        let s = sched50();
        let tg = GaussianTarget::new(0.3, 0.04).unwrap();
        let (cm, cv) = chain_stats(&s, &tg);
        let n = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let out = sample_with(&[n], &s, &mut rng, |x, t| {
            Ok(oracle_eps(x, t, &s, &tg).map_err(|e| {
                DiffusionError::Contract(e.to_string())
            })?)
        })
        .unwrap();
        let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = out
            .data()
            .iter()
            .map(|&v| (v as f64 - mean) * (v as f64 - mean))
            .sum::<f64>()
            / n as f64;
        // 5 standard errors of the Monte Carlo estimators
        let se_m = (cv / n as f64).sqrt();
        let se_v = cv * (2.0 / n as f64).sqrt();
        assert!((mean - cm).abs() < 5.0 * se_m, "mean {mean} vs {cm}");
        assert!((var - cv).abs() < 5.0 * se_v, "var {var} vs {cv}");
    }

    #[test]
    fn fd_quadratic_is_exact_with_dyadic_step() {
        let mut params = ModelParams::default();
        params.insert("p", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let opts = FdOptions {
            step: 0.25,
            tol: 1e-6,
            ..FdOptions::default()
        };
        let report = finite_diff_check(&params, &opts, |_tape, p| {
            let t = p.get("p");
            Ok(t.mul(t)?.sum()?)
        })
        .unwrap();
        assert_eq!(report.checked_coords, 3);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn fd_flags_non_finite_loss() {
        let mut params = ModelParams::default();
        params.insert("p", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let err = finite_diff_check(&params, &FdOptions::default(), |_tape, p| {
            Ok(p.get("p").sum()?.mul(&Tensor::scalar(f32::NAN))?)
        })
        .unwrap_err();
        assert!(matches!(err, OracleError::NonFinite { .. }));
    }

    #[test]
    fn fd_subsamples_large_parameters() {
        let mut params = ModelParams::default();
        params.insert("big", Tensor::from_vec(&[100], vec![0.5; 100]));
        let opts = FdOptions {
            max_coords_per_param: 8,
            step: 0.125,
            tol: 1e-5,
            ..FdOptions::default()
        };
        let report = finite_diff_check(&params, &opts, |_tape, p| {
            let t = p.get("big");
            Ok(t.mul(t)?.sum()?)
        })
        .unwrap();
        assert_eq!(report.checked_coords, 8);
        assert!(report.pass);
    }
}
