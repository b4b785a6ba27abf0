//! Forward noising process, reverse ancestral sampler, and the noise
//! schedule connecting them.
//!
//! Schedule constants are kept in f64 and the per-element arithmetic of
//! [`q_sample`], [`estimate_x0`] and [`p_sample_step`] runs in f64 with a
//! single rounding to f32 storage, so the noising round trip stays exact to
//! well under 1e-5 even when `1/sqrt(alpha_bar)` reaches the hundreds.
//!
//! [`q_sample`] and [`p_sample_step`] are data-path operations: they reject
//! tape-linked inputs rather than silently dropping gradients. Only
//! [`estimate_x0`] participates in differentiation, because training
//! supervises the clean prediction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, ConditionInfo, GeneratorConfig, ModelParams};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("config error: field {field}: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("timestep {t} outside [1, {t_max}]")]
    BadTimestep { t: usize, t_max: usize },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Variance used for the ancestral step's injected noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// `sigma_t = sqrt(beta_t)`.
    SqrtBeta,
    /// Posterior variance `sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t`
    /// with `abar_0 = 1`, so `sigma_1 = 0`.
    Posterior,
}

/// Precomputed constants of a linear-beta schedule, all indexed by `t - 1`.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Schedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(DiffusionError::BadTimestep { t, t_max: self.t_max });
        }
        Ok(())
    }
}

/// Builds a linear schedule from `beta_1` to `beta_t_max` inclusive; a
/// single-step schedule uses `beta_1` alone.
pub fn make_schedule(
    t_max: usize,
    beta_1: f64,
    beta_t_max: f64,
    sigma_kind: SigmaKind,
) -> Result<Schedule> {
    if t_max == 0 {
        return Err(DiffusionError::Config {
            field: "t_max",
            msg: "must be >= 1".into(),
        });
    }
    if beta_1 <= 0.0 {
        return Err(DiffusionError::Config {
            field: "beta_1",
            msg: format!("must be positive, got {beta_1}"),
        });
    }
    if beta_t_max >= 1.0 {
        return Err(DiffusionError::Config {
            field: "beta_t_max",
            msg: format!("must be below 1, got {beta_t_max}"),
        });
    }
    if beta_1 > beta_t_max {
        return Err(DiffusionError::Config {
            field: "beta_1",
            msg: format!("must not exceed beta_t_max, got {beta_1} > {beta_t_max}"),
        });
    }
    let beta: Vec<f64> = if t_max == 1 {
        vec![beta_1]
    } else {
        (0..t_max)
            .map(|i| beta_1 + (beta_t_max - beta_1) * i as f64 / (t_max - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for &a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma: Vec<f64> = match sigma_kind {
        SigmaKind::SqrtBeta => beta.iter().map(|b| b.sqrt()).collect(),
        SigmaKind::Posterior => (0..t_max)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                ((1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
            })
            .collect(),
    };
    Ok(Schedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

fn require_constant(t: &Tensor, op: &str) -> Result<()> {
    if t.node_id().is_some() {
        return Err(DiffusionError::Contract(format!(
            "{op} is a data-path operation; detach its inputs from the tape"
        )));
    }
    Ok(())
}

fn require_same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Tensor(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }));
    }
    Ok(())
}

/// Forward noising: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &Tensor, eps: &Tensor, sched: &Schedule, t: usize) -> Result<Tensor> {
    sched.check_t(t)?;
    require_same_shape(x0, eps, "q_sample")?;
    require_constant(x0, "q_sample")?;
    require_constant(eps, "q_sample")?;
    let ab = sched.alpha_bar[t - 1];
    let a = ab.sqrt();
    let b = (1.0 - ab).sqrt();
    let data: Vec<f32> = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    Ok(Tensor::from_vec(x0.shape(), data))
}

/// Inverts [`q_sample`] given a noise estimate:
/// `x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
/// Differentiable in both arguments.
pub fn estimate_x0(x_t: &Tensor, eps_hat: &Tensor, sched: &Schedule, t: usize) -> Result<Tensor> {
    sched.check_t(t)?;
    require_same_shape(x_t, eps_hat, "estimate_x0")?;
    let ab = sched.alpha_bar[t - 1];
    Ok(x_t.estimate_x0_fused(eps_hat, ab.sqrt(), (1.0 - ab).sqrt())?)
}

/// One reverse ancestral step:
/// `x_{t-1} = (x_t - (1 - alpha_t)/sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t z`.
/// The noise draw `z` is required for `t > 1` and forbidden at `t = 1`.
pub fn p_sample_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    sched: &Schedule,
    t: usize,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_t(t)?;
    require_same_shape(x_t, eps_hat, "p_sample_step")?;
    require_constant(x_t, "p_sample_step")?;
    require_constant(eps_hat, "p_sample_step")?;
    match (t, z) {
        (1, Some(_)) => {
            return Err(DiffusionError::Contract(
                "the final step t = 1 must not inject noise; pass z = None".into(),
            ))
        }
        (_, Some(zt)) => {
            require_same_shape(x_t, zt, "p_sample_step")?;
            require_constant(zt, "p_sample_step")?;
        }
        (1, None) => {}
        (_, None) => {
            return Err(DiffusionError::Contract(format!(
                "step t = {t} requires a noise draw z"
            )))
        }
    }
    let a = sched.alpha[t - 1];
    let ab = sched.alpha_bar[t - 1];
    let c_eps = (1.0 - a) / (1.0 - ab).sqrt();
    let inv_sqrt_a = 1.0 / a.sqrt();
    let sigma = sched.sigma[t - 1];
    let zero = vec![0.0f32; x_t.len()];
    let z_data = z.map(|zt| zt.data()).unwrap_or(&zero);
    let data: Vec<f32> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z_data)
        .map(|((&x, &e), &zv)| {
            ((x as f64 - c_eps * e as f64) * inv_sqrt_a + sigma * zv as f64) as f32
        })
        .collect();
    Ok(Tensor::from_vec(x_t.shape(), data))
}

/// Standard normal tensor of the given shape.
pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(shape, data)
}

/// Full reverse chain driven by an arbitrary noise predictor: starts from a
/// standard normal draw of `shape`, then applies `t_max` ancestral steps.
///
/// The rng is consumed in a fixed order (initial draw, then one draw per
/// step above 1), so equal seeds give bit-identical chains.
pub fn sample_with<F>(
    shape: &[usize],
    sched: &Schedule,
    rng: &mut impl Rng,
    mut predict: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut x = randn(shape, rng);
    for t in (1..=sched.t_max).rev() {
        let eps_hat = predict(&x, t)?;
        let z = if t > 1 { Some(randn(shape, rng)) } else { None };
        x = p_sample_step(&x, &eps_hat, sched, t, z.as_ref())?;
    }
    Ok(x)
}

/// Full reverse chain for a batch with the generator as predictor. The output
/// is shaped like one target channel over `cond`'s batch and spatial extents.
pub fn sample(
    params: &ModelParams,
    cfg: &GeneratorConfig,
    sched: &Schedule,
    cond: &Tensor,
    tracers: &[usize],
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let n = *cond.shape().first().ok_or_else(|| DiffusionError::Contract(
        "cond must have a batch axis".into(),
    ))?;
    if tracers.len() != n {
        return Err(DiffusionError::Contract(format!(
            "{} tracer labels for batch of {n}",
            tracers.len()
        )));
    }
    let mut shape = cond.shape().to_vec();
    shape[1] = 1;
    sample_with(&shape, sched, rng, |x, t| {
        let infos: Vec<ConditionInfo> =
            tracers.iter().map(|&c| ConditionInfo { t, c }).collect();
        Ok(nn::generator_forward(params, cfg, x, cond, &infos)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints_are_exact() {
        let s = make_schedule(1000, 5e-4, 1.95e-2, SigmaKind::SqrtBeta).unwrap();
        assert_eq!(s.beta[0], 5e-4);
        assert_eq!(s.beta[999], 1.95e-2);
        assert_eq!(s.alpha[0], 1.0 - 5e-4);
        assert_eq!(s.alpha_bar[0], 1.0 - 5e-4);
        assert!(s.alpha_bar[999] > 0.0 && s.alpha_bar[999] < 1e-4);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.01, 0.39, SigmaKind::SqrtBeta).unwrap();
        assert_eq!(s.beta, vec![0.01]);
        assert_eq!(s.alpha_bar, vec![0.99]);
    }

    #[test]
    fn schedule_rejects_bad_fields() {
        assert!(matches!(
            make_schedule(0, 0.1, 0.2, SigmaKind::SqrtBeta),
            Err(DiffusionError::Config { field: "t_max", .. })
        ));
        assert!(matches!(
            make_schedule(10, 0.0, 0.2, SigmaKind::SqrtBeta),
            Err(DiffusionError::Config { field: "beta_1", .. })
        ));
        assert!(matches!(
            make_schedule(10, 0.1, 1.0, SigmaKind::SqrtBeta),
            Err(DiffusionError::Config { field: "beta_t_max", .. })
        ));
        assert!(matches!(
            make_schedule(10, 0.3, 0.2, SigmaKind::SqrtBeta),
            Err(DiffusionError::Config { field: "beta_1", .. })
        ));
    }

    #[test]
    fn posterior_sigma_starts_at_zero() {
        let s = make_schedule(50, 0.01, 0.39, SigmaKind::Posterior).unwrap();
        assert_eq!(s.sigma[0], 0.0);
        let sb = make_schedule(50, 0.01, 0.39, SigmaKind::SqrtBeta).unwrap();
        for t in 0..50 {
            assert!(s.sigma[t] <= sb.sigma[t] + 1e-15);
        }
    }

    #[test]
    fn round_trip_with_true_noise() {
        let s = make_schedule(200, 2.5e-3, 9.75e-2, SigmaKind::SqrtBeta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|_| rng.gen_range(0.0..1.0)).collect());
        let eps = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect());
        for t in [1, 50, 100, 200] {
            let xt = q_sample(&x0, &eps, &s, t).unwrap();
            let back = estimate_x0(&xt, &eps, &s, t).unwrap();
            for (orig, rec) in x0.data().iter().zip(back.data()) {
                assert!((orig - rec).abs() < 1e-5, "t={t}: {orig} vs {rec}");
            }
        }
    }

    #[test]
    fn q_sample_validates_t_and_constancy() {
        let s = make_schedule(10, 0.01, 0.1, SigmaKind::SqrtBeta).unwrap();
        let x = Tensor::zeros(&[4]);
        assert!(matches!(
            q_sample(&x, &x, &s, 0),
            Err(DiffusionError::BadTimestep { .. })
        ));
        assert!(matches!(
            q_sample(&x, &x, &s, 11),
            Err(DiffusionError::BadTimestep { .. })
        ));
        let tape = crate::tensor::Tape::new();
        let watched = tape.watch(&x);
        assert!(matches!(
            q_sample(&watched, &x, &s, 1),
            Err(DiffusionError::Contract(_))
        ));
    }

    #[test]
    fn p_sample_step_matches_hand_formula() {
        let s = make_schedule(4, 0.1, 0.4, SigmaKind::SqrtBeta).unwrap();
        let t = 3;
        let x = Tensor::from_vec(&[2], vec![0.7, -0.2]);
        let e = Tensor::from_vec(&[2], vec![0.3, 0.5]);
        let z = Tensor::from_vec(&[2], vec![1.0, -1.0]);
        let out = p_sample_step(&x, &e, &s, t, Some(&z)).unwrap();
        let a = s.alpha[t - 1];
        let ab = s.alpha_bar[t - 1];
        for i in 0..2 {
            let want = (x.data()[i] as f64 - (1.0 - a) / (1.0 - ab).sqrt() * e.data()[i] as f64)
                / a.sqrt()
                + s.sigma[t - 1] * z.data()[i] as f64;
            assert!((out.data()[i] as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn p_sample_step_noise_contract() {
        let s = make_schedule(4, 0.1, 0.4, SigmaKind::SqrtBeta).unwrap();
        let x = Tensor::zeros(&[2]);
        let z = Tensor::zeros(&[2]);
        assert!(p_sample_step(&x, &x, &s, 1, Some(&z)).is_err());
        assert!(p_sample_step(&x, &x, &s, 2, None).is_err());
        assert!(p_sample_step(&x, &x, &s, 1, None).is_ok());
        assert!(p_sample_step(&x, &x, &s, 2, Some(&z)).is_ok());
    }

    #[test]
    fn final_step_reduces_to_x0_estimate() {
        // at t = 1 the ancestral update equals the clean prediction exactly:
        // (1 - a)/(1 - abar) = 1 when abar = a
        let s = make_schedule(4, 0.1, 0.4, SigmaKind::SqrtBeta).unwrap();
        let x = Tensor::from_vec(&[3], vec![0.4, -0.1, 0.9]);
        let e = Tensor::from_vec(&[3], vec![0.2, 0.6, -0.3]);
        let step = p_sample_step(&x, &e, &s, 1, None).unwrap();
        let est = estimate_x0(&x, &e, &s, 1).unwrap();
        for (a, b) in step.data().iter().zip(est.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_is_seed_deterministic() {
        let cfg = GeneratorConfig {
            in_channels: 3,
            base_width: 8,
            depth: 2,
            num_tracers: 3,
            embed_dim: 8,
            use_bottleneck_attention: false,
            spatial_rank: 2,
        };
        let params = nn::build_generator(&cfg, 3).unwrap();
        let sched = make_schedule(5, 0.01, 0.2, SigmaKind::SqrtBeta).unwrap();
        let cond = Tensor::full(&[2, 2, 8, 8], 0.25);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&params, &cfg, &sched, &cond, &[0, 2], &mut rng)
                .unwrap()
                .to_vec()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn schedule_invariants(
            t_max in 1usize..300,
            b1 in 1e-5f64..0.05,
            spread in 0.0f64..0.4,
        ) {
            let bt = (b1 + spread).min(0.999);
            let s = make_schedule(t_max, b1, bt, SigmaKind::Posterior).unwrap();
            prop_assert_eq!(s.beta.len(), t_max);
            for i in 0..t_max {
                prop_assert!(s.alpha[i] > 0.0 && s.alpha[i] < 1.0);
                prop_assert!((s.alpha[i] - (1.0 - s.beta[i])).abs() < 1e-15);
                if i > 0 {
                    prop_assert!(s.beta[i] >= s.beta[i - 1]);
                    prop_assert!(s.alpha_bar[i] < s.alpha_bar[i - 1]);
                    let ratio = s.alpha_bar[i] / s.alpha_bar[i - 1];
                    prop_assert!((ratio - s.alpha[i]).abs() < 1e-12);
                }
            }
        }
    }
}
