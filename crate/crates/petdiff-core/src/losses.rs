//! Training losses: denoising regression terms, the relativistic adversarial
//! pair, its standard non-saturating replacement for ablations, and a
//! zero-centered gradient penalty evaluated at the data points.
//!
//! Tensor-valued functions return scalars that stay differentiable; the
//! plain-number [`LossReport`] mirrors them for logging and enforces the
//! total identities in one place.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::NnError;
use crate::tensor::{backward, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Mean squared error between drawn and predicted noise.
pub fn noise_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    check_same("noise_loss", eps, eps_hat)?;
    Ok(eps.sub(eps_hat)?.square().mean()?)
}

/// Mean absolute error between the clean target and its estimate.
pub fn image_loss(x0: &Tensor, x0_hat: &Tensor) -> Result<Tensor> {
    check_same("image_loss", x0, x0_hat)?;
    Ok(x0.sub(x0_hat)?.abs().mean()?)
}

/// Relativistic pair over per-sample critic scores:
/// discriminator side `mean softplus(d_fake - d_real)`, generator side
/// `mean softplus(d_real - d_fake)`. Returns `(l_rel_d, l_rel_g)`.
pub fn relativistic_pair(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    check_scores(d_real, d_fake)?;
    let l_d = d_fake.sub(d_real)?.softplus().mean()?;
    let l_g = d_real.sub(d_fake)?.softplus().mean()?;
    Ok((l_d, l_g))
}

/// Non-relativistic replacement used by the no-relativism ablation:
/// `l_d = mean softplus(-d_real) + mean softplus(d_fake)`,
/// `l_g = mean softplus(-d_fake)`.
pub fn standard_pair(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    check_scores(d_real, d_fake)?;
    let l_d = d_real
        .scale(-1.0)
        .softplus()
        .mean()?
        .add(&d_fake.softplus().mean()?)?;
    let l_g = d_fake.scale(-1.0).softplus().mean()?;
    Ok((l_d, l_g))
}

/// Zero-centered gradient penalty at the given data batches:
/// `sum_X ||grad_X sum_j d(X)_j||^2 / N` for `X` in `{x_real, x_fake}`.
///
/// `d` maps a batch to per-sample scores `[N]`. Both inputs are detached and
/// re-watched on `tape`, so the result differentiates with respect to
/// whatever `d` closes over (the critic parameters) but not the inputs.
pub fn gradient_penalty<F>(d: F, x_real: &Tensor, x_fake: &Tensor, tape: &Tape) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    check_same("gradient_penalty", x_real, x_fake)?;
    let mut total = Tensor::scalar(0.0);
    for x in [x_real, x_fake] {
        let n = *x.shape().first().unwrap_or(&1);
        let xw = tape.watch(&x.detach());
        let scores = d(&xw)?;
        let s = scores.sum()?;
        let grads = backward(&s, true)?;
        let gx = grads
            .get(&xw.node_id().expect("watched tensor has a node"))
            .ok_or_else(|| {
                LossError::Contract("critic output does not depend on its input".into())
            })?;
        total = total.add(&gx.square().sum()?.scale(1.0 / n as f64))?;
    }
    Ok(total)
}

/// Generator objective: `l_noise + l_image + lambda * l_rel_g`.
pub fn total_g(l_noise: &Tensor, l_image: &Tensor, l_rel_g: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok(l_noise.add(l_image)?.add(&l_rel_g.scale(lambda))?)
}

/// Discriminator objective: `lambda * (l_rel_d + l_gp)`.
pub fn total_d(l_rel_d: &Tensor, l_gp: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok(l_rel_d.add(l_gp)?.scale(lambda))
}

/// One training step's loss values; `total_g` and `total_d` are always the
/// exact combinations produced by [`LossReport::from_parts`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub l_noise: f64,
    pub l_image: f64,
    pub l_rel_g: f64,
    pub l_rel_d: f64,
    pub l_gp: f64,
    pub lambda: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn from_parts(
        l_noise: f64,
        l_image: f64,
        l_rel_g: f64,
        l_rel_d: f64,
        l_gp: f64,
        lambda: f64,
    ) -> Self {
        LossReport {
            l_noise,
            l_image,
            l_rel_g,
            l_rel_d,
            l_gp,
            lambda,
            total_g: l_noise + l_image + lambda * l_rel_g,
            total_d: lambda * (l_rel_d + l_gp),
        }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }));
    }
    Ok(())
}

fn check_scores(d_real: &Tensor, d_fake: &Tensor) -> Result<()> {
    check_same("adversarial_pair", d_real, d_fake)?;
    if d_real.shape().len() != 1 {
        return Err(LossError::Contract(format!(
            "critic scores must be rank 1 per-sample values, got shape {:?}",
            d_real.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{self, DiscriminatorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f32, b: f32, tol: f32) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn regression_losses_on_hand_values() {
        let a = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[4], vec![1.5, 2.0, 2.0, 6.0]);
        close(noise_loss(&a, &b).unwrap().item(), (0.25 + 0.0 + 1.0 + 4.0) / 4.0, 1e-6);
        close(image_loss(&a, &b).unwrap().item(), (0.5 + 0.0 + 1.0 + 2.0) / 4.0, 1e-6);
    }

    #[test]
    fn relativistic_pair_is_symmetric_and_ln2_at_tie() {
        let r = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]);
        let f = Tensor::from_vec(&[3], vec![0.1, 0.3, -0.7]);
        let (ld, lg) = relativistic_pair(&r, &f).unwrap();
        let (ld_swapped, lg_swapped) = relativistic_pair(&f, &r).unwrap();
        close(ld.item(), lg_swapped.item(), 1e-7);
        close(lg.item(), ld_swapped.item(), 1e-7);

        let (ld_tie, lg_tie) = relativistic_pair(&r, &r).unwrap();
        close(ld_tie.item(), std::f32::consts::LN_2, 1e-6);
        close(lg_tie.item(), std::f32::consts::LN_2, 1e-6);
    }

    #[test]
    fn standard_pair_hand_example() {
        let r = Tensor::from_vec(&[2], vec![1.0, -0.5]);
        let f = Tensor::from_vec(&[2], vec![0.2, 0.8]);
        let sp = |x: f32| (x as f64).exp().ln_1p() as f32;
        let (ld, lg) = standard_pair(&r, &f).unwrap();
        close(ld.item(), (sp(-1.0) + sp(0.5)) / 2.0 + (sp(0.2) + sp(0.8)) / 2.0, 1e-6);
        close(lg.item(), (sp(-0.2) + sp(-0.8)) / 2.0, 1e-6);
    }

    #[test]
    fn scores_must_be_rank_one() {
        let bad = Tensor::zeros(&[2, 2]);
        assert!(relativistic_pair(&bad, &bad).is_err());
        assert!(standard_pair(&bad, &bad).is_err());
    }

    #[test]
    fn gradient_penalty_matches_linear_analytic() {
        // per-sample score w . x gives grad w per sample, so each batch
        // contributes ||w||^2 and the two batches sum to 2 ||w||^2
        let w = Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]);
        let tape = Tape::new();
        let d = |x: &Tensor| -> Result<Tensor> {
            Ok(x.matmul(&w, false, true)?.reshape(&[x.shape()[0]])?)
        };
        let x_real = Tensor::from_vec(&[4, 3], (0..12).map(|i| i as f32 * 0.1).collect());
        let x_fake = Tensor::from_vec(&[4, 3], (0..12).map(|i| -(i as f32) * 0.2).collect());
        let gp = gradient_penalty(d, &x_real, &x_fake, &tape).unwrap();
        let expect = 2.0 * (0.25 + 1.0 + 4.0);
        close(gp.item(), expect, 1e-5);
    }

    #[test]
    fn gradient_penalty_is_differentiable_in_critic_params() {
        let cfg = DiscriminatorConfig::default();
        let params = nn::build_discriminator(&cfg, 3).unwrap();
        let tape = Tape::new();
        let watched = params.watched(&tape);
        let d = |x: &Tensor| -> Result<Tensor> {
            Ok(nn::discriminator_forward(&watched, &cfg, x)?)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let x_real = mk(&mut rng);
        let x_fake = mk(&mut rng);
        let gp = gradient_penalty(d, &x_real, &x_fake, &tape).unwrap();
        assert!(gp.item() > 0.0, "random critic should have nonzero input gradient");
        let grads = backward(&gp, false).unwrap();
        let mut live = 0;
        for (name, t) in watched.iter() {
            let id = t.node_id().unwrap();
            if let Some(g) = grads.get(&id) {
                assert!(g.data().iter().all(|v| v.is_finite()), "non-finite grad for {name}");
                if g.data().iter().any(|&v| v != 0.0) {
                    live += 1;
                }
            }
        }
        assert!(live > 0, "penalty must push gradients into critic weights");
    }

    #[test]
    fn report_identities_hold_exactly() {
        let r = LossReport::from_parts(0.31, 0.07, 0.64, 0.72, 1.9, 0.1);
        assert_eq!(r.total_g, 0.31 + 0.07 + 0.1 * 0.64);
        assert_eq!(r.total_d, 0.1 * (0.72 + 1.9));
        let json = serde_json::to_string(&r).unwrap();
        let back: LossReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.total_g, r.total_g);
    }

    #[test]
    fn tensor_totals_match_report() {
        let ln = Tensor::scalar(0.4);
        let li = Tensor::scalar(0.2);
        let lrg = Tensor::scalar(0.9);
        let lrd = Tensor::scalar(0.8);
        let lgp = Tensor::scalar(2.5);
        let tg = total_g(&ln, &li, &lrg, 0.1).unwrap().item();
        let td = total_d(&lrd, &lgp, 0.1).unwrap().item();
        let rep = LossReport::from_parts(0.4, 0.2, 0.9, 0.8, 2.5, 0.1);
        close(tg, rep.total_g as f32, 1e-6);
        close(td, rep.total_d as f32, 1e-6);
    }
}
