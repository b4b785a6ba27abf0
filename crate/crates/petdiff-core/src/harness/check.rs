//! Self-check suite behind the `check` CLI command: finite-difference
//! validation of every differentiable primitive, the full generator loss, the
//! second-order gradient-penalty path, the analytic-oracle sampler, format
//! round-trips, and a deliberately corrupted-gradient negative control that
//! proves the checker can catch a wrong backward rule.
//!
//! Failures are reported, not thrown: every item lands in the returned
//! [`CheckReport`] with a pass flag and a human-readable detail line.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::{estimate_x0, make_schedule, q_sample, randn, sample_with, SigmaKind};
use crate::losses::{
    gradient_penalty, image_loss, noise_loss, relativistic_pair, total_g,
};
use crate::nn::{
    self, build_discriminator, build_generator, discriminator_forward, generator_forward,
    ConditionInfo, DiscriminatorConfig, GeneratorConfig, ModelParams,
};
use crate::oracle::{self, chain_stats, finite_diff_check, FdOptions, GaussianTarget};
use crate::phantom::{gen_phantom, read_volume, write_volume};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub version: u32,
    pub pass: bool,
    pub items: Vec<CheckItem>,
}

type ItemResult = Result<String, String>;

fn run_item(items: &mut Vec<CheckItem>, name: &str, f: impl FnOnce() -> ItemResult) {
    let (pass, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    items.push(CheckItem {
        name: name.to_string(),
        pass,
        detail,
    });
}

/// Deterministic non-constant filler for parameters and projections.
fn ramp(shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|i| {
            let u = (i as f32 * 0.711 + 0.13).fract();
            lo + (hi - lo) * u
        })
        .collect();
    Tensor::from_vec(shape, data)
}

fn params_of(pairs: &[(&str, Tensor)]) -> ModelParams {
    let mut p = ModelParams::new();
    for (n, t) in pairs {
        p.insert(n, t.clone());
    }
    p
}

fn fd_item(
    params: &ModelParams,
    opts: &FdOptions,
    loss: impl Fn(&Tape, &ModelParams) -> oracle::Result<Tensor>,
) -> ItemResult {
    match finite_diff_check(params, opts, loss) {
        Ok(report) if report.pass => Ok(format!(
            "{} coords, max rel err {:.2e} (tol {:.0e})",
            report.checked_coords, report.max_rel_err, report.tol
        )),
        Ok(report) => {
            let worst = report
                .worst
                .map(|w| {
                    format!(
                        "worst {}[{}] analytic {:.4e} vs numeric {:.4e}",
                        w.name, w.coord, w.analytic, w.numeric
                    )
                })
                .unwrap_or_default();
            Err(format!(
                "max rel err {:.2e} exceeds tol {:.0e}; {worst}",
                report.max_rel_err, report.tol
            ))
        }
        Err(e) => Err(format!("checker error: {e}")),
    }
}

/// Projection loss `sum(x * c)` against a fixed ramp, turning any tensor into
/// a scalar with non-uniform weights.
fn proj(x: &Tensor) -> oracle::Result<Tensor> {
    let c = ramp(x.shape(), -0.9, 1.1);
    Ok(x.mul(&c)?.sum()?)
}

fn primitive_suite(items: &mut Vec<CheckItem>, seed: u64) {
    let opts = FdOptions {
        step: 1e-3,
        tol: 1e-3,
        floor: 1.0,
        max_coords_per_param: 12,
        seed,
    };
    // The normalization layers are affine in gamma/beta, so a larger step
    // averages out f32 evaluation noise without adding truncation error.
    let norm_opts = FdOptions {
        step: 1e-2,
        ..opts.clone()
    };
    type Loss = Box<dyn Fn(&Tape, &ModelParams) -> oracle::Result<Tensor>>;
    let a23 = || ramp(&[2, 3], -1.2, 1.4);
    let cases: Vec<(&str, ModelParams, Loss)> = vec![
        (
            "fd_add",
            params_of(&[("a", a23()), ("b", ramp(&[2, 3], 0.2, 2.0))]),
            Box::new(|_, p| proj(&p.get("a").add(p.get("b"))?)),
        ),
        (
            "fd_sub",
            params_of(&[("a", a23()), ("b", ramp(&[2, 3], 0.2, 2.0))]),
            Box::new(|_, p| proj(&p.get("a").sub(p.get("b"))?)),
        ),
        (
            "fd_mul",
            params_of(&[("a", a23()), ("b", ramp(&[2, 3], 0.2, 2.0))]),
            Box::new(|_, p| proj(&p.get("a").mul(p.get("b"))?)),
        ),
        (
            "fd_div",
            params_of(&[("a", a23()), ("b", ramp(&[2, 3], 1.0, 2.2))]),
            Box::new(|_, p| proj(&p.get("a").div(p.get("b"))?)),
        ),
        (
            "fd_scale_add_const",
            params_of(&[("a", a23())]),
            Box::new(|_, p| proj(&p.get("a").scale(1.7).add_const(0.3))),
        ),
        (
            "fd_abs",
            params_of(&[("a", ramp(&[2, 3], 0.4, 1.6)), ("s", ramp(&[2, 3], -1.6, -0.4))]),
            Box::new(|_, p| proj(&p.get("a").abs().add(&p.get("s").abs())?)),
        ),
        (
            "fd_square",
            params_of(&[("a", a23())]),
            Box::new(|_, p| proj(&p.get("a").square())),
        ),
        (
            "fd_sqrt",
            params_of(&[("a", ramp(&[2, 3], 0.5, 2.0))]),
            Box::new(|_, p| proj(&p.get("a").sqrt())),
        ),
        (
            "fd_softplus",
            params_of(&[("a", a23())]),
            Box::new(|_, p| proj(&p.get("a").softplus())),
        ),
        (
            "fd_sigmoid",
            params_of(&[("a", a23())]),
            Box::new(|_, p| proj(&p.get("a").sigmoid())),
        ),
        (
            "fd_silu",
            params_of(&[("a", a23())]),
            Box::new(|_, p| proj(&p.get("a").silu())),
        ),
        (
            "fd_leaky_relu",
            params_of(&[("a", ramp(&[2, 3], 0.3, 1.5)), ("s", ramp(&[2, 3], -1.5, -0.3))]),
            Box::new(|_, p| proj(&p.get("a").leaky_relu(0.2).add(&p.get("s").leaky_relu(0.2))?)),
        ),
        (
            "fd_clamp",
            params_of(&[("a", ramp(&[2, 3], -0.4, 0.4)), ("s", ramp(&[2, 3], 0.7, 1.5))]),
            Box::new(|_, p| {
                proj(&p.get("a").clamp(-0.5, 0.5).add(&p.get("s").clamp(-0.5, 0.5))?)
            }),
        ),
        (
            "fd_matmul_nn",
            params_of(&[("a", ramp(&[2, 3], -1.0, 1.0)), ("b", ramp(&[3, 4], -1.0, 1.0))]),
            Box::new(|_, p| proj(&p.get("a").matmul(p.get("b"), false, false)?)),
        ),
        (
            "fd_matmul_tt",
            params_of(&[("a", ramp(&[3, 2], -1.0, 1.0)), ("b", ramp(&[4, 3], -1.0, 1.0))]),
            Box::new(|_, p| proj(&p.get("a").matmul(p.get("b"), true, true)?)),
        ),
        (
            "fd_reshape_broadcast",
            params_of(&[("a", ramp(&[1, 3], -1.0, 1.0))]),
            Box::new(|_, p| proj(&p.get("a").broadcast_to(&[4, 3])?.reshape(&[2, 6])?)),
        ),
        (
            "fd_sum_to_shape",
            params_of(&[("a", ramp(&[4, 3], -1.0, 1.0))]),
            Box::new(|_, p| proj(&p.get("a").sum_to_shape(&[1, 3])?)),
        ),
        (
            "fd_sum",
            params_of(&[("a", a23())]),
            Box::new(|_, p| Ok(p.get("a").sum()?)),
        ),
        (
            "fd_mean",
            params_of(&[("a", a23())]),
            Box::new(|_, p| Ok(p.get("a").mean()?)),
        ),
        (
            "fd_concat_narrow",
            params_of(&[("a", a23()), ("b", ramp(&[2, 2], -1.0, 1.0))]),
            Box::new(|_, p| {
                let cat = Tensor::concat(&[p.get("a"), p.get("b")], 1)?;
                proj(&cat.narrow(1, 1, 3)?)
            }),
        ),
        (
            "fd_pad_axis",
            params_of(&[("a", a23())]),
            Box::new(|_, p| proj(&p.get("a").pad_axis(1, 1, 2)?)),
        ),
        (
            "fd_upsample_nearest",
            params_of(&[("a", ramp(&[1, 2, 2, 3], -1.0, 1.0))]),
            Box::new(|_, p| proj(&p.get("a").upsample_nearest2(2)?)),
        ),
        (
            "fd_sum_pool",
            params_of(&[("a", ramp(&[1, 2, 4, 4], -1.0, 1.0))]),
            Box::new(|_, p| proj(&p.get("a").sum_pool2(2)?)),
        ),
        (
            "fd_index_rows",
            params_of(&[("a", ramp(&[4, 3], -1.0, 1.0))]),
            Box::new(|_, p| proj(&p.get("a").index_rows(&[2, 0, 2, 1, 2])?)),
        ),
        (
            "fd_scatter_rows",
            params_of(&[("a", ramp(&[2, 3], -1.0, 1.0))]),
            Box::new(|_, p| proj(&p.get("a").scatter_rows(&[3, 1], 5)?)),
        ),
        (
            "fd_estimate_x0_fused",
            params_of(&[("x", a23()), ("e", ramp(&[2, 3], -1.1, 0.9))]),
            Box::new(|_, p| proj(&p.get("x").estimate_x0_fused(p.get("e"), 0.8, 0.6)?)),
        ),
        (
            "fd_conv2d_s1",
            params_of(&[
                ("x", ramp(&[1, 2, 5, 5], -1.0, 1.0)),
                ("k", ramp(&[3, 2, 3, 3], -0.5, 0.5)),
            ]),
            Box::new(|_, p| proj(&p.get("x").conv(p.get("k"), 1, 1)?)),
        ),
        (
            "fd_conv2d_s2",
            params_of(&[
                ("x", ramp(&[1, 2, 5, 5], -1.0, 1.0)),
                ("k", ramp(&[3, 2, 3, 3], -0.5, 0.5)),
            ]),
            Box::new(|_, p| proj(&p.get("x").conv(p.get("k"), 2, 1)?)),
        ),
        (
            "fd_conv3d_s1",
            params_of(&[
                ("x", ramp(&[1, 1, 4, 4, 4], -1.0, 1.0)),
                ("k", ramp(&[2, 1, 3, 3, 3], -0.5, 0.5)),
            ]),
            Box::new(|_, p| proj(&p.get("x").conv(p.get("k"), 1, 1)?)),
        ),
        (
            "fd_group_norm",
            params_of(&[
                ("x", ramp(&[2, 8, 3, 3], -1.0, 1.0)),
                ("g", ramp(&[8], 0.5, 1.5)),
                ("b", ramp(&[8], -0.3, 0.3)),
            ]),
            Box::new(|_, p| proj(&nn::group_norm(p.get("x"), p.get("g"), p.get("b"))?)),
        ),
        (
            "fd_batch_norm",
            params_of(&[
                ("x", ramp(&[3, 4, 3, 3], -1.0, 1.0)),
                ("g", ramp(&[4], 0.5, 1.5)),
                ("b", ramp(&[4], -0.3, 0.3)),
            ]),
            Box::new(|_, p| proj(&nn::batch_norm(p.get("x"), p.get("g"), p.get("b"))?)),
        ),
        (
            "fd_instance_norm",
            params_of(&[
                ("x", ramp(&[2, 4, 3, 3], -1.0, 1.0)),
                ("g", ramp(&[4], 0.5, 1.5)),
                ("b", ramp(&[4], -0.3, 0.3)),
            ]),
            Box::new(|_, p| proj(&nn::instance_norm(p.get("x"), p.get("g"), p.get("b"))?)),
        ),
    ];
    for (name, params, loss) in cases {
        let o = if name.contains("norm") { &norm_opts } else { &opts };
        run_item(items, name, || fd_item(&params, o, loss));
    }
}

fn generator_loss_item(seed: u64) -> ItemResult {
    let cfg = GeneratorConfig {
        in_channels: 3,
        base_width: 8,
        depth: 3,
        num_tracers: 3,
        embed_dim: 16,
        use_bottleneck_attention: true,
        spatial_rank: 2,
    };
    let g = build_generator(&cfg, 41).map_err(|e| e.to_string())?;
    let dcfg = DiscriminatorConfig {
        widths: [8, 16, 32],
        ..DiscriminatorConfig::default()
    };
    let d = build_discriminator(&dcfg, 42).map_err(|e| e.to_string())?;
    let sched = make_schedule(8, 0.01, 0.2, SigmaKind::SqrtBeta).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let x0 = randn(&[2, 1, 16, 16], &mut rng).scale(0.5);
    let eps = randn(&[2, 1, 16, 16], &mut rng);
    let cond = randn(&[2, 2, 16, 16], &mut rng).scale(0.5);
    let x_t = q_sample(&x0, &eps, &sched, 5).map_err(|e| e.to_string())?;
    let infos = vec![ConditionInfo { t: 5, c: 0 }, ConditionInfo { t: 5, c: 2 }];
    let opts = FdOptions {
        step: 5e-3,
        tol: 1e-2,
        floor: 1.0,
        max_coords_per_param: 3,
        seed,
    };
    fd_item(&g, &opts, move |_, p| {
        let eps_hat = generator_forward(p, &cfg, &x_t, &cond, &infos)?;
        let x0_hat = estimate_x0(&x_t, &eps_hat, &sched, 5)?;
        let l_noise = noise_loss(&eps, &eps_hat)?;
        let l_image = image_loss(&x0, &x0_hat)?;
        let d_real = discriminator_forward(&d, &dcfg, &x0)?;
        let d_fake = discriminator_forward(&d, &dcfg, &x0_hat)?;
        let (_, l_rel_g) = relativistic_pair(&d_real, &d_fake)?;
        Ok(total_g(&l_noise, &l_image, &l_rel_g, 0.1)?)
    })
}

/// Tiny two-layer strided critic built from raw tensor ops, so the
/// second-order path is exercised outside the fixed discriminator topology.
/// SiLU keeps the penalty twice differentiable, which central differences
/// need; a kinked activation would make the bias gradient a.e. zero yet
/// finite-difference-visible.
fn two_layer_critic(
    p: &ModelParams,
    x: &Tensor,
) -> crate::losses::Result<Tensor> {
    let n = x.shape()[0];
    let h = x.conv(p.get("w1"), 2, 1)?;
    let b1 = p.get("b1").reshape(&[1, 4, 1, 1])?.broadcast_to(h.shape())?;
    let h = h.add(&b1)?.silu();
    let h = h.conv(p.get("w2"), 2, 1)?;
    let patches: usize = h.shape()[1..].iter().product();
    let scores = h.sum_to_shape(&[n, 1, 1, 1])?.reshape(&[n])?;
    Ok(scores.scale(1.0 / patches as f64))
}

fn gradient_penalty_item(seed: u64) -> ItemResult {
    let params = params_of(&[
        ("w1", ramp(&[4, 1, 3, 3], -0.4, 0.4)),
        ("b1", ramp(&[4], -0.2, 0.2)),
        ("w2", ramp(&[1, 4, 3, 3], -0.4, 0.4)),
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(131);
    let x_real = randn(&[2, 1, 8, 8], &mut rng).scale(0.7);
    let x_fake = randn(&[2, 1, 8, 8], &mut rng).scale(0.7);
    let opts = FdOptions {
        step: 1e-2,
        tol: 1e-2,
        floor: 1.0,
        max_coords_per_param: 8,
        seed,
    };
    fd_item(&params, &opts, move |tape, p| {
        Ok(gradient_penalty(|x| two_layer_critic(p, x), &x_real, &x_fake, tape)?)
    })
}

fn oracle_sampler_item(seed: u64) -> ItemResult {
    let sched = make_schedule(50, 0.01, 0.25, SigmaKind::SqrtBeta).map_err(|e| e.to_string())?;
    let target = GaussianTarget::new(0.3, 0.04).map_err(|e| e.to_string())?;
    let n = 20_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let out = sample_with(&[n], &sched, &mut rng, |x, t| {
        oracle::oracle_eps(x, t, &sched, &target)
            .map_err(|e| crate::diffusion::DiffusionError::Contract(e.to_string()))
    })
    .map_err(|e| e.to_string())?;
    let data = out.data();
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = data
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / n as f64;
    let mean_err = (mean - target.mu).abs() / target.mu.abs();
    let var_err = (var - target.sigma2).abs() / target.sigma2;
    let (cf_mean, cf_var) = chain_stats(&sched, &target);
    let detail = format!(
        "mean {mean:.4} (target {}, closed form {cf_mean:.4}), var {var:.4} (target {}, closed form {cf_var:.4}), {n} chains",
        target.mu, target.sigma2
    );
    if mean_err < 0.05 && var_err < 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle_posterior_identity_item() -> ItemResult {
    let sched = make_schedule(50, 0.01, 0.25, SigmaKind::SqrtBeta).map_err(|e| e.to_string())?;
    let target = GaussianTarget::new(-0.2, 0.09).map_err(|e| e.to_string())?;
    let mut worst = 0.0f32;
    for t in [1usize, 13, 25, 50] {
        let x_t = ramp(&[64], -2.0, 2.0);
        let eps = oracle::oracle_eps(&x_t, t, &sched, &target).map_err(|e| e.to_string())?;
        let x0_hat = estimate_x0(&x_t, &eps, &sched, t).map_err(|e| e.to_string())?;
        let want = oracle::posterior_mean(&x_t, t, &sched, &target).map_err(|e| e.to_string())?;
        for (a, b) in x0_hat.data().iter().zip(want.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let detail = format!("max |estimate_x0(oracle eps) - posterior mean| = {worst:.2e}");
    if worst < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn round_trip_item() -> ItemResult {
    let mut worst = 0.0f32;
    for t_max in [2usize, 50, 1000] {
        let sched =
            make_schedule(t_max, 5e-4, 1.95e-2, SigmaKind::SqrtBeta).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x0 = ramp(&[64], -1.0, 1.0);
        for t in [1, t_max / 4, t_max / 2, t_max] {
            let t = t.max(1);
            let eps = randn(&[64], &mut rng);
            let x_t = q_sample(&x0, &eps, &sched, t).map_err(|e| e.to_string())?;
            let back = estimate_x0(&x_t, &eps, &sched, t).map_err(|e| e.to_string())?;
            for (a, b) in back.data().iter().zip(x0.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let detail = format!("max |round trip - x0| = {worst:.2e}");
    if worst < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Feeds the checker a loss whose recorded gradient is deliberately wrong
/// (`sum(p * detach(p))` reports `p` instead of `2p`); passes when the
/// checker flags it and names the offending coordinate.
fn negative_control_item(seed: u64) -> ItemResult {
    let params = params_of(&[("p", Tensor::from_vec(&[3], vec![0.7, 1.3, 2.1]))]);
    let opts = FdOptions {
        seed,
        ..FdOptions::default()
    };
    let report = finite_diff_check(&params, &opts, |_, p| {
        let p = p.get("p");
        Ok(p.mul(&p.detach())?.sum()?)
    })
    .map_err(|e| format!("checker error: {e}"))?;
    match (&report.pass, &report.worst) {
        (false, Some(w)) => Ok(format!(
            "corrupted op product_with_detached_copy flagged at {}[{}]: analytic {:.3} vs numeric {:.3}",
            w.name, w.coord, w.analytic, w.numeric
        )),
        _ => Err(
            "checker accepted a gradient that is wrong by a factor of two".to_string(),
        ),
    }
}

fn params_round_trip_item() -> ItemResult {
    let cfg = GeneratorConfig {
        base_width: 8,
        embed_dim: 16,
        ..GeneratorConfig::default()
    };
    let params = build_generator(&cfg, 5).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    params.write_to(&mut buf).map_err(|e| e.to_string())?;
    let back = ModelParams::read_from(buf.as_slice()).map_err(|e| e.to_string())?;
    if params.len() != back.len() {
        return Err(format!("{} entries became {}", params.len(), back.len()));
    }
    for ((n1, t1), (n2, t2)) in params.iter().zip(back.iter()) {
        if n1 != n2 || t1.shape() != t2.shape() || t1.data() != t2.data() {
            return Err(format!("entry {n1} did not survive the round trip"));
        }
    }
    Ok(format!(
        "{} tensors, {} values, bit-exact",
        params.len(),
        params.value_count()
    ))
}

fn rdvf_round_trip_item() -> ItemResult {
    let sample = gen_phantom(3, &[16, 16], 5).map_err(|e| e.to_string())?;
    let path = std::env::temp_dir().join(format!("petdiff_check_{}.rdvf", std::process::id()));
    let result = (|| -> ItemResult {
        write_volume(&path, &sample.cond_t1).map_err(|e| e.to_string())?;
        let back = read_volume(&path).map_err(|e| e.to_string())?;
        if back != sample.cond_t1 {
            return Err("volume did not survive the round trip bitwise".to_string());
        }
        Ok(format!("{} voxels, bit-exact", back.voxels()))
    })();
    let _ = std::fs::remove_file(&path);
    result
}

/// Runs the whole verification suite. `seed` drives coordinate subsampling
/// and the oracle chains; every item is deterministic given the seed.
pub fn check_run(seed: u64) -> CheckReport {
    let mut items = Vec::new();
    run_item(&mut items, "round_trip_estimate_x0", round_trip_item);
    primitive_suite(&mut items, seed);
    run_item(&mut items, "fd_generator_total_loss", || {
        generator_loss_item(seed)
    });
    run_item(&mut items, "fd_gradient_penalty_second_order", || {
        gradient_penalty_item(seed)
    });
    run_item(&mut items, "oracle_sampler_t50", || oracle_sampler_item(seed));
    run_item(
        &mut items,
        "oracle_posterior_identity",
        oracle_posterior_identity_item,
    );
    run_item(&mut items, "negative_control_corrupted_gradient", || {
        negative_control_item(seed)
    });
    run_item(&mut items, "params_round_trip", params_round_trip_item);
    run_item(&mut items, "rdvf_round_trip", rdvf_round_trip_item);
    let pass = items.iter().all(|i| i.pass);
    CheckReport {
        version: 1,
        pass,
        items,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_and_serializes() {
        let report = check_run(0);
        for item in &report.items {
            assert!(item.pass, "{} failed: {}", item.name, item.detail);
        }
        assert!(report.pass);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("negative_control_corrupted_gradient"));
    }

    #[test]
    fn suite_is_deterministic_for_a_seed() {
        let a = serde_json::to_string(&check_run(7)).unwrap();
        let b = serde_json::to_string(&check_run(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_control_catches_detached_gradient() {
        let res = negative_control_item(0).unwrap();
        assert!(res.contains("p[") && res.contains("flagged"));
    }
}
