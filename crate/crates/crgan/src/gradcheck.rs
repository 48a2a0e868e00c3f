//! Finite-difference audit of every analytic loss gradient.
//!
//! Each loss is evaluated on random small instances and its analytic
//! gradient compared against central differences. Inputs that feed L1 terms
//! are kept well away from the kink so the numeric derivative is defined.

use crgan_core::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use crgan_core::losses::{self, Rows, StatsGrad};
use crgan_core::{FeatureStats, StatsRole};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::Result;

/// Maximum relative error accepted by [`run_suite`].
pub const TOLERANCE: f64 = 1e-4;

/// Outcome for one loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub loss: &'static str,
    pub instances: usize,
    /// Worst relative error over all instances and coordinates.
    pub max_relative_error: f64,
    pub passed: bool,
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

const CHECKS: [(&str, Check); 9] = [
    ("image_recon", image_recon),
    ("critic", critic),
    ("generator_adv", generator_adv),
    ("prior_kl", prior_kl),
    ("alignment_uniform", alignment_uniform),
    ("feature_cycle", feature_cycle),
    ("feature_distance", feature_distance),
    ("mode_seeking", mode_seeking),
    ("nt_xent", nt_xent),
];

/// Runs `instances` random checks per loss.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<GradcheckResult>> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, &(loss, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let err = check(&mut rng)?;
                worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            }
            Ok(GradcheckResult {
                loss,
                instances,
                max_relative_error: worst,
                passed: worst < TOLERANCE,
            })
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn offset_from(rng: &mut ChaCha8Rng, base: &[f64]) -> Vec<f64> {
    base.iter()
        .map(|&b| {
            let mag = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                b + mag
            } else {
                b - mag
            }
        })
        .collect()
}

fn stats_from(flat: &[f64], n: usize, d: usize) -> Result<Vec<FeatureStats>> {
    (0..n)
        .map(|i| {
            let off = i * 2 * d;
            Ok(FeatureStats::new(
                flat[off..off + d].to_vec(),
                flat[off + d..off + 2 * d].to_vec(),
                StatsRole::Real,
            )?)
        })
        .collect()
}

fn flatten(grads: &[StatsGrad]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.mu.iter().chain(&g.log_var).copied())
        .collect()
}

fn image_recon(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, p) = (3, 5);
    let real = uniform(rng, b * p, -1.0, 1.0);
    let recon = offset_from(rng, &real);
    let g = losses::image_recon_loss_grad(Rows::new(&recon, p)?, Rows::new(&real, p)?)?;
    let loss =
        |x: &[f64], y: &[f64]| losses::image_recon_loss(Rows::new(x, p).unwrap(), Rows::new(y, p).unwrap()).unwrap();
    let n1 = central_difference(|x| loss(x, &real), &recon, DEFAULT_STEP);
    let n2 = central_difference(|y| loss(&recon, y), &real, DEFAULT_STEP);
    Ok(max_relative_error(&g.d_first, &n1).max(max_relative_error(&g.d_second, &n2)))
}

fn critic(rng: &mut ChaCha8Rng) -> Result<f64> {
    let real = uniform(rng, 4, -3.0, 3.0);
    let fake = uniform(rng, 6, -3.0, 3.0);
    let g = losses::critic_loss_grad(&real, &fake)?;
    let n1 = central_difference(|x| losses::critic_loss(x, &fake).unwrap(), &real, DEFAULT_STEP);
    let n2 = central_difference(|x| losses::critic_loss(&real, x).unwrap(), &fake, DEFAULT_STEP);
    Ok(max_relative_error(&g.d_first, &n1).max(max_relative_error(&g.d_second, &n2)))
}

fn generator_adv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let fake = uniform(rng, 6, -3.0, 3.0);
    let g = losses::generator_adv_loss_grad(&fake)?;
    let num = central_difference(|x| losses::generator_adv_loss(x).unwrap(), &fake, DEFAULT_STEP);
    Ok(max_relative_error(&g.grad, &num))
}

fn prior_kl(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, d) = (3, 4);
    let flat = uniform(rng, n * 2 * d, -1.5, 1.5);
    let (_, grads) = losses::prior_kl_grad(&stats_from(&flat, n, d)?)?;
    let num = central_difference(
        |x| losses::prior_kl(&stats_from(x, n, d).unwrap()).unwrap(),
        &flat,
        DEFAULT_STEP,
    );
    Ok(max_relative_error(&flatten(&grads), &num))
}

fn alignment_uniform(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (d, k, tau) = (8, 3, 0.2);
    let flat = uniform(rng, d * (2 + k), -1.0, 1.0);
    let split = |x: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        (
            x[..d].to_vec(),
            x[d..2 * d].to_vec(),
            x[2 * d..].chunks(d).map(<[f64]>::to_vec).collect(),
        )
    };
    let (q, p, negs) = split(&flat);
    let g = losses::alignment_uniform_loss_grad(&q, &p, &negs, tau)?;
    let analytic: Vec<f64> = g
        .d_query
        .iter()
        .chain(&g.d_positive)
        .chain(g.d_negatives.iter().flatten())
        .copied()
        .collect();
    let num = central_difference(
        |x| {
            let (q, p, negs) = split(x);
            losses::alignment_uniform_loss(&q, &p, &negs, tau).unwrap()
        },
        &flat,
        DEFAULT_STEP,
    );
    Ok(max_relative_error(&analytic, &num))
}

fn feature_cycle(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, d, banked, tau) = (2, 5, 3, 0.2);
    let stats_len = n * 2 * d;
    let flat = uniform(rng, 2 * stats_len + 2 * banked * d, -1.0, 1.0);
    // Negative sigmas are |v| + 0.1 of the raw coordinates.
    let split = |x: &[f64]| {
        let gen = stats_from(&x[..stats_len], n, d).unwrap();
        let mix = stats_from(&x[stats_len..2 * stats_len], n, d).unwrap();
        let rest = &x[2 * stats_len..];
        let mu: Vec<Vec<f64>> = rest[..banked * d].chunks(d).map(<[f64]>::to_vec).collect();
        let sigma: Vec<Vec<f64>> = rest[banked * d..]
            .chunks(d)
            .map(|c| c.iter().map(|v| v.abs() + 0.1).collect())
            .collect();
        (gen, mix, mu, sigma)
    };
    let (gen, mix, mu, sigma) = split(&flat);
    let g = losses::feature_cycle_loss_grad(&gen, &mix, &mu, &sigma, tau)?;
    let mut analytic = flatten(&g.d_generated);
    analytic.extend(flatten(&g.d_mixed));
    analytic.extend(g.d_neg_mu.iter().flatten());
    let raw_sigma = &flat[2 * stats_len + banked * d..];
    analytic.extend(
        g.d_neg_sigma
            .iter()
            .flatten()
            .zip(raw_sigma)
            .map(|(gv, raw)| gv * raw.signum()),
    );
    let num = central_difference(
        |x| {
            let (gen, mix, mu, sigma) = split(x);
            losses::feature_cycle_loss(&gen, &mix, &mu, &sigma, tau).unwrap()
        },
        &flat,
        DEFAULT_STEP,
    );
    Ok(max_relative_error(&analytic, &num))
}

fn feature_distance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, d) = (3, 4);
    let half = n * 2 * d;
    let flat = uniform(rng, 2 * half, -1.0, 1.0);
    let g = losses::feature_distance_loss_grad(&stats_from(&flat[..half], n, d)?, &stats_from(&flat[half..], n, d)?)?;
    let num = central_difference(
        |x| {
            losses::feature_distance_loss(
                &stats_from(&x[..half], n, d).unwrap(),
                &stats_from(&x[half..], n, d).unwrap(),
            )
            .unwrap()
        },
        &flat,
        DEFAULT_STEP,
    );
    let mut analytic = flatten(&g.d_generated);
    analytic.extend(flatten(&g.d_mixed));
    Ok(max_relative_error(&analytic, &num))
}

fn mode_seeking(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (pairs, p, d) = (3, 6, 4);
    let img1 = uniform(rng, pairs * p, -1.0, 1.0);
    let img2 = offset_from(rng, &img1);
    let z1 = uniform(rng, pairs * d, -2.0, 2.0);
    let z2 = offset_from(rng, &z1);
    let flat: Vec<f64> = [img1, img2, z1, z2].concat();
    let (ni, nz) = (pairs * p, pairs * d);
    let eval = |x: &[f64]| {
        losses::mode_seeking_loss_grad(
            Rows::new(&x[..ni], p).unwrap(),
            Rows::new(&x[ni..2 * ni], p).unwrap(),
            Rows::new(&x[2 * ni..2 * ni + nz], d).unwrap(),
            Rows::new(&x[2 * ni + nz..], d).unwrap(),
        )
    };
    let g = eval(&flat)?;
    let analytic: Vec<f64> = [g.d_img1, g.d_img2, g.d_z1, g.d_z2].concat();
    let num = central_difference(|x| eval(x).unwrap().value, &flat, DEFAULT_STEP);
    Ok(max_relative_error(&analytic, &num))
}

fn nt_xent(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (rows, d, tau) = (6, 5, 0.5);
    let flat = uniform(rng, rows * d, -1.0, 1.0);
    let g = losses::nt_xent_loss_grad(Rows::new(&flat, d)?, tau)?;
    let num = central_difference(
        |x| losses::nt_xent_loss(Rows::new(x, d).unwrap(), tau).unwrap(),
        &flat,
        DEFAULT_STEP,
    );
    Ok(max_relative_error(&g.grad, &num))
}
