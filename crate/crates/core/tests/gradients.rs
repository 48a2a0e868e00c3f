//! Analytic loss gradients against central finite differences.

use crgan_core::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use crgan_core::losses::{self, Rows};
use crgan_core::{FeatureStats, StatsRole};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `base` plus offsets whose magnitude stays well clear of the L1 kink.
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

fn stats_from(flat: &[f64], n: usize, d: usize) -> Vec<FeatureStats> {
    (0..n)
        .map(|i| {
            let off = i * 2 * d;
            FeatureStats::new(
                flat[off..off + d].to_vec(),
                flat[off + d..off + 2 * d].to_vec(),
                StatsRole::Real,
            )
            .unwrap()
        })
        .collect()
}

fn flatten_stats_grads(grads: &[losses::StatsGrad]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.mu.iter().chain(&g.log_var).copied())
        .collect()
}

fn check(name: &str, analytic: &[f64], numeric: &[f64]) {
    let err = max_relative_error(analytic, numeric);
    assert!(err < TOL, "{name}: max relative error {err:.3e}");
}

#[test]
fn image_recon_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (b, p) = (3, 5);
        let real = uniform(&mut rng, b * p, -1.0, 1.0);
        let recon = offset_from(&mut rng, &real);
        let g = losses::image_recon_loss_grad(Rows::new(&recon, p).unwrap(), Rows::new(&real, p).unwrap()).unwrap();
        let num = central_difference(
            |x| losses::image_recon_loss(Rows::new(x, p).unwrap(), Rows::new(&real, p).unwrap()).unwrap(),
            &recon,
            DEFAULT_STEP,
        );
        check("recon wrt reconstruction", &g.d_first, &num);
        let num = central_difference(
            |x| losses::image_recon_loss(Rows::new(&recon, p).unwrap(), Rows::new(x, p).unwrap()).unwrap(),
            &real,
            DEFAULT_STEP,
        );
        check("recon wrt real", &g.d_second, &num);
    }
}

#[test]
fn adversarial_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let real = uniform(&mut rng, 4, -3.0, 3.0);
        let fake = uniform(&mut rng, 6, -3.0, 3.0);
        let g = losses::critic_loss_grad(&real, &fake).unwrap();
        check(
            "critic wrt real",
            &g.d_first,
            &central_difference(|x| losses::critic_loss(x, &fake).unwrap(), &real, DEFAULT_STEP),
        );
        check(
            "critic wrt fake",
            &g.d_second,
            &central_difference(|x| losses::critic_loss(&real, x).unwrap(), &fake, DEFAULT_STEP),
        );
        let g = losses::generator_adv_loss_grad(&fake).unwrap();
        check(
            "generator adv",
            &g.grad,
            &central_difference(|x| losses::generator_adv_loss(x).unwrap(), &fake, DEFAULT_STEP),
        );
    }
}

#[test]
fn prior_kl_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (n, d) = (3, 4);
        let flat = uniform(&mut rng, n * 2 * d, -1.5, 1.5);
        let (_, grads) = losses::prior_kl_grad(&stats_from(&flat, n, d)).unwrap();
        let num = central_difference(|x| losses::prior_kl(&stats_from(x, n, d)).unwrap(), &flat, DEFAULT_STEP);
        check("prior kl", &flatten_stats_grads(&grads), &num);
    }
}

#[test]
fn alignment_uniform_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let d = 8;
        let k = 3;
        let flat = uniform(&mut rng, d * (2 + k), -1.0, 1.0);
        let unpack = |x: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
            (
                x[..d].to_vec(),
                x[d..2 * d].to_vec(),
                (0..k).map(|j| x[(2 + j) * d..(3 + j) * d].to_vec()).collect(),
            )
        };
        let (q, p, n) = unpack(&flat);
        let g = losses::alignment_uniform_loss_grad(&q, &p, &n, 0.2).unwrap();
        let mut analytic = g.d_query.clone();
        analytic.extend(&g.d_positive);
        for gn in &g.d_negatives {
            analytic.extend(gn);
        }
        let num = central_difference(
            |x| {
                let (q, p, n) = unpack(x);
                losses::alignment_uniform_loss(&q, &p, &n, 0.2).unwrap()
            },
            &flat,
            DEFAULT_STEP,
        );
        check("alignment uniform", &analytic, &num);
    }
}

#[test]
fn feature_cycle_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (n, d, banked) = (2, 5, 3);
        let stats_len = n * 2 * d;
        let flat = uniform(&mut rng, 2 * stats_len + 2 * banked * d, -1.0, 1.0);
        let unpack = |x: &[f64]| {
            let gen = stats_from(&x[..stats_len], n, d);
            let mix = stats_from(&x[stats_len..2 * stats_len], n, d);
            let rest = &x[2 * stats_len..];
            let nm: Vec<Vec<f64>> = (0..banked).map(|j| rest[j * d..(j + 1) * d].to_vec()).collect();
            let ns: Vec<Vec<f64>> = (0..banked)
                .map(|j| {
                    rest[(banked + j) * d..(banked + j + 1) * d]
                        .iter()
                        .map(|v| v.abs() + 0.1)
                        .collect()
                })
                .collect();
            (gen, mix, nm, ns)
        };
        let (gen, mix, nm, ns) = unpack(&flat);
        let g = losses::feature_cycle_loss_grad(&gen, &mix, &nm, &ns, 0.2).unwrap();
        let num = central_difference(
            |x| {
                let (gen, mix, nm, ns) = unpack(x);
                losses::feature_cycle_loss(&gen, &mix, &nm, &ns, 0.2).unwrap()
            },
            &flat,
            DEFAULT_STEP,
        );
        let mut analytic = flatten_stats_grads(&g.d_generated);
        analytic.extend(flatten_stats_grads(&g.d_mixed));
        for v in &g.d_neg_mu {
            analytic.extend(v);
        }
        // Sigma negatives were built as |v| + 0.1; chain through the abs.
        let rest = &flat[2 * stats_len + banked * d..];
        for (j, v) in g.d_neg_sigma.iter().enumerate() {
            analytic.extend(
                v.iter()
                    .zip(&rest[j * d..(j + 1) * d])
                    .map(|(gv, raw)| gv * raw.signum()),
            );
        }
        check("feature cycle", &analytic, &num);
    }
}

#[test]
fn feature_distance_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let (n, d) = (3, 4);
        let flat = uniform(&mut rng, 2 * n * 2 * d, -1.0, 1.0);
        let half = n * 2 * d;
        let g = losses::feature_distance_loss_grad(&stats_from(&flat[..half], n, d), &stats_from(&flat[half..], n, d))
            .unwrap();
        let num = central_difference(
            |x| losses::feature_distance_loss(&stats_from(&x[..half], n, d), &stats_from(&x[half..], n, d)).unwrap(),
            &flat,
            DEFAULT_STEP,
        );
        let mut analytic = flatten_stats_grads(&g.d_generated);
        analytic.extend(flatten_stats_grads(&g.d_mixed));
        check("feature distance", &analytic, &num);
    }
}

#[test]
fn mode_seeking_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (pairs, p, d) = (3, 6, 4);
        let img1 = uniform(&mut rng, pairs * p, -1.0, 1.0);
        let img2 = offset_from(&mut rng, &img1);
        let z1 = uniform(&mut rng, pairs * d, -2.0, 2.0);
        let z2 = offset_from(&mut rng, &z1);
        let sizes = [img1.len(), img2.len(), z1.len(), z2.len()];
        let flat: Vec<f64> = [img1, img2, z1, z2].concat();
        let eval = |x: &[f64]| {
            let (a, rest) = x.split_at(sizes[0]);
            let (b, rest) = rest.split_at(sizes[1]);
            let (c, e) = rest.split_at(sizes[2]);
            losses::mode_seeking_loss_grad(
                Rows::new(a, p).unwrap(),
                Rows::new(b, p).unwrap(),
                Rows::new(c, d).unwrap(),
                Rows::new(e, d).unwrap(),
            )
            .unwrap()
        };
        let g = eval(&flat);
        assert_eq!(g.pairs_used, pairs);
        let analytic: Vec<f64> = [g.d_img1, g.d_img2, g.d_z1, g.d_z2].concat();
        let num = central_difference(|x| eval(x).value, &flat, DEFAULT_STEP);
        check("mode seeking", &analytic, &num);
    }
}

#[test]
fn nt_xent_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (rows, d) = (6, 5);
        let flat = uniform(&mut rng, rows * d, -1.0, 1.0);
        let g = losses::nt_xent_loss_grad(Rows::new(&flat, d).unwrap(), 0.5).unwrap();
        let num = central_difference(
            |x| losses::nt_xent_loss(Rows::new(x, d).unwrap(), 0.5).unwrap(),
            &flat,
            DEFAULT_STEP,
        );
        check("nt-xent", &g.grad, &num);
    }
}
