use crgan_core::bank::{ema_update, FeatureBank};
use crgan_core::geometry::{crop_min_square, min_square_side, RotatedBox, SquareWindow};
use crgan_core::latent::{channel_interpolate, interpolate_stats, reparameterize};
use crgan_core::losses::{self, Rows};
use crgan_core::metrics::evaluate_labels;
use crgan_core::{BinaryMask, FeatureStats, StatsRole};
use proptest::prelude::*;

fn vec_and_mask(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (
        prop::collection::vec(-10.0f64..10.0, d),
        prop::collection::vec(-10.0f64..10.0, d),
        prop::collection::vec(any::<bool>(), d),
    )
}

fn unit_ish(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

proptest! {
    #[test]
    fn ci_selects_coordinatewise((x, y, bits) in (1usize..64).prop_flat_map(vec_and_mask)) {
        let m = BinaryMask::from_bits(bits.clone()).unwrap();
        let out = channel_interpolate(&x, &y, &m).unwrap();
        for i in 0..x.len() {
            prop_assert_eq!(out[i], if bits[i] { x[i] } else { y[i] });
        }
    }

    #[test]
    fn ci_complement_swaps_arguments((x, y, bits) in (1usize..64).prop_flat_map(vec_and_mask)) {
        let m = BinaryMask::from_bits(bits.clone()).unwrap();
        let not_m = BinaryMask::from_bits(bits.iter().map(|b| !b).collect()).unwrap();
        prop_assert_eq!(channel_interpolate(&x, &y, &m).unwrap(), channel_interpolate(&y, &x, &not_m).unwrap());
    }

    #[test]
    fn ci_is_idempotent((x, y, bits) in (1usize..64).prop_flat_map(vec_and_mask)) {
        let m = BinaryMask::from_bits(bits).unwrap();
        let once = channel_interpolate(&x, &y, &m).unwrap();
        prop_assert_eq!(channel_interpolate(&once, &y, &m).unwrap(), once.clone());
        prop_assert_eq!(channel_interpolate(&x, &once, &m).unwrap(), once);
    }

    #[test]
    fn mixed_stats_share_one_mask((a_mu, b_mu, bits) in (1usize..32).prop_flat_map(vec_and_mask)) {
        let a_lv: Vec<f64> = a_mu.iter().map(|v| v * 0.1).collect();
        let b_lv: Vec<f64> = b_mu.iter().map(|v| -v * 0.1).collect();
        let a = FeatureStats::new(a_mu.clone(), a_lv.clone(), StatsRole::Real).unwrap();
        let b = FeatureStats::new(b_mu.clone(), b_lv.clone(), StatsRole::Real).unwrap();
        let m = BinaryMask::from_bits(bits.clone()).unwrap();
        let mixed = interpolate_stats(&a, &b, &m).unwrap();
        prop_assert_eq!(mixed.role(), StatsRole::Mixed);
        for i in 0..bits.len() {
            let from_a = bits[i];
            prop_assert_eq!(mixed.mu()[i], if from_a { a_mu[i] } else { b_mu[i] });
            prop_assert_eq!(mixed.log_var()[i], if from_a { a_lv[i] } else { b_lv[i] });
        }
    }

    #[test]
    fn reparameterize_is_affine_in_eps(
        mu in prop::collection::vec(-3.0f64..3.0, 8),
        lv in prop::collection::vec(-3.0f64..3.0, 8),
        eps in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let s = FeatureStats::new(mu.clone(), lv.clone(), StatsRole::Real).unwrap();
        let z = reparameterize(&s, &eps).unwrap();
        for i in 0..8 {
            let expected = mu[i] + (0.5 * lv[i]).exp() * eps[i];
            prop_assert!((z.z()[i] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn alignment_uniform_is_nonnegative(
        q in unit_ish(6),
        p in unit_ish(6),
        negs in prop::collection::vec(unit_ish(6), 0..6),
        tau in 0.05f64..2.0,
    ) {
        let l = losses::alignment_uniform_loss(&q, &p, &negs, tau).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn nt_xent_is_nonnegative_and_symmetric_under_view_swap(
        n in 2usize..6,
        seed in prop::collection::vec(-1.0f64..1.0, 2 * 6 * 4),
    ) {
        let d = 4;
        let rows = &seed[..2 * n * d];
        let l = losses::nt_xent_loss(Rows::new(rows, d).unwrap(), 0.5).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
        // Swapping the two view blocks relabels positives only.
        let swapped: Vec<f64> = [&rows[n * d..], &rows[..n * d]].concat();
        let l2 = losses::nt_xent_loss(Rows::new(&swapped, d).unwrap(), 0.5).unwrap();
        prop_assert!((l - l2).abs() < 1e-12);
    }

    #[test]
    fn mode_seeking_is_permutation_invariant(
        pairs in 1usize..6,
        data in prop::collection::vec(-1.0f64..1.0, 4 * 6 * 5),
        rot in 0usize..6,
    ) {
        let (p, d) = (3, 2);
        let img1 = &data[..pairs * p];
        let img2 = &data[30..30 + pairs * p];
        let z1 = &data[60..60 + pairs * d];
        let z2 = &data[90..90 + pairs * d];
        let base = losses::mode_seeking_loss(
            Rows::new(img1, p).unwrap(), Rows::new(img2, p).unwrap(),
            Rows::new(z1, d).unwrap(), Rows::new(z2, d).unwrap(),
        ).unwrap();
        let perm = |v: &[f64], w: usize| -> Vec<f64> {
            (0..pairs).flat_map(|i| v[((i + rot) % pairs) * w..((i + rot) % pairs + 1) * w].to_vec()).collect()
        };
        let (a, b, c, e) = (perm(img1, p), perm(img2, p), perm(z1, d), perm(z2, d));
        let moved = losses::mode_seeking_loss(
            Rows::new(&a, p).unwrap(), Rows::new(&b, p).unwrap(),
            Rows::new(&c, d).unwrap(), Rows::new(&e, d).unwrap(),
        ).unwrap();
        prop_assert!((base - moved).abs() <= 1e-12 * base.abs().max(1.0));
        // Swapping the roles inside each pair is also a no-op.
        let flipped = losses::mode_seeking_loss(
            Rows::new(img2, p).unwrap(), Rows::new(img1, p).unwrap(),
            Rows::new(z2, d).unwrap(), Rows::new(z1, d).unwrap(),
        ).unwrap();
        prop_assert!((base - flipped).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn enclosing_square_contains_box(
        cx in -50.0f64..150.0,
        cy in -50.0f64..150.0,
        w in 0.5f64..80.0,
        h in 0.5f64..80.0,
        theta in -7.0f64..7.0,
    ) {
        let b = RotatedBox::new(cx, cy, w, h, theta, 0).unwrap();
        let win = SquareWindow::enclosing(&b);
        for (x, y) in b.corners() {
            prop_assert!(win.contains(x, y), "corner ({x}, {y}) outside {win:?}");
        }
        // Minimality: one pixel smaller cannot hold the axis extent.
        let (ex, ey) = b.axis_extent();
        let side = min_square_side(&b);
        prop_assert!(side == 1 || ((side - 1) as f64) < ex.max(ey));
    }

    #[test]
    fn crop_patch_matches_window(
        cx in 0.0f64..32.0,
        cy in 0.0f64..32.0,
        w in 1.0f64..20.0,
        h in 1.0f64..20.0,
        theta in -3.2f64..3.2,
    ) {
        let scene: Vec<f32> = (0..32 * 32).map(|i| i as f32).collect();
        let b = RotatedBox::new(cx, cy, w, h, theta, 0).unwrap();
        let patch = crop_min_square(&scene, 32, 32, &b).unwrap();
        prop_assert_eq!(patch.pixels.len(), patch.side * patch.side);
        prop_assert_eq!(patch.side, min_square_side(&b));
    }

    #[test]
    fn metrics_stay_in_percent_range(
        labels in prop::collection::vec((0usize..5, 0usize..5), 1..60),
    ) {
        let (t, p): (Vec<usize>, Vec<usize>) = labels.into_iter().unzip();
        let m = evaluate_labels(&t, &p, 5).unwrap();
        for v in [m.accuracy, m.balanced_accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert_eq!(m.balanced_accuracy, m.recall);
    }

    #[test]
    fn bank_never_exceeds_capacity(cap in 1usize..20, batches in prop::collection::vec(1usize..8, 1..10)) {
        let mut bank = FeatureBank::new(cap, 0.9, vec![vec![0.0; 2]]).unwrap();
        let mut inserted = 0usize;
        for n in batches {
            let stats: Vec<FeatureStats> = (0..n)
                .map(|i| FeatureStats::new(vec![(inserted + i) as f64, 0.0], vec![0.0, 0.0], StatsRole::Real).unwrap())
                .collect();
            bank.enqueue(&stats).unwrap();
            inserted += n;
            prop_assert_eq!(bank.len(), inserted.min(cap));
            // The oldest surviving entry is the first not yet evicted.
            let (mu, _) = bank.negatives();
            prop_assert_eq!(mu[0][0], (inserted - bank.len()) as f64);
        }
    }
}

#[test]
fn ema_matches_closed_form_over_many_steps() {
    // Constant live weights: shadow_t = live + m^t (shadow_0 - live).
    let m: f64 = 0.999;
    let live = [2.0, -1.0, 0.5];
    let mut shadow = vec![0.0, 4.0, 0.5];
    let start = shadow.clone();
    for _ in 0..1000 {
        ema_update(&mut shadow, &live, m).unwrap();
    }
    for i in 0..3 {
        let expected = live[i] + m.powi(1000) * (start[i] - live[i]);
        assert!((shadow[i] - expected).abs() < 1e-10, "{} vs {}", shadow[i], expected);
    }
}
