mod common;

use std::f64::consts::{PI, TAU};

use common::*;
use fpfl_core::minutiae_map::{encode_map, orientation_diff, MapConfig, Minutia, MinutiaeTemplate};
use fpfl_core::net::{loss_and_grad, Dropout, TrainBatch};
use fpfl_core::spatial_transform::{align, grid_sample, AffineMatrix, AlignmentParams};
use fpfl_core::synth::{gen_identity, render_impression, render_with, Perturbation, SynthConfig};
use fpfl_core::template::{deserialize, random_template as random_unit, serialize};
use fpfl_core::{
    build_gallery, eval_search, eval_verification, fuse, match_score, BranchEmbedding, FixedTemplate, GrayImage,
    NetParams,
};
use proptest::prelude::*;
use rand::Rng;

fn angle() -> impl Strategy<Value = f64> {
    -20.0f64..20.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn orientation_diff_is_a_circle_metric(a in angle(), b in angle(), c in angle(), k in -3i32..=3) {
        let d = |x, y| orientation_diff(x, y).unwrap();
        let ab = d(a, b);
        prop_assert!((0.0..=PI).contains(&ab));
        prop_assert_eq!(ab, d(b, a));
        prop_assert!((ab - d(a + k as f64 * TAU, b)).abs() < 1e-9);
        prop_assert!(d(a, c) <= ab + d(b, c) + 1e-9);
        prop_assert!((ab - circ_dist(a, b)).abs() < 1e-9);
    }
}

fn template_strategy(max: usize) -> impl Strategy<Value = MinutiaeTemplate> {
    (0..=max, any::<u64>()).prop_map(|(n, seed)| random_template(&mut rng(seed), n, 96, 80))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn map_is_bounded_and_matches_brute_force(t in template_strategy(30), sigma in 0.5f64..3.0) {
        let cfg = MapConfig { sigma_s: sigma, sigma_o: sigma, ..MapConfig::with_dims(24, 32, 6) };
        let map = encode_map(&t, &cfg).unwrap();
        let oracle = brute_force_map(&t, &cfg);
        for (v, o) in map.values().iter().zip(&oracle) {
            prop_assert!(*v >= 0.0 && *v as f64 <= t.len() as f64 + 1e-6);
            prop_assert!((*v as f64 - o).abs() < 1e-6);
        }
    }

    #[test]
    fn map_is_linear_in_the_point_set(a in template_strategy(20), b in template_strategy(20)) {
        let cfg = MapConfig::with_dims(20, 24, 4);
        let sum = encode_map(&a.union(&b).unwrap(), &cfg).unwrap();
        let ha = encode_map(&a, &cfg).unwrap();
        let hb = encode_map(&b, &cfg).unwrap();
        for ((x, y), z) in ha.values().iter().zip(hb.values()).zip(sum.values()) {
            prop_assert!((*x as f64 + *y as f64 - *z as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn rotating_orientations_shifts_channels(t in template_strategy(20), c in 2usize..9, steps in 1usize..4) {
        let cfg = MapConfig::with_dims(16, 16, c);
        let turned: Vec<Minutia> = t
            .minutiae()
            .iter()
            .map(|m| Minutia::new(m.x, m.y, m.theta + steps as f64 * TAU / c as f64).unwrap())
            .collect();
        let h0 = encode_map(&t, &cfg).unwrap();
        let h1 = encode_map(&MinutiaeTemplate::new(turned, t.width(), t.height()).unwrap(), &cfg).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                for k in 0..c {
                    let moved = h1.get(i, j, (k + steps) % c);
                    prop_assert!((moved - h0.get(i, j, k)).abs() < 1e-6);
                }
            }
        }
    }
}

fn image_strategy() -> impl Strategy<Value = GrayImage> {
    (2usize..20, 2usize..20, any::<u64>()).prop_map(|(h, w, seed)| {
        let mut r = rng(seed);
        GrayImage::from_fn(h, w, |_, _| r.random::<f32>())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampler_output_is_a_convex_combination_or_zero(
        img in image_strategy(),
        tx in -30.0f64..30.0,
        ty in -30.0f64..30.0,
        theta in -PI..PI,
        window in 2.0f64..40.0,
        out in 1usize..24,
    ) {
        let p = AlignmentParams::unclamped(tx, ty, theta, window);
        let a = align(&img, &p, out, out).unwrap();
        let lo = img.pixels().iter().copied().fold(0.0f32, f32::min);
        let hi = img.pixels().iter().copied().fold(0.0f32, f32::max);
        for v in a.pixels() {
            prop_assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
        }
        let again = align(&img, &p, out, out).unwrap();
        prop_assert_eq!(a, again);
    }

    #[test]
    fn sources_outside_the_image_read_zero(img in image_strategy(), side in 0usize..4) {
        // Translate by more than the image extent in one direction.
        let shift = match side {
            0 => (3.0, 0.0),
            1 => (-3.0, 0.0),
            2 => (0.0, 3.0),
            _ => (0.0, -3.0),
        };
        let a = AffineMatrix::similarity(1.0, 1.0, 0.0, shift.0, shift.1);
        let out = grid_sample(&img, &a, img.height(), img.width()).unwrap();
        prop_assert!(out.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_sampling_is_exact(img in image_strategy()) {
        let out = grid_sample(&img, &AffineMatrix::identity(), img.height(), img.width()).unwrap();
        prop_assert_eq!(out, img);
    }
}

fn unit(dim: usize) -> impl Strategy<Value = FixedTemplate> {
    any::<u64>().prop_map(move |s| random_unit(&mut rng(s), dim))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scores_are_symmetric_and_bounded(a in unit(64), b in unit(64)) {
        let ab = match_score(&a, &b).unwrap();
        let ba = match_score(&b, &a).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!(ab.abs() <= 1.0 + 1e-6);
        prop_assert!((match_score(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fuse_ignores_positive_scale(
        x1 in prop::collection::vec(-1.0f32..1.0, 16),
        x2 in prop::collection::vec(-1.0f32..1.0, 16),
        alpha in 0.01f32..100.0,
    ) {
        prop_assume!(x1.iter().chain(&x2).any(|v| v.abs() > 1e-3));
        let f = fuse(&BranchEmbedding::texture(x1.clone()).unwrap(), &BranchEmbedding::minutiae(x2.clone()).unwrap()).unwrap();
        let scaled = |v: &[f32]| v.iter().map(|x| x * alpha).collect::<Vec<_>>();
        let g = fuse(
            &BranchEmbedding::texture(scaled(&x1)).unwrap(),
            &BranchEmbedding::minutiae(scaled(&x2)).unwrap(),
        )
        .unwrap();
        let norm: f64 = f.values().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5);
        for (a, b) in f.values().iter().zip(g.values()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn serialization_round_trips(t in unit(512)) {
        let bytes = serialize(&t);
        prop_assert_eq!(bytes.len(), 16 + 2048);
        let back = deserialize(&bytes).unwrap();
        prop_assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn truncated_templates_are_rejected(t in unit(32), cut in 0usize..144) {
        let bytes = serialize(&t);
        prop_assert!(deserialize(&bytes[..cut.min(bytes.len() - 1)]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Reordering the gallery changes results only through the index
    /// tie-break: scores and identities of each rank stay put except among
    /// equal scores, which follow the new insertion order.
    #[test]
    fn gallery_order_only_affects_ties(seed in any::<u64>(), n in 2usize..40, k in 1usize..50) {
        let mut r = rng(seed);
        let distinct: Vec<FixedTemplate> = (0..n.div_ceil(2)).map(|_| random_unit(&mut r, 8)).collect();
        let rows: Vec<(String, FixedTemplate)> = (0..n)
            .map(|i| (format!("r{i}"), distinct[r.random_range(0..distinct.len())].clone()))
            .collect();
        let mut shuffled = rows.clone();
        for i in (1..n).rev() {
            shuffled.swap(i, r.random_range(0..=i));
        }
        let g1 = build_gallery(rows).unwrap();
        let g2 = build_gallery(shuffled).unwrap();
        let q = distinct[0].clone();
        let a = g1.search(&q, k).unwrap();
        let b = g2.search(&q, k).unwrap();
        prop_assert_eq!(a.len(), k.min(n));
        let sa: Vec<f32> = a.candidates.iter().map(|c| c.score).collect();
        let sb: Vec<f32> = b.candidates.iter().map(|c| c.score).collect();
        prop_assert_eq!(&sa, &sb);
        for w in b.candidates.windows(2) {
            prop_assert!(w[0].score > w[1].score || w[0].index < w[1].index);
        }
        for w in a.candidates.windows(2) {
            prop_assert!(w[0].score > w[1].score || w[0].index < w[1].index);
        }
    }

    #[test]
    fn cmc_is_monotone_and_complete(seed in any::<u64>(), n in 1usize..20, probes in 1usize..20) {
        let mut r = rng(seed);
        let rows: Vec<(String, FixedTemplate)> = (0..n).map(|i| (format!("g{i}"), random_unit(&mut r, 6))).collect();
        let g = build_gallery(rows).unwrap();
        let ps: Vec<(String, FixedTemplate)> = (0..probes)
            .map(|_| (format!("g{}", r.random_range(0..n)), random_unit(&mut r, 6)))
            .collect();
        let rep = eval_search(&ps, &g).unwrap();
        prop_assert_eq!(rep.cmc.len(), n);
        for w in rep.cmc.windows(2) {
            prop_assert!(w[0].accuracy <= w[1].accuracy);
        }
        prop_assert_eq!(rep.cmc_at(n), Some(1.0));
    }

    #[test]
    fn measured_far_never_exceeds_request(
        genuine in prop::collection::vec(-1.0f32..1.0, 1..50),
        imposter in prop::collection::vec(-1.0f32..1.0, 1..200),
        far in 0.0f64..1.0,
    ) {
        let far = far.max(1.0 / imposter.len() as f64);
        let rep = eval_verification(&genuine, &imposter, &[far]).unwrap();
        let p = &rep.tar_at_far[0];
        let accepted = imposter.iter().filter(|&&s| s as f64 >= p.threshold).count();
        prop_assert!(accepted as f64 / imposter.len() as f64 <= far + 1e-12);
        prop_assert_eq!(p.measured_far, accepted as f64 / imposter.len() as f64);
        prop_assert!((0.0..=1.0).contains(&p.tar));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn loss_and_gradient_ignore_batch_order(seed in any::<u64>(), localizer in any::<bool>()) {
        let cfg = tiny_config(localizer, seed % 1000);
        let p = NetParams::<f64>::init(&cfg).unwrap();
        let batch = random_batch(&cfg, 5, seed);
        let order = [3usize, 0, 4, 1, 2];
        let permuted = TrainBatch::new(
            order.iter().map(|&i| batch.images[i].clone()).collect(),
            order.iter().map(|&i| batch.labels[i]).collect(),
            order.iter().map(|&i| batch.maps[i].clone()).collect(),
        )
        .unwrap();
        let (la, ga) = loss_and_grad(&p, &batch, Dropout::Off).unwrap();
        let (lb, gb) = loss_and_grad(&p, &permuted, Dropout::Off).unwrap();
        prop_assert!((la.total - lb.total).abs() <= 1e-6 * la.total.abs().max(1.0));
        for (x, y) in ga.blocks().iter().zip(gb.blocks()) {
            for (u, v) in x.data.iter().zip(&y.data) {
                prop_assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0));
            }
        }
    }

    #[test]
    fn synthetic_impressions_follow_their_perturbation(seed in any::<u64>(), tx in -6.0f64..6.0, ty in -6.0f64..6.0, rot in -0.3f64..0.3) {
        let cfg = SynthConfig::with_size(48);
        let id = gen_identity(seed, &cfg).unwrap();
        prop_assert!((15..=40).contains(&id.master_minutiae.len()));
        prop_assert!(id.orientation_field.iter().all(|&o| (0.0..PI as f32).contains(&o)));

        let plain = render_with(&id, &Perturbation::none(), 0);
        prop_assert_eq!(&plain.image, &id.render_master());
        prop_assert_eq!(&plain.minutiae, &id.master_minutiae);

        let p = Perturbation { rotation: rot, tx, ty, ..Perturbation::none() };
        let imp = render_with(&id, &p, 0);
        let centre = 24.0;
        for m in imp.minutiae.minutiae() {
            let (x, y) = p.inverse(m.x, m.y, centre);
            let hit = id.master_minutiae.minutiae().iter().any(|o| {
                (o.x - x).abs() < 1e-6 && (o.y - y).abs() < 1e-6 && circ_dist(o.theta + rot, m.theta) < 1e-6
            });
            prop_assert!(hit);
        }
        let noisy = render_impression(&id, seed ^ 1, &cfg).unwrap();
        prop_assert!(noisy.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(noisy, render_impression(&id, seed ^ 1, &cfg).unwrap());
    }
}
