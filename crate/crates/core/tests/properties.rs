use cpie_core::eval::{match_contours, mf_ods, EvalConfig, Matcher};
use cpie_core::fixtures::{raw_sample, texture, FixtureConfig};
use cpie_core::geom::{fit_circular_arc, fit_line_segment, Point};
use cpie_core::image::{BinaryMap, ImagePlane};
use cpie_core::model::head::cosine_distance_map;
use cpie_core::model::{CpieModel, ModelConfig, Preset};
use cpie_core::nms::{direction_map, gabor_responses, nms_thin, smooth, GaborBank};
use cpie_core::pairgen::{generate_pair, padded_dims, AugmentConfig, MaskMode, RawSample};
use cpie_core::tensor::{ConvSpec, Graph};
use proptest::prelude::*;

fn sparse_map(h: usize, w: usize, pts: &[(usize, usize)]) -> BinaryMap {
    let pts: Vec<_> = pts.iter().map(|&(r, c)| (r % h, c % w)).collect();
    BinaryMap::from_points(h, w, &pts)
}

fn points_strategy() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..32, 0usize..32), 0..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn same_padding_keeps_spatial_dims(h in 1usize..12, w in 1usize..12, k in prop::sample::select(vec![1usize, 3, 5]), d in 1usize..3) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[h, w, 2], vec![0.5; h * w * 2]).unwrap();
        let wt = g.param(&[k, k, 2, 3], vec![0.1; k * k * 6]).unwrap();
        let y = g.conv2d(x, wt, None, ConvSpec::new(k, 2, 3).dilation(d)).unwrap();
        prop_assert_eq!(g.shape(y), &[h, w, 3]);
    }

    #[test]
    fn cosine_distance_ignores_feature_scale(
        feats in prop::collection::vec(-1.0f64..1.0, 24),
        proto in prop::collection::vec(-1.0f64..1.0, 4),
        c in 0.01f64..100.0,
    ) {
        prop_assume!(proto.iter().any(|v| v.abs() > 0.1));
        let mut g = Graph::<f64>::new();
        let p = g.constant(&[4], proto).unwrap();
        let a = g.constant(&[2, 3, 4], feats.clone()).unwrap();
        let b = g.constant(&[2, 3, 4], feats.iter().map(|v| v * c).collect()).unwrap();
        let da = cosine_distance_map(&mut g, a, p, 20.0).unwrap();
        let db = cosine_distance_map(&mut g, b, p, 20.0).unwrap();
        let pixel_norms: Vec<f64> = feats.chunks(4).map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        for ((x, y), n) in g.value(da).iter().zip(g.value(db)).zip(pixel_norms) {
            // The norm guard only matters for near-zero feature vectors.
            if n * c.min(1.0) > 1e-3 {
                prop_assert!((x - y).abs() < 1e-4, "{} vs {}", x, y);
            }
            prop_assert!((0.0..=40.0 + 1e-9).contains(x));
        }
    }

    #[test]
    fn precision_recall_f_are_bounded(pred in points_strategy(), gt in points_strategy(), tol in 0.5f64..4.0, h in 4usize..33, w in 4usize..33) {
        let (p, g) = (sparse_map(h, w, &pred), sparse_map(h, w, &gt));
        for m in [Matcher::Greedy, Matcher::Optimal] {
            let c = match_contours(&p, &g, tol, m).unwrap();
            let (pr, re, f) = (c.precision(), c.recall(), c.f_measure());
            prop_assert!((0.0..=1.0).contains(&pr) && (0.0..=1.0).contains(&re) && (0.0..=1.0).contains(&f));
            prop_assert!(f <= pr.max(re) + 1e-12);
            prop_assert!(c.tp <= p.count().min(g.count()));
        }
    }

    #[test]
    fn optimal_matching_is_symmetric(pred in points_strategy(), gt in points_strategy(), tol in 0.5f64..4.0) {
        let (p, g) = (sparse_map(32, 32, &pred), sparse_map(32, 32, &gt));
        let a = match_contours(&p, &g, tol, Matcher::Optimal).unwrap().tp;
        let b = match_contours(&g, &p, tol, Matcher::Optimal).unwrap().tp;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn optimal_is_never_worse_than_greedy(pred in points_strategy(), gt in points_strategy(), tol in 0.5f64..4.0) {
        let (p, g) = (sparse_map(32, 32, &pred), sparse_map(32, 32, &gt));
        let gr = match_contours(&p, &g, tol, Matcher::Greedy).unwrap().tp;
        let op = match_contours(&p, &g, tol, Matcher::Optimal).unwrap().tp;
        // A greedy matching is maximal, so it holds at least half the maximum.
        prop_assert!(gr <= op && 2 * gr >= op);
    }

    #[test]
    fn adding_a_perfect_image_never_lowers_ods(
        scores in prop::collection::vec(0.0f32..1.0, 256),
        gt in prop::collection::vec((0usize..16, 0usize..16), 1..20),
        extra in prop::collection::vec((0usize..16, 0usize..16), 1..20),
    ) {
        let cfg = EvalConfig { thresholds: 19, ..EvalConfig::default() };
        let pred = ImagePlane::from_data(16, 16, 1, scores);
        let g = sparse_map(16, 16, &gt);
        let base = mf_ods(std::slice::from_ref(&pred), std::slice::from_ref(&g), &cfg).unwrap().best_f;
        let perfect = sparse_map(16, 16, &extra);
        let more = mf_ods(&[pred, perfect.to_plane()], &[g, perfect], &cfg).unwrap().best_f;
        prop_assert!(more >= base);
    }

    #[test]
    fn tolerance_scales_with_diagonal(h in 1usize..1000, w in 1usize..1000, frac in 0.001f64..0.1) {
        let cfg = EvalConfig { tolerance_fraction: frac, ..EvalConfig::default() };
        let l = ((h * h + w * w) as f64).sqrt();
        prop_assert!((cfg.tolerance_px(h, w) - frac * l).abs() < 1e-9 * l);
    }

    #[test]
    fn thinning_keeps_a_valued_subset(values in prop::collection::vec(0.0f32..1.0, 24 * 24), cut in 0.0f32..0.8) {
        let raw = ImagePlane::from_data(24, 24, 1, values.into_iter().map(|v| if v < cut { 0.0 } else { v }).collect());
        let bank = GaborBank::default();
        let thin = nms_thin(&raw, &bank);
        for (t, r) in thin.data().iter().zip(raw.data()) {
            prop_assert!(*t == 0.0 || t == r);
        }
        let d = direction_map(&raw, &gabor_responses(&smooth(&raw, &bank), &bank), bank.threshold());
        for (l, r) in d.labels().iter().zip(raw.data()) {
            prop_assert!(*r != 0.0 || *l == 0);
        }
    }

    #[test]
    fn thinning_a_bar_is_idempotent(vertical in any::<bool>(), pos in 8usize..24, half in 1usize..2, len in 10usize..26) {
        let on = |r: usize, c: usize| {
            let (across, along) = if vertical { (c, r) } else { (r, c) };
            across.abs_diff(pos) <= half && (4..4 + len).contains(&along)
        };
        let raw = ImagePlane::from_fn(32, 32, 1, |r, c, _| if on(r, c) { 1.0 } else { 0.0 });
        let bank = GaborBank::default();
        let once = nms_thin(&raw, &bank);
        prop_assert_eq!(nms_thin(&once, &bank), once);
    }

    #[test]
    fn line_fit_invariants(pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..40)) {
        let pts: Vec<Point> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        prop_assume!(pts.iter().any(|p| (p[0] - pts[0][0]).abs() + (p[1] - pts[0][1]).abs() > 1e-3));
        let f = fit_line_segment(&pts).unwrap();
        prop_assert!((f.direction[0].hypot(f.direction[1]) - 1.0).abs() < 1e-9);
        prop_assert!(f.rms >= 0.0);
        for e in f.endpoints {
            let off = -(e[0] - f.centroid[0]) * f.direction[1] + (e[1] - f.centroid[1]) * f.direction[0];
            prop_assert!(off.abs() < 1e-6);
        }
    }

    #[test]
    fn arc_fit_invariants(cx in -20.0f64..20.0, cy in -20.0f64..20.0, r in 3.0f64..60.0, a0 in 0.0f64..6.28, span in 0.5f64..6.2, n in 5usize..40) {
        let pts: Vec<Point> = (0..n)
            .map(|i| {
                let t = a0 + span * i as f64 / (n - 1) as f64;
                let wobble = 0.05 * ((i * 7) as f64).sin();
                [cx + (r + wobble) * t.cos(), cy + (r + wobble) * t.sin()]
            })
            .collect();
        let f = fit_circular_arc(&pts).unwrap();
        prop_assert!(f.radius > 0.0 && f.rms >= 0.0);
        prop_assert!((0.0..360.0).contains(&f.start_deg));
        prop_assert!(f.span_deg() > 0.0 && f.span_deg() <= 360.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_pairs_hold_their_invariants(seed in any::<u64>(), index in 0usize..4, train in any::<bool>()) {
        let cfg = FixtureConfig { size: 48, ..FixtureConfig::default() };
        let view = raw_sample(&cfg, 3, index);
        let raw = RawSample::new(view.image, view.mask).unwrap();
        let pool: Vec<_> = (0..2).map(|i| texture(&cfg, 3, i)).collect();
        let aug = AugmentConfig::default();
        let mode = if train { MaskMode::Train } else { MaskMode::Test };
        let (pair, trace) = generate_pair(&raw, &pool, &aug, mode, seed).unwrap();
        for d in [pair.support_image.dims(), pair.query_image.dims(), pair.support_mask.dims(), pair.query_mask.dims()] {
            prop_assert_eq!(d, (48, 48));
        }
        prop_assert!(!pair.support_mask.is_empty() && !pair.query_mask.is_empty());
        for pass in [&trace.support, &trace.query] {
            prop_assert!((0.0..=aug.mixup_max).contains(&pass.gamma));
            prop_assert_eq!(pass.pad_dims, padded_dims(48, 48, aug.pad_factor));
        }
        prop_assert!(pair.query_image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(generate_pair(&raw, &pool, &aug, mode, seed).unwrap(), (pair, trace));
    }

    #[test]
    fn model_outputs_stay_in_range(seed in 0u64..1000, row in 4usize..28) {
        let model = CpieModel::new(ModelConfig::preset(Preset::Toy), seed).unwrap();
        let img = |k: u64| ImagePlane::from_fn(32, 32, 3, |r, c, ch| (((r * 7 + c * 3 + ch) as u64 * (seed + k)) % 97) as f32 / 96.0);
        let mask = BinaryMap::from_fn(32, 32, |r, c| r == row && (2..30).contains(&c));
        let out = model.forward(&img(1), &img(2), &mask).unwrap();
        prop_assert!(out.map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let alpha = model.config().head.alpha;
        prop_assert!(out.distance.data().iter().all(|v| (0.0..=2.0 * alpha + 1e-4).contains(v)));
    }
}
