use eraser_core::panoptic::{Segment, SegmentKind};
use eraser_core::raster::Mask;
use eraser_core::refocus::*;
use ndarray::Array2;
use proptest::prelude::*;

fn label_strategy() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Positive), Just(Label::Negative), Just(Label::Mask)]
}

fn label_map(max_side: usize) -> impl Strategy<Value = LabelMap> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(label_strategy(), h * w).prop_map(move |labels| LabelMap::new(h, w, labels).unwrap())
    })
}

/// Label map with query/key vectors and a head width.
fn attention_instance() -> impl Strategy<Value = (LabelMap, Array2<f64>, Array2<f64>, usize)> {
    (label_map(4), 1usize..=5).prop_flat_map(|(lm, d)| {
        let n = lm.len();
        let q = prop::collection::vec(-3.0f64..3.0, n * d);
        let k = prop::collection::vec(-3.0f64..3.0, n * d);
        (Just(lm), q, k, Just(d)).prop_map(move |(lm, q, k, d)| {
            let n = lm.len();
            (lm, Array2::from_shape_vec((n, d), q).unwrap(), Array2::from_shape_vec((n, d), k).unwrap(), d)
        })
    })
}

fn is(l: Label, set: &[Label]) -> bool {
    set.contains(&l)
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.mapv_inplace(|v| (v - m).exp() / z);
    }
    out
}

#[test]
fn all_27_one_by_three_maps() {
    use Label::*;
    let all = [Positive, Negative, Mask];
    for a in all {
        for b in all {
            for c in all {
                let lm = LabelMap::new(1, 3, vec![a, b, c]).unwrap();
                let (pos, neg) = build_pair_masks(&lm);
                let l = [a, b, c];
                for i in 0..3 {
                    for j in 0..3 {
                        let want_pos = (l[i] == Mask && l[j] == Positive) || (l[i] == Positive && is(l[j], &[Mask, Positive]));
                        let want_neg = (l[i] == Mask && is(l[j], &[Mask, Negative])) || (l[i] == Negative && l[j] == Mask);
                        assert_eq!(pos[[i, j]], want_pos, "{l:?} ({i},{j})");
                        assert_eq!(neg[[i, j]], want_neg, "{l:?} ({i},{j})");
                    }
                }
            }
        }
    }
}

#[test]
fn label_map_precedence_on_a_4x4_scene() {
    let block = |y0: usize, y1: usize, x0: usize, x1: usize| Mask::from_fn(4, 4, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x));
    let grass = block(0, 4, 0, 4);
    let person = block(1, 3, 1, 3);
    let rock = block(3, 4, 0, 2);
    let segments = vec![
        Segment { id: 1, category: "grass".into(), kind: SegmentKind::Stuff, mask: grass },
        Segment { id: 2, category: "person".into(), kind: SegmentKind::Thing, mask: person.clone() },
        Segment { id: 3, category: "rock".into(), kind: SegmentKind::Stuff, mask: rock.clone() },
    ];
    let erase = block(1, 3, 1, 2);
    let rule = default_negative_rule(&segments, &erase);
    assert!(rule.categories.contains("person"));
    let (lm, gaps) = build_label_map(&segments, &erase, &rule).unwrap();
    assert_eq!(gaps, 0);
    for y in 0..4 {
        for x in 0..4 {
            let want = if erase.get(y, x) {
                Label::Mask
            } else if person.get(y, x) {
                Label::Negative
            } else {
                Label::Positive
            };
            assert_eq!(lm.get(y, x), want, "({y},{x})");
        }
    }
}

#[test]
fn uncovered_pixels_fall_back_to_positive() {
    let seg = Segment { id: 1, category: "dog".into(), kind: SegmentKind::Thing, mask: Mask::from_fn(3, 3, |y, _| y == 0) };
    let (lm, gaps) = build_label_map(&[seg], &Mask::zeros(3, 3), &NegativeRule::default()).unwrap();
    assert_eq!(gaps, 6);
    assert_eq!(lm.count(Label::Positive), 9);
    assert_eq!(lm.count(Label::Mask), 0);
}

#[test]
fn pooling_rejects_larger_target() {
    let lm = LabelMap::filled(4, 4, Label::Positive);
    assert!(matches!(downsample_label_map(&lm, 5, 4), Err(RefocusError::InvalidTarget { .. })));
    assert_eq!(downsample_label_map(&lm, 4, 4).unwrap(), lm);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pair_masks_match_case_tables_and_are_disjoint(lm in label_map(6)) {
        use Label::*;
        let (pos, neg) = build_pair_masks(&lm);
        let l = lm.labels();
        for i in 0..l.len() {
            for j in 0..l.len() {
                let want_pos = (l[i] == Mask && l[j] == Positive) || (l[i] == Positive && is(l[j], &[Mask, Positive]));
                let want_neg = (l[i] == Mask && is(l[j], &[Mask, Negative])) || (l[i] == Negative && l[j] == Mask);
                prop_assert_eq!(pos[[i, j]], want_pos);
                prop_assert_eq!(neg[[i, j]], want_neg);
                prop_assert!(!(pos[[i, j]] && neg[[i, j]]));
            }
        }
    }

    #[test]
    fn modulation_combines_weights_and_masks((lm, q, k, _) in attention_instance()) {
        let scores = q.dot(&k.t());
        let modulation = AttentionModulation::new(&lm, &scores, &RefocusConfig::default()).unwrap();
        for ((i, j), &m) in modulation.m.indexed_iter() {
            let want = if modulation.mask_pos[[i, j]] { modulation.w_pos[[i, j]] } else { 0.0 }
                - if modulation.mask_neg[[i, j]] { modulation.w_neg[[i, j]] } else { 0.0 };
            prop_assert_eq!(m, want);
        }
    }

    #[test]
    fn rows_are_stochastic_for_any_bias((lm, q, k, d) in attention_instance(), seed in any::<u64>()) {
        let n = lm.len();
        let mut modulation = AttentionModulation::zeros(n);
        modulation.m = Array2::from_shape_fn((n, n), |(i, j)| ((seed.wrapping_mul(31).wrapping_add((i * n + j) as u64) % 2001) as f64 - 1000.0) / 10.0);
        let a = refocused_attention(&q, &k, &modulation, d).unwrap();
        for row in a.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn refocus_moves_masked_queries_toward_background((lm, q, k, d) in attention_instance()) {
        let cfg = RefocusConfig::default();
        let scores = q.dot(&k.t());
        let modulation = AttentionModulation::new(&lm, &scores, &cfg).unwrap();
        let before = softmax_rows(&scores.mapv(|v| v / (d as f64).sqrt()));
        let after = refocused_attention(&q, &k, &modulation, d).unwrap();
        let l = lm.labels();
        for i in (0..l.len()).filter(|&i| l[i] == Label::Mask) {
            let hi = scores.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = scores.row(i).iter().cloned().fold(f64::INFINITY, f64::min);
            if !l.contains(&Label::Positive) || 0.2 * lo + 1.8 * hi <= 0.0 {
                continue;
            }
            let ratio = |a: &Array2<f64>| {
                let p: f64 = (0..l.len()).filter(|&j| l[j] == Label::Positive).map(|j| a[[i, j]]).sum();
                p / (1.0 - p)
            };
            prop_assert!(ratio(&after) > ratio(&before), "row {}", i);
        }
    }

    #[test]
    fn constant_score_shift_moves_weights_and_odds((lm, q, k, d) in attention_instance(), c in -2.0f64..2.0) {
        // a masked row's bias moves by +c on background keys and by
        // -lambda_neg * c on the rest, so with lambda_neg = 1 the background
        // odds of that row scale by exactly exp(2c / sqrt(d))
        let cfg = RefocusConfig::default();
        let scores = q.dot(&k.t());
        let shifted = scores.mapv(|v| v + c);
        let (wp, wn) = modulation_weights(&scores, &cfg);
        let (wp2, wn2) = modulation_weights(&shifted, &cfg);
        prop_assert!((&wp2 - &wp).iter().all(|v| (v - c).abs() < 1e-9));
        prop_assert!((&wn2 - &wn).iter().all(|v| (v - cfg.lambda_neg * c).abs() < 1e-9));
        let scale = 1.0 / (d as f64).sqrt();
        let a = softmax_rows(&(&scores + &AttentionModulation::new(&lm, &scores, &cfg).unwrap().m).mapv(|v| v * scale));
        let b = softmax_rows(&(&shifted + &AttentionModulation::new(&lm, &shifted, &cfg).unwrap().m).mapv(|v| v * scale));
        let l = lm.labels();
        for i in (0..l.len()).filter(|&i| l[i] == Label::Mask) {
            let odds = |m: &Array2<f64>| {
                let part = |pos: bool| (0..l.len()).filter(|&j| (l[j] == Label::Positive) == pos).map(|j| m[[i, j]]).sum::<f64>();
                part(true) / part(false)
            };
            let (before, after) = (odds(&a), odds(&b));
            if before > 0.0 && before.is_finite() && after.is_finite() {
                let want = (2.0 * c * scale).exp();
                prop_assert!((after / before - want).abs() < 1e-6 * want, "row {}: {} vs {}", i, after / before, want);
            }
        }
    }

    #[test]
    fn priority_pooling_matches_block_scan(lm in label_map(9), th in 1usize..=9, tw in 1usize..=9) {
        prop_assume!(th <= lm.height() && tw <= lm.width());
        let out = downsample_label_map(&lm, th, tw).unwrap();
        let (sh, sw) = (lm.height(), lm.width());
        for ty in 0..th {
            for tx in 0..tw {
                let rows = (ty * sh / th)..((ty + 1) * sh).div_ceil(th);
                let cols = (tx * sw / tw)..((tx + 1) * sw).div_ceil(tw);
                let mut covered = Vec::new();
                for y in rows {
                    for x in cols.clone() {
                        covered.push(lm.get(y, x));
                    }
                }
                let want = if covered.contains(&Label::Mask) {
                    Label::Mask
                } else if covered.contains(&Label::Negative) {
                    Label::Negative
                } else {
                    Label::Positive
                };
                prop_assert_eq!(out.get(ty, tx), want);
            }
        }
    }

    #[test]
    fn window_is_a_closed_interval(lo in 0.0f64..0.9, width in 0.05f64..0.5, t in 0.0f64..=1.0) {
        let cfg = RefocusConfig { window_lo: lo, window_hi: (lo + width).min(1.0), ..Default::default() };
        prop_assert_eq!(window_active(t, &cfg), cfg.window_lo <= t && t <= cfg.window_hi);
        prop_assert!(window_active(cfg.window_lo, &cfg) && window_active(cfg.window_hi, &cfg));
    }
}
