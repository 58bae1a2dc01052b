use super::*;
use crate::util;
use proptest::prelude::*;
use rand::Rng;

// ---- independent oracle -------------------------------------------------
// Written against the formula, not the implementation: explicit index
// arithmetic and exhaustive enumeration of every part-position tuple.

fn oracle_dot(f: &Filter, m: &FeatureMap, x: usize, y: usize) -> f64 {
    let mut s = 0.0;
    for fy in 0..f.height {
        for fx in 0..f.width {
            for k in 0..f.dim {
                let w = f.weights[(fy * f.width + fx) * f.dim + k];
                let h = m.data[((y + fy) * m.width + (x + fx)) * m.dim + k];
                s += w * h;
            }
        }
    }
    s
}

fn oracle_score(model: &PartsModel, m: &FeatureMap, pos: &[(usize, usize)]) -> f64 {
    let mut s = oracle_dot(&model.root, m, pos[0].0, pos[0].1);
    for (i, p) in model.parts.iter().enumerate() {
        let (px, py) = pos[i + 1];
        s += oracle_dot(&p.filter, m, px, py);
        let dx = px as f64 - (pos[0].0 as f64 + p.anchor.0 as f64);
        let dy = py as f64 - (pos[0].1 as f64 + p.anchor.1 as f64);
        s -= p.deform[0] * dx + p.deform[1] * dy + p.deform[2] * dx * dx + p.deform[3] * dy * dy;
    }
    s + model.bias
}

fn all_positions(f: &Filter, m: &FeatureMap) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    if f.width > m.width || f.height > m.height {
        return v;
    }
    for y in 0..=m.height - f.height {
        for x in 0..=m.width - f.width {
            v.push((x, y));
        }
    }
    v
}

/// Max over the cartesian product of all part positions.
fn oracle_best(model: &PartsModel, m: &FeatureMap, root: (usize, usize)) -> f64 {
    let lists: Vec<Vec<(usize, usize)>> = model.parts.iter().map(|p| all_positions(&p.filter, m)).collect();
    let mut best = f64::NEG_INFINITY;
    let mut idx = vec![0usize; lists.len()];
    loop {
        let mut pos = vec![root];
        pos.extend(idx.iter().zip(&lists).map(|(i, l)| l[*i]));
        best = best.max(oracle_score(model, m, &pos));
        // odometer increment
        let mut k = 0;
        loop {
            if k == idx.len() {
                return best;
            }
            idx[k] += 1;
            if idx[k] < lists[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

pub(crate) fn random_filter(rng: &mut impl Rng, w: usize, h: usize, dim: usize) -> Filter {
    Filter::new(w, h, dim, (0..w * h * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub(crate) fn random_map(rng: &mut impl Rng, w: usize, h: usize, dim: usize) -> FeatureMap {
    FeatureMap::new(w, h, dim, (0..w * h * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub(crate) fn random_model(rng: &mut impl Rng, n_parts: usize, dim: usize, max_filter: usize) -> PartsModel {
    let rw = rng.random_range(1..=max_filter);
    let rh = rng.random_range(1..=max_filter);
    PartsModel {
        root: random_filter(rng, rw, rh, dim),
        parts: (0..n_parts)
            .map(|_| {
                let (w, h) = (rng.random_range(1..=max_filter), rng.random_range(1..=max_filter));
                PartSpec {
                filter: random_filter(rng, w, h, dim),
                anchor: (rng.random_range(-2..=3), rng.random_range(-2..=3)),
                deform: [
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                ],
            }})
            .collect(),
        bias: rng.random_range(-1.0..1.0),
        threshold: f64::NEG_INFINITY,
        cell_size: 8,
    }
}

// ---- filter_response ----------------------------------------------------

#[test]
fn zero_filter_gives_zero() {
    let mut rng = util::rng(1);
    let m = random_map(&mut rng, 5, 5, 2);
    let f = Filter::filled(2, 3, 2, 0.0);
    assert_eq!(filter_response(&f, &m, (1, 1)).unwrap(), 0.0);
}

#[test]
fn scalar_product() {
    let m = FeatureMap::new(1, 1, 1, vec![3.0]).unwrap();
    let f = Filter::new(1, 1, 1, vec![2.0]).unwrap();
    assert_eq!(filter_response(&f, &m, (0, 0)).unwrap(), 6.0);
}

#[test]
fn twelve_term_dot_product() {
    let mut rng = util::rng(7);
    let f = random_filter(&mut rng, 2, 2, 3);
    let m = random_map(&mut rng, 4, 4, 3);
    let mut expected = 0.0;
    for (fy, fx, k) in itertools_product() {
        expected += f.weights[(fy * 2 + fx) * 3 + k] * m.data[((1 + fy) * 4 + (1 + fx)) * 3 + k];
    }
    let got = filter_response(&f, &m, (1, 1)).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

fn itertools_product() -> Vec<(usize, usize, usize)> {
    let mut v = Vec::new();
    for fy in 0..2 {
        for fx in 0..2 {
            for k in 0..3 {
                v.push((fy, fx, k));
            }
        }
    }
    assert_eq!(v.len(), 12);
    v
}

#[test]
fn out_of_bounds_placement_rejected() {
    let m = FeatureMap::zeros(4, 4, 1);
    let f = Filter::filled(2, 2, 1, 1.0);
    assert!(matches!(filter_response(&f, &m, (3, 0)), Err(ModelError::OutOfBounds { .. })));
    assert!(matches!(filter_response(&f, &m, (-1, 0)), Err(ModelError::OutOfBounds { .. })));
    assert!(filter_response(&f, &m, (2, 2)).is_ok());
    let wrong_dim = Filter::filled(1, 1, 2, 1.0);
    assert!(matches!(filter_response(&wrong_dim, &m, (0, 0)), Err(ModelError::DimMismatch { .. })));
}

// ---- deformation_cost ---------------------------------------------------

fn part(anchor: (i64, i64), deform: [f64; 4]) -> PartSpec {
    PartSpec {
        filter: Filter::filled(1, 1, 1, 1.0),
        anchor,
        deform,
    }
}

#[test]
fn deformation_vanishes_at_anchor() {
    let p = part((2, -1), [3.0, -7.0, 2.0, 9.0]);
    assert_eq!(deformation_cost(&p, (4, 4), (6, 3)), 0.0);
}

#[test]
fn deformation_quadratic_example() {
    let p = part((0, 0), [0.0, 0.0, 1.0, 1.0]);
    assert_eq!(deformation_cost(&p, (0, 0), (2, -1)), 5.0);
}

#[test]
fn deformation_matches_polynomial() {
    let mut rng = util::rng(11);
    for _ in 0..200 {
        let d = [
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..2.0),
        ];
        let anchor = (rng.random_range(-3..4), rng.random_range(-3..4));
        let root = (rng.random_range(0..10), rng.random_range(0..10));
        let at = (rng.random_range(0..10), rng.random_range(0..10));
        let dx = (at.0 - root.0 - anchor.0) as f64;
        let dy = (at.1 - root.1 - anchor.1) as f64;
        let expected = d[0] * dx + d[1] * dy + d[2] * dx.powi(2) + d[3] * dy.powi(2);
        let got = deformation_cost(&part(anchor, d), root, at);
        assert!((got - expected).abs() < 1e-12);
    }
}

// ---- score_hypothesis ---------------------------------------------------

#[test]
fn bias_only_model_scores_bias_everywhere() {
    let mut rng = util::rng(3);
    let m = random_map(&mut rng, 5, 4, 2);
    let model = PartsModel {
        root: Filter::filled(2, 2, 2, 0.0),
        parts: vec![],
        bias: 0.75,
        threshold: 0.0,
        cell_size: 8,
    };
    for pos in all_positions(&model.root, &m) {
        let p = Placement {
            positions: vec![pos],
            score: 0.0,
        };
        assert_eq!(score_hypothesis(&model, &m, &p).unwrap(), 0.75);
    }
}

#[test]
fn part_at_anchor_with_zero_deformation() {
    let mut rng = util::rng(5);
    let m = random_map(&mut rng, 6, 6, 1);
    let mut model = random_model(&mut rng, 1, 1, 2);
    model.parts[0].anchor = (1, 1);
    model.parts[0].deform = [0.0; 4];
    model.root = random_filter(&mut rng, 2, 2, 1);
    model.parts[0].filter = random_filter(&mut rng, 2, 2, 1);
    let p = Placement {
        positions: vec![(1, 2), (2, 3)],
        score: 0.0,
    };
    let expected = filter_response(&model.root, &m, (1, 2)).unwrap()
        + filter_response(&model.parts[0].filter, &m, (2, 3)).unwrap()
        + model.bias;
    assert!((score_hypothesis(&model, &m, &p).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn random_two_part_model_matches_oracle() {
    let mut rng = util::rng(17);
    for _ in 0..50 {
        let model = random_model(&mut rng, 2, 2, 3);
        let m = random_map(&mut rng, 6, 6, 2);
        let root = all_positions(&model.root, &m);
        let p0 = root[rng.random_range(0..root.len())];
        let mut pos = vec![p0];
        for p in &model.parts {
            let l = all_positions(&p.filter, &m);
            pos.push(l[rng.random_range(0..l.len())]);
        }
        let got = score_hypothesis(
            &model,
            &m,
            &Placement {
                positions: pos.clone(),
                score: 0.0,
            },
        )
        .unwrap();
        assert!((got - oracle_score(&model, &m, &pos)).abs() < 1e-9);
    }
}

#[test]
fn hypothesis_arity_and_bounds_checked() {
    let model = PartsModel::toy(8, 0.0);
    let m = FeatureMap::zeros(4, 4, 1);
    let short = Placement {
        positions: vec![(0, 0)],
        score: 0.0,
    };
    assert!(matches!(score_hypothesis(&model, &m, &short), Err(ModelError::PlacementArity { .. })));
    let oob = Placement {
        positions: vec![(0, 0), (4, 0)],
        score: 0.0,
    };
    assert!(matches!(score_hypothesis(&model, &m, &oob), Err(ModelError::OutOfBounds { .. })));
}

// ---- best_placement -----------------------------------------------------

#[test]
fn zero_part_placement_is_root_plus_bias() {
    let mut rng = util::rng(23);
    let m = random_map(&mut rng, 5, 5, 1);
    let model = random_model(&mut rng, 0, 1, 2);
    let p = best_placement(&model, &m, (1, 1)).unwrap();
    assert_eq!(p.positions, vec![(1, 1)]);
    let expected = filter_response(&model.root, &m, (1, 1)).unwrap() + model.bias;
    assert!((p.score - expected).abs() < 1e-12);
}

#[test]
fn huge_deformation_snaps_part_to_anchor() {
    let mut rng = util::rng(29);
    let m = random_map(&mut rng, 8, 8, 1);
    let mut model = random_model(&mut rng, 1, 1, 2);
    model.parts[0].anchor = (2, 1);
    model.parts[0].deform = [0.0, 0.0, 1e6, 1e6];
    model.parts[0].filter = random_filter(&mut rng, 1, 1, 1);
    let p = best_placement(&model, &m, (3, 3)).unwrap();
    assert_eq!(p.positions[1], (5, 4));
}

#[test]
fn random_three_part_models_match_exhaustive_enumeration() {
    let mut rng = util::rng(31);
    for _ in 0..25 {
        let model = random_model(&mut rng, 3, 1, 2);
        let m = random_map(&mut rng, 6, 6, 1);
        for root in all_positions(&model.root, &m).into_iter().step_by(5) {
            let p = best_placement(&model, &m, root).unwrap();
            let o = oracle_best(&model, &m, root);
            assert!((p.score - o).abs() < 1e-9, "{} vs {}", p.score, o);
            let check = score_hypothesis(&model, &m, &p).unwrap();
            assert_eq!(check, p.score);
        }
    }
}

#[test]
fn part_larger_than_map_is_rejected() {
    let mut model = PartsModel::toy(8, 0.0);
    model.parts[0].filter = Filter::filled(5, 1, 1, 1.0);
    let m = FeatureMap::zeros(4, 4, 1);
    assert_eq!(best_placement(&model, &m, (0, 0)), Err(ModelError::NoValidPosition(1)));
}

#[test]
fn tie_break_prefers_smallest_offset_row_first() {
    // flat map, no deformation: every position ties
    let m = FeatureMap::zeros(5, 5, 1);
    let model = PartsModel {
        root: Filter::filled(1, 1, 1, 1.0),
        parts: vec![part((0, 0), [0.0; 4])],
        bias: 0.0,
        threshold: 0.0,
        cell_size: 1,
    };
    let p = best_placement(&model, &m, (2, 2)).unwrap();
    assert_eq!(p.positions[1], (0, 0));
}

// ---- detect -------------------------------------------------------------

#[test]
fn infinite_threshold_detects_nothing() {
    let mut rng = util::rng(37);
    let m = random_map(&mut rng, 6, 6, 1);
    let mut model = random_model(&mut rng, 2, 1, 2);
    model.threshold = f64::INFINITY;
    assert!(detect(&model, &m).unwrap().is_empty());
}

#[test]
fn bias_only_model_fires_everywhere() {
    let m = FeatureMap::zeros(5, 4, 1);
    let model = PartsModel {
        root: Filter::filled(2, 2, 1, 0.0),
        parts: vec![],
        bias: 0.3,
        threshold: 0.3,
        cell_size: 8,
    };
    let d = detect(&model, &m).unwrap();
    assert_eq!(d.len(), 4 * 3);
    assert!(d.iter().all(|x| x.score == 0.3));
    // ties ordered by (y, x)
    let roots: Vec<_> = d.iter().map(|x| x.root).collect();
    assert_eq!(roots[0], (0, 0));
    assert_eq!(roots[1], (1, 0));
    assert_eq!(roots[4], (0, 1));
    assert_eq!(d[5].bbox, BBox::new(8.0, 8.0, 16.0, 16.0));
}

#[test]
fn planted_peak_is_top_detection() {
    let mut rng = util::rng(41);
    let mut m = FeatureMap::new(10, 8, 2, (0..160).map(|_| rng.random_range(0.0..0.1)).collect()).unwrap();
    let root = Filter::new(2, 2, 2, vec![1.0, 0.5, 1.0, 0.5, 1.0, 0.5, 1.0, 0.5]).unwrap();
    // energy aligned with the root filter at (6, 3)
    for (x, y) in [(6, 3), (7, 3), (6, 4), (7, 4)] {
        m.cell_mut(x, y).copy_from_slice(&[5.0, 2.5]);
    }
    let model = PartsModel {
        root,
        parts: vec![PartSpec {
            filter: random_filter(&mut rng, 1, 1, 2),
            anchor: (0, 0),
            deform: [0.0, 0.0, 0.1, 0.1],
        }],
        bias: 0.0,
        threshold: f64::NEG_INFINITY,
        cell_size: 4,
    };
    let d = detect(&model, &m).unwrap();
    assert_eq!(d[0].root, (6, 3));
    assert_eq!(d[0].bbox, BBox::new(24.0, 12.0, 8.0, 8.0));
}

#[test]
fn detect_agrees_with_best_placement() {
    let mut rng = util::rng(43);
    for _ in 0..20 {
        let model = random_model(&mut rng, 2, 2, 2);
        let m = random_map(&mut rng, 7, 6, 2);
        for d in detect(&model, &m).unwrap() {
            let p = best_placement(&model, &m, d.root).unwrap();
            assert_eq!(p, d.placement);
        }
    }
}

#[test]
fn multi_level_boxes_scale_back_to_pixels() {
    let model = PartsModel {
        root: Filter::filled(1, 1, 1, 1.0),
        parts: vec![],
        bias: 0.0,
        threshold: 0.5,
        cell_size: 8,
    };
    let mut coarse = FeatureMap::zeros(3, 3, 1);
    coarse.cell_mut(1, 1)[0] = 1.0;
    let d = detect_levels(&model, &[(FeatureMap::zeros(6, 6, 1), 1.0), (coarse, 0.5)]).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].level, 1);
    assert_eq!(d[0].bbox, BBox::new(16.0, 16.0, 16.0, 16.0));
}

// ---- invariants ---------------------------------------------------------

fn model_and_map() -> impl Strategy<Value = (PartsModel, FeatureMap)> {
    (any::<u64>(), 0usize..=3, 2usize..=8, 2usize..=8).prop_map(|(seed, parts, w, h)| {
        let mut rng = util::rng(seed);
        let model = random_model(&mut rng, parts, 1, 2);
        let map = random_map(&mut rng, w.max(2), h.max(2), 1);
        (model, map)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn best_placement_equals_enumeration((model, map) in model_and_map()) {
        for root in all_positions(&model.root, &map) {
            let p = best_placement(&model, &map, root);
            let parts_fit = model.parts.iter().all(|p| !all_positions(&p.filter, &map).is_empty());
            if !parts_fit {
                prop_assert!(p.is_err());
                continue;
            }
            let p = p.unwrap();
            prop_assert!((p.score - oracle_best(&model, &map, root)).abs() < 1e-9);
        }
    }

    #[test]
    fn bias_shift_is_linear((model, map) in model_and_map(), delta in -5.0f64..5.0) {
        let mut shifted = model.clone();
        shifted.bias += delta;
        for root in all_positions(&model.root, &map) {
            let (Ok(a), Ok(b)) = (best_placement(&model, &map, root), best_placement(&shifted, &map, root)) else { continue };
            prop_assert_eq!(&a.positions, &b.positions);
            prop_assert!((b.score - a.score - delta).abs() < 1e-9);
        }
    }

    #[test]
    fn parts_are_placed_independently(seed in any::<u64>()) {
        let mut rng = util::rng(seed);
        let model = random_model(&mut rng, 3, 1, 2);
        let map = random_map(&mut rng, 8, 8, 1);
        let mut perturbed = model.clone();
        perturbed.parts[0].filter = random_filter(&mut rng, perturbed.parts[0].filter.width, perturbed.parts[0].filter.height, 1);
        for root in all_positions(&model.root, &map) {
            let a = best_placement(&model, &map, root).unwrap();
            let b = best_placement(&perturbed, &map, root).unwrap();
            prop_assert_eq!(&a.positions[2..], &b.positions[2..]);
        }
    }

    #[test]
    fn raising_threshold_only_removes((model, map) in model_and_map(), t1 in -3.0f64..3.0, dt in 0.0f64..3.0) {
        let mut lo = model.clone();
        lo.threshold = t1;
        let mut hi = model;
        hi.threshold = t1 + dt;
        let (Ok(a), Ok(b)) = (detect(&lo, &map), detect(&hi, &map)) else { return Ok(()) };
        for d in &b {
            prop_assert!(a.iter().any(|x| x.root == d.root && x.score == d.score));
        }
    }

    #[test]
    fn translation_moves_detections(seed in any::<u64>(), tx in 0usize..3, ty in 0usize..3) {
        let mut rng = util::rng(seed);
        // strong quadratic penalties bound the optimal displacement to < 5 cells
        let mut model = random_model(&mut rng, 2, 1, 2);
        for p in &mut model.parts {
            p.deform[2] += 1.0;
            p.deform[3] += 1.0;
        }
        let content = random_map(&mut rng, 5, 5, 1);
        let (cw, ch, margin) = (5 + 2 * 8 + 3, 5 + 2 * 8 + 3, 8);
        let embed = |ox: usize, oy: usize| {
            let mut m = FeatureMap::zeros(cw, ch, 1);
            for y in 0..5 {
                for x in 0..5 {
                    m.cell_mut(x + ox, y + oy)[0] = content.cell(x, y)[0];
                }
            }
            m
        };
        let a = embed(margin, margin);
        let b = embed(margin + tx, margin + ty);
        let da = detect(&model, &a).unwrap();
        let db = detect(&model, &b).unwrap();
        let reach = 8;
        for d in da.iter().filter(|d| {
            d.root.0 >= reach && d.root.1 >= reach && d.root.0 + reach + 3 <= cw - 3 && d.root.1 + reach + 3 <= ch - 3
        }) {
            let moved = (d.root.0 + tx, d.root.1 + ty);
            let e = db.iter().find(|x| x.root == moved).expect("translated root present");
            prop_assert_eq!(e.score, d.score);
            let shifted: Vec<_> = d.placement.positions.iter().map(|p| (p.0 + tx, p.1 + ty)).collect();
            prop_assert_eq!(&e.placement.positions, &shifted);
        }
    }
}
