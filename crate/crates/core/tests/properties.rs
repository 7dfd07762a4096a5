use align3d::alignreg::{self, align_loss};
use align3d::lm::Vocab;
use align3d::pointenc::{farthest_point_sample, PointCloud};
use align3d::probes::{knn_accuracy, token_f1};
use align3d::stack::build_vocab;
use align3d::trainer::{lr_at, prepare_stage2, Checkpoint, StagePlan};
use align3d::{AlignConfig, AlignMetric, Array, Graph, Model, ParamStore, ProjectorConfig, StackConfig, Task};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Array::new(&[rows, cols], d).unwrap())
}

fn nonzero_rows(a: &Array<f64>) -> bool {
    (0..a.rows()).all(|r| a.row(r).iter().map(|v| v * v).sum::<f64>() > 1e-6)
}

fn loss(q: &Array<f64>, t: &Array<f64>, metric: AlignMetric) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let qv = g.leaf(q.clone(), true);
    let tv = g.constant(t.clone());
    let l = align_loss(&mut g, qv, tv, metric).unwrap();
    g.value(l).item()
}

fn row_scaled(a: &Array<f64>, scales: &[f64]) -> Array<f64> {
    let mut out = a.clone();
    for (r, s) in scales.iter().enumerate() {
        for v in out.row_mut(r) {
            *v *= s;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_is_bounded_and_row_scale_invariant(
        q in matrix(4, 5),
        t in matrix(4, 5),
        scales in prop::collection::vec(0.01f64..50.0, 4),
    ) {
        prop_assume!(nonzero_rows(&q) && nonzero_rows(&t));
        let l = loss(&q, &t, AlignMetric::Cosine);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&l));
        let scaled = loss(&row_scaled(&q, &scales), &t, AlignMetric::Cosine);
        prop_assert!((l - scaled).abs() < 1e-9);
        let target_scaled = loss(&q, &row_scaled(&t, &scales), AlignMetric::Cosine);
        prop_assert!((l - target_scaled).abs() < 1e-9);
    }

    #[test]
    fn distances_are_not_scale_invariant(q in matrix(3, 4), t in matrix(3, 4), c in 1.5f64..4.0) {
        prop_assume!(q.data().iter().zip(t.data()).any(|(a, b)| (a - b).abs() > 1e-3));
        prop_assume!(q.data().iter().any(|v| v.abs() > 1e-2));
        let mut any_changed = false;
        for m in [AlignMetric::L1, AlignMetric::L2] {
            let base = loss(&q, &t, m);
            prop_assert!(base >= 0.0);
            let both = loss(&q.map(|v| c * v), &t.map(|v| c * v), m);
            let expect = if m == AlignMetric::L1 { c * base } else { c * c * base };
            prop_assert!((both - expect).abs() <= 1e-9 * expect.max(1.0));
            any_changed |= (loss(&q.map(|v| c * v), &t, m) - base).abs() > 1e-9;
        }
        prop_assert!(any_changed);
    }

    #[test]
    fn fps_picks_distinct_points_starting_at_zero(
        coords in prop::collection::vec(-1.0f32..1.0, 3 * 24),
        m in 1usize..24,
    ) {
        let mut data = Vec::new();
        for p in coords.chunks(3) {
            data.extend_from_slice(&[p[0], p[1], p[2], 0.5, 0.5, 0.5]);
        }
        let cloud = PointCloud::new(Array::new(&[24, 6], data).unwrap()).unwrap();
        let idx = farthest_point_sample(&cloud, m).unwrap();
        prop_assert_eq!(idx.len(), m);
        prop_assert_eq!(idx[0], 0);
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m);
    }

    #[test]
    fn knn_on_separated_clusters_is_perfect(offsets in prop::collection::vec(-0.4f64..0.4, 30)) {
        let features: Vec<Vec<f64>> = offsets
            .iter()
            .enumerate()
            .map(|(i, o)| vec![(i % 3) as f64 * 10.0 + o, *o])
            .collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        prop_assert_eq!(knn_accuracy(&features, &labels, 1).unwrap(), 100.0);
        prop_assert_eq!(knn_accuracy(&features, &labels, 5).unwrap(), 100.0);
    }

    #[test]
    fn token_f1_range_and_identity(words in prop::collection::vec("[a-z]{2,6}", 1..8), other in "[a-z ]{0,30}") {
        let text = words.join(" ");
        let f = token_f1(&text, &other);
        prop_assert!((0.0..=100.0).contains(&f));
        let content = words.iter().any(|w| !align3d::probes::STOPWORDS.contains(&w.as_str()));
        if content {
            prop_assert_eq!(token_f1(&text, &text), 100.0);
        }
    }

    #[test]
    fn lr_stays_between_endpoints(steps in 2usize..500, step in 0usize..600) {
        let plan = StagePlan { steps, ..StagePlan::stage2() };
        let lr = lr_at(step, &plan);
        let slack = 1e-12 * plan.lr_start;
        prop_assert!(lr <= plan.lr_start + slack && lr >= plan.lr_end - slack);
        prop_assert!(lr_at(step + 1, &plan) <= lr + slack);
        prop_assert_eq!(lr_at(steps - 1, &plan), plan.lr_end);
    }

    #[test]
    fn vocab_round_trips_known_words(picks in prop::collection::vec(4usize..40, 0..12)) {
        let v: Vocab = build_vocab();
        let words: Vec<&str> = picks.iter().filter_map(|&i| v.token(i % v.len())).filter(|w| !w.starts_with('<')).collect();
        let text = words.join(" ");
        prop_assert_eq!(v.detokenize(&v.tokenize(&text)), text);
    }
}

fn tiny_stage1() -> Checkpoint {
    Checkpoint {
        stage: 1,
        model: Model::init(&StackConfig::tiny(), 2).unwrap(),
        snapshot: serde_json::Value::Null,
    }
}

#[test]
fn doubling_lambda_doubles_projector_gradients_exactly() {
    let ck = tiny_stage1();
    let data = align3d::pointenc::make_dataset(&align3d::pointenc::ShapeKind::ALL[..2], 2, 32, 1).unwrap();
    let grads = |lambda: f64| {
        let cfg = AlignConfig {
            lambda,
            ..AlignConfig::default()
        };
        let (model, setup) = prepare_stage2(&ck, 0, Some((&cfg, &ProjectorConfig::default()))).unwrap();
        let setup = setup.unwrap();
        let s = &data.samples[0];
        let grouping = model.group(&s.cloud).unwrap();
        let (_, g) = align3d::trainer::sample_step(&model, s, &grouping, Task::Caption, Some(&setup), 1.0).unwrap();
        g
    };
    let (one, two) = (grads(1.0), grads(2.0));
    let mut checked = 0;
    for (name, a) in one.iter().filter(|(n, _)| n.starts_with("align.")) {
        let b = &two[name];
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!((2.0 * x).to_bits(), y.to_bits(), "{name}");
        }
        checked += 1;
    }
    assert_eq!(checked, 6);
}

#[test]
fn resolved_target_passes_no_gradient_upstream() {
    let store: ParamStore<f64> = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.leaf(Array::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]), true);
    let taps = alignreg::TargetTaps {
        qbar: x,
        proj_mid: x,
        proj_final: x,
    };
    let q = g.leaf(Array::from_rows(&[&[0.3, 0.1], &[2.0, 1.0]]), true);
    for target in [
        align3d::AlignTarget::Qformer,
        align3d::AlignTarget::ProjectorMid,
        align3d::AlignTarget::ProjectorFinal,
    ] {
        let t = alignreg::resolve_target(&mut g, &taps, target);
        let l = align_loss(&mut g, q, t, AlignMetric::L2).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).map_or(true, |a| a.data().iter().all(|&v| v == 0.0)));
        assert!(grads.get(q).is_some());
    }
}
