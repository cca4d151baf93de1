use proptest::prelude::*;

use hdmnet::checkpoint::{decode, encode, Dtype, NamedTensor};
use hdmnet::distillation::{gt_teacher, kl_stage_loss};
use hdmnet::episodes::{generate_class_bank, indexed_episode};
use hdmnet::matching::{correlation_map, inverse_softmax};
use hdmnet::metrics::{iou, miou};
use hdmnet::{Graph, Tensor};

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

fn matrix(max_rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows).prop_flat_map(move |r| tensor(vec![r, cols], -3.0, 3.0))
}

fn distribution(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1e-9..1.0f64, n).prop_map(move |v| {
        let total: f64 = v.iter().sum();
        Tensor::new(vec![n], v.iter().map(|x| x / total).collect()).unwrap()
    })
}

fn mask(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::bool::ANY, n * n)
        .prop_map(move |v| Tensor::new(vec![n, n], v.into_iter().map(f64::from).map(|b| b.min(1.0)).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correlation_columns_normalise(q in matrix(20, 5), s in matrix(20, 5), w in tensor(vec![4, 5], -1.0, 1.0), t in 0.05..2.0f64) {
        let mut g = Graph::new();
        let (qv, sv) = (g.constant(q).unwrap(), g.constant(s).unwrap());
        let (a, b) = (g.constant(w.clone()).unwrap(), g.constant(w).unwrap());
        let corr = correlation_map(&mut g, qv, sv, a, b, t, 1).unwrap();
        let raw = g.value(corr.raw).clone();
        prop_assert!(raw.data().iter().all(|x| x.abs() <= 1.0 / t + 1e-9));
        let hat = inverse_softmax(&mut g, &corr).unwrap();
        let (n, m) = (g.shape(hat)[0], g.shape(hat)[1]);
        let v = g.value(hat).data();
        for j in 0..m {
            let col: f64 = (0..n).map(|i| v[i * m + j]).sum();
            prop_assert!((col - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative(p in distribution(12), q in distribution(12)) {
        let mut g = Graph::new();
        let s = g.constant(q).unwrap();
        let kl = kl_stage_loss(&mut g, &p, s).unwrap();
        prop_assert!(g.value(kl).item().unwrap() >= 0.0);
    }

    #[test]
    fn miou_ignores_episode_order(scores in prop::collection::vec((0..4usize, 0.0..1.0f64), 1..30), seed in any::<u64>()) {
        let mut shuffled = scores.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7) % n);
        }
        prop_assert_eq!(miou(&scores).0.to_bits(), miou(&shuffled).0.to_bits());
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in mask(6), b in mask(6)) {
        let x = iou(&a, &b).unwrap();
        prop_assert_eq!(x, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn gt_teacher_is_a_distribution(m in mask(8), cells in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let t = gt_teacher(&m, cells, cells).unwrap();
        prop_assert!((t.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(t.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn checkpoint_round_trips(values in prop::collection::vec(-1e6..1e6f64, 1..40)) {
        let n = values.len();
        let records = vec![
            NamedTensor { name: "a".into(), dtype: Dtype::F64, tensor: Tensor::new(vec![n], values.clone()).unwrap() },
            NamedTensor { name: "b.c".into(), dtype: Dtype::F64, tensor: Tensor::new(vec![1, n], values).unwrap() },
        ];
        let bytes = encode(&records).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back).unwrap(), bytes);
        prop_assert_eq!(back[0].tensor.data(), records[0].tensor.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn episodes_satisfy_data_invariants(seed in any::<u64>(), index in 0..1000u64, k in 1..4usize) {
        let bank = generate_class_bank(8, seed).unwrap();
        let e = indexed_episode(&bank, &[0, 3, 5], index, k, 32, 32, seed).unwrap();
        prop_assert_eq!(e.support.len(), k);
        for s in std::iter::once(&e.query).chain(&e.support) {
            prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert!(s.foreground() > 0);
        }
    }
}
