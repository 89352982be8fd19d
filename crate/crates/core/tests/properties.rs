use proptest::prelude::*;
use styleswap_autograd::{Graph, Tensor};
use styleswap_core::evaluation::{hue_distance, id_metrics, mask_iou};
use styleswap_core::mask::{blend, normalize};

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
}

proptest! {
    #[test]
    fn retrieval_ignores_positive_rescaling(
        gallery in rows(4, 5),
        swaps in rows(8, 5),
        labels in prop::collection::vec(0usize..4, 8),
        scale in prop::collection::vec(0.1f64..10.0, 12),
    ) {
        prop_assume!(gallery.iter().chain(&swaps).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let g: Vec<_> = gallery.iter().cloned().zip(0..).collect();
        let s: Vec<_> = swaps.iter().cloned().zip(labels.iter().copied()).collect();
        let scaled = |set: &[(Vec<f64>, usize)], offset: usize| -> Vec<(Vec<f64>, usize)> {
            set.iter()
                .enumerate()
                .map(|(i, (r, l))| (r.iter().map(|v| v * scale[offset + i]).collect(), *l))
                .collect()
        };
        let (c1, r1) = id_metrics(&s, &g).unwrap();
        let (c2, r2) = id_metrics(&scaled(&s, 0), &scaled(&g, 8)).unwrap();
        prop_assert!((c1 - c2).abs() < 1e-9);
        prop_assert_eq!(r1, r2);
        prop_assert!((0.0..=1.0).contains(&r1));
    }

    #[test]
    fn hue_distance_is_a_symmetric_circular_metric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let d = hue_distance(a, b);
        prop_assert!((0.0..=0.5).contains(&d));
        prop_assert!((d - hue_distance(b, a)).abs() < 1e-12);
    }

    #[test]
    fn mask_iou_is_bounded_and_symmetric(
        a in prop::collection::vec(0.0f32..1.0, 16),
        b in prop::collection::vec(0.0f32..1.0, 16),
    ) {
        let iou = mask_iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert_eq!(iou, mask_iou(&b, &a).unwrap());
    }

    #[test]
    fn blend_stays_between_its_inputs(
        logits in prop::collection::vec(-10.0f64..10.0, 4),
        gen in prop::collection::vec(-1.0f64..1.0, 12),
        tgt in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        let g = Graph::<f64>::new();
        let m = normalize(g.constant(Tensor::from_f64(&[1, 1, 2, 2], &logits).unwrap()));
        let out = blend(
            m,
            g.constant(Tensor::from_f64(&[1, 3, 2, 2], &gen).unwrap()),
            g.constant(Tensor::from_f64(&[1, 3, 2, 2], &tgt).unwrap()),
        )
        .unwrap()
        .value();
        for (i, v) in out.data().iter().enumerate() {
            let (lo, hi) = (gen[i].min(tgt[i]), gen[i].max(tgt[i]));
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }
}
