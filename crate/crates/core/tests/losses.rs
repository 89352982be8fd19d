use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use styleswap_autograd::{Graph, Tensor};
use styleswap_core::losses::{default_n_d, fm_loss, r1_penalty, r1_penalty_with_step, total_loss, LossParts, LossWeights};
use styleswap_core::networks::{GeneratorConfig, Model, ModelConfig};
use styleswap_core::synth::stream_rng;

#[test]
fn feature_matching_single_term() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64(&[1, 1], &[2.0]).unwrap());
    let b = g.constant(Tensor::from_f64(&[1, 1], &[5.0]).unwrap());
    assert_eq!(fm_loss(&[a], &[b], 1).unwrap().item(), 3.0);
    assert!(fm_loss(&[a], &[b], 2).is_err());
    assert!(fm_loss(&[a], &[b], 0).is_err());
}

#[test]
fn default_weights_and_total() {
    let w = LossWeights::default();
    assert_eq!((w.lambda_id, w.lambda_fm, w.lambda_rec, w.lambda_mask), (10.0, 100.0, 100.0, 1.0));
    let parts = LossParts {
        adv: 1.0,
        id: 0.5,
        fm: 0.01,
        rec: None,
        mask: Some(0.2),
    };
    assert!((total_loss(&parts, &w) - (1.0 + 5.0 + 1.0 + 0.2)).abs() < 1e-12);
    assert_eq!(default_n_d(5), 4);
    assert_eq!(default_n_d(1), 1);
}

/// With a small input step the penalty's parameter gradient matches
/// central differences of the penalty value itself.
#[test]
fn r1_gradient_matches_finite_differences() {
    let mc = ModelConfig::from_generator(GeneratorConfig::with_channels(vec![4, 4, 4], 8));
    let model = Model::<f64>::new(mc, &mut stream_rng(3, 0, 0)).unwrap();
    let disc = &model.nets.discriminator;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let reals = Tensor::from_f64(&[2, 3, 16, 16], &(0..2 * 3 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
    let (value, grads) = r1_penalty_with_step(disc, &model.params.discriminator, &reals, 1.0, 1e-6).unwrap();
    assert!(value > 0.0);
    assert!(r1_penalty(disc, &model.params.discriminator, &reals, 0.0).unwrap().0 == 0.0);

    let h = 1e-5;
    for _ in 0..8 {
        let p = rng.gen_range(0..grads.len());
        let e = rng.gen_range(0..grads[p].numel());
        let at = |delta: f64| {
            let mut store = model.params.discriminator.clone();
            let id = store.ids().nth(p).unwrap();
            store.get_mut(id).data_mut()[e] += delta;
            r1_penalty(disc, &store, &reals, 1.0).unwrap().0
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let analytic = grads[p].data()[e];
        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
        assert!(err < 1e-2, "param {p}[{e}]: {analytic} vs {numeric}");
    }
}
