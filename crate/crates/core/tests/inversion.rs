use styleswap_autograd::{Adam, Graph, Tensor};
use styleswap_core::image::Image;
use styleswap_core::inversion::{
    inversion_objective, inversion_step, invert_one_to_many, invert_one_to_one, target_id_loss, BestTracker,
    InversionConfig, StyleSpace, StyleState,
};
use styleswap_core::networks::{ConvNetConfig, GeneratorConfig, Model, ModelConfig, Trainable};
use styleswap_core::swap::{StyleInput, Swapper};
use styleswap_core::synth::{stream_rng, Dataset, DatasetSpec};

fn swapper(mask_enabled: bool) -> Swapper<f64> {
    let mut mc = ModelConfig::from_generator(GeneratorConfig::with_channels(vec![4, 4, 4], 8));
    mc.identity = ConvNetConfig {
        resolution: 16,
        widths: [4, 4, 4],
        out_dim: 8,
    };
    mc.mapper_hidden = 8;
    Swapper::new(Model::new(mc, &mut stream_rng(2, 0, 0)).unwrap(), mask_enabled)
}

/// `[1, 3, 16, 16]` frames: the source, a target and a pool of distractors.
fn images() -> (Tensor<f64>, Tensor<f64>, Vec<Tensor<f64>>) {
    let ds = Dataset::generate(DatasetSpec {
        num_identities: 4,
        frames_per_identity: 3,
        resolution: 16,
        seed: 8,
    })
    .unwrap();
    let t = |id: usize, f: usize| Image::stack::<f64>(&[&ds.frame(id, f).image]).unwrap();
    let pool = (1..4).flat_map(|id| (0..3).map(move |f| (id, f))).map(|(id, f)| t(id, f)).collect();
    (t(0, 0), t(1, 1), pool)
}

fn config(iterations: usize, space: StyleSpace) -> InversionConfig {
    InversionConfig {
        iterations,
        space,
        seed: 3,
        ..InversionConfig::one_to_one()
    }
}

#[test]
fn defaults() {
    let one = InversionConfig::one_to_one();
    assert_eq!(one.iterations, 200);
    assert_eq!(InversionConfig::one_to_many().iterations, 50);
    assert_eq!((one.step_size, one.space), (0.01, StyleSpace::WPlus));
    assert_eq!((one.rec_weight, one.id_weight), (100.0, 10.0));
}

#[test]
fn zero_step_size_leaves_styles_and_model_unchanged() {
    let sw = swapper(true);
    let (src, _, pool) = images();
    let before = sw.model.params.swap_checksum();
    let w = sw.source_styles(&src).unwrap();
    let mut state = StyleState::new(StyleSpace::WPlus, &w, sw.style_slots()).unwrap();
    let initial = state.value.clone();
    let cfg = InversionConfig {
        step_size: 0.0,
        ..config(1, StyleSpace::WPlus)
    };
    let mut opt = Adam::new(styleswap_autograd::AdamConfig {
        lr: 0.0,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    inversion_step(&sw, &mut state, &mut opt, &src, &pool[0], &cfg).unwrap();
    assert_eq!(state.value.data(), initial.data());
    assert_eq!(sw.model.params.swap_checksum(), before);
}

#[test]
fn objective_is_the_weighted_sum_of_its_parts() {
    let sw = swapper(true);
    let (src, _, pool) = images();
    let cfg = config(1, StyleSpace::WPlus);
    let w = sw.source_styles(&src).unwrap();
    let state = StyleState::new(StyleSpace::WPlus, &w, sw.style_slots()).unwrap();
    let intermediate = sw.swap(&pool[2], &src).unwrap().image;

    let g = Graph::new();
    let sess = sw.model.bind(&g, Trainable::NONE);
    let styles = state.styles(g.constant(state.value.clone())).unwrap();
    let (total, _, _) = inversion_objective(
        &sess,
        &styles,
        g.constant(src.clone()),
        g.constant(intermediate.clone()),
        true,
        &cfg,
    )
    .unwrap();

    // Recompute from plain tensors: cycle image, pixel L1, feature L1s and
    // the cosine identity term.
    let cycle = sw.swap_with_styles(&state.input(), &intermediate).unwrap().image;
    let mean_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    let g2 = Graph::new();
    let s2 = sw.model.bind(&g2, Trainable::NONE);
    let fc = s2.embed_identity(g2.constant(cycle.clone())).unwrap();
    let fs = s2.embed_identity(g2.constant(src.clone())).unwrap();
    let mut rec = mean_abs(cycle.data(), src.data());
    for (a, b) in fc.features.iter().zip(&fs.features) {
        rec += mean_abs(a.value().data(), b.value().data());
    }
    let dot: f64 = fc.embedding.value().data().iter().zip(fs.embedding.value().data()).map(|(a, b)| a * b).sum();
    let expected = cfg.rec_weight * rec + cfg.id_weight * (1.0 - dot);
    assert!((total.item() - expected).abs() < 1e-6, "{} vs {expected}", total.item());
}

#[test]
fn zero_iterations_return_the_initialization() {
    let sw = swapper(true);
    let (src, tgt, pool) = images();
    let r = invert_one_to_one(&sw, &src, &tgt, &[], &config(0, StyleSpace::WPlus)).unwrap();
    assert_eq!(r.best_iteration, Some(0));
    assert!(r.trace.is_empty());
    let baseline = sw.swap(&src, &tgt).unwrap().image;
    let with = sw.swap_with_styles(&StyleInput::Stack(r.styles.clone()), &tgt).unwrap().image;
    assert_eq!(baseline.data(), with.data());

    let m = invert_one_to_many(&sw, &src, &pool, &config(0, StyleSpace::W)).unwrap();
    assert_eq!(m.best_iteration, None);
    let w = sw.source_styles(&src).unwrap();
    for row in m.styles.data().chunks(w.numel()) {
        assert_eq!(row, w.data());
    }
}

#[test]
fn empty_pool_is_rejected_when_iterating() {
    let sw = swapper(false);
    let (src, tgt, _) = images();
    assert!(invert_one_to_one(&sw, &src, &tgt, &[], &config(2, StyleSpace::WPlus)).is_err());
    assert!(invert_one_to_many(&sw, &src, &[], &config(2, StyleSpace::WPlus)).is_err());
}

#[test]
fn trace_is_one_entry_per_step_and_runs_repeat() {
    let sw = swapper(true);
    let (src, _, pool) = images();
    let cfg = config(4, StyleSpace::WPlus);
    let a = invert_one_to_many(&sw, &src, &pool, &cfg).unwrap();
    let b = invert_one_to_many(&sw, &src, &pool, &cfg).unwrap();
    assert_eq!(a.trace.iter().map(|t| t.iteration).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(a.trace.iter().all(|t| t.target_id.is_none() && t.distractor < pool.len()));
    assert_eq!(a.styles.data(), b.styles.data());
    assert_eq!(a.trace, b.trace);
}

#[test]
fn one_to_one_never_ends_worse_than_it_started() {
    let sw = swapper(true);
    let (src, tgt, pool) = images();
    let before = sw.model.params.swap_checksum();
    for seed in 0..3 {
        let cfg = InversionConfig {
            seed,
            step_size: 0.05,
            ..config(6, StyleSpace::WPlus)
        };
        let r = invert_one_to_one(&sw, &src, &tgt, &pool, &cfg).unwrap();
        let initial = r.initial_target_id.unwrap();
        let best = r.best_iteration.unwrap();
        let mut values = vec![initial];
        values.extend(r.trace.iter().map(|t| t.target_id.unwrap()));
        let argmin = (0..values.len()).fold(0, |b, i| if values[i] < values[b] { i } else { b });
        assert_eq!(best, argmin);
        let mut returned = StyleState::new(StyleSpace::WPlus, &sw.source_styles(&src).unwrap(), sw.style_slots()).unwrap();
        returned.value = r.styles.clone();
        let v = target_id_loss(&sw, &returned, &src, &tgt).unwrap();
        assert_eq!(v, values[best]);
        assert!(v <= initial);
    }
    assert_eq!(sw.model.params.swap_checksum(), before);
}

#[test]
fn argmin_tracking_on_a_given_trace() {
    let mut t = BestTracker::new(0, f64::INFINITY, "init");
    for (i, (v, tag)) in [(0.5, "one"), (0.3, "two"), (0.4, "three")].into_iter().enumerate() {
        t.observe(i + 1, v, || tag);
    }
    assert_eq!((t.iteration, t.item), (2, "two"));
    let mut tie = BestTracker::new(0, 0.3, "init");
    tie.observe(1, 0.3, || "later");
    assert_eq!(tie.iteration, 0);
}

#[test]
fn w_rows_stay_tied_and_w_plus_rows_diverge() {
    let sw = swapper(true);
    let (src, _, pool) = images();
    let cfg = |space| InversionConfig {
        step_size: 0.05,
        ..config(3, space)
    };
    let row_variance = |t: &Tensor<f64>| {
        let d = t.dim(1);
        let rows: Vec<&[f64]> = t.data().chunks(d).collect();
        (0..d)
            .map(|j| {
                let m = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / rows.len() as f64
            })
            .sum::<f64>()
    };
    let w = invert_one_to_many(&sw, &src, &pool, &cfg(StyleSpace::W)).unwrap().styles;
    assert_eq!(w.dim(0), sw.style_slots());
    let first = &w.data()[..w.dim(1)];
    assert!(w.data().chunks(w.dim(1)).all(|r| r == first));
    let wp = invert_one_to_many(&sw, &src, &pool, &cfg(StyleSpace::WPlus)).unwrap().styles;
    assert!(row_variance(&wp) > 0.0);
}

#[test]
fn different_distractors_give_different_intermediates() {
    let sw = swapper(true);
    let (src, _, pool) = images();
    let a = sw.swap(&pool[0], &src).unwrap().image;
    let b = sw.swap(&pool[4], &src).unwrap().image;
    assert_ne!(a.data(), b.data());
}

#[test]
fn swap_broadcast_forms_agree_bitwise() {
    for mask in [false, true] {
        let sw = swapper(mask);
        let (src, tgt, _) = images();
        let w = sw.source_styles(&src).unwrap();
        let plain = sw.swap(&src, &tgt).unwrap();
        let vector = sw.swap_with_styles(&StyleInput::Vector(w.clone()), &tgt).unwrap();
        let stack = Tensor::new(&[sw.style_slots(), w.dim(1)], w.data().repeat(sw.style_slots())).unwrap();
        let stacked = sw.swap_with_styles(&StyleInput::Stack(stack), &tgt).unwrap();
        assert_eq!(plain.image.data(), vector.image.data());
        assert_eq!(plain.image.data(), stacked.image.data());
        assert_eq!(plain.mask.is_some(), mask);
    }
}

#[test]
fn swap_rejects_mismatched_styles() {
    let sw = swapper(true);
    let (_, tgt, _) = images();
    let bad = Tensor::<f64>::zeros(&[3, 8]);
    assert!(sw.swap_with_styles(&StyleInput::Stack(bad.clone()), &tgt).is_err());
    assert!(sw.swap_with_styles(&StyleInput::Vector(bad), &tgt).is_err());
}
