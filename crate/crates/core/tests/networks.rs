use styleswap_autograd::{Graph, Tensor};
use styleswap_core::networks::{ConvNetConfig, GeneratorConfig, Model, ModelConfig, Styles, Trainable};
use styleswap_core::synth::{stream_rng, Dataset, DatasetSpec};
use styleswap_core::image::Image;

fn model(channels: Vec<usize>, style_dim: usize) -> Model<f64> {
    let res = 4 << (channels.len() - 1);
    let mut mc = ModelConfig::from_generator(GeneratorConfig::with_channels(channels, style_dim));
    mc.identity = ConvNetConfig {
        resolution: res,
        widths: [4, 4, 4],
        out_dim: 8,
    };
    mc.mapper_hidden = 12;
    Model::new(mc, &mut stream_rng(5, 0, 0)).unwrap()
}

fn frames(res: usize, n: usize) -> Tensor<f64> {
    let ds = Dataset::generate(DatasetSpec {
        num_identities: n.max(2),
        frames_per_identity: 2,
        resolution: res,
        seed: 4,
    })
    .unwrap();
    let imgs: Vec<_> = (0..n).map(|i| &ds.frame(i, 0).image).collect();
    Image::stack::<f64>(&imgs).unwrap()
}

#[test]
fn four_block_generator_produces_full_resolution_rgb() {
    let m = model(vec![8, 8, 4, 4], 16);
    let x = frames(32, 2);
    let g = Graph::new();
    let s = m.bind(&g, Trainable::NONE);
    let out = s.swap(g.constant(x.clone()), g.constant(x), false).unwrap();
    assert_eq!(out.image.shape(), vec![2, 3, 32, 32]);
    assert!(out.masks.is_none() && out.blended.is_none());
    assert!(out.image.value().data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn untrained_mask_heads_give_one_half_everywhere() {
    let m = model(vec![8, 8, 4, 4], 16);
    let x = frames(32, 2);
    let g = Graph::new();
    let s = m.bind(&g, Trainable::NONE);
    let out = s.swap(g.constant(x.clone()), g.constant(x), true).unwrap();
    let masks = out.masks.as_ref().unwrap();
    assert_eq!(masks.norm.len(), 4);
    for (l, mk) in masks.norm.iter().enumerate() {
        let r = 4 << l;
        assert_eq!(mk.shape(), vec![2, 1, r, r]);
        assert!(mk.value().data().iter().all(|&v| v == 0.5), "level {l}");
    }
}

#[test]
fn broadcast_styles_match_the_single_vector_bitwise() {
    let m = model(vec![8, 8, 4, 4], 16);
    let x = frames(32, 2);
    let g = Graph::new();
    let s = m.bind(&g, Trainable::NONE);
    let target = g.constant(x.clone());
    let w = s.source_style(g.constant(x)).unwrap();
    let attrs = s.encode_attributes(target).unwrap();
    for mask in [false, true] {
        let a = s.generate(&attrs, &Styles::Vector(w), target, mask).unwrap();
        let b = s.generate(&attrs, &Styles::broadcast(w, 8), target, mask).unwrap();
        assert_eq!(a.result().value().data(), b.result().value().data());
    }

    // The same through a stacked [2L, D] tensor with a single-row batch.
    let one = frames(32, 1);
    let t1 = g.constant(one.clone());
    let w1 = s.source_style(t1).unwrap();
    let rows = g.constant(Tensor::new(&[8, 16], w1.value().data().repeat(8)).unwrap());
    let a1 = s.encode_attributes(t1).unwrap();
    let a = s.generate(&a1, &Styles::Vector(w1), t1, true).unwrap();
    let b = s.generate(&a1, &Styles::from_rows(rows).unwrap(), t1, true).unwrap();
    assert_eq!(a.result().value().data(), b.result().value().data());
}

#[test]
fn wrong_style_count_is_rejected() {
    let m = model(vec![8, 8, 4, 4], 16);
    let x = frames(32, 1);
    let g = Graph::new();
    let s = m.bind(&g, Trainable::NONE);
    let t = g.constant(x);
    let w = s.source_style(t).unwrap();
    let attrs = s.encode_attributes(t).unwrap();
    assert!(s.generate(&attrs, &Styles::broadcast(w, 7), t, false).is_err());
    assert!(s.generate(&attrs[..3], &Styles::Vector(w), t, false).is_err());
    let wrong_dim = g.constant(Tensor::zeros(&[1, 15]));
    assert!(s.generate(&attrs, &Styles::Vector(wrong_dim), t, false).is_err());
}

#[test]
fn discriminator_features_halve_down_to_four() {
    let m = model(vec![8, 8, 4, 4], 16);
    let x = frames(32, 2);
    let run = || {
        let g = Graph::new();
        let s = m.bind(&g, Trainable::NONE);
        let out = s.discriminate(g.constant(x.clone())).unwrap();
        assert_eq!(out.logits.shape(), vec![2, 1]);
        let sizes: Vec<usize> = out.features.iter().map(|f| f.shape().get(2).copied().unwrap_or(0)).collect();
        let feats: Vec<Vec<f64>> = out.features.iter().map(|f| f.value().data().to_vec()).collect();
        (sizes, out.logits.value().data().to_vec(), feats)
    };
    let (sizes, logits, feats) = run();
    // Four convolutional stages and the flattened dense layer.
    assert_eq!(sizes, vec![32, 16, 8, 4, 0]);
    assert_eq!(m.nets.discriminator.num_features(), 5);
    let (_, logits2, feats2) = run();
    assert_eq!(logits, logits2);
    assert_eq!(feats, feats2);
}

#[test]
fn identity_embeddings_are_unit_length_and_repeatable() {
    let m = model(vec![8, 8, 4, 4], 16);
    let x = frames(32, 3);
    let embed = || {
        let g = Graph::new();
        let s = m.bind(&g, Trainable::NONE);
        s.embed_identity(g.constant(x.clone())).unwrap().embedding.value().data().to_vec()
    };
    let e = embed();
    for row in e.chunks(8) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "{n}");
    }
    assert_eq!(e, embed());
}

#[test]
fn mapper_matches_a_dense_oracle() {
    for style_dim in [64, 512] {
        let m = model(vec![4, 4, 4], style_dim);
        let mut rng = stream_rng(1, 2, 3);
        let f: Vec<f64> = (0..2 * 8).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let g = Graph::new();
        let s = m.bind(&g, Trainable::NONE);
        let out = s.map_identity(g.constant(Tensor::new(&[2, 8], f.clone()).unwrap())).unwrap();
        assert_eq!(out.shape(), vec![2, style_dim]);

        let p = &m.params.mapper;
        let get = |n: &str| p.get(p.find(n).unwrap()).data().to_vec();
        let dense = |x: &[f64], w: &[f64], b: &[f64], fan_in: usize| -> Vec<f64> {
            b.iter()
                .enumerate()
                .map(|(o, bo)| {
                    let dot: f64 = (0..fan_in).map(|i| w[o * fan_in + i] * x[i]).sum();
                    dot / (fan_in as f64).sqrt() + bo
                })
                .collect()
        };
        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v } * std::f64::consts::SQRT_2;
        for (r, x) in f.chunks(8).enumerate() {
            let h: Vec<f64> = dense(x, &get("map.fc1.weight"), &get("map.fc1.bias"), 8)
                .into_iter()
                .map(lrelu)
                .collect();
            let y = dense(&h, &get("map.fc2.weight"), &get("map.fc2.bias"), 12);
            let value = out.value();
            let got = &value.data()[r * style_dim..(r + 1) * style_dim];
            for (a, b) in got.iter().zip(&y) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn zero_mapper_weights_give_zero_styles() {
    let mut m = model(vec![4, 4, 4], 16);
    let ids: Vec<_> = m.params.mapper.ids().collect();
    for id in ids {
        let shape = m.params.mapper.get(id).shape().to_vec();
        *m.params.mapper.get_mut(id) = Tensor::zeros(&shape);
    }
    let g = Graph::new();
    let s = m.bind(&g, Trainable::NONE);
    let out = s.source_style(g.constant(frames(16, 2))).unwrap();
    assert!(out.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn attribute_pyramid_has_one_map_per_block() {
    let m = model(vec![8, 8, 4, 4], 16);
    let x = frames(32, 2);
    let g = Graph::new();
    let s = m.bind(&g, Trainable::NONE);
    let maps = s.encode_attributes(g.constant(x.clone())).unwrap();
    let sizes: Vec<usize> = maps.iter().map(|f| f.shape()[2]).collect();
    assert_eq!(sizes, vec![4, 8, 16, 32]);
    for (f, c) in maps.iter().zip(&m.config().generator.attribute_channels) {
        assert_eq!(f.shape()[1], *c);
    }

    let other = frames(32, 3);
    let third = Tensor::new(&[1, 3, 32, 32], other.data()[2 * 3 * 32 * 32..].to_vec()).unwrap();
    let b = s.encode_attributes(g.constant(third)).unwrap();
    let (top, other_top) = (maps[3].value(), b[3].value());
    assert_ne!(&top.data()[..other_top.numel()], other_top.data());

    // Zero input with zero biases propagates zeros.
    let mut zero = model(vec![8, 8, 4, 4], 16);
    let ids: Vec<_> = zero.params.encoder.ids().collect();
    for id in ids {
        if zero.params.encoder.params()[id.index()].name.ends_with(".bias") {
            let shape = zero.params.encoder.get(id).shape().to_vec();
            *zero.params.encoder.get_mut(id) = Tensor::zeros(&shape);
        }
    }
    let g = Graph::new();
    let s = zero.bind(&g, Trainable::NONE);
    let maps = s.encode_attributes(g.constant(Tensor::zeros(&[1, 3, 32, 32]))).unwrap();
    assert!(maps.iter().all(|f| f.value().data().iter().all(|&v| v == 0.0)));
}
