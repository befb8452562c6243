use civt_core::models::predict_from_logits;
use civt_core::suite::random;
use civt_core::{Error, Family, Model, ModelSpec, Tape, Tensor};

fn small(family: Family) -> ModelSpec {
    let mut s = ModelSpec::transformer(family, 16, 3, 5, 16, 2, 2, 4);
    s.stage_widths = vec![8, 16];
    s.blocks_per_stage = 1;
    s.gn_groups = 4;
    s.inv_kernel = 3;
    s.inv_groups = 2;
    s
}

#[test]
fn build_is_deterministic_per_seed() {
    for family in [Family::Civt, Family::Transformer1Tok, Family::Cnn, Family::Inn, Family::Mixer] {
        let a = Model::<f32>::build(&small(family), 9).unwrap();
        let b = Model::<f32>::build(&small(family), 9).unwrap();
        let c = Model::<f32>::build(&small(family), 10).unwrap();
        assert_eq!(a.to_named(), b.to_named());
        assert_ne!(a.to_named(), c.to_named());
    }
}

#[test]
fn init_follows_truncated_normal_and_zero_bias() {
    let m = Model::<f64>::build(&ModelSpec::desk_ti(), 0).unwrap();
    for p in m.params.iter() {
        if p.name.ends_with(".bias") {
            assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
        } else if p.name.ends_with(".gain") {
            assert!(p.value.data().iter().all(|&v| v == 1.0), "{}", p.name);
        } else {
            assert!(p.value.data().iter().all(|&v| v.abs() <= 0.04), "{}", p.name);
        }
    }
}

#[test]
fn reference_profiles_parameter_counts() {
    let ti = Model::<f32>::build(&ModelSpec::civt_ti(), 0).unwrap().param_count();
    let s = Model::<f32>::build(&ModelSpec::civt_s(), 0).unwrap().param_count();
    assert!((5_500_000..=6_500_000).contains(&ti), "{ti}");
    assert!((20_000_000..=24_000_000).contains(&s), "{s}");
}

#[test]
fn invalid_spec_is_configuration_error() {
    let mut spec = small(Family::Civt);
    spec.patch = 3;
    assert!(matches!(Model::<f32>::build(&spec, 0), Err(Error::Config(_))));
}

#[test]
fn sequence_lengths_and_token_shapes() {
    let spec = ModelSpec::transformer(Family::Civt, 32, 3, 10, 12, 1, 3, 4);
    let m = Model::<f64>::build(&spec, 0).unwrap();
    let tape = Tape::new();
    let p = m.params.bind(&tape, false);
    let feats = m.transformer_features(&p, tape.constant(random(&[2, 3, 32, 32], 1))).unwrap();
    assert_eq!(feats.shape(), vec![2, 67, 12]);

    let one = Model::<f64>::build(&spec.clone().with_family(Family::Transformer1Tok), 0).unwrap();
    let tape = Tape::new();
    let p = one.params.bind(&tape, false);
    let out = one.forward(&p, tape.constant(random(&[2, 3, 32, 32], 1))).unwrap();
    assert!(out.conv.is_none() && out.inv.is_none());
    assert_eq!(one.transformer_features(&p, tape.constant(random(&[1, 3, 32, 32], 1))).unwrap().shape(), vec![1, 65, 12]);
    assert_eq!(ModelSpec::civt_ti().sequence_len().unwrap(), 199);
}

#[test]
fn identical_images_give_identical_rows() {
    let m = Model::<f64>::build(&small(Family::Civt), 1).unwrap();
    let img = random(&[1, 3, 16, 16], 2);
    let batch = Tensor::from_fn(&[2, 3, 16, 16], |i| img.data()[i % img.numel()]);
    let out = m.logits(&batch).unwrap();
    for logits in [out.class, out.conv.unwrap(), out.inv.unwrap()] {
        assert_eq!(logits.shape(), &[2, 5]);
        assert_eq!(logits.data()[..5], logits.data()[5..]);
    }
}

#[test]
fn input_dimension_mismatch_is_error() {
    let m = Model::<f64>::build(&small(Family::Cnn), 1).unwrap();
    assert!(matches!(m.logits(&random(&[1, 3, 8, 16], 0)), Err(Error::Shape { .. })));
}

#[test]
fn heads_are_independent_and_predict_uses_class_token() {
    let mut m = Model::<f64>::build(&small(Family::Civt), 1).unwrap();
    let x = random(&[4, 3, 16, 16], 3);
    let before = m.logits(&x).unwrap();
    let preds = m.predict(&x).unwrap();
    for name in ["head_conv.weight", "head_conv.bias"] {
        let id = m.params.find(name).unwrap();
        let shape = m.params.get(id).value.shape().to_vec();
        m.params.set(id, random(&shape, 99)).unwrap();
    }
    let after = m.logits(&x).unwrap();
    assert_eq!(before.class, after.class);
    assert_eq!(before.inv, after.inv);
    assert_ne!(before.conv, after.conv);
    assert_eq!(m.predict(&x).unwrap(), preds);
}

#[test]
fn predict_ties_toward_lowest_index() {
    let l = Tensor::<f64>::from_f64(&[2, 3], &[0.1, 2.0, -1.0, 4.0, 4.0, 4.0]).unwrap();
    assert_eq!(predict_from_logits(&l), vec![1, 0]);
}

#[test]
fn backward_leaves_parameters_unchanged() {
    for family in [Family::Civt, Family::Cnn, Family::Inn, Family::Mixer] {
        let m = Model::<f64>::build(&small(family), 1).unwrap();
        let before = m.to_named();
        let tape = Tape::new();
        let p = m.params.bind(&tape, true);
        let out = m.forward(&p, tape.constant(random(&[2, 3, 16, 16], 4))).unwrap();
        let mut grads = tape.backward(out.class.sum().unwrap()).unwrap();
        let mut store = m.params.clone();
        store.accumulate(&p, &mut grads);
        assert!(store.iter().any(|p| p.grad.is_some()));
        assert_eq!(m.to_named(), before);
    }
}

#[test]
fn teachers_differ_only_in_spatial_operator() {
    let cnn = Model::<f32>::build(&ModelSpec::desk_teacher(Family::Cnn), 0).unwrap();
    let inn = Model::<f32>::build(&ModelSpec::desk_teacher(Family::Inn), 0).unwrap();
    let strip = |m: &Model<f32>| -> Vec<(String, Vec<usize>)> {
        m.params.iter().filter(|p| !p.name.contains(".spatial.conv") && !p.name.contains(".spatial.inv")).map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
    };
    assert_eq!(strip(&cnn), strip(&inn));
}

/// Closed-form count for the residual teachers from the layer shapes.
fn teacher_count(spec: &ModelSpec) -> usize {
    let w = &spec.stage_widths;
    let gn = |c: usize| 2 * c;
    let mut total = spec.channels * w[0] * 9 + gn(w[0]);
    let mut c_in = w[0];
    for (s, &c) in w.iter().enumerate() {
        for b in 0..spec.blocks_per_stage {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            total += c_in * c + gn(c);
            total += match spec.family {
                Family::Cnn => c * c * 9,
                _ => {
                    let hidden = c / spec.inv_reduction;
                    let span = spec.inv_kernel * spec.inv_kernel * spec.inv_groups;
                    c * hidden + hidden + hidden * span + span
                }
            } + gn(c);
            total += c * c + gn(c);
            if stride != 1 || c_in != c {
                total += c_in * c + gn(c);
            }
            c_in = c;
        }
    }
    total + c_in * spec.classes + spec.classes
}

#[test]
fn desk_teacher_counts_match_closed_form() {
    for family in [Family::Cnn, Family::Inn] {
        let spec = ModelSpec::desk_teacher(family);
        assert_eq!(Model::<f32>::build(&spec, 0).unwrap().param_count(), teacher_count(&spec));
    }
}

#[test]
fn teacher_zero_input_gives_zero_logits() {
    for family in [Family::Cnn, Family::Inn] {
        let m = Model::<f64>::build(&small(family), 1).unwrap();
        let out = m.logits(&Tensor::zeros(&[2, 3, 16, 16])).unwrap();
        assert!(out.class.data().iter().all(|&v| v == 0.0), "{family:?}");
    }
}

#[test]
fn mixer_with_zero_mixing_passes_embeddings_through() {
    let spec = small(Family::Mixer);
    let mut m = Model::<f64>::build(&spec, 4).unwrap();
    let names: Vec<_> = m.params.iter().filter(|p| p.name.contains("_mlp.")).map(|p| p.name.clone()).collect();
    for name in names {
        let id = m.params.find(&name).unwrap();
        let shape = m.params.get(id).value.shape().to_vec();
        m.params.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let embed_only = Model::<f64>::build(&ModelSpec { depth: 0, ..spec }, 4).unwrap();
    let x = random(&[2, 3, 16, 16], 5);
    let trunk = |m: &Model<f64>| {
        let tape = Tape::new();
        let p = m.params.bind(&tape, false);
        (*m.mixer_trunk(&p, tape.constant(x.clone())).unwrap().value()).clone()
    };
    assert_eq!(trunk(&m), trunk(&embed_only));
}

#[test]
fn mixer_ti_profile() {
    let spec = ModelSpec::mixer_ti(32, 10, 4);
    assert_eq!((spec.depth, spec.width), (12, 192));
    assert!(Model::<f32>::build(&spec, 0).is_ok());
}

#[test]
fn param_summary_totals_match() {
    let m = Model::<f32>::build(&ModelSpec::desk_ti(), 0).unwrap();
    let summary = m.param_summary();
    assert_eq!(summary.iter().map(|(_, n)| n).sum::<usize>(), m.param_count());
    assert_eq!(summary[0].0, "patch_embed");
    assert!(summary.iter().any(|(m, _)| m == "blocks.5"));
}
