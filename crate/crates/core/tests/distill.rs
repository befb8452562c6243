use civt_core::distill::{civt_loss, cross_entropy, kd_kl, kl_similarity, naive_multi_loss};
use civt_core::suite::random;
use civt_core::{DistillConfig, Family, Mode, Model, ModelSpec, Tape, Target, Tensor, TokenVars};
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

#[test]
fn ce_gradient_is_softmax_minus_one_hot() {
    let tape = Tape::new();
    let z = tape.variable(t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 0.3, -0.2]));
    let labels = [2usize, 0];
    let g = tape.backward(cross_entropy(z, Target::Hard(&labels)).unwrap()).unwrap();
    let g = g.get(z).unwrap();
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax(&z.value().data()[i * 3..i * 3 + 3]);
        for k in 0..3 {
            let want = (p[k] - if k == y { 1.0 } else { 0.0 }) / 2.0;
            assert!((g.at(&[i, k]) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn kd_kl_examples() {
    let tape = Tape::new();
    let z = random(&[3, 4], 1);
    for tau in [0.5, 1.0, 4.0] {
        assert!(kd_kl(tape.variable(z.clone()), &z, tau).unwrap().item().abs() < 1e-12);
    }
    let v = kd_kl(tape.variable(t(&[1, 2], &[0.0, 0.0])), &t(&[1, 2], &[3f64.ln(), 0.0]), 1.0).unwrap().item();
    assert!((v - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);
    assert!(kd_kl(tape.variable(z.clone()), &random(&[3, 5], 2), 1.0).is_err());
}

#[test]
fn kd_kl_vanishes_quadratically() {
    let tape = Tape::new();
    let teacher = random(&[4, 6], 3);
    let dir = random(&[4, 6], 4);
    let at = |eps: f64| {
        let s = Tensor::from_fn(teacher.shape(), |i| teacher.data()[i] + eps * dir.data()[i]);
        kd_kl(tape.variable(s), &teacher, 2.0).unwrap().item()
    };
    let (a, b, c) = (at(1e-2), at(5e-3), at(2.5e-3));
    assert!((a / b - 4.0).abs() < 0.05 && (b / c - 4.0).abs() < 0.05, "{a} {b} {c}");
}

fn tokens<'t>(tape: &'t Tape<f64>, class: &Tensor<f64>, conv: &Tensor<f64>, inv: &Tensor<f64>) -> TokenVars<'t, f64> {
    TokenVars { class: tape.variable(class.clone()), conv: Some(tape.variable(conv.clone())), inv: Some(tape.variable(inv.clone())) }
}

#[test]
fn civt_loss_degeneracies() {
    let (c, z1, z2) = (random(&[3, 4], 5), random(&[3, 4], 6), random(&[3, 4], 7));
    let labels = [0usize, 3, 1];
    let tape = Tape::new();
    let ce = cross_entropy(tape.variable(c.clone()), Target::Hard(&labels)).unwrap().item();

    let matched = civt_loss(&tokens(&tape, &c, &z1, &z2), Target::Hard(&labels), &z1, &z2, &DistillConfig::default()).unwrap();
    assert!((matched.total.item() - ce).abs() < 1e-12);

    let off = DistillConfig { lambda1: 0.0, lambda2: 0.0, ..DistillConfig::default() };
    let (a, b) = (random(&[3, 4], 8), random(&[3, 4], 9));
    let pure = civt_loss(&tokens(&tape, &c, &a, &b), Target::Hard(&labels), &z1, &z2, &off).unwrap();
    assert_eq!(pure.total.item(), ce);
    assert!(pure.kl.iter().all(|&k| k > 0.0));

    let missing = TokenVars { class: tape.variable(c.clone()), conv: None, inv: None };
    assert!(civt_loss(&missing, Target::Hard(&labels), &z1, &z2, &DistillConfig::default()).is_err());
}

#[test]
fn civt_loss_hand_computed_three_classes() {
    let class = [1.0, 0.0, -1.0];
    let conv = [0.2, 0.4, 0.1];
    let inv = [-0.5, 0.0, 0.5];
    let t1 = [2.0, 0.0, 0.0];
    let t2 = [0.0, 0.0, 1.0];
    let want = -softmax(&class)[0].ln() + kl(&softmax(&t1), &softmax(&conv)) + kl(&softmax(&t2), &softmax(&inv));
    let tape = Tape::new();
    let toks = tokens(&tape, &t(&[1, 3], &class), &t(&[1, 3], &conv), &t(&[1, 3], &inv));
    let got = civt_loss(&toks, Target::Hard(&[0]), &t(&[1, 3], &t1), &t(&[1, 3], &t2), &DistillConfig::default()).unwrap();
    assert!((got.total.item() - want).abs() < 1e-14);
}

#[test]
fn civt_loss_is_additive() {
    let (c, s1, s2, z1, z2) = (random(&[5, 6], 1), random(&[5, 6], 2), random(&[5, 6], 3), random(&[5, 6], 4), random(&[5, 6], 5));
    let labels = [0usize, 1, 2, 3, 4];
    let cfg = DistillConfig { lambda0: 0.7, lambda1: 1.3, lambda2: 0.4, tau1: 2.0, tau2: 3.0, ..DistillConfig::default() };
    let tape = Tape::new();
    let joint = civt_loss(&tokens(&tape, &c, &s1, &s2), Target::Hard(&labels), &z1, &z2, &cfg).unwrap().total.item();
    let sep = 0.7 * cross_entropy(tape.variable(c), Target::Hard(&labels)).unwrap().item()
        + 1.3 * kd_kl(tape.variable(s1), &z1, 2.0).unwrap().item()
        + 0.4 * kd_kl(tape.variable(s2), &z2, 3.0).unwrap().item();
    assert!((joint - sep).abs() < 1e-12);
}

#[test]
fn no_gradient_reaches_teachers() {
    let mut spec = ModelSpec::transformer(Family::Civt, 8, 3, 4, 8, 1, 2, 4);
    let student = Model::<f64>::build(&spec, 0).unwrap();
    spec.family = Family::Cnn;
    spec.stage_widths = vec![4, 8];
    spec.blocks_per_stage = 1;
    spec.gn_groups = 2;
    let cnn = Model::<f64>::build(&spec, 1).unwrap();
    spec.family = Family::Inn;
    spec.inv_kernel = 3;
    spec.inv_groups = 2;
    let inn = Model::<f64>::build(&spec, 2).unwrap();

    let tape = Tape::new();
    let x = tape.constant(random(&[2, 3, 8, 8], 3));
    let (ps, p1, p2) = (student.params.bind(&tape, true), cnn.params.bind(&tape, true), inn.params.bind(&tape, true));
    let z1 = cnn.forward(&p1, x).unwrap().class.value();
    let z2 = inn.forward(&p2, x).unwrap().class.value();
    let out = student.forward(&ps, x).unwrap();
    let loss = civt_loss(&out, Target::Hard(&[0, 1]), &z1, &z2, &DistillConfig::default()).unwrap();
    let mut grads = tape.backward(loss.total).unwrap();
    let (mut c, mut i, mut s) = (cnn.params.clone(), inn.params.clone(), student.params.clone());
    c.accumulate(&p1, &mut grads);
    i.accumulate(&p2, &mut grads);
    s.accumulate(&ps, &mut grads);
    assert!(c.iter().chain(i.iter()).all(|p| p.grad.as_ref().map_or(true, |g| g.data().iter().all(|&v| v == 0.0))));
    assert!(s.iter().any(|p| p.grad.is_some()));
}

#[test]
fn naive_multi_examples() {
    let z = random(&[3, 4], 1);
    let teacher = random(&[3, 4], 2);
    let labels = [1usize, 2, 0];
    let tape = Tape::new();
    let ce = cross_entropy(tape.variable(z.clone()), Target::Hard(&labels)).unwrap().item();

    let none = naive_multi_loss(tape.variable(z.clone()), Target::Hard(&labels), &[], &DistillConfig::with_mode(Mode::None)).unwrap();
    assert_eq!(none.total.item(), ce);
    assert!(naive_multi_loss(tape.variable(z.clone()), Target::Hard(&labels), &[], &DistillConfig::with_mode(Mode::Single)).is_err());

    let same = naive_multi_loss(tape.variable(z.clone()), Target::Hard(&labels), &[z.clone()], &DistillConfig::with_mode(Mode::Single)).unwrap();
    assert!((same.total.item() - ce).abs() < 1e-12);

    let one = naive_multi_loss(tape.variable(z.clone()), Target::Hard(&labels), &[teacher.clone()], &DistillConfig::with_mode(Mode::Single)).unwrap();
    let two = naive_multi_loss(tape.variable(z.clone()), Target::Hard(&labels), &[teacher.clone(), teacher], &DistillConfig::with_mode(Mode::NaiveMulti))
        .unwrap();
    assert_eq!(two.kl[0] + two.kl[1], 2.0 * one.kl[0]);
    assert_eq!(two.total.item(), one.total.item() + one.kl[0]);
}

#[test]
fn soft_targets_generalize_ce() {
    let z = random(&[2, 3], 4);
    let tape = Tape::new();
    let hard = cross_entropy(tape.variable(z.clone()), Target::Hard(&[2, 0])).unwrap().item();
    let onehot = t(&[2, 3], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let soft = cross_entropy(tape.variable(z), Target::Soft(&onehot)).unwrap().item();
    assert!((hard - soft).abs() < 1e-15);
}

#[test]
fn kl_similarity_examples() {
    let a = random(&[6, 5], 1);
    assert!(kl_similarity(&a, &a).unwrap().abs() < 1e-15);
    let a = t(&[2, 2], &[0.0, 0.0, 3f64.ln(), 0.0]);
    let b = t(&[2, 2], &[3f64.ln(), 0.0, 0.0, 0.0]);
    // row 0: KL([.5,.5] ‖ [.75,.25]); row 1: KL([.75,.25] ‖ [.5,.5])
    let r0 = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    let r1 = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
    assert!((kl_similarity(&a, &b).unwrap() - (r0 + r1) / 2.0).abs() < 1e-15);
    assert!(kl_similarity(&a, &random(&[3, 2], 0)).is_err());
}

#[test]
fn defaults_match_reported_configuration() {
    let cfg = DistillConfig::default();
    assert_eq!((cfg.lambda0, cfg.lambda1, cfg.lambda2, cfg.tau1, cfg.tau2), (1.0, 1.0, 1.0, 1.0, 1.0));
    assert_eq!(cfg.mode, Mode::CrossBias);
    assert!(DistillConfig { tau1: 0.0, ..cfg }.validate().is_err());
    assert!(DistillConfig { lambda2: -1.0, ..cfg }.validate().is_err());
}

proptest! {
    #[test]
    fn kd_kl_and_similarity_nonnegative(seed in any::<u64>(), tau in 0.1f64..8.0, scale in 0.1f64..20.0) {
        let s = random(&[3, 5], seed).map(|v| v * scale);
        let z = random(&[3, 5], seed ^ 1).map(|v| v * scale);
        let tape = Tape::new();
        prop_assert!(kd_kl(tape.variable(s.clone()), &z, tau).unwrap().item() >= -1e-12);
        prop_assert!(kl_similarity(&s, &z).unwrap() >= 0.0);
    }
}
