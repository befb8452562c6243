//! Acceptance suite. Prints one line per criterion and exits nonzero if
//! any criterion fails. A directional result with the right ordering but
//! a margin inside the seed noise is reported as WARN and does not fail.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use civt_cli::commands::{self, CHECKPOINT_FILE, METRICS_FILE};
use civt_cli::train::{load_data, logits_for, train, Data};
use civt_cli::RunConfig;
use civt_core::data::{load_cifar10, CIFAR_RECORD, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use civt_core::distill::{civt_loss, cross_entropy, kl_similarity, naive_multi_loss};
use civt_core::nn::{Involution, MultiHeadAttention};
use civt_core::param::{Init, ParamStore};
use civt_core::suite::{self, random, LAYER_TOL, PIPELINE_TOL};
use civt_core::{AdamW, DistillConfig, Error, Family, Mode, Model, ModelSpec, Padding, Schedule, Tape, Target, Tensor, TokenVars};

#[derive(PartialEq)]
enum Status {
    Pass,
    Warn,
    Fail,
}

struct Verdict {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict { status: if ok { Status::Pass } else { Status::Fail }, detail: detail.into() }
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Verdict {
    let started = Instant::now();
    let checks = suite::default_checks();
    let entries = suite::run(&checks);
    let elapsed = started.elapsed();
    let mut failures = Vec::new();
    let mut worst_layer = 0f64;
    let mut pipeline = f64::NAN;
    for e in &entries {
        let r = &e.report;
        let limit = if e.name.starts_with("pipeline") { PIPELINE_TOL } else { LAYER_TOL };
        if !r.passed || r.max_rel_err > limit || r.tol > limit {
            failures.push(e.line());
        }
        if e.name.starts_with("pipeline") {
            pipeline = r.max_rel_err;
        } else {
            worst_layer = worst_layer.max(r.max_rel_err);
        }
    }
    let ok = failures.is_empty() && entries.len() >= 12 && elapsed < Duration::from_secs(300);
    verdict(
        ok,
        format!(
            "{} checks, worst primitive or layer rel err {worst_layer:.2e} (tol {LAYER_TOL:e}), pipeline {pipeline:.2e} (tol {PIPELINE_TOL:e}), {:.1}s{}",
            entries.len(),
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(" | ")) }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn parameter_counts() -> Verdict {
    let ti = Model::<f32>::build(&ModelSpec::civt_ti(), 0).unwrap().param_count();
    let s = Model::<f32>::build(&ModelSpec::civt_s(), 0).unwrap().param_count();
    let ok = (5_500_000..=6_500_000).contains(&ti) && (20_000_000..=24_000_000).contains(&s);
    verdict(ok, format!("CivT-Ti {ti} in [5.5M, 6.5M], CivT-S {s} in [20M, 24M]"))
}

// ---------------------------------------------------------------- 3

fn loss_degeneracies() -> Verdict {
    let (b, k) = (6, 10);
    let labels: Vec<usize> = (0..b).map(|i| (3 * i) % k).collect();
    let (class, conv, inv) = (random(&[b, k], 1), random(&[b, k], 2), random(&[b, k], 3));
    let (z1, z2) = (random(&[b, k], 4), random(&[b, k], 5));
    let tape = Tape::new();
    let tokens = |c: &Tensor<f64>, s1: &Tensor<f64>, s2: &Tensor<f64>| TokenVars {
        class: tape.variable(c.clone()),
        conv: Some(tape.variable(s1.clone())),
        inv: Some(tape.variable(s2.clone())),
    };
    let ce = cross_entropy(tape.variable(class.clone()), Target::Hard(&labels)).unwrap().item();

    let off = DistillConfig { lambda1: 0.0, lambda2: 0.0, ..DistillConfig::default() };
    let reduced = civt_loss(&tokens(&class, &conv, &inv), Target::Hard(&labels), &z1, &z2, &off).unwrap().total.item();
    let zero_weights = reduced == ce;

    let matched = civt_loss(&tokens(&class, &z1, &z2), Target::Hard(&labels), &z1, &z2, &DistillConfig::default()).unwrap();
    let kl_gap = matched.kl.iter().fold(0f64, |m, v| m.max(v.abs())).max((matched.total.item() - ce).abs());

    let one = naive_multi_loss(tape.variable(class.clone()), Target::Hard(&labels), &[z1.clone()], &DistillConfig::with_mode(Mode::Single)).unwrap();
    let two = naive_multi_loss(tape.variable(class.clone()), Target::Hard(&labels), &[z1.clone(), z1.clone()], &DistillConfig::with_mode(Mode::NaiveMulti))
        .unwrap();
    let doubled = two.kl[0] + two.kl[1] == 2.0 * one.kl[0] && two.total.item() - two.ce == 2.0 * (one.total.item() - one.ce);

    verdict(
        zero_weights && kl_gap < 1e-12 && doubled,
        format!("λ1=λ2=0 equals CE bitwise: {zero_weights}; matched-logit KL max {kl_gap:.1e} (< 1e-12); duplicated teacher doubles KL exactly: {doubled}"),
    )
}

// ---------------------------------------------------------------- 4

fn equivariance() -> Verdict {
    let started = Instant::now();
    // MHSA: permuting the rows of X permutes the rows of the output.
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, &mut Init::new(7), "attn", 12, 3).unwrap();
    let (n, d) = (9, 12);
    let x = random(&[1, n, d], 8);
    let perm: Vec<usize> = (0..n).map(|i| (i * 4 + 3) % n).collect();
    let permute = |t: &Tensor<f64>| Tensor::from_fn(&[1, n, d], |i| t.data()[perm[i / d] * d + i % d]);
    let attend = |t: &Tensor<f64>| {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        (*mha.forward(&p, tape.constant(t.clone())).unwrap().value()).clone()
    };
    let mhsa_err = permute(&attend(&x)).max_abs_diff(&attend(&permute(&x)));

    // conv2d with circular padding commutes with cyclic shifts.
    let (c, h, w) = (3, 7, 6);
    let img = random(&[1, c, h, w], 9);
    let (kernel, bias) = (random(&[4, c, 3, 3], 10), random(&[4], 11));
    let shift = |t: &Tensor<f64>, ch: usize| Tensor::from_fn(&[1, ch, h, w], |i| {
        let (cc, y, xx) = (i / (h * w), (i / w) % h, i % w);
        t.data()[(cc * h + (y + h - 2) % h) * w + (xx + w - 3) % w]
    });
    let conv = |t: &Tensor<f64>| {
        let tape = Tape::new();
        let out = tape.constant(t.clone()).conv2d(&tape.constant(kernel.clone()), Some(&tape.constant(bias.clone())), 1, 1, Padding::Circular).unwrap();
        (*out.value()).clone()
    };
    let conv_exact = shift(&conv(&img), 4) == conv(&shift(&img, c));

    // Involution kernels at two positions with equal feature vectors agree.
    let mut store = ParamStore::<f64>::new();
    let invo = Involution::new(&mut store, &mut Init::new(12), "inv", 8, 7, 2, 4, 1).unwrap();
    let mut feat = random(&[1, 8, 6, 6], 13);
    for ch in 0..8 {
        feat.data_mut()[ch * 36 + 5 * 6] = feat.data()[ch * 36 + 6 + 3];
    }
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let kern = invo.kernels(&p, tape.constant(feat)).unwrap().value();
    let inv_exact = (0..kern.shape()[1]).all(|j| kern.data()[j * 36 + 6 + 3] == kern.data()[j * 36 + 5 * 6]);

    let elapsed = started.elapsed();
    verdict(
        mhsa_err <= 1e-14 && conv_exact && inv_exact && elapsed < Duration::from_secs(60),
        format!(
            "MHSA row permutation max diff {mhsa_err:.1e} (f64 rounding, ≤ 1e-14); circular conv shift bitwise: {conv_exact}; involution kernel locality bitwise: {inv_exact}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 5, 6

/// Scale of the directional experiment.
const SEEDS: u64 = 3;
const TEACHER_EPOCHS: usize = 4;
const STUDENT_EPOCHS: usize = 16;
const TEXTURE_STRENGTH: f64 = 0.06;
const STRUCTURE_STRENGTH: f64 = 1.0;
const BUDGET: Duration = Duration::from_secs(2 * 3600);

fn experiment_base() -> RunConfig {
    RunConfig {
        synth_classes: 10,
        synth_p_tex: 0.3,
        synth_p_struct: 0.3,
        synth_train: 10_000,
        synth_test: 2_000,
        synth_texture_strength: TEXTURE_STRENGTH,
        synth_structure_strength: STRUCTURE_STRENGTH,
        augment: false,
        batch_size: 64,
        warmup_epochs: 1.0,
        stage_widths: vec![8, 16, 32, 64],
        blocks_per_stage: 1,
        gn_groups: 4,
        inv_kernel: 7,
        inv_groups: 1,
        inv_reduction: 4,
        width: 64,
        depth: 3,
        heads: 2,
        patch: 8,
        ..RunConfig::default()
    }
}

struct SeedResult {
    cross: f64,
    single_cnn: f64,
    single_inn: f64,
    naive: f64,
    /// KL(teacher ‖ token): conv/cnn, conv/inn, inv/cnn, inv/inn.
    kl: [f64; 4],
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_err(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt() / (v.len() as f64).sqrt()
}

fn teacher(base: &RunConfig, data: &Data, family: Family) -> Model<f32> {
    let cfg = RunConfig { family, mode: Mode::None, epochs: TEACHER_EPOCHS, ..base.clone() };
    train(&cfg, data, &[], |_| {}).unwrap().model
}

fn run_seed(base: &RunConfig, data: &Data, cnn: &Model<f32>, inn: &Model<f32>, seed: u64) -> SeedResult {
    let student = |family, mode, teachers: &[Model<f32>]| {
        let cfg = RunConfig { family, mode, epochs: STUDENT_EPOCHS, seed, ..base.clone() };
        train(&cfg, data, teachers, |_| {}).unwrap()
    };
    let cross = student(Family::Civt, Mode::CrossBias, &[cnn.clone(), inn.clone()]);
    let single_cnn = student(Family::Transformer1Tok, Mode::Single, &[cnn.clone()]);
    let single_inn = student(Family::Transformer1Tok, Mode::Single, &[inn.clone()]);
    let naive = student(Family::Transformer1Tok, Mode::NaiveMulti, &[cnn.clone(), inn.clone()]);

    let all: Vec<usize> = (0..data.test.len()).collect();
    let tokens = logits_for(&cross.model, &data.test, &data.stats, &all, 256).unwrap();
    let z_cnn = logits_for(cnn, &data.test, &data.stats, &all, 256).unwrap().remove(0);
    let z_inn = logits_for(inn, &data.test, &data.stats, &all, 256).unwrap().remove(0);
    let kl = [
        kl_similarity(&z_cnn, &tokens[1]).unwrap(),
        kl_similarity(&z_inn, &tokens[1]).unwrap(),
        kl_similarity(&z_cnn, &tokens[2]).unwrap(),
        kl_similarity(&z_inn, &tokens[2]).unwrap(),
    ];
    SeedResult {
        cross: cross.final_test_acc(),
        single_cnn: single_cnn.final_test_acc(),
        single_inn: single_inn.final_test_acc(),
        naive: naive.final_test_acc(),
        kl,
    }
}

fn directional() -> (Verdict, Verdict) {
    let started = Instant::now();
    let base = experiment_base();
    let data = load_data(&base).unwrap();
    let (cnn, inn) = (teacher(&base, &data, Family::Cnn), teacher(&base, &data, Family::Inn));
    let results: Vec<SeedResult> = (0..SEEDS).map(|s| run_seed(&base, &data, &cnn, &inn, s)).collect();
    let elapsed = started.elapsed();

    let col = |f: fn(&SeedResult) -> f64| results.iter().map(f).collect::<Vec<f64>>();
    let (cross, cnn, inn, naive) = (col(|r| r.cross), col(|r| r.single_cnn), col(|r| r.single_inn), col(|r| r.naive));
    let best_single = if mean(&cnn) >= mean(&inn) { &cnn } else { &inn };
    let diff = |other: &[f64]| cross.iter().zip(other).map(|(a, b)| a - b).collect::<Vec<f64>>();
    let (d_single, d_naive) = (diff(best_single), diff(&naive));
    let ordered = mean(&d_single) > 0.0 && mean(&d_naive) > 0.0;
    let margins = mean(&d_single) > std_err(&d_single) && mean(&d_naive) > std_err(&d_naive);
    let status = match (ordered, margins) {
        (true, true) => Status::Pass,
        (true, false) => Status::Warn,
        _ => Status::Fail,
    };
    let status = if elapsed > BUDGET { Status::Fail } else { status };
    let c5 = Verdict {
        status,
        detail: format!(
            "mean test acc over {SEEDS} seeds: cross-bias {:.4}, single cnn {:.4}, single inn {:.4}, naive-multi {:.4}; \
             cross - best single {:+.4} (paired SE {:.4}), cross - naive {:+.4} (paired SE {:.4}); per-seed cross-bias {:?}; {:.0}s",
            mean(&cross),
            mean(&cnn),
            mean(&inn),
            mean(&naive),
            mean(&d_single),
            std_err(&d_single),
            mean(&d_naive),
            std_err(&d_naive),
            cross.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    };

    let kl = |i: usize| mean(&results.iter().map(|r| r.kl[i]).collect::<Vec<_>>());
    let per_seed = results.iter().filter(|r| r.kl[0] < r.kl[1] && r.kl[3] < r.kl[2]).count();
    let c6 = verdict(
        kl(0) < kl(1) && kl(3) < kl(2),
        format!(
            "mean KL over {SEEDS} seeds: conv token vs cnn {:.4} / inn {:.4}; inv token vs cnn {:.4} / inn {:.4}; both orderings hold in {per_seed}/{SEEDS} seeds",
            kl(0),
            kl(1),
            kl(2),
            kl(3)
        ),
    );
    (c5, c6)
}

// ---------------------------------------------------------------- 7

fn tiny(family: Family, out: &Path) -> RunConfig {
    RunConfig {
        family,
        width: 16,
        depth: 1,
        heads: 2,
        patch: 4,
        stage_widths: vec![4, 8],
        blocks_per_stage: 1,
        gn_groups: 2,
        inv_kernel: 3,
        inv_groups: 1,
        synth_image: 16,
        synth_train: 128,
        synth_test: 64,
        epochs: 2,
        warmup_epochs: 1.0,
        batch_size: 32,
        mixup_alpha: 0.8,
        out: Some(out.to_path_buf()),
        ..RunConfig::default()
    }
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let artifacts = |d: &Path| (std::fs::read(d.join(CHECKPOINT_FILE)).unwrap(), std::fs::read(d.join(METRICS_FILE)).unwrap());
    let mut identical = Vec::new();
    for family in [Family::Cnn, Family::Inn] {
        let runs: Vec<_> = ["a", "b"]
            .iter()
            .map(|r| {
                let out = root.join(format!("{}_{r}", family.as_str()));
                commands::train_teacher(&tiny(family, &out)).unwrap();
                artifacts(&out)
            })
            .collect();
        identical.push((format!("train-teacher {}", family.as_str()), runs[0] == runs[1]));
    }
    let teachers = [root.join("cnn_a").join(CHECKPOINT_FILE), root.join("inn_a").join(CHECKPOINT_FILE)];
    for (mode, family, ts) in [
        (Mode::CrossBias, Family::Civt, &teachers[..]),
        (Mode::NaiveMulti, Family::Transformer1Tok, &teachers[..]),
        (Mode::Single, Family::Mixer, &teachers[1..]),
    ] {
        let runs: Vec<_> = ["a", "b"]
            .iter()
            .map(|r| {
                let out = root.join(format!("{}_{r}", mode.as_str()));
                commands::distill(&RunConfig { mode, ..tiny(family, &out) }, ts).unwrap();
                artifacts(&out)
            })
            .collect();
        identical.push((format!("distill {}", mode.as_str()), runs[0] == runs[1]));
    }
    let student = root.join("cross-bias_a").join(CHECKPOINT_FILE);
    let cfg = tiny(Family::Civt, root);
    identical.push(("eval".into(), commands::eval(&cfg, &student, true).unwrap().1 == commands::eval(&cfg, &student, true).unwrap().1));
    identical.push(("kl-table".into(), commands::kl_table(&cfg, &student, &teachers).unwrap() == commands::kl_table(&cfg, &student, &teachers).unwrap()));
    let bad: Vec<_> = identical.iter().filter(|(_, same)| !same).map(|(n, _)| n.as_str()).collect();
    verdict(
        bad.is_empty(),
        format!("{} reruns compared byte for byte (checkpoints, metrics.csv, reports){}", identical.len(), if bad.is_empty() { String::new() } else { format!("; differing: {}", bad.join(", ")) }),
    )
}

// ---------------------------------------------------------------- 8

fn optimizer_oracles() -> Verdict {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("theta", Tensor::scalar(1.0), true);
    store.get_mut(id).grad = Some(Tensor::scalar(1.0));
    AdamW::new(0.1, 0.0).step(&mut store).unwrap();
    let theta = store.get(id).value.item();
    let expected = 1.0 - 0.1 / (1.0 + 1e-8);
    let sched = Schedule::new(0.001, 5.0, 300.0, 0.0).unwrap();
    let desk = Schedule::new(0.001, 5.0, 30.0, 1e-5).unwrap();
    let (at5, end, desk_end) = (sched.lr_at(5.0).unwrap(), sched.lr_at(300.0).unwrap(), desk.lr_at(30.0).unwrap());
    verdict(
        (theta - expected).abs() < 1e-12 && at5 == 0.001 && end == 0.0 && desk_end == 1e-5,
        format!("AdamW scalar step |Δ| = {:.1e}; lr_at(5) = {at5}; lr_at(end) = {end} (min_lr 0) and {desk_end} (min_lr 1e-5)", (theta - expected).abs()),
    )
}

// ---------------------------------------------------------------- 9

fn cifar_ingestion() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let file_len = CIFAR_RECORD * 10_000;
    let write = |name: &str, salt: usize, len: usize| {
        let mut bytes = vec![0u8; len];
        for (r, rec) in bytes.chunks_mut(CIFAR_RECORD).enumerate() {
            rec[0] = ((r + salt) % 10) as u8;
            for (j, b) in rec.iter_mut().enumerate().skip(1) {
                *b = ((r * 31 + j * 7 + salt) % 256) as u8;
            }
        }
        std::fs::write(dir.path().join(name), bytes).unwrap();
    };
    for (i, f) in CIFAR_TRAIN_FILES.iter().enumerate() {
        write(f, i, file_len);
    }
    write(CIFAR_TEST_FILE, 7, file_len);
    let sizes_ok = CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]).all(|f| std::fs::metadata(dir.path().join(f)).unwrap().len() == 30_730_000);
    let (train, test) = load_cifar10(dir.path()).unwrap();
    let parsed = train.len() == 50_000 && test.len() == 10_000 && test.labels[0] == 7 && train.labels[10_000] == 1 && train.pixels.len() == 50_000 * 3072;

    let cut = file_len - 1000;
    write(CIFAR_TEST_FILE, 7, cut);
    let rejected = match load_cifar10(dir.path()) {
        Err(Error::Ingest { file, offset, .. }) => file.ends_with(CIFAR_TEST_FILE) && offset == (cut / CIFAR_RECORD * CIFAR_RECORD) as u64,
        _ => false,
    };
    verdict(sizes_ok && parsed && rejected, format!("parsed 50000/10000 from 30,730,000-byte files: {parsed}; truncated test file rejected with record offset: {rejected}"))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    // ACCEPTANCE_ONLY=1,4,9 runs a subset; unset runs every criterion.
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let selected = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let started = Instant::now();
    let mut lines: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut guarded = |n: u32, name: &'static str, f: &dyn Fn() -> Verdict| {
        if !selected(n) {
            return;
        }
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        print_line(n, name, &v);
        lines.push((n, name, v));
    };
    guarded(1, "gradient suite", &gradient_suite);
    guarded(2, "parameter fidelity", &parameter_counts);
    guarded(3, "loss semantics", &loss_degeneracies);
    guarded(4, "equivariance", &equivariance);
    guarded(7, "determinism", &determinism);
    guarded(8, "optimizer and schedule oracles", &optimizer_oracles);
    guarded(9, "CIFAR-10 ingestion", &cifar_ingestion);
    if selected(5) || selected(6) {
        let (c5, c6) = catch_unwind(directional).unwrap_or_else(|_| (verdict(false, "experiment panicked"), verdict(false, "experiment panicked")));
        for (n, name, v) in [(5, "directional co-advising", c5), (6, "token-teacher affinity", c6)] {
            print_line(n, name, &v);
            lines.push((n, name, v));
        }
    }
    lines.sort_by_key(|(n, _, _)| *n);
    let failed: Vec<u32> = lines.iter().filter(|(_, _, v)| v.status == Status::Fail).map(|(n, _, _)| *n).collect();
    println!("acceptance: {} criteria, {} failed, {:.0}s", lines.len(), failed.len(), started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn print_line(n: u32, name: &str, v: &Verdict) {
    let status = match v.status {
        Status::Pass => "PASS",
        Status::Warn => "WARN",
        Status::Fail => "FAIL",
    };
    println!("criterion {n} {status} {name}: {}", v.detail);
}
