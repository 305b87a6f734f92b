use cotta_core::adapt::{
    consistency_loss, cotta_step, ema_update, entropy_loss, pseudo_label_step, pseudo_label_step_scoped,
    refined_pseudo_label, stochastic_restore, tent_step, AdaptConfig, AdaptState, Adapter, AugmentPolicy, Method,
    OnlineMethod,
};
use cotta_core::nn::{build_model, ModelState, ParamFilter, StatsMode};
use cotta_core::rng;
use cotta_core::stream::{standard_sequence, Batch, CorruptionKind};
use cotta_core::tape::{softmax_rows, Tape};
use cotta_core::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

const K: usize = 4;

/// A source model with non-trivial affine parameters and running buffers.
fn source_model(arch: &str, seed: u64) -> ModelState {
    let mut m = build_model(arch, K, seed).unwrap();
    let mut r = rng::seeded(seed ^ 0xabc);
    for p in m.parameters_mut().iter_mut().filter(|p| p.is_norm_affine) {
        for v in p.value.data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    m
}

/// Adds uniform noise to every parameter.
fn jitter(m: &mut ModelState, scale: f32, seed: u64) {
    let mut r = rng::seeded(seed);
    for p in m.parameters_mut() {
        for v in p.value.data_mut() {
            *v += r.random_range(-scale..scale);
        }
    }
}

fn batch(kind: CorruptionKind, severity: u8, size: usize, seed: u64) -> Batch {
    let spec = standard_sequence(&[kind], severity, 1, size, K, seed).unwrap();
    spec.batch_at(0, 0, 0, 0).0
}

fn entries(m: &ModelState) -> Vec<f32> {
    m.parameters().iter().flat_map(|p| p.value.data().to_vec()).collect()
}

fn mean_entropy(probs: &Tensor) -> f64 {
    let rows: Vec<f64> =
        probs.rows().map(|r| -r.iter().map(|&p| if p > 0.0 { p as f64 * (p as f64).ln() } else { 0.0 }).sum::<f64>()).collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

// ---- consistency loss ----------------------------------------------------

#[test]
fn one_hot_target_on_uniform_logits_costs_log_k() {
    for k in [2usize, 4, 10] {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[3, k]));
        let mut target = vec![0.0; 3 * k];
        for (i, c) in [0, k - 1, 1].into_iter().enumerate() {
            target[i * k + c] = 1.0;
        }
        let target = Tensor::new(&[3, k], target).unwrap();
        let loss = consistency_loss(&mut tape, &target, logits).unwrap();
        let v = tape.value(loss).data()[0] as f64;
        assert!((v - (k as f64).ln()).abs() < 1e-6, "k={k}: {v}");
    }
}

#[test]
fn consistency_gradient_is_softmax_minus_target_over_b() {
    let mut r = rng::seeded(3);
    let b = 5;
    let logits: Vec<f32> = (0..b * K).map(|_| r.random_range(-3.0..3.0)).collect();
    let logits = Tensor::new(&[b, K], logits).unwrap();
    let target = softmax_rows(&Tensor::new(&[b, K], (0..b * K).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()).unwrap();
    let mut tape = Tape::new();
    let lv = tape.param(logits.clone());
    let tv = tape.constant(target.clone());
    let loss = consistency_loss(&mut tape, &target, lv).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(tv).is_none(), "the target received a gradient");
    let p = softmax_rows(&logits).unwrap();
    for i in 0..b * K {
        let expect = (p.data()[i] - target.data()[i]) / b as f32;
        assert!((g.get(lv).unwrap().data()[i] - expect).abs() < 1e-6);
    }
}

#[test]
fn consistency_loss_rejects_mismatched_target() {
    let mut tape = Tape::new();
    let logits = tape.param(Tensor::zeros(&[3, K]));
    let err = consistency_loss(&mut tape, &Tensor::zeros(&[3, K + 1]), logits).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

proptest! {
    #[test]
    fn soft_cross_entropy_is_at_least_target_entropy(seed in any::<u64>(), b in 1usize..6) {
        let mut r = rng::seeded(seed);
        let mk = |r: &mut rng::Rng| Tensor::new(&[b, K], (0..b * K).map(|_| r.random_range(-4.0f32..4.0)).collect()).unwrap();
        let target = softmax_rows(&mk(&mut r)).unwrap();
        let mut tape = Tape::new();
        let lv = tape.param(mk(&mut r));
        let loss = consistency_loss(&mut tape, &target, lv).unwrap();
        let ce = tape.value(loss).data()[0] as f64;
        prop_assert!(ce >= mean_entropy(&target) - 1e-5, "{ce} < {}", mean_entropy(&target));
    }
}

// ---- teacher EMA ---------------------------------------------------------

fn teacher_student(seed: u64) -> (ModelState, ModelState) {
    let teacher = source_model("mlp-small", seed);
    let mut student = teacher.snapshot();
    jitter(&mut student, 0.05, seed + 1);
    (teacher, student)
}

#[test]
fn ema_alpha_one_keeps_teacher() {
    let (mut t, s) = teacher_student(1);
    let before = entries(&t);
    ema_update(&mut t, &s, 1.0).unwrap();
    assert_eq!(entries(&t), before);
}

#[test]
fn ema_alpha_zero_copies_student() {
    let (mut t, s) = teacher_student(2);
    ema_update(&mut t, &s, 0.0).unwrap();
    assert!(t.bits_eq(&s));
}

#[test]
fn ema_point_nine_of_ones_and_zeros() {
    let (mut t, mut s) = teacher_student(3);
    t.parameters_mut().iter_mut().for_each(|p| p.value.data_mut().fill(1.0));
    s.parameters_mut().iter_mut().for_each(|p| p.value.data_mut().fill(0.0));
    ema_update(&mut t, &s, 0.9).unwrap();
    assert!(entries(&t).iter().all(|&v| (v - 0.9).abs() < 1e-7));
}

#[test]
fn ema_copies_running_buffers_from_student() {
    let (mut t, mut s) = teacher_student(4);
    let data = cotta_core::stream::GlyphDataset::generate(K, 8, 5).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(data.images.clone());
    let traced = s.trace(&mut tape, x, StatsMode::UseCurrentBatch, None).unwrap();
    s.update_running_stats(&tape, &traced).unwrap();
    assert_ne!(t.bn_buffers(), s.bn_buffers());
    ema_update(&mut t, &s, 0.999).unwrap();
    assert_eq!(t.bn_buffers(), s.bn_buffers());
}

#[test]
fn ema_rejects_architecture_mismatch() {
    let mut t = build_model("mlp-small", K, 0).unwrap();
    let s = build_model("cnn-small", K, 0).unwrap();
    assert!(matches!(ema_update(&mut t, &s, 0.9), Err(Error::Contract(_))));
    let s = build_model("mlp-small", K + 1, 0).unwrap();
    assert!(matches!(ema_update(&mut t, &s, 0.9), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ema_is_an_elementwise_blend_and_leaves_the_student_alone(seed in any::<u64>(), alpha in 0.0f32..=1.0) {
        let (mut t, s) = teacher_student(seed);
        let (t0, s0) = (entries(&t), s.snapshot());
        ema_update(&mut t, &s, alpha).unwrap();
        prop_assert!(s.bits_eq(&s0));
        for ((&new, &old), &sv) in entries(&t).iter().zip(&t0).zip(&entries(&s)) {
            let expect = alpha as f64 * old as f64 + (1.0 - alpha as f64) * sv as f64;
            prop_assert!((new as f64 - expect).abs() <= 1e-6 * (1.0 + expect.abs()));
            let (lo, hi) = (old.min(sv), old.max(sv));
            prop_assert!(new >= lo - 1e-6 && new <= hi + 1e-6);
        }
    }
}

// ---- refined pseudo-labels -----------------------------------------------

fn state_for(cfg: &AdaptConfig, seed: u64) -> AdaptState {
    AdaptState::new(&source_model("mlp-small", seed), cfg)
}

#[test]
fn threshold_zero_always_takes_the_direct_prediction() {
    let cfg = AdaptConfig { p_th: 0.0, n_aug: 4, ..AdaptConfig::default() };
    let mut st = state_for(&cfg, 10);
    let b = batch(CorruptionKind::GaussianNoise, 5, 8, 1);
    let pl = refined_pseudo_label(&mut st, &b, &cfg).unwrap();
    assert!(pl.used_augmentation.iter().all(|&u| !u));
    assert!(pl.probs.bits_eq(&pl.direct));
    let teacher = st.teacher.predict_proba(&b.images, StatsMode::UseCurrentBatch).unwrap();
    assert!(pl.direct.bits_eq(&teacher));
}

#[test]
fn identity_augmentation_averages_back_to_the_direct_prediction() {
    let cfg = AdaptConfig { p_th: 1.5, n_aug: 8, augment: AugmentPolicy::identity(), ..AdaptConfig::default() };
    let mut st = state_for(&cfg, 11);
    let b = batch(CorruptionKind::Contrast, 3, 8, 2);
    let pl = refined_pseudo_label(&mut st, &b, &cfg).unwrap();
    assert!(pl.used_augmentation.iter().all(|&u| u));
    for (a, d) in pl.probs.data().iter().zip(pl.direct.data()) {
        assert!((a - d).abs() <= 1e-6, "{a} vs {d}");
    }
}

#[test]
fn gate_partitions_items_by_source_confidence() {
    let src = source_model("mlp-small", 12);
    let mut images = batch(CorruptionKind::Clean, 1, 8, 3).images.data().to_vec();
    images.extend(batch(CorruptionKind::ImpulseNoise, 5, 8, 4).images.data());
    let b = Batch { images: Tensor::new(&[16, 1, 16, 16], images).unwrap(), ..batch(CorruptionKind::Clean, 1, 16, 3) };

    let oracle = src.predict_proba(&b.images, StatsMode::UseCurrentBatch).unwrap().max_rows();
    let mut sorted = oracle.clone();
    sorted.sort_by(f32::total_cmp);
    // threshold between the 8th and 9th most confident items: half each way
    let cfg = AdaptConfig { n_aug: 4, p_th: sorted[8], ..AdaptConfig::default() };
    let mut st = AdaptState::new(&src, &cfg);
    let pl = refined_pseudo_label(&mut st, &b, &cfg).unwrap();

    assert_eq!(pl.source_confidence, oracle);
    assert_eq!(pl.used_augmentation.iter().filter(|&&u| u).count(), 8);
    for i in 0..16 {
        let confident = oracle[i] >= cfg.p_th;
        assert_eq!(pl.used_augmentation[i], !confident);
        let row = &pl.probs.data()[i * K..(i + 1) * K];
        let direct = &pl.direct.data()[i * K..(i + 1) * K];
        if confident {
            assert_eq!(row, direct);
        } else {
            assert_ne!(row, direct);
        }
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn augmentation_needs_at_least_one_view() {
    let cfg = AdaptConfig { p_th: 2.0, n_aug: 0, ..AdaptConfig::default() };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut st = state_for(&cfg, 13);
    let b = batch(CorruptionKind::Fog, 2, 4, 5);
    assert!(matches!(refined_pseudo_label(&mut st, &b, &cfg), Err(Error::Contract(_))));
}

// ---- stochastic restore --------------------------------------------------

#[test]
fn restore_probability_zero_is_a_no_op() {
    let src = source_model("mlp-small", 20);
    let mut student = src.snapshot();
    jitter(&mut student, 0.1, 21);
    let before = student.snapshot();
    let rep = stochastic_restore(&mut student, &src, 0.0, ParamFilter::All, &mut rng::seeded(1)).unwrap();
    assert_eq!(rep.restored, 0);
    assert_eq!(rep.total, src.num_scalars());
    assert!(student.bits_eq(&before));
}

#[test]
fn restore_probability_one_resets_everything() {
    let src = source_model("cnn-small", 22);
    let mut student = src.snapshot();
    jitter(&mut student, 0.1, 23);
    let rep = stochastic_restore(&mut student, &src, 1.0, ParamFilter::All, &mut rng::seeded(2)).unwrap();
    assert_eq!(rep.restored, rep.total);
    assert_eq!(entries(&student), entries(&src));
    assert!((rep.fraction() - 1.0).abs() < f32::EPSILON);
}

#[test]
fn restore_rate_is_binomial() {
    let src = source_model("mlp-small", 24);
    let p = 0.01;
    let mut r = rng::seeded(25);
    for trial in 0..20 {
        let (mut restored, mut total) = (0usize, 0usize);
        // ≥ 100k entries per trial
        while total < 100_000 {
            let mut student = src.snapshot();
            let rep = stochastic_restore(&mut student, &src, p, ParamFilter::All, &mut r).unwrap();
            restored += rep.restored;
            total += rep.total;
        }
        let mean = total as f64 * p;
        let sd = (mean * (1.0 - p)).sqrt();
        assert!((restored as f64 - mean).abs() <= 3.0 * sd, "trial {trial}: {restored} of {total}");
    }
}

#[test]
fn restore_scope_limits_what_can_reset() {
    let src = source_model("mlp-small", 26);
    let mut student = src.snapshot();
    jitter(&mut student, 0.1, 27);
    let before = student.snapshot();
    let rep = stochastic_restore(&mut student, &src, 1.0, ParamFilter::NormAffine, &mut rng::seeded(3)).unwrap();
    assert_eq!(rep.total, src.parameters().iter().filter(|p| p.is_norm_affine).map(|p| p.value.numel()).sum::<usize>());
    for ((s, b), o) in student.parameters().iter().zip(before.parameters()).zip(src.parameters()) {
        let want = if s.is_norm_affine { o } else { b };
        assert!(s.value.bits_eq(&want.value), "{}", s.name);
    }
}

#[test]
fn restore_rejects_bad_probability_and_mismatch() {
    let src = source_model("mlp-small", 28);
    let mut student = src.snapshot();
    let mut r = rng::seeded(4);
    assert!(matches!(stochastic_restore(&mut student, &src, 1.5, ParamFilter::All, &mut r), Err(Error::Contract(_))));
    let other = build_model("cnn-small", K, 0).unwrap();
    assert!(matches!(stochastic_restore(&mut student, &other, 0.5, ParamFilter::All, &mut r), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_entry_after_restore_is_prior_or_source(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let src = source_model("mlp-small", seed);
        let mut student = src.snapshot();
        jitter(&mut student, 0.1, seed ^ 9);
        let prior = entries(&student);
        let rep = stochastic_restore(&mut student, &src, p, ParamFilter::All, &mut rng::seeded(seed)).unwrap();
        let (after, source) = (entries(&student), entries(&src));
        let mut reset = 0;
        for i in 0..after.len() {
            let is_src = after[i].to_bits() == source[i].to_bits();
            prop_assert!(is_src || after[i].to_bits() == prior[i].to_bits());
            if is_src && prior[i].to_bits() != source[i].to_bits() {
                reset += 1;
            }
        }
        prop_assert_eq!(reset, rep.restored);
    }
}

// ---- one CoTTA step ------------------------------------------------------

#[test]
fn cotta_step_postconditions() {
    let cfg = AdaptConfig { n_aug: 4, restore_p: 0.3, ..AdaptConfig::default() };
    let mut st = state_for(&cfg, 30);
    let b = batch(CorruptionKind::ShotNoise, 4, 8, 6);
    // warm up so teacher and student differ
    for _ in 0..3 {
        cotta_step(&mut st, &b, &cfg).unwrap();
    }
    let source = st.source().snapshot();
    let teacher_prev = entries(&st.teacher);
    let counter = st.step_counter;

    // the same step without restoration exposes the pre-restore student
    let mut unrestored = st.clone();
    let no_restore = AdaptConfig { enable_restore: false, ..cfg.clone() };
    let out_a = cotta_step(&mut st, &b, &cfg).unwrap();
    let out_b = cotta_step(&mut unrestored, &b, &no_restore).unwrap();
    assert!(out_a.probs.bits_eq(&out_b.probs));
    assert_eq!(out_b.restored_frac, None);

    let updated = entries(&unrestored.student);
    let teacher = entries(&st.teacher);
    for i in 0..teacher.len() {
        let expect = cfg.alpha * teacher_prev[i] + (1.0 - cfg.alpha) * updated[i];
        assert!((teacher[i] - expect).abs() <= 1e-7, "{i}: {} vs {expect}", teacher[i]);
    }
    assert_eq!(st.step_counter, counter + 1);
    assert!(st.source().bits_eq(&source));
    let (after, src) = (entries(&st.student), entries(&source));
    let mut reset = 0;
    for i in 0..after.len() {
        if after[i].to_bits() != updated[i].to_bits() {
            assert_eq!(after[i].to_bits(), src[i].to_bits());
            reset += 1;
        }
    }
    let frac = out_a.restored_frac.unwrap() as f64;
    assert!(reset as f64 <= frac * after.len() as f64 + 0.5);
    assert!(frac > 0.2 && frac < 0.4);
    assert!(out_a.loss.unwrap().is_finite());
}

#[test]
fn cotta_updates_all_student_parameters() {
    let cfg = AdaptConfig { n_aug: 2, enable_restore: false, ..AdaptConfig::default() };
    let mut st = state_for(&cfg, 31);
    let before = st.student.snapshot();
    cotta_step(&mut st, &batch(CorruptionKind::Pixelate, 5, 8, 7), &cfg).unwrap();
    for (a, b) in st.student.parameters().iter().zip(before.parameters()) {
        assert!(!a.value.bits_eq(&b.value), "{} did not move", a.name);
    }
}

#[test]
fn ablated_cotta_with_hard_labels_is_pseudo_labelling_on_all_parameters() {
    let cfg = AdaptConfig {
        enable_weight_avg: false,
        enable_aug_avg: false,
        enable_restore: false,
        hard_pseudo_labels: true,
        ..AdaptConfig::default()
    };
    let mut a = state_for(&cfg, 32);
    let mut b = a.clone();
    for seed in 0..3 {
        let x = batch(CorruptionKind::GlassBlur, 5, 8, 40 + seed);
        let oa = cotta_step(&mut a, &x, &cfg).unwrap();
        let ob = pseudo_label_step_scoped(&mut b, &x, &cfg, ParamFilter::All).unwrap();
        assert_eq!(oa.loss, ob.loss);
        assert!(oa.probs.bits_eq(&ob.probs));
        assert!(a.student.bits_eq(&b.student));
    }
}

// ---- baselines -----------------------------------------------------------

fn changed(before: &ModelState, after: &ModelState) -> Vec<(String, bool)> {
    before
        .parameters()
        .iter()
        .zip(after.parameters())
        .map(|(b, a)| (b.name.clone(), !b.value.bits_eq(&a.value)))
        .collect()
}

#[test]
fn norm_affine_methods_touch_only_norm_affine_parameters() {
    for method in [Method::TentContinual, Method::PseudoLabel, Method::TentOnlineOracle] {
        let src = source_model("cnn-small", 33);
        let mut ad = Adapter::new(&src, AdaptConfig::for_method(method)).unwrap();
        ad.observe(&batch(CorruptionKind::MotionBlur, 4, 8, 8)).unwrap();
        for ((name, moved), p) in changed(&src, &ad.state().student).into_iter().zip(src.parameters()) {
            assert_eq!(moved, p.is_norm_affine, "{method:?} {name}");
        }
        assert!(ad.state().teacher.bits_eq(&src));
    }
}

#[test]
fn source_and_bn_methods_change_nothing() {
    let src = source_model("mlp-small", 34);
    for method in [Method::Source, Method::BnStatsAdapt] {
        let mut ad = Adapter::new(&src, AdaptConfig::for_method(method)).unwrap();
        for s in 0..3 {
            ad.observe(&batch(CorruptionKind::Brightness, 5, 8, 9 + s)).unwrap();
        }
        assert!(ad.state().student.bits_eq(&src));
        assert!(ad.state().teacher.bits_eq(&src));
        assert_eq!(ad.state().optimizer.steps(), 0);
    }
}

#[test]
fn source_predicts_with_running_statistics_and_bn_with_batch_statistics() {
    let src = source_model("mlp-small", 35);
    let b = batch(CorruptionKind::Fog, 5, 8, 12);
    let mut s = Adapter::new(&src, AdaptConfig::for_method(Method::Source)).unwrap();
    let mut n = Adapter::new(&src, AdaptConfig::for_method(Method::BnStatsAdapt)).unwrap();
    assert!(s.observe(&b).unwrap().probs.bits_eq(&src.predict_proba(&b.images, StatsMode::UseRunning).unwrap()));
    assert!(n.observe(&b).unwrap().probs.bits_eq(&src.predict_proba(&b.images, StatsMode::UseCurrentBatch).unwrap()));
}

#[test]
fn tent_step_descends_entropy() {
    let cfg = AdaptConfig { lr: 1e-4, ..AdaptConfig::for_method(Method::TentContinual) };
    let src = source_model("mlp-small", 36);
    let mut down = 0;
    for trial in 0..50u64 {
        let kind = CorruptionKind::ALL[trial as usize % 10];
        let b = batch(kind, 1 + (trial % 5) as u8, 16, 100 + trial);
        let mut st = AdaptState::new(&src, &cfg);
        let h0 = mean_entropy(&st.student.predict_proba(&b.images, StatsMode::UseCurrentBatch).unwrap());
        tent_step(&mut st, &b, &cfg).unwrap();
        let h1 = mean_entropy(&st.student.predict_proba(&b.images, StatsMode::UseCurrentBatch).unwrap());
        down += (h1 < h0) as usize;
    }
    assert!(down >= 45, "entropy decreased in {down} of 50 trials");
}

#[test]
fn tent_loss_is_the_entropy_of_its_prediction() {
    let cfg = AdaptConfig::for_method(Method::TentContinual);
    let mut st = state_for(&cfg, 37);
    let out = tent_step(&mut st, &batch(CorruptionKind::DefocusBlur, 3, 8, 13), &cfg).unwrap();
    assert!((out.loss.unwrap() as f64 - mean_entropy(&out.probs)).abs() < 1e-5);
}

#[test]
fn entropy_loss_of_uniform_logits_is_log_k() {
    let mut tape = Tape::new();
    let l = tape.param(Tensor::zeros(&[2, 10]));
    let h = entropy_loss(&mut tape, l).unwrap();
    assert!((tape.value(h).data()[0] as f64 - 10f64.ln()).abs() < 1e-6);
}

#[test]
fn pseudo_label_loss_is_negative_log_of_the_winning_probability() {
    let cfg = AdaptConfig::for_method(Method::PseudoLabel);
    let mut st = state_for(&cfg, 38);
    let out = pseudo_label_step(&mut st, &batch(CorruptionKind::Contrast, 5, 8, 14), &cfg).unwrap();
    let expect = out.probs.max_rows().iter().map(|&p| -(p as f64).ln()).sum::<f64>() / 8.0;
    assert!((out.loss.unwrap() as f64 - expect).abs() < 1e-5, "{:?} vs {expect}", out.loss);
}

#[test]
fn oracle_tent_resets_when_the_segment_changes() {
    let src = source_model("mlp-small", 39);
    let spec = standard_sequence(&[CorruptionKind::GaussianNoise, CorruptionKind::Fog], 5, 2, 8, K, 15).unwrap();
    let mut oracle = Adapter::new(&src, AdaptConfig::for_method(Method::TentOnlineOracle)).unwrap();
    let mut cont = Adapter::new(&src, AdaptConfig::for_method(Method::TentContinual)).unwrap();
    let mut fresh = Adapter::new(&src, AdaptConfig::for_method(Method::TentContinual)).unwrap();
    let mut it = spec.iter().unwrap();
    let mut outs = Vec::new();
    while let Some((b, _)) = it.next_batch() {
        let o = oracle.observe(&b).unwrap();
        let c = cont.observe(&b).unwrap();
        if b.meta.segment == 1 && outs.is_empty() {
            // first batch of the new segment: the oracle predicts like a
            // freshly reset model
            let f = fresh.observe(&b).unwrap();
            assert!(o.probs.bits_eq(&f.probs));
            assert!(!o.probs.bits_eq(&c.probs));
            outs.push(o);
        } else if b.meta.segment == 0 {
            assert!(o.probs.bits_eq(&c.probs));
        }
    }
    assert_eq!(outs.len(), 1);
}

#[test]
fn adapters_are_deterministic() {
    let src = source_model("mlp-small", 40);
    let spec = standard_sequence(&[CorruptionKind::ShotNoise, CorruptionKind::Pixelate], 5, 3, 8, K, 16).unwrap();
    let run = || {
        let cfg = AdaptConfig { n_aug: 4, seed: 9, ..AdaptConfig::default() };
        let mut ad = Adapter::new(&src, cfg).unwrap();
        let mut it = spec.iter().unwrap();
        let mut probs = Vec::new();
        while let Some((b, _)) = it.next_batch() {
            probs.push(ad.observe(&b).unwrap());
        }
        (probs, ad.state().student.snapshot(), ad.state().teacher.snapshot())
    };
    let (p1, s1, t1) = run();
    let (p2, s2, t2) = run();
    assert_eq!(p1, p2);
    assert!(s1.bits_eq(&s2) && t1.bits_eq(&t2));
}

#[test]
fn invalid_configs_are_rejected() {
    let src = source_model("mlp-small", 41);
    for cfg in [
        AdaptConfig { alpha: 1.5, ..AdaptConfig::default() },
        AdaptConfig { restore_p: -0.1, ..AdaptConfig::default() },
        AdaptConfig { p_th: f32::NAN, ..AdaptConfig::default() },
        AdaptConfig { lr: 0.0, ..AdaptConfig::default() },
    ] {
        assert!(matches!(Adapter::new(&src, cfg), Err(Error::Config(_))));
    }
}
