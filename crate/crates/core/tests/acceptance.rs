//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers (visible under `--nocapture`; the test name
//! itself carries the per-criterion pass/fail verdict either way).

mod common;

use common::*;
use fdaseg::eval::{self, AblationRow};
use fdaseg::gfda::{gaussian_mask, spectral_transfer, spectral_transfer_masked};
use fdaseg::gradcheck::run_gradcheck;
use fdaseg::netcore::model::{ModelState, Tensor};
use fdaseg::netcore::{load_checkpoint, save_checkpoint, NetConfig};
use fdaseg::objectives::{
    build_pair_set, ccl_loss, consistency_loss, dfpm_propagate, scl_loss, ContrastBatch, DfpmMode,
};
use fdaseg::synthdata::{generate, GenParams, LabeledAmount, Sample};
use fdaseg::tensorfft::{amp_phase, fft2, ifft2_with_residue};
use fdaseg::trainer::{
    finetune, pretrain, train_source_only, EncoderInit, FinetuneEngine, Mode, PretrainEngine,
    TrainConfig,
};
use fdaseg::gfda::Style;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
fn criterion_1_fft_matches_naive_dft_parseval_and_roundtrip() {
    let t0 = Instant::now();
    for (i, &n) in [4usize, 8, 16].iter().enumerate() {
        for rep in 0..3u64 {
            let g = seeded_grid(n, n, 1000 + 10 * i as u64 + rep);
            let spec = fft2(&g).unwrap();
            let oracle = naive_dft_centered(&g);
            let max = spec
                .data()
                .iter()
                .zip(&oracle)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(max <= 1e-9, "size {n} rep {rep}: naive-DFT mismatch {max}");

            let spatial: f64 = g.data().iter().map(|v| v * v).sum();
            let freq: f64 =
                spec.data().iter().map(|z| z.norm_sqr()).sum::<f64>() / (n * n) as f64;
            assert!(
                (spatial - freq).abs() / spatial < 1e-6,
                "Parseval violated at size {n}"
            );

            let (back, residue) = ifft2_with_residue(&spec).unwrap();
            assert!(g.max_abs_diff(&back) <= 1e-6);
            assert!(residue <= 1e-6);
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 1.0, "criterion 1 runtime {dt:.2}s exceeds 1s");
    println!("PASS criterion 1: fft vs naive DFT <=1e-9, Parseval <=1e-6, roundtrip <=1e-6 ({dt:.2}s)");
}

#[test]
fn criterion_2_gfda_identity_dc_and_phase() {
    let t0 = Instant::now();
    // identity transfer on ten seeded images
    for seed in 0..10u64 {
        let x = seeded_image(32, 32, 2000 + seed);
        let out = spectral_transfer(&x, &x, 0.1).unwrap();
        let err = out.max_abs_diff(&x).unwrap();
        assert!(err <= 1e-4, "identity transfer error {err} at seed {seed}");
    }
    // mask value at DC is exactly 1
    for (h, w, sigma) in [(8, 8, 0.1), (32, 32, 0.25), (64, 64, 1.0)] {
        let m = gaussian_mask(h, w, sigma).unwrap();
        assert_eq!(m.values().get(h / 2, w / 2), 1.0);
    }
    // phase preservation wherever amplitude is not degenerate
    for seed in 0..3u64 {
        let src = seeded_image(32, 32, 2100 + seed);
        let tgt = seeded_image(32, 32, 2200 + seed);
        let mask = gaussian_mask(32, 32, 0.1).unwrap();
        let out = spectral_transfer_masked(&src, &tgt, mask.values()).unwrap();
        let out_ap = amp_phase(&fft2(&out.channel(0)).unwrap());
        let src_ap = amp_phase(&fft2(&src.channel(0)).unwrap());
        for i in 0..32 * 32 {
            if out_ap.amplitude.data()[i] > 1e-9 {
                let mut d = (out_ap.phase.data()[i] - src_ap.phase.data()[i]).abs();
                d = d.min((d - std::f64::consts::TAU).abs());
                assert!(d < 1e-6, "phase deviates by {d} at bin {i}");
            }
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 5.0, "criterion 2 runtime {dt:.2}s exceeds 5s");
    println!("PASS criterion 2: identity <=1e-4 on 10 images, DC mask = 1, phase preserved ({dt:.2}s)");
}

#[test]
fn criterion_3_losses_match_brute_force_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    for batch in 0..20u64 {
        // contrastive losses
        let n = 8;
        let embeddings = seeded_embeddings(n, 6, 3100 + batch);
        let styles: Vec<Style> = (0..n)
            .map(|i| if (i + batch as usize) % 2 == 0 { Style::A } else { Style::B })
            .collect();
        let ids: Vec<u64> = (0..n as u64).map(|i| i / 2).collect();
        let cb = ContrastBatch::new(embeddings.clone(), styles.clone(), ids.clone(), 0.07)
            .unwrap();
        let scl = scl_loss(&cb).unwrap();
        assert!((scl - scl_oracle(&embeddings, &styles, 0.07)).abs() < 1e-12);
        let (ccl, _) = ccl_loss(&cb).unwrap();
        assert!((ccl - ccl_oracle(&embeddings, &ids, 0.07)).abs() < 1e-12);

        // propagation
        let f = seeded_feature_map(4, 8, 3200 + batch, 32);
        let k = Tensor {
            shape: vec![8, 8],
            data: (0..64).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let prop = dfpm_propagate(&f, &k, DfpmMode::Propagated).unwrap();
        let oracle = dfpm_oracle(&f, &k.data);
        let max = prop
            .features
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-12, "dfpm mismatch {max}");

        // consistency
        let f2 = seeded_feature_map(4, 8, 3300 + batch, 32);
        let pairs = build_pair_set(&f, &f2, 32, 0.6).unwrap();
        let con = consistency_loss(&f, &f2, &pairs).unwrap();
        let con_ref = consistency_oracle(&f, &f2, 32, 0.6).unwrap();
        assert!((con - con_ref).abs() < 1e-12);

        // segmentation losses
        let logits = seeded_logits(2, 6, 6, 3400 + batch);
        let mask = seeded_blob_mask(6, 3500 + batch);
        let sup = fdaseg::objectives::supervised_loss(&logits, &mask).unwrap();
        assert!((sup - supervised_oracle(&logits, &mask)).abs() < 1e-12);
        let teacher = seeded_logits(2, 6, 6, 3600 + batch);
        let reg = fdaseg::objectives::reg_loss(&logits, &teacher).unwrap();
        assert!((reg - reg_oracle(&logits, &teacher)).abs() < 1e-12);
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 10.0, "criterion 3 runtime {dt:.2}s exceeds 10s");
    println!("PASS criterion 3: 20 seeded batches, every loss within 1e-12 of brute force ({dt:.2}s)");
}

#[test]
fn criterion_4_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let checks = run_gradcheck(42, 1e-3, 1e-4).unwrap();
    assert_eq!(checks.len(), 7);
    for c in &checks {
        assert!(
            c.pass,
            "{} failed: max rel err {:.3e} at {}",
            c.name, c.max_rel_err, c.worst.0
        );
        assert!(c.checked_params <= 2000);
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 120.0, "criterion 4 runtime {dt:.1}s exceeds 2min");
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    println!(
        "PASS criterion 4: 7 losses x {} params, worst rel err {:.2e} < 1e-4 ({dt:.1}s)",
        checks[0].checked_params, worst
    );
}

#[test]
fn criterion_5_ema_replay_over_200_steps() {
    let params = GenParams {
        seed: 5,
        n_source: 4,
        n_target: 4,
        n_test: 2,
        size: 32,
        ..GenParams::default()
    };
    let ds = generate(&params).unwrap();
    let cfg = TrainConfig {
        seed: 5,
        net: NetConfig {
            image_size: 32,
            ..NetConfig::default()
        },
        batch_size: 4,
        ..TrainConfig::default()
    };

    // momentum encoder over 200 recorded steps
    let mut engine = PretrainEngine::new(&cfg).unwrap();
    let mut replay = engine.momentum.clone();
    let pairs: Vec<(&Sample, &Sample)> = ds.source.iter().zip(&ds.target).collect();
    for _ in 0..200 {
        engine.step_batch(&pairs).unwrap();
        ema_step(&mut replay, &engine.state, cfg.alpha);
    }
    assert_states_close(&engine.momentum, &replay, 1e-12, "momentum");

    // teacher over 200 recorded steps
    let split = ds.with_labeled(LabeledAmount::Fraction(0.5), 5).unwrap();
    let mut engine = FinetuneEngine::new(&cfg, EncoderInit::Fresh, &split).unwrap();
    let mut replay = engine.teacher.clone().expect("teacher active");
    for _ in 0..200 {
        engine.step_batch(&[0, 1, 2, 3]).unwrap();
        ema_step(&mut replay, &engine.student, cfg.alpha);
    }
    assert_states_close(engine.teacher.as_ref().unwrap(), &replay, 1e-12, "teacher");
    println!("PASS criterion 5: momentum and teacher equal the 200-step EMA replay within 1e-12");
}

fn ema_step(slow: &mut ModelState, fast: &ModelState, alpha: f64) {
    let names: Vec<String> = slow.names().cloned().collect();
    for name in names {
        let f = fast.get(&name).unwrap().data.clone();
        let t = slow.get_mut(&name).unwrap();
        for (s, fv) in t.data.iter_mut().zip(&f) {
            *s = alpha * *s + (1.0 - alpha) * fv;
        }
    }
}

fn assert_states_close(a: &ModelState, b: &ModelState, tol: f64, what: &str) {
    for (name, t) in a.iter() {
        let other = &b.get(name).unwrap().data;
        for (x, y) in t.data.iter().zip(other) {
            assert!((x - y).abs() < tol, "{what} {name}: {x} vs {y}");
        }
    }
}

#[test]
fn criterion_6_metric_oracles_and_fixtures() {
    // analytic fixtures
    let mut a = fdaseg::synthdata::SegMask::zeros(8, 8);
    a.set(0, 0, 1);
    let mut b = fdaseg::synthdata::SegMask::zeros(8, 8);
    b.set(3, 4, 1);
    assert_eq!(eval::hausdorff(&a, &b).unwrap(), 5.0);

    let mut p = fdaseg::synthdata::SegMask::zeros(2, 4);
    let mut g = fdaseg::synthdata::SegMask::zeros(2, 4);
    for x in 0..4 {
        p.set(0, x, 1);
    }
    g.set(0, 2, 1);
    g.set(0, 3, 1);
    g.set(1, 0, 1);
    g.set(1, 1, 1);
    assert_eq!(eval::dsc(&p, &g).unwrap(), 0.5);

    // 50 seeded mask pairs, exact equality with the brute-force oracles
    for seed in 0..50u64 {
        let pred = seeded_blob_mask(16, 6000 + 2 * seed);
        let gt = seeded_blob_mask(16, 6001 + 2 * seed);
        assert_eq!(eval::dsc(&pred, &gt).unwrap(), dsc_oracle(&pred, &gt));
        match (eval::hausdorff(&pred, &gt), hausdorff_oracle(&pred, &gt)) {
            (Ok(got), Some(expect)) => assert_eq!(got, expect),
            (Err(_), None) => {}
            (got, expect) => panic!("seed {seed}: {got:?} vs {expect:?}"),
        }
    }
    println!("PASS criterion 6: DSC and HD match brute force exactly on 50 seeded pairs; 3-4-5 and half-overlap fixtures hold");
}

fn desk_gen(seed: u64) -> GenParams {
    GenParams {
        seed,
        n_source: 40,
        n_target: 40,
        n_test: 16,
        size: 64,
        ..GenParams::default()
    }
}

#[test]
fn criterion_7_directional_adaptation_ssda() {
    let t0 = Instant::now();
    let seeds = [11u64, 22, 33];
    let mut full = Vec::new();
    let mut tcl = Vec::new();
    let mut baseline = Vec::new();
    for &seed in &seeds {
        let ds = generate(&desk_gen(seed)).unwrap();
        let split = ds.with_labeled(LabeledAmount::Fraction(0.5), seed).unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };

        let pre = pretrain(&cfg, &ds).unwrap();
        let fine = finetune(&cfg, &pre.state, &split).unwrap();
        full.push(
            eval::evaluate(&fine.student, &cfg.net, &split.test_target)
                .unwrap()
                .dsc_mean,
        );

        let cfg_tcl = TrainConfig {
            switches: AblationRow::A.switches(),
            ..cfg.clone()
        };
        let pre_tcl = pretrain(&cfg_tcl, &ds).unwrap();
        let fine_tcl = finetune(&cfg_tcl, &pre_tcl.state, &split).unwrap();
        tcl.push(
            eval::evaluate(&fine_tcl.student, &cfg.net, &split.test_target)
                .unwrap()
                .dsc_mean,
        );

        let bl = train_source_only(&cfg, &split).unwrap();
        baseline.push(
            eval::evaluate(&bl.student, &cfg.net, &split.test_target)
                .unwrap()
                .dsc_mean,
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_full, m_tcl, m_base) = (mean(&full), mean(&tcl), mean(&baseline));
    let dt = t0.elapsed().as_secs_f64();
    assert!(
        m_full >= m_base + 0.05,
        "full {m_full:.3} does not beat source-only {m_base:.3} by 0.05 (per-seed full {full:?} base {baseline:?})"
    );
    assert!(
        m_full > m_tcl,
        "full {m_full:.3} does not beat TCL row (a) {m_tcl:.3} (per-seed full {full:?} tcl {tcl:?})"
    );
    println!(
        "PASS criterion 7: full {m_full:.3} vs baseline {m_base:.3} (gap {:.3} >= 0.05) and TCL {m_tcl:.3} (gap {:+.3} > 0) over 3 seeds ({dt:.0}s)",
        m_full - m_base,
        m_full - m_tcl
    );
}

#[test]
fn criterion_8_uda_beats_source_only() {
    let t0 = Instant::now();
    let seeds = [11u64, 22, 33];
    let mut uda = Vec::new();
    let mut baseline = Vec::new();
    for &seed in &seeds {
        let ds = generate(&desk_gen(seed)).unwrap();
        let uda_split = ds.unlabeled_split();
        let cfg = TrainConfig {
            seed,
            mode: Mode::Uda,
            ..TrainConfig::default()
        };
        let pre = pretrain(&cfg, &ds).unwrap();
        let fine = finetune(&cfg, &pre.state, &uda_split).unwrap();
        uda.push(
            eval::evaluate(&fine.student, &cfg.net, &uda_split.test_target)
                .unwrap()
                .dsc_mean,
        );
        let bl = train_source_only(&cfg, &uda_split).unwrap();
        baseline.push(
            eval::evaluate(&bl.student, &cfg.net, &uda_split.test_target)
                .unwrap()
                .dsc_mean,
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_uda, m_base) = (mean(&uda), mean(&baseline));
    let dt = t0.elapsed().as_secs_f64();
    assert!(
        m_uda >= m_base + 0.03,
        "UDA {m_uda:.3} does not beat source-only {m_base:.3} by 0.03 (per-seed uda {uda:?} base {baseline:?})"
    );
    println!(
        "PASS criterion 8: UDA {m_uda:.3} vs baseline {m_base:.3} (gap {:.3} >= 0.03) over 3 seeds ({dt:.0}s)",
        m_uda - m_base
    );
}

#[test]
fn criterion_9_determinism_and_exact_resume() {
    let params = GenParams {
        seed: 9,
        n_source: 4,
        n_target: 4,
        n_test: 2,
        size: 32,
        ..GenParams::default()
    };
    let ds = generate(&params).unwrap();
    let split = ds.with_labeled(LabeledAmount::Fraction(0.5), 9).unwrap();
    let cfg = TrainConfig {
        seed: 9,
        net: NetConfig {
            image_size: 32,
            ..NetConfig::default()
        },
        batch_size: 4,
        pretrain_epochs: 3,
        finetune_epochs: 3,
        ..TrainConfig::default()
    };

    // identical config + seed -> bit-identical serialized reports
    let report = |()| {
        let pre = pretrain(&cfg, &ds).unwrap();
        let fine = finetune(&cfg, &pre.state, &split).unwrap();
        let report = fdaseg::trainer::RunReport {
            config: cfg.clone(),
            pretrain: pre.history,
            finetune: fine.history,
            eval_source: Some(
                eval::evaluate(&fine.student, &cfg.net, &split.test_source).unwrap(),
            ),
            eval_target: Some(
                eval::evaluate(&fine.student, &cfg.net, &split.test_target).unwrap(),
            ),
            wall_clock_secs: Some(1234.5), // must not leak into the artifact
        };
        serde_json::to_vec(&report).unwrap()
    };
    assert_eq!(report(()), report(()), "serialized reports differ");

    // checkpoint resume equals continuous training bit for bit: the tiny
    // dataset at batch 4 makes each epoch exactly one optimizer step.
    let dir = tempfile::tempdir().unwrap();
    let mut cont = FinetuneEngine::new(&cfg, EncoderInit::Fresh, &split).unwrap();
    let mut interrupted = FinetuneEngine::new(&cfg, EncoderInit::Fresh, &split).unwrap();
    for _ in 0..3 {
        cont.epoch().unwrap();
        interrupted.epoch().unwrap();
    }
    let path = dir.path().join("resume.ckpt");
    save_checkpoint(&path, &interrupted.to_checkpoint()).unwrap();
    let mut resumed =
        FinetuneEngine::from_checkpoint(&cfg, &load_checkpoint(&path).unwrap(), &split).unwrap();
    for step in 0..5 {
        let a = cont.epoch().unwrap();
        let b = resumed.epoch().unwrap();
        assert_eq!(a, b, "step {step} diverged after resume");
    }
    assert_eq!(cont.student, resumed.student);
    assert_eq!(cont.teacher, resumed.teacher);
    println!("PASS criterion 9: bit-identical reports and checkpoint resume equal to continuous training over 5 further steps");
}
