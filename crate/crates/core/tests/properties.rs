use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossmodal_har::evaluation::ConfusionMatrix;
use crossmodal_har::ingest::{
    estimate_sync_offset, grid_len, resample_30hz, Modality, RawStream, Scenario, CLASS_NAMES, RATE_HZ,
};
use crossmodal_har::models::Variant;
use crossmodal_har::study::ModelSize;
use crossmodal_har::synthetic::{generate_recording, generate_recordings, SynthConfig};
use crossmodal_har::training::{train, TrainConfig, TrainData};
use crossmodal_har::windowing::{
    denormalize, fit_norm_stats, make_splits, normalize, slide_windows, window_count, SplitSpec, WINDOW_SIZE,
    WINDOW_STEP,
};

fn short_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        session_seconds: 20.0,
        ..SynthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_count_matches_enumeration(len in 0usize..600, size in 1usize..100, step in 1usize..50) {
        let brute = (0..len).step_by(step).filter(|s| s + size <= len).count();
        prop_assert_eq!(window_count(len, size, step), brute);
    }

    #[test]
    fn resampling_a_grid_onto_itself_is_identity(
        n in 3usize..200,
        jitter in prop::collection::vec(0.2f64..1.8, 200),
        values in prop::collection::vec(0.0f64..1000.0, 200),
    ) {
        let mut ts = Vec::with_capacity(n);
        let mut t = 0.5;
        for j in &jitter[..n] {
            ts.push(t);
            t += j / RATE_HZ;
        }
        let raw = RawStream::new(Modality::Als, ts.clone(), values[..n].to_vec()).unwrap();
        let (t0, t1) = (ts[0], ts[n - 1]);
        prop_assume!((t1 - t0) * RATE_HZ >= 1.0);
        let once = resample_30hz(&raw, t0, t1).unwrap();
        prop_assert_eq!(once.len(), grid_len(t0, t1));
        let end = *once.timestamps.last().unwrap();
        let twice = resample_30hz(&once, t0, end).unwrap();
        prop_assert_eq!(twice.len(), once.len());
        for (a, b) in once.values.iter().zip(&twice.values) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn sync_recovers_whole_sample_shifts(k in -60i64..=60, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, pad) = (400usize, 60usize);
        let base: Vec<f64> = (0..n + 2 * pad).map(|_| rng.random_range(50.0..800.0)).collect();
        let times: Vec<f64> = (0..n).map(|i| i as f64 / RATE_HZ).collect();
        let reference: Vec<f64> = base[pad..pad + n].to_vec();
        // the target sees each reference value k samples later
        let target: Vec<f64> = (0..n).map(|i| base[(pad as i64 + i as i64 - k) as usize]).collect();
        let r = RawStream::new(Modality::Als, times.clone(), reference).unwrap();
        let t = RawStream::new(Modality::Als, times, target).unwrap();
        let est = estimate_sync_offset(&r, &t, 5.0).unwrap();
        prop_assert_eq!(est.lag_samples, k);
        prop_assert!((est.offset_s - k as f64 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trips(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rec = generate_recording(&short_synth(seed), 1 + rng.random_range(0..16), Scenario::FixedIndoor).unwrap();
        let windows = slide_windows(&rec.recording, WINDOW_SIZE, WINDOW_STEP).unwrap();
        let stats = fit_norm_stats(&windows).unwrap();
        for w in windows.iter().take(5) {
            let back = denormalize(&normalize(w, &stats), &stats);
            for (a, b) in w.als.iter().chain(&w.imu).zip(back.als.iter().chain(&back.imu)) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn accuracy_and_f1_match_pair_counting(
        pairs in prop::collection::vec((0usize..10, 0usize..10), 1..200)
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let m = ConfusionMatrix::from_predictions(10, &truth, &pred).unwrap();
        let correct = pairs.iter().filter(|(t, p)| t == p).count();
        prop_assert_eq!(m.accuracy(), correct as f64 / pairs.len() as f64);
        let mut macro_f1 = 0.0;
        for k in 0..10 {
            let tp = pairs.iter().filter(|&&(t, p)| t == k && p == k).count() as f64;
            let fp = pairs.iter().filter(|&&(t, p)| t != k && p == k).count() as f64;
            let fn_ = pairs.iter().filter(|&&(t, p)| t == k && p != k).count() as f64;
            let f1 = if tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
            prop_assert!((m.per_class_f1()[k] - f1).abs() < 1e-12);
            macro_f1 += f1;
        }
        prop_assert!((m.macro_f1() - macro_f1 / 10.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generated_recordings_satisfy_ingest_invariants(seed in any::<u64>(), subject in 1u32..=16) {
        let cfg = short_synth(seed);
        let scenario = cfg.scenario_of(subject).unwrap();
        let out = generate_recording(&cfg, subject, scenario).unwrap();
        let rec = &out.recording;
        rec.validate().unwrap();
        prop_assert_eq!(rec.len(), cfg.samples());
        prop_assert!(rec.labels.iter().all(|&l| (l as usize) < CLASS_NAMES.len()));
        prop_assert!(rec.als.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!(rec.imu.iter().flatten().all(|v| v.is_finite()));
        for i in [0, rec.len() / 2, rec.len() - 1] {
            prop_assert!((rec.time(i) - (rec.t0 + i as f64 / 30.0)).abs() < 1e-12);
        }
        let present: BTreeSet<u8> = rec.labels.iter().copied().collect();
        prop_assert_eq!(present.len(), CLASS_NAMES.len());
        let null = rec.labels.iter().filter(|&&l| l == 0).count() as f64 / rec.len() as f64;
        prop_assert!((null - cfg.null_fraction).abs() < 0.05, "null share {null}");
    }
}

#[test]
fn generator_is_seeded_per_subject() {
    let a = generate_recording(&short_synth(4), 3, Scenario::FixedIndoor).unwrap();
    let b = generate_recording(&short_synth(4), 3, Scenario::FixedIndoor).unwrap();
    let c = generate_recording(&short_synth(5), 3, Scenario::FixedIndoor).unwrap();
    assert_eq!(a.recording, b.recording);
    assert_ne!(a.recording.imu, c.recording.imu);
}

#[test]
fn scenario_light_levels_follow_their_baselines() {
    let cfg = short_synth(9);
    let mean_lux = |s: Scenario| {
        let r = generate_recording(&cfg, 1, s).unwrap().recording;
        r.als.iter().sum::<f64>() / r.len() as f64
    };
    let (s1, s2, s3) = (
        mean_lux(Scenario::FixedIndoor),
        mean_lux(Scenario::DynamicIndoor),
        mean_lux(Scenario::CloudyOutdoor),
    );
    assert!(s2 < s1 && s1 < s3, "{s1} {s2} {s3}");
}

#[test]
fn splits_are_subject_disjoint_and_complete() {
    let recs = generate_recordings(&short_synth(2)).unwrap();
    let spec = SplitSpec::default();
    let splits = make_splits(&recs, &spec, 2, WINDOW_SIZE, WINDOW_STEP).unwrap();
    let subjects = |w: &[crossmodal_har::windowing::WindowedSample]| -> BTreeSet<u32> {
        w.iter().map(|s| s.subject_id).collect()
    };
    let train_pool: BTreeSet<u32> = spec.train_subjects.iter().copied().collect();
    assert!(subjects(&splits.train).is_subset(&train_pool));
    assert!(subjects(&splits.val).is_subset(&train_pool));
    let n = splits.train.len() + splits.val.len();
    let expected: usize = recs
        .iter()
        .filter(|r| train_pool.contains(&r.subject_id))
        .map(|r| window_count(r.len(), WINDOW_SIZE, WINDOW_STEP))
        .sum();
    assert_eq!(n, expected);
    assert_eq!(splits.val.len(), (n as f64 * spec.val_fraction).floor() as usize);
    for (name, windows) in &splits.tests {
        let s = subjects(windows);
        assert!(s.is_disjoint(&train_pool), "{name} overlaps training subjects");
        assert_eq!(s.len(), 3, "{name}");
        let scen: BTreeSet<Scenario> = windows.iter().map(|w| w.scenario).collect();
        assert_eq!(scen.len(), 1, "{name} mixes scenarios");
    }
}

#[test]
fn training_record_invariants() {
    let recs = generate_recordings(&short_synth(6)).unwrap();
    let splits = make_splits(&recs, &SplitSpec::default(), 6, WINDOW_SIZE, WINDOW_STEP).unwrap();
    let stats = fit_norm_stats(&splits.train).unwrap();
    let norm = splits.normalized(&stats);
    let data = TrainData {
        train: norm.train,
        val: norm.val,
    };
    let size = ModelSize {
        conv_channels: 6,
        lstm_hidden: 6,
        embed_dim: 8,
        classifier_hidden: 8,
    };
    for (v, patience) in [(Variant::LightHar, 2), (Variant::ContraLight, 3), (Variant::MultiLight, 2)] {
        let cfg = TrainConfig {
            variant: v,
            seed: 6,
            max_epochs: 12,
            patience,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let (_, rec) = train(size.spec(v), &data, &cfg).unwrap();
        let min = rec.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(rec.best_val_loss <= min + cfg.min_delta, "{v}");
        assert_eq!(rec.best_val_loss, rec.epochs[rec.best_epoch - 1].val_loss);
        assert!(rec.stop_epoch <= rec.best_epoch + patience);
        assert_eq!(rec.stop_epoch, rec.epochs.len());
        if rec.early_stopped {
            assert_eq!(rec.stop_epoch, rec.best_epoch + patience);
        } else {
            assert_eq!(rec.stop_epoch, cfg.max_epochs);
        }
        for e in &rec.epochs {
            let c = &e.val_components;
            assert!((c.l_total - (c.l_co + c.l_ce_light + c.l_ce_imu)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&e.val_acc));
        }
    }
}
