use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srcorrnet::mixsim::DatasetSpec;
use srcorrnet::model::{ModelConfig, SplitKind, SrCorrNet};
use srcorrnet::nn::ParamStore;
use srcorrnet::pipeline::{
    css_separate, evaluate, evaluate_outputs, stitch_align, CssConfig, LrSchedule, Separator, TrainConfig, TrainData,
    TrainExample, Trainer,
};
use srcorrnet::signal::{StftConfig, Waveform, WindowKind};
use srcorrnet::Error;

fn tiny_model(split: SplitKind, mics: usize) -> ModelConfig {
    ModelConfig {
        channels: 8,
        hidden_channels: 8,
        enc_blocks: 1,
        dec_blocks: 1,
        attractor_blocks: 1,
        heads: 2,
        speakers: 2,
        mics,
        split,
        stft: StftConfig {
            frame_len: 32,
            hop: 16,
            window: WindowKind::Hann,
        },
        ..ModelConfig::default()
    }
}

fn dataset(count: usize, mics: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        count,
        duration_s: 0.25,
        mics,
        seed,
        ..DatasetSpec::default()
    }
}

fn examples(spec: &DatasetSpec) -> Vec<TrainExample> {
    (0..spec.count).map(|i| spec.generate(i).unwrap().into()).collect()
}

fn train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        crop_s: Some(0.2),
        lr: LrSchedule {
            peak: 1e-3,
            warmup_steps: 4,
            ..LrSchedule::default()
        },
        seed: 11,
        ..TrainConfig::default()
    }
}

fn params(store: &ParamStore<f32>) -> Vec<Vec<f32>> {
    store.iter().map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn training_is_deterministic() {
    let data = TrainData::Fixed(examples(&dataset(3, 1, 1)));
    let model = tiny_model(SplitKind::Fixed, 1);
    let run = || {
        let mut t = Trainer::new(&model, train_config(50), data.clone()).unwrap();
        let losses: Vec<f64> = (0..50).map(|_| t.step().unwrap().loss).collect();
        (losses, params(&t.store))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert!(a.0.iter().all(|l| l.is_finite()));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = TrainData::Fixed(examples(&dataset(3, 2, 2)));
    let model = tiny_model(SplitKind::Fixed, 2);
    let mut full = Trainer::new(&model, train_config(10), data.clone()).unwrap();
    let full_losses: Vec<f64> = (0..10).map(|_| full.step().unwrap().loss).collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut first = Trainer::new(&model, train_config(10), data.clone()).unwrap();
    let mut losses: Vec<f64> = (0..5).map(|_| first.step().unwrap().loss).collect();
    first.save(&path).unwrap();
    drop(first);
    let mut second = Trainer::resume(&path, train_config(10), data).unwrap();
    assert_eq!(second.state.step, 5);
    losses.extend((0..5).map(|_| second.step().unwrap().loss));
    assert_eq!(losses, full_losses);
    assert_eq!(params(&second.store), params(&full.store));
}

#[test]
fn resume_rejects_different_seed() {
    let data = TrainData::Fixed(examples(&dataset(2, 1, 3)));
    let model = tiny_model(SplitKind::Fixed, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut t = Trainer::new(&model, train_config(1), data.clone()).unwrap();
    t.step().unwrap();
    t.save(&path).unwrap();
    let cfg = TrainConfig { seed: 12, ..train_config(1) };
    assert!(Trainer::resume(&path, cfg, data).is_err());
}

#[test]
fn run_writes_one_log_line_per_step_and_checkpoints() {
    let data = TrainData::Stream {
        spec: dataset(4, 1, 4),
        epoch_size: 4,
    };
    let mut t = Trainer::new(&tiny_model(SplitKind::Fixed, 1), train_config(6), data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out/ckpt.json");
    let mut log = Vec::new();
    t.run(&mut log, None, Some(&path)).unwrap();
    let lines: Vec<serde_json::Value> = std::str::from_utf8(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"].as_u64(), Some(i as u64 + 1));
        for key in ["loss", "lr", "alpha", "grad_norm", "epoch"] {
            assert!(l[key].is_number(), "{key}");
        }
    }
    // 4 items per epoch, batch 2: steps 0-1 in epoch 0, 2-3 in epoch 1.
    assert_eq!(lines[2]["epoch"].as_u64(), Some(1));
    let sep = Separator::load(&path).unwrap();
    assert_eq!(params(&sep.store), params(&t.store));
}

#[test]
fn early_stopping_on_monitor() {
    let set = examples(&dataset(2, 1, 5));
    let cfg = TrainConfig {
        eval_every: Some(2),
        stop_at_si_snri: Some(-1e9),
        ..train_config(10)
    };
    let mut t = Trainer::new(&tiny_model(SplitKind::Fixed, 1), cfg, TrainData::Fixed(set.clone())).unwrap();
    let mut log = Vec::new();
    let report = t.run(&mut log, Some(&set), None).unwrap().expect("evaluated");
    assert_eq!(t.state.step, 2);
    assert_eq!(report.samples.len(), 2);
    assert!(std::str::from_utf8(&log).unwrap().contains("si_snri"));
}

#[test]
fn gradient_is_clipped() {
    let data = TrainData::Fixed(examples(&dataset(2, 1, 6)));
    let cfg = TrainConfig {
        grad_clip: 1e-3,
        ..train_config(3)
    };
    let mut t = Trainer::new(&tiny_model(SplitKind::Fixed, 1), cfg, data).unwrap();
    for _ in 0..3 {
        let rec = t.step().unwrap();
        assert!(rec.grad_norm > 1e-3);
        assert!(t.store.grad_norm() <= 1e-3 * (1.0 + 1e-5));
    }
    let cfg = train_config(2);
    let mut t = Trainer::new(&tiny_model(SplitKind::Fixed, 1), cfg, TrainData::Fixed(examples(&dataset(2, 1, 6)))).unwrap();
    t.step().unwrap();
    assert!(t.store.grad_norm() <= 5.0 + 1e-6);
}

#[test]
fn non_finite_loss_reports_batch_seed() {
    let data = TrainData::Fixed(examples(&dataset(2, 1, 7)));
    let mut t = Trainer::new(&tiny_model(SplitKind::Fixed, 1), train_config(5), data).unwrap();
    t.step().unwrap();
    let id = t.store.ids().next().unwrap();
    t.store.get_mut(id).value.data_mut()[0] = f32::NAN;
    match t.step() {
        Err(Error::NonFiniteLoss { step, seed }) => {
            assert_eq!(step, 1);
            assert_eq!(seed, t.batch_seed(1));
        }
        other => panic!("expected non-finite failure, got {other:?}"),
    }
}

#[test]
fn attractor_training_steps() {
    let spec = DatasetSpec {
        k_min: 1,
        k_max: 2,
        ..dataset(4, 1, 8)
    };
    let data = TrainData::Stream { spec, epoch_size: 4 };
    let mut t = Trainer::new(&tiny_model(SplitKind::Attractor, 1), train_config(3), data).unwrap();
    for _ in 0..3 {
        assert!(t.step().unwrap().loss.is_finite());
    }
}

#[test]
fn mismatched_data_rejected() {
    let model = tiny_model(SplitKind::Fixed, 2);
    assert!(Trainer::new(&model, train_config(1), TrainData::Fixed(examples(&dataset(2, 1, 9)))).is_err());
    assert!(Trainer::new(&model, train_config(1), TrainData::Fixed(Vec::new())).is_err());
    let three = DatasetSpec {
        k_min: 3,
        k_max: 3,
        ..dataset(2, 2, 9)
    };
    assert!(Trainer::new(&model, train_config(1), TrainData::Stream { spec: three, epoch_size: 2 }).is_err());
}

fn si_snr_oracle(est: &[f64], target: &[f64]) -> f64 {
    let dot: f64 = est.iter().zip(target).map(|(a, b)| a * b).sum();
    let tt: f64 = target.iter().map(|v| v * v).sum();
    let proj: Vec<f64> = target.iter().map(|t| dot / tt * t).collect();
    let num: f64 = proj.iter().map(|v| v * v).sum();
    let den: f64 = est.iter().zip(&proj).map(|(e, p)| (e - p).powi(2)).sum();
    10.0 * (num / den).log10()
}

#[test]
fn mixture_passthrough_scores_zero() {
    for ex in examples(&dataset(3, 1, 10)) {
        let mix = ex.mixture.channel(0).to_vec();
        let m = evaluate_outputs(&mix, &[mix.clone(), mix.clone()], &ex.targets, 30.0).unwrap();
        assert!(m.si_snri.abs() < 1e-9, "{}", m.si_snri);
        assert!(m.sdri.abs() < 1e-9, "{}", m.sdri);
    }
}

#[test]
fn oracle_outputs_hit_the_clip_ceiling() {
    for ex in examples(&dataset(3, 1, 11)) {
        let mix = ex.mixture.channel(0);
        let swapped = vec![ex.targets[1].clone(), ex.targets[0].clone()];
        let m = evaluate_outputs(mix, &swapped, &ex.targets, 30.0).unwrap();
        for (k, v) in m.si_snri_per_speaker.iter().enumerate() {
            let base = si_snr_oracle(mix, &ex.targets[k]);
            assert!((v - (30.0 - base)).abs() < 1e-9);
        }
        assert_eq!(m.k_est, 2);
    }
}

#[test]
fn evaluate_matches_independent_scoring() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for ex in examples(&dataset(4, 1, 12)) {
        let mix = ex.mixture.channel(0);
        let outputs: Vec<Vec<f64>> = (0..2)
            .map(|k| {
                let t = &ex.targets[1 - k];
                t.iter().zip(mix).map(|(a, b)| a + rng.random_range(0.05..0.6) * b).collect()
            })
            .collect();
        let m = evaluate_outputs(mix, &outputs, &ex.targets, 30.0).unwrap();
        let score = |p: [usize; 2]| -> f64 { (0..2).map(|i| si_snr_oracle(&outputs[i], &ex.targets[p[i]])).sum() };
        let p = if score([0, 1]) >= score([1, 0]) { [0, 1] } else { [1, 0] };
        let mut want = 0.0;
        for i in 0..2 {
            want += si_snr_oracle(&outputs[i], &ex.targets[p[i]]) - si_snr_oracle(mix, &ex.targets[p[i]]);
        }
        assert!((m.si_snri - want / 2.0).abs() < 1e-9, "{} vs {}", m.si_snri, want / 2.0);
    }
}

#[test]
fn missing_outputs_count_as_silence() {
    let ex = &examples(&dataset(1, 1, 13))[0];
    let mix = ex.mixture.channel(0);
    let m = evaluate_outputs(mix, &[ex.targets[0].clone()], &ex.targets, 30.0).unwrap();
    assert_eq!(m.k_est, 1);
    assert!((m.si_snri_per_speaker[0] - (30.0 - si_snr_oracle(mix, &ex.targets[0]))).abs() < 1e-9);
    // A silent estimate scores 0 dB, so its improvement is minus the baseline.
    assert!((m.si_snri_per_speaker[1] + si_snr_oracle(mix, &ex.targets[1])).abs() < 1e-9);
}

#[test]
fn evaluate_runs_the_network() {
    let model = tiny_model(SplitKind::Fixed, 1);
    let mut store = ParamStore::new(3);
    let net = SrCorrNet::build(&model, &mut store).unwrap();
    let set = examples(&dataset(2, 1, 14));
    let report = evaluate(&net, &store, &set, 30.0).unwrap();
    assert_eq!(report.samples.len(), 2);
    assert!(report.mean_si_snri.is_finite());
    assert_eq!(report.count_accuracy, 1.0);
}

fn random_separator(split: SplitKind) -> Separator {
    let model = tiny_model(split, 1);
    let mut store = ParamStore::new(5);
    let net = SrCorrNet::build(&model, &mut store).unwrap();
    Separator::new(net, store).unwrap()
}

#[test]
fn css_preserves_duration_and_stream_count() {
    let sep = random_separator(SplitKind::Fixed);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = CssConfig {
        history_s: 0.1,
        center_s: 0.15,
        future_s: 0.05,
        streams: 3,
    };
    for len in [100, 2400, 2401, 5000, 7777] {
        let x = Waveform::mono((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap();
        let out = css_separate(&sep, &x, &cfg).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|s| s.len() == len));
        assert!(out[..2].iter().all(|s| s.iter().all(|v| v.is_finite())));
        assert!(out[2].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn css_single_chunk_equals_direct_separation() {
    let sep = random_separator(SplitKind::Fixed);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = Waveform::mono((0..1500).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap();
    let direct = sep.separate(&x).unwrap().streams;
    let out = css_separate(&sep, &x, &CssConfig::default()).unwrap();
    assert_eq!(out, direct);
}

#[test]
fn css_rejects_zero_center() {
    let sep = random_separator(SplitKind::Fixed);
    let x = Waveform::mono(vec![0.1; 100], 8000).unwrap();
    let cfg = CssConfig {
        center_s: 0.0,
        ..CssConfig::default()
    };
    assert!(css_separate(&sep, &x, &cfg).is_err());
}

#[test]
fn stitch_recovers_swaps_under_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noisy = |s: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        let p = (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
        // 10 dB SNR: noise RMS = signal RMS / sqrt(10).
        let sigma = p / 10f64.sqrt() * 3f64.sqrt();
        s.iter().map(|v| v + sigma * rng.random_range(-1.0..1.0)).collect()
    };
    for trial in 0..100 {
        let k = 2 + trial % 2;
        let prev: Vec<Vec<f64>> = (0..k).map(|_| (0..800).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // cur[perm[i]] continues prev[i].
        let mut cur = vec![Vec::new(); k];
        for (i, &p) in perm.iter().enumerate() {
            cur[p] = noisy(&prev[i], &mut rng);
        }
        assert_eq!(stitch_align(&prev, &cur).unwrap(), perm, "trial {trial}");
        assert_eq!(stitch_align(&prev, &prev).unwrap(), (0..k).collect::<Vec<_>>());
    }
}
