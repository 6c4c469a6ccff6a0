use rand::Rng;

use super::*;
use crate::asr::{AsrConfig, Vocab};
use crate::data::{SynthSpec, SynthWorld, Utterance};
use crate::tensor::{Adam, Module};
use crate::tte::TteConfig;

fn vocab() -> Vocab {
    Vocab::new("ab".chars()).unwrap()
}

fn randomize<M: Module>(m: &mut M, seed: u64, scale: f64) {
    let mut rng = seeded(seed, 1);
    for p in m.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

fn asr(seed: u64) -> AsrModel {
    let cfg = AsrConfig {
        feature_dim: 3,
        encoder_layers: 1,
        subsample_layers: 1,
        encoder_cells: 2,
        embed_dim: 3,
        decoder_cells: 4,
        att_dim: 3,
        att_filters: 2,
        att_width: 3,
    };
    let mut m = AsrModel::new(cfg, vocab(), &mut seeded(seed, 0)).unwrap();
    randomize(&mut m, seed, 0.8);
    m
}

fn tte(seed: u64) -> TteModel {
    let cfg = TteConfig {
        target_dim: 4,
        embed_dim: 3,
        conv_layers: 1,
        conv_channels: 3,
        conv_width: 3,
        encoder_cells: 2,
        att_dim: 3,
        att_filters: 2,
        att_width: 3,
        prenet_layers: 1,
        prenet_dim: 3,
        decoder_layers: 1,
        decoder_cells: 4,
        postnet_layers: 2,
        postnet_channels: 3,
        postnet_width: 3,
        dropout: 0.5,
        prenet_dropout: 0.5,
        zoneout: 0.1,
    };
    let mut m = TteModel::new(cfg, vocab(), &mut seeded(seed, 0)).unwrap();
    randomize(&mut m, seed + 100, 0.8);
    m
}

fn features(frames: usize, seed: u64) -> FeatureSequence {
    let mut rng = seeded(seed, 2);
    let data = (0..frames * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureSequence::new(frames, 3, data).unwrap()
}

fn cfg(samples: usize) -> CycleConfig {
    CycleConfig {
        samples,
        ..CycleConfig::default()
    }
}

fn grad_norm(g: &Gradients) -> f64 {
    g.global_norm()
}

#[test]
fn leave_one_out_baselines() {
    assert_eq!(baseline_value(&[2.0, 4.0]).unwrap(), vec![4.0, 2.0]);
    assert_eq!(baseline_value(&[1.5; 3]).unwrap(), vec![1.5; 3]);
    assert_eq!(
        baseline_value(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        vec![3.5, 3.25, 3.0, 2.75, 2.5]
    );
    assert_eq!(baseline_value(&[7.0]).unwrap(), vec![0.0]);
    assert!(matches!(baseline_value(&[]), Err(Error::Input(_))));
    assert_eq!(batch_mean_baseline(&[1.0, 3.0]).unwrap(), vec![2.0, 2.0]);
}

#[test]
fn single_sample_gives_zero_gradient() {
    let r = cycle_step(&features(8, 1), &asr(1), &tte(2), &cfg(1), &mut seeded(3, 0)).unwrap();
    assert_eq!(r.weights, vec![0.0]);
    assert_eq!(grad_norm(&r.grads), 0.0);
}

#[test]
fn zero_samples_is_a_configuration_error() {
    let res = cycle_step(&features(8, 1), &asr(1), &tte(2), &cfg(0), &mut seeded(3, 0));
    assert!(matches!(res, Err(Error::Config(_))));
}

#[test]
fn identical_samples_give_zero_weights() {
    // An output layer that always emits eos makes every sample the empty
    // hypothesis; shared prenet masks then give identical losses.
    let mut m = asr(4);
    m.output.weight.data_mut().fill(0.0);
    let bias = m.output.bias.data_mut();
    bias.fill(-1e3);
    bias[Vocab::output_index(EOS)] = 0.0;
    let r = cycle_step(&features(8, 2), &m, &tte(5), &cfg(5), &mut seeded(6, 0)).unwrap();
    assert!(r.samples.iter().all(|s| s == &vec![EOS]));
    assert!(r.weights.iter().all(|&w| w == 0.0), "{:?}", r.weights);
    assert_eq!(grad_norm(&r.grads), 0.0);
}

#[test]
fn weights_sum_to_zero() {
    for seed in 0..20 {
        let r = cycle_step(&features(12, seed), &asr(seed), &tte(seed), &cfg(5), &mut seeded(seed, 7)).unwrap();
        let total: f64 = r.weights.iter().sum();
        assert!(total.abs() < 1e-9, "seed {seed}: {total}");
        let batch = cycle_step(
            &features(12, seed),
            &asr(seed),
            &tte(seed),
            &CycleConfig {
                baseline: BaselineKind::BatchMean,
                ..cfg(5)
            },
            &mut seeded(seed, 7),
        )
        .unwrap();
        assert!(batch.weights.iter().sum::<f64>().abs() < 1e-9);
    }
}

#[test]
fn gradient_reaches_encoder_and_decoder() {
    let m = asr(8);
    let r = cycle_step(&features(12, 3), &m, &tte(9), &cfg(5), &mut seeded(10, 0)).unwrap();
    assert!(r.weights.iter().any(|&w| w != 0.0));
    let norm = |ps: Vec<&crate::tensor::Param>| -> f64 {
        ps.iter()
            .flat_map(|p| r.grads.get_or_zero(p))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    };
    assert!(norm(m.encoder.iter().flat_map(|l| l.params()).collect()) > 0.0);
    assert!(norm(m.decoder.params()) > 0.0);
    assert!(norm(m.output.params()) > 0.0);
}

#[test]
fn gradient_matches_constant_weight_reimplementation() {
    let (m, t, x) = (asr(11), tte(12), features(12, 4));
    let c = CycleConfig {
        max_ratio: 5.0,
        ..cfg(4)
    };
    let (r, seed) = (0..50)
        .map(|s| (cycle_step(&x, &m, &t, &c, &mut seeded(s, 0)).unwrap(), s))
        .find(|(r, _)| r.weights.iter().any(|&w| w != 0.0))
        .expect("some draw with distinct samples");
    assert!(r.truncated.iter().all(|&t| !t));

    // sum_n (w_n / N) log p(C^n | X), with the weights typed in as numbers.
    let g = Graph::new();
    let enc = m.prepare(&g, &x).unwrap();
    let mut total = g.zeros(1, 1).unwrap();
    for (tokens, w) in r.samples.iter().zip(&r.weights) {
        let nll = m.supervised_loss_encoded(&g, &enc, tokens).unwrap();
        total = g.add(total, g.scale(nll, -w / r.samples.len() as f64).unwrap()).unwrap();
    }
    assert!((g.scalar(total) - r.estimator).abs() < 1e-12);
    let reference = g.backward(total).unwrap();
    for p in m.params() {
        let (a, b) = (r.grads.get_or_zero(p), reference.get_or_zero(p));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{}: {x} vs {y}", p.name());
        }
    }

    // Other TTE parameters change the weights, not the samples.
    let mut t2 = t.clone();
    randomize(&mut t2, 99, 0.8);
    let r2 = cycle_step(&x, &m, &t2, &c, &mut seeded(seed, 0)).unwrap();
    assert_eq!(r.samples, r2.samples);
    assert_ne!(r.weights, r2.weights);
}

#[test]
fn cycle_step_is_deterministic() {
    let run = || cycle_step(&features(10, 5), &asr(14), &tte(15), &cfg(5), &mut seeded(16, 0)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.grads.global_norm().to_bits(), b.grads.global_norm().to_bits());
}

#[test]
fn zero_weight_pseudo_label_loss() {
    let m = asr(17);
    let x = features(12, 6);
    for mode in [
        PseudoLabel::OneBest(BeamConfig { beam: 3, ..BeamConfig::default() }),
        PseudoLabel::Sampled { k: 5, temperature: 1.0, max_ratio: 0.8 },
    ] {
        let g = Graph::new();
        let Some(loss) = pseudo_label_ce_step(&g, &x, &m, &mode, 0.0, &mut seeded(1, 0)).unwrap() else {
            continue;
        };
        assert_eq!(g.scalar(loss), 0.0);
        assert_eq!(g.backward(loss).unwrap().global_norm(), 0.0);
    }
}

#[test]
fn pseudo_label_loss_is_weighted_cross_entropy() {
    let m = asr(18);
    let x = features(12, 7);
    let beam = BeamConfig { beam: 3, ..BeamConfig::default() };
    let best = beam_search(&m, &x, &beam, None).unwrap().remove(0);
    if best.tokens == [EOS] {
        return;
    }
    let g = Graph::no_grad();
    let loss = pseudo_label_ce_step(&g, &x, &m, &PseudoLabel::OneBest(beam), 0.1, &mut seeded(1, 0))
        .unwrap()
        .unwrap();
    let ce = g.scalar(m.supervised_loss(&g, &x, &best.tokens).unwrap());
    assert!((g.scalar(loss) - 0.1 * ce).abs() < 1e-12);
}

#[test]
fn empty_pseudo_labels_are_skipped() {
    let mut m = asr(19);
    m.output.weight.data_mut().fill(0.0);
    let bias = m.output.bias.data_mut();
    bias.fill(-1e3);
    bias[Vocab::output_index(EOS)] = 0.0;
    let g = Graph::new();
    let mode = PseudoLabel::Sampled { k: 3, temperature: 1.0, max_ratio: 0.8 };
    assert!(pseudo_label_ce_step(&g, &features(8, 1), &m, &mode, 0.1, &mut seeded(1, 0))
        .unwrap()
        .is_none());
}

struct Toy {
    paired: Vec<Utterance>,
    unpaired: Vec<Utterance>,
    val: Vec<Utterance>,
    asr: AsrModel,
    tte: TteModel,
}

fn toy() -> Toy {
    let spec = SynthSpec {
        letters: 3,
        dim: 3,
        lexicon_size: 6,
        ..SynthSpec::default()
    };
    let world = SynthWorld::new(&spec).unwrap();
    let gen = |n, prefix, seed| crate::data::generate_with_prefix(&world, n, (1, 2), seed, prefix).unwrap();
    let vocab = spec.vocab();
    let acfg = AsrConfig {
        feature_dim: 3,
        encoder_layers: 1,
        subsample_layers: 1,
        encoder_cells: 3,
        embed_dim: 4,
        decoder_cells: 6,
        att_dim: 4,
        att_filters: 2,
        att_width: 3,
    };
    let asr = AsrModel::new(acfg, vocab.clone(), &mut seeded(1, 0)).unwrap();
    let tte = TteModel::new(TteConfig::default_with_dim(6), vocab, &mut seeded(2, 0)).unwrap();
    Toy {
        paired: gen(6, "p", 1),
        unpaired: gen(6, "u", 2).into_iter().map(|u| u.without_text()).collect(),
        val: gen(3, "v", 3),
        asr,
        tte,
    }
}

fn schedule() -> ScheduleConfig {
    ScheduleConfig {
        epochs: 2,
        paired_batch: 3,
        unpaired_batch: 3,
        cycle: CycleConfig { samples: 3, ..CycleConfig::default() },
        label_beam: BeamConfig { beam: 2, ..BeamConfig::default() },
        val_beam: BeamConfig { beam: 1, ..BeamConfig::default() },
        ..ScheduleConfig::default()
    }
}

#[test]
fn cycle_training_leaves_tte_untouched() {
    let t = toy();
    let before: Vec<u64> = t.tte.flat_values().iter().map(|v| v.to_bits()).collect();
    let out = train_alternating(
        t.asr.clone(),
        Some(&t.tte),
        &mut Adam::new(1e-3),
        &t.paired,
        &t.unpaired,
        &t.val,
        Mode::Cycle,
        &schedule(),
    )
    .unwrap();
    let after: Vec<u64> = t.tte.flat_values().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert_eq!(out.log.rows.len(), 2);
    assert!(out.log.rows.iter().all(|r| r.cycle_loss.is_finite()));
    assert_ne!(out.model.flat_values(), t.asr.flat_values());
    let best = out
        .log
        .rows
        .iter()
        .max_by(|a, b| a.val_acc.partial_cmp(&b.val_acc).unwrap().then(b.epoch.cmp(&a.epoch)))
        .unwrap();
    assert_eq!(out.best_epoch, best.epoch);
}

#[test]
fn empty_unpaired_set_reduces_to_supervised_training() {
    let t = toy();
    let run = |mode, unpaired: &[Utterance]| {
        train_alternating(
            t.asr.clone(),
            Some(&t.tte),
            &mut Adam::new(1e-3),
            &t.paired,
            unpaired,
            &t.val,
            mode,
            &schedule(),
        )
        .unwrap()
    };
    let a = run(Mode::Cycle, &[]);
    let b = run(Mode::Supervised, &t.unpaired);
    assert_eq!(a.model.flat_values(), b.model.flat_values());
    assert_eq!(a.log.rows.len(), b.log.rows.len());
    assert!(a.log.rows.iter().all(|r| r.cycle_loss.is_nan()));
}

#[test]
fn every_mode_runs_deterministically() {
    let t = toy();
    let with_text: Vec<Utterance> = toy_texts(&t);
    for mode in [Mode::Ce1Best, Mode::CeSampled, Mode::Oracle] {
        let unpaired = if mode == Mode::Oracle { &with_text } else { &t.unpaired };
        let run = || {
            train_alternating(t.asr.clone(), None, &mut Adam::new(1e-3), &t.paired, unpaired, &t.val, mode, &schedule())
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model.flat_values(), b.model.flat_values(), "{mode}");
        assert_eq!(a.log.to_csv(), b.log.to_csv());
    }
}

fn toy_texts(t: &Toy) -> Vec<Utterance> {
    // Oracle mode needs transcripts for the "unpaired" half.
    t.paired.iter().map(|u| Utterance { id: format!("o-{}", u.id), ..u.clone() }).collect()
}

#[test]
fn schedule_errors() {
    let t = toy();
    let go = |tte: Option<&TteModel>, mode, cfg: &ScheduleConfig| {
        train_alternating(t.asr.clone(), tte, &mut Adam::new(1e-3), &t.paired, &t.unpaired, &[], mode, cfg)
    };
    assert!(matches!(go(None, Mode::Cycle, &schedule()), Err(Error::Config(_))));
    let bad = ScheduleConfig { unpaired_steps: 0, ..schedule() };
    assert!(matches!(go(Some(&t.tte), Mode::Cycle, &bad), Err(Error::Config(_))));
    let wrong_dim = TteModel::new(TteConfig::default_with_dim(5), t.tte.vocab.clone(), &mut seeded(0, 0)).unwrap();
    assert!(matches!(go(Some(&wrong_dim), Mode::Cycle, &schedule()), Err(Error::Config(_))));
    assert!(matches!(go(Some(&t.tte), Mode::Oracle, &schedule()), Err(Error::Input(_))));
    assert_eq!("ce5".parse::<Mode>().unwrap(), Mode::CeSampled);
    assert!("bogus".parse::<Mode>().is_err());
}
