//! End-to-end benchmark: pre-training, every alternating-training mode, LM
//! fusion, and the directional checks on the resulting error rates.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use crate::asr::{decode_corpus, train_supervised, AsrModel, Fusion, TrainLog};
use crate::config::RunConfig;
use crate::cycle::{train_alternating, Mode, TrainOutcome};
use crate::data::{corpus_splits, Splits, Utterance};
use crate::error::{Error, Result};
use crate::eval::{score_corpus, MetricsLog, ScoreReport};
use crate::lm::{lm_train, LmModel};
use crate::seeded;
use crate::tensor::Adam;
use crate::tte::{tte_train, TteModel, TtePair};

/// Table rows in report order.
pub const ROWS: [&str; 5] = ["baseline", "cycle", "ce1", "ce5", "oracle"];

pub fn splits(cfg: &RunConfig) -> Result<Splits> {
    corpus_splits(&cfg.synth, cfg.data.sizes, cfg.words(), cfg.seed)
}

pub fn pretrain_asr(cfg: &RunConfig, paired: &[Utterance], val: &[Utterance]) -> Result<(AsrModel, TrainLog)> {
    let mut asr = AsrModel::new(cfg.asr.clone(), cfg.synth.vocab(), &mut seeded(cfg.seed, 100))?;
    let mut opt = Adam::new(cfg.train.sup_lr);
    let log = train_supervised(&mut asr, &mut opt, paired, val, &cfg.supervised(), 0)?;
    Ok((asr, log))
}

/// Transcripts paired with the encoder states `asr` produces for them.
pub fn tte_pairs(asr: &AsrModel, utts: &[Utterance]) -> Result<Vec<TtePair>> {
    utts.iter()
        .map(|u| {
            Ok(TtePair {
                tokens: asr.vocab.encode_with_eos(u.require_text()?)?,
                target: asr.encode(u.require_features()?)?,
            })
        })
        .collect()
}

pub fn pretrain_tte(cfg: &RunConfig, asr: &AsrModel, paired: &[Utterance]) -> Result<(TteModel, Vec<f64>)> {
    let mut tte = TteModel::new(cfg.tte.clone(), asr.vocab.clone(), &mut seeded(cfg.seed, 200))?;
    let mut opt = Adam::new(cfg.train.tte_lr);
    let losses = tte_train(&mut tte, &mut opt, &tte_pairs(asr, paired)?, &cfg.tte_train())?;
    Ok((tte, losses))
}

pub fn train_lm_model(cfg: &RunConfig, texts: &[String]) -> Result<(LmModel, Vec<f64>)> {
    let mut lm = LmModel::new(cfg.lm.clone(), cfg.synth.vocab(), &mut seeded(cfg.seed, 300))?;
    let mut opt = Adam::new(cfg.train.lm_lr);
    let curve = lm_train(&mut lm, &mut opt, texts, &cfg.lm_train())?;
    Ok((lm, curve))
}

/// Beam-search transcripts of `utts` scored against their texts.
pub fn evaluate(cfg: &RunConfig, asr: &AsrModel, utts: &[Utterance], lm: Option<&LmModel>) -> Result<ScoreReport> {
    let fusion = lm.map(|lm| Fusion {
        lm,
        weight: cfg.decode.lm_weight,
    });
    let hyps: BTreeMap<String, String> = decode_corpus(asr, utts, &cfg.beam(), fusion)?
        .into_iter()
        .map(|(id, h)| {
            let text = h.text(&asr.vocab);
            (id, text)
        })
        .collect();
    let refs = utts
        .iter()
        .map(|u| Ok((u.id.clone(), u.require_text()?.to_string())))
        .collect::<Result<BTreeMap<_, _>>>()?;
    score_corpus(&hyps, &refs)
}

/// Results of one seed.
#[derive(Debug, Clone)]
pub struct SeedReport {
    pub seed: u64,
    /// Evaluation scores keyed by [`ROWS`] name.
    pub rows: BTreeMap<String, ScoreReport>,
    /// Cycle model decoded with LM fusion.
    pub fused: ScoreReport,
    pub curves: BTreeMap<String, MetricsLog>,
    pub tte_losses: Vec<f64>,
    /// Wall time of the whole seed, fusion included.
    pub seconds: f64,
    /// Wall time of LM training plus fused decoding.
    pub fusion_seconds: f64,
}

impl SeedReport {
    pub fn wer(&self, row: &str) -> f64 {
        self.rows[row].wer()
    }
}

/// Runs the whole benchmark for `cfg.seed`.
pub fn run_seed(cfg: &RunConfig) -> Result<SeedReport> {
    let start = Instant::now();
    let data = splits(cfg)?;
    let (asr, _) = pretrain_asr(cfg, &data.paired, &data.val)?;
    let (tte, tte_losses) = pretrain_tte(cfg, &asr, &data.paired)?;
    log::info!("seed {}: pre-training done after {:.0}s", cfg.seed, start.elapsed().as_secs_f64());

    let mut rows = BTreeMap::new();
    let mut curves = BTreeMap::new();
    rows.insert("baseline".to_string(), evaluate(cfg, &asr, &data.eval, None)?);
    let schedule = cfg.schedule()?;
    // Oracle: the unpaired audio with its hidden transcripts.
    let oracle_set: Vec<Utterance> = data
        .unpaired
        .iter()
        .zip(&data.unpaired_text)
        .map(|(a, t)| Utterance {
            text: t.text.clone(),
            ..a.clone()
        })
        .collect();
    let mut cycle_model = None;
    for (name, mode) in [("cycle", Mode::Cycle), ("ce1", Mode::Ce1Best), ("ce5", Mode::CeSampled), ("oracle", Mode::Oracle)] {
        let unpaired = if mode == Mode::Oracle { &oracle_set } else { &data.unpaired };
        let mut opt = Adam::new(cfg.train.paired_lr);
        let TrainOutcome { model, log, best_epoch } =
            train_alternating(asr.clone(), Some(&tte), &mut opt, &data.paired, unpaired, &data.val, mode, &schedule)?;
        let report = evaluate(cfg, &model, &data.eval, None)?;
        log::info!(
            "seed {}: {name} best epoch {best_epoch}, eval WER {:.3} after {:.0}s",
            cfg.seed,
            report.wer(),
            start.elapsed().as_secs_f64()
        );
        rows.insert(name.to_string(), report);
        curves.insert(name.to_string(), log);
        if mode == Mode::Cycle {
            cycle_model = Some(model);
        }
    }
    let fusion_start = Instant::now();
    let texts: Vec<String> = data
        .text
        .iter()
        .map(|u| Ok(u.require_text()?.to_string()))
        .collect::<Result<_>>()?;
    let (lm, _) = train_lm_model(cfg, &texts)?;
    let fused = evaluate(cfg, cycle_model.as_ref().expect("cycle mode ran"), &data.eval, Some(&lm))?;
    Ok(SeedReport {
        seed: cfg.seed,
        rows,
        fused,
        curves,
        tte_losses,
        seconds: start.elapsed().as_secs_f64(),
        fusion_seconds: fusion_start.elapsed().as_secs_f64(),
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub seeds: Vec<SeedReport>,
}

/// Outcome of one directional check.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl BenchReport {
    pub fn median_wer(&self, row: &str) -> f64 {
        median(self.seeds.iter().map(|s| s.wer(row)).collect())
    }

    pub fn median_cer(&self, row: &str) -> f64 {
        median(self.seeds.iter().map(|s| s.rows[row].cer()).collect())
    }

    pub fn median_fused_wer(&self) -> f64 {
        median(self.seeds.iter().map(|s| s.fused.wer()).collect())
    }

    /// Median-WER ordering checks for the training modes.
    pub fn mode_gates(&self) -> Vec<Gate> {
        let w = |r| self.median_wer(r);
        let (base, cycle, ce1) = (w("baseline"), w("cycle"), w("ce1"));
        let others = ["baseline", "cycle", "ce1", "ce5"].map(w);
        vec![
            Gate {
                name: "cycle improves on baseline by >= 5% relative",
                passed: cycle <= 0.95 * base,
                detail: format!("baseline {:.1}%, cycle {:.1}%", 100.0 * base, 100.0 * cycle),
            },
            Gate {
                name: "cycle no worse than ce1",
                passed: cycle <= ce1,
                detail: format!("cycle {:.1}%, ce1 {:.1}%", 100.0 * cycle, 100.0 * ce1),
            },
            Gate {
                name: "oracle is best",
                passed: others.iter().all(|&o| w("oracle") < o),
                detail: format!("oracle {:.1}%", 100.0 * w("oracle")),
            },
        ]
    }

    /// LM fusion checks: no median degradation beyond 2% relative and a
    /// per-seed improvement for a majority of seeds.
    pub fn fusion_gates(&self) -> Vec<Gate> {
        let plain = self.median_wer("cycle");
        let fused = self.median_fused_wer();
        let improved = self.seeds.iter().filter(|s| s.fused.wer() < s.wer("cycle")).count();
        let needed = self.seeds.len() / 2 + 1;
        vec![
            Gate {
                name: "fusion degrades cycle WER by <= 2% relative",
                passed: fused <= 1.02 * plain,
                detail: format!("plain {:.1}%, fused {:.1}%", 100.0 * plain, 100.0 * fused),
            },
            Gate {
                name: "fusion improves WER for a majority of seeds",
                passed: improved >= needed,
                detail: format!("{improved} of {} seeds", self.seeds.len()),
            },
        ]
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>8} {:>8}   (median over {} seeds)", "method", "CER %", "WER %", self.seeds.len())?;
        for row in ROWS {
            writeln!(
                f,
                "{row:<16} {:>8.1} {:>8.1}",
                100.0 * self.median_cer(row),
                100.0 * self.median_wer(row)
            )?;
        }
        let fused_cer = median(self.seeds.iter().map(|s| s.fused.cer()).collect());
        writeln!(
            f,
            "{:<16} {:>8.1} {:>8.1}",
            "cycle + LM",
            100.0 * fused_cer,
            100.0 * self.median_fused_wer()
        )?;
        for s in &self.seeds {
            write!(f, "seed {:>3}:", s.seed)?;
            for row in ROWS {
                write!(f, " {row} {:.1}", 100.0 * s.wer(row))?;
            }
            writeln!(f, " cycle+LM {:.1} ({:.0}s)", 100.0 * s.fused.wer(), s.seconds)?;
        }
        Ok(())
    }
}

/// Runs [`run_seed`] for every seed in `seeds` on top of `cfg`.
pub fn reproduce(cfg: &RunConfig, seeds: &[u64]) -> Result<BenchReport> {
    if seeds.is_empty() {
        return Err(Error::Config("reproduce needs at least one seed".into()));
    }
    let seeds = seeds
        .iter()
        .map(|&seed| run_seed(&RunConfig { seed, ..cfg.clone() }))
        .collect::<Result<_>>()?;
    Ok(BenchReport { seeds })
}
