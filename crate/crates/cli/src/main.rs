use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cycleasr::asr::{decode_corpus, train_supervised, AsrModel, Fusion};
use cycleasr::bench::{self, tte_pairs};
use cycleasr::config::RunConfig;
use cycleasr::cycle::{train_alternating, Mode};
use cycleasr::data::{load_dataset, load_texts, save_dataset, save_texts, Utterance};
use cycleasr::eval::{export_curves, load_transcripts, score_corpus, EpochMetrics, MetricsLog};
use cycleasr::lm::{lm_train, LmModel};
use cycleasr::tensor::{Adam, Checkpoint};
use cycleasr::tte::{tte_train, TteModel};
use cycleasr::{seeded, Error};

/// Cycle-consistency training for attention-based speech recognition on
/// synthetic data.
#[derive(Parser)]
#[command(name = "cycleasr", version, after_help = RunConfig::help_table())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 gives bitwise-reproducible runs on any machine).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus splits into a directory.
    #[command(after_help = RunConfig::help_table())]
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised ASR training on the paired split.
    #[command(after_help = RunConfig::help_table())]
    TrainSup {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by this command.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Train the TTE model to reproduce a trained ASR encoder.
    #[command(after_help = RunConfig::help_table())]
    TrainTte {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        asr: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the character LM on the text-only split.
    #[command(after_help = RunConfig::help_table())]
    TrainLm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Alternating paired/unpaired training of a pre-trained ASR model.
    #[command(after_help = RunConfig::help_table())]
    TrainCycle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        asr: PathBuf,
        /// Pre-trained TTE; required by the cycle mode.
        #[arg(long)]
        tte: Option<PathBuf>,
        /// cycle, ce1, ce5, oracle or supervised.
        #[arg(long, default_value = "cycle")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Beam-search decode a dataset into an `id<TAB>text` file.
    #[command(after_help = RunConfig::help_table())]
    Decode {
        #[arg(long)]
        asr: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides decode.beam.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Overrides decode.lm_weight.
        #[arg(long)]
        lm_weight: Option<f64>,
    },
    /// Score hypotheses against references (`id<TAB>text` or a dataset file).
    #[command(after_help = RunConfig::help_table())]
    Score {
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        refs: PathBuf,
    },
    /// Run the full benchmark and check the directional WER gates.
    #[command(after_help = RunConfig::help_table())]
    Reproduce {
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Optional directory for the report and learning curves.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Gate(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Gate(m)) => {
            eprintln!("acceptance gate failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut pairs = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::parse_overrides(&text)?
        }
        None => Vec::new(),
    };
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    Ok(RunConfig::default().with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

fn check_output(path: &Path, force: bool) -> CmdResult {
    if path.exists() && !force {
        return Err(Failure::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let cfg = load_config(&cli.common)?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let force = cli.common.force;
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out, force),
        Command::TrainSup { data, out, resume, curves } => train_sup(&cfg, &data, &out, resume.as_deref(), curves.as_deref(), force),
        Command::TrainTte { data, asr, out } => train_tte(&cfg, &data, &asr, &out, force),
        Command::TrainLm { data, out } => train_lm(&cfg, &data, &out, force),
        Command::TrainCycle { data, asr, tte, mode, out, curves } => {
            let mode: Mode = mode.parse()?;
            train_cycle(&cfg, &data, &asr, tte.as_deref(), mode, &out, curves.as_deref(), force)
        }
        Command::Decode { asr, data, out, beam, lm, lm_weight } => {
            decode(&cfg, &asr, &data, &out, beam, lm.as_deref(), lm_weight, force)
        }
        Command::Score { hyps, refs } => score(&hyps, &refs),
        Command::Reproduce { seeds, out } => reproduce(&cfg, &seeds, out.as_deref(), force),
    }
}

const PAIRED: &str = "paired.jsonl";
const UNPAIRED: &str = "unpaired.jsonl";
const UNPAIRED_TEXT: &str = "unpaired_text.jsonl";
const TEXT: &str = "text.txt";
const VAL: &str = "val.jsonl";
const EVAL: &str = "eval.jsonl";

fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> CmdResult {
    let files = [PAIRED, UNPAIRED, UNPAIRED_TEXT, TEXT, VAL, EVAL, "vocab.txt", "config.txt"];
    for f in files {
        check_output(&out.join(f), force)?;
    }
    std::fs::create_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    let s = bench::splits(cfg)?;
    save_dataset(out.join(PAIRED), &s.paired)?;
    save_dataset(out.join(UNPAIRED), &s.unpaired)?;
    save_dataset(out.join(UNPAIRED_TEXT), &s.unpaired_text)?;
    let texts: Vec<String> = s.text.iter().filter_map(|u| u.text.clone()).collect();
    save_texts(out.join(TEXT), &texts)?;
    save_dataset(out.join(VAL), &s.val)?;
    save_dataset(out.join(EVAL), &s.eval)?;
    cfg.synth.vocab().save(out.join("vocab.txt"))?;
    std::fs::write(out.join("config.txt"), cfg.to_file_string())
        .map_err(|e| Failure::Data(e.to_string()))?;
    log::info!(
        "wrote {} paired, {} unpaired, {} text, {} val, {} eval utterances to {}",
        s.paired.len(),
        s.unpaired.len(),
        texts.len(),
        s.val.len(),
        s.eval.len(),
        out.display()
    );
    Ok(())
}

fn meta_field(ck: &Checkpoint, field: &str) -> Option<serde_json::Value> {
    let meta: serde_json::Value = serde_json::from_str(&ck.meta).ok()?;
    meta.get(field).cloned()
}

fn with_meta_field(ck: &mut Checkpoint, field: &str, value: serde_json::Value) {
    let mut meta: serde_json::Value = serde_json::from_str(&ck.meta).expect("model metadata is JSON");
    meta[field] = value;
    ck.meta = meta.to_string();
}

fn train_sup(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    curves: Option<&Path>,
    force: bool,
) -> CmdResult {
    check_output(out, force)?;
    let paired = load_dataset(data.join(PAIRED))?;
    let val = load_dataset(data.join(VAL))?;
    let mut opt = Adam::new(cfg.train.sup_lr);
    let (mut asr, first_epoch) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let asr = AsrModel::from_checkpoint(&ck)?;
            opt.import(&asr, "adam.", &ck)?;
            let epoch = meta_field(&ck, "epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            (asr, epoch)
        }
        None => (AsrModel::new(cfg.asr.clone(), cfg.synth.vocab(), &mut seeded(cfg.seed, 100))?, 0),
    };
    let log = train_supervised(&mut asr, &mut opt, &paired, &val, &cfg.supervised(), first_epoch)?;
    let mut ck = asr.to_checkpoint();
    opt.export(&asr, "adam.", &mut ck);
    with_meta_field(&mut ck, "epoch", cfg.train.sup_epochs.max(first_epoch).into());
    ck.save(out)?;
    if let Some(path) = curves {
        let mut m = MetricsLog::default();
        for (i, loss) in log.losses.iter().enumerate() {
            m.push(EpochMetrics {
                epoch: first_epoch + i + 1,
                cycle_loss: *loss,
                val_acc: log.val_acc.get(i).copied().unwrap_or(f64::NAN),
                val_cer: f64::NAN,
                val_wer: f64::NAN,
            });
        }
        if !m.is_empty() {
            export_curves(&m, path)?;
        }
    }
    Ok(())
}

fn train_tte(cfg: &RunConfig, data: &Path, asr: &Path, out: &Path, force: bool) -> CmdResult {
    check_output(out, force)?;
    let asr = AsrModel::from_checkpoint(&Checkpoint::load(asr)?)?;
    let paired = load_dataset(data.join(PAIRED))?;
    let tte_cfg = cycleasr::tte::TteConfig {
        target_dim: asr.encoder_dim(),
        ..cfg.tte.clone()
    };
    let mut tte = TteModel::new(tte_cfg, asr.vocab.clone(), &mut seeded(cfg.seed, 200))?;
    let mut opt = Adam::new(cfg.train.tte_lr);
    let losses = tte_train(&mut tte, &mut opt, &tte_pairs(&asr, &paired)?, &cfg.tte_train())?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("tte loss {first:.4} -> {last:.4}");
    }
    tte.to_checkpoint().save(out)?;
    Ok(())
}

fn train_lm(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> CmdResult {
    check_output(out, force)?;
    let texts = load_texts(data.join(TEXT))?;
    let mut lm = LmModel::new(cfg.lm.clone(), cfg.synth.vocab(), &mut seeded(cfg.seed, 300))?;
    let mut opt = Adam::new(cfg.train.lm_lr);
    lm_train(&mut lm, &mut opt, &texts, &cfg.lm_train())?;
    lm.to_checkpoint().save(out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cycle(
    cfg: &RunConfig,
    data: &Path,
    asr: &Path,
    tte: Option<&Path>,
    mode: Mode,
    out: &Path,
    curves: Option<&Path>,
    force: bool,
) -> CmdResult {
    check_output(out, force)?;
    let asr = AsrModel::from_checkpoint(&Checkpoint::load(asr)?)?;
    let tte = match tte {
        Some(p) => Some(TteModel::from_checkpoint(&Checkpoint::load(p)?)?),
        None => None,
    };
    let paired = load_dataset(data.join(PAIRED))?;
    let val = load_dataset(data.join(VAL))?;
    let mut unpaired = load_dataset(data.join(UNPAIRED))?;
    if mode == Mode::Oracle {
        let texts: BTreeMap<String, String> = load_dataset(data.join(UNPAIRED_TEXT))?
            .into_iter()
            .filter_map(|u| Some((u.id, u.text?)))
            .collect();
        for u in &mut unpaired {
            u.text = texts.get(&u.id).cloned();
        }
    }
    let mut opt = Adam::new(cfg.train.paired_lr);
    let outcome = train_alternating(asr, tte.as_ref(), &mut opt, &paired, &unpaired, &val, mode, &cfg.schedule()?)?;
    log::info!("{mode}: best epoch {}", outcome.best_epoch);
    outcome.model.to_checkpoint().save(out)?;
    if let Some(path) = curves {
        export_curves(&outcome.log, path)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn decode(
    cfg: &RunConfig,
    asr: &Path,
    data: &Path,
    out: &Path,
    beam: Option<usize>,
    lm: Option<&Path>,
    lm_weight: Option<f64>,
    force: bool,
) -> CmdResult {
    check_output(out, force)?;
    let asr = AsrModel::from_checkpoint(&Checkpoint::load(asr)?)?;
    let lm = match lm {
        Some(p) => Some(LmModel::from_checkpoint(&Checkpoint::load(p)?)?),
        None => None,
    };
    let mut beam_cfg = cfg.beam();
    if let Some(b) = beam {
        beam_cfg.beam = b;
    }
    let weight = lm_weight.unwrap_or(cfg.decode.lm_weight);
    let fusion = lm.as_ref().map(|lm| Fusion { lm, weight });
    let utts = load_dataset(data)?;
    let hyps = decode_corpus(&asr, &utts, &beam_cfg, fusion)?;
    let mut text = String::new();
    for (id, h) in hyps {
        text.push_str(&format!("{id}\t{}\n", h.text(&asr.vocab)));
    }
    std::fs::write(out, text).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    Ok(())
}

fn load_refs(path: &Path) -> Result<BTreeMap<String, String>, Failure> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let utts: Vec<Utterance> = load_dataset(path)?;
        utts.into_iter()
            .map(|u| {
                let text = u.require_text()?.to_string();
                Ok((u.id, text))
            })
            .collect()
    } else {
        Ok(load_transcripts(path)?)
    }
}

fn score(hyps: &Path, refs: &Path) -> CmdResult {
    let report = score_corpus(&load_transcripts(hyps)?, &load_refs(refs)?)?;
    print!("{report}");
    Ok(())
}

fn reproduce(cfg: &RunConfig, seeds: &[u64], out: Option<&Path>, force: bool) -> CmdResult {
    if let Some(dir) = out {
        check_output(&dir.join("report.txt"), force)?;
    }
    let report = bench::reproduce(cfg, seeds)?;
    let mut text = report.to_string();
    let gates: Vec<_> = report.mode_gates().into_iter().chain(report.fusion_gates()).collect();
    for g in &gates {
        text.push_str(&format!("{} {}: {}\n", if g.passed { "PASS" } else { "FAIL" }, g.name, g.detail));
    }
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
        std::fs::write(dir.join("report.txt"), &text).map_err(|e| Failure::Data(e.to_string()))?;
        for s in &report.seeds {
            for (mode, log) in &s.curves {
                export_curves(log, dir.join(format!("curves-seed{}-{mode}.csv", s.seed)))?;
            }
        }
    }
    // Only the training-mode ordering gates the exit status; fusion results
    // are reported.
    let failed: Vec<&str> = report.mode_gates().iter().filter(|g| !g.passed).map(|g| g.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gate(failed.join("; ")))
    }
}
