use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use nvl_core::config::RunConfig;
use nvl_core::corpus::{self, wav, Corpus, Split};
use nvl_core::eval::{self, Condition, Report, Trial};
use nvl_core::models::{Checkpoint, Stage};
use nvl_core::trainer::{self, Models, System, TrainData, TrainLog};
use nvl_core::Error;

use crate::{Command, Global};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.nvl";
pub const LOG_FILE: &str = "train.log";
pub const REPORT_FILE: &str = "report.txt";
pub const TRIALS_FILE: &str = "trials.txt";

/// A failed command: exit code plus one machine-parsable stderr line.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn validation(message: impl Display) -> Self {
        Self {
            code: EXIT_VALIDATION,
            kind: "validation",
            message: message.to_string(),
        }
    }

    pub fn line(&self) -> String {
        let msg: String = self
            .message
            .chars()
            .map(|c| if c == '\n' || c == '\t' { ' ' } else { c })
            .collect();
        format!("error\tkind={}\tcode={}\tmessage={msg}", self.kind, self.code)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Self::validation(e)
        } else {
            Self {
                code: EXIT_RUNTIME,
                kind: "runtime",
                message: e.to_string(),
            }
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::File {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Creates `dir` and refuses to clobber any of `outputs` unless forced.
fn prepare_out(dir: &Path, outputs: &[&str], force: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    if !force {
        if let Some(existing) = outputs.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(Failure::validation(format!(
                "{} already exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    Ok(())
}

fn open_corpus(dir: &Path, cfg: &RunConfig) -> Result<Corpus> {
    let corpus = Corpus::open(dir)?;
    let expected = corpus::config_hash(&cfg.corpus, cfg.seed);
    if corpus.manifest.config_hash != expected {
        return Err(Failure::validation(format!(
            "corpus at {} was generated with a different corpus config or seed",
            dir.display()
        )));
    }
    Ok(corpus)
}

fn report_meta(report: &mut Report, cfg: &RunConfig) {
    report.set("backend", eval::BACKEND);
    report.set("config_hash", cfg.hash_hex());
    report.set("p_target", cfg.eval.p_target);
    report.set("seed", cfg.seed);
    report.set("vad", cfg.eval.vad);
}

fn load_trials(path: Option<&PathBuf>, corpus: &Corpus, cfg: &RunConfig) -> Result<Vec<Trial>> {
    Ok(match path {
        Some(p) => eval::parse_trials(&read(p)?)?,
        None => eval::build_trials(&corpus.manifest, cfg.eval.trials_per_speaker, cfg.seed)?,
    })
}

pub fn run(g: &Global, cmd: Command) -> Result<()> {
    let cfg = load_config(g)?;
    match cmd {
        Command::GenCorpus { out } => gen_corpus(&cfg, &out, g.force),
        Command::Train {
            stage,
            corpus,
            init,
            ablation,
            out,
        } => train(&cfg, stage, &corpus, init.as_deref(), ablation, &out, g.force),
        Command::Evaluate {
            checkpoint,
            corpus,
            trials,
            condition,
            baseline,
            out,
        } => evaluate(&cfg, &checkpoint, &corpus, trials.as_ref(), condition, baseline, &out, g.force),
        Command::Extract {
            checkpoint,
            wav,
            baseline,
            no_vad,
            out,
        } => extract(&cfg, &checkpoint, &wav, baseline, !no_vad, out.as_deref()),
        Command::Ablate { corpus, systems, out } => ablate(&cfg, &corpus, &systems, &out, g.force),
        Command::Report { reports } => summarize(&reports),
    }
}

fn gen_corpus(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let manifest = corpus::write_corpus(&cfg.corpus, cfg.seed, out, force)?;
    write(&out.join(CONFIG_FILE), cfg.to_toml())?;
    println!("manifest\t{}", out.join(corpus::MANIFEST_FILE).display());
    println!("records\t{}", manifest.records.len());
    for split in Split::ALL {
        println!("{split}\t{}", manifest.count(split));
    }
    println!("config_hash\t{}", manifest.config_hash);
    Ok(())
}

fn train(
    cfg: &RunConfig,
    stage: Stage,
    corpus_dir: &Path,
    init: Option<&Path>,
    ablation: Option<System>,
    out: &Path,
    force: bool,
) -> Result<()> {
    let required = match stage {
        Stage::Pretrain1 => None,
        Stage::Pretrain2 => Some(Stage::Pretrain1),
        Stage::Finetune => Some(Stage::Pretrain2),
    };
    let init = match (required, init) {
        (None, Some(_)) => return Err(Failure::validation("pretrain1 starts from scratch; drop --init")),
        (None, None) => None,
        (Some(req), None) => {
            return Err(Failure::validation(format!(
                "{stage} requires a {req} checkpoint; pass --init"
            )))
        }
        (Some(_), Some(p)) => Some(Checkpoint::load(p)?),
    };
    if stage == Stage::Pretrain1 && ablation.is_some() {
        return Err(Failure::validation("--ablation applies to pretrain2 and finetune"));
    }
    prepare_out(out, &[CHECKPOINT_FILE, LOG_FILE, CONFIG_FILE], force)?;
    let corpus = open_corpus(corpus_dir, cfg)?;
    let data = TrainData::load(&corpus)?;
    let setup = cfg.setup();
    let mut log = TrainLog::default();
    let result = match (stage, init) {
        (Stage::Pretrain1, _) => trainer::run_pretrain1(&data, &setup, &mut log),
        (Stage::Pretrain2, Some(ckpt)) => {
            trainer::run_pretrain2(&data, &setup, ablation.unwrap_or(System::C), &ckpt, &mut log)
        }
        (Stage::Finetune, Some(ckpt)) => {
            trainer::run_finetune(&data, &setup, ablation.unwrap_or(System::D), &ckpt, &mut log)
        }
        _ => unreachable!("prerequisites checked above"),
    };
    write(&out.join(LOG_FILE), log.text())?;
    let result = result?;
    result.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write(&out.join(CONFIG_FILE), cfg.to_toml())?;
    if let Some(last) = log.lines.iter().rev().find(|l| l.starts_with("epoch")) {
        println!("{last}");
    }
    println!("checkpoint\t{}", out.join(CHECKPOINT_FILE).display());
    println!("content_hash\t{}", result.checkpoint.content_hash());
    Ok(())
}

fn system_label(ckpt: &Checkpoint, models: &Models, baseline: bool) -> String {
    if baseline || models.enhancer.is_none() {
        trainer::BASELINE.to_string()
    } else {
        System::of_checkpoint(ckpt).map_or_else(|| ckpt.stage.to_string(), |s| s.to_string())
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cfg: &RunConfig,
    ckpt_path: &Path,
    corpus_dir: &Path,
    trials_path: Option<&PathBuf>,
    condition: Option<Condition>,
    baseline: bool,
    out: &Path,
    force: bool,
) -> Result<()> {
    let conditions: Vec<Condition> = condition.map_or(Condition::ALL.to_vec(), |c| vec![c]);
    let mut outputs = vec![REPORT_FILE.to_string(), CONFIG_FILE.to_string(), TRIALS_FILE.to_string()];
    outputs.extend(conditions.iter().map(|c| format!("scores_{c}.txt")));
    prepare_out(out, &outputs.iter().map(String::as_str).collect::<Vec<_>>(), force)?;

    let ckpt = Checkpoint::load(ckpt_path)?;
    let setup = cfg.setup();
    let models = Models::from_checkpoint(&setup, &ckpt)?;
    let corpus = open_corpus(corpus_dir, cfg)?;
    let trials = load_trials(trials_path, &corpus, cfg)?;
    let pipeline = models.pipeline(setup.sigma, baseline);
    let label = system_label(&ckpt, &models, baseline);

    let mut report = Report::new();
    report_meta(&mut report, cfg);
    report.set("stage", ckpt.stage);
    for c in conditions {
        let (scores, entry) = eval::evaluate(&pipeline, &corpus, &trials, c, &cfg.eval, &label, &ckpt.content_hash())?;
        write(&out.join(format!("scores_{c}.txt")), eval::format_scores(&scores))?;
        report.entries.push(entry);
    }
    write(&out.join(TRIALS_FILE), eval::format_trials(&trials))?;
    write(&out.join(REPORT_FILE), report.to_text())?;
    write(&out.join(CONFIG_FILE), cfg.to_toml())?;
    print!("{}", report.to_text());
    Ok(())
}

fn extract(cfg: &RunConfig, ckpt_path: &Path, wav_path: &Path, baseline: bool, vad: bool, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let setup = cfg.setup();
    let models = Models::from_checkpoint(&setup, &ckpt)?;
    let audio = wav::read(wav_path)?;
    let embedding = eval::embed_waveform(&models.pipeline(setup.sigma, baseline), &audio, vad)?;
    let text: String = embedding.iter().map(|v| format!("{v}\n")).collect();
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn ablate(cfg: &RunConfig, corpus_dir: &Path, systems: &[System], out: &Path, force: bool) -> Result<()> {
    prepare_out(out, &[REPORT_FILE, LOG_FILE, CONFIG_FILE, TRIALS_FILE, "checkpoints"], force)?;
    let corpus = open_corpus(corpus_dir, cfg)?;
    let data = TrainData::load(&corpus)?;
    let trials = load_trials(None, &corpus, cfg)?;
    let mut log = TrainLog::default();
    let outcome = trainer::run_ablation(systems, &data, &corpus, &trials, &cfg.setup(), &cfg.eval, &mut log);
    write(&out.join(LOG_FILE), log.text())?;
    let mut outcome = outcome?;
    report_meta(&mut outcome.report, cfg);
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| io_failure(&ckpt_dir, e))?;
    for (name, ckpt) in &outcome.checkpoints {
        ckpt.save(&ckpt_dir.join(format!("{name}.nvl")))?;
    }
    for ((system, condition), scores) in &outcome.scores {
        write(&out.join(format!("scores_{system}_{condition}.txt")), eval::format_scores(scores))?;
    }
    write(&out.join(TRIALS_FILE), eval::format_trials(&trials))?;
    write(&out.join(REPORT_FILE), outcome.report.to_text())?;
    write(&out.join(CONFIG_FILE), cfg.to_toml())?;
    print!("{}", outcome.report.to_text());
    Ok(())
}

fn summarize(paths: &[PathBuf]) -> Result<()> {
    let mut rows: Vec<(String, Condition)> = Vec::new();
    let mut acc: BTreeMap<(String, Condition), Vec<(f64, f64)>> = BTreeMap::new();
    for p in paths {
        let report = Report::parse(&read(p)?)?;
        for e in report.entries {
            let key = (e.system.clone(), e.condition);
            if !acc.contains_key(&key) {
                rows.push(key.clone());
            }
            acc.entry(key).or_default().push((e.eer, e.min_dcf));
        }
    }
    println!("system\tcondition\tmean_eer_percent\tmean_min_dcf\truns");
    for key in rows {
        let v = &acc[&key];
        let n = v.len() as f64;
        let eer = v.iter().map(|x| x.0).sum::<f64>() / n;
        let dcf = v.iter().map(|x| x.1).sum::<f64>() / n;
        println!("{}\t{}\t{:.4}\t{:.4}\t{}", key.0, key.1, 100.0 * eer, dcf, v.len());
    }
    Ok(())
}
