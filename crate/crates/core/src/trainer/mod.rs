//! Staged training: embedder pretraining, enhancer pretraining against the
//! frozen embedder, and joint finetuning, plus the four ablation systems.

mod optim;
mod schedule;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{adadelta_step, sgd_step, Optimizer, OptimizerKind, ADADELTA_EPS, ADADELTA_RHO};
pub use schedule::{LrSchedule, ScheduleEvent};

use crate::corpus::{Corpus, Manifest, Split};
use crate::dsp::{self, ChannelStats, SigmaExponent, Spectrogram};
use crate::error::{Error, Result};
use crate::eval::{self, Condition, EvalConfig, Report, Trial};
use crate::losses::{self, LossConfig, LossValue};
use crate::models::{Checkpoint, Embedder, EmbedderConfig, Enhancer, EnhancerConfig, Pipeline, Stage};
use crate::seed::{self, tag};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Utterances per batch; paired stages count both halves of a pair.
    pub batch_size: usize,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub segment_frames: usize,
    pub decrease_threshold: f64,
    pub stop_after_halvings: u32,
    pub pretrain1: StageConfig,
    pub pretrain2: StageConfig,
    pub finetune: StageConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            segment_frames: 300,
            decrease_threshold: 0.01,
            stop_after_halvings: 2,
            pretrain1: StageConfig {
                optimizer: OptimizerKind::Sgd,
                lr: 0.2,
                batch_size: 512,
                max_epochs: 100,
            },
            pretrain2: StageConfig {
                optimizer: OptimizerKind::Adadelta,
                lr: 0.3,
                batch_size: 128,
                max_epochs: 100,
            },
            finetune: StageConfig {
                optimizer: OptimizerKind::Adadelta,
                lr: 1e-4,
                batch_size: 128,
                max_epochs: 100,
            },
        }
    }
}

impl TrainerConfig {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Pretrain1 => &self.pretrain1,
            Stage::Pretrain2 => &self.pretrain2,
            Stage::Finetune => &self.finetune,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.segment_frames == 0 {
            bad.push("trainer.segment_frames: must be positive".to_string());
        }
        if !self.decrease_threshold.is_finite() {
            bad.push("trainer.decrease_threshold: must be finite".into());
        }
        if self.stop_after_halvings == 0 {
            bad.push("trainer.stop_after_halvings: must be positive".into());
        }
        for stage in Stage::ALL {
            let s = self.stage(stage);
            if !(s.lr >= 0.0 && s.lr.is_finite()) {
                bad.push(format!("trainer.{stage}.lr: must be finite and non-negative"));
            }
            if s.batch_size == 0 || (stage != Stage::Pretrain1 && s.batch_size % 2 != 0) {
                bad.push(format!("trainer.{stage}.batch_size: must be positive (even for paired stages)"));
            }
            if s.max_epochs == 0 {
                bad.push(format!("trainer.{stage}.max_epochs: must be positive"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::validation("trainer", bad.join("; ")))
        }
    }
}

/// Ablation system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum System {
    /// Enhancer trained with CE on the noisy branch only.
    A,
    /// Enhancer trained with the perceptual loss against a detached clean
    /// reference that bypasses the enhancer.
    B,
    /// Enhancer trained with CE on both branches plus the symmetric
    /// perceptual loss; separate training only.
    C,
    /// As C, followed by joint finetuning.
    D,
}

impl System {
    pub const ALL: [System; 4] = [System::A, System::B, System::C, System::D];

    pub fn as_str(self) -> &'static str {
        match self {
            System::A => "a",
            System::B => "b",
            System::C => "c",
            System::D => "d",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }

    pub fn joint(self) -> bool {
        self == System::D
    }

    /// The system a pretrain2 or finetune checkpoint was trained as.
    pub fn of_checkpoint(ckpt: &Checkpoint) -> Option<System> {
        let code = ckpt.get("schedule.system")?.item()?;
        System::ALL.into_iter().find(|s| s.code() as f64 == code)
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation system {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Embedder,
    Enhancer,
    Both,
}

/// What a stage reads, optimizes and trains.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub system: Option<System>,
    pub splits: Vec<Split>,
    pub paired: bool,
    pub losses: Vec<&'static str>,
    pub trainable: Trainable,
    pub config: StageConfig,
}

impl StagePlan {
    pub fn new(stage: Stage, system: Option<System>, cfg: &TrainerConfig) -> Result<Self> {
        let config = cfg.stage(stage).clone();
        let noisy = vec![Split::TrainNoisy, Split::TrainNoisyAug];
        let plan = match (stage, system) {
            (Stage::Pretrain1, None) => Self {
                stage,
                system,
                splits: vec![Split::TrainCleanAug],
                paired: false,
                losses: vec!["ce"],
                trainable: Trainable::Embedder,
                config,
            },
            (Stage::Pretrain2, Some(sys)) => Self {
                stage,
                system,
                splits: noisy,
                paired: true,
                losses: match sys {
                    System::A => vec!["ce_noisy"],
                    System::B => vec!["pcptl"],
                    System::C | System::D => vec!["ce_noisy", "ce_clean", "pcptl"],
                },
                trainable: Trainable::Enhancer,
                config,
            },
            (Stage::Finetune, Some(sys)) if sys.joint() => Self {
                stage,
                system,
                splits: noisy,
                paired: true,
                losses: vec!["ce_noisy", "ce_clean", "pcptl"],
                trainable: Trainable::Both,
                config,
            },
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "no {stage} stage for system {}",
                    system.map_or("-", System::as_str)
                )))
            }
        };
        Ok(plan)
    }

    fn seed_path(&self) -> [u64; 2] {
        let stage = match self.stage {
            Stage::Pretrain1 => 1,
            Stage::Pretrain2 => 2,
            Stage::Finetune => 3,
        };
        [stage, self.system.map_or(0, System::code)]
    }
}

/// Everything a training run is parameterized by.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub trainer: TrainerConfig,
    pub embedder: EmbedderConfig,
    pub enhancer: EnhancerConfig,
    pub losses: LossConfig,
    pub sigma: SigmaExponent,
    pub seed: u64,
    pub config_hash: [u8; 32],
}

/// Training features and labels.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub manifest: Manifest,
    pub features: HashMap<String, Spectrogram>,
    /// Speaker id → class index.
    pub labels: HashMap<u32, usize>,
}

impl TrainData {
    pub fn new(manifest: Manifest, features: HashMap<String, Spectrogram>) -> Result<Self> {
        let labels: HashMap<u32, usize> = manifest
            .train_speakers()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        if labels.len() < 2 {
            return Err(Error::validation("manifest", "need at least 2 training speakers"));
        }
        for r in manifest.records.iter().filter(|r| r.split.is_train()) {
            if !features.contains_key(&r.utt_id) {
                return Err(Error::InvalidArgument(format!("no features for {}", r.utt_id)));
            }
        }
        Ok(Self {
            manifest,
            features,
            labels,
        })
    }

    /// Log-Mel features of every training utterance of `corpus`.
    pub fn load(corpus: &Corpus) -> Result<Self> {
        let features = corpus.features(|r| r.split.is_train())?;
        Self::new(corpus.manifest.clone(), features)
    }

    pub fn n_speakers(&self) -> usize {
        self.labels.len()
    }

    /// Channel statistics of the noisy and clean training splits.
    pub fn channel_stats(&self) -> Result<(ChannelStats, ChannelStats)> {
        let pick = |split: Split| -> Vec<&Spectrogram> {
            self.manifest
                .records_in(split)
                .map(|r| &self.features[&r.utt_id])
                .collect()
        };
        Ok((
            dsp::compute_channel_stats(pick(Split::TrainNoisy))?,
            dsp::compute_channel_stats(pick(Split::TrainClean))?,
        ))
    }

    fn items(&self, plan: &StagePlan) -> Result<Vec<Item>> {
        let by_id = self.manifest.by_id();
        let mut items = Vec::new();
        for r in self.manifest.records.iter().filter(|r| plan.splits.contains(&r.split)) {
            let paired = if plan.paired {
                let p = r.paired_clean_id.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("{} has no clean partner", r.utt_id))
                })?;
                let partner = by_id.get(p.as_str()).ok_or_else(|| {
                    Error::InvalidArgument(format!("{}: partner {p} missing", r.utt_id))
                })?;
                if partner.speaker_id != r.speaker_id {
                    return Err(Error::InvalidArgument(format!(
                        "{}: partner {p} belongs to another speaker",
                        r.utt_id
                    )));
                }
                Some(p.clone())
            } else {
                None
            };
            items.push(Item {
                utt: r.utt_id.clone(),
                partner: paired,
                label: self.labels[&r.speaker_id],
            });
        }
        if items.is_empty() {
            return Err(Error::validation("manifest", format!("no utterances for {}", plan.stage)));
        }
        Ok(items)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Item {
    utt: String,
    partner: Option<String>,
    label: usize,
}

/// One training example of a batch: a window of `utt` and, for paired
/// stages, the same window of its clean partner.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub utt: String,
    pub partner: Option<String>,
    pub label: usize,
    pub offset: usize,
    pub len: usize,
}

/// The batches of one epoch, in training order.
pub fn epoch_batches(plan: &StagePlan, setup: &Setup, data: &TrainData, epoch: usize) -> Result<Vec<Vec<Segment>>> {
    let mut order = data.items(plan)?;
    let path = plan.seed_path();
    order.shuffle(&mut seed::rng(setup.seed, &[tag::SHUFFLE, path[0], path[1], epoch as u64]));
    let per_batch = if plan.paired {
        plan.config.batch_size / 2
    } else {
        plan.config.batch_size
    };
    let seg = setup.trainer.segment_frames;
    let segments = order.into_iter().enumerate().map(|(i, item)| {
        let mut rng = seed::rng(setup.seed, &[tag::SEGMENT, path[0], path[1], epoch as u64, i as u64]);
        let x = data.features[&item.utt].n_frames();
        let frames = item
            .partner
            .as_ref()
            .map_or(x, |p| x.min(data.features[p].n_frames()));
        Segment {
            offset: segment_offset(frames, seg, &mut rng),
            len: seg.min(frames),
            utt: item.utt,
            partner: item.partner,
            label: item.label,
        }
    });
    let segments: Vec<Segment> = segments.collect();
    Ok(segments.chunks(per_batch).map(<[Segment]>::to_vec).collect())
}

/// Models restored from (or produced by) a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub embedder: Embedder,
    pub enhancer: Option<Enhancer>,
    /// Noisy and clean channel statistics.
    pub stats: Option<(ChannelStats, ChannelStats)>,
}

fn put_stats(ckpt: &mut Checkpoint, (noisy, clean): &(ChannelStats, ChannelStats)) {
    for (name, s) in [("noisy", noisy), ("clean", clean)] {
        ckpt.insert(format!("stats.{name}.mu"), Tensor::vector(s.mu.clone()));
        ckpt.insert(format!("stats.{name}.sigma"), Tensor::vector(s.sigma.clone()));
    }
}

fn get_stats(ckpt: &Checkpoint) -> Result<Option<(ChannelStats, ChannelStats)>> {
    if !ckpt.has_prefix("stats.") {
        return Ok(None);
    }
    let one = |name: &str| -> Result<ChannelStats> {
        let get = |k: &str| {
            ckpt.get(&format!("stats.{name}.{k}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::format("checkpoint", format!("missing stats.{name}.{k}")))
        };
        ChannelStats::new(get("mu")?, get("sigma")?)
    };
    Ok(Some((one("noisy")?, one("clean")?)))
}

impl Models {
    /// Rebuilds the models; the speaker count comes from the classifier shape.
    pub fn from_checkpoint(setup: &Setup, ckpt: &Checkpoint) -> Result<Self> {
        let n_speakers = ckpt
            .get("embedder.classifier.b")
            .map(|t| t.numel())
            .ok_or_else(|| Error::format("checkpoint", "no embedder parameters"))?;
        let mut embedder = Embedder::new(setup.embedder.clone(), n_speakers, 0)?;
        ckpt.load_params(embedder.params_mut())?;
        let enhancer = if ckpt.has_prefix("enhancer.") {
            let mut e = Enhancer::new(setup.enhancer.clone(), 0)?;
            ckpt.load_params(e.params_mut())?;
            Some(e)
        } else {
            None
        };
        let stats = get_stats(ckpt)?;
        if enhancer.is_some() && stats.is_none() {
            return Err(Error::format("checkpoint", "enhancer without channel statistics"));
        }
        Ok(Self {
            embedder,
            enhancer,
            stats,
        })
    }

    /// Full chain when an enhancer is present, instance norm → embedder
    /// otherwise (or when `baseline` is set).
    pub fn pipeline(&self, sigma: SigmaExponent, baseline: bool) -> Pipeline<'_> {
        static IDENTITY: std::sync::OnceLock<ChannelStats> = std::sync::OnceLock::new();
        match (&self.enhancer, &self.stats, baseline) {
            (Some(e), Some((noisy, clean)), false) => Pipeline {
                enhancer: Some(e),
                embedder: &self.embedder,
                noisy_stats: noisy,
                clean_stats: clean,
                sigma,
            },
            _ => Pipeline::baseline(&self.embedder, IDENTITY.get_or_init(ChannelStats::identity), sigma),
        }
    }
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossValue,
    pub event: ScheduleEvent,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub models: Models,
    pub epochs: Vec<EpochSummary>,
    pub steps: u64,
}

/// Line-delimited training records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub lines: Vec<String>,
}

impl TrainLog {
    fn record(&mut self, kind: &str, plan: &StagePlan, fields: &[(&str, String)], loss: &LossValue) {
        let mut line = format!(
            "{kind}\tstage={}\tsystem={}",
            plan.stage,
            plan.system.map_or("-", System::as_str)
        );
        for (k, v) in fields {
            line.push_str(&format!("\t{k}={v}"));
        }
        line.push_str(&format!("\ttotal={}", loss.total));
        for key in ["pcptl", "ce_noisy", "ce_clean"] {
            match loss.get(key) {
                Some(v) => line.push_str(&format!("\t{key}={v}")),
                None => line.push_str(&format!("\t{key}=-")),
            }
        }
        self.lines.push(line);
    }

    pub fn text(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

/// Random `len`-frame window start, shared by both members of a pair.
fn segment_offset(frames: usize, len: usize, rng: &mut impl Rng) -> usize {
    if frames <= len {
        0
    } else {
        rng.gen_range(0..=frames - len)
    }
}

/// Per-item loss value, components and gradients for the trainable sets.
struct ItemGrad {
    loss: LossValue,
    enhancer: Option<Vec<Vec<f64>>>,
    embedder: Option<Vec<Vec<f64>>>,
}

struct StageModels<'m> {
    embedder: &'m Embedder,
    enhancer: Option<&'m Enhancer>,
    stats: Option<&'m (ChannelStats, ChannelStats)>,
}

fn item_gradient(
    plan: &StagePlan,
    setup: &Setup,
    m: &StageModels<'_>,
    noisy: &Spectrogram,
    clean: Option<&Spectrogram>,
    label: usize,
) -> Result<ItemGrad> {
    let g = Graph::new();
    let train_emb = matches!(plan.trainable, Trainable::Embedder | Trainable::Both);
    let train_enh = matches!(plan.trainable, Trainable::Enhancer | Trainable::Both);
    let pm = m.embedder.params().bind(&g, train_emb);
    let tensor = |s: &Spectrogram| g.leaf(&s.to_tensor());

    let (total, loss, pe): (Var<'_>, LossValue, _) = match plan.system {
        None => {
            let x = dsp::graph::instance_normalize(tensor(noisy), setup.sigma)?;
            let out = m.embedder.forward(&pm, x)?;
            let ce = losses::cross_entropy(out.logits, label)?;
            let v = ce.item()?;
            (ce, LossValue::new(v).with("ce_noisy", v), None)
        }
        Some(sys) => {
            let enh = m.enhancer.expect("paired stages carry an enhancer");
            let (noisy_stats, clean_stats) = m.stats.expect("paired stages carry statistics");
            let clean = clean.expect("paired stages carry a clean partner");
            let pe = enh.params().bind(&g, train_enh);
            let pipe = Pipeline {
                enhancer: Some(enh),
                embedder: m.embedder,
                noisy_stats,
                clean_stats,
                sigma: setup.sigma,
            };
            let out_n = pipe.forward(Some(&pe), &pm, tensor(noisy))?;
            let ce_n = losses::cross_entropy(out_n.embed.logits, label)?;
            let (total, loss) = match sys {
                System::A => {
                    let v = ce_n.item()?;
                    (ce_n, LossValue::new(v).with("ce_noisy", v))
                }
                System::B => {
                    let reference = Pipeline::baseline(m.embedder, noisy_stats, setup.sigma)
                        .forward(None, &pm, tensor(clean))?;
                    let p = losses::perceptual_original(&out_n.embed.taps, &reference.embed.taps)?;
                    let v = p.item()?;
                    (p, LossValue::new(v).with("pcptl", v))
                }
                System::C | System::D => {
                    let out_c = pipe.forward(Some(&pe), &pm, tensor(clean))?;
                    let ce_c = losses::cross_entropy(out_c.embed.logits, label)?;
                    let terms = losses::perceptual_terms(
                        &out_n.embed.taps,
                        &out_c.embed.taps,
                        setup.losses.layer_normalized,
                    )?;
                    let mut p = terms[0];
                    for t in &terms[1..] {
                        p = p.add(t)?;
                    }
                    let ce = ce_n.add(&ce_c)?.scale(0.5)?;
                    let total = losses::combined(p, ce, setup.losses.lambda)?;
                    let loss = LossValue::new(total.item()?)
                        .with("pcptl", p.item()?)
                        .with("ce_noisy", ce_n.item()?)
                        .with("ce_clean", ce_c.item()?);
                    (total, loss)
                }
            };
            (total, loss, Some(pe))
        }
    };
    if !loss.total.is_finite() {
        return Ok(ItemGrad {
            loss,
            enhancer: None,
            embedder: None,
        });
    }
    g.backward(total)?;
    Ok(ItemGrad {
        loss,
        enhancer: if train_enh { pe.map(|p| p.grads()) } else { None },
        embedder: train_emb.then(|| pm.grads()),
    })
}

fn accumulate(sum: &mut Option<Vec<Vec<f64>>>, g: Option<Vec<Vec<f64>>>) {
    let Some(g) = g else { return };
    match sum {
        None => *sum = Some(g),
        Some(s) => {
            for (a, b) in s.iter_mut().zip(&g) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }
}

fn scale_grads(g: &mut [Vec<f64>], c: f64) {
    g.iter_mut().flatten().for_each(|x| *x *= c);
}

fn mean_loss(values: &[LossValue]) -> LossValue {
    let n = values.len() as f64;
    let mut out = LossValue::new(values.iter().map(|v| v.total).sum::<f64>() / n);
    let keys: Vec<String> = values[0].components.keys().cloned().collect();
    for k in keys {
        let s: f64 = values.iter().map(|v| v.components[&k]).sum();
        out.components.insert(k, s / n);
    }
    out
}

/// Runs the epoch loop of one stage, updating the models in place.
fn train_stage(
    plan: &StagePlan,
    setup: &Setup,
    data: &TrainData,
    embedder: &mut Embedder,
    mut enhancer: Option<&mut Enhancer>,
    stats: Option<&(ChannelStats, ChannelStats)>,
    log: &mut TrainLog,
) -> Result<(Vec<EpochSummary>, u64, LrSchedule, Option<Optimizer>, Option<Optimizer>)> {
    let cfg = &plan.config;
    let mut schedule = LrSchedule::new(cfg.lr, setup.trainer.decrease_threshold, setup.trainer.stop_after_halvings);
    let train_emb = matches!(plan.trainable, Trainable::Embedder | Trainable::Both);
    let train_enh = matches!(plan.trainable, Trainable::Enhancer | Trainable::Both);
    let mut opt_emb = train_emb.then(|| Optimizer::new(cfg.optimizer, embedder.params()));
    let mut opt_enh = match (&enhancer, train_enh) {
        (Some(e), true) => Some(Optimizer::new(cfg.optimizer, e.params())),
        _ => None,
    };
    let frozen = (!train_emb).then(|| embedder.params().checksum());
    let mut epochs = Vec::new();
    let mut step: u64 = 0;

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        let batches = epoch_batches(plan, setup, data, epoch)?;
        let mut epoch_losses = Vec::new();
        for batch in &batches {
            let models = StageModels {
                embedder,
                enhancer: enhancer.as_deref(),
                stats,
            };
            let results: Vec<ItemGrad> = batch
                .par_iter()
                .map(|sg| {
                    let xs = data.features[&sg.utt].segment(sg.offset, sg.len)?;
                    let cs = sg
                        .partner
                        .as_ref()
                        .map(|p| data.features[p].segment(sg.offset, sg.len))
                        .transpose()?;
                    item_gradient(plan, setup, &models, &xs, cs.as_ref(), sg.label)
                })
                .collect::<Result<_>>()?;
            let mut g_emb = None;
            let mut g_enh = None;
            let mut batch_losses = Vec::with_capacity(results.len());
            for r in results {
                if !r.loss.total.is_finite() {
                    return Err(Error::Diverged { what: "loss", step });
                }
                accumulate(&mut g_emb, r.embedder);
                accumulate(&mut g_enh, r.enhancer);
                batch_losses.push(r.loss);
            }
            let inv = 1.0 / batch.len() as f64;
            if let (Some(opt), Some(mut g)) = (opt_emb.as_mut(), g_emb) {
                scale_grads(&mut g, inv);
                opt.step(embedder.params_mut(), &g, lr, step)?;
            }
            if let (Some(opt), Some(mut g), Some(e)) = (opt_enh.as_mut(), g_enh, enhancer.as_deref_mut()) {
                scale_grads(&mut g, inv);
                opt.step(e.params_mut(), &g, lr, step)?;
            }
            let batch_loss = mean_loss(&batch_losses);
            log.record(
                "step",
                plan,
                &[
                    ("epoch", epoch.to_string()),
                    ("step", step.to_string()),
                    ("lr", lr.to_string()),
                ],
                &batch_loss,
            );
            epoch_losses.extend(batch_losses);
            step += 1;
        }
        let epoch_loss = mean_loss(&epoch_losses);
        let event = schedule.observe(epoch_loss.total);
        log.record(
            "epoch",
            plan,
            &[
                ("epoch", epoch.to_string()),
                ("lr", lr.to_string()),
                ("halvings", schedule.halvings().to_string()),
            ],
            &epoch_loss,
        );
        epochs.push(EpochSummary {
            epoch,
            lr,
            loss: epoch_loss,
            event,
        });
        if event == ScheduleEvent::Stop {
            break;
        }
    }
    if let Some(sum) = frozen {
        if embedder.params().checksum() != sum {
            return Err(Error::Integrity {
                what: "frozen embedder",
                detail: format!("parameters changed during {}", plan.stage),
            });
        }
    }
    Ok((epochs, step, schedule, opt_emb, opt_enh))
}

fn stage_checkpoint(
    plan: &StagePlan,
    setup: &Setup,
    models: &Models,
    steps: u64,
    schedule: &LrSchedule,
    opts: (Option<Optimizer>, Option<Optimizer>),
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(setup.config_hash, plan.stage, steps);
    ckpt.insert_params(models.embedder.params());
    if let Some(e) = &models.enhancer {
        ckpt.insert_params(e.params());
    }
    if let Some(s) = &models.stats {
        put_stats(&mut ckpt, s);
    }
    if let Some(sys) = plan.system {
        ckpt.insert("schedule.system", Tensor::scalar(sys.code() as f64));
    }
    ckpt.insert("schedule.lr", Tensor::scalar(schedule.lr()));
    ckpt.insert("schedule.halvings", Tensor::scalar(schedule.halvings() as f64));
    if let Some(o) = &opts.0 {
        o.save(models.embedder.params(), "optim", &mut ckpt);
    }
    if let (Some(o), Some(e)) = (&opts.1, &models.enhancer) {
        o.save(e.params(), "optim", &mut ckpt);
    }
    ckpt
}

fn require_stage(ckpt: &Checkpoint, stage: Stage, needed_by: Stage) -> Result<()> {
    if ckpt.stage != stage {
        return Err(Error::InvalidArgument(format!(
            "{needed_by} requires a {stage} checkpoint, got {}",
            ckpt.stage
        )));
    }
    Ok(())
}

pub fn run_pretrain1(data: &TrainData, setup: &Setup, log: &mut TrainLog) -> Result<StageResult> {
    let plan = StagePlan::new(Stage::Pretrain1, None, &setup.trainer)?;
    let mut embedder = Embedder::new(setup.embedder.clone(), data.n_speakers(), setup.seed)?;
    let (epochs, steps, schedule, opt_emb, _) = train_stage(&plan, setup, data, &mut embedder, None, None, log)?;
    let models = Models {
        embedder,
        enhancer: None,
        stats: None,
    };
    let checkpoint = stage_checkpoint(&plan, setup, &models, steps, &schedule, (opt_emb, None));
    Ok(StageResult {
        checkpoint,
        models,
        epochs,
        steps,
    })
}

/// Trains a fresh enhancer against the frozen pretrain1 embedder.
pub fn run_pretrain2(
    data: &TrainData,
    setup: &Setup,
    system: System,
    embedder_ckpt: &Checkpoint,
    log: &mut TrainLog,
) -> Result<StageResult> {
    require_stage(embedder_ckpt, Stage::Pretrain1, Stage::Pretrain2)?;
    let plan = StagePlan::new(Stage::Pretrain2, Some(system), &setup.trainer)?;
    let mut embedder = Models::from_checkpoint(setup, embedder_ckpt)?.embedder;
    if embedder.n_speakers() != data.n_speakers() {
        return Err(Error::InvalidArgument(format!(
            "embedder has {} classes, corpus has {} training speakers",
            embedder.n_speakers(),
            data.n_speakers()
        )));
    }
    let mut enhancer = Enhancer::new(setup.enhancer.clone(), seed::derive(setup.seed, &[system.code()]))?;
    let stats = data.channel_stats()?;
    let (epochs, steps, schedule, _, opt_enh) = train_stage(
        &plan,
        setup,
        data,
        &mut embedder,
        Some(&mut enhancer),
        Some(&stats),
        log,
    )?;
    let models = Models {
        embedder,
        enhancer: Some(enhancer),
        stats: Some(stats),
    };
    let checkpoint = stage_checkpoint(&plan, setup, &models, steps, &schedule, (None, opt_enh));
    Ok(StageResult {
        checkpoint,
        models,
        epochs,
        steps,
    })
}

/// Joint training of both modules, starting from a pretrain2 checkpoint.
pub fn run_finetune(data: &TrainData, setup: &Setup, system: System, ckpt: &Checkpoint, log: &mut TrainLog) -> Result<StageResult> {
    require_stage(ckpt, Stage::Pretrain2, Stage::Finetune)?;
    let plan = StagePlan::new(Stage::Finetune, Some(system), &setup.trainer)?;
    let Models {
        mut embedder,
        enhancer,
        stats,
    } = Models::from_checkpoint(setup, ckpt)?;
    let mut enhancer = enhancer.ok_or_else(|| Error::format("checkpoint", "pretrain2 checkpoint without enhancer"))?;
    let stats = stats.expect("checked by from_checkpoint");
    let (epochs, steps, schedule, opt_emb, opt_enh) = train_stage(
        &plan,
        setup,
        data,
        &mut embedder,
        Some(&mut enhancer),
        Some(&stats),
        log,
    )?;
    let models = Models {
        embedder,
        enhancer: Some(enhancer),
        stats: Some(stats),
    };
    let checkpoint = stage_checkpoint(
        &plan,
        setup,
        &models,
        ckpt.step + steps,
        &schedule,
        (opt_emb, opt_enh),
    );
    Ok(StageResult {
        checkpoint,
        models,
        epochs,
        steps,
    })
}

/// Name of the enhancement-free reference system in ablation reports.
pub const BASELINE: &str = "baseline";

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub report: Report,
    /// Keyed by `pretrain1` and system name.
    pub checkpoints: BTreeMap<String, Checkpoint>,
    pub scores: BTreeMap<(String, Condition), Vec<eval::ScoredTrial>>,
}

/// Pretrains the embedder once, then trains and evaluates every requested
/// system plus the enhancement-free baseline on both test conditions.
/// System `d` reuses the pretrain2 result of `c` when both are requested.
pub fn run_ablation(
    systems: &[System],
    data: &TrainData,
    corpus: &Corpus,
    trials: &[Trial],
    setup: &Setup,
    eval_cfg: &EvalConfig,
    log: &mut TrainLog,
) -> Result<AblationOutcome> {
    let p1 = run_pretrain1(data, setup, log)?;
    let mut report = Report::new();
    let mut checkpoints = BTreeMap::new();
    let mut scores = BTreeMap::new();
    let mut evaluate = |name: &str, models: &Models, ckpt: &Checkpoint, report: &mut Report| -> Result<()> {
        let pipeline = models.pipeline(setup.sigma, name == BASELINE);
        let hash = ckpt.content_hash();
        for condition in Condition::ALL {
            let (s, entry) = eval::evaluate(&pipeline, corpus, trials, condition, eval_cfg, name, &hash)?;
            scores.insert((name.to_string(), condition), s);
            report.entries.push(entry);
        }
        Ok(())
    };
    evaluate(BASELINE, &p1.models, &p1.checkpoint, &mut report)?;

    let mut pretrained: BTreeMap<System, StageResult> = BTreeMap::new();
    for &sys in systems {
        let trained = if sys.joint() {
            let base = match pretrained.get(&System::C) {
                Some(c) => c.checkpoint.clone(),
                None => run_pretrain2(data, setup, sys, &p1.checkpoint, log)?.checkpoint,
            };
            run_finetune(data, setup, sys, &base, log)?
        } else {
            run_pretrain2(data, setup, sys, &p1.checkpoint, log)?
        };
        evaluate(sys.as_str(), &trained.models, &trained.checkpoint, &mut report)?;
        checkpoints.insert(sys.as_str().to_string(), trained.checkpoint.clone());
        pretrained.insert(sys, trained);
    }
    checkpoints.insert(Stage::Pretrain1.as_str().to_string(), p1.checkpoint);
    Ok(AblationOutcome {
        report,
        checkpoints,
        scores,
    })
}
