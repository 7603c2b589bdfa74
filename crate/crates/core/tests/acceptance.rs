//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 5 and 6 train the desk preset on three seeds and take
//! several minutes on one core.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{brute_eer, brute_min_dcf, grad_suite, tiny_config, train_data, FD_TOL};
use nvl_core::config::RunConfig;
use nvl_core::corpus::{build_corpus, measured_snr, write_corpus, Corpus, Manifest, Split};
use nvl_core::dsp::{
    channel_inverse, channel_normalize, instance_normalize, ChannelStats, SigmaExponent, Spectrogram, N_MELS,
};
use nvl_core::eval::{build_trials, eer, min_dcf, Condition, Report, ScoreSet};
use nvl_core::losses::{combined, cross_entropy, perceptual_modified, perceptual_original};
use nvl_core::models::{Embedder, EmbedderConfig, Enhancer, EnhancerConfig, Pipeline, Stage, TapSet};
use nvl_core::seed;
use nvl_core::tensor::Graph;
use nvl_core::trainer::{
    epoch_batches, run_ablation, run_pretrain1, run_pretrain2, AblationOutcome, LrSchedule, ScheduleEvent,
    StagePlan, System, TrainData, TrainLog, BASELINE,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut count = 0;
    for s in 0..3 {
        for (name, err) in grad_suite::all(s) {
            count += 1;
            if !(err < FD_TOL) {
                return Err(format!("seed {s}: {name} rel err {err:.3e}"));
            }
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("suite took {elapsed:.1?}"))?;
    Ok(format!("{count} checks over 3 seeds, max rel err {:.2e} ({}), {elapsed:.1?}", worst.1, worst.0))
}

fn random_spectrogram(rng: &mut impl Rng, frames: usize) -> Spectrogram {
    Spectrogram::new(frames, (0..frames * N_MELS).map(|_| rng.gen_range(-25.0..5.0)).collect()).unwrap()
}

fn normalization() -> Outcome {
    let mut rng = seed::rng(2, &[]);
    let (mut round, mut mean) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let frames = rng.gen_range(2..80);
        let s = random_spectrogram(&mut rng, frames);
        let stats = ChannelStats::new(
            (0..N_MELS).map(|_| rng.gen_range(-20.0..5.0)).collect(),
            (0..N_MELS).map(|_| rng.gen_range(0.05..10.0)).collect(),
        )
        .unwrap();
        for p in [SigmaExponent::One, SigmaExponent::Two] {
            let back = channel_inverse(&channel_normalize(&s, &stats, p), &stats, p);
            for (a, b) in s.data().iter().zip(back.data()) {
                round = round.max((a - b).abs());
            }
            for m in instance_normalize(&s, p).unwrap().bin_means() {
                mean = mean.max(m.abs());
            }
        }
    }
    ensure(round <= 1e-10, || format!("round trip error {round:.2e}"))?;
    ensure(mean < 1e-12, || format!("instance-norm bin mean {mean:.2e}"))?;
    Ok(format!("200 inputs x 2 modes: round trip {round:.1e}, |bin mean| {mean:.1e}"))
}

fn losses() -> Outcome {
    let g = Graph::new();
    let mut rng = seed::rng(3, &[]);
    let taps = |rng: &mut _| {
        TapSet::new(
            [[6, 5], [4, 5], [2, 4], [2, 4], [2, 6], [1, 5]]
                .iter()
                .map(|s| g.leaf(&common::random_tensor(s, rng, -2.0, 2.0)))
                .collect(),
        )
        .unwrap()
    };
    let a = taps(&mut rng);
    let same = perceptual_modified(&a, &a).unwrap().item().unwrap();
    ensure(same == 0.0, || format!("perceptual on identical taps = {same}"))?;

    for n in [2usize, 20, 1000] {
        let ce = cross_entropy(g.constant(vec![1, n], vec![0.7; n]).unwrap(), 1).unwrap().item().unwrap();
        ensure((ce - (n as f64).ln()).abs() < 1e-12, || format!("CE over {n} uniform logits = {ce}"))?;
    }
    let c = combined(g.scalar(1.3), g.scalar(2.9), 0.5).unwrap().item().unwrap();
    ensure((c - 2.1).abs() < 1e-15, || format!("0.5*1.3 + 0.5*2.9 gave {c}"))?;

    let emb = Embedder::new(
        EmbedderConfig {
            contexts: vec![vec![-1, 0, 1], vec![-1, 0, 1], vec![0], vec![0], vec![0]],
            channels: vec![6, 6, 5, 5, 8],
            embedding_dim: 6,
            fc2_dim: 5,
        },
        3,
        1,
    )
    .unwrap();
    let enh = Enhancer::new(EnhancerConfig { layers: 1, hidden: 4 }, 2).unwrap();
    let stats = ChannelStats::new(vec![-1.0; N_MELS], vec![1.5; N_MELS]).unwrap();
    let pipe = Pipeline {
        enhancer: Some(&enh),
        embedder: &emb,
        noisy_stats: &stats,
        clean_stats: &stats,
        sigma: SigmaExponent::One,
    };
    let noisy = common::random_tensor(&[12, N_MELS], &mut rng, -4.0, 2.0);
    let clean = common::random_tensor(&[12, N_MELS], &mut rng, -4.0, 2.0).with_requires_grad(true);
    let g = Graph::new();
    let pe = enh.params().bind(&g, true);
    let pm = emb.params().bind(&g, false);
    let xc = g.leaf(&clean);
    let out = pipe.forward(Some(&pe), &pm, g.leaf(&noisy)).unwrap();
    let reference = Pipeline::baseline(&emb, &stats, SigmaExponent::One).forward(None, &pm, xc).unwrap();
    g.backward(perceptual_original(&out.embed.taps, &reference.embed.taps).unwrap()).unwrap();
    ensure(xc.grad().is_none(), || "system b clean branch received a gradient".into())?;
    ensure(pe.grads().iter().flatten().any(|v| *v != 0.0), || "system b enhancer got no gradient".into())?;
    Ok("zero on identical taps, CE = ln C, lambda 0.5 arithmetic, system b clean branch detached".into())
}

fn metrics() -> Outcome {
    let mut rng = seed::rng(4, &[]);
    let mut largest = 0;
    for i in 0..200 {
        let n_t = rng.gen_range(1..500);
        let n_n = rng.gen_range(1..=1000 - n_t);
        largest = largest.max(n_t + n_n);
        let mut draw = |n: usize, shift: i32| -> Vec<f64> {
            (0..n).map(|_| (rng.gen_range(-300..300) + shift) as f64 / 60.0).collect()
        };
        let t = draw(n_t, 40);
        let n = draw(n_n, 0);
        let s = ScoreSet::new(t.clone(), n.clone()).unwrap();
        let (e, d) = (eer(&s), min_dcf(&s, 0.05).unwrap());
        let (be, bd) = (brute_eer(&t, &n), brute_min_dcf(&t, &n, 0.05));
        ensure((e - be).abs() < 1e-12 && (d - bd).abs() < 1e-12, || {
            format!("set {i}: eer {e} vs {be}, min_dcf {d} vs {bd}")
        })?;
        let f = |v: &f64| (v / 2.0).exp() * 3.0 - 1.0;
        let m = ScoreSet::new(t.iter().map(f).collect(), n.iter().map(f).collect()).unwrap();
        ensure(eer(&m) == e && min_dcf(&m, 0.05).unwrap() == d, || {
            format!("set {i}: monotone transform changed the metrics")
        })?;
    }
    Ok(format!("200 sets up to {largest} trials match the sweep; monotone invariance holds"))
}

fn protocol() -> Outcome {
    let mut s = LrSchedule::new(0.3, 0.01, 2);
    let losses = [2.0, 1.5, 1.49, 1.2, 1.19, 1.189];
    use ScheduleEvent::*;
    let expected = [
        (Continue, 0.3),
        (Continue, 0.3),
        (Halved, 0.15),
        (Continue, 0.15),
        (Halved, 0.075),
        (Stop, 0.0375),
    ];
    for (i, (&l, &(ev, lr))) in losses.iter().zip(&expected).enumerate() {
        let got = s.observe(l);
        ensure(got == ev && s.lr() == lr, || format!("epoch {}: {got:?} lr {} (want {ev:?} {lr})", i + 1, s.lr()))?;
    }

    let cfg = tiny_config();
    let setup = cfg.setup();
    let data = train_data(&cfg);
    let mut log = TrainLog::default();
    let p1 = run_pretrain1(&data, &setup, &mut log).map_err(|e| e.to_string())?;
    let before = p1.models.embedder.params().checksum();
    let mut checked = 0;
    for sys in System::ALL {
        let p2 = run_pretrain2(&data, &setup, sys, &p1.checkpoint, &mut log).map_err(|e| e.to_string())?;
        let after = p2.models.embedder.params().checksum();
        ensure(after == before, || format!("system {sys}: embedder checksum {before:016x} -> {after:016x}"))?;
        checked += 1;
    }

    let plan = StagePlan::new(Stage::Pretrain2, Some(System::D), &cfg.trainer).unwrap();
    let k = plan.config.batch_size / 2;
    let by_id = data.manifest.by_id();
    let batches = epoch_batches(&plan, &setup, &data, 1).map_err(|e| e.to_string())?;
    let last = batches.len() - 1;
    for (i, b) in batches.iter().enumerate() {
        ensure(b.len() == k || i == last, || format!("batch {i} holds {} pairs, want {k}", b.len()))?;
        for sg in b {
            let noisy = by_id[sg.utt.as_str()];
            let partner = sg.partner.as_deref().ok_or("unpaired segment")?;
            let clean = by_id[partner];
            ensure(
                noisy.split.is_noisy_train()
                    && noisy.paired_clean_id.as_deref() == Some(partner)
                    && clean.speaker_id == noisy.speaker_id
                    && matches!(clean.split, Split::TrainClean | Split::TrainCleanAug),
                || format!("{} paired with {partner}", sg.utt),
            )?;
        }
    }
    Ok(format!(
        "scripted trace matches; embedder frozen for {checked} systems; {} batches of {k} noisy + {k} clean",
        batches.len()
    ))
}

struct RunArtifacts {
    files: Vec<(String, Vec<u8>)>,
    log: String,
    checkpoints: Vec<(String, Vec<u8>)>,
    report: String,
}

fn end_to_end(cfg: &RunConfig, dir: &std::path::Path) -> nvl_core::Result<RunArtifacts> {
    write_corpus(&cfg.corpus, cfg.seed, dir, false)?;
    let corpus = Corpus::open(dir)?;
    let data = TrainData::load(&corpus)?;
    let trials = build_trials(&corpus.manifest, cfg.eval.trials_per_speaker, cfg.seed)?;
    let mut log = TrainLog::default();
    let out = run_ablation(&System::ALL, &data, &corpus, &trials, &cfg.setup(), &cfg.eval, &mut log)?;
    let mut files = vec![("manifest.tsv".to_string(), std::fs::read(dir.join("manifest.tsv")).unwrap())];
    for r in &corpus.manifest.records {
        files.push((r.path.clone(), std::fs::read(dir.join(&r.path)).unwrap()));
    }
    Ok(RunArtifacts {
        files,
        log: log.text(),
        checkpoints: out.checkpoints.iter().map(|(k, c)| (k.clone(), c.encode())).collect(),
        report: out.report.to_text(),
    })
}

fn determinism() -> Outcome {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = end_to_end(&cfg, a.path()).map_err(|e| e.to_string())?;
    let y = end_to_end(&cfg, b.path()).map_err(|e| e.to_string())?;
    ensure(x.files == y.files, || "corpus files differ".into())?;
    ensure(x.log == y.log, || "loss logs differ".into())?;
    ensure(x.checkpoints == y.checkpoints, || "checkpoints differ".into())?;
    ensure(x.report == y.report, || "reports differ".into())?;
    Report::parse(&x.report).map_err(|e| e.to_string())?;
    Ok(format!(
        "{} corpus files, {} log lines, {} checkpoints, report identical",
        x.files.len(),
        x.log.lines().count(),
        x.checkpoints.len()
    ))
}

fn snr_construction() -> Outcome {
    let cfg = RunConfig::desk();
    let mut waves = HashMap::new();
    let mut mixes = Vec::new();
    let manifest = build_corpus(&cfg.corpus, 0, |u| {
        waves.insert(u.record.utt_id.clone(), u.waveform.clone());
        if let Some(m) = &u.mix {
            mixes.push((u.record.utt_id.clone(), m.source_id.clone()));
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let parsed = Manifest::parse(&manifest.to_tsv()).map_err(|e| e.to_string())?;
    let recorded: HashMap<&str, _> = parsed.records.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    let mut worst = 0.0f64;
    for (id, source) in &mixes {
        let r = recorded[id.as_str()];
        let snr = r.snr_db.ok_or_else(|| format!("{id} has no SNR"))?;
        worst = worst.max((measured_snr(&waves[source], &waves[id]) - snr).abs());
        match r.split {
            Split::TrainNoisy => ensure(
                cfg.corpus.excluded_snrs_db.iter().all(|x| (snr - x).abs() > cfg.corpus.exclusion_window_db),
                || format!("{id}: training SNR {snr} hits an excluded value"),
            )?,
            Split::TestNoisy => ensure([0.0, 5.0, 10.0, 15.0, 20.0].contains(&snr), || {
                format!("{id}: test SNR {snr} outside the set")
            })?,
            _ => {}
        }
    }
    ensure(worst < 1e-6, || format!("SNR deviation {worst:.2e} dB"))?;
    Ok(format!("{} mixtures, max deviation {worst:.1e} dB", mixes.len()))
}

struct Desk {
    runs: Vec<AblationOutcome>,
    elapsed: Duration,
}

fn desk_ablation() -> Result<Desk, String> {
    let t = Instant::now();
    let mut runs = Vec::new();
    for s in 0..3 {
        let mut cfg = RunConfig::desk();
        cfg.seed = s;
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&cfg.corpus, s, dir.path(), false).map_err(|e| e.to_string())?;
        let corpus = Corpus::open(dir.path()).map_err(|e| e.to_string())?;
        let data = TrainData::load(&corpus).map_err(|e| e.to_string())?;
        let trials = build_trials(&corpus.manifest, cfg.eval.trials_per_speaker, s).map_err(|e| e.to_string())?;
        let systems = [System::B, System::C, System::D];
        let out = run_ablation(&systems, &data, &corpus, &trials, &cfg.setup(), &cfg.eval, &mut TrainLog::default())
            .map_err(|e| e.to_string())?;
        runs.push(out);
    }
    Ok(Desk {
        runs,
        elapsed: t.elapsed(),
    })
}

fn eers(desk: &Desk, system: &str, condition: Condition) -> Vec<f64> {
    desk.runs
        .iter()
        .map(|r| r.report.find(system, condition).expect("system evaluated").eer * 100.0)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/")
}

fn table2(desk: &Desk) -> Outcome {
    let base_n = eers(desk, BASELINE, Condition::Noisy);
    let d_n = eers(desk, "d", Condition::Noisy);
    let base_c = eers(desk, BASELINE, Condition::Clean);
    let d_c = eers(desk, "d", Condition::Clean);
    let detail = format!(
        "noisy EER% baseline {} vs d {}; clean mean {:.2} vs {:.2}; {:.0?} for 3 seeds",
        fmt(&base_n),
        fmt(&d_n),
        mean(&base_c),
        mean(&d_c),
        desk.elapsed
    );
    let noisy_ok = base_n.iter().zip(&d_n).all(|(b, d)| d < b);
    let clean_ok = mean(&d_c) <= 1.1 * mean(&base_c);
    let time_ok = desk.elapsed < Duration::from_secs(30 * 60);
    if noisy_ok && clean_ok && time_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn table3(desk: &Desk) -> Outcome {
    let b = mean(&eers(desk, "b", Condition::Noisy));
    let c = mean(&eers(desk, "c", Condition::Noisy));
    let d = mean(&eers(desk, "d", Condition::Noisy));
    let detail = format!("mean noisy EER% b {b:.2}, c {c:.2}, d {d:.2}");
    if d <= c && d <= b {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, r: Outcome| {
        match &r {
            Ok(d) => println!("criterion {n} ({name}): PASS - {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {d}");
            }
        }
        std::io::stdout().flush().ok();
    };
    report(1, "gradient fidelity", guarded(gradients));
    report(2, "normalization algebra", guarded(normalization));
    report(3, "loss identities", guarded(losses));
    report(4, "metric oracles", guarded(metrics));
    report(7, "training protocol", guarded(protocol));
    report(8, "determinism", guarded(determinism));
    report(9, "SNR construction", guarded(snr_construction));
    match guarded(desk_ablation) {
        Ok(desk) => {
            report(5, "noisy-condition gain over baseline", table2(&desk));
            report(6, "ablation ordering", table3(&desk));
        }
        Err(e) => {
            report(5, "noisy-condition gain over baseline", Err(e.clone()));
            report(6, "ablation ordering", Err(e));
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
