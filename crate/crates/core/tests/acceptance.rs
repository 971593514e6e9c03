//! End-to-end acceptance checks. Everything runs inside one test so the
//! timing-sensitive criteria are not disturbed by other tests running in
//! parallel. One PASS/FAIL line is printed per criterion; run with
//! `--nocapture` to see them.

mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{as_calls, oracle_smooth, random_labels};
use emt_core::distill::{build_dataset, hann_weight, smooth_labels, BuildConfig, DatasetBuild, SmoothingConfig};
use emt_core::fingerprint::FingerprintIndex;
use emt_core::gbdt::{confusion_matrix, train, train_with_report, GbtParams};
use emt_core::synth::{self, CorpusPaths, RecordingParams};
use emt_core::triage::{bench_cost_model, RunOptions, TriageDecision, TriageEngine};
use emt_core::{AudioBuffer, ClassLabel, FeatureExtractor, FeatureMode, GbtModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

#[derive(Default)]
struct Ledger(Vec<Outcome>);

impl Ledger {
    fn record(&mut self, id: u32, name: &'static str, started: Instant, pass: bool, detail: String) {
        let o = Outcome {
            id,
            name,
            pass,
            detail,
            elapsed: started.elapsed(),
        };
        println!(
            "[{}] criterion {:>2} {}: {} ({:.2?})",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail,
            o.elapsed
        );
        self.0.push(o);
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn build(corpus: &CorpusPaths, mode: FeatureMode, seed: u64) -> DatasetBuild {
    let cfg = BuildConfig {
        mode,
        seed,
        ..BuildConfig::default()
    };
    build_dataset(
        std::slice::from_ref(&corpus.labels),
        &corpus.audio_dir,
        &synth::synthetic_aggregation_map(),
        &cfg,
        &FeatureExtractor::default(),
    )
    .unwrap()
}

fn feature_shape(ledger: &mut Ledger) {
    let t = Instant::now();
    let fx = FeatureExtractor::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut inputs: Vec<Vec<f32>> = vec![vec![0.0; 8000], vec![1.0; 8000], vec![-1.0; 8000]];
    for class in ClassLabel::ALL {
        inputs.push(synth::generate(class, &mut rng, 8000));
    }
    for _ in 0..8 {
        let amp: f32 = rng.gen_range(0.0..1.0);
        inputs.push((0..8000).map(|_| rng.gen_range(-amp..=amp)).collect());
    }
    let mut ok = true;
    for x in &inputs {
        for mode in [FeatureMode::MelPower, FeatureMode::Mfcc] {
            let m = fx.extract_samples(x, mode).unwrap();
            ok &= m.as_flat().len() == 696 && m.flatten().len() == 29 * 24;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ledger.record(
        1,
        "feature shape",
        t,
        ok && secs < 1.0,
        format!("{} inputs x 2 modes gave 29x24 = 696 values, {secs:.3} s", inputs.len()),
    );
}

fn smoothing_oracle(ledger: &mut Ledger) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = SmoothingConfig::default();
    let mut mismatches = 0;
    for case in 0..1000 {
        let n = rng.gen_range(1..=2000);
        let labels = if case % 2 == 0 {
            (0..n).map(|_| ClassLabel::ALL[rng.gen_range(0..4)]).collect()
        } else {
            random_labels(&mut rng, n)
        };
        if smooth_labels(&labels, &cfg) != oracle_smooth(&labels, cfg.half_width()) {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ledger.record(
        2,
        "smoothing oracle equivalence",
        t,
        mismatches == 0 && secs < 30.0,
        format!("{mismatches} mismatches over 1000 sequences, {secs:.1} s"),
    );
}

fn hann_pins(ledger: &mut Ledger) {
    let t = Instant::now();
    let w = |k| hann_weight(k, 150).unwrap();
    let pins = [(0, 1.0), (150, 0.0), (-150, 0.0), (-75, 0.5)];
    let worst = pins
        .iter()
        .map(|&(k, want)| (w(k) - want).abs())
        .fold(0.0, f64::max);
    ledger.record(
        3,
        "window weight pins",
        t,
        worst <= 1e-12,
        format!("max deviation {worst:.1e}"),
    );
}

fn distillation(ledger: &mut Ledger, corpus: &CorpusPaths) -> (GbtModel, Vec<Vec<f64>>) {
    let t = Instant::now();
    let b = build(corpus, FeatureMode::Mfcc, 3);
    let (model, report) = train_with_report(&b.train, &GbtParams::default()).unwrap();
    let eval = confusion_matrix(&model, &b.test).unwrap();
    let secs = t.elapsed().as_secs_f64();
    println!("{eval}");
    ledger.record(
        4,
        "distillation fidelity",
        t,
        eval.agreement >= 0.95 && secs < 600.0,
        format!(
            "held-out agreement {:.2}% on {} segments (train {}), {secs:.1} s",
            100.0 * eval.agreement,
            eval.total,
            b.train.len()
        ),
    );
    (model, vec![report.loss_per_iteration])
}

fn monotone(ledger: &mut Ledger, mut curves: Vec<Vec<f64>>) {
    let t = Instant::now();
    // extra datasets: noisy blobs with a range of learning rates
    for (seed, lr) in [(1u64, 0.1), (2, 0.5), (3, 1.0), (4, 2.5)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = emt_core::distill::Dataset::new(FeatureMode::Mfcc);
        for i in 0..400 {
            let class = ClassLabel::ALL[i % 4];
            let row: Vec<f32> = (0..696)
                .map(|j| {
                    let c = if j % 5 == class.index() { 1.0 } else { 0.0 };
                    c + rng.gen_range(-1.5..1.5)
                })
                .collect();
            ds.push_row(&row, class);
        }
        let params = GbtParams {
            n_iterations: 40,
            learning_rate: lr,
            ..GbtParams::default()
        };
        curves.push(train_with_report(&ds, &params).unwrap().1.loss_per_iteration);
    }
    let violations: usize = curves
        .iter()
        .map(|c| c.windows(2).filter(|w| w[1] > w[0]).count())
        .sum();
    let steps: usize = curves.iter().map(|c| c.len() - 1).sum();
    ledger.record(
        5,
        "training monotonicity",
        t,
        violations == 0,
        format!("{violations} increases over {steps} iterations on {} datasets", curves.len()),
    );
}

fn latency(ledger: &mut Ledger, model: &GbtModel) {
    let t = Instant::now();
    let fx = FeatureExtractor::default();
    let mode = model.feature_mode();
    let mut rng = synth::rng_for(6);
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); 4];
    let mut all = Vec::with_capacity(10_000);
    let matrices: Vec<Vec<_>> = ClassLabel::ALL
        .iter()
        .map(|&c| {
            (0..50)
                .map(|_| fx.extract_samples(&synth::generate(c, &mut rng, 8000), mode).unwrap())
                .collect()
        })
        .collect();
    for i in 0..10_000 {
        let class = i % 4;
        let m = &matrices[class][(i / 4) % 50];
        let s = Instant::now();
        let flat = m.flatten();
        let p = model.predict_class(&flat).unwrap();
        let ms = s.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(p);
        per_class[class].push(ms);
        all.push(ms);
    }
    let med = median(&mut all);
    let meds: Vec<f64> = per_class.iter_mut().map(|v| median(v)).collect();
    let (lo, hi) = meds
        .iter()
        .fold((f64::MAX, 0.0f64), |(a, b), &m| (a.min(m), b.max(m)));
    let secs = t.elapsed().as_secs_f64();
    ledger.record(
        6,
        "inference latency",
        t,
        med <= 5.0 && hi <= 2.0 * lo && secs < 120.0,
        format!(
            "median {:.4} ms over 10000 predictions; per-class medians {:?} ms (ratio {:.2})",
            med,
            meds.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>(),
            hi / lo
        ),
    );
}

fn retrieval(ledger: &mut Ledger) {
    let t = Instant::now();
    let (reg, clips) = synth::announcement_library(50, 6.0, 42);
    let mut index = FingerprintIndex::with_defaults(Arc::new(reg));
    for (id, clip) in &clips {
        index.add(id, clip).unwrap();
    }
    let mut rng = synth::rng_for(7);
    let (mut own, mut excerpt, mut noisy) = (0, 0, 0);
    let hit = |a: &AudioBuffer, id: &str| {
        let r = index.query(a).unwrap();
        r.matched && r.announcement_id.as_deref() == Some(id)
    };
    for (id, clip) in &clips {
        own += hit(clip, id) as usize;
        let start = rng.gen_range(0..=clip.len() - 16000);
        let e = clip.slice(start, start + 16000);
        excerpt += hit(&e, id) as usize;
        let n = AudioBuffer::clamped(synth::add_noise_at_snr(e.samples(), 20.0, &mut rng), 8000);
        noisy += hit(&n, id) as usize;
    }
    let mut false_pos = 0;
    for i in 0..100 {
        let n = synth::white_noise(&mut synth::rng_for(10_000 + i), 32000, 0.1);
        false_pos += index.query(&AudioBuffer::new(n, 8000).unwrap()).unwrap().matched as usize;
    }
    let secs = t.elapsed().as_secs_f64();
    ledger.record(
        7,
        "fingerprint retrieval",
        t,
        own == 50 && excerpt * 100 >= 95 * 50 && noisy * 100 >= 80 * 50 && false_pos == 0 && secs < 300.0,
        format!("self {own}/50, 2 s excerpts {excerpt}/50, 20 dB SNR {noisy}/50, noise matches {false_pos}/100"),
    );
}

struct TriageRun {
    decisions: Vec<TriageDecision>,
    gated_ok: bool,
}

fn speedup_and_gating(ledger: &mut Ledger, model: &Arc<GbtModel>) -> Vec<TriageRun> {
    let t = Instant::now();
    let (reg, clips) = synth::announcement_library(50, 6.0, 42);
    let mut index = FingerprintIndex::with_defaults(Arc::new(reg));
    for (id, clip) in &clips {
        index.add(id, clip).unwrap();
    }
    let index = Arc::new(index);
    let calls = as_calls(synth::call_workload(1000, 4.0, 0.25, &clips, 8));

    // three full runs; the median one is reported, which keeps a burst of
    // background load from deciding the outcome
    let mut rounds: Vec<_> = (0..3)
        .map(|_| {
            let engine = TriageEngine::new(model.clone(), index.clone());
            let (decisions, report) = engine.run_stream(&calls, RunOptions::default()).unwrap();
            (engine, decisions, report)
        })
        .collect();
    rounds.sort_by(|a, b| {
        let s = |r: &emt_core::triage::CostReport| r.speedup_factor.unwrap_or(0.0);
        s(&a.2).total_cmp(&s(&b.2))
    });
    let all: Vec<String> = rounds
        .iter()
        .map(|r| format!("{:.2}", r.2.speedup_factor.unwrap_or(0.0)))
        .collect();
    let (engine, decisions, report) = rounds.swap_remove(1);
    let measured = report.speedup_factor.unwrap_or(0.0);
    let analytic = bench_cost_model(4.0 * 1.74, 77.81, 0.25).unwrap().speedup;
    let paper = 77.81 / 25.05;
    let analytic_ok = (analytic - 2.94).abs() < 0.01 && (analytic - paper).abs() <= 0.1 * paper;
    let secs = t.elapsed().as_secs_f64();
    ledger.record(
        8,
        "case-study speedup",
        t,
        measured >= 2.5 && analytic_ok && secs < 300.0,
        format!(
            "measured {measured:.2} (median of {}; C {:.3} ms, F gated {:.3} ms/call, always {:.3} ms, p {:.3}); analytic {analytic:.3} vs reported {paper:.2}",
            all.join(", "),
            report.avg_ms_classify,
            report.avg_ms_fingerprint,
            report.avg_ms_always_fingerprint.unwrap_or(f64::NAN),
            report.announcement_fraction
        ),
    );

    let gate = |engine: &TriageEngine, calls: &[emt_core::triage::CallEarlyMedia], decisions: &[TriageDecision]| {
        let routed = decisions
            .iter()
            .filter(|d| matches!(d, TriageDecision::SipMapped { .. } | TriageDecision::AnnouncementUnknown { .. }))
            .count() as u64;
        let probe = TriageEngine::new(model.clone(), index.clone());
        let dominant = calls
            .iter()
            .filter(|c| probe.classify_call(c).is_ok_and(|c| c.dominant == ClassLabel::Announcement))
            .count() as u64;
        engine.fingerprint_queries() == dominant && routed == dominant
    };
    let mut runs = vec![TriageRun {
        gated_ok: gate(&engine, &calls, &decisions) && report.fingerprint_queries == engine.fingerprint_queries(),
        decisions,
    }];
    for (threads, fraction, seed) in [(8, 0.25, 8), (4, 0.6, 9), (2, 0.0, 10)] {
        let calls = if seed == 8 {
            calls.clone()
        } else {
            as_calls(synth::call_workload(200, 2.0, fraction, &clips, seed))
        };
        let engine = TriageEngine::new(model.clone(), index.clone());
        let (decisions, _) = engine
            .run_stream(&calls, RunOptions { parallelism: threads, baseline: false })
            .unwrap();
        runs.push(TriageRun {
            gated_ok: gate(&engine, &calls, &decisions),
            decisions,
        });
    }
    let t9 = Instant::now();
    let ok = runs.iter().all(|r| r.gated_ok);
    ledger.record(
        9,
        "gating exactness",
        t9,
        ok,
        format!("{} runs, query count equals announcement-dominant calls in each: {ok}", runs.len()),
    );
    runs
}

fn determinism(ledger: &mut Ledger, corpus: &CorpusPaths, triage_runs: &[TriageRun]) {
    let t = Instant::now();
    let a = in_pool(1, || build(corpus, FeatureMode::Mfcc, 3));
    let b = in_pool(4, || build(corpus, FeatureMode::Mfcc, 3));
    let dataset_ok = a.train.to_bytes() == b.train.to_bytes()
        && a.test.to_bytes() == b.test.to_bytes()
        && a.manifest.to_json() == b.manifest.to_json();
    let params = GbtParams {
        n_iterations: 25,
        ..GbtParams::default()
    };
    let m1 = in_pool(1, || train(&a.train, &params).unwrap()).to_bytes();
    let m4 = in_pool(4, || train(&a.train, &params).unwrap()).to_bytes();
    let model_ok = m1 == m4;
    // same calls triaged on 1 and 8 workers
    let triage_ok = triage_runs[0].decisions == triage_runs[1].decisions;
    ledger.record(
        10,
        "determinism",
        t,
        dataset_ok && model_ok && triage_ok,
        format!("dataset bytes equal: {dataset_ok}, model bytes equal: {model_ok}, triage decisions equal: {triage_ok}"),
    );
}

fn corpus(dir: &Path) -> CorpusPaths {
    synth::write_corpus(dir, 40, 11, &RecordingParams::default()).unwrap()
}

#[test]
fn acceptance_criteria() {
    // libtest prints "test acceptance_criteria ... " without a newline
    println!();
    let mut ledger = Ledger::default();
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());

    feature_shape(&mut ledger);
    smoothing_oracle(&mut ledger);
    hann_pins(&mut ledger);
    let (model, curves) = distillation(&mut ledger, &corpus);
    monotone(&mut ledger, curves);
    latency(&mut ledger, &model);
    retrieval(&mut ledger);
    let model = Arc::new(model);
    let runs = speedup_and_gating(&mut ledger, &model);
    determinism(&mut ledger, &corpus, &runs);

    let failed: Vec<String> = ledger
        .0
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} ({})", o.id, o.name))
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        ledger.0.len() - failed.len(),
        ledger.0.len()
    );
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
