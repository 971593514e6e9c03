use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use emt_core::audio::{encode_wav_pcm16, load_audio_file, segment_seconds};
use emt_core::distill::{self, BuildConfig, ClassAggregationMap, Dataset, SmoothingConfig};
use emt_core::gbdt::{self, confusion_matrix, train_with_report};
use emt_core::synth::{self, RecordingParams};
use emt_core::triage::{bench_cost_model, load_call_dir, CallEarlyMedia, RunOptions, TriageDecision};
use emt_core::{
    AnnouncementRegistry, ClassLabel, FeatureExtractor, FeatureMode, FingerprintIndex, GbtModel,
    GbtParams, TriageEngine,
};
use serde::Serialize;
use serde_json::json;

use crate::error::{require_dir, require_file, CliError};
use crate::{
    BenchArgs, BuildDatasetArgs, EvalArgs, FeaturesDumpArgs, FpAddArgs, FpQueryArgs,
    FpSnapshotArgs, SynthCallsArgs, SynthCorpusArgs, SynthLibraryArgs, TrainArgs, TriageRunArgs,
};

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::failed)?;
    println!("{text}");
    Ok(())
}

fn load_registry(path: &Path) -> Result<Arc<AnnouncementRegistry>, CliError> {
    require_file(path, "registry")?;
    AnnouncementRegistry::load(path)
        .map(Arc::new)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<GbtModel, CliError> {
    require_file(path, "model")?;
    GbtModel::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    require_file(path, "dataset")?;
    Dataset::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_index(path: &Path, registry: Arc<AnnouncementRegistry>) -> Result<FingerprintIndex, CliError> {
    require_file(path, "fingerprint index")?;
    FingerprintIndex::load(path, registry)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_audio(path: &Path) -> Result<emt_core::AudioBuffer, CliError> {
    require_file(path, "audio file")?;
    load_audio_file(path, false).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn class_counts_json(c: &distill::ClassCounts) -> serde_json::Value {
    serde_json::to_value(c).unwrap_or_default()
}

pub fn build_dataset(a: &BuildDatasetArgs, json: bool) -> Result<(), CliError> {
    for l in &a.labels {
        require_file(l, "label file")?;
    }
    require_dir(&a.audio_dir, "audio")?;
    require_file(&a.map, "class map")?;
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(CliError::Input(format!("--test-fraction {} outside [0, 1)", a.test_fraction)));
    }
    let map = ClassAggregationMap::load(&a.map)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.map.display())))?;
    let cfg = BuildConfig {
        smoothing: SmoothingConfig::new(a.window).map_err(CliError::input)?,
        mode: a.mode,
        seed: a.seed,
        test_fraction: a.test_fraction,
    };
    let build = distill::build_dataset(&a.labels, &a.audio_dir, &map, &cfg, &FeatureExtractor::default())
        .map_err(CliError::input)?;
    let files = build.write(&a.out).map_err(CliError::failed)?;
    let cs = &build.manifest.class_seconds;
    if json {
        print_json(&json!({
            "files": files,
            "train_segments": build.train.len(),
            "test_segments": build.test.len(),
            "class_seconds": {
                "total": class_counts_json(&cs.total),
                "train": class_counts_json(&cs.train),
                "test": class_counts_json(&cs.test),
            },
            "warnings": build.manifest.warnings,
        }))
    } else {
        println!(
            "{} recordings -> {} train / {} test segments ({} features)",
            build.manifest.recordings.len(),
            build.train.len(),
            build.test.len(),
            a.mode.name()
        );
        for (name, c) in [("total", &cs.total), ("train", &cs.train), ("test", &cs.test)] {
            println!(
                "  {name:<5} announcement {:>6}  ringback {:>6}  music {:>6}  silence {:>6}",
                c.announcement, c.ringback, c.music, c.silence
            );
        }
        for w in &build.manifest.warnings {
            println!("  warning: {w}");
        }
        for f in files {
            println!("wrote {}", f.display());
        }
        Ok(())
    }
}

pub fn train(a: &TrainArgs, json: bool) -> Result<(), CliError> {
    let dataset = load_dataset(&a.dataset)?;
    let params = GbtParams {
        n_iterations: a.iterations,
        learning_rate: a.learning_rate,
        max_leaves: a.max_leaves,
        min_samples_per_leaf: a.min_samples_per_leaf,
        n_histogram_bins: a.bins,
        l2_lambda: a.lambda,
        rng_seed: a.seed,
    };
    let (model, report) = train_with_report(&dataset, &params).map_err(CliError::input)?;
    model.save(&a.out).map_err(CliError::failed)?;
    let fit = confusion_matrix(&model, &dataset).map_err(CliError::failed)?;
    let first = report.loss_per_iteration.first().copied().unwrap_or(f64::NAN);
    let last = report.loss_per_iteration.last().copied().unwrap_or(f64::NAN);
    if json {
        print_json(&json!({
            "model": a.out,
            "feature_mode": dataset.mode(),
            "rows": dataset.len(),
            "params": params,
            "initial_loss": first,
            "final_loss": last,
            "train_agreement": fit.agreement,
            "report": report,
        }))
    } else {
        println!(
            "trained {} trees on {} rows ({}): log-loss {first:.4} -> {last:.4}, train agreement {:.2}%",
            model.trees().len(),
            dataset.len(),
            dataset.mode().name(),
            100.0 * fit.agreement
        );
        for w in &report.warnings {
            println!("warning: {w}");
        }
        println!("wrote {}", a.out.display());
        Ok(())
    }
}

pub fn eval(a: &EvalArgs, json: bool) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let dataset = load_dataset(&a.dataset)?;
    if let Some(mode) = a.mode {
        for (what, found) in [("model", model.feature_mode()), ("dataset", dataset.mode())] {
            if found != mode {
                return Err(CliError::Input(format!(
                    "feature mode mismatch: --mode {} but the {what} uses {}",
                    mode.name(),
                    found.name()
                )));
            }
        }
    }
    if model.feature_mode() != dataset.mode() {
        return Err(CliError::Input(format!(
            "feature mode mismatch: model uses {}, dataset holds {}",
            model.feature_mode().name(),
            dataset.mode().name()
        )));
    }
    let report = confusion_matrix(&model, &dataset).map_err(CliError::input)?;
    if json {
        print_json(&report)
    } else {
        println!("{report}");
        Ok(())
    }
}

pub fn fingerprint_add(a: &FpAddArgs, json: bool) -> Result<(), CliError> {
    let registry = load_registry(&a.registry)?;
    let audio = load_audio(&a.audio)?;
    let mut index = if a.index.exists() {
        load_index(&a.index, registry)?
    } else {
        FingerprintIndex::with_defaults(registry)
    };
    index.add(&a.id, &audio).map_err(CliError::input)?;
    index.save(&a.index).map_err(CliError::failed)?;
    if json {
        print_json(&json!({
            "index": a.index,
            "announcement_id": a.id,
            "announcements": index.len(),
            "postings": index.hash_count(),
        }))
    } else {
        println!(
            "added {} ({} announcements, {} postings) -> {}",
            a.id,
            index.len(),
            index.hash_count(),
            a.index.display()
        );
        Ok(())
    }
}

pub fn fingerprint_query(a: &FpQueryArgs, json: bool) -> Result<(), CliError> {
    let registry = load_registry(&a.registry)?;
    let mut index = load_index(&a.index, registry)?;
    let audio = load_audio(&a.audio)?;
    if let Some(v) = a.min_votes {
        index.set_min_votes(v);
    }
    let result = index.query(&audio).map_err(CliError::input)?;
    if json {
        print_json(&result)
    } else {
        match (&result.announcement_id, result.matched) {
            (Some(id), true) => println!(
                "match {id} (SIP {}) at {:.2} s, {} votes",
                result.sip_code.as_ref().map(|c| c.code().to_string()).unwrap_or_default(),
                result.offset_seconds,
                result.vote_count
            ),
            (Some(id), false) => println!(
                "no match (best candidate {id} with {} votes)",
                result.vote_count
            ),
            (None, _) => println!("no match"),
        }
        Ok(())
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))? {
        let path = entry.map_err(CliError::input)?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn fingerprint_snapshot(a: &FpSnapshotArgs, json: bool) -> Result<(), CliError> {
    let registry = load_registry(&a.registry)?;
    require_dir(&a.clips, "clips")?;
    let mut index = FingerprintIndex::with_defaults(registry);
    for path in wav_files(&a.clips)? {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let audio = load_audio(&path)?;
        index
            .add(&id, &audio)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    index.save(&a.out).map_err(CliError::failed)?;
    if json {
        print_json(&json!({
            "index": a.out,
            "announcements": index.len(),
            "postings": index.hash_count(),
            "distinct_hashes": index.distinct_hashes(),
        }))
    } else {
        println!(
            "indexed {} announcements ({} postings) -> {}",
            index.len(),
            index.hash_count(),
            a.out.display()
        );
        Ok(())
    }
}

fn decision_counts(decisions: &[TriageDecision]) -> serde_json::Value {
    let mut counts = [0usize; 4];
    for d in decisions {
        let i = match d {
            TriageDecision::SipMapped { .. } => 0,
            TriageDecision::AnnouncementUnknown { .. } => 1,
            TriageDecision::NoAnnouncement { .. } => 2,
            TriageDecision::Skipped { .. } => 3,
        };
        counts[i] += 1;
    }
    json!({
        "sip_mapped": counts[0],
        "announcement_unknown": counts[1],
        "no_announcement": counts[2],
        "skipped": counts[3],
    })
}

pub fn triage_run(a: &TriageRunArgs, json: bool) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let registry = load_registry(&a.registry)?;
    let index = load_index(&a.index, registry)?;
    require_dir(&a.calls, "calls")?;
    if a.parallelism == 0 {
        return Err(CliError::Input("--parallelism must be at least 1".into()));
    }
    let (calls, mut decisions_skipped) = load_call_dir(&a.calls).map_err(CliError::input)?;
    let engine = TriageEngine::new(Arc::new(model), Arc::new(index));
    let options = RunOptions {
        parallelism: a.parallelism,
        baseline: a.baseline,
    };
    let (mut decisions, mut report) = engine.run_stream(&calls, options).map_err(CliError::failed)?;
    // undecodable files count as skipped calls
    report.n_calls += decisions_skipped.len();
    report.n_skipped += decisions_skipped.len();
    decisions.append(&mut decisions_skipped);
    decisions.sort_by(|x, y| x.call_id().cmp(y.call_id()));

    if let Some(path) = &a.decisions {
        let mut out = std::fs::File::create(path)
            .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        for d in &decisions {
            let line = serde_json::to_string(d).map_err(CliError::failed)?;
            writeln!(out, "{line}").map_err(CliError::failed)?;
        }
    }
    let counts = decision_counts(&decisions);
    if json {
        print_json(&json!({
            "decisions": if a.decisions.is_some() { serde_json::Value::Null } else { serde_json::to_value(&decisions).map_err(CliError::failed)? },
            "counts": counts,
            "report": report,
        }))
    } else {
        println!(
            "{} calls: {} sip_mapped, {} announcement_unknown, {} no_announcement, {} skipped",
            report.n_calls,
            counts["sip_mapped"],
            counts["announcement_unknown"],
            counts["no_announcement"],
            counts["skipped"]
        );
        println!(
            "fingerprint queries {} | avg ms/call: classify {:.3}, fingerprint {:.3}, triaged {:.3}",
            report.fingerprint_queries, report.avg_ms_classify, report.avg_ms_fingerprint, report.avg_ms_triaged
        );
        if let (Some(always), Some(s)) = (report.avg_ms_always_fingerprint, report.speedup_factor) {
            println!("always-fingerprint {always:.3} ms/call, speedup {s:.2}");
        }
        if a.decisions.is_none() {
            for d in &decisions {
                println!("{}", serde_json::to_string(d).map_err(CliError::failed)?);
            }
        }
        Ok(())
    }
}

/// Small classifier trained on generated one-second clips, for benchmarks
/// run without a model file.
fn synthetic_model(seed: u64) -> Result<GbtModel, CliError> {
    let fx = FeatureExtractor::default();
    let mut ds = Dataset::new(FeatureMode::Mfcc);
    let mut rng = synth::rng_for(seed ^ 0x5eed);
    for i in 0..400 {
        let class = ClassLabel::ALL[i % 4];
        let x = synth::generate(class, &mut rng, 8000);
        let m = fx.extract_samples(&x, FeatureMode::Mfcc).map_err(CliError::failed)?;
        ds.push(&m, class);
    }
    let params = GbtParams {
        n_iterations: 50,
        ..GbtParams::default()
    };
    gbdt::train(&ds, &params).map_err(CliError::failed)
}

pub fn bench(a: &BenchArgs, json: bool) -> Result<(), CliError> {
    if let (Some(c), Some(f)) = (a.classify_ms, a.fingerprint_ms) {
        let model = bench_cost_model(c, f, a.fraction).map_err(CliError::input)?;
        return if json {
            print_json(&json!({ "predicted": model }))
        } else {
            println!(
                "C {c:.3} ms, F {f:.3} ms, p {:.3}: triaged {:.3} ms vs always {:.3} ms, speedup {:.3}",
                a.fraction, model.triaged_ms, model.baseline_ms, model.speedup
            );
            Ok(())
        };
    }
    if !(0.0..=1.0).contains(&a.fraction) {
        return Err(CliError::Input(format!("--fraction {} outside [0, 1]", a.fraction)));
    }
    if a.parallelism == 0 || a.calls == 0 || a.library == 0 || a.seconds < 1.0 {
        return Err(CliError::Input(
            "--parallelism, --calls and --library must be positive and --seconds at least 1".into(),
        ));
    }
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => synthetic_model(a.seed)?,
    };
    let (registry, clips) = synth::announcement_library(a.library, a.seconds.max(6.0), 42);
    let mut index = FingerprintIndex::with_defaults(Arc::new(registry));
    for (id, clip) in &clips {
        index.add(id, clip).map_err(CliError::failed)?;
    }
    let calls: Vec<CallEarlyMedia> = synth::call_workload(a.calls, a.seconds, a.fraction, &clips, a.seed)
        .into_iter()
        .map(|c| CallEarlyMedia {
            call_id: c.call_id,
            audio: c.audio,
            arrival_time: 0.0,
        })
        .collect();
    let engine = TriageEngine::new(Arc::new(model), Arc::new(index));
    let options = RunOptions {
        parallelism: a.parallelism,
        baseline: true,
    };
    let (_, report) = engine.run_stream(&calls, options).map_err(CliError::failed)?;
    let always = report.avg_ms_always_fingerprint.unwrap_or(0.0);
    let measured = report.speedup_factor.unwrap_or(0.0);
    let predicted = bench_cost_model(report.avg_ms_classify, always, report.announcement_fraction)
        .map_err(CliError::failed)?;
    let rel = (measured - predicted.speedup).abs() / predicted.speedup;
    if json {
        print_json(&json!({
            "measured": {
                "classify_ms": report.avg_ms_classify,
                "fingerprint_ms": always,
                "announcement_fraction": report.announcement_fraction,
                "triaged_ms": report.avg_ms_triaged,
                "speedup": measured,
            },
            "predicted": predicted,
            "relative_difference": rel,
            "report": report,
        }))
    } else {
        println!("{:<24} {:>10} {:>10}", "", "measured", "predicted");
        println!("{:<24} {:>10.3} {:>10.3}", "classify C (ms/call)", report.avg_ms_classify, predicted.classify_ms);
        println!("{:<24} {:>10.3} {:>10.3}", "fingerprint F (ms/call)", always, predicted.fingerprint_ms);
        println!(
            "{:<24} {:>10.3} {:>10.3}",
            "announcement share p", report.announcement_fraction, predicted.announcement_fraction
        );
        println!("{:<24} {:>10.3} {:>10.3}", "triaged (ms/call)", report.avg_ms_triaged, predicted.triaged_ms);
        println!("{:<24} {:>10.3} {:>10.3}", "speedup", measured, predicted.speedup);
        println!("measured vs predicted speedup differ by {:.1}%", 100.0 * rel);
        Ok(())
    }
}

pub fn features_dump(a: &FeaturesDumpArgs, json: bool) -> Result<(), CliError> {
    let audio = load_audio(&a.audio)?;
    let segments = segment_seconds(&audio, "input").map_err(CliError::input)?;
    let segment = segments.get(a.second).ok_or_else(|| {
        CliError::Input(format!(
            "--second {} but the recording has {} whole second(s)",
            a.second,
            segments.len()
        ))
    })?;
    let m = FeatureExtractor::default().extract(segment, a.mode);
    if json {
        let rows: Vec<&[f32]> = (0..emt_core::features::N_FRAMES).map(|t| m.row(t)).collect();
        print_json(&json!({
            "mode": a.mode,
            "second": a.second,
            "frames": emt_core::features::N_FRAMES,
            "bands": emt_core::features::N_MELS,
            "values": rows,
        }))
    } else {
        print!("{}", m.to_csv());
        Ok(())
    }
}

pub fn synth_corpus(a: &SynthCorpusArgs, json: bool) -> Result<(), CliError> {
    if a.min_seconds == 0 || a.min_seconds > a.max_seconds {
        return Err(CliError::Input("need 0 < --min-seconds <= --max-seconds".into()));
    }
    let params = RecordingParams {
        min_seconds: a.min_seconds,
        max_seconds: a.max_seconds,
        ..RecordingParams::default()
    };
    create_dir(&a.out)?;
    let paths = synth::write_corpus(&a.out, a.recordings, a.seed, &params).map_err(CliError::failed)?;
    if json {
        print_json(&json!({
            "recordings": a.recordings,
            "audio_dir": paths.audio_dir,
            "labels": paths.labels,
            "map": paths.map,
        }))
    } else {
        println!(
            "{} recordings in {}, labels {}, map {}",
            a.recordings,
            paths.audio_dir.display(),
            paths.labels.display(),
            paths.map.display()
        );
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

pub fn synth_library(a: &SynthLibraryArgs, json: bool) -> Result<(), CliError> {
    if a.seconds < 1.0 {
        return Err(CliError::Input("--seconds must be at least 1".into()));
    }
    let (registry, clips) = synth::announcement_library(a.count, a.seconds, a.seed);
    let clip_dir = a.out.join("clips");
    create_dir(&clip_dir)?;
    for (id, clip) in &clips {
        write_file(&clip_dir.join(format!("{id}.wav")), &encode_wav_pcm16(clip))?;
    }
    let reg_path = a.out.join("registry.csv");
    write_file(&reg_path, registry.to_csv_string().as_bytes())?;
    if json {
        print_json(&json!({ "clips": clip_dir, "registry": reg_path, "count": clips.len() }))
    } else {
        println!("{} clips in {}, registry {}", clips.len(), clip_dir.display(), reg_path.display());
        Ok(())
    }
}

pub fn synth_calls(a: &SynthCallsArgs, json: bool) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.fraction) || a.seconds <= 0.0 {
        return Err(CliError::Input("need --fraction in [0, 1] and positive --seconds".into()));
    }
    let (_, clips) = synth::announcement_library(a.library_count, a.library_seconds, a.library_seed);
    let calls = synth::call_workload(a.count, a.seconds, a.fraction, &clips, a.seed);
    create_dir(&a.out)?;
    let mut truth = String::new();
    for c in &calls {
        write_file(&a.out.join(format!("{}.wav", c.call_id)), &encode_wav_pcm16(&c.audio))?;
        truth.push_str(&json!({
            "call_id": c.call_id,
            "class": c.truth,
            "announcement_id": c.announcement_id,
        }).to_string());
        truth.push('\n');
    }
    let truth_path = a.out.join("truth.jsonl");
    write_file(&truth_path, truth.as_bytes())?;
    if json {
        print_json(&json!({ "calls": calls.len(), "dir": a.out, "truth": truth_path }))
    } else {
        println!("{} calls in {}, truth {}", calls.len(), a.out.display(), truth_path.display());
        Ok(())
    }
}
