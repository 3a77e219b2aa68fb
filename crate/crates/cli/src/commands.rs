//! Subcommand implementations. Input-side failures (unreadable configs,
//! missing manifests, sections absent, unknown tokens) are usage errors;
//! anything after validation is a runtime error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use xtrd_core::data::{read_feature_file, read_wav, write_feature_file};
use xtrd_core::trainer::{
    eval_nll, load_checkpoint, save_checkpoint, train_epoch, CheckpointMeta, OptimState,
    TrainItem,
};
use xtrd_core::{
    allowed, attended_count, build_mask, cost_report, decode_offline, decode_offline_audio,
    gen_synthetic, read_manifest, stream_open, wer, DecodeConfig, LeftContext, ManifestEntry,
    MaskGeometry, Model, Streams, TrainInput,
};

use crate::config::RunConfig;
use crate::CliError;

/// Progress notes go to stderr and can be silenced with XTRD_QUIET=1; data
/// output stays on stdout regardless.
fn note(msg: std::fmt::Arguments) {
    if std::env::var_os("XTRD_QUIET").is_none() {
        eprintln!("{msg}");
    }
}

macro_rules! note {
    ($($arg:tt)*) => { note(format_args!($($arg)*)) };
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

pub fn parse_left_context(s: &str) -> Result<LeftContext, CliError> {
    if s.eq_ignore_ascii_case("full") {
        return Ok(LeftContext::Full);
    }
    s.parse::<usize>()
        .map(LeftContext::Chunks)
        .map_err(|_| usage(format!("--left-context must be a chunk count or 'full', got '{s}'")))
}

// ---------------------------------------------------------------------------
// synth-data

pub fn synth_data(
    config: &Path,
    out: &Path,
    n_utts: usize,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let run = RunConfig::load(config)?;
    let dcfg = run.data.ok_or_else(|| usage("config has no `data` section"))?;
    dcfg.validate().map_err(|e| usage(e.to_string()))?;
    let seed = seed.unwrap_or(run.seed);

    let utts = gen_synthetic::<f64>(&dcfg, n_utts, seed).map_err(runtime)?;
    let feat_dir = out.join("feats");
    fs::create_dir_all(&feat_dir).map_err(runtime)?;

    let mut manifest = String::new();
    for u in &utts {
        let rel = format!("feats/{}.xtf", u.utterance_id);
        write_feature_file(&out.join(&rel), &u.frames).map_err(runtime)?;
        let entry = ManifestEntry {
            utterance_id: u.utterance_id.clone(),
            audio_path: None,
            features_path: Some(rel),
            text: Some(u.text.clone()),
        };
        manifest.push_str(&serde_json::to_string(&entry).map_err(runtime)?);
        manifest.push('\n');
    }
    fs::write(out.join("manifest.jsonl"), manifest).map_err(runtime)?;
    let used = json!({ "seed": seed, "n_utts": n_utts, "data": dcfg });
    fs::write(out.join("config.json"), format!("{:#}\n", used)).map_err(runtime)?;
    note!("wrote {} utterances under {}", utts.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// manifest loading shared by train/decode

/// Manifest entries with paths resolved against the manifest's directory.
fn load_entries(manifest: &Path, require_text: bool) -> Result<Vec<ManifestEntry>, CliError> {
    let entries = read_manifest(manifest, require_text)
        .map_err(|e| usage(format!("manifest {}: {e}", manifest.display())))?;
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let resolve = |p: &str| -> String {
        let pb = PathBuf::from(p);
        if pb.is_absolute() { pb } else { base.join(pb) }.to_string_lossy().into_owned()
    };
    Ok(entries
        .into_iter()
        .map(|mut e| {
            e.audio_path = e.audio_path.map(|p| resolve(&p));
            e.features_path = e.features_path.map(|p| resolve(&p));
            e
        })
        .collect())
}

fn load_input(entry: &ManifestEntry) -> Result<TrainInput<f64>, CliError> {
    if let Some(p) = &entry.features_path {
        let feats = read_feature_file::<f64>(Path::new(p))
            .map_err(|e| usage(format!("features {p}: {e}")))?;
        return Ok(TrainInput::Features(feats));
    }
    let p = entry.audio_path.as_ref().expect("manifest entries name exactly one input");
    let (samples, _rate) =
        read_wav::<f64>(Path::new(p)).map_err(|e| usage(format!("audio {p}: {e}")))?;
    Ok(TrainInput::Audio(samples))
}

// ---------------------------------------------------------------------------
// train

#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    dev: Option<&Path>,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<(), CliError> {
    let run = RunConfig::load(config)?;
    let model_cfg = run.model.clone().ok_or_else(|| usage("config has no `model` section"))?;
    let tcfg = run.train.clone().ok_or_else(|| usage("config has no `train` section"))?;
    model_cfg.validate().map_err(|e| usage(e.to_string()))?;
    tcfg.validate().map_err(|e| usage(e.to_string()))?;

    let load_items = |manifest: &Path| -> Result<Vec<TrainItem<f64>>, CliError> {
        let entries = load_entries(manifest, true)?;
        entries
            .iter()
            .map(|e| {
                let tokens = model_cfg
                    .vocab
                    .encode_words(e.text())
                    .map_err(|err| usage(format!("utterance {}: {err}", e.utterance_id)))?;
                Ok(TrainItem {
                    utterance_id: e.utterance_id.clone(),
                    input: load_input(e)?,
                    tokens,
                })
            })
            .collect()
    };
    let items = load_items(data)?;
    let dev_items = dev.map(load_items).transpose()?;

    let (mut model, mut optim, start_epoch) = match resume {
        Some(ckpt) => {
            let (model, optim, meta) = load_checkpoint::<f64>(ckpt)
                .map_err(|e| usage(format!("checkpoint {}: {e}", ckpt.display())))?;
            let same_model = serde_json::to_value(&meta.model_config).map_err(runtime)?
                == serde_json::to_value(&model_cfg).map_err(runtime)?;
            if !same_model {
                return Err(usage("checkpoint model config differs from --config"));
            }
            if let Some(stored) = &meta.train_config {
                if *stored != tcfg {
                    return Err(usage("checkpoint train config differs from --config"));
                }
            }
            let optim = optim.unwrap_or_else(|| OptimState::new(&model));
            (model, optim, meta.next_epoch)
        }
        None => {
            let mut rng = Streams::from_root(run.seed).stream("init");
            let model = Model::init(model_cfg.clone(), &mut rng).map_err(runtime)?;
            let optim = OptimState::new(&model);
            (model, optim, 0)
        }
    };
    note!(
        "training {} params on {} utterances, epochs {}..{}",
        model.param_count(),
        items.len(),
        start_epoch,
        tcfg.epochs
    );

    fs::create_dir_all(out).map_err(runtime)?;
    fs::write(out.join("config.json"), run.to_pretty_json() + "\n").map_err(runtime)?;
    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("metrics.jsonl"))
        .map_err(runtime)?;

    let end_epoch = match stop_after {
        Some(n) => tcfg.epochs.min(start_epoch + n),
        None => tcfg.epochs,
    };
    let mut best_score = f64::INFINITY;
    for epoch in start_epoch..end_epoch {
        let m = train_epoch(&mut model, &items, &tcfg, epoch, &mut optim).map_err(runtime)?;
        let dev_nll = match &dev_items {
            Some(d) => Some(eval_nll(&model, d, None).map_err(runtime)?),
            None => None,
        };
        let mut line = serde_json::to_value(&m).map_err(runtime)?;
        if let Some(nll) = dev_nll {
            line["dev_nll"] = json!(nll);
        }
        println!("{line}");
        writeln!(metrics_file, "{line}").map_err(runtime)?;

        let meta = CheckpointMeta {
            model_config: model.cfg.clone(),
            train_config: Some(tcfg.clone()),
            next_epoch: epoch + 1,
            step: optim.step,
        };
        save_checkpoint(&out.join("last.xtrd"), &model, Some(&optim), &meta).map_err(runtime)?;
        let score = dev_nll.unwrap_or(m.mean_nll);
        if score < best_score {
            best_score = score;
            save_checkpoint(&out.join("best.xtrd"), &model, Some(&optim), &meta)
                .map_err(runtime)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// decode

pub struct DecodeFlags {
    pub mode: crate::Mode,
    pub chunk_frames: Option<usize>,
    pub full_attention: bool,
    pub left_context: String,
    pub sink_frames: usize,
    pub beam: usize,
    pub max_symbols: usize,
}

fn input_frames(model: &Model<f64>, input: &TrainInput<f64>) -> Result<usize, CliError> {
    match input {
        TrainInput::Features(f) => Ok(f.dims2().map_err(runtime)?.0),
        TrainInput::Audio(s) => Ok(s.len().div_ceil(model.cfg.frontend.frame_hop)),
    }
}

pub fn decode(
    ckpt: &Path,
    data: &Path,
    out: Option<&Path>,
    flags: &DecodeFlags,
) -> Result<(), CliError> {
    let lc = parse_left_context(&flags.left_context)?;
    let fixed_geometry = if flags.full_attention {
        None
    } else {
        let c = flags.chunk_frames.unwrap_or(16);
        Some(
            MaskGeometry::new(c, lc, flags.sink_frames)
                .map_err(|e| usage(e.to_string()))?,
        )
    };
    let (model, _, _) = load_checkpoint::<f64>(ckpt)
        .map_err(|e| usage(format!("checkpoint {}: {e}", ckpt.display())))?;
    let entries = load_entries(data, false)?;

    let mut lines = Vec::new();
    for entry in &entries {
        let input = load_input(entry)?;
        let t = input_frames(&model, &input)?;
        if t == 0 {
            return Err(usage(format!("utterance {} is empty", entry.utterance_id)));
        }
        let geometry = fixed_geometry.unwrap_or_else(|| MaskGeometry::full_attention(t));
        let cfg = DecodeConfig {
            beam_width: flags.beam,
            mask: geometry,
            max_symbols_per_frame: flags.max_symbols,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;

        let (hyps, chunks, attended, peak) = match flags.mode {
            crate::Mode::Offline => {
                let hyps = match &input {
                    TrainInput::Features(f) => decode_offline(&model, f, &cfg),
                    TrainInput::Audio(s) => decode_offline_audio(&model, s, &cfg),
                }
                .map_err(runtime)?;
                let rep =
                    cost_report(&geometry.with_total(t).map_err(runtime)?).map_err(runtime)?;
                (hyps, rep.per_chunk_attended.len(), rep.total_attended_keys, rep.peak_cache_frames)
            }
            crate::Mode::Streaming => {
                let mut sess = stream_open(&model, cfg).map_err(runtime)?;
                match &input {
                    TrainInput::Features(f) => sess.push_features(f).map_err(runtime)?,
                    TrainInput::Audio(s) => sess.push(s).map_err(runtime)?,
                };
                let (hyps, rep) = sess.finalize().map_err(runtime)?;
                (hyps, rep.chunks, rep.attended_keys_total, rep.peak_cache_frames)
            }
        };
        let best = &hyps[0];
        let text = model.cfg.vocab.decode_words(&best.tokens).map_err(runtime)?;
        let line = json!({
            "utterance_id": entry.utterance_id,
            "text": text,
            "log_prob": best.log_prob,
            "frames": t,
            "chunks": chunks,
            "attended_keys_total": attended,
            "peak_cache_frames": peak,
        });
        println!("{line}");
        lines.push(line);
    }
    let summary = json!({
        "summary": {
            "utterances": lines.len(),
            "checkpoint": ckpt.display().to_string(),
            "config": {
                "mode": match flags.mode {
                    crate::Mode::Offline => "offline",
                    crate::Mode::Streaming => "streaming",
                },
                "full_attention": flags.full_attention,
                "chunk_frames": fixed_geometry.map(|g| g.chunk_frames),
                "left_context": flags.left_context,
                "sink_frames": flags.sink_frames,
                "beam": flags.beam,
                "max_symbols": flags.max_symbols,
            },
        }
    });
    println!("{summary}");
    if let Some(path) = out {
        let mut body = String::new();
        for l in &lines {
            body.push_str(&l.to_string());
            body.push('\n');
        }
        body.push_str(&summary.to_string());
        body.push('\n');
        fs::write(path, body).map_err(runtime)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect-mask

pub fn inspect_mask(
    chunk_frames: usize,
    left_context: &str,
    sink_frames: usize,
    frames: usize,
) -> Result<(), CliError> {
    if frames == 0 {
        return Err(usage("--frames must be >= 1"));
    }
    if frames > 512 {
        return Err(usage(format!("--frames {frames} exceeds the ASCII grid limit of 512")));
    }
    let lc = parse_left_context(left_context)?;
    let spec = MaskGeometry::new(chunk_frames, lc, sink_frames)
        .and_then(|g| g.with_total(frames))
        .map_err(|e| usage(e.to_string()))?;

    let mask = build_mask(&spec);
    for i in 0..frames {
        for j in 0..frames {
            if mask.get(i, j) != allowed(&spec, i, j) {
                return Err(runtime(anyhow::anyhow!(
                    "mask builder disagrees with the membership predicate at ({i}, {j})"
                )));
            }
        }
    }
    let mut grid = String::with_capacity(frames * (frames + 1));
    for i in 0..frames {
        for j in 0..frames {
            grid.push(if mask.get(i, j) { '#' } else { '.' });
        }
        grid.push('\n');
    }
    print!("{grid}");

    let rep = cost_report(&spec).map_err(runtime)?;
    let counts: Vec<usize> = (0..spec.n_chunks())
        .map(|n| attended_count(&spec, n).expect("chunk ordinal in range"))
        .collect();
    debug_assert_eq!(counts, rep.per_chunk_attended);
    println!(
        "{}",
        json!({
            "frames": frames,
            "chunk_frames": chunk_frames,
            "left_context": left_context,
            "sink_frames": sink_frames,
            "per_chunk_attended": counts,
            "total_attended_keys": rep.total_attended_keys,
            "attended_query_key_pairs": rep.attended_query_key_pairs,
            "peak_cache_frames": rep.peak_cache_frames,
            "chunk_ms": rep.chunk_ms,
        })
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-wer

pub fn eval_wer(refs: &Path, hyps: &Path) -> Result<(), CliError> {
    let ref_entries = load_entries(refs, true)?;
    let text = fs::read_to_string(hyps)
        .map_err(|e| usage(format!("cannot read hypotheses {}: {e}", hyps.display())))?;
    let mut by_id = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| usage(format!("hypotheses line {}: {e}", i + 1)))?;
        let (Some(id), Some(text)) = (v.get("utterance_id"), v.get("text")) else {
            continue; // summary or foreign line
        };
        let (Some(id), Some(text)) = (id.as_str(), text.as_str()) else {
            return Err(usage(format!("hypotheses line {}: non-string fields", i + 1)));
        };
        if by_id.insert(id.to_string(), text.to_string()).is_some() {
            return Err(usage(format!("duplicate hypothesis for utterance {id}")));
        }
    }
    let mut ref_texts = Vec::with_capacity(ref_entries.len());
    let mut hyp_texts = Vec::with_capacity(ref_entries.len());
    for e in &ref_entries {
        let hyp = by_id
            .get(&e.utterance_id)
            .ok_or_else(|| usage(format!("no hypothesis for utterance {}", e.utterance_id)))?;
        ref_texts.push(e.text().to_string());
        hyp_texts.push(hyp.clone());
    }
    let report = wer(&ref_texts, &hyp_texts).map_err(runtime)?;
    println!("{}", serde_json::to_string(&report).map_err(runtime)?);
    Ok(())
}
