use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::json;

use unitflow::audio::{load_wav, write_wav};
use unitflow::chain::{respond, ChainInstruction, ChainResponseJson};
use unitflow::codec::{
    deduplicate, load_codebook, load_units, quantize, save_codebook, save_units, train_codebook,
    UnitSequence,
};
use unitflow::config::GlobalConfig;
use unitflow::dataset::{
    build_chain_quadruplets, build_cross_modal, bundled_description_pools,
    bundled_text_instructions, chain_parts, cross_modal_parts, load_manifest, load_text_pairs,
    pack_multiturn, read_jsonl, text_pair_parts_of, tokenize_sample, write_jsonl, ChainRecord,
    CrossModalRecord, DescriptionPools, ManifestRecord, PackedRecord, TokenizedSample,
};
use unitflow::error::{Error, Result};
use unitflow::features::{compute_frames, FeatureFrames};
use unitflow::lm::checkpoint::{load_adapters, load_model};
use unitflow::lm::sampling::SamplingConfig;
use unitflow::lm::Model;
use unitflow::synth::synthesize;
use unitflow::t2u::{text_to_units, train_text_to_unit};
use unitflow::templates::ChainFormat;
use unitflow::trainer::{
    derived_seed, run_stage1, run_stage2, run_stage3, StageConfig, TrainingRunReport,
};
use unitflow::vocab::{Vocab, BASE_SIZE};

use crate::{Cli, Commands, TrainOverrides};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => GlobalConfig::load(path)?,
        None => GlobalConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    unitflow::configure_workers(cfg.workers);

    match cli.command {
        Commands::TrainCodebook {
            manifest,
            out,
            k,
            max_iters,
        } => cmd_train_codebook(&cfg, &manifest, &out, k, max_iters),
        Commands::ExtractUnits {
            manifest,
            codebook,
            out,
        } => cmd_extract_units(&cfg, &manifest, &codebook, &out),
        Commands::BuildDataset {
            kind,
            manifest,
            units,
            p,
            descriptions,
            text_pairs,
            mix_ratio,
            t2u,
            formats,
            pack_len,
            out_records,
            out_packed,
        } => match kind.as_str() {
            "cross-modal" => cmd_build_cross_modal(
                &cfg,
                manifest.as_deref(),
                units.as_deref(),
                p,
                descriptions.as_deref(),
                text_pairs.as_deref(),
                mix_ratio,
                pack_len,
                &out_records,
                &out_packed,
            ),
            "chain" => cmd_build_chain(
                &cfg,
                t2u.as_deref(),
                text_pairs.as_deref(),
                &formats,
                pack_len,
                &out_records,
                &out_packed,
            ),
            other => Err(Error::Config(format!(
                "unknown dataset kind '{other}' (expected cross-modal or chain)"
            ))),
        },
        Commands::TrainT2u {
            manifest,
            units,
            out,
            overrides,
        } => cmd_train_t2u(&cfg, &manifest, &units, &out, &overrides),
        Commands::Train {
            stage,
            data,
            init,
            out,
            lora_rank,
            lora_alpha,
            overrides,
        } => cmd_train(
            &cfg,
            stage,
            &data,
            init.as_deref(),
            &out,
            lora_rank,
            lora_alpha,
            &overrides,
        ),
        Commands::Infer {
            format,
            text,
            units,
            wav,
            model,
            adapters,
            codebook,
            out_wav,
            greedy,
            temperature,
            top_k,
            top_p,
            max_new_tokens,
        } => cmd_infer(
            &cfg,
            &format,
            text.as_deref(),
            units.as_deref(),
            wav.as_deref(),
            &model,
            adapters.as_deref(),
            codebook.as_deref(),
            out_wav.as_deref(),
            greedy,
            temperature,
            top_k,
            top_p,
            max_new_tokens,
        ),
        Commands::Synth {
            units,
            units_file,
            line,
            codebook,
            out,
        } => cmd_synth(&cfg, units.as_deref(), units_file.as_deref(), line, &codebook, &out),
        Commands::EvalFormat {
            prompts,
            model,
            adapters,
            greedy,
        } => cmd_eval_format(&cfg, &prompts, &model, adapters.as_deref(), greedy),
    }
}

fn resolve_audio(manifest: &Path, audio_path: &str) -> PathBuf {
    let p = Path::new(audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn manifest_frames(
    cfg: &GlobalConfig,
    manifest_path: &Path,
) -> Result<(Vec<ManifestRecord>, Vec<FeatureFrames>)> {
    let records = load_manifest(manifest_path)?;
    let mut frames = Vec::with_capacity(records.len());
    for rec in &records {
        let wav = load_wav(resolve_audio(manifest_path, &rec.audio_path))?;
        frames.push(compute_frames(&wav, &cfg.features)?);
    }
    Ok((records, frames))
}

fn cmd_train_codebook(
    cfg: &GlobalConfig,
    manifest: &Path,
    out: &Path,
    k: Option<usize>,
    max_iters: Option<usize>,
) -> Result<()> {
    let k = k.unwrap_or(cfg.codebook.k);
    let max_iters = max_iters.unwrap_or(cfg.codebook.max_iters);
    let (_, frames) = manifest_frames(cfg, manifest)?;
    let total: usize = frames.iter().map(|f| f.num_frames).sum();
    eprintln!("training codebook: K={k} over {total} frames");
    let refs: Vec<&FeatureFrames> = frames.iter().collect();
    let cb = train_codebook(&refs, k, derived_seed(cfg.seed, "codebook"), max_iters)?;
    save_codebook(out, &cb)?;
    println!(
        "{}",
        json!({"k": cb.k, "feature_dim": cb.feature_dim, "frames": total, "out": out})
    );
    Ok(())
}

fn cmd_extract_units(
    cfg: &GlobalConfig,
    manifest: &Path,
    codebook: &Path,
    out: &Path,
) -> Result<()> {
    let cb = load_codebook(codebook)?;
    let (records, frames) = manifest_frames(cfg, manifest)?;
    let mut seqs = Vec::with_capacity(frames.len());
    for f in &frames {
        seqs.push(deduplicate(&quantize(f, &cb)?));
    }
    save_units(out, &seqs, cb.k)?;
    eprintln!("extracted {} utterances", records.len());
    println!("{}", json!({"utterances": seqs.len(), "k": cb.k, "out": out}));
    Ok(())
}

fn require<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing required flag {what}")))
}

#[allow(clippy::too_many_arguments)]
fn cmd_build_cross_modal(
    cfg: &GlobalConfig,
    manifest: Option<&Path>,
    units_path: Option<&Path>,
    p: Option<f64>,
    descriptions: Option<&Path>,
    text_pairs: Option<&Path>,
    mix_ratio: Option<f64>,
    pack_len: Option<usize>,
    out_records: &Path,
    out_packed: &Path,
) -> Result<()> {
    let manifest = require(manifest, "--manifest")?;
    let units_path = require(units_path, "--units")?;
    let p = p.unwrap_or(cfg.dataset.p);
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config("p must be in [0, 1]".into()));
    }
    let mix_ratio = mix_ratio.unwrap_or(cfg.dataset.mix_ratio);
    let pack_len = pack_len.unwrap_or(cfg.dataset.cross_pack_len);

    let records = load_manifest(manifest)?;
    let (unit_seqs, k) = load_units(units_path)?;
    let pools: DescriptionPools = match descriptions {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
        None => bundled_description_pools(),
    };
    let samples = build_cross_modal(
        &records,
        &unit_seqs,
        &pools,
        p,
        derived_seed(cfg.seed, "dataset"),
    )?;
    let recs: Vec<CrossModalRecord> = samples.iter().map(CrossModalRecord::from).collect();
    write_jsonl(out_records, &recs)?;

    let pairs = match text_pairs {
        Some(path) => load_text_pairs(path)?,
        None => bundled_text_instructions(),
    };
    // 1:mix_ratio text samples per cross-modal sample, cycling the pool
    let text_count = (samples.len() as f64 / mix_ratio).round() as usize;
    let vocab = Vocab::new(k)?;
    let mut tokenized: Vec<TokenizedSample> = Vec::new();
    for s in &samples {
        let (prefix, target) = cross_modal_parts(s);
        tokenized.push(tokenize_sample(&vocab, &prefix, &target)?);
    }
    let mut text_used = 0usize;
    if !pairs.is_empty() {
        for i in 0..text_count {
            let pair = &pairs[i % pairs.len()];
            let (prefix, target) = text_pair_parts_of(pair);
            tokenized.push(tokenize_sample(&vocab, &prefix, &target)?);
            text_used += 1;
        }
    }
    let (packs, dropped) = pack_multiturn(&tokenized, pack_len, derived_seed(cfg.seed, "pack"));
    let packed: Vec<PackedRecord> = packs.iter().map(PackedRecord::from).collect();
    write_jsonl(out_packed, &packed)?;

    eprintln!(
        "built {} cross-modal samples (+{} text), {} packs, {} dropped",
        samples.len(),
        text_used,
        packs.len(),
        dropped
    );
    println!(
        "{}",
        json!({
            "cross_modal_samples": samples.len(),
            "text_samples": text_used,
            "packs": packs.len(),
            "dropped": dropped,
            "records": out_records,
            "packed": out_packed,
        })
    );
    Ok(())
}

fn parse_formats(spec: &str) -> Result<Vec<ChainFormat>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(ChainFormat::parse(part)?);
    }
    if out.is_empty() {
        return Err(Error::Config("no chain formats selected".into()));
    }
    Ok(out)
}

fn cmd_build_chain(
    cfg: &GlobalConfig,
    t2u: Option<&Path>,
    text_pairs: Option<&Path>,
    formats: &str,
    pack_len: Option<usize>,
    out_records: &Path,
    out_packed: &Path,
) -> Result<()> {
    let t2u_path = require(t2u, "--t2u")?;
    let formats = parse_formats(formats)?;
    let pack_len = pack_len.unwrap_or(cfg.dataset.chain_pack_len);
    let model = load_model(t2u_path)?;
    let vocab = Vocab::new(model.cfg.vocab_size - BASE_SIZE as usize)?;
    let pairs = match text_pairs {
        Some(path) => load_text_pairs(path)?,
        None => bundled_text_instructions(),
    };

    let (quads, dropped_pairs) =
        build_chain_quadruplets(&pairs, |text| text_to_units(text, &model, &vocab))?;
    let mut records = Vec::new();
    for q in &quads {
        for &f in &formats {
            records.push(ChainRecord::new(q, f));
        }
    }
    write_jsonl(out_records, &records)?;

    let mut tokenized = Vec::with_capacity(records.len());
    for r in &records {
        let q = r.quadruplet();
        let (prefix, target) = chain_parts(&q, r.format);
        tokenized.push(tokenize_sample(&vocab, &prefix, &target)?);
    }
    let (packs, dropped) = pack_multiturn(&tokenized, pack_len, derived_seed(cfg.seed, "pack-chain"));
    let packed: Vec<PackedRecord> = packs.iter().map(PackedRecord::from).collect();
    write_jsonl(out_packed, &packed)?;

    eprintln!(
        "built {} quadruplets ({} pairs dropped), {} records, {} packs, {} overlong dropped",
        quads.len(),
        dropped_pairs,
        records.len(),
        packs.len(),
        dropped
    );
    println!(
        "{}",
        json!({
            "quadruplets": quads.len(),
            "dropped_pairs": dropped_pairs,
            "records": records.len(),
            "packs": packs.len(),
            "dropped": dropped,
            "out_records": out_records,
            "out_packed": out_packed,
        })
    );
    Ok(())
}

fn apply_overrides(mut cfg: StageConfig, o: &TrainOverrides) -> StageConfig {
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.peak_lr {
        cfg.peak_lr = v;
    }
    if let Some(v) = o.max_len {
        cfg.max_len = v;
    }
    if let Some(v) = o.warmup_steps {
        cfg.warmup_steps = v;
    }
    if let Some(v) = o.save_every {
        cfg.save_every = v;
    }
    cfg
}

fn finish_training(report: &TrainingRunReport, out: &Path, o: &TrainOverrides) -> Result<()> {
    if let Some(report_path) = &o.report {
        write_jsonl(report_path, &report.step_logs())?;
    }
    println!(
        "{}",
        json!({
            "stage": report.stage,
            "steps": report.losses.len(),
            "final_loss": report.losses.last(),
            "dropped_samples": report.dropped_samples,
            "trainable_parameters": report.trainable_parameters,
            "wall_seconds": report.wall_seconds,
            "out": out,
        })
    );
    Ok(())
}

fn cmd_train_t2u(
    cfg: &GlobalConfig,
    manifest: &Path,
    units_path: &Path,
    out: &Path,
    overrides: &TrainOverrides,
) -> Result<()> {
    let records = load_manifest(manifest)?;
    let (unit_seqs, k) = load_units(units_path)?;
    if records.len() != unit_seqs.len() {
        return Err(Error::MisalignedInputs {
            left: records.len(),
            right: unit_seqs.len(),
        });
    }
    let vocab = Vocab::new(k)?;
    let pairs: Vec<(String, UnitSequence)> = records
        .into_iter()
        .zip(unit_seqs)
        .map(|(r, u)| (r.transcript, u))
        .collect();
    let train_cfg = apply_overrides(cfg.resolved_t2u()?, overrides);
    let mut model_cfg = cfg.t2u_model_for_vocab();
    model_cfg.vocab_size = vocab.total_size() as usize;
    eprintln!(
        "training text-to-unit generator on {} pairs for {} steps",
        pairs.len(),
        train_cfg.steps
    );
    let (_, report) = train_text_to_unit(&pairs, &vocab, &model_cfg, &train_cfg, Some(out))?;
    finish_training(&report, out, overrides)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &GlobalConfig,
    stage: u8,
    data: &Path,
    init: Option<&Path>,
    out: &Path,
    lora_rank: Option<usize>,
    lora_alpha: Option<f32>,
    overrides: &TrainOverrides,
) -> Result<()> {
    let mut stage_cfg = apply_overrides(cfg.resolved_stage(stage)?, overrides);
    if stage == 3 {
        let mut lora = stage_cfg.lora.unwrap_or_default();
        if let Some(r) = lora_rank {
            lora.rank = r;
        }
        if let Some(a) = lora_alpha {
            lora.alpha = a;
        }
        stage_cfg.lora = Some(lora);
    }

    match stage {
        1 => {
            let (seqs, k) = load_units(data)?;
            let vocab = Vocab::new(k)?;
            let mut model_cfg = cfg.model_for_vocab();
            model_cfg.vocab_size = vocab.total_size() as usize;
            eprintln!(
                "stage 1: {} unit sequences, {} steps",
                seqs.len(),
                stage_cfg.steps
            );
            let (_, report) = run_stage1(&seqs, &vocab, &model_cfg, &stage_cfg, Some(out))?;
            finish_training(&report, out, overrides)
        }
        2 => {
            let init = require(init, "--init")?;
            let model = load_model(init)?;
            let packed: Vec<PackedRecord> = read_jsonl(data)?;
            let packs: Vec<_> = packed.iter().map(|p| p.sequence()).collect();
            eprintln!("stage 2: {} packs, {} steps", packs.len(), stage_cfg.steps);
            let (_, report) = run_stage2(&packs, model, &stage_cfg, Some(out))?;
            finish_training(&report, out, overrides)
        }
        3 => {
            let init = require(init, "--init")?;
            let model = load_model(init)?;
            let packed: Vec<PackedRecord> = read_jsonl(data)?;
            let packs: Vec<_> = packed.iter().map(|p| p.sequence()).collect();
            eprintln!("stage 3: {} packs, {} steps", packs.len(), stage_cfg.steps);
            let (_, report) = run_stage3(&packs, &model, &stage_cfg, Some(out))?;
            finish_training(&report, out, overrides)
        }
        other => Err(Error::BadStage(other)),
    }
}

fn parse_unit_list(s: &str) -> Result<Vec<u32>> {
    let mut units = Vec::new();
    for tok in s.split_whitespace() {
        units.push(
            tok.parse::<u32>()
                .map_err(|_| Error::Config(format!("bad unit '{tok}'")))?,
        );
    }
    Ok(units)
}

fn sampling_from(
    cfg: &GlobalConfig,
    greedy: bool,
    temperature: Option<f32>,
    top_k: Option<usize>,
    top_p: Option<f32>,
    max_new_tokens: Option<usize>,
) -> Result<SamplingConfig> {
    let mut s = cfg.sampling.clone();
    if s.seed == 0 {
        s.seed = derived_seed(cfg.seed, "sampling");
    }
    if let Some(t) = temperature {
        s.temperature = t;
    }
    if let Some(k) = top_k {
        s.top_k = k;
    }
    if let Some(p) = top_p {
        s.top_p = p;
    }
    if let Some(m) = max_new_tokens {
        s.max_new_tokens = m;
    }
    if greedy {
        s.top_k = 1;
    }
    s.validate()?;
    Ok(s)
}

fn vocab_of(model: &Model<f32>) -> Result<Vocab> {
    if model.cfg.vocab_size <= BASE_SIZE as usize {
        return Err(Error::Config(format!(
            "model vocab_size {} has no unit tokens",
            model.cfg.vocab_size
        )));
    }
    Vocab::new(model.cfg.vocab_size - BASE_SIZE as usize)
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    cfg: &GlobalConfig,
    format: &str,
    text: Option<&str>,
    units: Option<&str>,
    wav: Option<&Path>,
    model_path: &Path,
    adapters_path: Option<&Path>,
    codebook_path: Option<&Path>,
    out_wav: Option<&Path>,
    greedy: bool,
    temperature: Option<f32>,
    top_k: Option<usize>,
    top_p: Option<f32>,
    max_new_tokens: Option<usize>,
) -> Result<()> {
    let format = ChainFormat::parse(format)?;
    let model = load_model(model_path)?;
    let adapters = adapters_path.map(load_adapters).transpose()?;
    let codebook = codebook_path.map(load_codebook).transpose()?;
    let vocab = vocab_of(&model)?;
    let sampling = sampling_from(cfg, greedy, temperature, top_k, top_p, max_new_tokens)?;

    let unit_seq;
    let instruction = if format.speech_instruction() {
        let seq = if let Some(units) = units {
            UnitSequence::new(parse_unit_list(units)?, true)
        } else if let Some(wav_path) = wav {
            let cb = codebook.as_ref().ok_or_else(|| {
                Error::Config("--wav input requires --codebook for quantization".into())
            })?;
            let w = load_wav(wav_path)?;
            let frames = compute_frames(&w, &cfg.features)?;
            deduplicate(&quantize(&frames, cb)?)
        } else {
            return Err(Error::Config(
                "speech formats need --units or --wav".into(),
            ));
        };
        unit_seq = seq;
        ChainInstruction::Speech(&unit_seq)
    } else {
        let t = text.ok_or_else(|| Error::Config("text formats need --text".into()))?;
        ChainInstruction::Text(t)
    };

    let result = respond(
        &model,
        adapters.as_ref(),
        &vocab,
        &instruction,
        format,
        &sampling,
        codebook.as_ref(),
        &cfg.synth,
        &cfg.features,
    )?;

    let mut out = serde_json::to_value(ChainResponseJson::from(&result.response))?;
    if let (Some(audio), Some(path)) = (&result.audio, out_wav) {
        write_wav(path, audio)?;
        out["audio_path"] = json!(path);
    }
    println!("{out}");
    Ok(())
}

fn cmd_synth(
    cfg: &GlobalConfig,
    units: Option<&str>,
    units_file: Option<&Path>,
    line: usize,
    codebook_path: &Path,
    out: &Path,
) -> Result<()> {
    let cb = load_codebook(codebook_path)?;
    let seq = if let Some(units) = units {
        let parsed = parse_unit_list(units)?;
        if parsed.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::NotReduced);
        }
        UnitSequence::new(parsed, true)
    } else if let Some(path) = units_file {
        let (seqs, _) = load_units(path)?;
        seqs.get(line)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unit file has no utterance {line}")))?
    } else {
        return Err(Error::Config("need --units or --units-file".into()));
    };
    let w = synthesize(&seq, &cb, &cfg.synth, &cfg.features)?;
    write_wav(out, &w)?;
    println!(
        "{}",
        json!({"units": seq.len(), "samples": w.samples.len(), "out": out})
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptRecord {
    format: ChainFormat,
    text: Option<String>,
    units: Option<Vec<u32>>,
}

fn cmd_eval_format(
    cfg: &GlobalConfig,
    prompts: &Path,
    model_path: &Path,
    adapters_path: Option<&Path>,
    greedy: bool,
) -> Result<()> {
    let model = load_model(model_path)?;
    let adapters = adapters_path.map(load_adapters).transpose()?;
    let vocab = vocab_of(&model)?;
    let records: Vec<PromptRecord> = read_jsonl(prompts)?;
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let base = sampling_from(cfg, greedy, None, None, None, None)?;

    let mut well_formed = 0usize;
    let mut truncated = 0usize;
    for (i, rec) in records.iter().enumerate() {
        let unit_seq;
        let instruction = if rec.format.speech_instruction() {
            let units = rec.units.as_ref().ok_or_else(|| {
                Error::Config(format!("prompt {i}: speech format needs \"units\""))
            })?;
            unit_seq = UnitSequence::new(units.clone(), true);
            ChainInstruction::Speech(&unit_seq)
        } else {
            let text = rec.text.as_deref().ok_or_else(|| {
                Error::Config(format!("prompt {i}: text format needs \"text\""))
            })?;
            ChainInstruction::Text(text)
        };
        let sampling = SamplingConfig {
            seed: derived_seed(base.seed, &format!("prompt-{i}")),
            ..base.clone()
        };
        let result = respond(
            &model,
            adapters.as_ref(),
            &vocab,
            &instruction,
            rec.format,
            &sampling,
            None,
            &cfg.synth,
            &cfg.features,
        )?;
        if result.response.well_formed {
            well_formed += 1;
        }
        if result.response.truncated {
            truncated += 1;
        }
    }
    println!(
        "{}",
        json!({
            "total": records.len(),
            "well_formed": well_formed,
            "rate": well_formed as f64 / records.len() as f64,
            "truncated": truncated,
        })
    );
    Ok(())
}
