//! Temporary tuning harness for the stage-3 chain memorization recipe.
//! Not part of the deliverable suite; run with --ignored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unitflow::chain::{assemble_prompt, parse_chain_output, ChainInstruction};
use unitflow::codec::UnitSequence;
use unitflow::dataset::{
    chain_parts, cross_modal_parts, pack_multiturn, tokenize_sample, ChainQuadruplet,
    CrossModalSample, Task, TokenizedSample,
};
use unitflow::lm::sampling::{sample, SamplingConfig};
use unitflow::lm::{LoraConfig, Model, ModelConfig};
use unitflow::templates::ALL_CHAIN_FORMATS;
use unitflow::trainer::{run_stage1, run_stage2, run_stage3, StageConfig};
use unitflow::vocab::{Vocab, EOA, EOS};

fn random_reduced(k: u32, len: usize, rng: &mut ChaCha8Rng) -> UnitSequence {
    let mut units: Vec<u32> = Vec::with_capacity(len);
    while units.len() < len {
        let u = rng.gen_range(0..k);
        if units.last() != Some(&u) {
            units.push(u);
        }
    }
    UnitSequence::new(units, true)
}

fn synthetic_quadruplets(n: usize, k: u32, seed: u64) -> Vec<ChainQuadruplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| ChainQuadruplet {
            speech_instruction: random_reduced(k, rng.gen_range(3..7), &mut rng),
            text_instruction: format!("task {i}"),
            text_response: format!("done {i}"),
            speech_response: random_reduced(k, rng.gen_range(3..7), &mut rng),
        })
        .collect()
}

fn build_base(
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    quads: &[ChainQuadruplet],
    s2_steps: usize,
) -> Model<f32> {
    let unit_corpus: Vec<UnitSequence> = quads
        .iter()
        .flat_map(|q| [q.speech_instruction.clone(), q.speech_response.clone()])
        .collect();
    let s1_cfg = StageConfig {
        stage: 1,
        batch_size: 8,
        peak_lr: 3e-3,
        max_len: 32,
        steps: 60,
        warmup_steps: 6,
        seed: 1090,
        save_every: 0,
        lora: None,
    };
    let (model, _) = run_stage1(&unit_corpus, vocab, model_cfg, &s1_cfg, None).unwrap();

    // stage-2 mix: text pairs plus ASR/TTS cross-modal samples
    let mut items: Vec<TokenizedSample> = Vec::new();
    for q in quads {
        let (prefix, target) =
            unitflow::templates::text_pair_parts(&q.text_instruction, &q.text_response);
        items.push(tokenize_sample(vocab, &prefix, &target).unwrap());
        for (task, units) in [
            (Task::Asr, &q.speech_instruction),
            (Task::Tts, &q.speech_response),
        ] {
            let s = CrossModalSample {
                task,
                description: "transcribe or speak".into(),
                units: units.clone(),
                transcript: q.text_response.clone(),
            };
            let (prefix, target) = cross_modal_parts(&s);
            items.push(tokenize_sample(vocab, &prefix, &target).unwrap());
        }
    }
    let (s2_packs, _) = pack_multiturn(&items, 256, 1091);
    let s2_cfg = StageConfig {
        stage: 2,
        batch_size: 8,
        peak_lr: 3e-3,
        max_len: 256,
        steps: s2_steps,
        warmup_steps: (s2_steps / 10).max(1),
        seed: 1092,
        save_every: 0,
        lora: None,
    };
    let (model, _) = run_stage2(&s2_packs, model, &s2_cfg, None).unwrap();
    model
}

#[test]
#[ignore]
fn tune_chain_recipe() {
    let k = 16usize;
    let vocab = Vocab::new(k).unwrap();
    let quads = synthetic_quadruplets(20, k as u32, 109);
    let model_cfg = ModelConfig {
        layers: 2,
        model_dim: 64,
        heads: 2,
        ffn_dim: 128,
        max_len: 512,
        vocab_size: vocab.total_size() as usize,
    };

    let chain_items: Vec<TokenizedSample> = quads
        .iter()
        .flat_map(|q| {
            ALL_CHAIN_FORMATS.iter().map(|&f| {
                let (prefix, target) = chain_parts(q, f);
                tokenize_sample(&vocab, &prefix, &target).unwrap()
            })
        })
        .collect();
    let (chain_packs, _) = pack_multiturn(&chain_items, 512, 1093);

    for (label, s2_steps, rank, alpha, steps, lr) in [
        ("s2-100_r16_lr1e-2_600", 100usize, 16usize, 32.0f32, 600usize, 1e-2f32),
        ("s2-100_r32_lr5e-3_600", 100, 32, 64.0, 600, 5e-3),
        ("s2-30_r16_lr1e-2_600", 30, 16, 32.0, 600, 1e-2),
        ("s2-100_r48_lr1e-2_600", 100, 48, 96.0, 600, 1e-2),
    ] {
        let model = build_base(&vocab, &model_cfg, &quads, s2_steps);
        let s3_cfg = StageConfig {
            stage: 3,
            batch_size: 4,
            peak_lr: lr,
            max_len: 512,
            steps,
            warmup_steps: steps / 20,
            seed: 1094,
            save_every: 0,
            lora: Some(LoraConfig { rank, alpha }),
        };
        let t0 = std::time::Instant::now();
        let (adapters, report) = run_stage3(&chain_packs, &model, &s3_cfg, None).unwrap();

        let greedy = SamplingConfig {
            top_k: 1,
            max_new_tokens: 120,
            seed: 0,
            ..Default::default()
        };
        let mut well = 0usize;
        let mut total = 0usize;
        let mut shown = 0;
        for q in &quads {
            for format in ALL_CHAIN_FORMATS {
                let instruction = if format.speech_instruction() {
                    ChainInstruction::Speech(&q.speech_instruction)
                } else {
                    ChainInstruction::Text(&q.text_instruction)
                };
                let prompt = assemble_prompt(&vocab, &instruction, format).unwrap();
                let generated =
                    sample(&model, &prompt, &greedy, Some(&adapters), &[EOA, EOS]).unwrap();
                let parsed = parse_chain_output(&vocab, &generated.ids, format);
                total += 1;
                if parsed.well_formed {
                    well += 1;
                } else if shown < 3 {
                    shown += 1;
                    eprintln!(
                        "  [{label}] malformed {format:?} trunc={} raw: {:?}",
                        parsed.truncated,
                        vocab.decode_to_string(&generated.ids)
                    );
                }
            }
        }
        eprintln!(
            "[{label}] s3 loss {:.3} -> {:.3}; well-formed {}/{}; {:.1}s",
            report.losses[0],
            report.losses.last().unwrap(),
            well,
            total,
            t0.elapsed().as_secs_f64()
        );
    }
}
