//! Training-pipeline integration checks: stage-2 memorization on packed
//! instruction data and the masking arithmetic of prefix duplication.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unitflow::codec::UnitSequence;
use unitflow::dataset::{
    cross_modal_parts, pack_multiturn, tokenize_sample, CrossModalSample, Task, TokenizedSample,
};
use unitflow::lm::loss::{nll_loss_sum, scored_positions, Segment};
use unitflow::lm::ModelConfig;
use unitflow::lm::ops::Mat;
use unitflow::trainer::{init_model, run_stage1, run_stage2, StageConfig};
use unitflow::vocab::Vocab;

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

fn cross_modal_corpus(n: usize, k: u32, seed: u64) -> Vec<CrossModalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| CrossModalSample {
            task: if i % 2 == 0 { Task::Asr } else { Task::Tts },
            description: format!("handle recording {i}"),
            units: random_reduced(k, rng.gen_range(4..9), &mut rng),
            transcript: format!("clip number {i}"),
        })
        .collect()
}

#[test]
fn stage2_memorizes_twenty_packed_samples() {
    let k = 16usize;
    let vocab = Vocab::new(k).unwrap();
    let model_cfg = ModelConfig {
        layers: 2,
        model_dim: 64,
        heads: 2,
        ffn_dim: 128,
        max_len: 256,
        vocab_size: vocab.total_size() as usize,
    };
    let samples = cross_modal_corpus(20, k as u32, 21);
    let items: Vec<TokenizedSample> = samples
        .iter()
        .map(|s| {
            let (prefix, target) = cross_modal_parts(s);
            tokenize_sample(&vocab, &prefix, &target).unwrap()
        })
        .collect();
    let (packs, dropped) = pack_multiturn(&items, 256, 22);
    assert_eq!(dropped, 0);

    // a brief stage-1 run provides the expanded-embedding initial model
    let unit_corpus: Vec<UnitSequence> = samples.iter().map(|s| s.units.clone()).collect();
    let s1 = StageConfig {
        stage: 1,
        batch_size: 8,
        peak_lr: 3e-3,
        max_len: 32,
        steps: 30,
        warmup_steps: 3,
        seed: 23,
        save_every: 0,
        lora: None,
    };
    let (model, _) = run_stage1(&unit_corpus, &vocab, &model_cfg, &s1, None).unwrap();

    let s2 = StageConfig {
        stage: 2,
        batch_size: 8,
        peak_lr: 3e-3,
        max_len: 256,
        steps: 1000,
        warmup_steps: 50,
        seed: 24,
        save_every: 0,
        lora: None,
    };
    let (_, report) = run_stage2(&packs, model, &s2, None).unwrap();
    let final_loss = *report.losses.last().unwrap();
    assert!(final_loss < 0.2, "final masked NLL {final_loss}");
}

#[test]
fn duplicating_prefix_content_never_adds_loss_terms() {
    let vocab = Vocab::new(8).unwrap();
    let model_cfg = ModelConfig {
        layers: 2,
        model_dim: 32,
        heads: 2,
        ffn_dim: 64,
        max_len: 128,
        vocab_size: vocab.total_size() as usize,
    };
    let model = init_model(&model_cfg, &vocab, 31).unwrap();

    let prefix = vocab.encode("[Human]:say it<eoh>.[SpeechGPT]: ").unwrap();
    let target = vocab.encode("ok<eos>.").unwrap();
    let mut ids = prefix.clone();
    ids.extend_from_slice(&target);
    let segments = vec![Segment::new(0, prefix.len(), ids.len())];

    // duplicated-prefix variant: prefix content appears twice, targets fixed
    let mut ids2 = prefix.clone();
    ids2.extend_from_slice(&prefix);
    ids2.extend_from_slice(&target);
    let segments2 = vec![Segment::new(0, prefix.len() * 2, ids2.len())];

    assert_eq!(
        scored_positions(&segments).len(),
        scored_positions(&segments2).len(),
        "unmasked-position count must not change"
    );

    let logits: Mat<f32> = model.forward(&ids, None).unwrap();
    let (_, count) = nll_loss_sum(&logits, &ids, &segments).unwrap();
    let logits2: Mat<f32> = model.forward(&ids2, None).unwrap();
    let (_, count2) = nll_loss_sum(&logits2, &ids2, &segments2).unwrap();
    assert_eq!(count, count2);
}
