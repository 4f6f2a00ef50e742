//! Scratch harness for tuning the synthetic-corpus training recipe.
//! Run: cargo run --release -p pa3-core --example calibrate -- [strategy] [epochs] [lr]

use std::time::Instant;

use pa3_core::corpus::{score_trait_tokens, synth_corpus, DialogueSample, Vocabulary};
use pa3_core::metrics::{evaluate_decodes, DecodedSample};
use pa3_core::personality::{template_tokens, ALL_TRAITS};
use pa3_core::seq2seq::{
    identify_traits, Injection, Model, ModelConfig, Strategy, TrainConfig, Trainer, TraitMode,
};

fn pipeline_vocab(samples: &[DialogueSample]) -> Vocabulary {
    let mut streams: Vec<Vec<String>> = Vec::new();
    for s in samples {
        streams.push(s.context_tokens());
        streams.push(s.response_tokens());
        streams.push(vec![pa3_core::corpus::speaker_tag(&s.target_speaker)]);
    }
    for t in ALL_TRAITS {
        streams.push(template_tokens(t, false));
        streams.push(template_tokens(t, true));
    }
    Vocabulary::build(streams.iter().map(|s| s.as_slice()), 1)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let strategy = Strategy::parse(args.get(1).map(String::as_str).unwrap_or("pa3_full")).unwrap();
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let d_model: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(64);
    let batch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(8);
    let layers: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(2);

    let all = synth_corpus(13, 600, 10).unwrap();
    let (train, test) = all.split_at(500);
    let mut train_blind: Vec<DialogueSample> = train.to_vec();
    for s in &mut train_blind {
        s.hidden_trait = None;
    }
    let vocab = pipeline_vocab(&train_blind);
    println!("vocab size {}", vocab.len());

    let config = ModelConfig {
        vocab_size: 0,
        d_model,
        d_p: d_model / 4,
        heads: 4,
        encoder_layers: layers,
        decoder_layers: layers,
        classifier_layers: layers,
        axial_groups: 4,
        max_len: 48,
        strategy,
        injection: Injection::FinalEncoderLayer,
        dropout: 0.0,
    };
    let mut model = Model::new(config, vocab, 13).unwrap();
    let tc = TrainConfig {
        learning_rate: lr,
        weight_decay: 1e-4,
        batch_size: batch,
        epochs,
        seed: 13,
        grad_clip: 1.0,
        entropy_weight: args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.05),
        aux_weight: args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.5),
    };
    let mut trainer = Trainer::new(&model, tc).unwrap();

    let t0 = Instant::now();
    for epoch in 0..epochs {
        let loss = trainer
            .train_epoch(&mut model, &train_blind, TraitMode::Soft, epoch)
            .unwrap();
        println!(
            "epoch {epoch:>3} loss {loss:8.4} elapsed {:6.1}s",
            t0.elapsed().as_secs_f64()
        );
    }

    // Trait recovery on the test split.
    if model.has_persona() {
        let report = identify_traits(&model, test).unwrap();
        println!("trait accuracy: {:?}", report.accuracy());
        print!("{}", report.render_table());
    }

    // Decode and score.
    let t1 = Instant::now();
    let mut decodes = Vec::new();
    let mut slot_correct = 0usize;
    let mut slot_total = 0usize;
    for s in test {
        let gen = model.generate(s, 1, None).unwrap();
        let (c, t) = score_trait_tokens(s, &gen.tokens);
        slot_correct += c;
        slot_total += t;
        decodes.push(DecodedSample {
            speaker: s.target_speaker.clone(),
            candidate: gen.tokens,
            reference: s.response_tokens(),
        });
    }
    let scores = evaluate_decodes(strategy.name(), &decodes).unwrap();
    println!(
        "decode {:.1}s | ROUGE-1 {:.2} R2 {:.2} RL {:.2} B1 {:.2} | trait-token acc {:.1}%",
        t1.elapsed().as_secs_f64(),
        scores.rouge1,
        scores.rouge2,
        scores.rouge_l,
        scores.bleu1,
        100.0 * slot_correct as f64 / slot_total as f64
    );
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    for (i, s) in test.iter().take(3).enumerate() {
        let gen = model.generate(s, 1, None).unwrap();
        println!(
            "sample {i}: trait={:?} gold_trait={:?}\n  gen:  {}\n  gold: {}",
            gen.trait_label,
            s.hidden_trait,
            gen.tokens.join(" "),
            s.target_response
        );
    }
}
