use super::*;
use crate::personality::trait_to_template;

#[test]
fn same_seed_gives_byte_identical_corpus() {
    let a = synth_corpus(13, 50, 8).unwrap();
    let b = synth_corpus(13, 50, 8).unwrap();
    assert_eq!(a, b);
    let c = synth_corpus(14, 50, 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generator_rejects_tiny_requests() {
    assert!(synth_corpus(1, 5, 8).is_err());
    assert!(synth_corpus(1, 50, 1).is_err());
}

#[test]
fn paired_traits_are_balanced() {
    let samples = synth_corpus(13, 1000, 10).unwrap();
    let (chi, df) = pairing_chi_square(&samples);
    assert!(df >= 4, "expected several trait pairs, got {df}");
    // 0.999 quantile of chi-square with 10 dof is 29.6; anything near that
    // on a fair coin construction indicates a generator bug.
    assert!(chi < 35.0, "chi-square {chi} over {df} pairs");
}

#[test]
fn context_never_identifies_target() {
    // The target speaker's name appears only in the `target_speaker` field;
    // both context speakers are symmetric candidates.
    let samples = synth_corpus(21, 200, 6).unwrap();
    let mut as_first = 0usize;
    for s in &samples {
        let speakers: Vec<&str> = {
            let mut v: Vec<&str> = s.turns.iter().map(|t| t.speaker.as_str()).collect();
            v.dedup();
            v
        };
        assert!(speakers.contains(&s.target_speaker.as_str()));
        if s.target_speaker == s.turns[0].speaker {
            as_first += 1;
        }
    }
    assert!(as_first > 60 && as_first < 140, "target choice skewed: {as_first}/200");
}

#[test]
fn marker_and_response_words_come_from_templates() {
    for t in crate::personality::ALL_TRAITS {
        let text = trait_to_template(t).template_text;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        assert!(tokens.contains(&trait_marker(t)), "{t}: marker not in template");
        let (w1, w2) = trait_response_words(t);
        assert!(tokens.contains(&w1), "{t}: {w1} not in template");
        assert!(tokens.contains(&w2), "{t}: {w2} not in template");
        // Words must be unique to their own template.
        for other in crate::personality::ALL_TRAITS {
            if other == t {
                continue;
            }
            let other_text = trait_to_template(other).template_text;
            let other_tokens: Vec<&str> = other_text.split_whitespace().collect();
            for w in [trait_marker(t), w1, w2] {
                assert!(!other_tokens.contains(&w), "{w} leaks into {other}");
            }
        }
    }
}

#[test]
fn blind_oracle_capped_while_aware_oracle_is_exact() {
    let train = synth_corpus(13, 500, 10).unwrap();
    let test = synth_corpus(14, 200, 10).unwrap();
    let blind = blind_oracle_trait_accuracy(&train, &test);
    let aware = aware_oracle_trait_accuracy(&test);
    assert!(blind <= 0.55, "blind oracle beat its ceiling: {blind}");
    assert!(blind >= 0.30, "blind oracle suspiciously weak: {blind}");
    assert!((aware - 1.0).abs() < 1e-12);
}

#[test]
fn score_trait_tokens_counts_slots() {
    let samples = synth_corpus(5, 10, 4).unwrap();
    let s = &samples[0];
    let gold = s.response_tokens();
    assert_eq!(score_trait_tokens(s, &gold), (2, 2));
    let mut wrong = gold.clone();
    wrong[TRAIT_TOKEN_SLOTS[0]] = "banana".into();
    assert_eq!(score_trait_tokens(s, &wrong), (1, 2));
    assert_eq!(score_trait_tokens(s, &[]), (0, 2));
}

#[test]
fn jsonl_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let samples = synth_corpus(13, 25, 5).unwrap();
    save_jsonl(&path, &samples).unwrap();
    let report = load_jsonl(&path, LoadMode::Evaluation).unwrap();
    assert!(report.warnings.is_empty());
    assert_eq!(report.samples, samples);
}

#[test]
fn withhold_mode_strips_hidden_traits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let samples = synth_corpus(13, 25, 5).unwrap();
    save_jsonl(&path, &samples).unwrap();
    let report = load_jsonl(&path, LoadMode::WithholdTraits).unwrap();
    assert!(report.samples.iter().all(|s| s.hidden_trait.is_none()));
    assert_eq!(report.samples.len(), samples.len());
}

#[test]
fn empty_file_loads_empty_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    let report = load_jsonl(&path, LoadMode::Evaluation).unwrap();
    assert!(report.samples.is_empty());
    assert_eq!(report.warnings.len(), 1);
}

#[test]
fn malformed_line_is_rejected_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mixed.jsonl");
    let good = synth_corpus(13, 12, 4).unwrap();
    let mut text = String::new();
    for (i, s) in good.iter().enumerate() {
        if i == 3 {
            // Missing target_speaker.
            text.push_str(r#"{"turns":[{"speaker":"x","utterance":"hi"}],"target_response":"yo"}"#);
            text.push('\n');
        }
        text.push_str(&serde_json::to_string(s).unwrap());
        text.push('\n');
    }
    std::fs::write(&path, text).unwrap();
    let report = load_jsonl(&path, LoadMode::Evaluation).unwrap();
    assert_eq!(report.samples.len(), 12);
    assert_eq!(report.warnings.len(), 1);
    assert_eq!(report.warnings[0].line, 4);
}

#[test]
fn too_many_bad_lines_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "not json\nstill not json\n{\"nope\":1}\n").unwrap();
    assert!(load_jsonl(&path, LoadMode::Evaluation).is_err());
}

#[test]
fn vocab_min_freq_and_unk() {
    let stream: Vec<String> = ["a", "a", "b"].iter().map(|s| s.to_string()).collect();
    let vocab = Vocabulary::build(std::iter::once(stream.as_slice()), 1);
    assert_ne!(vocab.id("a"), UNK_ID);
    assert_ne!(vocab.id("b"), UNK_ID);

    let vocab = Vocabulary::build(std::iter::once(stream.as_slice()), 2);
    assert_ne!(vocab.id("a"), UNK_ID);
    assert_eq!(vocab.id("b"), UNK_ID);
    assert_eq!(vocab.id("never-seen"), UNK_ID);
}

#[test]
fn vocab_reserved_ids_and_determinism() {
    let s1: Vec<String> = "arre party ka scene hai".split_whitespace().map(str::to_string).collect();
    let s2: Vec<String> = vec![speaker_tag("asha"), speaker_tag("bablu")];
    let v1 = Vocabulary::build([s1.as_slice(), s2.as_slice()].into_iter(), 1);
    let v2 = Vocabulary::build([s1.as_slice(), s2.as_slice()].into_iter(), 1);
    assert_eq!(v1, v2);
    assert_eq!(v1.id("<pad>"), PAD_ID);
    assert_eq!(v1.id("<bos>"), BOS_ID);
    assert_eq!(v1.id("<eos>"), EOS_ID);
    assert_eq!(v1.id("<unk>"), UNK_ID);
    // Speaker tags precede frequency-ordered tokens.
    assert_eq!(v1.id(&speaker_tag("asha")), 4);
    assert_eq!(v1.id(&speaker_tag("bablu")), 5);
}

#[test]
fn vocab_roundtrips_all_ids() {
    let samples = synth_corpus(13, 40, 6).unwrap();
    let streams: Vec<Vec<String>> = samples
        .iter()
        .flat_map(|s| [s.context_tokens(), s.response_tokens()])
        .collect();
    let vocab = Vocabulary::build(streams.iter().map(|s| s.as_slice()), 1);
    for id in 0..vocab.len() {
        let token = vocab.token(id).to_string();
        assert_eq!(vocab.encode(&[token])[0], id);
    }
}
