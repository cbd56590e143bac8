use proptest::prelude::*;
use uniseq_core::task::{serialize, Episode, Limits, TaskKind};
use uniseq_core::tokenization::{assemble, train_bpe, BOS, EOS};

const WORDS: [&str; 6] = ["note", "stable", "patient", "chart", "is", "well"];

fn text(idx: &[usize]) -> String {
    idx.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn serialized_pairs_respect_limits(
        context in prop::collection::vec(0usize..6, 1..60),
        question in prop::collection::vec(0usize..6, 1..10),
        answer in prop::collection::vec(0usize..6, 1..20),
        max_src in 1usize..80,
        max_tgt in 2usize..12,
        cap in prop::option::of(1usize..20),
    ) {
        let vocab = assemble(train_bpe(&WORDS, 10), 8, 8).unwrap();
        let episode = Episode::new(TaskKind::QaContext)
            .with_field("Context", &text(&context))
            .with_field("Question", &text(&question))
            .with_target(&text(&answer));
        let limits = Limits { max_src, max_tgt, max_patches: 4, patch_size: 2, field_token_cap: cap };
        let pair = serialize(&episode, &vocab, &limits, 0).unwrap();
        prop_assert!(!pair.source.is_empty() && pair.source.len() <= max_src);
        prop_assert!(pair.target.len() <= max_tgt);
        prop_assert_eq!(pair.target.first(), Some(&BOS));
        prop_assert_eq!(pair.target.last(), Some(&EOS));
        prop_assert_eq!(pair.field_tokens.len(), 2);
        if let Some(cap) = cap {
            prop_assert!(pair.field_tokens.iter().all(|&n| n <= cap));
        }
        // Serialization is a pure function of its inputs.
        prop_assert_eq!(serialize(&episode, &vocab, &limits, 0).unwrap(), pair);
    }
}
