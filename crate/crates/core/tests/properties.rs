use proptest::prelude::*;
use referral_forge::corpus::{mask_credentials, Lexicon};
use referral_forge::explainer::{normalize_shares, segment, ShareStatus};
use referral_forge::improver::{fenced_reply, parse_revision};
use referral_forge::mask;
use referral_forge::metrics::auroc;
use referral_forge::text::{request_text, tokenize};

fn brute_force_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn text_strategy() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("[ROLE]".to_string()),
        Just("[SECRET]".to_string()),
        Just("[".to_string()),
        Just("]".to_string()),
        Just("Google".to_string()),
        Just("senior".to_string()),
        Just("software engineer".to_string()),
        Just("$150k".to_string()),
        Just("5 years".to_string()),
        Just("Seattle".to_string()),
        "[a-zA-Z0-9 .,!?$]{0,12}",
    ];
    prop::collection::vec(piece, 0..12).prop_map(|v| v.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn masking_is_idempotent_and_clean(text in text_strategy()) {
        let lex = Lexicon::new(Default::default()).unwrap();
        let once = mask_credentials(&text, &lex);
        prop_assert!(mask::is_clean(&once));
        prop_assert_eq!(mask_credentials(&once, &lex), once.clone());
        prop_assert!(!once.to_lowercase().contains("google"));
    }

    #[test]
    fn auroc_matches_pairwise_count(
        data in prop::collection::vec((0u8..6, any::<bool>()), 2..80)
    ) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
        let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
        let both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
        prop_assume!(both);
        let fast = auroc(&scores, &labels).unwrap();
        prop_assert!((fast - brute_force_auroc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn positive_total_shares_sum_to_one(raw in prop::collection::vec(-1.0f64..1.0, 1..12)) {
        let s = normalize_shares(raw.clone());
        match s.status {
            ShareStatus::Normal => prop_assert!((s.shares.iter().sum::<f64>() - 1.0).abs() < 1e-9),
            ShareStatus::NegativeTotal => {
                prop_assert!((s.shares.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() < 1e-9)
            }
            ShareStatus::ZeroTotal => prop_assert!(s.shares.iter().all(|&v| v == 0.0)),
        }
    }

    #[test]
    fn segments_partition_tokens(
        title in "[a-zA-Z ]{1,20}",
        body in prop::collection::vec("[a-zA-Z ,]{0,15}[.!?]{0,2}", 0..6).prop_map(|v| v.join(" "))
    ) {
        let spans = segment(&title, &body);
        let n = tokenize(&request_text(&title, &body)).len();
        prop_assert!(spans[0].is_title);
        prop_assert_eq!(spans[0].start, 0);
        prop_assert_eq!(spans.last().unwrap().end, n);
        for w in spans.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert!(w[1].end > w[1].start);
        }
    }

    #[test]
    fn echo_reply_parses_back_exactly(title in "\\PC{0,40}", content in "\\PC{0,200}") {
        prop_assert_eq!(parse_revision(&fenced_reply(&title, &content)).unwrap(), (title, content));
    }
}
