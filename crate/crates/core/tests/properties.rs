use proptest::prelude::*;

use pivotvae::corpus::{batch_by_tokens, detokenize, tokenize, Sentence, Vocab, BOS, EOS, MASK};
use pivotvae::metrics::{bleu_score, geometric_mean};
use pivotvae::nn::{Param, ParamStore};
use pivotvae::persist::{Checkpoint, Component, ComponentTag};
use pivotvae::rng::rng_from_seed;
use pivotvae::scorer::{importance_from_qk, mask_sentence};
use pivotvae::tensor::Tensor;
use pivotvae::transfer::{adjust_latent, shift_latent, TransferRequest};
use pivotvae::vae::{kl_term, LatentDistribution, StyleEmbeddingTable};

fn vec_f32(n: usize, lo: f32, hi: f32) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(lo..hi, n)
}

fn sentence(tokens: Vec<usize>, style: usize) -> Sentence {
    let mut t = vec![BOS];
    t.extend(tokens);
    t.push(EOS);
    Sentence {
        raw: String::new(),
        tokens: t,
        style,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kl_is_nonnegative(d in 1usize..16, seed in any::<u64>()) {
        let t = Tensor::randn(&[2, d], 2.0, &mut rng_from_seed(seed));
        let dist = LatentDistribution { mu: t.row(0).to_vec(), log_var: t.row(1).to_vec() };
        prop_assert!(kl_term(&dist) >= 0.0);
    }

    #[test]
    fn latent_shift_is_linear_in_weight(
        z in vec_f32(6, -3.0, 3.0),
        st in vec_f32(6, -2.0, 2.0),
        so in vec_f32(6, -2.0, 2.0),
        a in 0.0f32..3.0,
        b in 0.0f32..3.0,
    ) {
        let ab = shift_latent(&z, &st, &so, a + b);
        let twice = shift_latent(&shift_latent(&z, &st, &so, a), &st, &so, b);
        for (x, y) in ab.iter().zip(&twice) {
            prop_assert!((x - y).abs() < 1e-4);
        }
        prop_assert_eq!(shift_latent(&z, &st, &so, 0.0), z.clone());
        prop_assert_eq!(shift_latent(&z, &st, &st, a), z);
    }

    #[test]
    fn adjust_swaps_direction(z in vec_f32(4, -1.0, 1.0), w in 0.0f32..3.0, seed in any::<u64>()) {
        let table = StyleEmbeddingTable::new(2, 4, 1.0, &mut rng_from_seed(seed));
        let fwd = TransferRequest { from: 0, to: 1, weight: w, max_len: 8 };
        let back = TransferRequest { from: 1, to: 0, weight: w, max_len: 8 };
        let round = adjust_latent(&adjust_latent(&z, &table, &fwd).unwrap(), &table, &back).unwrap();
        for (x, y) in round.iter().zip(&z) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn corpus_bleu_ignores_pair_order(
        pairs in prop::collection::vec(
            (prop::collection::vec(0u8..6, 1..8), prop::collection::vec(0u8..6, 1..8)),
            1..6,
        ),
        rot in 0usize..6,
    ) {
        let text = |v: &Vec<u8>| v.iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" ");
        let hyps: Vec<String> = pairs.iter().map(|(h, _)| text(h)).collect();
        let refs: Vec<Vec<String>> = pairs.iter().map(|(_, r)| vec![text(r)]).collect();
        let k = rot % pairs.len();
        let (mut h2, mut r2) = (hyps.clone(), refs.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        let a = bleu_score(&hyps, &refs).unwrap();
        let b = bleu_score(&h2, &r2).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn batches_partition_the_corpus(
        lens in prop::collection::vec(1usize..12, 1..40),
        budget in 14usize..64,
        seed in any::<u64>(),
    ) {
        let sents: Vec<Sentence> = lens.iter().map(|&n| sentence(vec![7; n], n % 2)).collect();
        let batches = batch_by_tokens(&sents, budget, &mut rng_from_seed(seed)).unwrap();
        let mut seen = vec![0usize; sents.len()];
        for b in &batches {
            let tokens: usize = b.indices.iter().map(|&i| sents[i].tokens.len()).sum();
            prop_assert!(tokens <= budget || b.batch == 1);
            for (r, &i) in b.indices.iter().enumerate() {
                seen[i] += 1;
                let row = &b.ids[r * b.len..r * b.len + sents[i].tokens.len()];
                prop_assert_eq!(row, sents[i].tokens.as_slice());
                prop_assert_eq!(b.styles[r], sents[i].style);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn masking_only_touches_content(
        content in prop::collection::vec(5usize..30, 1..12),
        seed in any::<u64>(),
        fraction in 0.0f64..=1.0,
    ) {
        let s = sentence(content.clone(), 0);
        let mut rng = rng_from_seed(seed);
        let scores: Vec<f32> = (0..content.len()).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        let (m, plan) = mask_sentence(&s, &scores, fraction, &mut rng).unwrap();
        prop_assert_eq!(m.tokens.len(), s.tokens.len());
        prop_assert_eq!(m.tokens[0], BOS);
        prop_assert_eq!(*m.tokens.last().unwrap(), EOS);
        prop_assert_eq!(plan.draws.len(), content.len());
        for (j, (&a, &b)) in s.content().iter().zip(m.content()).enumerate() {
            if plan.masked[j] {
                prop_assert_eq!(b, MASK);
            } else {
                prop_assert_eq!(a, b);
            }
        }
        if !plan.selected {
            prop_assert_eq!(&m.tokens, &s.tokens);
        }
    }

    #[test]
    fn importance_is_a_distribution(
        heads in 1usize..4,
        n in 1usize..10,
        gamma in 0.01f32..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = rng_from_seed(seed);
        let q: Vec<Vec<f32>> = (0..heads).map(|_| Tensor::randn(&[4], 1.0, &mut rng).into_data()).collect();
        let k: Vec<Vec<Vec<f32>>> = (0..heads)
            .map(|_| (0..n).map(|_| Tensor::randn(&[4], 1.0, &mut rng).into_data()).collect())
            .collect();
        let a = importance_from_qk(&q, &k, gamma).unwrap();
        let total: f64 = a.iter().map(|&x| x as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-5);
        prop_assert!(a.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn tokenize_round_trips_known_words(words in prop::collection::vec(0usize..5, 1..10)) {
        let lex = ["food", "was", "great", "the", "staff"];
        let v = Vocab::build(["food was great the staff"], 1).unwrap();
        let raw = words.iter().map(|&i| lex[i].to_uppercase()).collect::<Vec<_>>().join("  ");
        let t = tokenize(&raw, &v, 0, 64).unwrap();
        let back = detokenize(&t.sentence.tokens, &v);
        prop_assert_eq!(back, words.iter().map(|&i| lex[i]).collect::<Vec<_>>().join(" "));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(values in prop::collection::vec(any::<f32>(), 1..20), seed in any::<u64>()) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![values.len()], values.clone()).unwrap());
        let mut ck = Checkpoint::new(serde_json::json!({"k": 1}), Some(vec!["a".into()]), seed);
        ck.put(Component::from_store(ComponentTag::Vae, &store, serde_json::json!({})));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let p: &Param = &back.require(ComponentTag::Vae).unwrap().params[0];
        let bits: Vec<u32> = p.value.data().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(bits, values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.seed, seed);
    }

    #[test]
    fn geometric_mean_is_monotone(acc in 1.0f64..100.0, bleu in 1.0f64..100.0, ppl in 1.5f64..100.0, d in 0.1f64..10.0) {
        let base = geometric_mean(acc, bleu, ppl).unwrap();
        prop_assert!(geometric_mean(acc + d, bleu, ppl).unwrap() > base);
        prop_assert!(geometric_mean(acc, bleu + d, ppl).unwrap() > base);
        prop_assert!(geometric_mean(acc, bleu, ppl + d).unwrap() < base);
    }
}
