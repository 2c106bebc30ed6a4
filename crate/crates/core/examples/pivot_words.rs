//! Trains the attention-based style classifier on top of stage I and shows
//! per-word importance scores and one random masking draw per sentence.

use pivotvae::config::Config;
use pivotvae::corpus::{gen_synthetic_corpus, SyntheticSpec};
use pivotvae::pipeline::{init_models, prepare_dataset, pretrain, train_scorer};
use pivotvae::rng::rng_from_seed;
use pivotvae::scorer::mask_sentence;
use pivotvae::trainer::sentence_scores;

fn main() -> pivotvae::Result<()> {
    let cfg = Config::synthetic();
    let seed = cfg.run.seed;
    let corpus = gen_synthetic_corpus(seed, &SyntheticSpec::default())?.corpus;
    let ds = prepare_dataset(&corpus, &cfg, seed)?;
    let (backbone, _) = pretrain(&ds, &cfg, seed)?;
    // The scorer only reads the (frozen) backbone.
    let models = init_models(backbone, &ds, &cfg, seed)?;
    let (scorer, report) = train_scorer(&models, &ds, &cfg, seed)?;
    println!("held-out style accuracy {:.3}", report.held_out_accuracy);

    let test = &ds.test[..6];
    let scores = sentence_scores(&models.backbone, &scorer, test)?;
    let mut rng = rng_from_seed(1);
    for (s, alpha) in test.iter().zip(&scores) {
        let words: Vec<String> = s
            .content()
            .iter()
            .zip(alpha)
            .map(|(&t, a)| format!("{}:{a:.2}", ds.vocab.token(t)))
            .collect();
        println!("{}", words.join(" "));
        let (masked, plan) = mask_sentence(s, alpha, 0.5, &mut rng)?;
        if plan.selected {
            let shown: Vec<&str> = masked.content().iter().map(|&t| ds.vocab.token(t)).collect();
            println!("    masked: {}", shown.join(" "));
        }
    }
    Ok(())
}
