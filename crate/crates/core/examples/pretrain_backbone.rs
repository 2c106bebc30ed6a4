//! Masked-LM pre-training of the small transformer backbone on the
//! synthetic corpus, then a fill-in-the-blank check.

use pivotvae::config::Config;
use pivotvae::corpus::{gen_synthetic_corpus, Batch, SyntheticSpec, MASK};
use pivotvae::pipeline::{prepare_dataset, pretrain};

fn main() -> pivotvae::Result<()> {
    let mut cfg = Config::synthetic();
    cfg.backbone.steps = 200;
    let corpus = gen_synthetic_corpus(cfg.run.seed, &SyntheticSpec::default())?.corpus;
    let ds = prepare_dataset(&corpus, &cfg, cfg.run.seed)?;
    let (backbone, report) = pretrain(&ds, &cfg, cfg.run.seed)?;
    println!("MLM loss {:.3} -> {:.3}", report.initial_loss, report.final_loss);
    println!("epoch means {:?}", report.epoch_means);

    // Mask each word in turn: template words come back, the anchor and
    // marker slots can only be guessed.
    let s = &ds.test[0];
    println!("sentence: {}", s.raw);
    for pos in 1..s.tokens.len() - 1 {
        let mut masked = s.clone();
        masked.tokens[pos] = MASK;
        let batch = Batch::from_sentences(&[&masked], vec![0])?;
        let predicted = backbone.predict_tokens(&batch)?[pos];
        println!("  {:<10} -> {}", ds.vocab.token(s.tokens[pos]), ds.vocab.token(predicted));
    }
    Ok(())
}
