//! Trains a model end to end and rewrites sentences into the other style
//! by latent arithmetic, z' = z + w (s_t - s_o), at several weights.
//!
//!     cargo run --release --example style_transfer -- "the soup was bland"

use pivotvae::config::Config;
use pivotvae::corpus::{gen_synthetic_corpus, SyntheticSpec};
use pivotvae::pipeline::run_experiment;
use pivotvae::transfer::{transfer_sentence, TransferRequest};

fn main() -> pivotvae::Result<()> {
    let mut inputs: Vec<String> = std::env::args().skip(1).collect();
    if inputs.is_empty() {
        inputs = vec![
            "the soup was bland".into(),
            "we ordered the pizza and it was awful".into(),
            "our waiter was rude and so was the chef".into(),
        ];
    }
    let cfg = Config::synthetic();
    let corpus = gen_synthetic_corpus(cfg.run.seed, &SyntheticSpec::default())?.corpus;
    let exp = run_experiment(&corpus, &cfg)?;
    let from = corpus.style_id("negative")?;
    let to = corpus.style_id("positive")?;
    for text in &inputs {
        println!("{text}");
        for w in [0.0, 0.5, 1.0, 1.5, 2.5] {
            let req = TransferRequest { from, to, weight: w, max_len: cfg.transfer.max_len };
            let out = transfer_sentence(&exp.stage2, &exp.dataset.vocab, text, &req, cfg.data.max_len)?;
            println!("  w={w:<4} {out}");
        }
    }
    Ok(())
}
