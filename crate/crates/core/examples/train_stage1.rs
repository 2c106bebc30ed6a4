//! Stage I: trains the VAE and the style table on a frozen backbone,
//! streams the JSON-lines step log to stdout and reconstructs a few held-out
//! sentences from the posterior mean.

use pivotvae::config::Config;
use pivotvae::corpus::{gen_synthetic_corpus, SyntheticSpec};
use pivotvae::pipeline::{init_models, prepare_dataset, pretrain};
use pivotvae::trainer::{train_stage1, TrainHooks};
use pivotvae::transfer::{transfer_texts, TransferRequest};

fn main() -> pivotvae::Result<()> {
    let mut cfg = Config::synthetic();
    cfg.train.stage1_steps = 400;
    let seed = cfg.run.seed;
    let corpus = gen_synthetic_corpus(seed, &SyntheticSpec::default())?.corpus;
    let ds = prepare_dataset(&corpus, &cfg, seed)?;
    let (backbone, _) = pretrain(&ds, &cfg, seed)?;
    let mut models = init_models(backbone, &ds, &cfg, seed)?;

    let mut log = Vec::new();
    let history = train_stage1(&mut models, &ds.train, &cfg, seed, &mut TrainHooks { log: Some(&mut log), checkpoint: None })?;
    for line in String::from_utf8_lossy(&log).lines().step_by(50) {
        println!("{line}");
    }
    println!("epoch means {:?}", history.epoch_means);

    // Weight 0 leaves the latent untouched: a plain reconstruction.
    let src: Vec<_> = ds.test.iter().filter(|s| s.style == 0).take(5).cloned().collect();
    let req = TransferRequest { from: 0, to: 1, weight: 0.0, max_len: cfg.transfer.max_len };
    for (s, out) in src.iter().zip(transfer_texts(&models, &ds.vocab, &src, &req, None)?) {
        println!("{:<45} => {out}", s.raw);
    }
    Ok(())
}
