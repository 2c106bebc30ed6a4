//! Stage II: continues from stage I with pivot words masked in the encoder
//! input, style table frozen, early stopping on held-out loss. Prints the
//! masking statistics and compares both stages at one style weight.

use pivotvae::config::Config;
use pivotvae::corpus::{gen_synthetic_corpus, SyntheticSpec};
use pivotvae::pipeline::{init_models, prepare_dataset, pretrain, train_eval_models, train_scorer};
use pivotvae::trainer::{train_stage1, train_stage2, TrainHooks};
use pivotvae::transfer::evaluate_at;

fn main() -> pivotvae::Result<()> {
    let mut cfg = Config::synthetic();
    cfg.train.stage1_steps = 800;
    let seed = cfg.run.seed;
    let corpus = gen_synthetic_corpus(seed, &SyntheticSpec::default())?.corpus;
    let ds = prepare_dataset(&corpus, &cfg, seed)?;
    let (backbone, _) = pretrain(&ds, &cfg, seed)?;
    let mut stage1 = init_models(backbone, &ds, &cfg, seed)?;
    train_stage1(&mut stage1, &ds.train, &cfg, seed, &mut TrainHooks::default())?;
    let (scorer, _) = train_scorer(&stage1, &ds, &cfg, seed)?;

    let mut stage2 = stage1.clone();
    let h = train_stage2(&mut stage2, Some(&scorer), &ds.train, &ds.test, &cfg, seed, &mut TrainHooks::default())?;
    for (epoch, (loss, plan)) in h.held_out_losses.iter().zip(&h.plans).enumerate() {
        println!(
            "epoch {epoch}: held-out {loss:.4}, {}/{} sentences selected, {} tokens masked",
            plan.selected, plan.sentences, plan.masked_tokens
        );
    }
    println!("kept epoch {}", h.best_epoch);

    let eval = train_eval_models(&ds, &cfg, seed)?;
    for (name, m) in [("stage I ", &stage1), ("stage II", &stage2)] {
        let (r, _) = evaluate_at(m, &ds.vocab, &ds.test, 1.5, cfg.transfer.max_len, &eval.judges())?;
        println!("{name} w=1.5  acc {:.1}  bleu {:.1}  ppl {:.3}  gm {:.2}", r.acc, r.bleu, r.ppl, r.gm);
    }
    Ok(())
}
