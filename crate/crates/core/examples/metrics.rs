//! The evaluation toolkit on its own: corpus BLEU, the geometric-mean
//! summary, the hashed n-gram style classifier and the character-level
//! LSTM language model.

use pivotvae::config::Config;
use pivotvae::corpus::{gen_synthetic_corpus, SyntheticSpec};
use pivotvae::metrics::{bleu_score, geometric_mean, transfer_accuracy, EvalReport};
use pivotvae::pipeline::{prepare_dataset, train_eval_models};

fn main() -> pivotvae::Result<()> {
    let hyps = ["the food was great", "the waiter here is friendly"];
    let refs = vec![vec!["the food was great"], vec!["the waiter here is rude"]];
    println!("BLEU {:.2}", bleu_score(&hyps, &refs)?);
    println!("GM(acc 91.1, bleu 23.97, ppl 30.78) = {:.2}", geometric_mean(91.1, 23.97, 30.78)?);

    let cfg = Config::synthetic();
    let corpus = gen_synthetic_corpus(cfg.run.seed, &SyntheticSpec::default())?.corpus;
    let ds = prepare_dataset(&corpus, &cfg, cfg.run.seed)?;
    let eval = train_eval_models(&ds, &cfg, cfg.run.seed)?;
    println!("classifier held-out accuracy {:.3}", eval.classifier_held_out_accuracy);

    let positive = ["the coffee was lovely", "honestly the room was clean"];
    let garbled = ["coffee the lovely was", "clean was room honestly the"];
    let acc = transfer_accuracy(&eval.classifier, &positive, corpus.style_id("positive")?)?;
    let ppl_ok = eval.lm.perplexity(&positive)?;
    let ppl_bad = eval.lm.perplexity(&garbled)?;
    println!("accuracy as positive {acc:.1}, char PPL fluent {ppl_ok:.2} vs scrambled {ppl_bad:.2}");

    let report = EvalReport::new(acc, ppl_ok, 100.0, positive.len());
    print!("{}", report.table());
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
