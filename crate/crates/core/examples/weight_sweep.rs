//! The whole pipeline (pre-training, stage I, scorer, stage II, judges)
//! followed by a style-weight sweep for each stage, printed as CSV.

use std::time::Instant;

use pivotvae::config::Config;
use pivotvae::corpus::{gen_synthetic_corpus, SyntheticSpec};
use pivotvae::pipeline::run_experiment;
use pivotvae::transfer::sweep_csv;

fn main() -> pivotvae::Result<()> {
    let mut cfg = Config::synthetic();
    if let Ok(seed) = std::env::var("STOWER_SEED") {
        cfg.set("run.seed", &seed)?;
    }
    let corpus = gen_synthetic_corpus(cfg.run.seed, &SyntheticSpec::default())?.corpus;
    let t = Instant::now();
    let exp = run_experiment(&corpus, &cfg)?;
    println!("pipeline finished in {:.0}s (seed {})", t.elapsed().as_secs_f64(), cfg.run.seed);
    println!("-- stage I");
    print!("{}", sweep_csv(&exp.stage1_sweep));
    println!("-- stage II");
    print!("{}", sweep_csv(&exp.stage2_sweep));
    println!("{}", serde_json::to_string_pretty(&exp.summary(cfg.run.seed))?);
    Ok(())
}
