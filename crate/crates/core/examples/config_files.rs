//! Configuration: presets, `key = value` files, overrides and validation.

use pivotvae::config::Config;

fn main() -> pivotvae::Result<()> {
    let text = "# a small run\nrun.seed = 11\ntrain.stage1_steps = 300\ntransfer.weights = 0.5,1,2\n";
    let cfg = Config::parse(text)?;
    println!("seed {} steps {} weights {:?}", cfg.run.seed, cfg.train.stage1_steps, cfg.transfer.weights);

    let mut cfg = Config::synthetic();
    cfg.set("train.free_bits", "0.5")?;
    cfg.validate()?;
    match cfg.clone().set("train.no_such_key", "1") {
        Err(e) => println!("rejected: {e}"),
        Ok(()) => unreachable!(),
    }
    let mut bad = cfg.clone();
    bad.vae.heads = 3;
    println!("validate with 3 heads on d_model 64: {:?}", bad.validate().err().map(|e| e.to_string()));

    println!("--- full-scale preset");
    print!("{}", Config::full_scale().to_text());
    Ok(())
}
