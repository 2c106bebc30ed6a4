//! Generates a two-style synthetic corpus and writes `<style>.txt` files
//! plus `manifest.jsonl` to a directory (default: a temp dir).
//!
//!     cargo run --release --example synthetic_corpus -- [out_dir] [seed]

use std::path::PathBuf;

use pivotvae::corpus::{gen_synthetic_corpus, SyntheticSpec};

fn main() -> pivotvae::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("pivotvae-corpus"));
    let seed = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(7);

    let spec = SyntheticSpec::default();
    let data = gen_synthetic_corpus(seed, &spec)?;
    data.write(&out)?;
    println!("{} sentences in {} styles -> {}", data.corpus.len(), data.corpus.k(), out.display());
    for r in data.records.iter().step_by(spec.n_per_style / 3).take(6) {
        println!("  [{}] {:<45} markers {:?}", spec.style_names[r.style], r.text, r.markers);
    }
    Ok(())
}
