//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always print; exits nonzero if any fails.

mod common;

use std::time::{Duration, Instant};

use pivotvae::config::Config;
use pivotvae::corpus::{detokenize, gen_synthetic_corpus, marker_style, SyntheticSpec};
use pivotvae::metrics::{anchor_overlap, geometric_mean, spearman};
use pivotvae::pipeline::{run_experiment, Experiment};
use pivotvae::rng::rng_from_seed;
use pivotvae::scorer::mask_sentence;
use pivotvae::tensor::Tensor;
use pivotvae::trainer::sentence_scores;
use pivotvae::transfer::{evaluate_at, shift_latent, sweep_style_weight, SweepRow};
use pivotvae::vae::{kl_term, style_loss_from_cosine, LatentDistribution};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gm_table() -> Outcome {
    let rows = [
        (91.1, 23.97, 30.78, 8.61),
        (91.7, 18.51, 38.35, 7.75),
        (84.3, 22.82, 25.27, 8.41),
        (83.9, 28.29, 43.60, 8.57),
    ];
    let mut worst = 0.0f64;
    let mut got = Vec::new();
    for (acc, bleu, ppl, want) in rows {
        let g = geometric_mean(acc, bleu, ppl).unwrap();
        worst = worst.max((g - want).abs());
        got.push(format!("{g:.3}"));
    }
    outcome(worst <= 0.01, format!("gm [{}], max |err| {worst:.4}", got.join(", ")))
}

fn gradients() -> Outcome {
    let ops = common::op_errors();
    let worst_op = ops.iter().cloned().fold(("".to_string(), 0.0f32), |a, b| if b.1 > a.1 { b } else { a });
    let attn = common::attention_error();
    let stack = common::transformer_stack_error();
    let e2e = common::stage1_loss_error(0.0);
    let pass = worst_op.1 < common::OP_TOL && attn < common::OP_TOL && stack < common::E2E_TOL && e2e < common::E2E_TOL;
    outcome(
        pass,
        format!(
            "{} ops, worst {} {:.2e}; attention {attn:.2e}; block {stack:.2e}; stage-I loss {e2e:.2e}",
            ops.len(),
            worst_op.0,
            worst_op.1
        ),
    )
}

fn closed_forms() -> Outcome {
    let zero = LatentDistribution {
        mu: vec![0.0; 16],
        log_var: vec![0.0; 16],
    };
    let kl0 = kl_term(&zero);
    let mut rng = rng_from_seed(3);
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let t = Tensor::randn(&[2, 8], 2.0, &mut rng);
        let d = LatentDistribution {
            mu: t.row(0).to_vec(),
            log_var: t.row(1).to_vec(),
        };
        min_kl = min_kl.min(kl_term(&d));
    }
    let s1 = style_loss_from_cosine(1.0);
    let s0 = style_loss_from_cosine(0.0);
    let z = Tensor::randn(&[8], 1.0, &mut rng).into_data();
    let st = Tensor::randn(&[8], 1.0, &mut rng).into_data();
    let so = Tensor::randn(&[8], 1.0, &mut rng).into_data();
    let w0 = shift_latent(&z, &st, &so, 0.0) == z;
    let same = shift_latent(&z, &st, &st, 1.7) == z;
    let lin = shift_latent(&z, &st, &so, 2.5)
        .iter()
        .zip(shift_latent(&shift_latent(&z, &st, &so, 1.0), &st, &so, 1.5))
        .all(|(a, b)| (a - b).abs() < 1e-5);
    let pass = kl0 == 0.0 && min_kl >= 0.0 && (s1 - 0.31326).abs() <= 1e-4 && (s0 - 2f64.ln()).abs() <= 1e-4 && w0 && same && lin;
    outcome(
        pass,
        format!("KL(0)={kl0}, min KL over 1000 = {min_kl:.3e}, style(1)={s1:.5}, style(0)={s0:.5}, shift identities {w0}/{same}/{lin}"),
    )
}

fn masking(exp: &Experiment) -> Outcome {
    let test = &exp.dataset.test;
    let scores = sentence_scores(&exp.stage1.backbone, &exp.scorer, test).unwrap();
    let worst_sum = scores
        .iter()
        .map(|a| (a.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let (s, alpha) = (&test[0], &scores[0]);
    let trials = 10_000;
    let mut rng = rng_from_seed(11);
    let mut selected = 0usize;
    let mut hits = vec![0usize; alpha.len()];
    for _ in 0..trials {
        let (_, plan) = mask_sentence(s, alpha, 0.5, &mut rng).unwrap();
        if plan.selected {
            selected += 1;
            for (h, &m) in hits.iter_mut().zip(&plan.masked) {
                *h += m as usize;
            }
        }
    }
    let sel_sigma = (0.25 / trials as f64).sqrt();
    let sel_rate = selected as f64 / trials as f64;
    let sel_ok = (sel_rate - 0.5).abs() <= 3.0 * sel_sigma;
    let mut worst_z = 0.0f64;
    for (&h, &a) in hits.iter().zip(alpha) {
        let a = a as f64;
        let sigma = (a * (1.0 - a) / selected as f64).sqrt().max(1e-12);
        worst_z = worst_z.max(((h as f64 / selected as f64) - a).abs() / sigma);
    }
    outcome(
        sel_ok && worst_z <= 3.0 && worst_sum <= 1e-5,
        format!(
            "selection {sel_rate:.4} (3σ {:.4}); worst per-token |z| {worst_z:.2} over {} tokens; max |Σα−1| {worst_sum:.1e} on {} sentences",
            3.0 * sel_sigma,
            alpha.len(),
            test.len()
        ),
    )
}

fn frozen(exp: &Experiment) -> Outcome {
    let b0 = &exp.backbone_pretrained;
    let b1 = exp.stage1.backbone.store.checksum();
    let b2 = exp.stage2.backbone.store.checksum();
    let s1 = exp.stage1.style.checksum();
    let s2 = exp.stage2.style.checksum();
    let pass = *b0 == b1 && b1 == b2 && s1 == s2;
    outcome(
        pass,
        format!("backbone {} / {} / {}; style table {} / {}", &b0[..12], &b1[..12], &b2[..12], &s1[..12], &s2[..12]),
    )
}

/// Row with the highest GM (first on ties).
fn best_row(rows: &[SweepRow]) -> &SweepRow {
    rows.iter().fold(&rows[0], |a, b| if b.report.gm > a.report.gm { b } else { a })
}

fn end_to_end(exp: &Experiment, elapsed: Duration, spec: &SyntheticSpec, cfg: &Config) -> Outcome {
    let best = best_row(&exp.stage2_sweep);
    let ds = &exp.dataset;
    let judges = exp.eval.judges();
    let (_, outputs) = evaluate_at(&exp.stage2, &ds.vocab, &ds.test, best.w, cfg.transfer.max_len, &judges).unwrap();
    let is_anchor = |w: &str| spec.anchor_lexicon.iter().any(|a| a == w);
    let overlaps: Vec<f64> = ds
        .test
        .iter()
        .zip(&outputs)
        .filter_map(|(s, o)| anchor_overlap(&detokenize(&s.tokens, &ds.vocab), o, is_anchor))
        .collect();
    let overlap = 100.0 * overlaps.iter().sum::<f64>() / overlaps.len().max(1) as f64;
    let cls = 100.0 * exp.eval.classifier_held_out_accuracy;
    let pass = elapsed < Duration::from_secs(30 * 60) && best.report.acc >= 90.0 && overlap >= 70.0 && cls >= 99.0;
    outcome(
        pass,
        format!(
            "pipeline {:.0}s; best w {} acc {:.1} anchor overlap {overlap:.1} (bleu {:.1}, ppl {:.2}); eval classifier {cls:.1}",
            elapsed.as_secs_f64(),
            best.w,
            best.report.acc,
            best.report.bleu,
            best.report.ppl
        ),
    )
}

fn trend(exp: &Experiment) -> Outcome {
    let rows = &exp.stage2_sweep;
    let w: Vec<f64> = rows.iter().map(|r| r.w as f64).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.report.acc).collect();
    let bleu: Vec<f64> = rows.iter().map(|r| r.report.bleu).collect();
    let ra = spearman(&w, &acc);
    let rb = spearman(&w, &bleu);
    outcome(
        ra >= 0.8 && rb <= -0.8,
        format!("acc {acc:.1?} rho {ra:.3}; bleu {bleu:.1?} rho {rb:.3}"),
    )
}

fn pivots(exp: &Experiment, spec: &SyntheticSpec) -> Outcome {
    let ds = &exp.dataset;
    let scores = sentence_scores(&exp.stage1.backbone, &exp.scorer, &ds.test).unwrap();
    let mut wins = 0usize;
    let mut counted = 0usize;
    for (s, a) in ds.test.iter().zip(&scores) {
        let (mut m, mut an) = (Vec::new(), Vec::new());
        for (&t, &x) in s.content().iter().zip(a) {
            let w = ds.vocab.token(t);
            if marker_style(spec, w).is_some() {
                m.push(x);
            } else if spec.anchor_lexicon.iter().any(|x| x == w) {
                an.push(x);
            }
        }
        if m.is_empty() || an.is_empty() {
            continue;
        }
        counted += 1;
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        wins += (mean(&m) > mean(&an)) as usize;
    }
    let rate = 100.0 * wins as f64 / counted.max(1) as f64;
    outcome(rate >= 95.0, format!("marker > anchor mean α on {wins}/{counted} sentences ({rate:.1}%)"))
}

/// Stage-I weights searched for an accuracy match; stage I reaches a given
/// accuracy at larger `w` than stage II, so the grid extends past the sweep.
const STAGE1_MATCH_GRID: [f32; 8] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

/// Stage-II weight: best GM of its sweep. Stage-I weight: closest accuracy
/// on `STAGE1_MATCH_GRID`, ties to the smaller weight.
fn matched_pair(exp: &Experiment, cfg: &Config) -> (SweepRow, SweepRow) {
    let two = best_row(&exp.stage2_sweep).clone();
    let judges = exp.eval.judges();
    let ds = &exp.dataset;
    let rows = sweep_style_weight(&exp.stage1, &ds.vocab, &ds.test, &STAGE1_MATCH_GRID, cfg.transfer.max_len, &judges).unwrap();
    let one = rows
        .iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if (b.report.acc - two.report.acc).abs() <= (r.report.acc - two.report.acc).abs() => Some(b),
            _ => Some(r),
        })
        .unwrap()
        .clone();
    (one, two)
}

fn stage2_benefit(runs: &[&Experiment], cfg: &Config) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for exp in runs {
        let (one, two) = matched_pair(exp, cfg);
        let close = (one.report.acc - two.report.acc).abs() <= 2.0;
        let ok = close && two.report.bleu >= one.report.bleu && two.report.ppl <= one.report.ppl * 1.05;
        wins += ok as usize;
        parts.push(format!(
            "[I w{} acc {:.1} bleu {:.1} ppl {:.2} | II w{} acc {:.1} bleu {:.1} ppl {:.2} -> {}]",
            one.w,
            one.report.acc,
            one.report.bleu,
            one.report.ppl,
            two.w,
            two.report.acc,
            two.report.bleu,
            two.report.ppl,
            if ok { "ok" } else { "no" }
        ));
    }
    outcome(wins >= 2, format!("{wins}/{} seeds: {}", runs.len(), parts.join(" ")))
}

fn determinism(corpus: &pivotvae::corpus::StyleCorpus) -> Outcome {
    let mut cfg = Config::synthetic();
    cfg.backbone.steps = 40;
    cfg.train.stage1_steps = 60;
    cfg.train.stage2_epochs = 2;
    cfg.scorer.steps = 30;
    cfg.eval.char_steps = 40;
    let a = run_experiment(corpus, &cfg).unwrap();
    let b = run_experiment(corpus, &cfg).unwrap();
    let json = |e: &Experiment| serde_json::to_string(&e.stage2_sweep).unwrap();
    let same_ck = a.summary(cfg.run.seed) == b.summary(cfg.run.seed);
    let same_eval = json(&a) == json(&b);
    outcome(
        same_ck && same_eval,
        format!("checkpoint checksums equal: {same_ck}; evaluation JSON equal: {same_eval}"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {:<22} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gm-table", gm_table());
    report(2, "gradients", gradients());
    report(3, "closed-forms", closed_forms());

    let spec = SyntheticSpec::default();
    let base = Config::synthetic();
    let corpus_for = |seed: u64| gen_synthetic_corpus(seed, &spec).unwrap().corpus;
    let run = |seed: u64| {
        let mut cfg = base.clone();
        cfg.run.seed = seed;
        let t = Instant::now();
        let exp = run_experiment(&corpus_for(seed), &cfg).unwrap();
        (exp, t.elapsed())
    };
    let seeds = [base.run.seed, base.run.seed + 1, base.run.seed + 2];
    let (first, elapsed) = run(seeds[0]);

    report(4, "masking-statistics", masking(&first));
    report(5, "frozen-parameters", frozen(&first));
    report(6, "end-to-end", end_to_end(&first, elapsed, &spec, &base));
    report(7, "weight-trend", trend(&first));
    report(8, "pivot-importance", pivots(&first, &spec));
    let (second, _) = run(seeds[1]);
    let (third, _) = run(seeds[2]);
    report(9, "stage2-benefit", stage2_benefit(&[&first, &second, &third], &base));
    report(10, "determinism", determinism(&corpus_for(seeds[0])));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing: {failed:?}");
        std::process::exit(1);
    }
}
