//! Builds a small graph, runs reverse-mode autodiff and checks the result
//! against central finite differences.

use pivotvae::rng::rng_from_seed;
use pivotvae::tensor::gradcheck::{finite_diff_check, GradCheckOptions};
use pivotvae::tensor::{Graph, Tensor};

fn main() -> pivotvae::Result<()> {
    let mut rng = rng_from_seed(1);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 2], 1.0, &mut rng);

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let wv = g.param(w.clone());
    let h = g.matmul(xv, wv)?;
    let h = g.tanh(h);
    let loss = g.sum(h);
    g.backward(loss)?;
    println!("loss = {:.5}", g.value(loss).item());
    println!("dL/dW = {:?}", g.grad(wv).unwrap());

    let report = finite_diff_check(
        &[("x", x), ("w", w)],
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.tanh(h);
            Ok(g.sum(h))
        },
        &GradCheckOptions::default(),
    )?;
    print!("{report}");
    println!("max relative error {:.2e}", report.max_rel_error());
    Ok(())
}
