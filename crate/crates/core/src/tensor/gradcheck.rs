//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Options for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation size.
    pub step: f32,
    /// Denominator floor of the relative error, so that near-zero gradients
    /// are compared on an absolute scale.
    pub floor: f32,
    /// Check at most this many coordinates per input (chosen by `seed`).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-2,
            floor: 1e-1,
            max_coords: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f32,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f32 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f32::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<32} max_rel_err={:.3e} ({} coords)",
                p.name, p.max_rel_error, p.coords_checked
            )?;
        }
        Ok(())
    }
}

/// Compares the analytic gradient of `build` (which must return a scalar)
/// with central differences for every named input.
pub fn finite_diff_check<F>(
    inputs: &[(&str, Tensor)],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item() as f64)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, t))| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::with_capacity(inputs.len());
    for (pi, (name, t)) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f32;
        for &j in &coords {
            let orig = values[pi].data()[j];
            values[pi].data_mut()[j] = orig + opts.step;
            let up = eval(&values)?;
            values[pi].data_mut()[j] = orig - opts.step;
            let down = eval(&values)?;
            values[pi].data_mut()[j] = orig;
            let numeric = ((up - down) / (2.0 * opts.step as f64)) as f32;
            let a = analytic[pi][j];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        report.push(ParamError {
            name: name.to_string(),
            max_rel_error: worst,
            coords_checked: coords.len(),
        });
    }
    Ok(GradCheckReport { params: report })
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct sensitivity.
pub fn random_projection(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}
