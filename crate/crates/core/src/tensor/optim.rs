use crate::error::{Error, Result};

/// Moment buffers and step counter for [`Adam`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub state: AdamState,
}

impl Adam {
    pub const DEFAULT_LR: f32 = 0.0005;

    /// Zero-initialized state for parameters with the given element counts.
    pub fn new(lr: f32, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                step_count: 0,
                first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
                second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            },
        }
    }

    /// Applies one update. Parameters whose gradient is `None` are left
    /// untouched (their moments do not decay either).
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Option<&[f32]>]) -> Result<()> {
        let st = &mut self.state;
        if params.len() != st.first_moment.len() || grads.len() != params.len() {
            return Err(Error::usage(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                st.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let n = st.first_moment[i].len();
            if p.len() != n || g.is_some_and(|g| g.len() != n) {
                return Err(Error::usage(format!("adam: shape mismatch for parameter {i}")));
            }
        }
        st.step_count += 1;
        let t = st.step_count as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = &mut st.first_moment[i];
            let v = &mut st.second_moment[i];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                p[j] -= (self.lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f32]], max_norm: f32) -> f32 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x as f64 * x as f64)
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = Adam::new(0.0005, &[3]);
        let mut p = vec![1.0f32, -2.0, 0.5];
        let before = p.clone();
        let g = [0.0f32; 3];
        adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(0.0005, &[4]);
        let mut p = vec![0.0f32; 4];
        let g = [3.0f32, -0.01, 100.0, -7.5];
        adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            assert!((pi.abs() - 0.0005).abs() < 1e-7);
            assert_eq!(pi.signum(), -gi.signum());
        }
    }

    #[test]
    fn two_steps_match_scripted_recurrence() {
        // Hand-simulated recurrence in f64 for p0 = 1.0, g = (0.5, -0.25).
        let (lr, b1, b2, eps) = (0.0005f64, 0.9f64, 0.999f64, 1e-8f64);
        let mut p = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [0.5f64, -0.25].into_iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        let mut adam = Adam::new(0.0005, &[1]);
        let mut q = vec![1.0f32];
        adam.step(&mut [&mut q], &[Some(&[0.5])]).unwrap();
        adam.step(&mut [&mut q], &[Some(&[-0.25])]).unwrap();
        assert!((q[0] as f64 - p).abs() < 1e-7, "{} vs {p}", q[0]);
        assert_eq!(adam.state.step_count, 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = Adam::new(0.0005, &[2]);
        let mut p = vec![0.0f32; 3];
        assert!(adam.step(&mut [&mut p], &[Some(&[0.0, 0.0, 0.0])]).is_err());
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut a = vec![3.0f32, 0.0];
        let mut b = vec![4.0f32];
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert!((n - 5.0).abs() < 1e-6);
        let after = (a[0] * a[0] + b[0] * b[0]).sqrt();
        assert!((after - 1.0).abs() < 1e-6);
    }
}
