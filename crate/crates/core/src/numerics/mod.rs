//! Dense `f64` tensors and reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{dropout_mask, Tensor};

/// Central finite-difference gradient of `f` with respect to every entry of
/// every input tensor. Independent of the tape; used to check it.
pub fn finite_difference<F>(inputs: &[Tensor], eps: f64, mut f: F) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].rows(), inputs[t].cols());
        for k in 0..inputs[t].len() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + eps;
            let hi = f(&work);
            work[t].data_mut()[k] = orig - eps;
            let lo = f(&work);
            work[t].data_mut()[k] = orig;
            g.data_mut()[k] = (hi - lo) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Largest relative error between analytic and numeric gradients.
///
/// Entries whose magnitudes are both below `floor` are compared against
/// `floor` so that round-off on near-zero gradients does not dominate.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Floor for [`max_relative_error`] when checking the gradient of a loss
/// with value `loss`: central differences carry round-off proportional to
/// `|loss|`, so the floor scales with it and the check is invariant to
/// rescaling the loss.
pub fn gradient_floor(loss: f64) -> f64 {
    1e-6 * loss.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;

    /// Runs `build` on the tape with all inputs as params and checks the
    /// resulting gradients against central differences.
    fn check<B>(inputs: &[Tensor], build: B) -> f64
    where
        B: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect();
        let numeric = finite_difference(inputs, EPS, |ts| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
            let loss = build(&mut tape, &vars).unwrap();
            tape.value(loss).item().unwrap()
        });
        max_relative_error(&analytic, &numeric, FLOOR)
    }

    fn rand(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(rows, cols, -1.0, 1.0, rng)
    }

    /// Weighted sum so that every output entry gets a distinct upstream
    /// gradient.
    fn wsum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
        let [r, c] = tape.value(v).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let w = tape.constant(Tensor::uniform(r, c, -1.0, 1.0, &mut rng));
        let p = tape.mul(v, w)?;
        Ok(tape.sum(p))
    }

    #[test]
    fn square_has_analytic_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.param(rand(4, 5, &mut rng));
        let s = tape.softmax_rows(x);
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::uniform(6, 7, -30.0, 30.0, &mut rng).softmax_rows();
        for r in 0..6 {
            let s: f64 = t.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(t.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand(3, 4, &mut rng);
            let b = rand(3, 4, &mut rng);
            let err = check(&[a, b], |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[1])?;
                let m = t.mul(d, v[1])?;
                let lr = t.leaky_relu(m, 0.2);
                let sg = t.sigmoid(lr);
                let e = t.exp(v[0]);
                let sq = t.square(e);
                let ab = t.abs(v[1]);
                let sc = t.scale(ab, 1.7);
                let k = t.add_scalar(sc, 0.3);
                let x = t.add(sg, sq)?;
                let x = t.mul(x, k)?;
                wsum(t, x, seed)
            });
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = rand(3, 4, &mut rng);
            let b = rand(4, 5, &mut rng);
            let row = rand(1, 5, &mut rng);
            let col = rand(3, 1, &mut rng);
            let err = check(&[a, b, row, col], |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let m = t.add_row(m, v[2])?;
                let m = t.mul_col(m, v[3])?;
                let tr = t.transpose(m);
                let back = t.transpose(tr);
                let cat = t.concat_cols(&[back, v[0]])?;
                let rows = t.concat_rows(&[cat, cat])?;
                let sl = t.slice_cols(rows, 2, 7)?;
                wsum(t, sl, seed)
            });
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn indexing_ops_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let a = rand(4, 3, &mut rng);
            let scores = rand(6, 1, &mut rng);
            let err = check(&[a, scores], |t, v| {
                let g = t.gather_rows(v[0], &[0, 2, 2, 3, 1, 0])?;
                let alpha = t.segment_softmax(v[1], &[0, 1, 1, 2, 2, 2], 3)?;
                let w = t.mul_col(g, alpha)?;
                let s = t.scatter_add_rows(w, &[0, 1, 1, 2, 2, 2], 3)?;
                let keep = Tensor::from_fn(3, 3, |i, j| ((i + j) % 2) as f64);
                let sq = t.square(s);
                let m = t.masked_merge(&keep, s, sq)?;
                wsum(t, m, seed)
            });
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn softmax_and_reductions_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let a = rand(4, 3, &mut rng);
            let err = check(&[a], |t, v| {
                let s = t.softmax_rows(v[0]);
                let ls = t.log_softmax_rows(v[0]);
                let x = t.add(s, ls)?;
                let l1 = wsum(t, x, seed)?;
                let l2 = t.mean(v[0]);
                let both = t.concat_cols(&[l1, l2])?;
                t.dropout(both, 0.5, false, 0).map(|d| t.sum(d))
            });
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let x = rand(5, 4, &mut rng);
            let w1 = rand(4, 6, &mut rng);
            let b1 = rand(1, 6, &mut rng);
            let w2 = rand(6, 3, &mut rng);
            let b2 = rand(1, 3, &mut rng);
            let err = check(&[x, w1, b1, w2, b2], |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_row(h, v[2])?;
                let h = t.leaky_relu(h, 0.2);
                let h = t.dropout(h, 0.3, true, seed)?;
                let o = t.matmul(h, v[3])?;
                let o = t.add_row(o, v[4])?;
                let lp = t.log_softmax_rows(o);
                let l = t.mean(lp);
                Ok(t.scale(l, -1.0))
            });
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(2, 2));
        let p = tape.param(Tensor::ones(2, 2));
        let m = tape.mul(c, p).unwrap();
        let l = tape.sum(m);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &Tensor::ones(2, 2));
    }
}
