//! Central finite-difference gradient checking at 64-bit precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative error, so coordinates whose true gradient
/// is essentially zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flattened index of the worst coordinate across all checked inputs.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        }
    }

    fn merge(self, other: Self, offset: usize) -> Self {
        if other.max_rel_error > self.max_rel_error {
            Self {
                worst_index: other.worst_index + offset,
                ..other
            }
        } else {
            self
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare `analytic` against central differences of `f` around `input`,
/// coordinate by coordinate.
pub fn grad_check<F>(mut f: F, input: &[f64], analytic: &[f64]) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(input.len(), analytic.len(), "one analytic entry per input");
    let numeric = numeric_gradient(&mut f, input, FD_STEP);
    compare(analytic, &numeric)
}

pub fn numeric_gradient<F>(mut f: F, input: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = input.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let mut out = GradCheck::empty();
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > out.max_rel_error || e.is_nan() {
            out = GradCheck {
                max_rel_error: if e.is_nan() { f64::INFINITY } else { e },
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    out
}

/// Check the gradient of every input of a tape-built function.
///
/// `build` receives one tracked leaf per entry of `inputs` and returns an
/// output of any shape; it is reduced to a scalar by a fixed random
/// projection drawn from `seed`. Buffers referenced by `build` (e.g. batch
/// norm statistics) live in `store`, and the function is evaluated in `mode`.
pub fn check_op<F>(
    store: &ParamStore<f64>,
    mode: Mode,
    inputs: &[Tensor<f64>],
    seed: u64,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |values: &[Tensor<f64>], weights: Option<&[f64]>| -> Result<(f64, Vec<Vec<f64>>, usize)> {
        let mut tape = Tape::new(store, mode, 0);
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let n = tape.value(out).numel();
        let Some(w) = weights else {
            return Ok((0.0, Vec::new(), n));
        };
        let loss = tape.weighted_sum(out, w.to_vec())?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let per_input = vars
            .iter()
            .zip(values)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        Ok((value, per_input, n))
    };

    let (_, _, out_len) = eval(inputs, None)?;
    let weights: Vec<f64> = (0..out_len)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let (_, analytic, _) = eval(inputs, Some(&weights))?;

    let mut report = GradCheck::empty();
    let mut offset = 0;
    for (which, t) in inputs.iter().enumerate() {
        let mut values = inputs.to_vec();
        let numeric = numeric_gradient(
            |x| {
                values[which] = Tensor::new(t.shape().to_vec(), x.to_vec()).expect("same shape");
                eval(&values, Some(&weights)).map(|r| r.0).unwrap_or(f64::NAN)
            },
            t.data(),
            FD_STEP,
        );
        report = report.merge(compare(&analytic[which], &numeric), offset);
        offset += t.numel();
    }
    Ok(report)
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Entries at least 0.05 away from zero, so no stencil crosses the ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut x = randn(shape, 1.0, rng);
    for e in x.data_mut() {
        if e.abs() < 0.05 {
            *e += 0.1f64.copysign(*e);
        }
    }
    x
}

/// Gradient checks of every differentiable tape op on small random inputs
/// drawn from `seed`, one named report per op (and mode, for batch norm).
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let empty = ParamStore::new();
    let mut out = Vec::new();

    let inputs = [randn(&[3, 2, 4], 1.0, &mut r), randn(&[4, 5], 1.0, &mut r), randn(&[5], 1.0, &mut r)];
    out.push(("affine", check_op(&empty, Mode::Train, &inputs, seed, |tp, v| tp.affine(v[0], v[1], Some(v[2])))?));
    let inputs = [randn(&[2, 3, 4], 1.0, &mut r), randn(&[2, 3, 4], 1.0, &mut r)];
    out.push(("add", check_op(&empty, Mode::Train, &inputs, seed, |tp, v| tp.add(v[0], v[1]))?));

    let x = [off_kink(&[4, 5], &mut r)];
    out.push(("relu", check_op(&empty, Mode::Train, &x, seed, |tp, v| Ok(tp.relu(v[0])))?));
    out.push(("selu", check_op(&empty, Mode::Train, &x, seed, |tp, v| Ok(tp.selu(v[0])))?));
    out.push(("gelu", check_op(&empty, Mode::Train, &x, seed, |tp, v| Ok(tp.gelu(v[0])))?));

    let mut bn = ParamStore::new();
    let m = bn.add_buffer("bn.mean", randn(&[3], 1.0, &mut r))?;
    let var = bn.add_buffer("bn.var", Tensor::from_f64([3], &[0.5, 1.5, 2.0])?)?;
    let inputs = [randn(&[6, 3], 1.0, &mut r), randn(&[3], 1.0, &mut r), randn(&[3], 1.0, &mut r)];
    for (name, mode) in [("batch_norm/train", Mode::Train), ("batch_norm/eval", Mode::Eval)] {
        out.push((name, check_op(&bn, mode, &inputs, seed, |tp, x| tp.batch_norm(x[0], x[1], x[2], m, var))?));
    }

    let inputs = [randn(&[2, 3, 5], 1.0, &mut r), randn(&[5], 1.0, &mut r), randn(&[5], 1.0, &mut r)];
    out.push(("layer_norm", check_op(&empty, Mode::Train, &inputs, seed, |tp, x| tp.layer_norm(x[0], x[1], x[2]))?));

    let mut inputs = vec![randn(&[2, 3, 4], 1.0, &mut r)];
    for _ in 0..4 {
        inputs.push(randn(&[4, 4], 0.5, &mut r));
        inputs.push(randn(&[4], 0.5, &mut r));
    }
    out.push((
        "multi_head_attention",
        check_op(&empty, Mode::Train, &inputs, seed, |tp, v| {
            let w = crate::tape::AttentionWeights {
                wq: v[1],
                bq: Some(v[2]),
                wk: v[3],
                bk: Some(v[4]),
                wv: v[5],
                bv: Some(v[6]),
                wo: v[7],
                bo: Some(v[8]),
            };
            Ok(tp.multi_head_attention(v[0], &w, 2)?.0)
        })?,
    ));

    let logits = [randn(&[4, 3], 2.0, &mut r)];
    let labels = [0, 2, 1, 2];
    out.push((
        "softmax_cross_entropy",
        check_op(&empty, Mode::Train, &logits, seed, |tp, v| tp.softmax_cross_entropy(v[0], &labels))?,
    ));

    let x = randn(&[2, 3, 4], 1.0, &mut r);
    let token = randn(&[4], 1.0, &mut r);
    out.push((
        "prepend/select/mean/reshape",
        check_op(&empty, Mode::Train, &[x.clone(), token], seed, |tp, v| {
            let y = tp.prepend_token(v[0], v[1])?;
            let c = tp.select_token(y, 0)?;
            let m = tp.mean_tokens(y)?;
            let s = tp.add(c, m)?;
            tp.reshape(s, &[8])
        })?,
    ));
    let parts = [randn(&[2, 4], 1.0, &mut r), randn(&[2, 4], 1.0, &mut r), randn(&[5, 4], 1.0, &mut r)];
    out.push((
        "stack/lookup",
        check_op(&empty, Mode::Train, &parts, seed, |tp, v| {
            let l = tp.lookup(v[2], &[4, 1])?;
            tp.stack_tokens(&[v[0], v[1], l])
        })?,
    ));
    out.push(("dropout", check_op(&empty, Mode::Train, &[x], seed, |tp, v| tp.dropout(v[0], 0.3))?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_the_suite() {
        for seed in 0..3 {
            for (name, rep) in op_suite(seed).unwrap() {
                assert!(rep.max_rel_error < 1e-5, "{name} seed {seed}: {rep:?}");
            }
        }
    }

    #[test]
    fn quadratic_has_exact_gradient() {
        let x = [1.0, -2.0, 0.5];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = grad_check(|v| v.iter().map(|e| e * e).sum(), &x, &analytic);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_reported_at_the_right_coordinate() {
        let x = [1.0, 2.0, 3.0];
        let r = grad_check(|v| v.iter().sum(), &x, &[1.0, 1.5, 1.0]);
        assert_eq!(r.worst_index, 1);
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6);
    }
}
