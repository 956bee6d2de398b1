//! Finite-difference check of a whole model's parameter gradients.
//!
//! Analytic gradients come from the tape at the store's precision; numeric
//! gradients are central differences of the same model evaluated in `f64`.
//! Two views are reported: sampled single coordinates, and one random
//! direction per parameter tensor covering every coordinate.

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tte_engine::gradcheck::{compare, FD_STEP};
use tte_engine::{GradCheck, Mode, ParamStore, Scalar, Tape, Var};

use super::{Batch, Model};
use crate::error::Result;

fn loss<'s, T: Scalar>(
    model: &Model,
    store: &'s ParamStore<T>,
    batch: &Batch<T>,
    labels: &[usize],
) -> Result<(f64, Tape<'s, T>, Var)> {
    let mut tape = Tape::new(store, Mode::Train, 0);
    let logits = model.logits(&mut tape, batch)?;
    let l = tape.softmax_cross_entropy(logits, labels)?;
    Ok((tape.value(l).data()[0].as_f64(), tape, l))
}

fn loss_value(model: &Model, store: &ParamStore<f64>, batch: &Batch<f64>, labels: &[usize]) -> Result<f64> {
    Ok(loss(model, store, batch, labels)?.0)
}

#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    /// Worst sampled coordinate.
    pub result: GradCheck,
    /// Worst directional derivative; `worst_index` is the tensor's position
    /// among the trainable tensors.
    pub directional: GradCheck,
    pub worst_tensor: String,
    pub checked: usize,
    /// Coordinates skipped because the difference quotient straddles a
    /// ReLU kink (the two step sizes disagree).
    pub kinks: usize,
}

/// Compare analytic and numeric gradients on up to `per_param` randomly
/// chosen coordinates of every trainable tensor.
pub fn model_grad_check<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    batch32: &Batch<T>,
    batch64: &Batch<f64>,
    labels: &[usize],
    per_param: usize,
    seed: u64,
) -> Result<ModelGradCheck> {
    let (_, tape, l) = loss(model, store, batch32, labels)?;
    let grads = tape.backward(l)?;
    let mut with_grads = store.clone();
    drop(tape);
    with_grads.zero_grad();
    grads.accumulate_into(&mut with_grads);

    let mut probe = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut dir_analytic = Vec::new();
    let mut dir_numeric = Vec::new();
    let mut kinks = 0;
    let names: Vec<String> = store.iter().filter(|p| p.requires_grad()).map(|p| p.name.clone()).collect();
    for name in &names {
        let id = store.id(name)?;
        let grad: Vec<f64> = with_grads
            .get(id)
            .grad
            .as_ref()
            .map(|g| g.iter().map(|&x| x.as_f64()).collect())
            .unwrap_or_default();
        let n = grad.len();
        let original: Vec<f64> = probe.get(id).value.data().to_vec();
        // one difference quotient along `dir` at step h, restoring the tensor after
        let mut quotient = |dir: &[(usize, f64)], h: f64| -> Result<f64> {
            let mut eval = |sign: f64| -> Result<f64> {
                let data = probe.get_mut(id).value.data_mut();
                for &(k, v) in dir {
                    data[k] = original[k] + sign * h * v;
                }
                loss_value(model, &probe, batch64, labels)
            };
            let up = eval(1.0)?;
            let down = eval(-1.0)?;
            let data = probe.get_mut(id).value.data_mut();
            for &(k, _) in dir {
                data[k] = original[k];
            }
            Ok((up - down) / (2.0 * h))
        };
        // a kink between the two step sizes shows up as a jump in the quotient
        let smooth = |coarse: f64, fine: f64| (coarse - fine).abs() <= 1e-6 * coarse.abs().max(fine.abs()).max(1e-3);

        for k in (0..n).choose_multiple(&mut rng, per_param.min(n)) {
            let coarse = quotient(&[(k, 1.0)], FD_STEP)?;
            let fine = quotient(&[(k, 1.0)], FD_STEP / 4.0)?;
            if !smooth(coarse, fine) {
                kinks += 1;
                continue;
            }
            analytic.push(grad[k]);
            numeric.push(coarse);
        }

        let mut dir: Vec<(usize, f64)> = (0..n).map(|k| (k, StandardNormal.sample(&mut rng))).collect();
        let norm = dir.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|(_, v)| *v /= norm);
        let coarse = quotient(&dir, FD_STEP)?;
        let fine = quotient(&dir, FD_STEP / 4.0)?;
        if !smooth(coarse, fine) {
            kinks += 1;
            dir_analytic.push(0.0);
            dir_numeric.push(0.0);
            continue;
        }
        dir_analytic.push(dir.iter().map(|&(k, v)| grad[k] * v).sum());
        dir_numeric.push(coarse);
    }
    let directional = compare(&dir_analytic, &dir_numeric);
    Ok(ModelGradCheck {
        checked: analytic.len(),
        result: compare(&analytic, &numeric),
        worst_tensor: names.get(directional.worst_index).cloned().unwrap_or_default(),
        directional,
        kinks,
    })
}
