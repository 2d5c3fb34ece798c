use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±epsilon` perturbation crossed a relu or pinball kink.
    pub skipped_kinks: usize,
}

/// Compare reverse-mode gradients against central finite differences.
///
/// At most `max_coords` coordinates are checked, sampled without replacement
/// with `seed`. A coordinate is skipped when either perturbed evaluation takes
/// a different branch at any non-smooth primitive than the unperturbed one,
/// since the finite difference is then not an estimate of the gradient there.
pub fn grad_check<F>(
    f: F,
    store: &mut ParamStore,
    epsilon: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Contract(format!(
            "grad_check epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::inference().with_kink_tracking();
        let loss = f(&mut tape, store)?;
        Ok((tape.value(loss).item(), tape.kink_signature()))
    };

    store.zero_grads();
    let mut tape = Tape::new().with_kink_tracking();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let base_sig = tape.kink_signature();
    let analytic = store.flat_grads();

    let total = analytic.len();
    let coords: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, total, max_coords).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for flat in coords {
        let (id, off) = store.locate(flat);
        let orig = store.value(id).data()[off];
        store.value_mut(id).data_mut()[off] = orig + epsilon;
        let plus = eval(store);
        store.value_mut(id).data_mut()[off] = orig - epsilon;
        let minus = eval(store);
        store.value_mut(id).data_mut()[off] = orig;
        let ((fp, sp), (fm, sm)) = (plus?, minus?);
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * epsilon);
        let err = (analytic[flat] - numeric).abs() / numeric.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Init, Tensor};

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new(0);
        let x = store.add("x", Tensor::scalar(3.0)).unwrap();
        let report = grad_check(
            |tape, s| {
                let v = tape.param(s, x);
                let sq = tape.mul(v, v)?;
                Ok(tape.sum(sq))
            },
            &mut store,
            1e-5,
            10,
            0,
        )
        .unwrap();
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(store.grad(x).item(), 6.0);
    }

    #[test]
    fn relu_kink_at_zero_is_skipped() {
        let mut store = ParamStore::new(0);
        let x = store.add("x", Tensor::row(vec![0.0, 1.5])).unwrap();
        let report = grad_check(
            |tape, s| {
                let v = tape.param(s, x);
                let r = tape.relu(v);
                Ok(tape.sum(r))
            },
            &mut store,
            1e-5,
            10,
            0,
        )
        .unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn epsilon_out_of_range_is_rejected() {
        let mut store = ParamStore::new(0);
        store.add_init("x", &[2], Init::Constant(1.0)).unwrap();
        let id = store.id("x").unwrap();
        let r = grad_check(
            |tape, s| {
                let v = tape.param(s, id);
                Ok(tape.sum(v))
            },
            &mut store,
            1e-2,
            10,
            0,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
