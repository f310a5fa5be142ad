//! Gradient verification against central finite differences.
//!
//! The check rebuilds the loss graph from scratch at perturbed parameter
//! values, so the builder closure must be a pure function of the parameter
//! set. Evaluations whose ReLU/hinge activation pattern differs between the
//! center and the two perturbed points straddle a kink; those coordinates
//! are skipped and counted rather than failed, since one-sided derivatives
//! make the comparison meaningless there.

use crate::error::{Error, Result};
use crate::numeric::tape::{Tape, ValueId};
use crate::numeric::tensor::ParamSet;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Floor inside the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Coordinates compared against finite differences.
    pub checked: usize,
    /// Coordinates skipped because a kink fell inside the stencil,
    /// as (parameter name, flat index) pairs.
    pub skipped: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn skipped_count(&self) -> usize {
        self.skipped.len()
    }
}

fn eval<F>(params: &ParamSet, build: &F) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let value = tape.value(loss).item()?;
    Ok((value, tape.activation_pattern()))
}

/// Compares reverse-mode gradients of a scalar loss against central finite
/// differences over every trainable scalar. Returns the maximum relative
/// error `|a - n| / max(|a|, |n|, 1e-8)` over the checked coordinates.
pub fn grad_check<F>(params: &ParamSet, build: &F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<ValueId>,
{
    // Analytic pass.
    let mut work = params.clone();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &work)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Usage(
            "grad_check requires a scalar-valued graph".into(),
        ));
    }
    let center_pattern = tape.activation_pattern();
    tape.backward(loss, &mut work)?;

    let names: Vec<String> = work
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: Vec::new(),
    };

    for name in names {
        let analytic = work
            .get(&name)?
            .value
            .grad()
            .ok_or_else(|| Error::Internal(format!("missing gradient for {name:?}")))?
            .to_vec();
        for idx in 0..analytic.len() {
            let mut plus = params.clone();
            plus.get_mut(&name)?.value.data_mut()[idx] += FD_STEP;
            let (f_plus, pat_plus) = eval(&plus, build)?;

            let mut minus = params.clone();
            minus.get_mut(&name)?.value.data_mut()[idx] -= FD_STEP;
            let (f_minus, pat_minus) = eval(&minus, build)?;

            if pat_plus != center_pattern || pat_minus != center_pattern {
                report.skipped.push((name.clone(), idx));
                continue;
            }

            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_graph_is_exact_to_1e_10() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::vector(&[0.3, -1.7, 2.2]).unwrap(), true)
            .unwrap();
        let x = Tensor::vector(&[1.5, -0.5, 0.25]).unwrap();
        let report = grad_check(&params, &|tape, ps| {
            let w = tape.param(ps, "w")?;
            let xi = tape.input(&x);
            let prod = tape.mul(w, xi)?;
            tape.mean_all(prod)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-10, "{}", report.max_rel_err);
        assert_eq!(report.checked, 3);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn random_mlp_with_squared_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let (din, dh, dout, batch) = (3, 4, 2, 2);
            let mut params = ParamSet::new();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect()
            };
            params
                .insert("w0", Tensor::matrix(din, dh, draw(din * dh)).unwrap(), true)
                .unwrap();
            params
                .insert("b0", Tensor::vector(&draw(dh)).unwrap(), true)
                .unwrap();
            params
                .insert("w1", Tensor::matrix(dh, dout, draw(dh * dout)).unwrap(), true)
                .unwrap();
            let x = Tensor::matrix(batch, din, draw(batch * din)).unwrap();
            let target = Tensor::matrix(batch, dout, draw(batch * dout)).unwrap();

            let report = grad_check(&params, &|tape, ps| {
                let w0 = tape.param(ps, "w0")?;
                let b0 = tape.param(ps, "b0")?;
                let w1 = tape.param(ps, "w1")?;
                let xi = tape.input(&x);
                let ti = tape.input(&target);
                let h = tape.matmul(xi, w0)?;
                let h = tape.add_row_bias(h, b0)?;
                let h = tape.relu(h)?;
                let y = tape.matmul(h, w1)?;
                let d = tape.sq_l2_mean_rows(y, ti)?;
                tape.mean_all(d)
            })
            .unwrap();
            assert!(
                report.max_rel_err <= 1e-4,
                "trial {trial}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn hinge_exactly_at_the_boundary_is_skipped_not_failed() {
        let mut params = ParamSet::new();
        params
            .insert("d", Tensor::vector(&[0.2]).unwrap(), true)
            .unwrap();
        // hinge(d - 0.2) sits exactly at the kink; perturbing d crosses it.
        let report = grad_check(&params, &|tape, ps| {
            let d = tape.param(ps, "d")?;
            let h = tape.hinge(d, 0.2)?;
            tape.mean_all(h)
        })
        .unwrap();
        assert_eq!(report.checked, 0);
        assert_eq!(report.skipped, vec![("d".to_string(), 0)]);
    }
}
