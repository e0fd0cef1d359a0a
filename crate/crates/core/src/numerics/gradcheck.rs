use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{NumericsError, Tape, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|` over the checked coordinates.
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(param index, flat coordinate)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
}

/// Compares `backward` against central differences of `f` around `params`.
///
/// `f` receives a fresh tape and one tracked leaf per parameter and must
/// return a scalar. When `samples` is `Some(n)`, `n` coordinates are drawn
/// uniformly without replacement using `seed`; otherwise every coordinate is
/// checked. The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn check_gradients<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    samples: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(NumericsError::BadStep(eps));
    }
    let evaluate = |values: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.len();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let chosen: Vec<usize> = match samples {
        Some(n) if n < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = index::sample(&mut rng, total, n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    for flat in chosen {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let i = flat - offsets[p];
        let original = work[p].data()[i];
        work[p].data_mut()[i] = original + eps;
        let plus = evaluate(&work)?;
        work[p].data_mut()[i] = original - eps;
        let minus = evaluate(&work)?;
        work[p].data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(NumericsError::NonFiniteDifference { param: p, index: i });
        }
        let a = analytic[p].data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
        report.max_abs_error = report.max_abs_error.max(abs);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((p, i));
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let w = Tensor::from_f64([1], &[3.0]).unwrap();
        let report = check_gradients(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum(sq)
            },
            &[w],
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn constant_function_reports_against_floor() {
        let w = Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
        let report = check_gradients(
            |tape, v| {
                // depends on w only through a zero multiple
                let z = tape.scale(v[0], 0.0)?;
                let c = tape.constant(Tensor::scalar(7.0));
                let s = tape.sum(z)?;
                tape.add(s, c)
            },
            &[w],
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn step_size_is_validated() {
        let w = Tensor::from_f64([1], &[1.0]).unwrap();
        let f = |tape: &mut Tape<f64>, v: &[Var]| tape.sum(v[0]);
        assert!(matches!(
            check_gradients(f, std::slice::from_ref(&w), 1e-3, None, 0),
            Err(NumericsError::BadStep(_))
        ));
        assert!(check_gradients(f, &[w], 1e-4, None, 0).is_ok());
    }

    #[test]
    fn composite_primitives_agree_with_differences() {
        // softmax attention over a small sequence with layer norm and gelu
        let x = Tensor::from_fn([2, 3, 4], |i| ((i as f64) * 0.731).sin());
        let w = Tensor::from_fn([4, 4], |i| ((i as f64) * 1.37).cos() * 0.5);
        let g = Tensor::from_fn([4], |i| 1.0 + 0.1 * i as f64);
        let plan = crate::numerics::AttentionPlan::prefix(3, 2).unwrap();
        let report = check_gradients(
            move |tape, v| {
                let h = tape.layer_norm(v[0], v[2])?;
                let q = tape.matmul(h, v[1])?;
                let kt = tape.transpose(h)?;
                let logits = tape.matmul(q, kt)?;
                let a = tape.masked_softmax(logits, std::slice::from_ref(&plan))?;
                let y = tape.matmul(a, q)?;
                let y = tape.gelu(y)?;
                let part = tape.slice(y, 1, 1, 3)?;
                let ls = tape.log_softmax(part)?;
                let picked = tape.pick(ls, vec![0, 1, 2, 3])?;
                let m = tape.mean_last(picked)?;
                tape.sum(m)
            },
            &[x, w, g],
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
