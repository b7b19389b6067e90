use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding compare on absolute error instead.
    pub abs_floor: f64,
    /// Check a random subset of this many scalars; `None` checks all of them.
    pub max_samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-4, tolerance: 1e-4, abs_floor: 1e-6, max_samples: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckFailure {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradcheckFailure>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one [`Var`] per entry of `params` (in
/// order) and returns a 1x1 loss.
pub fn gradcheck<F>(f: F, params: &[(String, Tensor<f64>)], config: &GradcheckConfig) -> Result<GradcheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[(String, Tensor<f64>)]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().zip(params).map(|(&v, (_, t))| grads.get_or_zeros(v, t.shape())).collect();

    let mut coords: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(p, (_, t))| (0..t.len()).map(move |i| (p, i))).collect();
    if let Some(n) = config.max_samples {
        if n < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), n).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let mut work = params.to_vec();
    let mut report = GradcheckReport::default();
    for (p, i) in coords {
        let original = work[p].1.data()[i];
        work[p].1.data_mut()[i] = original + config.epsilon;
        let up = eval(&work)?;
        work[p].1.data_mut()[i] = original - config.epsilon;
        let down = eval(&work)?;
        work[p].1.data_mut()[i] = original;

        let numeric = (up - down) / (2.0 * config.epsilon);
        let a = analytic[p].data()[i];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.abs_floor);
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel_error);
        if rel_error >= config.tolerance {
            report.failures.push(GradcheckFailure {
                path: format!("{}[{i}]", work[p].0),
                index: i,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::attention;

    fn named(name: &str, rows: usize, cols: usize, seed: usize) -> (String, Tensor<f64>) {
        let data: Vec<f64> = (0..rows * cols).map(|i| (((i + seed) * 7919 % 97) as f64 / 97.0) - 0.5).collect();
        (name.to_string(), Tensor::from_f64(rows, cols, &data))
    }

    #[test]
    fn quadratic_passes_tightly() {
        let params = [named("x", 1, 6, 3)];
        let cfg = GradcheckConfig { tolerance: 1e-8, ..Default::default() };
        let report = gradcheck(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &params,
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn wrong_backward_is_caught() {
        // Analytic path differentiates x*x, the evaluated loss is x*x*x.
        let params = [named("x", 1, 4, 1)];
        let report = gradcheck(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let val: Vec<f64> = t.value(v[0]).data().iter().map(|x| x * x * x).collect();
                let detached = t.constant(Tensor::row_vector(val));
                let zero = t.scale(sq, 0.0);
                let y = t.add(detached, zero)?;
                let y = t.add(y, sq)?;
                Ok(t.sum(y))
            },
            &params,
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.failures[0].path.starts_with("x["));
    }

    #[test]
    fn every_op_passes() {
        let params = [
            named("a", 3, 4, 1),
            named("b", 4, 4, 2),
            named("gain", 1, 4, 3),
            named("bias", 1, 4, 4),
            named("row", 1, 4, 5),
            named("target", 1, 2, 6),
        ];
        let report = gradcheck(
            |t, v| {
                let ab = t.matmul(v[0], v[1])?;
                let ab = t.add_row(ab, v[4])?;
                let ab = t.add_const_row(ab, &[0.1, -0.2, 0.3, 0.0])?;
                let ln = t.layer_norm(ab, v[2], v[3])?;
                let r = t.relu(ln);
                let m = t.mul(r, ab)?;
                let q = t.slice_cols(m, 0, 2)?;
                let k = t.slice_cols(ln, 2, 4)?;
                let (out, _) = attention(t, q, k, k, Some(&[true, false, true]), Some(&[0.5, 0.0, -0.5]))?;
                let both = t.concat_cols(&[out, q])?;
                let stacked = t.concat_rows(&[both, both])?;
                let tr = t.transpose(stacked);
                let s = t.scale(tr, 0.7);
                let row = t.row(s, 1)?;
                let first = t.slice_cols(row, 0, 2)?;
                let dist = t.cosine_distance(first, v[5])?;
                let total = t.sum(s);
                let total = t.scale(total, 0.01);
                let sum = t.add(dist, total)?;
                Ok(sum)
            },
            &params,
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:#?}", report.failures);
        assert!(report.checked > 40);
    }
}
