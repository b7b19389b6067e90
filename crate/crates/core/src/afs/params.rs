use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AfsConfig, AfsError};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct AfsParams<T> {
    entries: Vec<(String, Tensor<T>)>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Glorot,
    Zeros,
    Ones,
}

fn layout(config: &AfsConfig) -> Vec<(String, usize, usize, Init)> {
    let dt = config.d_t;
    let mut out = vec![
        ("cls".to_string(), 1, dt, Init::Normal(1.0 / (dt as f64).sqrt())),
        ("in_w".to_string(), dt, dt, Init::Glorot),
        ("in_b".to_string(), 1, dt, Init::Zeros),
        ("rel_ln_g".to_string(), 1, dt, Init::Ones),
        ("rel_ln_b".to_string(), 1, dt, Init::Zeros),
    ];
    for block in ["cross", "self"] {
        out.push((format!("{block}.ln_g"), 1, dt, Init::Ones));
        out.push((format!("{block}.ln_b"), 1, dt, Init::Zeros));
        for proj in ["q", "k", "v", "o"] {
            out.push((format!("{block}.w{proj}"), dt, dt, Init::Glorot));
            out.push((format!("{block}.b{proj}"), 1, dt, Init::Zeros));
        }
        if config.ffn {
            let hidden = 4 * dt;
            out.push((format!("{block}.ffn_ln_g"), 1, dt, Init::Ones));
            out.push((format!("{block}.ffn_ln_b"), 1, dt, Init::Zeros));
            out.push((format!("{block}.ffn_w1"), dt, hidden, Init::Glorot));
            out.push((format!("{block}.ffn_b1"), 1, hidden, Init::Zeros));
            out.push((format!("{block}.ffn_w2"), hidden, dt, Init::Glorot));
            out.push((format!("{block}.ffn_b2"), 1, dt, Init::Zeros));
        }
    }
    out.push(("out_w".to_string(), dt, config.d, Init::Glorot));
    out.push(("out_b".to_string(), 1, config.d, Init::Zeros));
    out
}

impl<T: Scalar> AfsParams<T> {
    /// Seeded initialisation: Glorot-uniform weights, zero biases, unit
    /// layer-norm gains and a Gaussian CLS token.
    pub fn init(config: &AfsConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let entries = layout(config)
            .into_iter()
            .map(|(name, rows, cols, init)| {
                let n = rows * cols;
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal(std) => {
                        (0..n).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
                    }
                    Init::Glorot => {
                        let a = (6.0 / (rows + cols) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                };
                (name, Tensor::from_f64(rows, cols, &data))
            })
            .collect();
        Self { entries }
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> AfsParams<U> {
        AfsParams { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Checks names and shapes against the layout implied by `config`.
    pub fn check_layout(&self, config: &AfsConfig) -> Result<(), AfsError> {
        let want = layout(config);
        if want.len() != self.entries.len() {
            return Err(AfsError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.entries.len()
            )));
        }
        for ((name, rows, cols, _), (have, t)) in want.iter().zip(&self.entries) {
            if name != have || (*rows, *cols) != t.shape() {
                return Err(AfsError::Checkpoint(format!(
                    "parameter {have} {:?} does not match expected {name} {:?}",
                    t.shape(),
                    (rows, cols)
                )));
            }
        }
        if !self.is_finite() {
            return Err(AfsError::Checkpoint("non-finite parameter values".into()));
        }
        Ok(())
    }

    /// Records every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters recorded on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        Self { vars: names.into_iter().zip(vars.iter().copied()).collect() }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().map(|(_, v)| *v)
    }
}
