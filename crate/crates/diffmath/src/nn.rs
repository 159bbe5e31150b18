//! Named parameter collections and feed-forward networks built on the tape.

use rand::Rng;

use crate::error::{DiffError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// An ordered set of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the tape, as parameters or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Gradients for previously bound vars, zero-filled where unreachable.
    pub fn collect_grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| grads.get_or_zeros(v, t))
            .collect()
    }

    /// `self ← (1 − tau)·self + tau·online`.
    pub fn soft_update_from(&mut self, online: &ParamSet, tau: f64) -> Result<()> {
        if self.tensors.len() != online.tensors.len() {
            return Err(DiffError::Shape("soft update between different parameter sets".into()));
        }
        for (t, o) in self.tensors.iter_mut().zip(&online.tensors) {
            if !t.same_shape(o) {
                return Err(DiffError::Shape(format!(
                    "soft update {:?} from {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
        Ok(())
    }

    /// Appends `other` with every name prefixed by `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (n, t) in other.iter() {
            self.push(format!("{prefix}.{n}"), t.clone());
        }
    }

    /// Extracts the entries under `prefix.`, stripping the prefix.
    pub fn sub_set(&self, prefix: &str) -> ParamSet {
        let p = format!("{prefix}.");
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(&p) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    /// Overwrites values from `src`, requiring identical names and shapes.
    pub fn load_from(&mut self, src: &ParamSet) -> Result<()> {
        if self.names != src.names {
            return Err(DiffError::Format(format!(
                "parameter names differ: expected {:?}, found {:?}",
                self.names, src.names
            )));
        }
        for (t, s) in self.tensors.iter_mut().zip(&src.tensors) {
            if !t.same_shape(s) {
                return Err(DiffError::Shape(format!("{:?} vs {:?}", t.shape(), s.shape())));
            }
            *t = s.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn on_tape(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    fn apply(self, t: Tensor) -> Tensor {
        match self {
            Activation::Identity => t,
            Activation::Relu => t.map(|v| v.max(0.0)),
            Activation::Tanh => t.map(f64::tanh),
        }
    }
}

/// Fully connected network `x·W₁ + b₁ → act → … → x·Wₖ + bₖ → out_act`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: ParamSet,
}

impl Mlp {
    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut params = ParamSet::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            let bias = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            params.push(
                format!("l{i}.w"),
                Tensor::matrix(fan_in, fan_out, weights).expect("sizes agree"),
            );
            params.push(format!("l{i}.b"), Tensor::matrix(1, fan_out, bias).expect("sizes agree"));
        }
        Self {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params,
        }
    }

    /// All weights and biases zero.
    pub fn zeroed(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        let mut m = Self::new(sizes, hidden, output, &mut rand::rngs::mock::StepRng::new(0, 0));
        for t in m.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.params.bind(tape, trainable)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for i in 0..layers {
            h = tape.matmul(h, bound[2 * i])?;
            h = tape.add(h, bound[2 * i + 1])?;
            let act = if i + 1 == layers { self.output } else { self.hidden };
            h = act.on_tape(tape, h)?;
        }
        Ok(h)
    }

    /// Forward pass without recording.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let layers = self.sizes.len() - 1;
        let t = self.params.tensors();
        let mut h = x.clone();
        for i in 0..layers {
            h = h.matmul(&t[2 * i])?.add_row(&t[2 * i + 1])?;
            let act = if i + 1 == layers { self.output } else { self.hidden };
            h = act.apply(h);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::new(&[16, 8, 2], Activation::Relu, Activation::Identity, &mut rng);
        let w = m.params().get("l0.w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(m.params().numel(), 16 * 8 + 8 + 8 * 2 + 2);
    }

    #[test]
    fn tape_and_predict_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Mlp::new(&[3, 5, 2], Activation::Tanh, Activation::Tanh, &mut rng);
        let x = Tensor::from_rows(&[[0.1, -0.2, 0.3], [1.0, 0.5, -1.0]]).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, true).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = m.forward(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(y), &m.predict(&x).unwrap());
    }

    #[test]
    fn soft_update_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let online = Mlp::new(&[2, 2], Activation::Identity, Activation::Identity, &mut rng);
        let mut target = Mlp::zeroed(&[2, 2], Activation::Identity, Activation::Identity);
        let before = target.clone();
        target.params_mut().soft_update_from(online.params(), 0.0).unwrap();
        assert_eq!(target, before);
        target.params_mut().soft_update_from(online.params(), 1.0).unwrap();
        assert_eq!(target.params(), online.params());
    }
}
