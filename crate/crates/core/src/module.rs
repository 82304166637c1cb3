//! Named trainable parameters shared by the model components.

use crate::checkpoint::{param_digest, Checkpoint};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ten::{DiffArray, Gradients, Tape, Var};

/// A component with an ordered, named set of trainable arrays.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<(&str, &DiffArray<T>)>;
    fn params_mut(&mut self) -> Vec<(&str, &mut DiffArray<T>)>;

    /// Records every parameter on `tape`, in `params()` order.
    fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params().into_iter().map(|(_, p)| tape.param(p)).collect()
    }

    fn accumulate(&mut self, vars: &[Var], grads: &Gradients<T>) {
        for ((_, p), &v) in self.params_mut().into_iter().zip(vars) {
            if let Some(g) = grads.get(v) {
                p.accumulate(g);
            }
        }
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn set_trainable(&mut self, on: bool) {
        for (_, p) in self.params_mut() {
            p.requires_grad = on;
            p.grad = None;
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    fn save_into(&self, prefix: &str, ck: &mut Checkpoint) {
        for (name, p) in self.params() {
            ck.insert(format!("{prefix}.{name}"), &p.value);
        }
    }

    fn load_from(&mut self, prefix: &str, ck: &Checkpoint) -> Result<()> {
        for (name, p) in self.params_mut() {
            let m = ck.get::<T>(&format!("{prefix}.{name}"))?;
            if m.shape() != p.shape() {
                return Err(Error::Parse(format!(
                    "{prefix}.{name}: checkpoint shape {:?}, model shape {:?}",
                    m.shape(),
                    p.shape()
                )));
            }
            p.value = m;
        }
        Ok(())
    }

    /// SHA-256 over names and values; changes iff some parameter changes.
    fn digest(&self, prefix: &str) -> String {
        let owned: Vec<(String, &DiffArray<T>)> = self
            .params()
            .into_iter()
            .map(|(n, p)| (format!("{prefix}.{n}"), p))
            .collect();
        param_digest(owned.iter().map(|(n, p)| (n.as_str(), &p.value)))
    }
}
