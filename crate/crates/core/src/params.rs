//! Named parameter arrays shared between the model, the optimizer and
//! checkpoints.

use std::collections::HashMap;
use std::ops::Index;
use std::sync::Arc;

use rand::Rng;
use stmask_autograd::{Gradients, Graph, Matrix, Var};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered named arrays. Buffers are shared copy-on-write, so
/// binding them to a tape costs nothing.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Arc<Matrix>>,
    lookup: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; names are fixed by the model layout.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Matrix> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        if value.shape() != self.get(id).shape() {
            return Err(Error::Shape(format!(
                "`{}` is {:?}, got {:?}",
                self.names[id.0],
                self.get(id).shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn total_entries(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    /// First array holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.ids()
            .find(|&id| !self.get(id).is_finite())
            .map(|id| self.name(id))
    }

    /// Array holding the entry of largest magnitude.
    pub fn largest(&self) -> Option<&str> {
        let peak = |id: ParamId| self.get(id).data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        self.ids()
            .max_by(|&a, &b| peak(a).total_cmp(&peak(b)))
            .map(|id| self.name(id))
    }

    /// Rounds every entry through `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in Arc::make_mut(v).data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Records every array on `g`; `trainable` chooses params or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    g.param_arc(Arc::clone(v))
                } else {
                    g.constant_arc(Arc::clone(v))
                }
            })
            .collect();
        Bound { vars }
    }

    /// Per-array gradients, zero where the loss does not reach.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Matrix> {
        self.ids()
            .map(|id| {
                grads.get(bound[id]).cloned().unwrap_or_else(|| {
                    let (r, c) = self.get(id).shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect()
    }
}

/// Tape handles of a bound [`ParameterStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Initializers drawing from a seeded stream.
pub struct Init {
    rng: rng::Stream,
}

impl Init {
    pub fn new(seed: u64, tags: &[u64]) -> Self {
        Self {
            rng: rng::stream(seed, tags),
        }
    }

    /// Uniform Glorot initialization.
    pub fn glorot(&mut self, rows: usize, cols: usize) -> Matrix {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(rows, cols, a)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, a: f64) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect(),
        )
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| std * rng::normal(&mut self.rng)).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_shares_buffers_and_collects_grads() {
        let mut s = ParameterStore::new();
        let a = s.insert("a", Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        let b = s.insert("b", Matrix::scalar(5.0));
        let mut g = Graph::new();
        let bound = s.bind(&mut g, true);
        let sq = g.square(bound[a]);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        let gs = s.collect_grads(&bound, &grads);
        assert_eq!(gs[a.index()].data(), &[2.0, 4.0]);
        assert_eq!(gs[b.index()].data(), &[0.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParameterStore::new();
        s.insert("x", Matrix::scalar(0.0));
        s.insert("x", Matrix::scalar(0.0));
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParameterStore::new();
        let a = s.insert("a", Matrix::zeros(2, 2));
        assert!(s.set(a, Matrix::zeros(1, 4)).is_err());
        assert!(s.set(a, Matrix::identity(2)).is_ok());
        assert_eq!(s.first_non_finite(), None);
        s.get_mut(a).set(0, 0, f64::NAN);
        assert_eq!(s.first_non_finite(), Some("a"));
    }
}
