use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    decay: bool,
}

/// Named trainable tensors in canonical registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. `decay` marks it for decoupled weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    /// Weight matrix with scaled-uniform init, bound `sqrt(6 / (rows + cols))`.
    pub fn add_weight<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        self.add(name, uniform_init(rows, cols, rng), true)
    }

    pub fn add_bias(&mut self, name: &str, len: usize) -> ParamId {
        self.add(name, Tensor::zeros(1, len), false)
    }

    pub fn add_ln_gain(&mut self, name: &str, len: usize) -> ParamId {
        self.add(name, Tensor::filled(1, len, 1.0), false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::validation(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    /// Places every parameter on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.entries.iter().map(|e| graph.param(e.value.clone())).collect(),
        }
    }
}

/// Graph variables for each parameter of a store, by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient for every parameter, zero where nothing flowed.
    pub fn collect_grads(&self, graph: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads.get(v).cloned().unwrap_or_else(|| {
                    let [r, c] = graph.value(v).shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    }
}

pub fn uniform_init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_std_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = uniform_init(200, 64, &mut rng);
        let bound = (6.0 / 264.0f64).sqrt();
        let analytic = bound / 3f64.sqrt();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - analytic).abs() / analytic < 0.1);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::new();
        let id = s.add_bias("b", 3);
        assert!(s.set(id, Tensor::zeros(1, 4)).is_err());
        s.set(id, Tensor::filled(1, 3, 2.0)).unwrap();
        assert_eq!(s.get(id).data(), &[2.0; 3]);
        assert_eq!(s.find("b"), Some(id));
    }
}
