//! Named parameter storage and gradient buffers.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub trainable: bool,
    /// Included in the L2 penalty.
    pub regularized: bool,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>, regularized: bool) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), value.len(), "parameter {name} shape mismatch");
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param {
            name,
            shape,
            value,
            trainable: true,
            regularized,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Param::len).sum()
    }

    /// `lambda * sum(w^2)` over regularized parameters.
    pub fn l2_penalty(&self, lambda: f32) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        let sum: f64 = self
            .params
            .iter()
            .filter(|p| p.regularized)
            .flat_map(|p| p.value.iter())
            .map(|&w| (w as f64) * (w as f64))
            .sum();
        lambda as f64 * sum
    }
}

/// Gradient buffers, allocated only for trainable parameters.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| p.trainable.then(|| vec![0.0; p.len()]))
                .collect(),
        }
    }

    pub fn wants(&self, id: ParamId) -> bool {
        self.grads[id.0].is_some()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f32]) {
        if let Some(buf) = &mut self.grads[id.0] {
            assert_eq!(buf.len(), g.len(), "gradient length mismatch");
            buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<f32>> {
        self.grads[id.0].as_mut()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().flatten().all(|v| v.is_finite())
    }
}
