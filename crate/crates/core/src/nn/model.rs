//! A network as an ordered list of named blocks.

use serde::{Deserialize, Serialize};

use super::layers::{Cache, Layer};
use super::loss::{bce_with_logits, sigmoid};
use super::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    Backbone,
    Head,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub role: BlockRole,
    pub layer: Layer,
}

/// Result of one recorded forward/backward pass.
#[derive(Debug)]
pub struct LossOutput {
    pub data_loss: f64,
    pub l2_penalty: f64,
    pub grads: Grads,
    pub probabilities: Vec<f32>,
}

impl LossOutput {
    pub fn total(&self) -> f64 {
        self.data_loss + self.l2_penalty
    }
}

/// Trainable binary classifier: blocks end in a single logit.
#[derive(Clone, Debug)]
pub struct Model {
    params: ParamStore,
    blocks: Vec<Block>,
    input_shape: [usize; 3],
}

impl Model {
    pub fn new(params: ParamStore, blocks: Vec<Block>, input_shape: [usize; 3]) -> Self {
        let out = blocks
            .iter()
            .fold(input_shape, |s, b| b.layer.output_shape(s));
        assert_eq!(out, [1, 1, 1], "network must end in a single logit");
        Self {
            params,
            blocks,
            input_shape,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.trainable_scalar_count()
    }

    pub fn block_params(&self, index: usize) -> Vec<ParamId> {
        let mut ids = Vec::new();
        self.blocks[index].layer.collect_params(&mut ids);
        ids
    }

    pub fn set_block_trainable(&mut self, index: usize, trainable: bool) {
        for id in self.block_params(index) {
            self.params.get_mut(id).trainable = trainable;
        }
    }

    fn check_input(&self, x: &Tensor) {
        let (h, w, c) = x.sample_shape();
        assert_eq!(
            [h, w, c],
            self.input_shape,
            "model expects {:?} inputs",
            self.input_shape
        );
    }

    pub fn forward_logits(&self, x: &Tensor) -> Vec<f32> {
        self.check_input(x);
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.layer.forward(&self.params, h, false).0;
        }
        h.into_data()
    }

    /// Output of the first `n_blocks` blocks.
    pub fn forward_prefix(&self, x: &Tensor, n_blocks: usize) -> Tensor {
        self.check_input(x);
        let mut h = x.clone();
        for b in &self.blocks[..n_blocks] {
            h = b.layer.forward(&self.params, h, false).0;
        }
        h
    }

    pub fn predict_proba(&self, x: &Tensor) -> Vec<f32> {
        self.forward_logits(x).into_iter().map(sigmoid).collect()
    }

    /// Loss (data term plus L2 penalty) and probabilities without
    /// gradients.
    pub fn evaluate_batch(&self, x: &Tensor, targets: &[f32], l2: f32) -> (f64, Vec<f32>) {
        let logits = self.forward_logits(x);
        let (loss, _) = bce_with_logits(&logits, targets);
        (loss + self.params.l2_penalty(l2), logits.into_iter().map(sigmoid).collect())
    }

    fn first_trainable_block(&self) -> Option<usize> {
        (0..self.blocks.len()).find(|&i| self.block_params(i).iter().any(|&id| self.params.is_trainable(id)))
    }

    /// Mean BCE plus `l2 * sum(w^2)` over regularized weights, with
    /// gradients for every trainable parameter. Blocks below the first
    /// trainable one run without recording.
    pub fn loss_and_grads(&self, x: &Tensor, targets: &[f32], l2: f32) -> LossOutput {
        self.check_input(x);
        let mut grads = Grads::for_store(&self.params);
        let first = self.first_trainable_block().unwrap_or(self.blocks.len());
        let mut h = x.clone();
        let mut caches: Vec<Cache> = Vec::with_capacity(self.blocks.len() - first.min(self.blocks.len()));
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, c) = b.layer.forward(&self.params, h, i >= first);
            if i >= first {
                caches.push(c);
            }
            h = y;
        }
        let logits = h.into_data();
        let (data_loss, dlogits) = bce_with_logits(&logits, targets);
        let mut g = Some(Tensor::new([dlogits.len(), 1, 1, 1], dlogits));
        for (i, cache) in (first..self.blocks.len()).zip(caches).rev() {
            g = self.blocks[i].layer.backward(
                &self.params,
                cache,
                g.expect("gradient reaches trainable block"),
                &mut grads,
                i > first,
            );
        }
        let l2_penalty = self.params.l2_penalty(l2);
        if l2 != 0.0 {
            for (id, p) in self.params.iter() {
                if p.regularized {
                    if let Some(buf) = grads.get_mut(id) {
                        buf.iter_mut().zip(&p.value).for_each(|(g, &w)| *g += 2.0 * l2 * w);
                    }
                }
            }
        }
        LossOutput {
            data_loss,
            l2_penalty,
            grads,
            probabilities: logits.into_iter().map(sigmoid).collect(),
        }
    }
}
