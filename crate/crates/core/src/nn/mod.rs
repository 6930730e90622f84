//! Minimal differentiable-computation layer.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use graph::{Grads, Graph, Var};
pub use layers::{
    dropout, softmax_t, BatchNorm1d, BiGru, ForwardCtx, GruCell, Init, Linear, Mode,
    MultiHeadAttention, LEAKY_SLOPE,
};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimState};
pub use params::{ParamEntry, ParamStore};
pub use tensor::{Real, Tensor};

/// Gradients of every trainable parameter leaf in `g`, as `(param id, grad)`
/// pairs at 64-bit, sorted by id. Parameters that do not influence the loss
/// get zero gradients.
pub fn param_grads<T: Real>(
    g: &Graph<T>,
    grads: &Grads<T>,
    store: &ParamStore,
) -> Vec<(usize, Tensor<f64>)> {
    let mut out: Vec<(usize, Tensor<f64>)> = g
        .param_vars()
        .filter(|(id, _)| store.entry(*id).trainable)
        .map(|(id, v)| {
            let t = grads
                .wrt(v)
                .map(|t| t.to_f64())
                .unwrap_or_else(|| Tensor::zeros(store.entry(id).value.shape()));
            (id, t)
        })
        .collect();
    out.sort_by_key(|(id, _)| *id);
    out
}
