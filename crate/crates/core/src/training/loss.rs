//! REINFORCE loss over frozen multi-start trajectories and its exact gradient.
//!
//! `loss = −1/(B·N) Σ_i Σ_j adv_ij · log p(τ_ij)`; advantages are constants.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::neural::{axpy, dot, gemm, rev_stack_backward, rev_stack_forward, GradBuffer, Real, Tensor};
use crate::policy::decoder::{query_into, step_from_interactions, ContextState};
use crate::policy::{ModelConfig, NodeEmbeddings, Policy};
use crate::rollout::{score_order, RolloutBatch};

/// Visiting orders and their advantages, one row per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBatch {
    pub orders: Vec<Vec<Vec<usize>>>,
    pub advantages: Vec<Vec<f64>>,
}

impl FrozenBatch {
    pub fn new(orders: Vec<Vec<Vec<usize>>>, advantages: Vec<Vec<f64>>) -> Result<Self> {
        if orders.len() != advantages.len() {
            return Err(Error::Dimension(format!(
                "{} order sets for {} advantage sets",
                orders.len(),
                advantages.len()
            )));
        }
        for (o, a) in orders.iter().zip(&advantages) {
            if o.len() != a.len() || o.is_empty() {
                return Err(Error::Dimension(format!("{} orders with {} advantages", o.len(), a.len())));
            }
        }
        Ok(FrozenBatch { orders, advantages })
    }

    pub fn from_rollout(batch: &RolloutBatch, advantages: Vec<Vec<f64>>) -> Result<Self> {
        let orders = batch
            .trajectories
            .iter()
            .map(|ts| ts.iter().map(|t| t.order.clone()).collect())
            .collect();
        Self::new(orders, advantages)
    }

    fn weight(&self) -> f64 {
        let total: usize = self.orders.iter().map(Vec::len).sum();
        1.0 / total as f64
    }
}

fn check_sizes(instances: &[&Instance], batch: &FrozenBatch) -> Result<()> {
    if instances.len() != batch.orders.len() {
        return Err(Error::Dimension(format!(
            "{} instances for {} order sets",
            instances.len(),
            batch.orders.len()
        )));
    }
    Ok(())
}

/// Forward-only loss, re-scoring every order teacher-forced.
pub fn reinforce_loss<T: Real>(policy: &Policy<T>, instances: &[&Instance], batch: &FrozenBatch) -> Result<f64> {
    check_sizes(instances, batch)?;
    let encoded = policy.encode(instances)?;
    let w = batch.weight();
    let mut loss = 0.0;
    for (g, inst) in instances.iter().enumerate() {
        let emb = encoded.embeddings(g);
        for (order, &adv) in batch.orders[g].iter().zip(&batch.advantages[g]) {
            let lp: f64 = score_order(policy, &emb, inst, order)?.iter().sum();
            loss -= w * adv * lp;
        }
    }
    Ok(loss)
}

/// Decoder backward for one instance: accumulates into its rows of `dk`
/// (gradient w.r.t. pointer keys) and `de` (w.r.t. node embeddings).
#[allow(clippy::too_many_arguments)]
fn decoder_backward<T: Real>(
    cfg: &ModelConfig,
    emb: &NodeEmbeddings<T>,
    keys: &[T],
    instance: &Instance,
    orders: &[Vec<usize>],
    advantages: &[f64],
    weight: f64,
    dk: &mut [T],
    de: &mut [T],
) -> Result<f64> {
    let n = instance.len();
    let d = emb.nodes.cols();
    let inv_n = T::of(1.0 / n as f64);
    let key = |j: usize| &keys[j * d..(j + 1) * d];
    let mut loss = 0.0;
    let mut q = vec![T::zero(); d];
    let mut dq_steps = vec![T::zero(); n * d];
    let mut suffix = vec![T::zero(); d];
    let mut total = vec![T::zero(); d];
    for (order, &adv) in orders.iter().zip(advantages) {
        crate::instance::validate_permutation(n, order)?;
        let w = -adv * weight;
        if w == 0.0 {
            continue;
        }
        dq_steps.fill(T::zero());
        let mut state = ContextState::starting_at(emb, order[0]);
        for step in 1..n {
            query_into(emb, &state, n, cfg.enhanced_context, &mut q)?;
            let last = order[step - 1];
            let dist = step_from_interactions(
                |j| dot(key(j), &q).to_f64_lossless(),
                last,
                instance,
                state.visited(),
                cfg.clip,
            )?;
            let chosen = order[step];
            loss += w * dist.log_prob(chosen);
            let dq = &mut dq_steps[step * d..(step + 1) * d];
            for k in 0..n {
                if state.visited()[k] {
                    continue;
                }
                let du = w * (f64::from(u8::from(k == chosen)) - dist.probs[k]);
                let ds = du * cfg.clip * (1.0 - dist.clipped[k] * dist.clipped[k]);
                if ds == 0.0 {
                    continue;
                }
                axpy(T::of(ds), &q, &mut dk[k * d..(k + 1) * d]);
                axpy(T::of(ds), key(k), dq);
            }
            state.visit(emb, chosen);
        }
        // q_t = (h_g + Σ_{k<t} e_{order[k]}) / n + e_last + e_first
        let first = order[0];
        suffix.fill(T::zero());
        for step in (1..n).rev() {
            let dq = &dq_steps[step * d..(step + 1) * d];
            axpy(T::one(), dq, &mut de[order[step - 1] * d..order[step - 1] * d + d]);
            axpy(T::one(), dq, &mut de[first * d..first * d + d]);
            if cfg.enhanced_context {
                axpy(inv_n, dq, &mut suffix);
                axpy(inv_n, dq, &mut total);
                axpy(T::one(), &suffix, &mut de[order[step - 1] * d..order[step - 1] * d + d]);
            }
        }
    }
    if cfg.enhanced_context {
        for i in 0..n {
            axpy(T::one(), &total, &mut de[i * d..(i + 1) * d]);
        }
    }
    Ok(loss)
}

/// Accumulates the gradient of [`reinforce_loss`] into `grads` and returns the loss.
pub fn reinforce_backward<T: Real>(
    policy: &Policy<T>,
    instances: &[&Instance],
    batch: &FrozenBatch,
    grads: &mut GradBuffer,
) -> Result<f64> {
    check_sizes(instances, batch)?;
    let cfg = *policy.config();
    let layout = policy.layout();
    let params = policy.params();
    let (n, feats, h0) = policy.embed_inputs(instances)?;
    let shape = policy.attn_shape(n);
    let (y1, y2) = rev_stack_forward(params, &layout.layers, &h0, &h0, shape)?;
    drop(h0);
    let mut nodes = y1.clone();
    nodes.add_assign(&y2);
    nodes.scale(T::of(0.5));
    let d = cfg.d;
    let a = policy.pointer_matrix();
    let mut keys = Tensor::zeros(&[nodes.rows(), d]);
    gemm(T::one(), nodes.view(), a.view().t(), T::zero(), keys.view_mut());

    let mut dk = Tensor::<T>::zeros(&[nodes.rows(), d]);
    let mut de = Tensor::<T>::zeros(&[nodes.rows(), d]);
    let weight = batch.weight();
    let chunk = n * d;
    let losses = dk
        .data_mut()
        .par_chunks_mut(chunk)
        .zip(de.data_mut().par_chunks_mut(chunk))
        .enumerate()
        .map(|(g, (dk_g, de_g))| {
            let rows = &nodes.data()[g * chunk..(g + 1) * chunk];
            let emb_nodes = Tensor::from_vec(&[n, d], rows.to_vec())?;
            let mut graph = vec![T::zero(); d];
            for i in 0..n {
                axpy(T::one(), emb_nodes.row(i), &mut graph);
            }
            let emb = NodeEmbeddings {
                nodes: emb_nodes,
                graph,
            };
            decoder_backward(
                &cfg,
                &emb,
                &keys.data()[g * chunk..(g + 1) * chunk],
                instances[g],
                &batch.orders[g],
                &batch.advantages[g],
                weight,
                dk_g,
                de_g,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    let loss = losses.iter().sum();

    // keys = E Aᵀ
    gemm(T::one(), dk.view(), a.view(), T::one(), de.view_mut());
    let mut da = Tensor::<T>::zeros(&[d, d]);
    gemm(T::one(), dk.view().t(), nodes.view(), T::zero(), da.view_mut());
    drop(dk);
    // A = s Wq Wkᵀ
    let s = T::of(1.0 / (cfg.pointer_heads as f64 * (cfg.d_k as f64).sqrt()));
    let (wq, wk) = (params.get(layout.pointer_query), params.get(layout.pointer_key));
    let mut dwq = Tensor::<T>::zeros(wq.shape());
    gemm(s, da.view(), wk.view(), T::zero(), dwq.view_mut());
    let mut dwk = Tensor::<T>::zeros(wk.shape());
    gemm(s, da.view().t(), wq.view(), T::zero(), dwk.view_mut());
    grads.accumulate(layout.pointer_query, dwq.data(), 1.0);
    grads.accumulate(layout.pointer_key, dwk.data(), 1.0);

    // nodes = (y1 + y2) / 2
    de.scale(T::of(0.5));
    let stack = rev_stack_backward(params, grads, &layout.layers, shape, &y1, &y2, &de, &de)?;
    let mut dh0 = stack.grad_x1;
    dh0.add_assign(&stack.grad_x2);
    let mut dw = Tensor::<T>::zeros(params.get(layout.embed_weight).shape());
    gemm(T::one(), feats.view().t(), dh0.view(), T::zero(), dw.view_mut());
    grads.accumulate(layout.embed_weight, dw.data(), 1.0);
    let mut db = vec![T::zero(); d];
    for i in 0..dh0.rows() {
        axpy(T::one(), dh0.row(i), &mut db);
    }
    grads.accumulate(layout.embed_bias, &db, 1.0);
    Ok(loss)
}
