//! Decoder step: context query, multi-pointer scores, cost bias, tanh clipping and masking.

use super::{NodeEmbeddings, Policy};
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::neural::{dot, gemm, Real, Tensor};

/// Node embeddings premultiplied by the averaged pointer form: row `j` holds
/// `A k_j`, so the pointer interaction with query `q` is a single dot product.
/// Computed once per instance and shared by every decoding step and start node.
#[derive(Debug, Clone)]
pub struct PointerKeys<T = f32> {
    keys: Tensor<T>,
}

impl<T: Real> PointerKeys<T> {
    pub fn new(nodes: &Tensor<T>, pointer_matrix: &Tensor<T>) -> Self {
        let mut keys = Tensor::zeros(&[nodes.rows(), nodes.cols()]);
        gemm(T::one(), nodes.view(), pointer_matrix.view().t(), T::zero(), keys.view_mut());
        PointerKeys { keys }
    }

    /// Pointer interaction `PN_j` between query `q` and node `j`.
    #[inline]
    pub fn interaction(&self, q: &[T], j: usize) -> T {
        dot(self.keys.row(j), q)
    }

    pub fn keys(&self) -> &Tensor<T> {
        &self.keys
    }
}

/// Decoding state of one partial route.
#[derive(Debug, Clone)]
pub struct ContextState<T = f32> {
    first: Option<usize>,
    last: Option<usize>,
    route_sum: Vec<T>,
    visited: Vec<bool>,
    order: Vec<usize>,
}

impl<T: Real> ContextState<T> {
    pub fn new(n: usize, d: usize) -> Self {
        ContextState {
            first: None,
            last: None,
            route_sum: vec![T::zero(); d],
            visited: vec![false; n],
            order: Vec::with_capacity(n),
        }
    }

    /// State after visiting only `start`.
    pub fn starting_at(emb: &NodeEmbeddings<T>, start: usize) -> Self {
        let mut s = Self::new(emb.len(), emb.nodes.cols());
        s.visit(emb, start);
        s
    }

    pub fn visit(&mut self, emb: &NodeEmbeddings<T>, node: usize) {
        debug_assert!(!self.visited[node], "node {node} visited twice");
        if self.first.is_none() {
            self.first = Some(node);
        }
        self.last = Some(node);
        self.visited[node] = true;
        self.order.push(node);
        for (s, &v) in self.route_sum.iter_mut().zip(emb.node(node)) {
            *s += v;
        }
    }

    /// Number of visited nodes.
    pub fn t(&self) -> usize {
        self.order.len()
    }

    pub fn first(&self) -> Option<usize> {
        self.first
    }

    pub fn last(&self) -> Option<usize> {
        self.last
    }

    pub fn route_sum(&self) -> &[T] {
        &self.route_sum
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn into_order(self) -> Vec<usize> {
        self.order
    }

    pub fn is_complete(&self) -> bool {
        self.order.len() == self.visited.len()
    }
}

/// `q_t = (h_g + h_route) / n + h_last + h_first`.
pub fn context_query<T: Real>(emb: &NodeEmbeddings<T>, state: &ContextState<T>, n: usize) -> Result<Vec<T>> {
    let mut q = vec![T::zero(); emb.graph.len()];
    query_into(emb, state, n, true, &mut q)?;
    Ok(q)
}

pub(crate) fn query_into<T: Real>(
    emb: &NodeEmbeddings<T>,
    state: &ContextState<T>,
    n: usize,
    enhanced: bool,
    q: &mut [T],
) -> Result<()> {
    let (first, last) = match (state.first, state.last) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::EmptyRoute),
    };
    let inv_n = T::of(1.0 / n as f64);
    let (hf, hl) = (emb.node(first), emb.node(last));
    for c in 0..q.len() {
        let global = if enhanced {
            (emb.graph[c] + state.route_sum[c]) * inv_n
        } else {
            T::zero()
        };
        q[c] = global + hl[c] + hf[c];
    }
    Ok(())
}

/// Next-node distribution of one decoding step.
#[derive(Debug, Clone)]
pub struct StepDistribution {
    /// `tanh(PN_j − cost(last, j))` for candidates, 0 for visited nodes.
    pub clipped: Vec<f64>,
    /// `C · tanh(score)` for candidates, `-inf` for visited nodes.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_norm: f64,
}

impl StepDistribution {
    /// Most likely node; lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for j in 1..self.logits.len() {
            if self.logits[j] > self.logits[best] {
                best = j;
            }
        }
        best
    }

    /// Inverse-CDF draw for a uniform `r` in [0, 1); never returns a masked node.
    pub fn sample(&self, r: f64) -> usize {
        let mut acc = 0.0;
        let mut fallback = None;
        for (j, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                fallback = Some(j);
                if r < acc {
                    return j;
                }
            }
        }
        fallback.expect("distribution has at least one candidate")
    }

    pub fn log_prob(&self, j: usize) -> f64 {
        self.logits[j] - self.log_norm
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// Distribution over nodes given pointer interactions `pn` (one per node).
pub(crate) fn step_from_interactions(
    pn: impl Fn(usize) -> f64,
    last: usize,
    instance: &Instance,
    visited: &[bool],
    clip: f64,
) -> Result<StepDistribution> {
    let n = instance.len();
    let mut clipped = vec![0.0; n];
    let mut logits = vec![f64::NEG_INFINITY; n];
    let mut max = f64::NEG_INFINITY;
    for j in 0..n {
        if !visited[j] {
            let score = pn(j) - instance.cost(last, j);
            clipped[j] = score.tanh();
            logits[j] = clip * clipped[j];
            max = max.max(logits[j]);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::NoCandidates);
    }
    let mut probs = vec![0.0; n];
    let mut z = 0.0;
    for j in 0..n {
        if !visited[j] {
            probs[j] = (logits[j] - max).exp();
            z += probs[j];
        }
    }
    for p in &mut probs {
        *p /= z;
    }
    Ok(StepDistribution {
        clipped,
        logits,
        probs,
        log_norm: max + z.ln(),
    })
}

/// Next-node probabilities for query `q` after `last` was visited.
/// Visited nodes get probability exactly 0.
pub fn pointer_distribution<T: Real>(
    policy: &Policy<T>,
    q: &[T],
    emb: &NodeEmbeddings<T>,
    last: usize,
    instance: &Instance,
    visited: &[bool],
    clip: f64,
) -> Result<Vec<f64>> {
    let n = instance.len();
    if emb.len() != n || visited.len() != n {
        return Err(Error::Dimension(format!(
            "{} embeddings and {} mask entries for {n} nodes",
            emb.len(),
            visited.len()
        )));
    }
    if q.len() != emb.nodes.cols() {
        return Err(Error::Dimension(format!(
            "query width {} does not match embedding width {}",
            q.len(),
            emb.nodes.cols()
        )));
    }
    if last >= n || !visited[last] {
        return Err(Error::param(format!("last node {last} must be a visited node")));
    }
    let keys = policy.pointer_keys(emb);
    let step = step_from_interactions(|j| keys.interaction(q, j).to_f64_lossless(), last, instance, visited, clip)?;
    Ok(step.probs)
}
