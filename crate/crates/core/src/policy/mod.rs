//! The multi-pointer policy: feature embedding, reversible attention encoder and
//! the cost-biased pointer decoder.

pub(crate) mod decoder;
mod features;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{
    context_query, pointer_distribution, ContextState, PointerKeys, StepDistribution,
};
pub use features::{featurize, featurize_with, AngleFeature, BASE_FEATURES, FEATURES_PER_NODE};

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::neural::{
    gemm, matmul, rev_stack_forward, AttnShape, EncoderLayerIds, ParamId, ParamStore, Params, Real,
    Tensor,
};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Encoder layers.
    pub n_t: usize,
    /// Self-attention heads.
    pub heads: usize,
    /// Pointer projections averaged by the decoder.
    #[serde(rename = "H")]
    pub pointer_heads: usize,
    /// Width of each pointer projection.
    pub d_k: usize,
    /// Logit clipping constant.
    #[serde(rename = "C")]
    pub clip: f64,
    #[serde(default)]
    pub angle: AngleFeature,
    /// Use all eight symmetric copies of the node features (24 inputs) or only the identity (3).
    #[serde(default = "default_true")]
    pub feature_augmentation: bool,
    /// Include the graph and partial-route sums in the decoder query.
    #[serde(default = "default_true")]
    pub enhanced_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            n_t: 6,
            heads: 8,
            pointer_heads: 8,
            d_k: 128,
            clip: 50.0,
            angle: AngleFeature::Atan2,
            feature_augmentation: true,
            enhanced_context: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("n_t", self.n_t),
            ("heads", self.heads),
            ("H", self.pointer_heads),
            ("d_k", self.d_k),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    field: field.into(),
                    msg: "must be positive".into(),
                });
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config {
                field: "heads".into(),
                msg: format!("d = {} is not divisible by {} heads", self.d, self.heads),
            });
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::Config {
                field: "C".into(),
                msg: format!("must be positive and finite, got {}", self.clip),
            });
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        if self.feature_augmentation {
            FEATURES_PER_NODE
        } else {
            BASE_FEATURES
        }
    }

    /// Whether parameters of `other` could be loaded into a model built from `self`.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let pairs = [
            ("d", self.d, other.d),
            ("n_t", self.n_t, other.n_t),
            ("heads", self.heads, other.heads),
            ("H", self.pointer_heads, other.pointer_heads),
            ("d_k", self.d_k, other.d_k),
            ("input width", self.input_width(), other.input_width()),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::ConfigMismatch(format!("{name}: model has {a}, checkpoint has {b}")));
            }
        }
        Ok(())
    }
}

/// Parameter handles of the whole policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLayout {
    pub embed_weight: ParamId,
    pub embed_bias: ParamId,
    pub layers: Vec<EncoderLayerIds>,
    /// `d x (H * d_k)`; columns `h*d_k..(h+1)*d_k` hold query projection `h`.
    pub pointer_query: ParamId,
    /// `d x (H * d_k)`, key projections laid out like `pointer_query`.
    pub pointer_key: ParamId,
}

impl PolicyLayout {
    fn lookup<T: Real>(params: &Params<T>, cfg: &ModelConfig) -> Result<Self> {
        let id = |s: &str| {
            params
                .id(s)
                .ok_or_else(|| Error::param(format!("missing parameter `{s}`")))
        };
        let layout = PolicyLayout {
            embed_weight: id("embed.weight")?,
            embed_bias: id("embed.bias")?,
            layers: (0..cfg.n_t)
                .map(|l| EncoderLayerIds::lookup(params, &format!("encoder.{l}")))
                .collect::<Result<_>>()?,
            pointer_query: id("pointer.wq")?,
            pointer_key: id("pointer.wk")?,
        };
        layout.check_shapes(params, cfg)?;
        Ok(layout)
    }

    fn check_shapes<T: Real>(&self, params: &Params<T>, cfg: &ModelConfig) -> Result<()> {
        let (d, hk) = (cfg.d, cfg.pointer_heads * cfg.d_k);
        let mut expected = vec![
            (self.embed_weight, vec![cfg.input_width(), d]),
            (self.embed_bias, vec![d]),
            (self.pointer_query, vec![d, hk]),
            (self.pointer_key, vec![d, hk]),
        ];
        for l in &self.layers {
            for id in [l.attn_norm_gain, l.attn_norm_bias, l.ff_norm_gain, l.ff_norm_bias, l.b2] {
                expected.push((id, vec![d]));
            }
            for id in [l.wq, l.wk, l.wv, l.wo] {
                expected.push((id, vec![d, d]));
            }
            expected.push((l.w1, vec![d, 4 * d]));
            expected.push((l.b1, vec![4 * d]));
            expected.push((l.w2, vec![4 * d, d]));
        }
        for (id, shape) in expected {
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    shape
                )));
            }
        }
        let count = 4 + 12 * self.layers.len();
        if params.len() != count {
            return Err(Error::ConfigMismatch(format!(
                "config implies {count} tensors, found {}",
                params.len()
            )));
        }
        Ok(())
    }
}

/// Per-node encoder outputs of one instance and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings<T = f32> {
    pub nodes: Tensor<T>,
    pub graph: Vec<T>,
}

impl<T: Real> NodeEmbeddings<T> {
    pub fn len(&self) -> usize {
        self.nodes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.rows() == 0
    }

    pub fn node(&self, i: usize) -> &[T] {
        self.nodes.row(i)
    }
}

/// Encoder outputs for a batch of equally sized instances.
#[derive(Debug, Clone)]
pub struct EncodedBatch<T = f32> {
    pub n: usize,
    /// Stack outputs, `(batch * n) x d` each; kept for the reversible backward pass.
    pub y1: Tensor<T>,
    pub y2: Tensor<T>,
    /// `(y1 + y2) / 2`.
    pub nodes: Tensor<T>,
}

impl<T: Real> EncodedBatch<T> {
    pub fn batch(&self) -> usize {
        self.nodes.rows() / self.n
    }

    pub fn embeddings(&self, g: usize) -> NodeEmbeddings<T> {
        let d = self.nodes.cols();
        let rows = &self.nodes.data()[g * self.n * d..(g + 1) * self.n * d];
        let nodes = Tensor::from_vec(&[self.n, d], rows.to_vec()).unwrap();
        let mut graph = vec![T::zero(); d];
        for i in 0..self.n {
            for (s, &v) in graph.iter_mut().zip(nodes.row(i)) {
                *s += v;
            }
        }
        NodeEmbeddings { nodes, graph }
    }
}

#[derive(Debug)]
pub struct Policy<T: Real = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    layout: PolicyLayout,
    encode_calls: AtomicUsize,
}

impl<T: Real> Clone for Policy<T> {
    fn clone(&self) -> Self {
        Policy {
            config: self.config,
            store: self.store.clone(),
            layout: self.layout.clone(),
            encode_calls: AtomicUsize::new(0),
        }
    }
}

impl<T: Real> Policy<T> {
    /// Freshly initialized policy.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, width) = (config.d, config.input_width());
        store.add_uniform("embed.weight", &[width, d], width, &mut rng)?;
        store.add_uniform("embed.bias", &[d], width, &mut rng)?;
        for l in 0..config.n_t {
            EncoderLayerIds::init(&mut store, &format!("encoder.{l}"), d, &mut rng)?;
        }
        let hk = config.pointer_heads * config.d_k;
        store.add_uniform("pointer.wq", &[d, hk], d, &mut rng)?;
        store.add_uniform("pointer.wk", &[d, hk], d, &mut rng)?;
        Self::from_store(config, store)
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = PolicyLayout::lookup(&store.params, &config)?;
        Ok(Policy {
            config,
            store,
            layout,
            encode_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the clipping constant, which has no parameters attached.
    pub fn set_clip(&mut self, clip: f64) -> Result<()> {
        let mut cfg = self.config;
        cfg.clip = clip;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn layout(&self) -> &PolicyLayout {
        &self.layout
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn params(&self) -> &Params<T> {
        &self.store.params
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    pub fn cast<U: Real>(&self) -> Policy<U> {
        Policy {
            config: self.config,
            store: self.store.cast(),
            layout: self.layout.clone(),
            encode_calls: AtomicUsize::new(0),
        }
    }

    /// Sets every pointer projection weight to zero, leaving the pure
    /// cost-biased nearest-node policy in the decoder.
    pub fn zero_pointer_projections(&mut self) {
        let (q, k) = (self.layout.pointer_query, self.layout.pointer_key);
        self.store.params.get_mut(q).data_mut().fill(T::zero());
        self.store.params.get_mut(k).data_mut().fill(T::zero());
    }

    /// Number of encoder passes run so far (each pass covers a whole batch).
    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn attn_shape(&self, n: usize) -> AttnShape {
        AttnShape {
            group: n,
            heads: self.config.heads,
        }
    }

    pub fn featurize(&self, instance: &Instance) -> Result<Tensor<f64>> {
        featurize_with(instance, self.config.angle, self.config.feature_augmentation)
    }

    /// Stacked model inputs and initial embeddings `h0 = F W + b` for equally sized instances.
    pub(crate) fn embed_inputs(&self, instances: &[&Instance]) -> Result<(usize, Tensor<T>, Tensor<T>)> {
        let n = match instances.first() {
            Some(i) => i.len(),
            None => return Err(Error::param("cannot encode an empty batch")),
        };
        if let Some(bad) = instances.iter().find(|i| i.len() != n) {
            return Err(Error::Dimension(format!(
                "batched instances must share a size: {} vs {n}",
                bad.len()
            )));
        }
        let width = self.config.input_width();
        let mut feats = Vec::with_capacity(instances.len() * n * width);
        for inst in instances {
            feats.extend(self.featurize(inst)?.data().iter().map(|&v| T::of(v)));
        }
        let feats = Tensor::from_vec(&[instances.len() * n, width], feats)?;
        let mut h0 = matmul(feats.view(), self.params().get(self.layout.embed_weight).view());
        crate::neural::add_row_bias(&mut h0, self.params().get(self.layout.embed_bias).data());
        Ok((n, feats, h0))
    }

    /// Runs the encoder once over a batch of equally sized normalized instances.
    pub fn encode(&self, instances: &[&Instance]) -> Result<EncodedBatch<T>> {
        let (n, _, h0) = self.embed_inputs(instances)?;
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let (y1, y2) = rev_stack_forward(self.params(), &self.layout.layers, &h0, &h0, self.attn_shape(n))?;
        let mut nodes = y1.clone();
        nodes.add_assign(&y2);
        nodes.scale(T::of(0.5));
        crate::neural::debug_finite(&nodes, "encoder");
        Ok(EncodedBatch { n, y1, y2, nodes })
    }

    /// Encoder outputs of a single instance.
    pub fn encode_one(&self, instance: &Instance) -> Result<NodeEmbeddings<T>> {
        Ok(self.encode(&[instance])?.embeddings(0))
    }

    /// The bilinear form averaged over pointer projections:
    /// `A = Wq Wkᵀ / (H √d_k)`, so that `PN_j = q · A · k_j`.
    pub fn pointer_matrix(&self) -> Tensor<T> {
        let (wq, wk) = (
            self.params().get(self.layout.pointer_query),
            self.params().get(self.layout.pointer_key),
        );
        let d = self.config.d;
        let mut a = Tensor::zeros(&[d, d]);
        let s = 1.0 / (self.config.pointer_heads as f64 * (self.config.d_k as f64).sqrt());
        gemm(T::of(s), wq.view(), wk.view().t(), T::zero(), a.view_mut());
        a
    }

    /// Projected keys for one instance's embeddings.
    pub fn pointer_keys(&self, emb: &NodeEmbeddings<T>) -> PointerKeys<T> {
        PointerKeys::new(&emb.nodes, &self.pointer_matrix())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::generate_instances;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 16,
            n_t: 2,
            heads: 4,
            pointer_heads: 2,
            d_k: 8,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { heads: 3, ..small() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { clip: 0.0, ..small() };
        assert!(bad.validate().is_err());
        let json = serde_json::to_value(small()).unwrap();
        assert_eq!(json["H"], 2);
        assert_eq!(json["C"], 50.0);
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let policy = Policy::<f64>::new(small(), 3).unwrap();
        let inst = generate_instances(4, 7, 1).unwrap().remove(0);
        let perm = vec![3, 0, 6, 1, 5, 2, 4];
        let shuffled = inst.permuted(&perm).unwrap();
        let a = policy.encode_one(&inst).unwrap();
        let b = policy.encode_one(&shuffled).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            for (x, y) in b.node(k).iter().zip(a.node(src)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        for (x, y) in a.graph.iter().zip(&b.graph) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_encoder_gives_zero_embeddings() {
        let mut policy = Policy::<f32>::new(small(), 5).unwrap();
        let ids: Vec<ParamId> = policy.params().iter().map(|(id, _, _)| id).collect();
        for id in ids {
            policy.store_mut().params.get_mut(id).data_mut().fill(0.0);
        }
        let inst = generate_instances(6, 5, 1).unwrap().remove(0);
        let emb = policy.encode_one(&inst).unwrap();
        assert!(emb.nodes.data().iter().all(|&v| v == 0.0));
        assert!(emb.graph.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_embedding_is_row_sum() {
        let policy = Policy::<f32>::new(small(), 7).unwrap();
        let set = generate_instances(8, 9, 3).unwrap();
        let refs: Vec<&Instance> = set.iter().collect();
        let batch = policy.encode(&refs).unwrap();
        assert_eq!(batch.batch(), 3);
        for g in 0..3 {
            let emb = batch.embeddings(g);
            for c in 0..16 {
                let sum: f64 = (0..9).map(|i| emb.node(i)[c] as f64).sum();
                assert!((sum - emb.graph[c] as f64).abs() <= 1e-4);
            }
            // batching does not couple instances
            let single = policy.encode_one(&set[g]).unwrap();
            assert!(single.nodes.max_abs_diff(&emb.nodes) < 1e-5);
        }
    }

    #[test]
    fn mixed_sizes_rejected() {
        let policy = Policy::<f32>::new(small(), 9).unwrap();
        let a = generate_instances(1, 5, 1).unwrap().remove(0);
        let b = generate_instances(1, 6, 1).unwrap().remove(0);
        assert!(matches!(policy.encode(&[&a, &b]), Err(Error::Dimension(_))));
    }

    #[test]
    fn store_shapes_are_checked() {
        let policy = Policy::<f32>::new(small(), 1).unwrap();
        let other = ModelConfig { d: 32, heads: 4, ..small() };
        assert!(matches!(
            Policy::from_store(other, policy.store().clone()),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
