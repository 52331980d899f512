//! Multi-start decoding: one trajectory per start node, greedy or sampled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{closed_length, Instance, Tour};
use crate::neural::Real;
use crate::policy::decoder::{query_into, step_from_interactions, ContextState, PointerKeys, StepDistribution};
use crate::policy::{EncodedBatch, NodeEmbeddings, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Sample,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "sample" => Ok(DecodeMode::Sample),
            other => Err(Error::param(format!("unknown decode mode `{other}` (greedy|sample)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub order: Vec<usize>,
    /// One entry per decoded step; the forced start node has none.
    pub step_log_probs: Vec<f64>,
    /// Negative closed tour length.
    pub reward: f64,
}

impl Trajectory {
    pub fn start(&self) -> usize {
        self.order[0]
    }

    pub fn length(&self) -> f64 {
        -self.reward
    }
}

#[derive(Debug, Clone)]
pub struct RolloutBatch {
    /// `trajectories[i][s]` starts at node `s` of instance `i`.
    pub trajectories: Vec<Vec<Trajectory>>,
    pub mode: DecodeMode,
    pub seed: Option<u64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Mean tour length over every trajectory in the batch.
    pub fn mean_length(&self) -> f64 {
        let (sum, count) = self
            .trajectories
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, c), t| (s + t.length(), c + 1));
        sum / count.max(1) as f64
    }
}

pub fn trajectory_log_prob(traj: &Trajectory) -> f64 {
    traj.step_log_probs.iter().sum()
}

/// Shortest trajectory; the first one wins ties.
pub fn best_of(trajectories: &[Trajectory]) -> Result<Tour> {
    let mut best: Option<&Trajectory> = None;
    for t in trajectories {
        if best.is_none_or(|b| t.length() < b.length()) {
            best = Some(t);
        }
    }
    let t = best.ok_or_else(|| Error::param("best_of needs at least one trajectory"))?;
    Ok(Tour::from_parts(t.order.clone(), t.length()))
}

fn stream_rng(seed: u64, instance: usize, start: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((instance as u64) << 32) | start as u64);
    rng
}

/// Decodes one route from `start`; `pick` chooses the node at each step.
fn decode<T: Real>(
    policy: &Policy<T>,
    emb: &NodeEmbeddings<T>,
    keys: &PointerKeys<T>,
    instance: &Instance,
    start: usize,
    mut pick: impl FnMut(&StepDistribution, usize) -> usize,
) -> Result<Trajectory> {
    let n = instance.len();
    let cfg = policy.config();
    let mut state = ContextState::starting_at(emb, start);
    let mut q = vec![T::zero(); emb.nodes.cols()];
    let mut step_log_probs = Vec::with_capacity(n.saturating_sub(1));
    for step in 1..n {
        query_into(emb, &state, n, cfg.enhanced_context, &mut q)?;
        let last = state.last().expect("route is non-empty");
        let dist = step_from_interactions(
            |j| keys.interaction(&q, j).to_f64_lossless(),
            last,
            instance,
            state.visited(),
            cfg.clip,
        )?;
        let next = pick(&dist, step);
        if state.visited()[next] {
            return Err(Error::param(format!("node {next} chosen twice")));
        }
        step_log_probs.push(dist.log_prob(next));
        state.visit(emb, next);
    }
    let order = state.into_order();
    let reward = -closed_length(instance, &order);
    Ok(Trajectory {
        order,
        step_log_probs,
        reward,
    })
}

fn check_mode(mode: DecodeMode, seed: Option<u64>) -> Result<()> {
    if mode == DecodeMode::Sample && seed.is_none() {
        return Err(Error::param("sample mode requires a seed"));
    }
    Ok(())
}

fn rollout_embedded<T: Real>(
    policy: &Policy<T>,
    emb: &NodeEmbeddings<T>,
    instance: &Instance,
    index: usize,
    mode: DecodeMode,
    seed: Option<u64>,
) -> Result<Vec<Trajectory>> {
    let keys = policy.pointer_keys(emb);
    (0..instance.len())
        .map(|start| match mode {
            DecodeMode::Greedy => decode(policy, emb, &keys, instance, start, |d, _| d.argmax()),
            DecodeMode::Sample => {
                let mut rng = stream_rng(seed.unwrap_or_default(), index, start);
                decode(policy, emb, &keys, instance, start, |d, _| d.sample(rng.random::<f64>()))
            }
        })
        .collect()
}

/// `N` trajectories, trajectory `s` starting at node `s`. The encoder runs once.
pub fn multi_start_rollout<T: Real>(
    policy: &Policy<T>,
    instance: &Instance,
    mode: DecodeMode,
    seed: Option<u64>,
) -> Result<Vec<Trajectory>> {
    check_mode(mode, seed)?;
    let emb = policy.encode_one(instance)?;
    rollout_embedded(policy, &emb, instance, 0, mode, seed)
}

/// Rollouts over already encoded instances, in parallel across instances.
pub fn rollout_encoded<T: Real>(
    policy: &Policy<T>,
    instances: &[&Instance],
    encoded: &EncodedBatch<T>,
    mode: DecodeMode,
    seed: Option<u64>,
) -> Result<RolloutBatch> {
    check_mode(mode, seed)?;
    if encoded.batch() != instances.len() {
        return Err(Error::Dimension(format!(
            "{} encoded instances for {} inputs",
            encoded.batch(),
            instances.len()
        )));
    }
    let trajectories = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| rollout_embedded(policy, &encoded.embeddings(i), inst, i, mode, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch {
        trajectories,
        mode,
        seed,
    })
}

/// Encodes a batch of equally sized instances in one pass and decodes all starts.
pub fn rollout_batch<T: Real>(
    policy: &Policy<T>,
    instances: &[&Instance],
    mode: DecodeMode,
    seed: Option<u64>,
) -> Result<(RolloutBatch, EncodedBatch<T>)> {
    check_mode(mode, seed)?;
    let encoded = policy.encode(instances)?;
    let batch = rollout_encoded(policy, instances, &encoded, mode, seed)?;
    Ok((batch, encoded))
}

/// Per-step log-probabilities of a given visiting order under the policy.
pub fn score_order<T: Real>(
    policy: &Policy<T>,
    emb: &NodeEmbeddings<T>,
    instance: &Instance,
    order: &[usize],
) -> Result<Vec<f64>> {
    crate::instance::validate_permutation(instance.len(), order)?;
    let keys = policy.pointer_keys(emb);
    Ok(decode(policy, emb, &keys, instance, order[0], |_, step| order[step])?.step_log_probs)
}

/// Greedy best-of-starts tour for one instance.
pub fn solve_greedy<T: Real>(policy: &Policy<T>, instance: &Instance) -> Result<Tour> {
    best_of(&multi_start_rollout(policy, instance, DecodeMode::Greedy, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::nearest_neighbor;
    use crate::instance::generate_instances;
    use crate::policy::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 16,
            n_t: 2,
            heads: 4,
            pointer_heads: 2,
            d_k: 8,
            ..Default::default()
        }
    }

    fn traj(len: f64, start: usize) -> Trajectory {
        Trajectory {
            order: vec![start],
            step_log_probs: vec![],
            reward: -len,
        }
    }

    #[test]
    fn one_trajectory_per_start() {
        let policy = Policy::<f32>::new(tiny(), 1).unwrap();
        let inst = Instance::new(vec![[0.1, 0.2], [0.5, 0.9], [0.8, 0.3]]).unwrap();
        for mode in [DecodeMode::Greedy, DecodeMode::Sample] {
            let trajs = multi_start_rollout(&policy, &inst, mode, Some(4)).unwrap();
            assert_eq!(trajs.len(), 3);
            for (s, t) in trajs.iter().enumerate() {
                assert_eq!(t.start(), s);
                crate::instance::validate_permutation(3, &t.order).unwrap();
                assert_eq!(t.step_log_probs.len(), 2);
                assert!(t.step_log_probs.iter().all(|&lp| lp <= 0.0));
                assert!((t.length() - crate::instance::tour_length(&inst, &t.order).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_pointer_weights_follow_nearest_neighbor() {
        let mut policy = Policy::<f32>::new(tiny(), 2).unwrap();
        policy.zero_pointer_projections();
        let inst = Instance::new(vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]]).unwrap();
        let trajs = multi_start_rollout(&policy, &inst, DecodeMode::Greedy, None).unwrap();
        assert_eq!(trajs[0].order, vec![0, 1, 2]);
        assert!((trajs[0].length() - 2.0).abs() < 1e-12);
        for inst in generate_instances(3, 12, 10).unwrap() {
            let trajs = multi_start_rollout(&policy, &inst, DecodeMode::Greedy, None).unwrap();
            for (s, t) in trajs.iter().enumerate() {
                assert_eq!(t.order, nearest_neighbor(&inst, s).unwrap().into_order());
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let policy = Policy::<f32>::new(tiny(), 3).unwrap();
        let inst = &generate_instances(5, 10, 1).unwrap()[0];
        let a = multi_start_rollout(&policy, inst, DecodeMode::Sample, Some(9)).unwrap();
        let b = multi_start_rollout(&policy, inst, DecodeMode::Sample, Some(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            multi_start_rollout(&policy, inst, DecodeMode::Sample, None),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn batch_matches_single_rollouts() {
        let policy = Policy::<f32>::new(tiny(), 4).unwrap();
        let insts = generate_instances(6, 8, 3).unwrap();
        let refs: Vec<&Instance> = insts.iter().collect();
        let (batch, _) = rollout_batch(&policy, &refs, DecodeMode::Greedy, None).unwrap();
        for (i, inst) in insts.iter().enumerate() {
            let single = multi_start_rollout(&policy, inst, DecodeMode::Greedy, None).unwrap();
            for (a, b) in batch.trajectories[i].iter().zip(&single) {
                assert_eq!(a.order, b.order);
                assert!((a.reward - b.reward).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn best_of_picks_shortest_first() {
        assert_eq!(best_of(&[traj(5.0, 0), traj(4.0, 1), traj(6.0, 2)]).unwrap().order()[0], 1);
        assert_eq!(best_of(&[traj(3.0, 0), traj(3.0, 1)]).unwrap().order()[0], 0);
        assert!(matches!(best_of(&[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn log_prob_is_step_sum() {
        let mut t = traj(1.0, 0);
        t.step_log_probs = vec![0.0, 0.0];
        assert_eq!(trajectory_log_prob(&t), 0.0);
        t.step_log_probs = vec![0.5f64.ln(), 0.5f64.ln()];
        assert!((trajectory_log_prob(&t) - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rescoring_matches_recorded_log_probs() {
        let policy = Policy::<f32>::new(tiny(), 5).unwrap();
        let inst = &generate_instances(7, 9, 1).unwrap()[0];
        let emb = policy.encode_one(inst).unwrap();
        for t in multi_start_rollout(&policy, inst, DecodeMode::Sample, Some(1)).unwrap() {
            let lp = score_order(&policy, &emb, inst, &t.order).unwrap();
            assert!((lp.iter().sum::<f64>() - trajectory_log_prob(&t)).abs() <= 1e-5);
        }
    }

    #[test]
    fn best_of_never_worse_than_any_trajectory() {
        let policy = Policy::<f32>::new(tiny(), 6).unwrap();
        for inst in generate_instances(8, 7, 100).unwrap() {
            let trajs = multi_start_rollout(&policy, &inst, DecodeMode::Sample, Some(2)).unwrap();
            let best = best_of(&trajs).unwrap();
            assert!(trajs.iter().all(|t| best.length() <= t.length()));
        }
    }
}
