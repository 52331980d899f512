//! Classical reference solvers: exact Held-Karp, nearest neighbor and 2-opt.

use crate::error::{Error, Result};
use crate::instance::{closed_length, Instance, Tour};

pub const HELD_KARP_MAX_NODES: usize = 16;

/// Exact optimum by dynamic programming over subsets, anchored at node 0.
pub fn held_karp(instance: &Instance) -> Result<Tour> {
    let n = instance.len();
    if n > HELD_KARP_MAX_NODES {
        return Err(Error::TooLarge {
            n,
            max: HELD_KARP_MAX_NODES,
        });
    }
    if n <= 3 {
        return Tour::new(instance, (0..n).collect());
    }
    // Subsets range over nodes 1..n; bit k stands for node k + 1.
    let m = n - 1;
    let full = (1usize << m) - 1;
    let mut cost = vec![f64::INFINITY; (1 << m) * m];
    let mut parent = vec![u8::MAX; (1 << m) * m];
    for k in 0..m {
        cost[(1 << k) * m + k] = instance.cost(0, k + 1);
    }
    for mask in 1..=full {
        for last in 0..m {
            if mask & (1 << last) == 0 {
                continue;
            }
            let here = cost[mask * m + last];
            if !here.is_finite() {
                continue;
            }
            let rest = full & !mask;
            let mut bits = rest;
            while bits != 0 {
                let next = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let nmask = mask | (1 << next);
                let cand = here + instance.cost(last + 1, next + 1);
                let slot = nmask * m + next;
                // Predecessors are visited in ascending order within each mask size,
                // so strict improvement keeps the smallest predecessor on ties.
                if cand < cost[slot] || (cand == cost[slot] && (last as u8) < parent[slot]) {
                    cost[slot] = cand;
                    parent[slot] = last as u8;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut best_last = 0;
    for last in 0..m {
        let total = cost[full * m + last] + instance.cost(last + 1, 0);
        if total < best {
            best = total;
            best_last = last;
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut mask = full;
    let mut last = best_last;
    loop {
        order.push(last + 1);
        let p = parent[mask * m + last];
        mask &= !(1 << last);
        if p == u8::MAX {
            break;
        }
        last = p as usize;
    }
    order.push(0);
    order.reverse();
    Tour::new(instance, order)
}

/// Greedy tour from `start`, always moving to the closest unvisited node
/// (lowest index on ties).
pub fn nearest_neighbor(instance: &Instance, start: usize) -> Result<Tour> {
    let n = instance.len();
    if start >= n {
        return Err(Error::param(format!("start node {start} out of range for {n} nodes")));
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    visited[start] = true;
    order.push(start);
    let mut cur = start;
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if !visited[j] {
                let d = instance.cost(cur, j);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
        }
        visited[best] = true;
        order.push(best);
        cur = best;
    }
    Tour::new(instance, order)
}

/// Shortest nearest-neighbor tour over every start node (lowest start on ties).
pub fn nearest_neighbor_best(instance: &Instance) -> Result<Tour> {
    let mut best: Option<Tour> = None;
    for s in 0..instance.len() {
        let t = nearest_neighbor(instance, s)?;
        if best.as_ref().is_none_or(|b| t.length() < b.length()) {
            best = Some(t);
        }
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwoOptConfig {
    pub max_passes: usize,
    pub first_improvement: bool,
}

impl Default for TwoOptConfig {
    fn default() -> Self {
        TwoOptConfig {
            max_passes: 100_000,
            first_improvement: false,
        }
    }
}

const IMPROVEMENT_EPS: f64 = 1e-12;

/// 2-opt local search. A pass scans every segment reversal; best-improvement
/// applies the single best move per pass, first-improvement applies moves as found.
pub fn two_opt(instance: &Instance, tour: &Tour, config: TwoOptConfig) -> Result<Tour> {
    if config.max_passes < 1 {
        return Err(Error::param("max_passes must be at least 1"));
    }
    let n = tour.order().len();
    let mut order = tour.order().to_vec();
    if n < 4 {
        return Tour::new(instance, order);
    }
    let c = |a: usize, b: usize| instance.cost(a, b);
    for _ in 0..config.max_passes {
        let mut best = (0.0, 0, 0);
        let mut improved = false;
        for i in 0..n - 2 {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (order[i], order[i + 1]);
                let (cc, d) = (order[j], order[(j + 1) % n]);
                let delta = c(a, cc) + c(b, d) - c(a, b) - c(cc, d);
                if delta < -IMPROVEMENT_EPS {
                    if config.first_improvement {
                        order[i + 1..=j].reverse();
                        improved = true;
                    } else if delta < best.0 {
                        best = (delta, i, j);
                    }
                }
            }
        }
        if !config.first_improvement && best.0 < -IMPROVEMENT_EPS {
            order[best.1 + 1..=best.2].reverse();
            improved = true;
        }
        if !improved {
            break;
        }
    }
    debug_assert!(closed_length(instance, &order) <= tour.length() + 1e-9);
    Tour::new(instance, order)
}

/// Best 2-opt local optimum reached from every nearest-neighbor start.
pub fn nn_two_opt_best(instance: &Instance, config: TwoOptConfig) -> Result<Tour> {
    let mut best: Option<Tour> = None;
    for s in 0..instance.len() {
        let t = two_opt(instance, &nearest_neighbor(instance, s)?, config)?;
        if best.as_ref().is_none_or(|b| t.length() < b.length()) {
            best = Some(t);
        }
    }
    Ok(best.unwrap())
}
