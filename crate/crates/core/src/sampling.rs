//! Trajectory sampling by inverse transform over the ordered trajectory space,
//! sequential simulation, and martingale-noise bookkeeping.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::ParamVector;
use crate::error::{Error, Result};
use crate::mdp::{enumerate_trajectories, ActionProbabilities, Initial, Mdp, Step, Trajectory};

/// Substream used for parameter initialization.
pub const STREAM_INIT: u64 = 0;
/// Substream for trajectories drawn from the learned policy.
pub const STREAM_ON_POLICY: u64 = 1;
/// Substream for trajectories drawn from a behavioral policy.
pub const STREAM_BEHAVIORAL: u64 = 2;
/// Substream for diagnostics that draw their own samples.
pub const STREAM_DIAGNOSTIC: u64 = 3;

/// Independent generator for one component of a run.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trajectories sorted by probability (largest first, ties in lexicographic
/// order) with their cumulative distribution.
#[derive(Clone, Debug)]
pub struct OrderedTrajectoryDistribution {
    entries: Vec<(Trajectory, f64)>,
    cumulative: Vec<f64>,
}

impl OrderedTrajectoryDistribution {
    pub fn from_entries(mut entries: Vec<(Trajectory, f64)>) -> Self {
        entries.sort_by(|(ta, pa), (tb, pb)| match pb.total_cmp(pa) {
            Ordering::Equal => ta.cmp(tb),
            ord => ord,
        });
        let mut acc = 0.0;
        let cumulative = entries
            .iter()
            .map(|(_, p)| {
                acc += p;
                acc
            })
            .collect();
        OrderedTrajectoryDistribution {
            entries,
            cumulative,
        }
    }

    pub fn entries(&self) -> &[(Trajectory, f64)] {
        &self.entries
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index `i` with `cumulative[i-1] <= u < cumulative[i]`. Values at or past
    /// the final cumulative mass map to the last entry.
    pub fn index_of(&self, u: f64) -> usize {
        let i = self.cumulative.partition_point(|&c| c <= u);
        i.min(self.entries.len().saturating_sub(1))
    }

    pub fn sample(&self, u: f64) -> &Trajectory {
        &self.entries[self.index_of(u)].0
    }
}

pub fn build_ordered_distribution<P>(mdp: &Mdp, policy: &P) -> Result<OrderedTrajectoryDistribution>
where
    P: ActionProbabilities + ?Sized,
{
    Ok(OrderedTrajectoryDistribution::from_entries(
        enumerate_trajectories(mdp, policy)?,
    ))
}

pub fn inverse_transform_sample(dist: &OrderedTrajectoryDistribution, u: f64) -> &Trajectory {
    dist.sample(u)
}

/// Draws an index from a discrete distribution with the right-open CDF convention.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u past the total mass: fall back to the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Rolls out one episode step by step.
pub fn simulate_trajectory<P, R>(mdp: &Mdp, policy: &P, rng: &mut R) -> Trajectory
where
    P: ActionProbabilities + ?Sized,
    R: Rng + ?Sized,
{
    let mut steps = Vec::with_capacity(mdp.horizon() + 1);
    let (mut s, mut a) = match mdp.initial() {
        Initial::Fixed { state, action } => (*state, *action),
        Initial::Distribution(dist) => {
            let probs: Vec<f64> = dist.iter().map(|&(_, p)| p).collect();
            let s = dist[sample_index(&probs, rng.random::<f64>())].0;
            let a = sample_index(&policy.action_probs(s), rng.random::<f64>());
            (s, a)
        }
    };
    loop {
        let edges = mdp.edges(s, a);
        let probs: Vec<f64> = edges.iter().map(|e| e.prob).collect();
        let edge = &edges[sample_index(&probs, rng.random::<f64>())];
        steps.push(Step {
            state: s,
            action: a,
            reward: edge.reward,
        });
        match edge.next {
            None => break,
            Some(n) => {
                s = n;
                a = sample_index(&policy.action_probs(n), rng.random::<f64>());
            }
        }
    }
    Trajectory { steps }
}

/// Sampled-minus-exact gradient residuals of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub iteration: u64,
    pub m1: ParamVector,
    pub m2: ParamVector,
    pub m1_sq: f64,
    pub m2_sq: f64,
}

/// `sampled − exact` for one gradient.
pub fn residual(exact: &ParamVector, sampled: &ParamVector) -> Result<ParamVector> {
    if exact.len() != sampled.len() {
        return Err(Error::ShapeMismatch {
            expected: exact.len(),
            got: sampled.len(),
        });
    }
    Ok(sampled.sub(exact))
}

/// Residuals of the actor (`h`) and critic (`f`) gradients at iteration `n`.
pub fn noise_residual(
    exact_h: &ParamVector,
    sampled_h: &ParamVector,
    exact_f: &ParamVector,
    sampled_f: &ParamVector,
    n: u64,
) -> Result<NoiseRecord> {
    let m1 = residual(exact_h, sampled_h)?;
    let m2 = residual(exact_f, sampled_f)?;
    Ok(NoiseRecord {
        iteration: n,
        m1_sq: m1.norm_sq(),
        m2_sq: m2.norm_sq(),
        m1,
        m2,
    })
}
