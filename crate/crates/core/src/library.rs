//! Small MDPs used by examples, tests and the command line tool.

use rand::Rng;

use crate::mdp::{Initial, Mdp, MdpBuilder, PolicyTable, StateId};

/// Horizon of [`chain5`].
pub const CHAIN_HORIZON: usize = 4;

/// Delayed-reward chain over positions `0..=4`. Action 0 moves left (floored
/// at 0), action 1 moves right. The only reward is paid on the last step and
/// equals the final position, so the optimal policy moves right everywhere.
///
/// States are time-aware: layer `t` holds positions `0..=t`.
pub fn chain5() -> Mdp {
    let horizon = CHAIN_HORIZON;
    let mut b = MdpBuilder::new(2, horizon);
    b.name("chain5");
    let mut ids: Vec<Vec<StateId>> = Vec::new();
    for t in 0..=horizon {
        ids.push((0..=t).map(|_| b.add_state(t)).collect());
    }
    for t in 0..=horizon {
        for p in 0..=t {
            let s = ids[t][p];
            for (a, target) in [(0, p.saturating_sub(1)), (1, p + 1)] {
                if t == horizon {
                    b.add_edge(s, a, None, target as f64, 1.0).unwrap();
                } else {
                    b.add_edge(s, a, Some(ids[t + 1][target]), 0.0, 1.0).unwrap();
                }
            }
        }
    }
    b.initial(Initial::Distribution(vec![(ids[0][0], 1.0)]))
        .reward_bound((horizon + 1) as f64);
    b.build().expect("chain is well formed")
}

/// `(t, position)` of every state of [`chain5`], indexed by state id.
pub fn chain5_labels() -> Vec<(usize, usize)> {
    (0..=CHAIN_HORIZON)
        .flat_map(|t| (0..=t).map(move |p| (t, p)))
        .collect()
}

/// Single-step two-armed bandit paying 1 for arm 0 and 0 for arm 1.
pub fn bandit() -> Mdp {
    let mut b = MdpBuilder::new(2, 0);
    b.name("bandit");
    let s = b.add_state(0);
    b.add_edge(s, 0, None, 1.0, 1.0).unwrap();
    b.add_edge(s, 1, None, 0.0, 1.0).unwrap();
    b.initial(Initial::Distribution(vec![(s, 1.0)]))
        .reward_bound(1.0);
    b.build().expect("bandit is well formed")
}

/// 2x2 grid with cells `0 1 / 2 3`, goal in cell 3, horizon 3. Actions are
/// up, down, left, right; a move succeeds with probability 0.8 and otherwise
/// leaves the agent in place. Entering or staying in the goal pays 1.
pub fn gridworld2x2() -> Mdp {
    const SUCCESS: f64 = 0.8;
    let horizon = 3;
    let mut b = MdpBuilder::new(4, horizon);
    b.name("gridworld2x2");
    let ids: Vec<Vec<StateId>> = (0..=horizon)
        .map(|t| (0..4).map(|_| b.add_state(t)).collect())
        .collect();
    let step = |cell: usize, a: usize| -> usize {
        let (r, c) = (cell / 2, cell % 2);
        let (r, c) = match a {
            0 => (r.saturating_sub(1), c),
            1 => ((r + 1).min(1), c),
            2 => (r, c.saturating_sub(1)),
            _ => (r, (c + 1).min(1)),
        };
        r * 2 + c
    };
    let reward = |cell: usize| if cell == 3 { 1.0 } else { 0.0 };
    for t in 0..=horizon {
        for cell in 0..4 {
            let s = ids[t][cell];
            for a in 0..4 {
                let moved = step(cell, a);
                let outcomes = if moved == cell {
                    vec![(cell, 1.0)]
                } else {
                    vec![(moved, SUCCESS), (cell, 1.0 - SUCCESS)]
                };
                for (target, p) in outcomes {
                    let next = (t < horizon).then(|| ids[t + 1][target]);
                    b.add_edge(s, a, next, reward(target), p).unwrap();
                }
            }
        }
    }
    b.initial(Initial::Distribution(vec![(ids[0][0], 1.0)]))
        .reward_bound(1.0);
    b.build().expect("gridworld is well formed")
}

/// Limits for [`random_layered`].
#[derive(Clone, Copy, Debug)]
pub struct RandomMdpSpec {
    pub max_states_per_layer: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
    pub max_branching: usize,
}

impl Default for RandomMdpSpec {
    fn default() -> Self {
        RandomMdpSpec {
            max_states_per_layer: 4,
            max_actions: 3,
            max_horizon: 4,
            max_branching: 2,
        }
    }
}

/// Random layered MDP with stochastic transitions and rewards in `[-1, 1]`.
/// Half of the instances start from a fixed state-action pair.
pub fn random_layered<R: Rng + ?Sized>(rng: &mut R, spec: RandomMdpSpec) -> Mdp {
    let num_actions = rng.random_range(1..=spec.max_actions);
    let horizon = rng.random_range(0..=spec.max_horizon);
    let mut b = MdpBuilder::new(num_actions, horizon);
    b.name("random");
    let layers: Vec<Vec<StateId>> = (0..=horizon)
        .map(|t| {
            let n = rng.random_range(1..=spec.max_states_per_layer);
            (0..n).map(|_| b.add_state(t)).collect()
        })
        .collect();
    for t in 0..=horizon {
        for &s in &layers[t] {
            for a in 0..num_actions {
                let k = rng.random_range(1..=spec.max_branching);
                let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
                let total: f64 = weights.iter().sum();
                for w in weights {
                    let next = (t < horizon)
                        .then(|| layers[t + 1][rng.random_range(0..layers[t + 1].len())]);
                    let r = (rng.random_range(-1.0..=1.0f64) * 8.0).round() / 8.0;
                    b.add_edge(s, a, next, r, w / total).unwrap();
                }
            }
        }
    }
    let initial = if rng.random_bool(0.5) {
        Initial::Fixed {
            state: layers[0][rng.random_range(0..layers[0].len())],
            action: rng.random_range(0..num_actions),
        }
    } else {
        let weights: Vec<f64> = layers[0].iter().map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        Initial::Distribution(
            layers[0]
                .iter()
                .zip(weights)
                .map(|(&s, w)| (s, w / total))
                .collect(),
        )
    };
    b.initial(initial).reward_bound(1.0);
    b.build().expect("generated MDP is well formed")
}

/// Policy with independent random rows bounded away from zero.
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize) -> PolicyTable {
    let rows = (0..num_states)
        .map(|_| {
            let w: Vec<f64> = (0..num_actions).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|x| x / total).collect()
        })
        .collect();
    PolicyTable::new(rows).expect("rows are normalized")
}
