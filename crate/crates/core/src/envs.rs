//! Seeded generators: expert-advice streams and random finite MDPs with
//! epsilon-greedy Q-learning rollouts.
//!
//! Every generator owns one `ChaCha8Rng` seeded from its `seed` argument, so
//! the output is a pure function of the inputs. Batches derive per-instance
//! seeds with [`instance_seed`].

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reference::{q_learning_step, QTable, Transition};

/// Seed of instance `index` in a batch seeded with `base`.
pub fn instance_seed(base: u64, index: u64) -> u64 {
    base ^ index
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every accuracy from `U[0.3, 0.9]`.
    Uniform,
    Stratified,
    Flat,
    AntiSignal,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Uniform, Regime::Stratified, Regime::Flat, Regime::AntiSignal];

    /// Sampling interval for each expert before the identity shuffle.
    pub fn intervals(&self, n: usize) -> Result<Vec<(f64, f64)>> {
        let fixed = |v: Vec<(f64, f64)>| {
            if n == v.len() {
                Ok(v)
            } else {
                Err(Error::Argument(format!("{self:?} regime is defined for {} experts, got {n}", v.len())))
            }
        };
        match self {
            Regime::Uniform => Ok(vec![(0.3, 0.9); n]),
            Regime::Stratified => fixed(vec![(0.9, 1.0), (0.65, 0.8), (0.55, 0.7), (0.45, 0.6)]),
            Regime::Flat => fixed(vec![(0.6, 0.7), (0.4, 0.6), (0.4, 0.6), (0.4, 0.6)]),
            Regime::AntiSignal => fixed(vec![(0.6, 0.7), (0.0, 0.1), (0.4, 0.6), (0.4, 0.6)]),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::Uniform => "uniform",
            Regime::Stratified => "stratified",
            Regime::Flat => "flat",
            Regime::AntiSignal => "anti_signal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s || r.name().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStream {
    pub regime: Regime,
    pub seed: u64,
    pub n: usize,
    /// Accuracy of each expert, in final (shuffled) order.
    pub qualities: Vec<f64>,
    /// `permutation[i]` is the sampling slot that became expert `i`.
    pub permutation: Vec<usize>,
    pub labels: Vec<u8>,
    /// `advice[t][i]`.
    pub advice: Vec<Vec<u8>>,
}

impl ExpertStream {
    pub fn horizon(&self) -> usize {
        self.labels.len()
    }

    /// Per-expert mistake counts over the whole stream.
    pub fn mistakes(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| self.advice.iter().zip(&self.labels).filter(|(a, &y)| a[i] != y).count())
            .collect()
    }

    /// Experts whose empirical accuracy is more than four binomial standard
    /// deviations from their quality.
    pub fn accuracy_outliers(&self) -> Vec<usize> {
        let t = self.horizon() as f64;
        self.mistakes()
            .iter()
            .enumerate()
            .filter(|(i, &m)| {
                let p = self.qualities[*i];
                let sd = (p * (1.0 - p) / t).sqrt();
                let acc = 1.0 - m as f64 / t;
                (acc - p).abs() > 4.0 * sd.max(1.0 / t)
            })
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn sample_expert_stream(regime: Regime, n: usize, horizon: usize, seed: u64) -> Result<ExpertStream> {
    let intervals = regime.intervals(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn: Vec<f64> = intervals.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(&mut rng);
    let qualities: Vec<f64> = permutation.iter().map(|&k| drawn[k]).collect();
    let mut labels = Vec::with_capacity(horizon);
    let mut advice = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let y = u8::from(rng.random_bool(0.5));
        let row = qualities.iter().map(|&p| if rng.random_bool(p) { y } else { 1 - y }).collect();
        labels.push(y);
        advice.push(row);
    }
    Ok(ExpertStream { regime, seed, n, qualities, permutation, labels, advice })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFamily {
    Peaked,
    Bimodal,
    Uniform,
    Sparse,
    Dense,
    Bernoulli,
}

impl RewardFamily {
    pub const ALL: [RewardFamily; 6] = [
        RewardFamily::Peaked,
        RewardFamily::Bimodal,
        RewardFamily::Uniform,
        RewardFamily::Sparse,
        RewardFamily::Dense,
        RewardFamily::Bernoulli,
    ];

    /// Beta shape parameters; `None` for the Bernoulli family.
    pub fn beta_params(&self) -> Option<(f64, f64)> {
        match self {
            RewardFamily::Peaked => Some((2.0, 2.0)),
            RewardFamily::Bimodal => Some((0.5, 0.5)),
            RewardFamily::Uniform => Some((1.0, 1.0)),
            RewardFamily::Sparse => Some((0.1, 2.0)),
            RewardFamily::Dense => Some((2.0, 0.1)),
            RewardFamily::Bernoulli => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RewardFamily::Peaked => "peaked",
            RewardFamily::Bimodal => "bimodal",
            RewardFamily::Uniform => "uniform",
            RewardFamily::Sparse => "sparse",
            RewardFamily::Dense => "dense",
            RewardFamily::Bernoulli => "bernoulli",
        }
    }
}

pub const KAPPAS: [f64; 3] = [0.1, 1.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub family: RewardFamily,
    pub kappa: f64,
}

/// The 6 x 3 grid of (reward family, concentration) cells.
pub fn cell_grid() -> Vec<Cell> {
    RewardFamily::ALL
        .iter()
        .flat_map(|&family| KAPPAS.iter().map(move |&kappa| Cell { family, kappa }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BernoulliDraw {
    /// A fresh 0/1 reward on every visit to `(s, a)`.
    PerVisit,
    /// One 0/1 draw per `(s, a)` at construction, fixed thereafter.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRanges {
    pub states: (usize, usize),
    pub actions: (usize, usize),
    pub horizon: (usize, usize),
}

impl Default for SizeRanges {
    fn default() -> Self {
        Self { states: (2, 8), actions: (2, 4), horizon: (10, 50) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub cell: Cell,
    pub seed: u64,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Reward for continuous families; success probability for Bernoulli.
    pub rewards: Vec<Vec<f64>>,
    /// Realized 0/1 rewards when `bernoulli` is `Fixed`.
    pub fixed_outcomes: Option<Vec<Vec<f64>>>,
    pub bernoulli: BernoulliDraw,
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma_disc: f64,
    pub state_perm: Vec<usize>,
    pub action_perm: Vec<usize>,
}

macro_rules! dirichlet_dispatch {
    ($n:expr, $kappa:expr, $rng:expr, $($k:literal)*) => {
        match $n {
            $($k => Dirichlet::new([$kappa; $k])
                .map_err(|e| Error::Argument(format!("dirichlet: {e}")))?
                .sample($rng)
                .to_vec(),)*
            other => return Err(Error::Argument(format!("{other} states is outside 1..=8"))),
        }
    };
}

fn dirichlet_row<R: Rng + ?Sized>(n: usize, kappa: f64, rng: &mut R) -> Result<Vec<f64>> {
    if n == 1 {
        return Ok(vec![1.0]);
    }
    Ok(dirichlet_dispatch!(n, kappa, rng, 2 3 4 5 6 7 8))
}

pub fn sample_mdp(cell: Cell, seed: u64) -> Result<MdpSpec> {
    sample_mdp_with(cell, SizeRanges::default(), BernoulliDraw::PerVisit, seed)
}

pub fn sample_mdp_with(cell: Cell, sizes: SizeRanges, bernoulli: BernoulliDraw, seed: u64) -> Result<MdpSpec> {
    if !(cell.kappa > 0.0) {
        return Err(Error::Argument("kappa must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = rng.random_range(sizes.states.0..=sizes.states.1);
    let actions = rng.random_range(sizes.actions.0..=sizes.actions.1);
    let horizon = rng.random_range(sizes.horizon.0..=sizes.horizon.1);
    let mut transitions = Vec::with_capacity(states);
    for _ in 0..states {
        let row = (0..actions).map(|_| dirichlet_row(states, cell.kappa, &mut rng)).collect::<Result<_>>()?;
        transitions.push(row);
    }
    let rewards: Vec<Vec<f64>> = match cell.family.beta_params() {
        Some((a, b)) => {
            let beta = Beta::new(a, b).map_err(|e| Error::Argument(format!("beta: {e}")))?;
            (0..states).map(|_| (0..actions).map(|_| beta.sample(&mut rng)).collect()).collect()
        }
        None => (0..states).map(|_| (0..actions).map(|_| rng.random_range(0.1..=0.9)).collect()).collect(),
    };
    let fixed_outcomes = (cell.family == RewardFamily::Bernoulli && bernoulli == BernoulliDraw::Fixed).then(|| {
        rewards.iter().map(|row| row.iter().map(|&p| f64::from(u8::from(rng.random_bool(p)))).collect()).collect()
    });
    let epsilon = rng.random_range(0.0..=1.0);
    let mut state_perm: Vec<usize> = (0..states).collect();
    let mut action_perm: Vec<usize> = (0..actions).collect();
    state_perm.shuffle(&mut rng);
    action_perm.shuffle(&mut rng);
    Ok(MdpSpec {
        cell,
        seed,
        states,
        actions,
        horizon,
        transitions,
        rewards,
        fixed_outcomes,
        bernoulli,
        epsilon,
        alpha: 0.1,
        gamma_disc: 0.9,
        state_perm,
        action_perm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    /// `argmax_a Q_{t+1}(s_{t+1}, a)`, the label definition of the data set.
    pub a_star: usize,
    /// `argmax_a Q_t(s_{t+1}, a)`, the action the Bellman target maximizes over.
    pub a_star_pre: usize,
    /// `Q_{t+1}` after this step.
    pub q_after: QTable,
}

impl Step {
    pub fn transition(&self) -> Transition {
        Transition { s: self.s, a: self.a, r: self.r, s_next: self.s_next }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub steps: Vec<Step>,
    /// True once state and action labels have been permuted.
    pub permuted: bool,
}

impl Trajectory {
    /// Relabel states and actions with the MDP's permutations.
    pub fn permuted(&self, mdp: &MdpSpec) -> Trajectory {
        let ps = &mdp.state_perm;
        let pa = &mdp.action_perm;
        let steps = self
            .steps
            .iter()
            .map(|st| {
                let mut q = QTable::zeros(mdp.states, mdp.actions);
                for s in 0..mdp.states {
                    for a in 0..mdp.actions {
                        q.set(ps[s], pa[a], st.q_after.get(s, a));
                    }
                }
                Step {
                    s: ps[st.s],
                    a: pa[st.a],
                    r: st.r,
                    s_next: ps[st.s_next],
                    a_star: pa[st.a_star],
                    a_star_pre: pa[st.a_star_pre],
                    q_after: q,
                }
            })
            .collect();
        Trajectory { seed: self.seed, steps, permuted: true }
    }
}

/// Epsilon-greedy tabular Q-learning from `Q_0 = 0`, labels unpermuted.
pub fn rollout_qlearning(mdp: &MdpSpec, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = QTable::zeros(mdp.states, mdp.actions);
    let mut s = rng.random_range(0..mdp.states);
    let mut steps = Vec::with_capacity(mdp.horizon);
    for _ in 0..mdp.horizon {
        let a = if rng.random_bool(mdp.epsilon) { rng.random_range(0..mdp.actions) } else { q.greedy(s) };
        let r = match (&mdp.fixed_outcomes, mdp.cell.family) {
            (Some(fixed), _) => fixed[s][a],
            (None, RewardFamily::Bernoulli) => f64::from(u8::from(rng.random_bool(mdp.rewards[s][a]))),
            (None, _) => mdp.rewards[s][a],
        };
        let next = WeightedIndex::new(&mdp.transitions[s][a])
            .map_err(|e| Error::State(format!("transition row ({s}, {a}): {e}")))?
            .sample(&mut rng);
        let a_star_pre = q.greedy(next);
        q = q_learning_step(&q, Transition { s, a, r, s_next: next }, mdp.alpha, mdp.gamma_disc)?;
        steps.push(Step { s, a, r, s_next: next, a_star: q.greedy(next), a_star_pre, q_after: q.clone() });
        s = next;
    }
    Ok(Trajectory { seed, steps, permuted: false })
}
