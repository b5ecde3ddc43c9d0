//! Ground-truth algorithms the circuits are checked against: multiplicative
//! weights, tabular Q-learning, the prediction baselines, and the Bayesian
//! mixture identities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::argmax;

/// Smallest likelihood `mixture_logloss` accepts before clamping.
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;

/// Weighted-majority probability of outcome 1: mass of experts predicting 1
/// over total mass.
pub fn weighted_vote(w: &[f64], preds: &[u8]) -> f64 {
    let total: f64 = w.iter().sum();
    let ones: f64 = w.iter().zip(preds).filter(|(_, &p)| p == 1).map(|(x, _)| x).sum();
    ones / total
}

/// One round of the weighted majority algorithm with multiplier `gamma`.
pub fn mwu_step(w: &[f64], preds: &[u8], y: u8, gamma: f64) -> Result<(f64, Vec<f64>)> {
    if w.len() != preds.len() || w.is_empty() {
        return Err(Error::Shape(format!("{} weights, {} predictions", w.len(), preds.len())));
    }
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(Error::Argument(format!("gamma must exceed 1, got {gamma}")));
    }
    if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::State("weights must be positive and finite".into()));
    }
    let p_hat = weighted_vote(w, preds);
    let next = w.iter().zip(preds).map(|(&x, &p)| if p == y { x * gamma } else { x }).collect();
    Ok((p_hat, next))
}

/// The same round in log space: `lambda_i += 1{p_i = y} log gamma`.
pub fn mwu_step_log(lambda: &[f64], preds: &[u8], y: u8, gamma: f64) -> Result<(f64, Vec<f64>)> {
    if lambda.len() != preds.len() || lambda.is_empty() {
        return Err(Error::Shape(format!("{} weights, {} predictions", lambda.len(), preds.len())));
    }
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(Error::Argument(format!("gamma must exceed 1, got {gamma}")));
    }
    if lambda.iter().any(|x| !x.is_finite()) {
        return Err(Error::State("log-weights must be finite".into()));
    }
    let m = lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lambda.iter().map(|l| (l - m).exp()).collect();
    let p_hat = weighted_vote(&w, preds);
    let lg = gamma.ln();
    let next = lambda.iter().zip(preds).map(|(&l, &p)| if p == y { l + lg } else { l }).collect();
    Ok((p_hat, next))
}

/// Normalized exponential weights: `w'_i ∝ w_i exp(-eta l_i)`.
pub fn exp_weights_mw(w: &[f64], losses: &[f64], eta: f64) -> Result<Vec<f64>> {
    if w.len() != losses.len() {
        return Err(Error::Shape(format!("{} weights, {} losses", w.len(), losses.len())));
    }
    if !(eta > 0.0) {
        return Err(Error::Argument(format!("eta must be positive, got {eta}")));
    }
    let raw: Vec<f64> = w.iter().zip(losses).map(|(x, l)| x * (-eta * l).exp()).collect();
    let z: f64 = raw.iter().sum();
    if !(z > 0.0) {
        return Err(Error::State("all weight mass vanished".into()));
    }
    Ok(raw.into_iter().map(|x| x / z).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub states: usize,
    pub actions: usize,
    /// Row-major `states x actions`.
    pub q: Vec<f64>,
}

impl QTable {
    pub fn zeros(states: usize, actions: usize) -> Self {
        Self { states, actions, q: vec![0.0; states * actions] }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.q[s * self.actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.actions..(s + 1) * self.actions]
    }

    /// Greedy action; the lowest index wins ties.
    pub fn greedy(&self, s: usize) -> usize {
        argmax(self.row(s))
    }

    pub fn max(&self, s: usize) -> f64 {
        self.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    fn check(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.states || a >= self.actions {
            return Err(Error::Range(format!(
                "(s={s}, a={a}) outside {}x{} table",
                self.states, self.actions
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

/// `Q(s,a) <- Q(s,a) + alpha (r + gamma_disc max_a' Q(s',a') - Q(s,a))`.
pub fn q_learning_step(q: &QTable, t: Transition, alpha: f64, gamma_disc: f64) -> Result<QTable> {
    q.check(t.s, t.a)?;
    q.check(t.s_next, 0)?;
    if !(alpha > 0.0 && alpha <= 1.0) || !(0.0..1.0).contains(&gamma_disc) {
        return Err(Error::Argument(format!("alpha={alpha}, gamma_disc={gamma_disc}")));
    }
    let mut out = q.clone();
    let old = q.get(t.s, t.a);
    out.set(t.s, t.a, old + alpha * (t.r + gamma_disc * q.max(t.s_next) - old));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Baseline {
    FollowTheLeader,
    FollowPreviousWinners,
    Majority,
    Random,
    MultiplicativeWeights { eta: f64 },
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::FollowTheLeader => "ftl",
            Baseline::FollowPreviousWinners => "fpw",
            Baseline::Majority => "majority",
            Baseline::Random => "random",
            Baseline::MultiplicativeWeights { .. } => "mw",
        }
    }
}

/// Past rounds of expert advice and outcomes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rounds: Vec<(Vec<u8>, u8)>,
}

impl History {
    pub fn push(&mut self, preds: Vec<u8>, y: u8) {
        self.rounds.push((preds, y));
    }

    pub fn cumulative_losses(&self, n: usize) -> Vec<u32> {
        let mut loss = vec![0; n];
        for (preds, y) in &self.rounds {
            for (l, p) in loss.iter_mut().zip(preds) {
                *l += u32::from(p != y);
            }
        }
        loss
    }
}

fn coin<R: Rng + ?Sized>(rng: &mut R) -> u8 {
    u8::from(rng.random_bool(0.5))
}

/// Unweighted vote over `preds`; a split vote is a fair coin.
fn majority<R: Rng + ?Sized>(preds: &[u8], rng: &mut R) -> u8 {
    let ones = preds.iter().filter(|&&p| p == 1).count();
    let zeros = preds.len() - ones;
    match ones.cmp(&zeros) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => coin(rng),
    }
}

/// Prediction of a baseline strategy for the current round.
pub fn baseline_predict<R: Rng + ?Sized>(
    strategy: Baseline,
    history: &History,
    preds: &[u8],
    rng: &mut R,
) -> u8 {
    let n = preds.len();
    match strategy {
        Baseline::Random => coin(rng),
        Baseline::Majority => majority(preds, rng),
        Baseline::FollowTheLeader => {
            let loss = history.cumulative_losses(n);
            let best = *loss.iter().min().expect("at least one expert");
            let leaders: Vec<usize> = (0..n).filter(|&i| loss[i] == best).collect();
            preds[leaders[rng.random_range(0..leaders.len())]]
        }
        Baseline::FollowPreviousWinners => {
            let Some((prev, y)) = history.rounds.last() else {
                return majority(preds, rng);
            };
            let winners: Vec<u8> = (0..n).filter(|&i| prev[i] == *y).map(|i| preds[i]).collect();
            let ones = winners.iter().filter(|&&p| p == 1).count();
            if winners.is_empty() || 2 * ones == winners.len() {
                majority(preds, rng)
            } else {
                u8::from(2 * ones > winners.len())
            }
        }
        Baseline::MultiplicativeWeights { eta } => {
            let mut w = vec![1.0 / n as f64; n];
            for (p, y) in &history.rounds {
                let losses: Vec<f64> = p.iter().map(|&x| f64::from(u8::from(x != *y))).collect();
                w = exp_weights_mw(&w, &losses, eta).expect("eta validated by caller");
            }
            weighted_majority(&w, preds, rng)
        }
    }
}

/// Weighted vote rounded to a label; an exact split is a fair coin.
pub fn weighted_majority<R: Rng + ?Sized>(w: &[f64], preds: &[u8], rng: &mut R) -> u8 {
    let mass = weighted_vote(w, preds);
    if mass > 0.5 {
        1
    } else if mass < 0.5 {
        0
    } else {
        coin(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Set when some likelihood fell below [`LIKELIHOOD_FLOOR`] and was raised to it.
    pub clamped: bool,
}

fn softmax_weights(lambda: &[f64]) -> Vec<f64> {
    crate::linalg::softmax(lambda, 1.0)
}

fn check_likelihoods(r: &[f64]) -> Result<()> {
    if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Argument("likelihoods must lie in [0, 1]".into()));
    }
    Ok(())
}

/// `L(lambda) = -log sum_i softmax(lambda)_i r_i` and its gradient `w - w+`.
pub fn mixture_logloss(lambda: &[f64], r: &[f64]) -> Result<MixtureLoss> {
    if lambda.len() != r.len() || lambda.is_empty() {
        return Err(Error::Shape(format!("{} log-weights, {} likelihoods", lambda.len(), r.len())));
    }
    check_likelihoods(r)?;
    let clamped = r.iter().any(|&x| x < LIKELIHOOD_FLOOR);
    let r: Vec<f64> = r.iter().map(|&x| x.max(LIKELIHOOD_FLOOR)).collect();
    let w = softmax_weights(lambda);
    let mix: f64 = w.iter().zip(&r).map(|(a, b)| a * b).sum();
    let grad = w.iter().zip(&r).map(|(wi, ri)| wi - wi * ri / mix).collect();
    Ok(MixtureLoss { loss: -mix.ln(), grad, clamped })
}

/// Posterior over experts after observing per-expert likelihoods `r`.
pub fn bayes_posterior_update(w: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    if w.len() != r.len() {
        return Err(Error::Shape(format!("{} weights, {} likelihoods", w.len(), r.len())));
    }
    check_likelihoods(r)?;
    let un: Vec<f64> = w.iter().zip(r).map(|(a, b)| a * b).collect();
    let z: f64 = un.iter().sum();
    if !(z > 0.0) {
        return Err(Error::State("posterior has zero total mass".into()));
    }
    Ok(un.into_iter().map(|x| x / z).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLossParts {
    pub entropy: f64,
    pub kl: f64,
    pub expected_logloss: f64,
}

/// `E_{Y~P}[-log Q(Y)] = H(P) + KL(P||Q)`, each term summed directly.
pub fn logloss_decomposition(p: &[f64], q: &[f64]) -> Result<LogLossParts> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("|P|={}, |Q|={}", p.len(), q.len())));
    }
    let mut entropy = 0.0;
    let mut kl = 0.0;
    let mut expected = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::Argument("Q vanishes on the support of P".into()));
        }
        entropy -= pi * pi.ln();
        kl += pi * (pi / qi).ln();
        expected -= pi * qi.ln();
    }
    let gap = (expected - entropy - kl).abs();
    if gap > 1e-12 {
        return Err(Error::State(format!("decomposition off by {gap:e}")));
    }
    Ok(LogLossParts { entropy, kl, expected_logloss: expected })
}
