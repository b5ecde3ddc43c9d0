//! Handwired weighted-majority circuit.
//!
//! One round is the token stream
//! `<w> <z> <e_1> <p_1> ... <e_n> <p_n> <p?> <y> <w?>` at positions
//! `1..=2n+5`, where `<z>` carries the log-weights as a superposition
//! `sum_i lambda_i u_{e_i}` and each `<p_i>` and `<y>` is `<q0>` or `<q1>`.
//!
//! Blocks: id | buf1 | buf2 | buf3 | pos.
//!
//! - L1H1 (hard fixed-offset, offset 1, routed set {q0, q1}): each `<p_i>`
//!   copies `u_{e_i}` into buf1, `<y>` copies `u_{p?}`; everything else sinks
//!   to `<w>`.
//! - L2H1 (hard): `<p?>` and `<w?>` fetch `Pi_E id(<z>) = lambda` into buf2.
//! - L2H2 (hard): `<w?>` finds the one position whose buf1 holds `u_{p?}`
//!   (that is `<y>`) and copies its q-token into buf3.
//! - L3H1 (softmax): `<p?>` attends to the prediction tokens with logit
//!   `lambda_i + M` and averages their q-tokens into id, so the `q1`
//!   coordinate is the weighted vote.
//! - L3H2 (linear): `<w?>` scores `log(gamma) <u_y, u_{p_j}>` against every
//!   q-token and adds `log(gamma) sum_{i: p_i = y} u_{e_i}` into buf2.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{build_fixed_offset_head, AttentionKind, ChooserParams, HeadSpec, WriteTarget};
use crate::circuit::{forward_all, CircuitSpec, DecodeMode, LayerSpec, ReadoutSpec};
use crate::embedding::{embed_id, embed_token, BlockLayout, EmbeddingTable, PositionalCodec, VocabSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const TOKEN_W: &str = "w";
pub const TOKEN_PRED: &str = "p?";
pub const TOKEN_UPDATE: &str = "w?";
pub const TOKEN_Q0: &str = "q0";
pub const TOKEN_Q1: &str = "q1";

const BUF1: usize = 1;
const BUF2: usize = 2;
const BUF3: usize = 3;

/// Default gate weight that keeps L3H1 off non-prediction positions.
pub const DEFAULT_GATE: f64 = 40.0;

/// Votes within this distance of the threshold count as ties and emit 1.
pub const TIE_TOLERANCE: f64 = 1e-9;

pub fn expert_token(i: usize) -> String {
    format!("e{}", i + 1)
}

/// `w, p?, w?, q0, q1, e1..en`.
pub fn wma_vocab(n: usize) -> Result<VocabSpec> {
    let mut tokens: Vec<String> = [TOKEN_W, TOKEN_PRED, TOKEN_UPDATE, TOKEN_Q0, TOKEN_Q1]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend((0..n).map(expert_token));
    VocabSpec::new(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decode", rename_all = "snake_case")]
pub enum WmaDecode {
    /// Emit 1 with probability equal to the weighted vote.
    Randomized,
    /// Emit 1 iff the vote is at least `theta`, up to [`TIE_TOLERANCE`].
    Threshold { theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmaConfig {
    pub n: usize,
    pub gamma: f64,
    pub horizon: usize,
    pub decode: WmaDecode,
    pub gate: f64,
}

impl WmaConfig {
    pub fn new(n: usize, gamma: f64, horizon: usize, decode: WmaDecode) -> Result<Self> {
        let cfg = Self { n, gamma, horizon, decode, gate: DEFAULT_GATE };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("need at least one expert".into()));
        }
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        if !(self.gate > 0.0) {
            return Err(Error::Config("gate weight must be positive".into()));
        }
        Ok(())
    }

    pub fn round_len(&self) -> usize {
        2 * self.n + 5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertLogWeights {
    pub lambda: Vec<f64>,
}

impl ExpertLogWeights {
    pub fn zeros(n: usize) -> Self {
        Self { lambda: vec![0.0; n] }
    }

    /// `sum_i lambda_i u_{e_i}` over the identity block.
    pub fn encode(&self, table: &EmbeddingTable) -> Result<Vec<f64>> {
        let mut v = vec![0.0; table.d_te()];
        for (i, &l) in self.lambda.iter().enumerate() {
            v[table.vocab.index(&expert_token(i))?] = l;
        }
        Ok(v)
    }

    pub fn decode(table: &EmbeddingTable, n: usize, id: &[f64]) -> Result<Self> {
        let lambda = (0..n)
            .map(|i| Ok(id[table.vocab.index(&expert_token(i))?]))
            .collect::<Result<_>>()?;
        Ok(Self { lambda })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| l.exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WmaRound {
    pub preds: Vec<u8>,
    pub y: u8,
}

impl WmaRound {
    fn validate(&self, n: usize) -> Result<()> {
        if self.preds.len() != n {
            return Err(Error::Shape(format!("{} predictions for {n} experts", self.preds.len())));
        }
        if self.y > 1 || self.preds.iter().any(|&p| p > 1) {
            return Err(Error::Argument("predictions and outcomes must be 0 or 1".into()));
        }
        Ok(())
    }
}

/// A built circuit together with the pieces needed to feed and read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmaCircuit {
    pub config: WmaConfig,
    pub table: EmbeddingTable,
    pub codec: PositionalCodec,
    pub spec: CircuitSpec,
}

fn col(layout: &BlockLayout, block: usize, token: usize) -> usize {
    layout.block_range(block).start + token
}

pub fn build_wma_circuit(cfg: WmaConfig, table: &EmbeddingTable, codec: &PositionalCodec) -> Result<WmaCircuit> {
    cfg.validate()?;
    let v = table.d_te();
    let idx = |t: &str| table.vocab.index(t);
    idx(TOKEN_W)?;
    let (tp, tu, q0, q1) = (idx(TOKEN_PRED)?, idx(TOKEN_UPDATE)?, idx(TOKEN_Q0)?, idx(TOKEN_Q1)?);
    let experts: Vec<usize> = (0..cfg.n).map(|i| idx(&expert_token(i))).collect::<Result<_>>()?;
    if cfg.round_len() > codec.t_max {
        return Err(Error::Config(format!(
            "round length {} exceeds T_max {}",
            cfg.round_len(),
            codec.t_max
        )));
    }
    let layout = BlockLayout::new(v, 3, codec.d_pe);
    let d = layout.d();
    let id = layout.id();
    let pos = layout.pos();

    // L1H1
    let params = ChooserParams::at_bounds([TOKEN_Q0, TOKEN_Q1], 1, 1e-6, codec)?;
    let mut l1h1 = build_fixed_offset_head(&params, codec, table, &layout)?
        .with_kind(AttentionKind::Hard)
        .with_value(
            {
                let mut w = Matrix::zeros(v, d);
                for t in 0..v {
                    w.set(t, id.start + t, 1.0);
                }
                w
            },
            Matrix::identity(v),
            WriteTarget::Block { block: BUF1 },
        )?
        .head;
    l1h1.name = "L1H1".into();

    // L2H1
    let p2 = codec.pos(2)?;
    let mut q = Matrix::zeros(codec.d_pe, d);
    let mut k = Matrix::zeros(codec.d_pe, d);
    for r in 0..codec.d_pe {
        q.set(r, id.start + tp, p2[r]);
        q.set(r, id.start + tu, p2[r]);
        k.set(r, pos.start + r, 1.0);
    }
    let mut val = Matrix::zeros(v, d);
    for &e in &experts {
        val.set(e, id.start + e, 1.0);
    }
    let l2h1 = HeadSpec::new("L2H1", q, k, val, Matrix::identity(v), AttentionKind::Hard, WriteTarget::Block { block: BUF2 })?;

    // L2H2
    let mut q = Matrix::zeros(1, d);
    let mut k = Matrix::zeros(1, d);
    q.set(0, id.start + tu, 1.0);
    k.set(0, col(&layout, BUF1, tp), 1.0);
    let mut val = Matrix::zeros(v, d);
    val.set(q0, id.start + q0, 1.0);
    val.set(q1, id.start + q1, 1.0);
    let q_proj = val.clone();
    let l2h2 = HeadSpec::new("L2H2", q, k, val, Matrix::identity(v), AttentionKind::Hard, WriteTarget::Block { block: BUF3 })?;

    // L3H1
    let n = cfg.n;
    let mut q = Matrix::zeros(n + 1, d);
    let mut k = Matrix::zeros(n + 1, d);
    for (i, &e) in experts.iter().enumerate() {
        q.set(i, col(&layout, BUF2, e), 1.0);
        k.set(i, col(&layout, BUF1, e), 1.0);
    }
    q.set(n, id.start + tp, cfg.gate);
    k.set(n, id.start + q0, 1.0);
    k.set(n, id.start + q1, 1.0);
    let l3h1 = HeadSpec::new(
        "L3H1",
        q,
        k,
        q_proj,
        Matrix::identity(v),
        AttentionKind::Softmax { beta: 1.0 },
        WriteTarget::Block { block: 0 },
    )?;

    // L3H2
    let lg = cfg.gamma.ln();
    let mut q = Matrix::zeros(2, d);
    let mut k = Matrix::zeros(2, d);
    for (r, &t) in [q0, q1].iter().enumerate() {
        q.set(r, col(&layout, BUF3, t), lg);
        k.set(r, id.start + t, 1.0);
    }
    let mut val = Matrix::zeros(v, d);
    for &e in &experts {
        val.set(e, col(&layout, BUF1, e), 1.0);
    }
    let l3h2 = HeadSpec::new("L3H2", q, k, val, Matrix::identity(v), AttentionKind::Linear, WriteTarget::Block { block: BUF2 })?;

    let mode = match cfg.decode {
        WmaDecode::Randomized => DecodeMode::Probabilities,
        WmaDecode::Threshold { theta } => DecodeMode::Threshold { theta, positive: q1, negative: q0 },
    };
    let spec = CircuitSpec::new(
        layout,
        vec![
            LayerSpec::new(vec![l1h1]),
            LayerSpec::new(vec![l2h1, l2h2]),
            LayerSpec::new(vec![l3h1, l3h2]),
        ],
        ReadoutSpec::identity_rows(&layout, mode),
    )?;
    Ok(WmaCircuit { config: cfg, table: table.clone(), codec: codec.clone(), spec })
}

/// Build with the default codec and vocabulary for `cfg.n` experts.
pub fn build_default(cfg: WmaConfig) -> Result<WmaCircuit> {
    let table = EmbeddingTable::new(wma_vocab(cfg.n)?);
    let codec = PositionalCodec::with_default_angles(16, 64)?;
    build_wma_circuit(cfg, &table, &codec)
}

/// The `2n+5` embeddings of one round.
pub fn encode_round(
    table: &EmbeddingTable,
    layout: &BlockLayout,
    codec: &PositionalCodec,
    lambda: &ExpertLogWeights,
    round: &WmaRound,
) -> Result<Vec<Vec<f64>>> {
    let n = lambda.lambda.len();
    round.validate(n)?;
    if lambda.lambda.iter().any(|l| !l.is_finite()) {
        return Err(Error::State("log-weights must be finite".into()));
    }
    if 2 * n + 5 > codec.t_max {
        return Err(Error::Range(format!("round length {} exceeds T_max {}", 2 * n + 5, codec.t_max)));
    }
    let q = |b: u8| if b == 1 { TOKEN_Q1 } else { TOKEN_Q0 };
    let mut seq = Vec::with_capacity(2 * n + 5);
    seq.push(embed_token(table, layout, codec, TOKEN_W, 1)?);
    seq.push(embed_id(table, layout, codec, &lambda.encode(table)?, 2)?);
    for i in 0..n {
        seq.push(embed_token(table, layout, codec, &expert_token(i), 2 * i + 3)?);
        seq.push(embed_token(table, layout, codec, q(round.preds[i]), 2 * i + 4)?);
    }
    seq.push(embed_token(table, layout, codec, TOKEN_PRED, 2 * n + 3)?);
    seq.push(embed_token(table, layout, codec, q(round.y), 2 * n + 4)?);
    seq.push(embed_token(table, layout, codec, TOKEN_UPDATE, 2 * n + 5)?);
    Ok(seq)
}

/// Final residual vectors at the `<p?>` and `<w?>` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutputs {
    pub prediction: Vec<f64>,
    pub update: Vec<f64>,
}

impl WmaCircuit {
    pub fn layout(&self) -> &BlockLayout {
        &self.spec.layout
    }

    fn token(&self, t: &str) -> usize {
        self.table.vocab.index(t).expect("reserved token present")
    }

    pub fn encode_round(&self, lambda: &ExpertLogWeights, round: &WmaRound) -> Result<Vec<Vec<f64>>> {
        if lambda.lambda.len() != self.config.n {
            return Err(Error::Shape(format!("{} log-weights for {} experts", lambda.lambda.len(), self.config.n)));
        }
        encode_round(&self.table, &self.spec.layout, &self.codec, lambda, round)
    }

    /// Forward one encoded round and return the two read-out slots.
    pub fn forward_round(&self, lambda: &ExpertLogWeights, round: &WmaRound) -> Result<RoundOutputs> {
        let seq = self.encode_round(lambda, round)?;
        let out = forward_all(&self.spec, &seq)?;
        let n = self.config.n;
        Ok(RoundOutputs { prediction: out[2 * n + 2].clone(), update: out[2 * n + 4].clone() })
    }

    /// Weighted vote read from the q-coordinates of the `<p?>` output.
    pub fn vote(&self, prediction: &[f64]) -> f64 {
        let s = self.spec.readout.scores(prediction);
        s[self.token(TOKEN_Q1)]
    }

    /// Decoded log-weights from buf2 of the `<w?>` output.
    pub fn read_update(&self, update: &[f64]) -> Result<ExpertLogWeights> {
        let buf2 = self.spec.layout.read_block(update, BUF2);
        ExpertLogWeights::decode(&self.table, self.config.n, buf2)
    }

    /// One round: the weighted vote `p_hat` and the updated log-weights.
    ///
    /// The log-weights are shifted so their minimum is zero before encoding
    /// and shifted back after decoding. Both read-outs are invariant to the
    /// shift; it keeps every weight at least 1, which the sink routing of
    /// `<z>` and the L3H1 gate rely on.
    pub fn run_round(&self, lambda: &ExpertLogWeights, round: &WmaRound) -> Result<(f64, ExpertLogWeights)> {
        if lambda.lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::State("log-weights must be finite".into()));
        }
        let c = lambda.lambda.iter().cloned().fold(f64::INFINITY, f64::min);
        let shifted = ExpertLogWeights { lambda: lambda.lambda.iter().map(|l| l - c).collect() };
        let out = self.forward_round(&shifted, round)?;
        let p_hat = self.vote(&out.prediction);
        let mut next = self.read_update(&out.update)?;
        next.lambda.iter_mut().for_each(|l| *l += c);
        Ok((p_hat, next))
    }

    /// Turn a vote into a binary prediction; `u` is a uniform draw in `[0, 1)`
    /// used only in randomized mode.
    pub fn decide(&self, p_hat: f64, u: f64) -> u8 {
        match self.config.decode {
            WmaDecode::Randomized => u8::from(u < p_hat),
            WmaDecode::Threshold { theta } => u8::from(p_hat >= theta - TIE_TOLERANCE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmaStep {
    pub lambda: Vec<f64>,
    pub p_hat: f64,
    pub prediction: u8,
    pub truth: u8,
}

/// Run a full episode from `lambda = 0`, drawing one uniform per round from a
/// stream seeded with `seed`.
pub fn run_episode(circuit: &WmaCircuit, rounds: &[WmaRound], seed: u64) -> Result<Vec<WmaStep>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lambda = ExpertLogWeights::zeros(circuit.config.n);
    let mut steps = Vec::with_capacity(rounds.len());
    for round in rounds {
        let (p_hat, next) = circuit.run_round(&lambda, round)?;
        let u: f64 = rng.random();
        steps.push(WmaStep { lambda: lambda.lambda.clone(), p_hat, prediction: circuit.decide(p_hat, u), truth: round.y });
        lambda = next;
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::mwu_step;

    const LN2: f64 = std::f64::consts::LN_2;

    fn circuit(n: usize, gamma: f64) -> WmaCircuit {
        build_default(WmaConfig::new(n, gamma, 100, WmaDecode::Threshold { theta: 0.5 }).unwrap()).unwrap()
    }

    fn lw(v: &[f64]) -> ExpertLogWeights {
        ExpertLogWeights { lambda: v.to_vec() }
    }

    fn round(preds: &[u8], y: u8) -> WmaRound {
        WmaRound { preds: preds.to_vec(), y }
    }

    #[test]
    fn encoding_layout() {
        for n in 1..=8 {
            let c = circuit(n, 2.0);
            let seq = c.encode_round(&ExpertLogWeights::zeros(n), &round(&vec![1; n], 0)).unwrap();
            assert_eq!(seq.len(), 2 * n + 5);
            assert!(seq[1][c.layout().id()].iter().all(|&x| x == 0.0));
        }
        let c = circuit(2, 2.0);
        let seq = c.encode_round(&lw(&[LN2, 0.0]), &round(&[1, 0], 1)).unwrap();
        let e1 = c.table.vocab.index("e1").unwrap();
        assert_eq!(seq[1][c.layout().id()][e1], LN2);
    }

    #[test]
    fn superposition_round_trips() {
        let c = circuit(3, 2.0);
        let l = lw(&[0.3, -1.25, 7.0]);
        let id = l.encode(&c.table).unwrap();
        assert_eq!(ExpertLogWeights::decode(&c.table, 3, &id).unwrap(), l);
    }

    #[test]
    fn uniform_weights_split_advice() {
        let c = circuit(2, 2.0);
        let (p, _) = c.run_round(&ExpertLogWeights::zeros(2), &round(&[1, 0], 1)).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_to_one_weights() {
        let c = circuit(2, 1.5);
        let (p, next) = c.run_round(&lw(&[LN2, 0.0]), &round(&[1, 0], 1)).unwrap();
        // Oracle: w = (2, 1), experts predicting 1 hold 2 of 3 units.
        let (p_ref, w_ref) = mwu_step(&[2.0, 1.0], &[1, 0], 1, 1.5).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-12 && (p - p_ref).abs() < 1e-12);
        assert!((next.lambda[0] - (LN2 + 1.5f64.ln())).abs() < 1e-12);
        assert_eq!(next.lambda[1], 0.0);
        assert!((next.lambda[0].exp() - w_ref[0]).abs() < 1e-12);
    }

    #[test]
    fn l3h1_weights_follow_exponentiated_log_weights() {
        let c = circuit(2, 2.0);
        let seq = c.encode_round(&lw(&[LN2, 0.0]), &round(&[1, 0], 0)).unwrap();
        let h1 = forward_all(
            &CircuitSpec { layers: c.spec.layers[..2].to_vec(), ..c.spec.clone() },
            &seq,
        )
        .unwrap();
        let w = c.spec.layers[2].heads[0].softmax_weights(&h1, 6).unwrap();
        // Prediction tokens sit at positions 4 and 6.
        assert!((w[3] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[5] - 1.0 / 3.0).abs() < 1e-12);
        let rest: f64 = w.iter().enumerate().filter(|(j, _)| *j != 3 && *j != 5).map(|(_, x)| x).sum();
        assert!(rest < 1e-15);
    }

    #[test]
    fn single_expert_is_copied() {
        let c = circuit(1, 2.0);
        for p in 0..2u8 {
            let (v, _) = c.run_round(&lw(&[0.7]), &round(&[p], 1)).unwrap();
            assert!((v - f64::from(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_leaves_vote_unchanged() {
        let c = circuit(4, 1.3);
        let base = [0.0, 1.1, 0.4, 2.2];
        let r = round(&[1, 0, 1, 1], 0);
        let (p0, _) = c.run_round(&lw(&base), &r).unwrap();
        for shift in [-30.0, -2.5, 0.3, 17.0] {
            let s: Vec<f64> = base.iter().map(|x| x + shift).collect();
            let (p, next) = c.run_round(&lw(&s), &r).unwrap();
            assert!((p - p0).abs() < 1e-12);
            assert!((next.lambda[1] - (s[1] + 1.3f64.ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_ties_predict_one() {
        let c = circuit(2, 2.0);
        let (p, _) = c.run_round(&ExpertLogWeights::zeros(2), &round(&[0, 1], 1)).unwrap();
        assert_eq!(c.decide(p, 0.0), 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = circuit(2, 2.0);
        assert!(matches!(c.run_round(&lw(&[f64::NAN, 0.0]), &round(&[1, 0], 1)), Err(Error::State(_))));
        assert!(c.run_round(&lw(&[0.0, 0.0]), &round(&[1, 0, 1], 1)).is_err());
        assert!(c.run_round(&lw(&[0.0, 0.0]), &round(&[1, 2], 1)).is_err());
        assert!(WmaConfig::new(0, 2.0, 10, WmaDecode::Randomized).is_err());
        assert!(WmaConfig::new(2, 1.0, 10, WmaDecode::Randomized).is_err());
        let table = EmbeddingTable::new(VocabSpec::new(["w", "p?", "w?", "q0", "q1"]).unwrap());
        let codec = PositionalCodec::with_default_angles(16, 64).unwrap();
        let cfg = WmaConfig::new(1, 2.0, 10, WmaDecode::Randomized).unwrap();
        assert!(matches!(build_wma_circuit(cfg, &table, &codec), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn serialized_circuit_reruns_identically() {
        let c = circuit(3, 1.7);
        let back = CircuitSpec::from_json(&c.spec.to_json().unwrap()).unwrap();
        let seq = c.encode_round(&lw(&[0.2, 0.0, 1.0]), &round(&[1, 0, 1], 1)).unwrap();
        assert_eq!(forward_all(&back, &seq).unwrap(), forward_all(&c.spec, &seq).unwrap());
    }

    #[test]
    fn episode_is_seed_deterministic() {
        let c = build_default(WmaConfig::new(3, 1.5, 20, WmaDecode::Randomized).unwrap()).unwrap();
        let rounds: Vec<WmaRound> = (0..20u8).map(|t| round(&[t % 2, 1, (t / 3) % 2], (t / 2) % 2)).collect();
        let a = run_episode(&c, &rounds, 9).unwrap();
        let b = run_episode(&c, &rounds, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].lambda, vec![0.0; 3]);
    }
}
