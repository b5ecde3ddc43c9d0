//! Handwired tabular Q-learning circuit.
//!
//! The Q-table lives in `|A|` context tokens: `c_a` has `id = u_a + u_Update`
//! and `buf1 = sum_s Q(s, a) u_s`. One step is the sequence
//!
//! ```text
//! <BOS> c_1..c_A <Qcurr> <s_t> <a_t> <r> <Qnext> (<s'> <a_i>)_{i=1..A} <Select> <a*> <Update>
//! ```
//!
//! of length `3|A| + 9`, where `<r>` carries `buf1 = r u_r`. The circuit runs
//! in two phases: the prefix through `<Select>` yields `a*`, which is then
//! appended as a discrete token before `<Update>`. The `buf1` of the
//! `<Update>` output is the new column for `a_t`.
//!
//! Blocks: id | buf1 | buf2 | pos.
//!
//! | head | rule | effect at the positions that matter |
//! |------|------|--------------------------------------|
//! | 1.1 | FO(A, -1) | action tokens copy the preceding state into id |
//! | 1.2 | FO({Select}, -2) | `<Select>` copies `s'` into id |
//! | 1.3 | FO({r}, -2) | `<r>` copies `s_t` into buf1 |
//! | 1.4 | FO(A, -2) | `<a_t>` picks up the `Qcurr` tag |
//! | 1.5 | hard | action tokens after `<Qnext>` pick up the `Qnext` tag |
//! | 1.6 | hard | action tokens fetch their context column into buf2 |
//! | 2.1 | hard | `<Select>` fetches `s_t` from `<a_t>` into buf1 and buf2 |
//! | 2.2 | linear | `<Select>` sums `Q(s', a) u_a` over contexts into buf2 |
//! | 3.1 | hard or softmax | `<Select>` picks the pair action with the largest `Q(s', a)` |
//! | 3.2 | FO({Update}, -1) | `<Update>` copies `a*` into id |
//! | 3.3 | hard | `<Update>` fetches the `a_t` column into buf1 |
//! | 4.1 | linear | `<Update>` adds `-alpha Q(s_t, a_t) u_{s_t}` |
//! | 4.2 | linear | `<Update>` adds `alpha r u_{s_t}` |
//! | 4.3 | linear | `<Update>` adds `alpha gamma Q(s', a*) u_{s_t}` |

use serde::{Deserialize, Serialize};

use crate::attention::{
    build_fixed_offset_head, chooser_concentration_report, AttentionKind, ChooserParams, ConcentrationReport,
    FixedOffsetHead, HeadSpec, WriteTarget,
};
use crate::circuit::{forward_all, CircuitSpec, DecodeMode, LayerSpec, ReadoutSpec};
use crate::embedding::{embed_id, BlockLayout, EmbeddingTable, PositionalCodec, VocabSpec};
use crate::error::{Error, Result};
use crate::linalg::{argmax, Matrix};
use crate::reference::{QTable, Transition};

pub const TOKEN_BOS: &str = "BOS";
pub const TOKEN_QCURR: &str = "Qcurr";
pub const TOKEN_REWARD: &str = "r";
pub const TOKEN_QNEXT: &str = "Qnext";
pub const TOKEN_SELECT: &str = "Select";
pub const TOKEN_UPDATE: &str = "Update";

const ID: usize = 0;
const BUF1: usize = 1;
const BUF2: usize = 2;

/// Routing tolerance for the fixed-offset heads.
pub const CHOOSER_EPSILON: f64 = 1e-3;

pub fn state_token(s: usize) -> String {
    format!("s{}", s + 1)
}

pub fn action_token(a: usize) -> String {
    format!("a{}", a + 1)
}

/// `BOS, s1..sS, a1..aA, Qcurr, r, Qnext, Select, Update`.
pub fn q_vocab(states: usize, actions: usize) -> Result<VocabSpec> {
    let mut tokens = vec![TOKEN_BOS.to_string()];
    tokens.extend((0..states).map(state_token));
    tokens.extend((0..actions).map(action_token));
    tokens.extend([TOKEN_QCURR, TOKEN_REWARD, TOKEN_QNEXT, TOKEN_SELECT, TOKEN_UPDATE].map(String::from));
    VocabSpec::new(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "selection", rename_all = "snake_case")]
pub enum Selection {
    Hard,
    Softmax { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QCircuitConfig {
    pub states: usize,
    pub actions: usize,
    pub alpha: f64,
    pub gamma_disc: f64,
    pub selection: Selection,
    pub steps: usize,
    /// Largest `|Q(s, a)|` the selection offset is sized for.
    pub q_bound: f64,
}

impl QCircuitConfig {
    /// `q_bound` defaults to `1 / (1 - gamma_disc)`, the largest value reachable
    /// from a zero table with rewards in `[0, 1]`.
    pub fn new(states: usize, actions: usize, alpha: f64, gamma_disc: f64, selection: Selection, steps: usize) -> Result<Self> {
        let cfg = Self { states, actions, alpha, gamma_disc, selection, steps, q_bound: 1.0 / (1.0 - gamma_disc) };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states == 0 || self.actions == 0 {
            return Err(Error::Config("need at least one state and one action".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.gamma_disc) {
            return Err(Error::Config(format!("gamma_disc must lie in [0, 1), got {}", self.gamma_disc)));
        }
        if let Selection::Softmax { beta } = self.selection {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::Config("beta must be positive".into()));
            }
        }
        if !(self.q_bound > 0.0 && self.q_bound.is_finite()) {
            return Err(Error::Config("q_bound must be positive".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        3 * self.actions + 9
    }

    fn beta(&self) -> f64 {
        match self.selection {
            Selection::Hard => 1.0,
            Selection::Softmax { beta } => beta,
        }
    }

    /// Bonus that keeps 3.1 on the `(s', a_i)` pairs: it must exceed
    /// `beta` times the widest possible spread of `Q(s', .)`.
    pub fn select_offset(&self) -> f64 {
        2.0 * self.beta() * self.q_bound + 1.0
    }
}

/// The Q-table as per-action column superpositions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QContext {
    /// `columns[a][s] = Q(s, a)`.
    pub columns: Vec<Vec<f64>>,
}

impl QContext {
    pub fn from_table(q: &QTable) -> Self {
        let columns = (0..q.actions).map(|a| (0..q.states).map(|s| q.get(s, a)).collect()).collect();
        Self { columns }
    }

    pub fn to_table(&self) -> QTable {
        let actions = self.columns.len();
        let states = self.columns.first().map_or(0, Vec::len);
        let mut q = QTable::zeros(states, actions);
        for (a, col) in self.columns.iter().enumerate() {
            for (s, &v) in col.iter().enumerate() {
                q.set(s, a, v);
            }
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QCircuit {
    pub config: QCircuitConfig,
    pub table: EmbeddingTable,
    pub codec: PositionalCodec,
    pub spec: CircuitSpec,
    /// The fixed-offset heads as built, for routing checks.
    pub choosers: Vec<(usize, FixedOffsetHead)>,
}

struct Tokens {
    bos: usize,
    qcurr: usize,
    r: usize,
    qnext: usize,
    select: usize,
    update: usize,
    states: Vec<usize>,
    actions: Vec<usize>,
}

impl Tokens {
    fn new(table: &EmbeddingTable, cfg: &QCircuitConfig) -> Result<Self> {
        let idx = |t: &str| table.vocab.index(t);
        Ok(Self {
            bos: idx(TOKEN_BOS)?,
            qcurr: idx(TOKEN_QCURR)?,
            r: idx(TOKEN_REWARD)?,
            qnext: idx(TOKEN_QNEXT)?,
            select: idx(TOKEN_SELECT)?,
            update: idx(TOKEN_UPDATE)?,
            states: (0..cfg.states).map(|s| idx(&state_token(s))).collect::<Result<_>>()?,
            actions: (0..cfg.actions).map(|a| idx(&action_token(a))).collect::<Result<_>>()?,
        })
    }
}

/// `V x d`: reads the coordinates of `tokens` in `block` into the same rows.
fn read(layout: &BlockLayout, block: usize, tokens: &[usize], scale: f64) -> Matrix {
    let mut m = Matrix::zeros(layout.d_te, layout.d());
    let start = layout.block_range(block).start;
    for &t in tokens {
        m.set(t, start + t, scale);
    }
    m
}

/// `d x V`: writes token rows into the same coordinates of each block.
fn write(layout: &BlockLayout, blocks: &[usize]) -> Matrix {
    let mut m = Matrix::zeros(layout.d(), layout.d_te);
    for &b in blocks {
        let start = layout.block_range(b).start;
        for t in 0..layout.d_te {
            m.set(start + t, t, 1.0);
        }
    }
    m
}

fn head(name: &str, q: Matrix, k: Matrix, v: Matrix, o: Matrix, kind: AttentionKind) -> Result<HeadSpec> {
    HeadSpec::new(name, q, k, v, o, kind, WriteTarget::AdditiveWhole)
}

pub fn build_q_circuit(cfg: QCircuitConfig, table: &EmbeddingTable, codec: &PositionalCodec) -> Result<QCircuit> {
    cfg.validate()?;
    let tok = Tokens::new(table, &cfg)?;
    if cfg.seq_len() > codec.t_max {
        return Err(Error::Config(format!("step length {} exceeds T_max {}", cfg.seq_len(), codec.t_max)));
    }
    let layout = BlockLayout::new(table.d_te(), 2, codec.d_pe);
    let d = layout.d();
    let id = layout.id();
    let buf1 = layout.buf(1);
    let hard_fo = matches!(cfg.selection, Selection::Hard);
    let action_names: Vec<String> = (0..cfg.actions).map(action_token).collect();
    let mut choosers = Vec::new();

    let mut fo = |name: &str, set: &[String], offset: usize, v: Matrix, o: Matrix, layer: usize| -> Result<HeadSpec> {
        let params = ChooserParams::at_bounds(set.iter().cloned(), offset, CHOOSER_EPSILON, codec)?;
        let mut h = build_fixed_offset_head(&params, codec, table, &layout)?.with_value(v, o, WriteTarget::AdditiveWhole)?;
        if hard_fo {
            h = h.with_kind(AttentionKind::Hard);
        }
        h.head.name = name.into();
        choosers.push((layer, h.clone()));
        Ok(h.head)
    };

    let s_id = read(&layout, ID, &tok.states, 1.0);
    let a_id = read(&layout, ID, &tok.actions, 1.0);
    let to_id = write(&layout, &[ID]);
    let to_buf1 = write(&layout, &[BUF1]);
    let to_buf2 = write(&layout, &[BUF2]);

    // Layer 1.
    let h11 = fo("1.1", &action_names, 1, s_id.clone(), to_id.clone(), 0)?;
    let h12 = fo("1.2", &[TOKEN_SELECT.to_string()], 2, s_id.clone(), to_id.clone(), 0)?;
    let h13 = fo("1.3", &[TOKEN_REWARD.to_string()], 2, s_id.clone(), to_buf1.clone(), 0)?;
    let h14 = fo("1.4", &action_names, 2, read(&layout, ID, &[tok.qcurr], 1.0), to_id.clone(), 0)?;

    let mut q = Matrix::zeros(1, d);
    let mut k = Matrix::zeros(1, d);
    for &a in &tok.actions {
        q.set(0, id.start + a, 1.0);
    }
    k.set(0, id.start + tok.qnext, 1.0);
    let h15 = head("1.5", q, k, read(&layout, ID, &[tok.qnext], 1.0), to_id.clone(), AttentionKind::Hard)?;

    let mut q = a_id.clone();
    q.set(tok.bos, id.start + tok.update, 2.0);
    let mut k = a_id.clone();
    k.set(tok.bos, id.start + tok.bos, 1.0);
    let h16 = head("1.6", q, k, read(&layout, BUF1, &tok.states, 1.0), to_buf2.clone(), AttentionKind::Hard)?;

    // Layer 2.
    let mut q = Matrix::zeros(1, d);
    let mut k = Matrix::zeros(1, d);
    q.set(0, id.start + tok.select, 1.0);
    k.set(0, id.start + tok.qcurr, 1.0);
    for &a in &tok.actions {
        k.set(0, id.start + a, 1.0);
    }
    let h21 = head("2.1", q, k, s_id.clone(), write(&layout, &[BUF1, BUF2]), AttentionKind::Hard)?;
    let h22 = head(
        "2.2",
        s_id.clone(),
        read(&layout, BUF1, &tok.states, 1.0),
        a_id.clone(),
        to_buf2.clone(),
        AttentionKind::Linear,
    )?;

    // Layer 3.
    let beta = cfg.beta();
    let c = cfg.select_offset();
    let mut q = read(&layout, BUF2, &tok.actions, beta);
    for &a in &tok.actions {
        q.set(a, id.start + tok.select, c);
    }
    q.set(tok.qnext, id.start + tok.select, c);
    let mut k = a_id.clone();
    k.set(tok.qnext, id.start + tok.qnext, 1.0);
    let kind = match cfg.selection {
        Selection::Hard => AttentionKind::Hard,
        Selection::Softmax { .. } => AttentionKind::Softmax { beta: 1.0 },
    };
    let h31 = head("3.1", q, k, a_id.clone(), to_id.clone(), kind)?;
    let h32 = fo("3.2", &[TOKEN_UPDATE.to_string()], 1, a_id.clone(), to_id.clone(), 2)?;

    let mut q = Matrix::zeros(1, d);
    let mut k = Matrix::zeros(1, d);
    q.set(0, id.start + tok.update, 1.0);
    k.set(0, id.start + tok.qcurr, 1.0);
    for &a in &tok.actions {
        k.set(0, id.start + a, 1.0);
    }
    let h33 = head("3.3", q, k, read(&layout, BUF2, &tok.states, 1.0), to_buf1.clone(), AttentionKind::Hard)?;

    // Layer 4.
    let (alpha, g) = (cfg.alpha, cfg.gamma_disc);
    let h41 = head(
        "4.1",
        read(&layout, BUF1, &tok.states, 1.0),
        read(&layout, BUF2, &tok.states, 1.0),
        read(&layout, BUF1, &tok.states, -alpha),
        to_buf1.clone(),
        AttentionKind::Linear,
    )?;
    let mut q = Matrix::zeros(1, d);
    let mut k = Matrix::zeros(1, d);
    q.set(0, id.start + tok.update, 1.0);
    k.set(0, buf1.start + tok.r, 1.0);
    let h42 = head("4.2", q, k, read(&layout, BUF1, &tok.states, alpha), to_buf1.clone(), AttentionKind::Linear)?;
    let h43 = head(
        "4.3",
        a_id,
        read(&layout, BUF2, &tok.actions, 1.0),
        read(&layout, BUF1, &tok.states, alpha * g),
        to_buf1,
        AttentionKind::Linear,
    )?;

    let spec = CircuitSpec::new(
        layout,
        vec![
            LayerSpec::new(vec![h11, h12, h13, h14, h15, h16]),
            LayerSpec::new(vec![h21, h22]),
            LayerSpec::new(vec![h31, h32, h33]),
            LayerSpec::new(vec![h41, h42, h43]),
        ],
        ReadoutSpec::identity_rows(&layout, DecodeMode::Argmax),
    )?;
    Ok(QCircuit { config: cfg, table: table.clone(), codec: codec.clone(), spec, choosers })
}

/// Build with the default codec and vocabulary.
pub fn build_default(cfg: QCircuitConfig) -> Result<QCircuit> {
    let table = EmbeddingTable::new(q_vocab(cfg.states, cfg.actions)?);
    let codec = PositionalCodec::with_default_angles(16, 64)?;
    build_q_circuit(cfg, &table, &codec)
}

/// Result of one circuit step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QStepOutcome {
    pub a_star: usize,
    /// Action weights read from the `<Select>` output.
    pub select_scores: Vec<f64>,
    pub context: QContext,
}

impl QCircuit {
    fn tokens(&self) -> Tokens {
        Tokens::new(&self.table, &self.config).expect("vocabulary checked at build")
    }

    fn check(&self, ctx: &QContext, tr: &Transition) -> Result<()> {
        let cfg = &self.config;
        if ctx.columns.len() != cfg.actions || ctx.columns.iter().any(|c| c.len() != cfg.states) {
            return Err(Error::Shape(format!("context must be {} columns of {}", cfg.actions, cfg.states)));
        }
        if tr.s >= cfg.states || tr.s_next >= cfg.states || tr.a >= cfg.actions {
            return Err(Error::Argument(format!("transition {tr:?} out of range")));
        }
        if !(0.0..=1.0).contains(&tr.r) {
            return Err(Error::Argument(format!("reward {} outside [0, 1]", tr.r)));
        }
        if ctx.columns.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::State("Q-table has nonfinite entries".into()));
        }
        if ctx.columns.iter().flatten().any(|x| x.abs() > cfg.q_bound) {
            return Err(Error::State(format!("|Q| exceeds the configured bound {}", cfg.q_bound)));
        }
        Ok(())
    }

    /// Embeddings for one step. With `a_star = None` the sequence stops at
    /// `<Select>`; otherwise it continues with `<a*>` and `<Update>`.
    pub fn encode_step(&self, ctx: &QContext, tr: &Transition, a_star: Option<usize>) -> Result<Vec<Vec<f64>>> {
        self.check(ctx, tr)?;
        let tok = self.tokens();
        let layout = self.spec.layout;
        let v = layout.d_te;
        let one_hot = |t: usize| {
            let mut u = vec![0.0; v];
            u[t] = 1.0;
            u
        };
        let mut seq = Vec::with_capacity(self.config.seq_len());
        let push = |id: Vec<f64>, buf1: Option<Vec<f64>>, seq: &mut Vec<Vec<f64>>| -> Result<()> {
            let mut x = embed_id(&self.table, &layout, &self.codec, &id, seq.len() + 1)?;
            if let Some(b) = buf1 {
                layout.write_block(&mut x, BUF1, &b);
            }
            seq.push(x);
            Ok(())
        };
        push(one_hot(tok.bos), None, &mut seq)?;
        for (a, col) in ctx.columns.iter().enumerate() {
            let mut id = one_hot(tok.actions[a]);
            id[tok.update] = 1.0;
            let mut b = vec![0.0; v];
            for (s, &q) in col.iter().enumerate() {
                b[tok.states[s]] = q;
            }
            push(id, Some(b), &mut seq)?;
        }
        push(one_hot(tok.qcurr), None, &mut seq)?;
        push(one_hot(tok.states[tr.s]), None, &mut seq)?;
        push(one_hot(tok.actions[tr.a]), None, &mut seq)?;
        let mut rb = vec![0.0; v];
        rb[tok.r] = tr.r;
        push(one_hot(tok.r), Some(rb), &mut seq)?;
        push(one_hot(tok.qnext), None, &mut seq)?;
        for a in 0..self.config.actions {
            push(one_hot(tok.states[tr.s_next]), None, &mut seq)?;
            push(one_hot(tok.actions[a]), None, &mut seq)?;
        }
        push(one_hot(tok.select), None, &mut seq)?;
        if let Some(a) = a_star {
            if a >= self.config.actions {
                return Err(Error::Argument(format!("a* = {a} out of range")));
            }
            push(one_hot(tok.actions[a]), None, &mut seq)?;
            push(one_hot(tok.update), None, &mut seq)?;
        }
        Ok(seq)
    }

    /// Action coordinates of the final id block at `<Select>`.
    pub fn select_scores(&self, out: &[f64]) -> Vec<f64> {
        let id = self.spec.layout.read_block(out, ID);
        self.tokens().actions.iter().map(|&a| id[a]).collect()
    }

    /// Both phases of one step.
    pub fn run_step(&self, ctx: &QContext, tr: &Transition) -> Result<QStepOutcome> {
        let prefix = self.encode_step(ctx, tr, None)?;
        let out = forward_all(&self.spec, &prefix)?;
        let select_scores = self.select_scores(out.last().expect("nonempty"));
        let a_star = argmax(&select_scores);

        let full = self.encode_step(ctx, tr, Some(a_star))?;
        let out = forward_all(&self.spec, &full)?;
        let buf1 = self.spec.layout.read_block(out.last().expect("nonempty"), BUF1);
        let tok = self.tokens();
        let mut context = ctx.clone();
        context.columns[tr.a] = tok.states.iter().map(|&s| buf1[s]).collect();
        Ok(QStepOutcome { a_star, select_scores, context })
    }

    /// Per-layer inputs for a full step, `[X0, X1, X2, X3]`.
    pub fn layer_inputs(&self, seq: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut xs = vec![seq.to_vec()];
        for l in 0..self.spec.layers.len() - 1 {
            let partial = CircuitSpec { layers: vec![self.spec.layers[l].clone()], ..self.spec.clone() };
            let next = forward_all(&partial, xs.last().expect("nonempty"))?;
            xs.push(next);
        }
        Ok(xs)
    }

    /// Chooser routing mass of every fixed-offset head on its own layer input.
    pub fn chooser_reports(&self, seq: &[Vec<f64>]) -> Result<Vec<(String, ConcentrationReport)>> {
        let xs = self.layer_inputs(seq)?;
        self.choosers
            .iter()
            .map(|(layer, fo)| Ok((fo.head.name.clone(), chooser_concentration_report(fo, &[xs[*layer].clone()])?)))
            .collect()
    }
}

/// `run_step` as a free function.
pub fn run_step(circuit: &QCircuit, ctx: &QContext, tr: &Transition) -> Result<(usize, QContext)> {
    let o = circuit.run_step(ctx, tr)?;
    Ok((o.a_star, o.context))
}
