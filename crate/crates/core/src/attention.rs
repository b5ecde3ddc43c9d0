//! Causal attention heads and the fixed-offset chooser.
//!
//! A head sees positions `j <= i` only. Three combine rules are supported:
//! `Hard` takes the value at the argmax logit (earliest position on ties),
//! `Softmax` normalizes `beta * logits`, and `Linear` sums `logit * value`
//! without normalization.

use serde::{Deserialize, Serialize};

use crate::embedding::{margins, BlockLayout, EmbeddingTable, PositionalCodec};
use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionKind {
    Hard,
    Softmax { beta: f64 },
    Linear,
}

/// Where a head's output lands in the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum WriteTarget {
    /// `W_O` has the block's width as row count; output is added into that block.
    Block { block: usize },
    /// `W_O` is `d x val_dim`; output is added to the whole vector.
    AdditiveWhole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    #[serde(flatten)]
    pub kind: AttentionKind,
    pub write: WriteTarget,
}

impl HeadSpec {
    pub fn new(
        name: impl Into<String>,
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        w_o: Matrix,
        kind: AttentionKind,
        write: WriteTarget,
    ) -> Result<Self> {
        let head = Self { name: name.into(), w_q, w_k, w_v, w_o, kind, write };
        head.validate()?;
        Ok(head)
    }

    pub fn d(&self) -> usize {
        self.w_q.cols
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.cols;
        if self.w_k.cols != d || self.w_v.cols != d {
            return Err(Error::Shape(format!("{}: Q/K/V must read width {d}", self.name)));
        }
        if self.w_q.rows != self.w_k.rows {
            return Err(Error::Shape(format!(
                "{}: query dim {} != key dim {}",
                self.name, self.w_q.rows, self.w_k.rows
            )));
        }
        if self.w_o.cols != self.w_v.rows {
            return Err(Error::Shape(format!(
                "{}: W_O takes {} inputs, W_V gives {}",
                self.name, self.w_o.cols, self.w_v.rows
            )));
        }
        if let AttentionKind::Softmax { beta } = self.kind {
            if !(beta > 0.0) || !beta.is_finite() {
                return Err(Error::Argument(format!("{}: beta must be positive", self.name)));
            }
        }
        Ok(())
    }

    /// Width of the output vector before placement.
    pub fn out_dim(&self) -> usize {
        self.w_o.rows
    }

    fn project(&self, seq: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if seq.is_empty() {
            return Err(Error::Argument(format!("{}: empty sequence", self.name)));
        }
        if let Some(x) = seq.iter().find(|x| x.len() != self.d()) {
            return Err(Error::Shape(format!(
                "{}: input width {} != {}",
                self.name,
                x.len(),
                self.d()
            )));
        }
        let q = seq.iter().map(|x| self.w_q.matvec(x)).collect();
        let k = seq.iter().map(|x| self.w_k.matvec(x)).collect();
        let v = seq.iter().map(|x| self.w_v.matvec(x)).collect();
        Ok((q, k, v))
    }

    /// Raw logits `<q_i, k_j>` for `j <= i` (0-based `i`).
    pub fn logits(&self, seq: &[Vec<f64>], i: usize) -> Result<Vec<f64>> {
        let (q, k, _) = self.project(&seq[..=i])?;
        Ok((0..=i).map(|j| dot(&q[i], &k[j])).collect())
    }

    /// Softmax of the logits at position `i`, using `beta` for softmax heads
    /// and 1 otherwise. This is the routing distribution the chooser lemma
    /// talks about, whatever combine rule the head uses at runtime.
    pub fn softmax_weights(&self, seq: &[Vec<f64>], i: usize) -> Result<Vec<f64>> {
        let beta = match self.kind {
            AttentionKind::Softmax { beta } => beta,
            _ => 1.0,
        };
        Ok(softmax(&self.logits(seq, i)?, beta))
    }

    /// Head output (`W_O * combine`) at every position.
    pub fn forward(&self, seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (q, k, v) = self.project(seq)?;
        let vdim = self.w_v.rows;
        let mut out = Vec::with_capacity(seq.len());
        for i in 0..seq.len() {
            let logits: Vec<f64> = (0..=i).map(|j| dot(&q[i], &k[j])).collect();
            let mut mix = vec![0.0; vdim];
            match self.kind {
                AttentionKind::Hard => mix.copy_from_slice(&v[argmax(&logits)]),
                AttentionKind::Softmax { beta } => {
                    for (w, vj) in softmax(&logits, beta).iter().zip(&v) {
                        for (m, x) in mix.iter_mut().zip(vj) {
                            *m += w * x;
                        }
                    }
                }
                AttentionKind::Linear => {
                    for (s, vj) in logits.iter().zip(&v) {
                        for (m, x) in mix.iter_mut().zip(vj) {
                            *m += s * x;
                        }
                    }
                }
            }
            out.push(self.w_o.matvec(&mix));
        }
        Ok(out)
    }

    /// Expand an output vector to full width according to the write target.
    pub fn place(&self, layout: &BlockLayout, out: &[f64]) -> Vec<f64> {
        match self.write {
            WriteTarget::AdditiveWhole => out.to_vec(),
            WriteTarget::Block { block } => {
                let mut full = vec![0.0; layout.d()];
                full[layout.block_range(block)].copy_from_slice(out);
                full
            }
        }
    }
}

/// Full-width head outputs at every position.
pub fn head_forward(head: &HeadSpec, layout: &BlockLayout, seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(head.forward(seq)?.iter().map(|o| head.place(layout, o)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChooserParams {
    /// Token names in the routed set.
    pub target_set: Vec<String>,
    pub offset: usize,
    pub epsilon: f64,
    pub eta: f64,
    pub xi: f64,
}

/// Smallest `eta` and `xi` allowed for a codec, offset and tolerance.
pub fn chooser_bounds(codec: &PositionalCodec, offset: usize, epsilon: f64) -> Result<(f64, f64)> {
    let m = margins(codec, &[offset])?;
    let eta = (codec.t_max as f64 / epsilon).ln() / m.delta_pos;
    let xi = 3.0 * codec.d_pe as f64 / m.delta_bos;
    Ok((eta, xi))
}

impl ChooserParams {
    /// Parameters sitting exactly at the lower bounds.
    pub fn at_bounds<S: Into<String>>(
        target_set: impl IntoIterator<Item = S>,
        offset: usize,
        epsilon: f64,
        codec: &PositionalCodec,
    ) -> Result<Self> {
        let (eta, xi) = chooser_bounds(codec, offset, epsilon)?;
        Ok(Self {
            target_set: target_set.into_iter().map(Into::into).collect(),
            offset,
            epsilon,
            eta,
            xi,
        })
    }

    pub fn validate(&self, codec: &PositionalCodec) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Bound(format!("0 < epsilon < 1 fails for epsilon = {}", self.epsilon)));
        }
        let (eta_min, xi_min) = chooser_bounds(codec, self.offset, self.epsilon)?;
        if !(self.eta >= eta_min) {
            return Err(Error::Bound(format!(
                "eta_ch >= log(T_max/epsilon)/delta_pos fails: {} < {eta_min}",
                self.eta
            )));
        }
        if !(self.xi >= xi_min) {
            return Err(Error::Bound(format!(
                "xi >= 3 d_PE/delta_bos fails: {} < {xi_min}",
                self.xi
            )));
        }
        Ok(())
    }
}

/// A built chooser head together with what it is meant to route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedOffsetHead {
    pub head: HeadSpec,
    pub params: ChooserParams,
    pub layout: BlockLayout,
    /// Indicator of the complement of the target set, over the identity block.
    pub complement: Vec<f64>,
}

impl FixedOffsetHead {
    /// 1-based designated target for 1-based position `i`, or `None` for a
    /// routed token that has no position `l` steps back.
    pub fn designated_target(&self, seq: &[Vec<f64>], i: usize) -> Option<usize> {
        let id = &seq[i - 1][self.layout.id()];
        let outside = dot(id, &self.complement);
        if outside >= 0.5 {
            Some(1)
        } else if outside.abs() < 1e-12 && i > self.params.offset {
            Some(i - self.params.offset)
        } else {
            None
        }
    }

    pub fn with_value(mut self, w_v: Matrix, w_o: Matrix, write: WriteTarget) -> Result<Self> {
        self.head.w_v = w_v;
        self.head.w_o = w_o;
        self.head.write = write;
        self.head.validate()?;
        Ok(self)
    }

    pub fn with_kind(mut self, kind: AttentionKind) -> Self {
        self.head.kind = kind;
        self
    }
}

/// Build `FO(T, -l)`: a head whose logit is
/// `eta (<p_i, p_{j+l}> + xi <u_Tbar, h_i> <p_1, p_j>)`.
///
/// The query stacks `pos(i)` over `xi * p_1 * <u_Tbar, id(h_i)>`; the key
/// stacks `eta * R^(l) pos(j)` over `eta * pos(j)`. The default value copies
/// the identity block into the identity block.
pub fn build_fixed_offset_head(
    params: &ChooserParams,
    codec: &PositionalCodec,
    table: &EmbeddingTable,
    layout: &BlockLayout,
) -> Result<FixedOffsetHead> {
    params.validate(codec)?;
    if layout.d_pe != codec.d_pe || layout.d_te != table.d_te() {
        return Err(Error::Shape("layout does not match codec/table".into()));
    }
    let mut complement = vec![1.0; table.d_te()];
    for t in &params.target_set {
        complement[table.vocab.index(t)?] = 0.0;
    }
    let d = layout.d();
    let dp = codec.d_pe;
    let pos = layout.pos();
    let id = layout.id();
    let p1 = codec.code(1);
    let rot = codec.rotation(params.offset as i64);

    let mut w_q = Matrix::zeros(2 * dp, d);
    let mut w_k = Matrix::zeros(2 * dp, d);
    for r in 0..dp {
        w_q.set(r, pos.start + r, 1.0);
        for (v, &c) in complement.iter().enumerate() {
            if c != 0.0 {
                w_q.set(dp + r, id.start + v, params.xi * p1[r]);
            }
        }
        for c in 0..dp {
            w_k.set(r, pos.start + c, params.eta * rot.get(r, c));
        }
        w_k.set(dp + r, pos.start + r, params.eta);
    }
    let mut w_v = Matrix::zeros(layout.d_te, d);
    for v in 0..layout.d_te {
        w_v.set(v, id.start + v, 1.0);
    }
    let head = HeadSpec::new(
        format!("FO(-{})", params.offset),
        w_q,
        w_k,
        w_v,
        Matrix::identity(layout.d_te),
        AttentionKind::Softmax { beta: 1.0 },
        WriteTarget::Block { block: 0 },
    )?;
    Ok(FixedOffsetHead { head, params: params.clone(), layout: *layout, complement })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    /// Worst routing mass on the designated target.
    pub min_mass: f64,
    /// Sequence index and 1-based position where the worst mass occurred.
    pub worst_sequence: usize,
    pub worst_position: usize,
    /// Number of positions checked.
    pub checked: usize,
}

impl ConcentrationReport {
    pub fn passes(&self, epsilon: f64) -> bool {
        self.min_mass >= 1.0 - epsilon
    }
}

/// Worst-case mass on the designated target over every position of every
/// sequence. Positions without a designated target are skipped.
pub fn chooser_concentration_report(fo: &FixedOffsetHead, seqs: &[Vec<Vec<f64>>]) -> Result<ConcentrationReport> {
    let mut report = ConcentrationReport { min_mass: 1.0, worst_sequence: 0, worst_position: 1, checked: 0 };
    for (s, seq) in seqs.iter().enumerate() {
        for i in 1..=seq.len() {
            let Some(target) = fo.designated_target(seq, i) else { continue };
            let w = fo.head.softmax_weights(seq, i - 1)?;
            let mass = w[target - 1];
            report.checked += 1;
            if mass < report.min_mass {
                report.min_mass = mass;
                report.worst_sequence = s;
                report.worst_position = i;
            }
        }
    }
    Ok(report)
}
