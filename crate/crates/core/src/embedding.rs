//! Token vocabulary, block-structured embeddings and rotation positional codes.
//!
//! A residual vector is laid out as `id | buf_1 .. buf_{k-1} | pos`. Identity
//! embeddings are one-hot with `d_TE = V`, so `U^T U = I` holds bitwise and a
//! superposition `sum_v c_v u_v` decodes back to its coefficients exactly.
//!
//! Positional codes are `d_PE / 2` unit 2-blocks, `pos(i)_m = (cos i w_m, sin i w_m)`,
//! with `w_m = pi * 3^-m` by default. Rotating block `m` by `l * w_m` maps
//! `pos(i)` to `pos(i + l)` for every `i`, which gives exact successor and
//! shift matrices.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct VocabSpec {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl VocabSpec {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::Argument("vocabulary must not be empty".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::Vocabulary(token.to_string()))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }
}

impl TryFrom<Vec<String>> for VocabSpec {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<VocabSpec> for Vec<String> {
    fn from(v: VocabSpec) -> Self {
        v.tokens
    }
}

/// One-hot identity embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub vocab: VocabSpec,
}

impl EmbeddingTable {
    pub fn new(vocab: VocabSpec) -> Self {
        Self { vocab }
    }

    pub fn d_te(&self) -> usize {
        self.vocab.len()
    }

    /// `u_v` for a token index.
    pub fn unit(&self, idx: usize) -> Vec<f64> {
        let mut u = vec![0.0; self.d_te()];
        u[idx] = 1.0;
        u
    }

    pub fn u(&self, token: &str) -> Result<Vec<f64>> {
        Ok(self.unit(self.vocab.index(token)?))
    }

    /// The `d_TE x V` matrix whose columns are the identity embeddings.
    pub fn matrix(&self) -> Matrix {
        Matrix::identity(self.d_te())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub d_te: usize,
    /// Number of buffer blocks (`k - 1`).
    pub buffer_count: usize,
    pub d_pe: usize,
}

impl BlockLayout {
    pub fn new(d_te: usize, buffer_count: usize, d_pe: usize) -> Self {
        Self { d_te, buffer_count, d_pe }
    }

    /// Token blocks `k` (identity plus buffers).
    pub fn k(&self) -> usize {
        1 + self.buffer_count
    }

    pub fn d(&self) -> usize {
        self.k() * self.d_te + self.d_pe
    }

    /// Block count including the positional block.
    pub fn block_count(&self) -> usize {
        self.k() + 1
    }

    /// Block 0 is `id`, blocks `1..k` are buffers, block `k` is `pos`.
    pub fn block_range(&self, block: usize) -> Range<usize> {
        assert!(block < self.block_count(), "block {block} out of range");
        if block == self.k() {
            let s = self.k() * self.d_te;
            s..s + self.d_pe
        } else {
            block * self.d_te..(block + 1) * self.d_te
        }
    }

    pub fn id(&self) -> Range<usize> {
        self.block_range(0)
    }

    pub fn buf(&self, j: usize) -> Range<usize> {
        assert!(j >= 1 && j <= self.buffer_count, "buffer {j} out of range");
        self.block_range(j)
    }

    pub fn pos(&self) -> Range<usize> {
        self.block_range(self.k())
    }

    pub fn pos_block(&self) -> usize {
        self.k()
    }

    pub fn block_width(&self, block: usize) -> usize {
        self.block_range(block).len()
    }

    pub fn read_block<'a>(&self, x: &'a [f64], block: usize) -> &'a [f64] {
        &x[self.block_range(block)]
    }

    pub fn write_block(&self, x: &mut [f64], block: usize, value: &[f64]) {
        let r = self.block_range(block);
        assert_eq!(r.len(), value.len(), "block width mismatch");
        x[r].copy_from_slice(value);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalCodec {
    pub d_pe: usize,
    /// Radians per step, one per 2-block.
    pub angles: Vec<f64>,
    pub t_max: usize,
}

impl PositionalCodec {
    /// Angles `pi * 3^-m` for `m = 1..=d_pe/2`.
    pub fn with_default_angles(d_pe: usize, t_max: usize) -> Result<Self> {
        let angles = (1..=d_pe / 2).map(|m| PI * 3f64.powi(-(m as i32))).collect();
        Self::new(d_pe, angles, t_max)
    }

    pub fn new(d_pe: usize, angles: Vec<f64>, t_max: usize) -> Result<Self> {
        if d_pe == 0 || !d_pe.is_multiple_of(2) {
            return Err(Error::Argument(format!("d_PE must be even and positive, got {d_pe}")));
        }
        if angles.len() != d_pe / 2 {
            return Err(Error::Argument(format!(
                "expected {} angles, got {}",
                d_pe / 2,
                angles.len()
            )));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::Argument("angles must be finite".into()));
        }
        Ok(Self { d_pe, angles, t_max })
    }

    /// The code for any integer position, without range checks.
    pub fn code(&self, i: i64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d_pe);
        for &w in &self.angles {
            let theta = i as f64 * w;
            out.push(theta.cos());
            out.push(theta.sin());
        }
        out
    }

    /// `pos(i)` for `1 <= i <= T_max`.
    pub fn pos(&self, i: usize) -> Result<Vec<f64>> {
        if i < 1 || i > self.t_max {
            return Err(Error::Range(format!("position {i} outside 1..={}", self.t_max)));
        }
        Ok(self.code(i as i64))
    }

    /// Block rotation by `l * w_m`; maps `code(i)` to `code(i + l)`.
    pub fn shift_matrix(&self, l: usize) -> Result<Matrix> {
        if l > self.t_max {
            return Err(Error::Range(format!("shift {l} exceeds T_max {}", self.t_max)));
        }
        Ok(self.rotation(l as i64))
    }

    /// Rotation by any signed number of steps.
    pub fn rotation(&self, l: i64) -> Matrix {
        let mut r = Matrix::zeros(self.d_pe, self.d_pe);
        if l == 0 {
            return Matrix::identity(self.d_pe);
        }
        for (m, &w) in self.angles.iter().enumerate() {
            let (s, c) = (l as f64 * w).sin_cos();
            let b = 2 * m;
            r.set(b, b, c);
            r.set(b, b + 1, -s);
            r.set(b + 1, b, s);
            r.set(b + 1, b + 1, c);
        }
        r
    }

    /// `<p_i, p_i>`; equal to the number of 2-blocks.
    pub fn self_overlap(&self) -> f64 {
        let p = self.code(1);
        dot(&p, &p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub delta_pos: f64,
    pub delta_bos: f64,
}

/// Exhaustive scan of the positional and sink margins for the given offsets.
///
/// `delta_pos` is the minimum over offsets `l`, positions `i` in `1..=T_max`
/// and keys `j` in `1..=T_max` with `j + l != i` of
/// `<p_i, p_i> - <p_i, p_{j+l}>`. `delta_bos` is the minimum over `j` in
/// `2..=T_max` of `<p_1, p_1> - <p_1, p_j>`.
pub fn margins(codec: &PositionalCodec, offsets: &[usize]) -> Result<Margins> {
    if codec.t_max < 2 {
        return Err(Error::Range(format!("margins need T_max >= 2, got {}", codec.t_max)));
    }
    let t = codec.t_max as i64;
    let max_l = offsets.iter().copied().max().unwrap_or(0) as i64;
    let codes: Vec<Vec<f64>> = (0..=t + max_l).map(|i| codec.code(i)).collect();
    let mut delta_pos = f64::INFINITY;
    for &l in offsets.iter().chain(offsets.is_empty().then_some(&0)) {
        let l = l as i64;
        for i in 1..=t {
            let pi = &codes[i as usize];
            let own = dot(pi, pi);
            for j in 1..=t {
                if j + l == i {
                    continue;
                }
                delta_pos = delta_pos.min(own - dot(pi, &codes[(j + l) as usize]));
            }
        }
    }
    let p1 = &codes[1];
    let own = dot(p1, p1);
    let delta_bos = (2..=t).map(|j| own - dot(p1, &codes[j as usize])).fold(f64::INFINITY, f64::min);
    if delta_pos <= 0.0 || delta_bos <= 0.0 {
        return Err(Error::CodecUnsound(format!(
            "delta_pos = {delta_pos}, delta_bos = {delta_bos} for T_max = {t}"
        )));
    }
    Ok(Margins { delta_pos, delta_bos })
}

/// Embedding of a token at position `i`: identity block set, buffers zero.
pub fn embed_token(
    table: &EmbeddingTable,
    layout: &BlockLayout,
    codec: &PositionalCodec,
    token: &str,
    i: usize,
) -> Result<Vec<f64>> {
    let idx = table.vocab.index(token)?;
    embed_id(table, layout, codec, &table.unit(idx), i)
}

/// Embedding with an arbitrary identity-block vector (superposition tokens).
pub fn embed_id(
    table: &EmbeddingTable,
    layout: &BlockLayout,
    codec: &PositionalCodec,
    id: &[f64],
    i: usize,
) -> Result<Vec<f64>> {
    if layout.d_te != table.d_te() || layout.d_pe != codec.d_pe {
        return Err(Error::Shape("layout does not match table/codec".into()));
    }
    let mut x = vec![0.0; layout.d()];
    layout.write_block(&mut x, 0, id);
    let p = codec.pos(i)?;
    layout.write_block(&mut x, layout.pos_block(), &p);
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use proptest::prelude::*;

    fn setup() -> (EmbeddingTable, BlockLayout, PositionalCodec) {
        let vocab = VocabSpec::new(["w", "p?", "w?", "q0", "q1", "e_1"]).unwrap();
        let table = EmbeddingTable::new(vocab);
        let layout = BlockLayout::new(table.d_te(), 3, 16);
        let codec = PositionalCodec::with_default_angles(16, 64).unwrap();
        (table, layout, codec)
    }

    #[test]
    fn embed_identity_block_is_orthonormal() {
        let (table, layout, codec) = setup();
        let x = embed_token(&table, &layout, &codec, "q0", 1).unwrap();
        let id = layout.read_block(&x, 0);
        assert_eq!(dot(id, &table.u("q0").unwrap()), 1.0);
        assert_eq!(dot(id, &table.u("q1").unwrap()), 0.0);
        for b in 1..=3 {
            assert!(layout.read_block(&x, b).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn embed_same_token_different_positions() {
        let (table, layout, codec) = setup();
        let a = embed_token(&table, &layout, &codec, "e_1", 3).unwrap();
        let b = embed_token(&table, &layout, &codec, "e_1", 7).unwrap();
        assert_eq!(layout.read_block(&a, 0), layout.read_block(&b, 0));
        assert_ne!(layout.read_block(&a, 4), layout.read_block(&b, 4));
    }

    #[test]
    fn embed_rejects_unknown_token_and_position() {
        let (table, layout, codec) = setup();
        assert!(matches!(
            embed_token(&table, &layout, &codec, "zzz", 1),
            Err(Error::Vocabulary(_))
        ));
        assert!(matches!(embed_token(&table, &layout, &codec, "w", 0), Err(Error::Range(_))));
        assert!(matches!(embed_token(&table, &layout, &codec, "w", 65), Err(Error::Range(_))));
    }

    #[test]
    fn table_is_exactly_orthonormal() {
        let (table, ..) = setup();
        let u = table.matrix();
        assert_eq!(u.transpose().matmul(&u).unwrap(), Matrix::identity(table.d_te()));
    }

    #[test]
    fn duplicate_tokens_rejected() {
        assert!(VocabSpec::new(["a", "a"]).is_err());
        assert!(VocabSpec::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn layout_blocks_cover_and_are_disjoint() {
        let layout = BlockLayout::new(5, 2, 4);
        let mut seen = vec![0u8; layout.d()];
        for b in 0..layout.block_count() {
            for i in layout.block_range(b) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        let mut x = vec![0.0; layout.d()];
        layout.write_block(&mut x, 1, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(layout.read_block(&x, 1), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(layout.read_block(&x, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_zero_is_identity() {
        let (.., codec) = setup();
        assert_eq!(codec.shift_matrix(0).unwrap(), Matrix::identity(16));
    }

    #[test]
    fn shift_one_is_successor() {
        let (.., codec) = setup();
        let moved = codec.shift_matrix(1).unwrap().matvec(&codec.pos(3).unwrap());
        assert!(max_abs_diff(&moved, &codec.pos(4).unwrap()) <= 1e-12);
    }

    #[test]
    fn shift_composes() {
        let (.., codec) = setup();
        let one = codec.shift_matrix(1).unwrap();
        let two = codec.shift_matrix(2).unwrap();
        assert!(one.matmul(&one).unwrap().max_abs_diff(&two) <= 1e-12);
    }

    #[test]
    fn shift_beyond_horizon_rejected() {
        let (.., codec) = setup();
        assert!(codec.shift_matrix(65).is_err());
    }

    #[test]
    fn margins_quarter_turn_codec() {
        // Codes at angle pi/2: (0,1), (-1,0), (0,-1). Worst competitor is the
        // orthogonal neighbour, so both margins equal 1 - cos(pi/2) = 1.
        let codec = PositionalCodec::new(2, vec![PI / 2.0], 3).unwrap();
        let m = margins(&codec, &[0]).unwrap();
        let brute = {
            let mut best = f64::INFINITY;
            for i in 1..=3i64 {
                for j in 1..=3i64 {
                    if i != j {
                        let (a, b) = ((i as f64) * PI / 2.0, (j as f64) * PI / 2.0);
                        best = best.min(1.0 - (a.cos() * b.cos() + a.sin() * b.sin()));
                    }
                }
            }
            best
        };
        assert!((m.delta_pos - brute).abs() < 1e-15);
        assert!((m.delta_pos - 1.0).abs() < 1e-15);
        assert!((m.delta_bos - 1.0).abs() < 1e-15);
    }

    #[test]
    fn margins_reject_short_horizon() {
        let codec = PositionalCodec::with_default_angles(16, 1).unwrap();
        assert!(matches!(margins(&codec, &[0]), Err(Error::Range(_))));
    }

    #[test]
    fn margins_reject_periodic_codec() {
        // Period 4: position 5 collides with position 1.
        let codec = PositionalCodec::new(2, vec![PI / 2.0], 5).unwrap();
        assert!(matches!(margins(&codec, &[0]), Err(Error::CodecUnsound(_))));
    }

    #[test]
    fn default_codec_margins_golden() {
        let codec = PositionalCodec::with_default_angles(16, 64).unwrap();
        let m = margins(&codec, &[0]).unwrap();
        assert!((m.delta_pos - DEFAULT_DELTA_POS).abs() < 1e-12, "{}", m.delta_pos);
        assert!((m.delta_bos - DEFAULT_DELTA_BOS).abs() < 1e-12, "{}", m.delta_bos);
    }

    // Recorded from an exhaustive scan of the default codec (d_PE = 16, T_max = 64).
    const DEFAULT_DELTA_POS: f64 = 0.567_915_071_181_711_4;
    const DEFAULT_DELTA_BOS: f64 = 0.567_915_071_181_716_7;

    proptest! {
        #[test]
        fn shift_matches_position_arithmetic(i in 1usize..=64, l in 0usize..=64) {
            let codec = PositionalCodec::with_default_angles(16, 64).unwrap();
            prop_assume!(i + l <= 64);
            let moved = codec.shift_matrix(l).unwrap().matvec(&codec.pos(i).unwrap());
            prop_assert!(max_abs_diff(&moved, &codec.pos(i + l).unwrap()) <= 1e-12);
        }

        #[test]
        fn accepted_codecs_have_positive_margins(d_half in 1usize..=8, t in 2usize..=40, l in 0usize..4) {
            let codec = PositionalCodec::with_default_angles(2 * d_half, t).unwrap();
            if let Ok(m) = margins(&codec, &[l]) {
                prop_assert!(m.delta_pos > 0.0 && m.delta_bos > 0.0);
            }
        }
    }
}
