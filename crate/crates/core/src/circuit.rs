//! Layered causal transformer runtime with block-targeted residual writes.
//!
//! Each layer reads the residual stream `X`, runs every head on `X`, and adds
//! the outputs back in: block-targeted heads add into their block, the rest
//! add to the whole vector. MLP and LayerNorm are identity unless a layer sets
//! an explicit post map.
//!
//! Serialized form (JSON): `{"layout": {...}, "layers": [{"heads": [...],
//! "post": {...}}], "readout": {"w_out": {...}, "mode": {...}}}`. Matrices are
//! `{"rows", "cols", "data"}` with `data` row-major; head kinds appear as
//! `"kind": "hard" | "softmax" | "linear"` with `beta` for softmax.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::attention::{HeadSpec, WriteTarget};
use crate::embedding::{BlockLayout, PositionalCodec};
use crate::error::{Error, Result};
use crate::linalg::{argmax, softmax, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PostOp {
    Identity,
    /// `x <- W x + b`, then optional layer normalization.
    Affine { w: Matrix, b: Vec<f64>, layer_norm: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub heads: Vec<HeadSpec>,
    pub post: PostOp,
}

impl LayerSpec {
    pub fn new(heads: Vec<HeadSpec>) -> Self {
        Self { heads, post: PostOp::Identity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Probabilities,
    /// Emit `positive` iff its score is at least `theta`; ties go to `positive`.
    Threshold { theta: f64, positive: usize, negative: usize },
    Argmax,
    RawLatent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutSpec {
    /// `V x d`; row `v` is token `v`'s identity embedding placed in the id block.
    pub w_out: Matrix,
    pub mode: DecodeMode,
}

impl ReadoutSpec {
    /// Readout whose rows read the identity block.
    pub fn identity_rows(layout: &BlockLayout, mode: DecodeMode) -> Self {
        let mut w_out = Matrix::zeros(layout.d_te, layout.d());
        for v in 0..layout.d_te {
            w_out.set(v, layout.id().start + v, 1.0);
        }
        Self { w_out, mode }
    }

    pub fn scores(&self, v: &[f64]) -> Vec<f64> {
        self.w_out.matvec(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Distribution(Vec<f64>),
    Token(usize),
    Latent(Vec<f64>),
}

pub fn decode(readout: &ReadoutSpec, v: &[f64]) -> Decoded {
    match readout.mode {
        DecodeMode::Probabilities => Decoded::Distribution(softmax(&readout.scores(v), 1.0)),
        DecodeMode::Threshold { theta, positive, negative } => {
            let s = readout.scores(v)[positive];
            Decoded::Token(if s >= theta { positive } else { negative })
        }
        DecodeMode::Argmax => Decoded::Token(argmax(&readout.scores(v))),
        DecodeMode::RawLatent => Decoded::Latent(v.to_vec()),
    }
}

/// Argmax over a subset of tokens; the earliest entry of `tokens` wins ties.
pub fn decode_among(readout: &ReadoutSpec, v: &[f64], tokens: &[usize]) -> usize {
    let s = readout.scores(v);
    let picked: Vec<f64> = tokens.iter().map(|&t| s[t]).collect();
    tokens[argmax(&picked)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitSpec {
    pub layout: BlockLayout,
    pub layers: Vec<LayerSpec>,
    pub readout: ReadoutSpec,
}

impl CircuitSpec {
    pub fn new(layout: BlockLayout, layers: Vec<LayerSpec>, readout: ReadoutSpec) -> Result<Self> {
        let c = Self { layout, layers, readout };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.layout.d();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut blocks = HashSet::new();
            for h in &layer.heads {
                h.validate()?;
                if h.d() != d {
                    return Err(Error::Config(format!("layer {l} head {}: width {} != {d}", h.name, h.d())));
                }
                match h.write {
                    WriteTarget::AdditiveWhole => {
                        if h.out_dim() != d {
                            return Err(Error::Config(format!("layer {l} head {}: W_O must have {d} rows", h.name)));
                        }
                    }
                    WriteTarget::Block { block } => {
                        if block >= self.layout.block_count() {
                            return Err(Error::Config(format!("layer {l} head {}: no block {block}", h.name)));
                        }
                        if h.out_dim() != self.layout.block_width(block) {
                            return Err(Error::Config(format!(
                                "layer {l} head {}: W_O rows {} != block width {}",
                                h.name,
                                h.out_dim(),
                                self.layout.block_width(block)
                            )));
                        }
                        if !blocks.insert(block) {
                            return Err(Error::Config(format!(
                                "layer {l}: block {block} written by more than one head"
                            )));
                        }
                    }
                }
            }
            if let PostOp::Affine { w, b, .. } = &layer.post {
                if w.rows != d || w.cols != d || b.len() != d {
                    return Err(Error::Config(format!("layer {l}: post map must be {d}x{d}")));
                }
            }
        }
        if self.readout.w_out.cols != d {
            return Err(Error::Config("readout width mismatch".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

fn layer_norm(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

/// Residual stream after every layer, at every position.
pub fn forward_all(circuit: &CircuitSpec, seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if seq.is_empty() {
        return Err(Error::Argument("empty sequence".into()));
    }
    let d = circuit.layout.d();
    if let Some(x) = seq.iter().find(|x| x.len() != d) {
        return Err(Error::Shape(format!("input width {} != {d}", x.len())));
    }
    let mut x: Vec<Vec<f64>> = seq.to_vec();
    for layer in &circuit.layers {
        let mut next = x.clone();
        for head in &layer.heads {
            let outs = head.forward(&x)?;
            for (row, out) in next.iter_mut().zip(&outs) {
                match head.write {
                    WriteTarget::AdditiveWhole => {
                        row.iter_mut().zip(out).for_each(|(r, o)| *r += o);
                    }
                    WriteTarget::Block { block } => {
                        let range = circuit.layout.block_range(block);
                        row[range].iter_mut().zip(out).for_each(|(r, o)| *r += o);
                    }
                }
            }
        }
        if let PostOp::Affine { w, b, layer_norm: ln } = &layer.post {
            for row in next.iter_mut() {
                let mut y = w.matvec(row);
                y.iter_mut().zip(b).for_each(|(v, c)| *v += c);
                if *ln {
                    layer_norm(&mut y);
                }
                *row = y;
            }
        }
        x = next;
    }
    Ok(x)
}

/// `h_t^{(L)}`: the final residual at the last position.
pub fn forward_pass(circuit: &CircuitSpec, seq: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(forward_all(circuit, seq)?.pop().expect("nonempty"))
}

/// Continuous-thought rollout: append each output, with the positional block
/// overwritten by the code of its new slot, and run again.
pub fn autoregress_continuous(
    circuit: &CircuitSpec,
    codec: &PositionalCodec,
    prompt: &[Vec<f64>],
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::Argument("steps must be at least 1".into()));
    }
    if prompt.len() + steps > codec.t_max {
        return Err(Error::Range(format!(
            "prompt {} + steps {steps} exceeds T_max {}",
            prompt.len(),
            codec.t_max
        )));
    }
    let mut seq = prompt.to_vec();
    let mut produced = Vec::with_capacity(steps);
    for _ in 0..steps {
        let h = forward_pass(circuit, &seq)?;
        let mut next = h.clone();
        circuit.layout.write_block(&mut next, circuit.layout.pos_block(), &codec.pos(seq.len() + 1)?);
        seq.push(next);
        produced.push(h);
    }
    Ok(produced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::embedding::{embed_token, EmbeddingTable, VocabSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (EmbeddingTable, BlockLayout, PositionalCodec) {
        let table = EmbeddingTable::new(VocabSpec::new(["q0", "q1", "x"]).unwrap());
        let layout = BlockLayout::new(3, 1, 4);
        let codec = PositionalCodec::with_default_angles(4, 16).unwrap();
        (table, layout, codec)
    }

    fn self_head(layout: &BlockLayout) -> HeadSpec {
        // Query and key both read the positional block, so position t scores
        // itself highest; value and output are identities on the full vector.
        let d = layout.d();
        let mut w = Matrix::zeros(layout.d_pe, d);
        for (r, c) in layout.pos().enumerate() {
            w.set(r, c, 1.0);
        }
        HeadSpec::new(
            "self",
            w.clone(),
            w,
            Matrix::identity(d),
            Matrix::identity(d),
            AttentionKind::Hard,
            WriteTarget::AdditiveWhole,
        )
        .unwrap()
    }

    fn seq(table: &EmbeddingTable, layout: &BlockLayout, codec: &PositionalCodec) -> Vec<Vec<f64>> {
        ["x", "q0", "q1"]
            .iter()
            .enumerate()
            .map(|(i, t)| embed_token(table, layout, codec, t, i + 1).unwrap())
            .collect()
    }

    #[test]
    fn zero_layers_return_last_input() {
        let (table, layout, codec) = tiny();
        let c = CircuitSpec::new(layout, vec![], ReadoutSpec::identity_rows(&layout, DecodeMode::Argmax)).unwrap();
        let s = seq(&table, &layout, &codec);
        assert_eq!(forward_pass(&c, &s).unwrap(), s[2]);
    }

    #[test]
    fn self_routing_head_doubles_input() {
        let (table, layout, codec) = tiny();
        let c = CircuitSpec::new(
            layout,
            vec![LayerSpec::new(vec![self_head(&layout)])],
            ReadoutSpec::identity_rows(&layout, DecodeMode::Argmax),
        )
        .unwrap();
        let s = seq(&table, &layout, &codec);
        let out = forward_pass(&c, &s).unwrap();
        let doubled: Vec<f64> = s[2].iter().map(|v| 2.0 * v).collect();
        assert_eq!(out, doubled);
    }

    #[test]
    fn block_collisions_rejected() {
        let (_, layout, _) = tiny();
        let mut h = self_head(&layout);
        h.w_o = Matrix::zeros(layout.d_te, layout.d());
        h.write = WriteTarget::Block { block: 1 };
        let err = CircuitSpec::new(
            layout,
            vec![LayerSpec::new(vec![h.clone(), h])],
            ReadoutSpec::identity_rows(&layout, DecodeMode::Argmax),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn decode_modes() {
        let (table, layout, codec) = tiny();
        let v = embed_token(&table, &layout, &codec, "q1", 2).unwrap();
        let r = ReadoutSpec::identity_rows(&layout, DecodeMode::Argmax);
        assert_eq!(decode(&r, &v), Decoded::Token(1));
        let mut half = vec![0.0; layout.d()];
        half[0] = 0.5;
        half[1] = 0.5;
        let r = ReadoutSpec::identity_rows(&layout, DecodeMode::Threshold { theta: 0.5, positive: 1, negative: 0 });
        assert_eq!(decode(&r, &half), Decoded::Token(1));
        let r = ReadoutSpec::identity_rows(&layout, DecodeMode::Argmax);
        assert_eq!(decode(&r, &half), Decoded::Token(0));
        let r = ReadoutSpec::identity_rows(&layout, DecodeMode::RawLatent);
        assert_eq!(decode(&r, &half), Decoded::Latent(half.clone()));
        let r = ReadoutSpec::identity_rows(&layout, DecodeMode::Probabilities);
        match decode(&r, &half) {
            Decoded::Distribution(p) => {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!((p[0] - p[1]).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
    }

    fn random_circuit(layout: &BlockLayout, rng: &mut ChaCha8Rng) -> CircuitSpec {
        let d = layout.d();
        let mut m = |r: usize, c: usize, s: f64| {
            let mut x = Matrix::zeros(r, c);
            x.data.iter_mut().for_each(|v| *v = rng.random_range(-s..s));
            x
        };
        let h1 = HeadSpec::new("a", m(4, d, 1.0), m(4, d, 1.0), m(3, d, 0.3), m(3, 3, 0.3), AttentionKind::Softmax { beta: 1.0 }, WriteTarget::Block { block: 1 }).unwrap();
        let h2 = HeadSpec::new("b", m(2, d, 1.0), m(2, d, 1.0), m(2, d, 0.3), m(d, 2, 0.3), AttentionKind::Linear, WriteTarget::AdditiveWhole).unwrap();
        let h3 = HeadSpec::new("c", m(2, d, 1.0), m(2, d, 1.0), m(3, d, 0.3), m(3, 3, 0.3), AttentionKind::Hard, WriteTarget::Block { block: 0 }).unwrap();
        CircuitSpec::new(
            *layout,
            vec![LayerSpec::new(vec![h1, h3]), LayerSpec::new(vec![h2])],
            ReadoutSpec::identity_rows(layout, DecodeMode::RawLatent),
        )
        .unwrap()
    }

    #[test]
    fn single_step_equals_forward_pass() {
        let (table, layout, codec) = tiny();
        let c = random_circuit(&layout, &mut ChaCha8Rng::seed_from_u64(3));
        let s = seq(&table, &layout, &codec);
        let got = autoregress_continuous(&c, &codec, &s, 1).unwrap();
        assert_eq!(got[0], forward_pass(&c, &s).unwrap());
    }

    #[test]
    fn autoregress_matches_manual_chain() {
        let (table, layout, codec) = tiny();
        let c = random_circuit(&layout, &mut ChaCha8Rng::seed_from_u64(4));
        let s = seq(&table, &layout, &codec);
        let got = autoregress_continuous(&c, &codec, &s, 3).unwrap();
        let mut manual = s.clone();
        for g in &got {
            let h = forward_pass(&c, &manual).unwrap();
            assert_eq!(&h, g);
            let mut next = h;
            next[layout.pos()].copy_from_slice(&codec.pos(manual.len() + 1).unwrap());
            manual.push(next);
        }
    }

    #[test]
    fn autoregress_checks_horizon() {
        let (table, layout, codec) = tiny();
        let c = random_circuit(&layout, &mut ChaCha8Rng::seed_from_u64(5));
        let s = seq(&table, &layout, &codec);
        assert!(matches!(autoregress_continuous(&c, &codec, &s, 14), Err(Error::Range(_))));
        assert!(autoregress_continuous(&c, &codec, &s, 0).is_err());
    }

    #[test]
    fn head_order_within_layer_is_irrelevant() {
        let (table, layout, codec) = tiny();
        let mut c = random_circuit(&layout, &mut ChaCha8Rng::seed_from_u64(6));
        let s = seq(&table, &layout, &codec);
        let a = forward_pass(&c, &s).unwrap();
        c.layers[0].heads.reverse();
        let b = forward_pass(&c, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (table, layout, codec) = tiny();
        let c = random_circuit(&layout, &mut ChaCha8Rng::seed_from_u64(7));
        let back = CircuitSpec::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        let s = seq(&table, &layout, &codec);
        assert_eq!(forward_pass(&back, &s).unwrap(), forward_pass(&c, &s).unwrap());
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let (table, layout, codec) = tiny();
        let c = random_circuit(&layout, &mut ChaCha8Rng::seed_from_u64(8));
        let s = seq(&table, &layout, &codec);
        let a = forward_all(&c, &s).unwrap();
        let b = forward_all(&c, &s).unwrap();
        assert_eq!(a, b);
    }
}
