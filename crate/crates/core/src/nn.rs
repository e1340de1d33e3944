//! Transformer building blocks on top of the gradient tape.

use pht_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Additive logit for masked attention positions.
pub const MASK_VALUE: f64 = -1e9;

/// Forward-pass mode. Dropout is active only when a generator is present.
pub struct Ctx<'r> {
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Ctx<'r> {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, tape: &mut Tape<'_>, x: Var, rate: f64) -> Result<Var> {
        Ok(tape.dropout(x, rate, self.rng.as_deref_mut())?)
    }
}

/// Sinusoidal encoding of one position.
pub fn sinusoid(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Stacked encodings for the given positions, shape `(positions.len(), dim)`.
pub fn sinusoid_table(positions: &[usize], dim: usize) -> Tensor {
    let data = positions.iter().flat_map(|&p| sinusoid(p, dim)).collect();
    Tensor::new(vec![positions.len(), dim], data).expect("non-empty positions")
}

pub(crate) fn init_param<R: Rng>(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut R) -> Result<ParamId> {
    Ok(store.add(name, Tensor::xavier_uniform(shape.to_vec(), rng)?)?)
}

pub(crate) fn const_param(store: &mut ParamStore, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
    Ok(store.add(name, Tensor::full(shape.to_vec(), value)?)?)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = init_param(store, &format!("{name}.weight"), &[input, output], rng)?;
        let bias = if bias {
            Some(const_param(store, &format!("{name}.bias"), &[output], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = store.bind(tape, b);
                Ok(tape.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: const_param(store, &format!("{name}.gain"), &[dim], 1.0)?,
            bias: const_param(store, &format!("{name}.bias"), &[dim], 0.0)?,
            eps,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let g = store.bind(tape, self.gain);
        let b = store.bind(tape, self.bias);
        Ok(tape.layer_norm(x, g, b, self.eps)?)
    }
}

/// Two-layer ReLU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, true, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, true, rng)?,
            dropout,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = ctx.dropout(tape, h, self.dropout)?;
        self.outer.forward(tape, store, h)
    }
}

/// Scaled dot-product multi-head attention.
///
/// Queries have shape `(.., Lq, d)` and keys/values `(.., Lk, d)`; leading
/// dimensions broadcast, so one query sequence can attend to a batch of
/// key sequences. The additive mask must broadcast to `(.., heads, Lq, Lk)`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dropout: f64,
}

pub struct AttentionOutput {
    pub context: Var,
    /// Attention probabilities, shape `(.., heads, Lq, Lk)`.
    pub probs: Var,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng)?,
            heads,
            dropout,
        })
    }

    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        queries: Var,
        keys: Var,
        mask: Option<Var>,
        ctx: &mut Ctx<'_>,
    ) -> Result<AttentionOutput> {
        let q = self.query.forward(tape, store, queries)?;
        let k = self.key.forward(tape, store, keys)?;
        let v = self.value.forward(tape, store, keys)?;
        let q = split_heads(tape, q, self.heads)?;
        let k = split_heads(tape, k, self.heads)?;
        let v = split_heads(tape, v, self.heads)?;
        let dh = *tape.shape(q).last().expect("rank >= 3");
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let rank = tape.shape(scores).len();
        let probs = tape.softmax(scores, rank - 1)?;
        let dropped = ctx.dropout(tape, probs, self.dropout)?;
        let ctxv = tape.matmul(dropped, v)?;
        let merged = merge_heads(tape, ctxv)?;
        let context = self.output.forward(tape, store, merged)?;
        Ok(AttentionOutput { context, probs })
    }
}

/// `(.., L, d)` to `(.., heads, L, d / heads)`.
pub fn split_heads(tape: &mut Tape<'_>, x: Var, heads: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = shape.len();
    let (l, d) = (shape[r - 2], shape[r - 1]);
    let mut s = shape[..r - 2].to_vec();
    s.extend([l, heads, d / heads]);
    let x = tape.reshape(x, &s)?;
    let mut axes: Vec<usize> = (0..r + 1).collect();
    axes.swap(r - 2, r - 1);
    Ok(tape.permute(x, &axes)?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = shape.len();
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 3, r - 2);
    let x = tape.permute(x, &axes)?;
    let mut s = shape[..r - 3].to_vec();
    s.extend([shape[r - 2], shape[r - 3] * shape[r - 1]]);
    Ok(tape.reshape(x, &s)?)
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
    pub dropout: f64,
}

pub struct LayerRates {
    pub attention: f64,
    pub residual: f64,
    pub ffn: f64,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        heads: usize,
        rates: &LayerRates,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rates.attention, rng)?,
            attention_norm: LayerNorm::new(store, &format!("{name}.self_attn_norm"), dim, eps)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rates.ffn, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim, eps)?,
            dropout: rates.residual,
        })
    }

    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        mask: Option<Var>,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let a = self.attention.forward(tape, store, x, x, mask, ctx)?.context;
        let a = ctx.dropout(tape, a, self.dropout)?;
        let x = tape.add(x, a)?;
        let x = self.attention_norm.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, x, ctx)?;
        let f = ctx.dropout(tape, f, self.dropout)?;
        let x = tape.add(x, f)?;
        self.ffn_norm.forward(tape, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn position_zero_alternates() {
        let e = sinusoid(0, 6);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn heads_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let s = split_heads(&mut tape, x, 2).unwrap();
        assert_eq!(tape.shape(s), &[2, 2, 3, 2]);
        // head 1 of batch 0, position 2 holds dims 2..4 of row 2
        let t = tape.to_tensor(s);
        assert_eq!(t.get(&[0, 1, 2, 0]), 10.0);
        let m = merge_heads(&mut tape, s).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }

    #[test]
    fn attention_rows_sum_to_one_under_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, 0.0, &mut rng).unwrap();
        let mut tape = Tape::inference();
        let q = tape.constant(Tensor::xavier_uniform(vec![3, 4], &mut rng).unwrap());
        let k = tape.constant(Tensor::xavier_uniform(vec![2, 5, 4], &mut rng).unwrap());
        let mask = tape.constant(
            Tensor::new(
                vec![2, 1, 1, 5],
                vec![0.0, 0.0, MASK_VALUE, 0.0, MASK_VALUE, 0.0, 0.0, 0.0, 0.0, 0.0],
            )
            .unwrap(),
        );
        let out = mha
            .forward(&mut tape, &store, q, k, Some(mask), &mut Ctx::eval())
            .unwrap();
        assert_eq!(tape.shape(out.probs), &[2, 2, 3, 5]);
        assert_eq!(tape.shape(out.context), &[2, 3, 4]);
        let p = tape.to_tensor(out.probs);
        for r in 0..p.rows() {
            let row = p.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // masked keys of batch 0 receive no mass
        for h in 0..2 {
            for i in 0..3 {
                assert_eq!(p.get(&[0, h, i, 2]), 0.0);
                assert_eq!(p.get(&[0, h, i, 4]), 0.0);
            }
        }
    }
}
