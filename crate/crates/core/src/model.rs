//! The parallel hierarchical transformer.
//!
//! A shared encoder contextualises each paragraph independently, attention
//! pooling reduces every paragraph to one embedding, and a rank encoding is
//! added to those embeddings. Each decoder layer runs causal self-attention,
//! then paragraph-level and word-level cross-attention side by side; the
//! per-paragraph word contexts are mixed with the paragraph attention
//! weights of the same layer before the residual sum.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use pht_tensor::{checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, ModelSidecar};
use crate::error::{Error, Result};
use crate::nn::{
    init_param, merge_heads, sinusoid_table, split_heads, Ctx, EncoderLayer, FeedForward, LayerNorm, LayerRates,
    Linear, MultiHeadAttention, MASK_VALUE,
};
use crate::vocab::{BOS, EOS};

/// Model input: paragraphs in storage order, each carrying its rank.
#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub paragraphs: Vec<Vec<usize>>,
    pub ranks: Vec<usize>,
}

impl Source {
    /// Paragraphs ranked by position.
    pub fn new(paragraphs: Vec<Vec<usize>>) -> Self {
        let ranks = (0..paragraphs.len()).collect();
        Self { paragraphs, ranks }
    }

    pub fn with_ranks(paragraphs: Vec<Vec<usize>>, ranks: Vec<usize>) -> Result<Self> {
        if paragraphs.len() != ranks.len() {
            return Err(Error::Contract(format!(
                "{} paragraphs but {} ranks",
                paragraphs.len(),
                ranks.len()
            )));
        }
        Ok(Self { paragraphs, ranks })
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    /// Keeps only the paragraphs at `indices`, preserving their ranks.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            paragraphs: indices.iter().map(|&i| self.paragraphs[i].clone()).collect(),
            ranks: indices.iter().map(|&i| self.ranks[i]).collect(),
        }
    }
}

/// Encoder output for one source, detached from any tape.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    /// Token contexts, shape `(m, n, d)`; rows past a paragraph's length are padding.
    pub word_contexts: Tensor,
    /// Paragraph embeddings with rank encodings added, shape `(m, d)`.
    pub paragraph_embeddings: Tensor,
    pub token_lengths: Vec<usize>,
}

impl EncodedSource {
    pub fn num_paragraphs(&self) -> usize {
        self.token_lengths.len()
    }

    /// Padded paragraph length.
    pub fn width(&self) -> usize {
        self.word_contexts.shape()[1]
    }

    /// Paragraphs that hold at least one token.
    pub fn paragraph_mask(&self) -> Vec<bool> {
        self.token_lengths.iter().map(|&l| l > 0).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Shape `(k, vocab)`.
    pub logits: Tensor,
    /// Head-averaged paragraph attention of each layer, each `(k, m)`.
    pub layer_attention: Vec<Tensor>,
    /// Sum of `layer_attention` over layers.
    pub attention_sum: Tensor,
    /// Layer-averaged attention over every source token, `(k, m * n)`:
    /// word-level weights scaled by the paragraph weight of their paragraph.
    pub token_attention: Tensor,
}

/// Next-token distribution and attention for the last prefix position.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub log_probs: Vec<f64>,
    /// Layer-averaged paragraph attention, length `m`.
    pub paragraph_attention: Vec<f64>,
    /// Layer-averaged source-token attention, length `m * n`.
    pub token_attention: Vec<f64>,
}

#[derive(Clone, Debug)]
struct AttentionPooling {
    project: Linear,
    score: ParamId,
    combine: Linear,
    ffn: FeedForward,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attention: MultiHeadAttention,
    self_norm: LayerNorm,
    paragraph_attention: MultiHeadAttention,
    word_attention: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
    dropout: f64,
}

/// Encoder values placed on a tape.
struct SourceVars {
    contexts: Var,
    phi: Var,
    token_mask: Var,
    paragraph_mask: Var,
    width: usize,
}

struct DecodeVars {
    hidden: Var,
    paragraph_attention: Vec<Var>,
    word_attention: Vec<Var>,
    #[cfg_attr(not(test), allow(dead_code))]
    word_context: Vec<Var>,
    #[cfg_attr(not(test), allow(dead_code))]
    fused: Vec<Var>,
}

pub struct Pht {
    config: ModelConfig,
    params: ParamStore,
    embedding: ParamId,
    encoder: Vec<EncoderLayer>,
    pooling: AttentionPooling,
    decoder: Vec<DecoderLayer>,
    truncations: AtomicUsize,
}

impl Pht {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, f, h, eps) = (
            config.model_dim,
            config.ffn_dim,
            config.num_heads,
            config.layer_norm_eps,
        );
        let rates = LayerRates {
            attention: config.dropout_attention,
            residual: config.dropout_residual,
            ffn: config.dropout_ffn,
        };
        let embedding = init_param(&mut params, "embedding", &[config.vocab_size, d], &mut rng)?;
        let encoder = (0..config.num_layers)
            .map(|i| EncoderLayer::new(&mut params, &format!("encoder.{i}"), d, f, h, &rates, eps, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let pooling = AttentionPooling {
            project: Linear::new(&mut params, "pool.project", d, d, false, &mut rng)?,
            score: init_param(&mut params, "pool.score", &[d / h, 1], &mut rng)?,
            combine: Linear::new(&mut params, "pool.combine", d, d, false, &mut rng)?,
            ffn: FeedForward::new(&mut params, "pool.ffn", d, f, rates.ffn, &mut rng)?,
            norm: LayerNorm::new(&mut params, "pool.norm", d, eps)?,
        };
        let decoder = (0..config.num_layers)
            .map(|i| -> Result<DecoderLayer> {
                let p = format!("decoder.{i}");
                Ok(DecoderLayer {
                    self_attention: MultiHeadAttention::new(
                        &mut params,
                        &format!("{p}.self_attn"),
                        d,
                        h,
                        rates.attention,
                        &mut rng,
                    )?,
                    self_norm: LayerNorm::new(&mut params, &format!("{p}.self_norm"), d, eps)?,
                    paragraph_attention: MultiHeadAttention::new(
                        &mut params,
                        &format!("{p}.para_attn"),
                        d,
                        h,
                        rates.attention,
                        &mut rng,
                    )?,
                    word_attention: MultiHeadAttention::new(
                        &mut params,
                        &format!("{p}.word_attn"),
                        d,
                        h,
                        rates.attention,
                        &mut rng,
                    )?,
                    cross_norm: LayerNorm::new(&mut params, &format!("{p}.cross_norm"), d, eps)?,
                    ffn: FeedForward::new(&mut params, &format!("{p}.ffn"), d, f, rates.ffn, &mut rng)?,
                    ffn_norm: LayerNorm::new(&mut params, &format!("{p}.ffn_norm"), d, eps)?,
                    dropout: rates.residual,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params,
            embedding,
            encoder,
            pooling,
            decoder,
            truncations: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of paragraphs or tokens dropped by input truncation so far.
    pub fn truncation_count(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }

    fn check_ids(&self, ids: &[usize], what: &str) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(bad) => Err(Error::Input(format!(
                "{what} contains id {bad} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Applies the paragraph-count and length limits, counting what is dropped.
    fn fit_source(&self, source: &Source) -> Result<Source> {
        if source.paragraphs.len() != source.ranks.len() {
            return Err(Error::Contract("paragraph and rank counts differ".into()));
        }
        if source.is_empty() {
            return Err(Error::Input("source has no paragraphs".into()));
        }
        let (m, n) = (self.config.max_paragraphs, self.config.max_paragraph_len);
        let mut fitted = source.clone();
        if fitted.len() > m {
            log::warn!("source has {} paragraphs; keeping the first {m}", fitted.len());
            self.truncations.fetch_add(fitted.len() - m, Ordering::Relaxed);
            fitted.paragraphs.truncate(m);
            fitted.ranks.truncate(m);
        }
        for p in &mut fitted.paragraphs {
            self.check_ids(p, "paragraph")?;
            if p.len() > n {
                log::warn!("paragraph of {} tokens truncated to {n}", p.len());
                self.truncations.fetch_add(1, Ordering::Relaxed);
                p.truncate(n);
            }
        }
        if fitted.paragraphs.iter().all(Vec::is_empty) {
            return Err(Error::Input("every paragraph is empty".into()));
        }
        Ok(fitted)
    }

    fn embed<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, ids: &[usize]) -> Result<Var> {
        let table = store.bind(tape, self.embedding);
        let e = tape.embedding(table, ids)?;
        Ok(tape.scale(e, (self.config.model_dim as f64).sqrt()))
    }

    fn encode_on<'a>(&'a self, tape: &mut Tape<'a>, source: &Source, ctx: &mut Ctx<'_>) -> Result<SourceVars> {
        let d = self.config.model_dim;
        let m = source.len();
        let n = source.paragraphs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(m * n);
        let mut mask = Vec::with_capacity(m * n);
        let mut keep = Vec::with_capacity(m);
        for p in &source.paragraphs {
            for j in 0..n {
                ids.push(p.get(j).copied().unwrap_or(crate::vocab::PAD));
                mask.push(if j < p.len() { 0.0 } else { MASK_VALUE });
            }
            keep.push(if p.is_empty() { 0.0 } else { 1.0 });
        }
        let token_mask = tape.constant(Tensor::new(vec![m, 1, 1, n], mask.clone())?);
        let para_mask = tape.constant(Tensor::new(
            vec![1, m],
            keep.iter().map(|&k| if k > 0.0 { 0.0 } else { MASK_VALUE }).collect(),
        )?);

        let x = self.embed(tape, &self.params, &ids)?;
        let x = tape.reshape(x, &[m, n, d])?;
        let pos = tape.constant(sinusoid_table(&(0..n).collect::<Vec<_>>(), d));
        let x = tape.add(x, pos)?;
        let mut x = ctx.dropout(tape, x, self.config.dropout_residual)?;
        for layer in &self.encoder {
            x = layer.forward(tape, &self.params, x, Some(token_mask), ctx)?;
        }
        let contexts = x;

        let keep = tape.constant(Tensor::new(vec![m, 1], keep)?);
        let pool_mask = tape.constant(Tensor::new(vec![m, 1, n, 1], mask)?);
        let phi = self.pool_on(tape, contexts, pool_mask, keep, ctx)?;
        let ranks = tape.constant(sinusoid_table(&source.ranks, d));
        let phi = tape.add(phi, ranks)?;

        Ok(SourceVars {
            contexts,
            phi,
            token_mask,
            paragraph_mask: para_mask,
            width: n,
        })
    }

    /// Attention pooling of `(m, n, d)` contexts into `(m, d)` embeddings;
    /// `keep` zeroes paragraphs without tokens.
    fn pool_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        contexts: Var,
        mask: Var,
        keep: Var,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let shape = tape.shape(contexts).to_vec();
        let (m, d) = (shape[0], shape[2]);
        let pool = &self.pooling;
        let projected = pool.project.forward(tape, &self.params, contexts)?;
        let split = split_heads(tape, projected, self.config.num_heads)?; // (m, H, n, dh)
        let w = self.params.bind(tape, pool.score);
        let scores = tape.matmul(split, w)?; // (m, H, n, 1)
        let scores = tape.add(scores, mask)?;
        let weights = tape.softmax(scores, 2)?;
        let weights_t = tape.transpose(weights)?; // (m, H, 1, n)
        let pooled = tape.matmul(weights_t, split)?; // (m, H, 1, dh)
        let pooled = merge_heads(tape, pooled)?; // (m, 1, d)
        let pooled = tape.reshape(pooled, &[m, d])?;
        let phi = pool.combine.forward(tape, &self.params, pooled)?;
        let ff = pool.ffn.forward(tape, &self.params, phi, ctx)?;
        let ff = ctx.dropout(tape, ff, self.config.dropout_residual)?;
        let phi = tape.add(phi, ff)?;
        let phi = pool.norm.forward(tape, &self.params, phi)?;
        Ok(tape.mul(phi, keep)?)
    }

    /// Pools one paragraph's token contexts (one row per token) into its
    /// embedding, before any rank encoding.
    pub fn pool_paragraph(&self, contexts: &[Vec<f64>]) -> Result<Vec<f64>> {
        let d = self.config.model_dim;
        if contexts.is_empty() {
            return Err(Error::Contract("cannot pool an empty paragraph".into()));
        }
        if contexts.iter().any(|r| r.len() != d) {
            return Err(Error::Contract(format!("context rows must have {d} values")));
        }
        let n = contexts.len();
        let mut tape = Tape::inference();
        let c = tape.constant(Tensor::new(vec![1, n, d], contexts.concat())?);
        let mask = tape.constant(Tensor::zeros(vec![1, 1, n, 1])?);
        let keep = tape.constant(Tensor::ones(vec![1, 1])?);
        let phi = self.pool_on(&mut tape, c, mask, keep, &mut Ctx::eval())?;
        Ok(tape.value(phi).to_vec())
    }

    fn source_vars_from(&self, tape: &mut Tape<'_>, enc: &EncodedSource) -> Result<SourceVars> {
        let m = enc.num_paragraphs();
        let n = enc.width();
        let mut mask = Vec::with_capacity(m * n);
        for &len in &enc.token_lengths {
            mask.extend((0..n).map(|j| if j < len { 0.0 } else { MASK_VALUE }));
        }
        let para = enc
            .token_lengths
            .iter()
            .map(|&l| if l > 0 { 0.0 } else { MASK_VALUE })
            .collect();
        Ok(SourceVars {
            contexts: tape.constant(enc.word_contexts.clone()),
            phi: tape.constant(enc.paragraph_embeddings.clone()),
            token_mask: tape.constant(Tensor::new(vec![m, 1, 1, n], mask)?),
            paragraph_mask: tape.constant(Tensor::new(vec![1, m], para)?),
            width: n,
        })
    }

    fn decode_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        prefix: &[usize],
        src: &SourceVars,
        ctx: &mut Ctx<'_>,
    ) -> Result<DecodeVars> {
        let d = self.config.model_dim;
        let k = prefix.len();
        if k == 0 {
            return Err(Error::Input("empty decoder prefix".into()));
        }
        if k > self.config.max_target_len {
            return Err(Error::Input(format!(
                "prefix of {k} tokens exceeds max_target_len {}",
                self.config.max_target_len
            )));
        }
        self.check_ids(prefix, "target prefix")?;
        let m = tape.shape(src.phi)[0];

        let x = self.embed(tape, &self.params, prefix)?;
        let pos = tape.constant(sinusoid_table(&(0..k).collect::<Vec<_>>(), d));
        let x = tape.add(x, pos)?;
        let mut x = ctx.dropout(tape, x, self.config.dropout_residual)?;
        let causal = tape.constant(Tensor::new(
            vec![k, k],
            (0..k * k)
                .map(|i| if i % k > i / k { MASK_VALUE } else { 0.0 })
                .collect(),
        )?);

        let mut paragraph_attention = Vec::with_capacity(self.decoder.len());
        let mut word_attention = Vec::with_capacity(self.decoder.len());
        let mut word_context = Vec::with_capacity(self.decoder.len());
        let mut fused_all = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            // part I
            let s = layer
                .self_attention
                .forward(tape, &self.params, x, x, Some(causal), ctx)?
                .context;
            let s = ctx.dropout(tape, s, layer.dropout)?;
            let s = tape.add(x, s)?;
            let x1 = layer.self_norm.forward(tape, &self.params, s)?;

            // part II: paragraph level
            let para =
                layer
                    .paragraph_attention
                    .forward(tape, &self.params, x1, src.phi, Some(src.paragraph_mask), ctx)?;
            let a = tape.mean_axis(para.probs, 0)?; // (k, m)
                                                    // part II: word level, one attention per paragraph
            let word = layer
                .word_attention
                .forward(tape, &self.params, x1, src.contexts, Some(src.token_mask), ctx)?;
            let stacked = tape.permute(word.context, &[1, 2, 0])?; // (k, d, m)
            let weights = tape.reshape(a, &[k, m, 1])?;
            let fused = tape.matmul(stacked, weights)?;
            let fused = tape.reshape(fused, &[k, d])?;

            let xp = ctx.dropout(tape, para.context, layer.dropout)?;
            let xi = ctx.dropout(tape, fused, layer.dropout)?;
            let s = tape.add(x1, xp)?;
            let s = tape.add(s, xi)?;
            let x2 = layer.cross_norm.forward(tape, &self.params, s)?;

            // part III
            let f = layer.ffn.forward(tape, &self.params, x2, ctx)?;
            let f = ctx.dropout(tape, f, layer.dropout)?;
            let s = tape.add(x2, f)?;
            x = layer.ffn_norm.forward(tape, &self.params, s)?;

            paragraph_attention.push(a);
            word_attention.push(word.probs);
            word_context.push(word.context);
            fused_all.push(fused);
        }
        Ok(DecodeVars {
            hidden: x,
            paragraph_attention,
            word_attention,
            word_context,
            fused: fused_all,
        })
    }

    fn project_vocab<'a>(&'a self, tape: &mut Tape<'a>, hidden: Var) -> Result<Var> {
        let table = self.params.bind(tape, self.embedding);
        let t = tape.transpose(table)?;
        Ok(tape.matmul(hidden, t)?)
    }

    /// Runs the encoder in eval mode.
    pub fn encode(&self, source: &Source) -> Result<EncodedSource> {
        let source = self.fit_source(source)?;
        let mut tape = Tape::inference();
        let vars = self.encode_on(&mut tape, &source, &mut Ctx::eval())?;
        Ok(EncodedSource {
            word_contexts: tape.to_tensor(vars.contexts),
            paragraph_embeddings: tape.to_tensor(vars.phi),
            token_lengths: source.paragraphs.iter().map(Vec::len).collect(),
        })
    }

    /// Token contexts of one paragraph on its own, one row per token.
    pub fn encode_paragraph(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tokens = tokens.to_vec();
        self.check_ids(&tokens, "paragraph")?;
        if tokens.len() > self.config.max_paragraph_len {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            tokens.truncate(self.config.max_paragraph_len);
        }
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let enc = self.encode(&Source::new(vec![tokens.clone()]))?;
        let d = self.config.model_dim;
        Ok(enc
            .word_contexts
            .data()
            .chunks(d)
            .take(tokens.len())
            .map(<[f64]>::to_vec)
            .collect())
    }

    pub fn decode(&self, prefix: &[usize], enc: &EncodedSource) -> Result<DecoderOutput> {
        let mut tape = Tape::inference();
        let src = self.source_vars_from(&mut tape, enc)?;
        let out = self.decode_on(&mut tape, prefix, &src, &mut Ctx::eval())?;
        let logits = self.project_vocab(&mut tape, out.hidden)?;
        let layer_attention: Vec<Tensor> = out.paragraph_attention.iter().map(|&a| tape.to_tensor(a)).collect();
        let mut sum = vec![0.0; layer_attention[0].numel()];
        for a in &layer_attention {
            sum.iter_mut().zip(a.data()).for_each(|(s, v)| *s += v);
        }
        let token_attention = self.token_attention(&tape, &out, enc, None);
        let (k, m, n) = (prefix.len(), enc.num_paragraphs(), src.width);
        Ok(DecoderOutput {
            logits: tape.to_tensor(logits),
            attention_sum: Tensor::new(vec![k, m], sum)?,
            layer_attention,
            token_attention: Tensor::new(vec![k, m * n], token_attention)?,
        })
    }

    /// Layer-averaged source-token attention for every row, or only `row`.
    fn token_attention(&self, tape: &Tape<'_>, out: &DecodeVars, enc: &EncodedSource, row: Option<usize>) -> Vec<f64> {
        let (m, n, h) = (enc.num_paragraphs(), enc.width(), self.config.num_heads);
        let k = tape.shape(out.paragraph_attention[0])[0];
        let rows: Vec<usize> = match row {
            Some(r) => vec![r],
            None => (0..k).collect(),
        };
        let layers = out.paragraph_attention.len() as f64;
        let mut acc = vec![0.0; rows.len() * m * n];
        for (&a, &w) in out.paragraph_attention.iter().zip(&out.word_attention) {
            let a = tape.value(a); // (k, m)
            let w = tape.value(w); // (m, H, k, n)
            for (ri, &t) in rows.iter().enumerate() {
                for p in 0..m {
                    let ap = a[t * m + p] / (h as f64 * layers);
                    for head in 0..h {
                        let base = ((p * h + head) * k + t) * n;
                        let dst = &mut acc[(ri * m + p) * n..(ri * m + p + 1) * n];
                        for (o, v) in dst.iter_mut().zip(&w[base..base + n]) {
                            *o += ap * v;
                        }
                    }
                }
            }
        }
        acc
    }

    /// Next-token log-probabilities after `prefix` together with the
    /// attention of that position.
    pub fn step(&self, prefix: &[usize], enc: &EncodedSource) -> Result<StepOutput> {
        let mut tape = Tape::inference();
        let src = self.source_vars_from(&mut tape, enc)?;
        let out = self.decode_on(&mut tape, prefix, &src, &mut Ctx::eval())?;
        let k = prefix.len();
        let last = if k == 1 {
            out.hidden
        } else {
            let mut sel = vec![0.0; k];
            sel[k - 1] = 1.0;
            let sel = tape.constant(Tensor::new(vec![1, k], sel)?);
            tape.matmul(sel, out.hidden)?
        };
        let logits = self.project_vocab(&mut tape, last)?;
        let lp = tape.log_softmax(logits, 1)?;
        let m = enc.num_paragraphs();
        let layers = out.paragraph_attention.len() as f64;
        let mut para = vec![0.0; m];
        for &a in &out.paragraph_attention {
            let a = tape.value(a);
            para.iter_mut()
                .zip(&a[(k - 1) * m..k * m])
                .for_each(|(s, v)| *s += v / layers);
        }
        Ok(StepOutput {
            log_probs: tape.value(lp).to_vec(),
            paragraph_attention: para,
            token_attention: self.token_attention(&tape, &out, enc, Some(k - 1)),
        })
    }

    /// Decoder input and targets for a reference summary, clipped so the
    /// end marker fits within `max_target_len`.
    pub fn teacher_forcing(&self, summary: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let keep = summary.len().min(self.config.max_target_len - 1);
        let mut input = vec![BOS];
        input.extend_from_slice(&summary[..keep]);
        let mut target = summary[..keep].to_vec();
        target.push(EOS);
        (input, target)
    }

    /// Paragraph attention (summed over layers) of a teacher-forced pass on `summary`.
    pub fn reference_attention(&self, enc: &EncodedSource, summary: &[usize]) -> Result<Tensor> {
        let (input, _) = self.teacher_forcing(summary);
        Ok(self.decode(&input, enc)?.attention_sum)
    }

    /// Builds the mean token-level negative log-likelihood of a batch on `tape`.
    pub fn loss_on<'a>(&'a self, tape: &mut Tape<'a>, batch: &[(&Source, &[usize])], ctx: &mut Ctx<'_>) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("training loss of an empty batch".into()));
        }
        let mut total: Option<Var> = None;
        let mut count = 0usize;
        for (source, summary) in batch {
            let source = self.fit_source(source)?;
            self.check_ids(summary, "summary")?;
            let (input, target) = self.teacher_forcing(summary);
            let src = self.encode_on(tape, &source, ctx)?;
            let out = self.decode_on(tape, &input, &src, ctx)?;
            let logits = self.project_vocab(tape, out.hidden)?;
            let targets: Vec<Option<usize>> = target.iter().map(|&t| Some(t)).collect();
            let ce = tape.cross_entropy(logits, &targets)?;
            let weighted = tape.scale(ce, target.len() as f64);
            total = Some(match total {
                Some(t) => tape.add(t, weighted)?,
                None => weighted,
            });
            count += target.len();
        }
        let total = total.expect("non-empty batch");
        Ok(tape.scale(total, 1.0 / count as f64))
    }

    /// Loss value and parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        batch: &[(&Source, &[usize])],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
        let mut tape = Tape::new();
        let mut ctx = match rng {
            Some(r) => Ctx::train(r),
            None => Ctx::eval(),
        };
        let loss = self.loss_on(&mut tape, batch, &mut ctx)?;
        let value = tape.scalar_value(loss)?;
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        Ok((value, ParamStore::collect_grads(&tape, &grads)))
    }

    /// Eval-mode loss without gradients.
    pub fn loss(&self, batch: &[(&Source, &[usize])]) -> Result<f64> {
        let mut tape = Tape::inference();
        let loss = self.loss_on(&mut tape, batch, &mut Ctx::eval())?;
        Ok(tape.scalar_value(loss)?)
    }

    /// Writes the checkpoint plus a sidecar config next to it.
    pub fn save(&self, path: impl AsRef<Path>, vocab_hash: &str, extra: &[(String, Tensor)]) -> Result<()> {
        let path = path.as_ref();
        let mut entries = self.params.entries();
        entries.extend_from_slice(extra);
        checkpoint::save(path, &entries)?;
        ModelSidecar::new(self.config.clone(), vocab_hash).save(sidecar_path(path))
    }

    /// Loads a checkpoint written by [`Pht::save`]; returns the model, the
    /// stored vocabulary hash and every checkpoint entry.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String, Vec<(String, Tensor)>)> {
        let path = path.as_ref();
        let sidecar = ModelSidecar::load(sidecar_path(path))?;
        let entries = checkpoint::load(path)?;
        let mut model = Self::new(sidecar.model, 0)?;
        model.params.load_entries(&entries)?;
        Ok((model, sidecar.vocab_hash, entries))
    }
}

/// Adds the sinusoidal encoding of each row's rank to `(m, d)` embeddings.
pub fn add_ranking_encoding(embeddings: &Tensor, ranks: &[usize]) -> Result<Tensor> {
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[0] != ranks.len() {
        return Err(Error::Contract(format!(
            "embeddings of shape {shape:?} do not match {} ranks",
            ranks.len()
        )));
    }
    let table = sinusoid_table(ranks, shape[1]);
    let data = embeddings.data().iter().zip(table.data()).map(|(a, b)| a + b).collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Location of the config document that accompanies a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            model_dim: 8,
            ffn_dim: 16,
            num_heads: 2,
            num_layers: 2,
            max_paragraphs: 6,
            max_paragraph_len: 6,
            max_target_len: 8,
            ..ModelConfig::desk()
        }
        .with_dropout(0.0)
    }

    fn sample_source() -> Source {
        Source::new(vec![vec![5, 6, 7], vec![8, 9], vec![10, 11, 12, 13]])
    }

    #[test]
    fn empty_paragraph_has_no_contexts_and_no_attention() {
        let model = Pht::new(tiny(20), 1).unwrap();
        assert!(model.encode_paragraph(&[]).unwrap().is_empty());
        let src = Source::new(vec![vec![5, 6], vec![], vec![7]]);
        let enc = model.encode(&src).unwrap();
        assert_eq!(enc.paragraph_mask(), vec![true, false, true]);
        let out = model.decode(&[BOS, 5, 6], &enc).unwrap();
        for a in &out.layer_attention {
            for t in 0..3 {
                assert_eq!(a.get(&[t, 1]), 0.0);
                let s: f64 = a.row(t).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_token_paragraph_shape() {
        let model = Pht::new(tiny(20), 2).unwrap();
        let c = model.encode_paragraph(&[9]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 8);
        assert!(c[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_paragraphs_identical_contexts() {
        let model = Pht::new(tiny(20), 3).unwrap();
        let enc = model.encode(&Source::new(vec![vec![5, 6, 7], vec![5, 6, 7]])).unwrap();
        let w = enc.word_contexts.data();
        let half = w.len() / 2;
        assert_eq!(&w[..half], &w[half..]);
    }

    #[test]
    fn single_paragraph_gets_full_attention() {
        let model = Pht::new(tiny(20), 4).unwrap();
        let enc = model.encode(&Source::new(vec![vec![5, 6, 7]])).unwrap();
        let out = model.decode(&[BOS, 7, 8], &enc).unwrap();
        for a in &out.layer_attention {
            assert!(a.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn causal_prefix_logits_unchanged() {
        let model = Pht::new(tiny(20), 5).unwrap();
        let enc = model.encode(&sample_source()).unwrap();
        let a = model.decode(&[BOS, 5, 6, 7, 8], &enc).unwrap();
        let b = model.decode(&[BOS, 5, 6, 9, 8], &enc).unwrap();
        for t in 0..3 {
            assert_eq!(a.logits.row(t), b.logits.row(t));
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
    }

    #[test]
    fn step_matches_last_decoder_row() {
        let model = Pht::new(tiny(20), 6).unwrap();
        let enc = model.encode(&sample_source()).unwrap();
        let prefix = [BOS, 5, 6];
        let full = model.decode(&prefix, &enc).unwrap();
        let step = model.step(&prefix, &enc).unwrap();
        let row = full.logits.row(2);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (a, b) in step.log_probs.iter().zip(row) {
            assert!((a - (b - lse)).abs() < 1e-12);
        }
        let sum_row = full.attention_sum.row(2);
        for (a, b) in step.paragraph_attention.iter().zip(sum_row) {
            assert!((a * 2.0 - b).abs() < 1e-12);
        }
        let tok: f64 = step.token_attention.iter().sum();
        assert!((tok - 1.0).abs() < 1e-9);
        assert_eq!(step.token_attention.as_slice(), full.token_attention.row(2));
    }

    #[test]
    fn out_of_vocab_prefix_is_rejected() {
        let model = Pht::new(tiny(20), 7).unwrap();
        let enc = model.encode(&sample_source()).unwrap();
        assert!(matches!(model.decode(&[BOS, 25], &enc), Err(Error::Input(_))));
        assert!(model.encode(&Source::new(vec![vec![99]])).is_err());
    }

    #[test]
    fn overlong_input_is_truncated_and_counted() {
        let model = Pht::new(tiny(20), 8).unwrap();
        let src = Source::new((0..8).map(|_| vec![5; 9]).collect());
        let enc = model.encode(&src).unwrap();
        assert_eq!(enc.num_paragraphs(), 6);
        assert_eq!(enc.width(), 6);
        assert_eq!(model.truncation_count(), 2 + 6);
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let model = Pht::new(tiny(20), 9).unwrap();
        assert!(matches!(model.loss(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let mut model = Pht::new(tiny(20), 10).unwrap();
        let id = model.params().id("embedding").unwrap();
        model.params_mut().get_mut(id).data_mut().fill(0.0);
        let src = sample_source();
        let loss = model.loss(&[(&src, &[5, 6][..])]).unwrap();
        assert!((loss - (20f64).ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn fused_context_is_attention_weighted_word_context() {
        let model = Pht::new(tiny(20), 12).unwrap();
        let mut tape = Tape::inference();
        let src = model.encode_on(&mut tape, &sample_source(), &mut Ctx::eval()).unwrap();
        let out = model
            .decode_on(&mut tape, &[BOS, 5, 9, 7], &src, &mut Ctx::eval())
            .unwrap();
        let (k, m, d) = (4, 3, 8);
        for l in 0..2 {
            let a = tape.value(out.paragraph_attention[l]);
            let w = tape.value(out.word_context[l]); // (m, k, d)
            let f = tape.value(out.fused[l]); // (k, d)
            for t in 0..k {
                let row: f64 = a[t * m..(t + 1) * m].iter().sum();
                assert!((row - 1.0).abs() < 1e-6);
                assert!(a[t * m..(t + 1) * m].iter().all(|&x| x >= 0.0));
                for j in 0..d {
                    let expect: f64 = (0..m).map(|p| a[t * m + p] * w[(p * k + t) * d + j]).sum();
                    assert!((f[t * d + j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooling_one_token_ignores_scores() {
        let mut model = Pht::new(tiny(20), 13).unwrap();
        let row = vec![vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4, 0.0, 0.7]];
        let before = model.pool_paragraph(&row).unwrap();

        // the projected row passed through the residual feed-forward block
        let p = &model.pooling;
        let w1 = model.params.get(p.project.weight).data().to_vec();
        let w3 = model.params.get(p.combine.weight).data().to_vec();
        let d = 8;
        let h: Vec<f64> = (0..d)
            .map(|j| (0..d).map(|i| row[0][i] * w1[i * d + j]).sum())
            .collect();
        let x: Vec<f64> = (0..d).map(|j| (0..d).map(|i| h[i] * w3[i * d + j]).sum()).collect();
        let mut tape = Tape::inference();
        let xv = tape.constant(Tensor::new(vec![1, d], x).unwrap());
        let ff = p.ffn.forward(&mut tape, &model.params, xv, &mut Ctx::eval()).unwrap();
        let s = tape.add(xv, ff).unwrap();
        let y = p.norm.forward(&mut tape, &model.params, s).unwrap();
        for (a, b) in tape.value(y).iter().zip(&before) {
            assert!((a - b).abs() < 1e-12);
        }

        let score = model.pooling.score;
        model
            .params_mut()
            .get_mut(score)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = *v * 7.0 - 1.0);
        assert_eq!(model.pool_paragraph(&row).unwrap(), before);
    }

    #[test]
    fn pooling_is_invariant_to_duplicating_rows() {
        let model = Pht::new(tiny(20), 14).unwrap();
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..8).map(|j| ((i * 8 + j) as f64 * 0.37).sin()).collect())
            .collect();
        let doubled: Vec<Vec<f64>> = rows.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
        let a = model.pool_paragraph(&rows).unwrap();
        let b = model.pool_paragraph(&doubled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(model.pool_paragraph(&[]).is_err());
    }

    #[test]
    fn equal_pool_scores_split_evenly() {
        let model = Pht::new(tiny(20), 15).unwrap();
        let mut tape = Tape::inference();
        let c = tape.constant(Tensor::new(vec![1, 2, 8], vec![0.5; 16]).unwrap());
        let split = split_heads(&mut tape, c, 2).unwrap();
        let w = model.params.bind(&mut tape, model.pooling.score);
        let s = tape.matmul(split, w).unwrap();
        let a = tape.softmax(s, 2).unwrap();
        assert!(tape.value(a).iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn ranking_encoding_depends_on_rank_only() {
        let phi = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let a = add_ranking_encoding(&phi, &[0, 3]).unwrap();
        assert_eq!(a.row(0), &[1.0, 3.0, 3.0, 5.0]);
        let swapped = Tensor::new(vec![2, 4], vec![5.0, 6.0, 7.0, 8.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = add_ranking_encoding(&swapped, &[3, 0]).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
        assert!(add_ranking_encoding(&phi, &[0]).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Pht::new(tiny(20), 11).unwrap();
        model.save(&path, "h", &[]).unwrap();
        let (back, hash, _) = Pht::load(&path).unwrap();
        assert_eq!(hash, "h");
        let enc = back.encode(&sample_source()).unwrap();
        let enc0 = model.encode(&sample_source()).unwrap();
        assert_eq!(enc.paragraph_embeddings, enc0.paragraph_embeddings);
    }
}
