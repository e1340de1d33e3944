//! Paragraph-attention labels, the attention predictor, and the alignment score.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use pht_tensor::{checkpoint, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{file_err, Error, Result};
use crate::nn::{sinusoid_table, Ctx, EncoderLayer, LayerRates, Linear};
use crate::ModelConfig;

/// Lower clamp applied before taking logs of attention mass.
pub const ATTENTION_FLOOR: f64 = 1e-12;

/// Normalizes an accumulated attention vector into a distribution.
pub fn normalize_coverage(coverage: &[f64]) -> Result<Vec<f64>> {
    if coverage.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract("attention mass must be finite and non-negative".into()));
    }
    let total: f64 = coverage.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("cannot normalize zero attention".into()));
    }
    Ok(coverage.iter().map(|v| v / total).collect())
}

/// Column sums of a `(k, m)` paragraph attention matrix, normalized over the
/// paragraphs where `mask` is true. Masked paragraphs get zero.
pub fn extract_label(attention: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
    let shape = attention.shape();
    if shape.len() != 2 || shape[1] != mask.len() {
        return Err(Error::Contract(format!(
            "attention of shape {shape:?} does not match {} paragraphs",
            mask.len()
        )));
    }
    let m = shape[1];
    let mut sums = vec![0.0; m];
    for row in attention.data().chunks(m) {
        for ((s, v), &keep) in sums.iter_mut().zip(row).zip(mask) {
            if keep {
                *s += v;
            }
        }
    }
    normalize_coverage(&sums)
}

/// `Σ_p log(min(η_y[p], η̂[p]))`, with each minimum clamped at [`ATTENTION_FLOOR`].
pub fn att_align_score(eta_y: &[f64], eta_hat: &[f64]) -> Result<f64> {
    if eta_y.len() != eta_hat.len() {
        return Err(Error::Contract(format!(
            "candidate attention has {} entries, prediction has {}",
            eta_y.len(),
            eta_hat.len()
        )));
    }
    Ok(eta_y
        .iter()
        .zip(eta_hat)
        .map(|(a, b)| a.min(*b).max(ATTENTION_FLOOR).ln())
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl PredictorConfig {
    /// Two encoder layers sized like the summarizer, dropout 0.5.
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            model_dim: model.model_dim,
            ffn_dim: model.ffn_dim,
            num_heads: model.num_heads,
            num_layers: 2,
            dropout: 0.5,
            layer_norm_eps: model.layer_norm_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.ffn_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config("predictor dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config("predictor model_dim not divisible by num_heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "predictor dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PredictorSidecar {
    schema_version: u32,
    vocab_hash: String,
    #[serde(flatten)]
    config: PredictorConfig,
}

/// Paragraph embeddings paired with their target distribution.
#[derive(Clone, Debug)]
pub struct LabelledEmbeddings {
    /// Shape `(m, d)`.
    pub embeddings: Tensor,
    pub eta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PredictorTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub base_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for PredictorTraining {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 4,
            base_rate: 1.0,
            warmup_steps: 100,
            seed: 0,
        }
    }
}

/// Transformer encoder over paragraph embeddings with a scalar head per
/// paragraph and a softmax across paragraphs.
pub struct AttentionPredictor {
    config: PredictorConfig,
    params: ParamStore,
    layers: Vec<EncoderLayer>,
    head: Linear,
}

impl AttentionPredictor {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let rates = LayerRates {
            attention: config.dropout,
            residual: config.dropout,
            ffn: config.dropout,
        };
        let layers = (0..config.num_layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut params,
                    &format!("predictor.{i}"),
                    config.model_dim,
                    config.ffn_dim,
                    config.num_heads,
                    &rates,
                    config.layer_norm_eps,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut params, "predictor.head", config.model_dim, 1, true, &mut rng)?;
        Ok(Self {
            config,
            params,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    fn check(&self, embeddings: &Tensor) -> Result<usize> {
        let s = embeddings.shape();
        if s.len() != 2 || s[1] != self.config.model_dim {
            return Err(Error::Contract(format!(
                "paragraph embeddings must be (m, {}), got {s:?}",
                self.config.model_dim
            )));
        }
        Ok(s[0])
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, embeddings: &Tensor, ctx: &mut Ctx<'_>) -> Result<pht_tensor::Var> {
        let m = self.check(embeddings)?;
        let x = tape.constant(embeddings.clone());
        let pos = tape.constant(sinusoid_table(&(0..m).collect::<Vec<_>>(), self.config.model_dim));
        let x = tape.add(x, pos)?;
        let mut x = ctx.dropout(tape, x, self.config.dropout)?;
        for layer in &self.layers {
            x = layer.forward(tape, &self.params, x, None, ctx)?;
        }
        let scores = self.head.forward(tape, &self.params, x)?; // (m, 1)
        Ok(tape.softmax(scores, 0)?)
    }

    /// Predicted distribution over the `m` rows of `embeddings` (eval mode).
    pub fn predict(&self, embeddings: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let p = self.forward(&mut tape, embeddings, &mut Ctx::eval())?;
        Ok(tape.value(p).to_vec())
    }

    /// Row-slice form of [`AttentionPredictor::predict`].
    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Err(Error::Contract("cannot predict attention over zero paragraphs".into()));
        }
        self.predict(&Tensor::new(vec![rows.len(), rows[0].len()], rows.concat())?)
    }

    fn mse_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        pair: &LabelledEmbeddings,
        ctx: &mut Ctx<'_>,
    ) -> Result<pht_tensor::Var> {
        let m = self.check(&pair.embeddings)?;
        if pair.eta.len() != m {
            return Err(Error::Contract(format!(
                "label has {} entries for {m} paragraphs",
                pair.eta.len()
            )));
        }
        let p = self.forward(tape, &pair.embeddings, ctx)?;
        let target = tape.constant(Tensor::new(vec![m, 1], pair.eta.clone())?);
        let diff = tape.sub(p, target)?;
        let sq = tape.mul(diff, diff)?;
        Ok(tape.mean(sq))
    }

    /// Mean squared error of the eval-mode prediction.
    pub fn mse(&self, pair: &LabelledEmbeddings) -> Result<f64> {
        let mut tape = Tape::inference();
        let l = self.mse_on(&mut tape, pair, &mut Ctx::eval())?;
        Ok(tape.scalar_value(l)?)
    }

    /// Fits the predictor by Adam on mean squared error; returns per-step losses.
    pub fn train(&mut self, data: &[LabelledEmbeddings], opts: &PredictorTraining) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Contract(
                "attention predictor needs at least one training pair".into(),
            ));
        }
        if opts.batch_size == 0 || opts.warmup_steps == 0 {
            return Err(Error::Config("batch_size and warmup_steps must be positive".into()));
        }
        let mut adam = AdamState::new(
            AdamConfig {
                base_rate: opts.base_rate,
                warmup_steps: opts.warmup_steps as u64,
                model_dim: self.config.model_dim,
                ..AdamConfig::default()
            },
            &self.params,
        );
        let mut losses = Vec::with_capacity(opts.steps);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut epoch = 0u64;
        for step in 0..opts.steps {
            let mut batch = Vec::with_capacity(opts.batch_size);
            for _ in 0..opts.batch_size.min(data.len()) {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(opts.seed, epoch)));
                    epoch += 1;
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix(opts.seed ^ 0x5eed, step as u64));
            let (loss, grads) = {
                let mut tape = Tape::new();
                let mut ctx = Ctx::train(&mut rng);
                let mut total = None;
                for &i in &batch {
                    let l = self.mse_on(&mut tape, &data[i], &mut ctx)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, l)?,
                        None => l,
                    });
                }
                let total = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
                let value = tape.scalar_value(total)?;
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        step: step as u64,
                        last_checkpoint: None,
                    });
                }
                let g = tape.backward(total)?;
                (value, ParamStore::collect_grads(&tape, &g))
            };
            self.params.zero_grads();
            self.params.accumulate_grads(&grads)?;
            adam.step(&mut self.params)?;
            losses.push(loss);
        }
        Ok(losses)
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab_hash: &str) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save(path, &self.params.entries())?;
        let side = PredictorSidecar {
            schema_version: crate::config::CONFIG_SCHEMA_VERSION,
            vocab_hash: vocab_hash.to_string(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&side).map_err(|e| Error::Config(e.to_string()))?;
        let side_path = crate::model::sidecar_path(path);
        std::fs::write(&side_path, text).map_err(file_err(side_path))
    }

    /// Loads a predictor and the vocabulary hash it was trained against.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let side_path = crate::model::sidecar_path(path);
        let text = std::fs::read_to_string(&side_path).map_err(file_err(&side_path))?;
        let side: PredictorSidecar = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        if side.schema_version != crate::config::CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported predictor schema {}",
                side.schema_version
            )));
        }
        let mut p = Self::new(side.config, 0)?;
        p.params.load_entries(&checkpoint::load(path)?)?;
        Ok((p, side.vocab_hash))
    }
}

/// Mixes a seed with a counter into an independent stream seed.
pub(crate) fn mix(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One line of the label cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub m: usize,
    pub eta: Vec<f64>,
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[LabelRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(file);
    for l in labels {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(file_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(file_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord =
            serde_json::from_str(&line).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if rec.eta.len() != rec.m {
            return Err(Error::Input(format!(
                "{}:{}: m does not match eta length",
                path.display(),
                i + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}
