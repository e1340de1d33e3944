//! Beam search with pluggable hypothesis scorers.

mod compress;
mod constraints;
mod scorers;

pub use compress::{compress_source, Compressed};
pub use constraints::{apply_constraints, Constraints};
pub use scorers::{
    build_scorer, gnmt_coverage_penalty, ptrgen_coverage, str_cov, vanilla_score, AttAlign, Features, GnmtCoverage,
    PtrGenCoverage, Scorer, ScorerKind, StrCov, Vanilla,
};

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{EncodedSource, Pht, StepOutput};
use crate::vocab::{BOS, EOS, PAD};

/// A decoder that can be queried one position at a time.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn num_paragraphs(&self) -> usize;
    fn num_source_tokens(&self) -> usize;
    /// Distribution over the token following `tokens` (which exclude the
    /// start marker) and the attention of that decoding position.
    fn step(&self, tokens: &[usize]) -> Result<StepOutput>;

    fn step_batch(&self, prefixes: &[&[usize]]) -> Result<Vec<StepOutput>> {
        prefixes.iter().map(|p| self.step(p)).collect()
    }
}

/// A trained summarizer bound to one encoded source.
pub struct PhtStepper<'a> {
    model: &'a Pht,
    source: &'a EncodedSource,
    /// Flat positions of real (unpadded) tokens in the model's token attention.
    token_positions: Vec<usize>,
}

impl<'a> PhtStepper<'a> {
    pub fn new(model: &'a Pht, source: &'a EncodedSource) -> Self {
        let n = source.width();
        let token_positions = source
            .token_lengths
            .iter()
            .enumerate()
            .flat_map(|(p, &len)| (0..len).map(move |j| p * n + j))
            .collect();
        Self {
            model,
            source,
            token_positions,
        }
    }
}

impl StepModel for PhtStepper<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn num_paragraphs(&self) -> usize {
        self.source.num_paragraphs()
    }

    fn num_source_tokens(&self) -> usize {
        self.token_positions.len()
    }

    fn step(&self, tokens: &[usize]) -> Result<StepOutput> {
        let mut prefix = Vec::with_capacity(tokens.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(tokens);
        let mut out = self.model.step(&prefix, self.source)?;
        out.token_attention = self.token_positions.iter().map(|&i| out.token_attention[i]).collect();
        Ok(out)
    }
}

/// When beam search may stop before `max_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StopRule {
    /// Stop once the finished pool is full and no live hypothesis currently
    /// scores above the worst finished one.
    #[default]
    Heuristic,
    /// Stop only when no live hypothesis can ever beat the worst finished
    /// one, according to the scorer's upper bound.
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, end marker included.
    pub max_len: usize,
    pub beta: f64,
    pub scorer: ScorerKind,
    pub constraints: Constraints,
    /// Keep only this many paragraphs, chosen by predicted attention.
    pub compress: Option<usize>,
    /// Coefficient of the structural-coverage term.
    pub str_cov_weight: f64,
    pub stop: StopRule,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_len: 200,
            beta: 0.8,
            scorer: ScorerKind::Vanilla,
            constraints: Constraints::default(),
            compress: None,
            str_cov_weight: 1.0,
            stop: StopRule::Heuristic,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.compress == Some(0) {
            return Err(Error::Config("compression must keep at least one paragraph".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens; ends with the end marker once finished normally.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Log-probability of each token, in order.
    pub token_log_probs: Vec<f64>,
    pub paragraph_coverage: Vec<f64>,
    pub token_coverage: Vec<f64>,
    pub str_cov_total: f64,
    pub ptrgen_total: f64,
    /// Per-step structural-coverage values.
    pub str_cov_steps: Vec<f64>,
    pub finished: bool,
    /// Stopped at the length cap without an end marker.
    pub truncated: bool,
    /// Every continuation was forbidden, so the end marker was forced.
    pub degenerate: bool,
    pub score: f64,
}

impl BeamHypothesis {
    fn root(m: usize, source_tokens: usize) -> Self {
        Self {
            tokens: Vec::new(),
            log_prob: 0.0,
            token_log_probs: Vec::new(),
            paragraph_coverage: vec![0.0; m],
            token_coverage: vec![0.0; source_tokens],
            str_cov_total: 0.0,
            ptrgen_total: 0.0,
            str_cov_steps: Vec::new(),
            finished: false,
            truncated: false,
            degenerate: false,
            score: 0.0,
        }
    }

    pub fn features(&self) -> Features<'_> {
        Features {
            log_prob: self.log_prob,
            length: self.tokens.len(),
            paragraph_coverage: &self.paragraph_coverage,
            token_coverage: &self.token_coverage,
            str_cov_total: self.str_cov_total,
            ptrgen_total: self.ptrgen_total,
        }
    }

    /// Tokens without the trailing end marker.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    /// Normalized paragraph attention of the hypothesis.
    pub fn eta(&self) -> Result<Vec<f64>> {
        crate::align::normalize_coverage(&self.paragraph_coverage)
    }

    /// Extends by one token whose step produced `out`.
    fn extend(&self, token: usize, token_lp: f64, out: &StepOutput) -> Self {
        let strcov = str_cov(&out.paragraph_attention, &self.paragraph_coverage);
        let overlap = ptrgen_coverage(&out.paragraph_attention, &self.paragraph_coverage);
        let mut child = self.clone();
        child.tokens.push(token);
        child.log_prob += token_lp;
        child.token_log_probs.push(token_lp);
        child
            .paragraph_coverage
            .iter_mut()
            .zip(&out.paragraph_attention)
            .for_each(|(c, a)| *c += a);
        child
            .token_coverage
            .iter_mut()
            .zip(&out.token_attention)
            .for_each(|(c, a)| *c += a);
        child.str_cov_total += strcov;
        child.ptrgen_total += overlap;
        child.str_cov_steps.push(strcov);
        child
    }
}

#[derive(Clone, Debug)]
pub struct BeamOutput {
    /// Finished hypotheses, best first.
    pub hypotheses: Vec<BeamHypothesis>,
    /// Some hypothesis had every continuation forbidden.
    pub degenerate: bool,
    pub steps: usize,
}

impl BeamOutput {
    pub fn best(&self) -> &BeamHypothesis {
        &self.hypotheses[0]
    }
}

struct Candidate {
    parent: usize,
    token: usize,
    token_lp: f64,
    score: f64,
}

/// Finished hypotheses kept by score, at most `capacity`.
struct Pool {
    capacity: usize,
    items: Vec<BeamHypothesis>,
}

impl Pool {
    fn is_full(&self) -> bool {
        self.items.len() >= self.capacity
    }

    fn worst(&self) -> f64 {
        self.items.iter().map(|h| h.score).fold(f64::INFINITY, f64::min)
    }

    fn add(&mut self, h: BeamHypothesis) {
        if !self.is_full() {
            self.items.push(h);
            return;
        }
        let (wi, w) = self
            .items
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.score.total_cmp(&b.1.score).then(b.0.cmp(&a.0)))
            .expect("pool is non-empty");
        if h.score > w.score {
            self.items[wi] = h;
        }
    }
}

fn check_step<M: StepModel + ?Sized>(out: &StepOutput, model: &M) -> Result<()> {
    if out.log_probs.len() != model.vocab_size() {
        return Err(Error::Contract(format!(
            "step returned {} log-probabilities for a vocabulary of {}",
            out.log_probs.len(),
            model.vocab_size()
        )));
    }
    if out.paragraph_attention.len() != model.num_paragraphs() || out.token_attention.len() != model.num_source_tokens()
    {
        return Err(Error::Contract("step attention does not match the source size".into()));
    }
    Ok(())
}

/// Masked next-token log-probabilities for a hypothesis.
fn allowed_log_probs(h: &BeamHypothesis, out: &StepOutput, rules: Constraints) -> Vec<f64> {
    let mut lp = out.log_probs.clone();
    for t in [PAD, BOS] {
        if let Some(v) = lp.get_mut(t) {
            *v = f64::NEG_INFINITY;
        }
    }
    apply_constraints(&h.tokens, &mut lp, rules);
    lp
}

/// Beam search under `scorer`. Candidates are ranked by score, then parent
/// position, then token id. An end-marker candidate joins the finished pool
/// only if it ranks within the beam; other candidates refill the live beam.
pub fn beam_search<M: StepModel + ?Sized>(model: &M, config: &DecodeConfig, scorer: &dyn Scorer) -> Result<BeamOutput> {
    config.validate()?;
    let beam = config.beam_size;
    let mut pool = Pool {
        capacity: beam,
        items: Vec::new(),
    };
    let mut live = vec![BeamHypothesis::root(model.num_paragraphs(), model.num_source_tokens())];
    let mut degenerate = false;
    let mut steps = 0;
    // siblings differ only in log-probability, so 2·beam per parent suffice
    let per_parent = beam.saturating_mul(2);

    while !live.is_empty() && steps < config.max_len {
        let prefixes: Vec<&[usize]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let outs = model.step_batch(&prefixes)?;
        steps += 1;

        let mut candidates = Vec::new();
        let mut templates: Vec<Option<BeamHypothesis>> = Vec::with_capacity(live.len());
        for (pi, (h, out)) in live.iter().zip(&outs).enumerate() {
            check_step(out, model)?;
            let lp = allowed_log_probs(h, out, config.constraints);
            let mut allowed: Vec<usize> = (0..lp.len()).filter(|&t| lp[t] > f64::NEG_INFINITY).collect();
            // template carries the coverage update shared by all siblings
            let template = h.extend(EOS, 0.0, out);
            if allowed.is_empty() {
                log::warn!("every continuation is blocked; forcing the end marker");
                degenerate = true;
                let mut forced = template;
                forced.finished = true;
                forced.degenerate = true;
                forced.score = scorer.score(&forced.features());
                pool.add(forced);
                templates.push(None);
                continue;
            }
            allowed.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            allowed.truncate(per_parent);
            for &t in &allowed {
                let f = Features {
                    log_prob: h.log_prob + lp[t],
                    ..template.features()
                };
                candidates.push(Candidate {
                    parent: pi,
                    token: t,
                    token_lp: lp[t],
                    score: scorer.score(&f),
                });
            }
            templates.push(Some(template));
        }
        candidates.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.parent.cmp(&b.parent))
                .then(a.token.cmp(&b.token))
        });

        let mut next = Vec::with_capacity(beam);
        for (rank, c) in candidates.iter().enumerate() {
            if next.len() == beam {
                break;
            }
            if c.token == EOS && rank >= beam {
                continue;
            }
            let template = templates[c.parent].as_ref().expect("parent produced candidates");
            let mut child = template.clone();
            *child.tokens.last_mut().expect("template has a token") = c.token;
            child.log_prob = live[c.parent].log_prob + c.token_lp;
            *child.token_log_probs.last_mut().expect("template has a token") = c.token_lp;
            child.score = c.score;
            if c.token == EOS {
                child.finished = true;
                pool.add(child);
            } else {
                next.push(child);
            }
        }

        if steps == config.max_len {
            for mut h in next.drain(..) {
                h.finished = true;
                h.truncated = true;
                pool.add(h);
            }
        }
        live = next;

        if pool.is_full() && !live.is_empty() {
            let worst = pool.worst();
            let done = match config.stop {
                StopRule::Heuristic => live.iter().all(|h| h.score <= worst),
                StopRule::Exact => live
                    .iter()
                    .all(|h| scorer.upper_bound(&h.features(), config.max_len) <= worst),
            };
            if done {
                break;
            }
        }
    }

    let mut hypotheses = pool.items;
    hypotheses.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    if hypotheses.is_empty() {
        return Err(Error::Contract("beam search produced no hypothesis".into()));
    }
    Ok(BeamOutput {
        hypotheses,
        degenerate,
        steps,
    })
}

/// Picks the most probable allowed token at every step.
pub fn greedy_decode<M: StepModel + ?Sized>(
    model: &M,
    max_len: usize,
    rules: Constraints,
    scorer: &dyn Scorer,
) -> Result<BeamHypothesis> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut h = BeamHypothesis::root(model.num_paragraphs(), model.num_source_tokens());
    while h.tokens.len() < max_len {
        let out = model.step(&h.tokens)?;
        check_step(&out, model)?;
        let lp = allowed_log_probs(&h, &out, rules);
        let best = (0..lp.len())
            .filter(|&t| lp[t] > f64::NEG_INFINITY)
            .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)));
        match best {
            Some(t) => {
                h = h.extend(t, lp[t], &out);
                if t == EOS {
                    h.finished = true;
                    break;
                }
            }
            None => {
                log::warn!("every continuation is blocked; forcing the end marker");
                h = h.extend(EOS, 0.0, &out);
                h.finished = true;
                h.degenerate = true;
                break;
            }
        }
    }
    if !h.finished {
        h.finished = true;
        h.truncated = true;
    }
    h.score = scorer.score(&h.features());
    Ok(h)
}
