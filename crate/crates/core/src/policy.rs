//! Autoregressive softmax token policy conditioned on an image context.
//!
//! One hidden layer over the context and the mean-pooled embeddings of the
//! prefix:
//!
//! ```text
//! h_t      = tanh(ctx · ctx_proj + mean(embed(tokens[..t])) · prefix_proj + hidden_bias)
//! logits_t = h_t · out_proj + out_bias
//! ```
//!
//! `ctx` is the image feature vector followed by a one-hot query template.
//! The tape path ([`token_logprobs`]) and the incremental path used for
//! decoding ([`PolicyParams::logprobs`], [`sample`]) perform the same floating
//! point operations in the same order, so they agree bit for bit.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{log_sum_exp, matmul_raw, Gradients, Tape, Tensor, TensorError, Var};
use crate::vocab::{Tag, TokenId, VocabError, EOS_ID, STRUCTURAL_COUNT};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("image feature has {got} dims, policy expects {expected}")]
    ContextDim { expected: usize, got: usize },
    #[error("query template {0} outside the {1} known templates")]
    QueryOutOfRange(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Query templates understood by the policy.
pub const QUERY_OPEN: usize = 0;
pub const QUERY_CLOSED: usize = 1;

/// Conditioning input `(x, q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub image_feat: Vec<f64>,
    pub query_id: usize,
}

impl Context {
    pub fn new(image_feat: Vec<f64>, query_id: usize) -> Self {
        Self {
            image_feat,
            query_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub vocab: usize,
    pub d_tok: usize,
    pub d_img: usize,
    pub n_queries: usize,
    pub d_h: usize,
}

impl PolicyDims {
    pub fn d_ctx(&self) -> usize {
        self.d_img + self.n_queries
    }
}

/// All learnable weights, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub token_embed: Tensor,
    pub ctx_proj: Tensor,
    pub prefix_proj: Tensor,
    pub hidden_bias: Tensor,
    pub out_proj: Tensor,
    pub out_bias: Tensor,
}

const CKPT_MAGIC: &[u8; 8] = b"FGVRPOL\0";
pub const CKPT_FORMAT_VERSION: u32 = 1;

impl PolicyParams {
    /// All-zero weights: the uniform policy.
    pub fn zeros(dims: PolicyDims) -> Self {
        Self {
            dims,
            token_embed: Tensor::zeros(vec![dims.vocab, dims.d_tok]),
            ctx_proj: Tensor::zeros(vec![dims.d_ctx(), dims.d_h]),
            prefix_proj: Tensor::zeros(vec![dims.d_tok, dims.d_h]),
            hidden_bias: Tensor::zeros(vec![dims.d_h]),
            out_proj: Tensor::zeros(vec![dims.d_h, dims.vocab]),
            out_bias: Tensor::zeros(vec![dims.vocab]),
        }
    }

    /// Scaled Gaussian init. Query-template rows of `ctx_proj` start at zero
    /// so an unseen template begins neutral; `out_proj` starts small so the
    /// initial policy is close to uniform.
    pub fn init(dims: PolicyDims, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dims);
        let mut fill = |t: &mut Tensor, scale: f64, rows: Option<usize>| {
            let cols = t.cols();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if rows.is_some_and(|r| i / cols >= r) {
                    continue;
                }
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                *v = z * scale;
            }
        };
        fill(&mut p.token_embed, 1.0, None);
        fill(
            &mut p.ctx_proj,
            1.0 / (dims.d_img as f64).sqrt() * 2.0,
            Some(dims.d_img),
        );
        fill(&mut p.prefix_proj, 1.0 / (dims.d_tok as f64).sqrt(), None);
        fill(&mut p.out_proj, 0.1 / (dims.d_h as f64).sqrt(), None);
        p
    }

    pub fn fields(&self) -> [&Tensor; 6] {
        [
            &self.token_embed,
            &self.ctx_proj,
            &self.prefix_proj,
            &self.hidden_bias,
            &self.out_proj,
            &self.out_bias,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.token_embed,
            &mut self.ctx_proj,
            &mut self.prefix_proj,
            &mut self.hidden_bias,
            &mut self.out_proj,
            &mut self.out_bias,
        ]
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.fields().iter().map(|t| t.len()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.fields().iter().all(|t| t.all_finite())
    }

    /// Registers every field as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars {
            dims: self.dims,
            token_embed: tape.leaf(self.token_embed.clone()),
            ctx_proj: tape.leaf(self.ctx_proj.clone()),
            prefix_proj: tape.leaf(self.prefix_proj.clone()),
            hidden_bias: tape.leaf(self.hidden_bias.clone()),
            out_proj: tape.leaf(self.out_proj.clone()),
            out_bias: tape.leaf(self.out_bias.clone()),
        }
    }

    pub fn ctx_vector(&self, ctx: &Context) -> Result<Vec<f64>> {
        ctx_vector(self.dims, ctx)
    }

    /// `ctx · ctx_proj`, shared by every decoding step.
    fn context_hidden(&self, ctx: &Context) -> Result<Vec<f64>> {
        let cv = self.ctx_vector(ctx)?;
        Ok(matmul_raw(&cv, self.ctx_proj.data(), 1, cv.len(), self.dims.d_h))
    }

    /// Hidden state given the context part and the prefix tokens.
    fn hidden(&self, ctx_part: &[f64], prefix: &[TokenId]) -> Vec<f64> {
        let d = self.dims;
        let mut mean = vec![0.0; d.d_tok];
        if !prefix.is_empty() {
            let w = 1.0 / prefix.len() as f64;
            let emb = self.token_embed.data();
            for &tok in prefix {
                let row = &emb[tok * d.d_tok..(tok + 1) * d.d_tok];
                for (m, &e) in mean.iter_mut().zip(row) {
                    if w != 0.0 {
                        *m += w * e;
                    }
                }
            }
        }
        let pre = matmul_raw(&mean, self.prefix_proj.data(), 1, d.d_tok, d.d_h);
        pre.iter()
            .zip(ctx_part)
            .zip(self.hidden_bias.data())
            .map(|((&p, &c), &b)| (p + c + b).tanh())
            .collect()
    }

    fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let d = self.dims;
        let mut logits = matmul_raw(h, self.out_proj.data(), 1, d.d_h, d.vocab);
        for (l, &b) in logits.iter_mut().zip(self.out_bias.data()) {
            *l += b;
        }
        logits
    }

    /// Full-vocabulary log-probabilities for the next token.
    pub fn next_token_logprobs(&self, ctx: &Context, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_tokens(prefix)?;
        let c = self.context_hidden(ctx)?;
        Ok(log_softmax_vec(&self.logits_from_hidden(&self.hidden(&c, prefix))))
    }

    /// Per-token `log π(tokens[t] | ctx, tokens[..t])` without a tape.
    pub fn logprobs(&self, ctx: &Context, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(PolicyError::EmptySequence);
        }
        self.check_tokens(tokens)?;
        let c = self.context_hidden(ctx)?;
        Ok((0..tokens.len())
            .map(|t| {
                let lsm = log_softmax_vec(&self.logits_from_hidden(&self.hidden(&c, &tokens[..t])));
                lsm[tokens[t]]
            })
            .collect())
    }

    /// Hidden activation after consuming all of `tokens`: the state that
    /// would predict the next token.
    pub fn last_hidden_state(&self, ctx: &Context, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let c = self.context_hidden(ctx)?;
        Ok(self.hidden(&c, tokens))
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.dims.vocab) {
            Some(&bad) => Err(VocabError::OutOfRange(bad, self.dims.vocab).into()),
            None => Ok(()),
        }
    }

    /// Versioned header, then each field as row-major little-endian `f64`.
    pub fn write_checkpoint(&self, vocab_hash: u64, w: &mut impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&vocab_hash.to_le_bytes())?;
        let d = self.dims;
        for v in [d.vocab, d.d_tok, d.d_img, d.n_queries, d.d_h] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for t in self.fields() {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read, expected_vocab_hash: Option<u64>) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(PolicyError::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CKPT_FORMAT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let read_u64 = |r: &mut dyn Read| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let hash = read_u64(r)?;
        if let Some(expected) = expected_vocab_hash {
            if hash != expected {
                return Err(PolicyError::Checkpoint(format!(
                    "vocab hash {hash:#x} does not match {expected:#x}"
                )));
            }
        }
        let mut dim = [0usize; 5];
        for d in &mut dim {
            *d = read_u64(r)? as usize;
        }
        let dims = PolicyDims {
            vocab: dim[0],
            d_tok: dim[1],
            d_img: dim[2],
            n_queries: dim[3],
            d_h: dim[4],
        };
        let mut p = Self::zeros(dims);
        for t in p.fields_mut() {
            for x in t.data_mut() {
                *x = f64::from_bits(read_u64(r)?);
            }
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(PolicyError::Checkpoint("trailing bytes".into()));
        }
        Ok(p)
    }

    pub fn to_checkpoint_bytes(&self, vocab_hash: u64) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(vocab_hash, &mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    /// Applies one optimizer step using gradients laid out like [`Self::fields`].
    pub fn apply(&mut self, opt: &mut crate::optim::Adam, grads: &[Vec<f64>]) {
        let mut blocks: Vec<&mut [f64]> = self.fields_mut().into_iter().map(|t| t.data_mut()).collect();
        opt.step(&mut blocks, grads);
    }
}

fn ctx_vector(dims: PolicyDims, ctx: &Context) -> Result<Vec<f64>> {
    if ctx.image_feat.len() != dims.d_img {
        return Err(PolicyError::ContextDim {
            expected: dims.d_img,
            got: ctx.image_feat.len(),
        });
    }
    if ctx.query_id >= dims.n_queries {
        return Err(PolicyError::QueryOutOfRange(ctx.query_id, dims.n_queries));
    }
    let mut v = ctx.image_feat.clone();
    v.extend((0..dims.n_queries).map(|q| if q == ctx.query_id { 1.0 } else { 0.0 }));
    Ok(v)
}

fn log_softmax_vec(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&v| v - lse).collect()
}

/// Policy weights registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PolicyVars {
    pub dims: PolicyDims,
    pub token_embed: Var,
    pub ctx_proj: Var,
    pub prefix_proj: Var,
    pub hidden_bias: Var,
    pub out_proj: Var,
    pub out_bias: Var,
}

impl PolicyVars {
    fn all(&self) -> [Var; 6] {
        [
            self.token_embed,
            self.ctx_proj,
            self.prefix_proj,
            self.hidden_bias,
            self.out_proj,
            self.out_bias,
        ]
    }

    /// Gradient blocks in [`PolicyParams::fields`] order.
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Vec<f64>> {
        self.all()
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.value(v).len()))
            .collect()
    }
}

/// Differentiable per-token log-probabilities of `tokens` under `ctx`.
pub fn token_logprobs(
    tape: &mut Tape,
    vars: &PolicyVars,
    ctx: &Context,
    tokens: &[TokenId],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(PolicyError::EmptySequence);
    }
    let d = vars.dims;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= d.vocab) {
        return Err(VocabError::OutOfRange(bad, d.vocab).into());
    }
    let n = tokens.len();
    // Row t averages the embeddings of tokens[..t]; row 0 is empty.
    let mut avg = vec![0.0; n * n];
    for t in 1..n {
        let w = 1.0 / t as f64;
        avg[t * n..t * n + t].fill(w);
    }
    let avg = tape.constant(Tensor::matrix(n, n, avg)?);
    let emb = tape.gather_rows(vars.token_embed, tokens)?;
    let prefix = tape.matmul(avg, emb)?;
    let pre = tape.matmul(prefix, vars.prefix_proj)?;
    let cv = tape.constant(Tensor::vector(ctx_vector(d, ctx)?));
    let c = tape.matmul(cv, vars.ctx_proj)?;
    let pre = tape.add_row(pre, c)?;
    let pre = tape.add_row(pre, vars.hidden_bias)?;
    let h = tape.tanh(pre);
    let logits = tape.matmul(h, vars.out_proj)?;
    let logits = tape.add_row(logits, vars.out_bias)?;
    let lsm = tape.log_softmax(logits)?;
    Ok(tape.pick(lsm, tokens)?)
}

/// Sequence log-probability `log π(o | q, x)`, the sample-level entropy surrogate.
pub fn sequence_entropy_term(
    tape: &mut Tape,
    vars: &PolicyVars,
    ctx: &Context,
    tokens: &[TokenId],
) -> Result<Var> {
    let lp = token_logprobs(tape, vars, ctx, tokens)?;
    Ok(tape.sum(lp))
}

/// Which image a rollout was sampled on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Anchor,
    Positive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    /// Untempered behavior-policy log-probs recorded at sampling time.
    pub old_logps: Vec<f64>,
    pub source: Source,
    pub reward: f64,
    pub advantage: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Decoding {
    /// Argmax at every step (the zero-temperature limit).
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub decoding: Decoding,
    pub max_len: usize,
    pub grammar_mask: bool,
}

/// Closed-world answer constraint: the answer span must spell one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerConstraint {
    pub candidates: Vec<Vec<TokenId>>,
}

/// Decode-time tag grammar: each region opens at most once, closes only when
/// it is the innermost open region, and `<eos>` needs every region closed.
#[derive(Debug, Clone)]
pub struct GrammarState<'a> {
    stack: Vec<Tag>,
    opened: Vec<Tag>,
    constraint: Option<&'a AnswerConstraint>,
    answer_so_far: Vec<TokenId>,
}

impl<'a> GrammarState<'a> {
    pub fn new(constraint: Option<&'a AnswerConstraint>) -> Self {
        Self {
            stack: Vec::new(),
            opened: Vec::new(),
            constraint,
            answer_so_far: Vec::new(),
        }
    }

    fn in_constrained_answer(&self) -> Option<&'a AnswerConstraint> {
        match self.stack.last() {
            Some(Tag::Answer) => self.constraint,
            _ => None,
        }
    }

    pub fn allows(&self, tok: TokenId) -> bool {
        if tok == EOS_ID {
            return self.stack.is_empty();
        }
        if tok < STRUCTURAL_COUNT {
            let tag = Tag::ALL[tok / 2];
            let opening = tok % 2 == 0;
            if opening {
                return !self.opened.contains(&tag) && self.in_constrained_answer().is_none();
            }
            if self.stack.last() != Some(&tag) {
                return false;
            }
            return match self.in_constrained_answer() {
                Some(c) => c.candidates.iter().any(|cand| *cand == self.answer_so_far),
                None => true,
            };
        }
        match self.in_constrained_answer() {
            Some(c) => {
                let k = self.answer_so_far.len();
                c.candidates.iter().any(|cand| {
                    cand.len() > k && cand[..k] == self.answer_so_far[..] && cand[k] == tok
                })
            }
            None => true,
        }
    }

    pub fn advance(&mut self, tok: TokenId) {
        if tok < STRUCTURAL_COUNT && tok != EOS_ID {
            let tag = Tag::ALL[tok / 2];
            if tok % 2 == 0 {
                self.stack.push(tag);
                self.opened.push(tag);
            } else if self.stack.last() == Some(&tag) {
                self.stack.pop();
            }
        } else if self.stack.last() == Some(&Tag::Answer) {
            self.answer_so_far.push(tok);
        }
    }
}

/// Draws one rollout autoregressively. `old_logps` are the untempered,
/// unmasked policy log-probs of the chosen tokens.
pub fn sample(
    params: &PolicyParams,
    ctx: &Context,
    cfg: &SampleConfig,
    constraint: Option<&AnswerConstraint>,
    source: Source,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    if let Decoding::Sample { temperature } = cfg.decoding {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(PolicyError::InvalidTemperature(temperature));
        }
    }
    let c = params.context_hidden(ctx)?;
    let mut grammar = GrammarState::new(constraint);
    let mut tokens = Vec::with_capacity(cfg.max_len);
    let mut old_logps = Vec::with_capacity(cfg.max_len);
    let mut weights = vec![0.0; params.dims.vocab];
    for _ in 0..cfg.max_len {
        let lsm = log_softmax_vec(&params.logits_from_hidden(&params.hidden(&c, &tokens)));
        let allowed = |j: usize| !cfg.grammar_mask || grammar.allows(j);
        let tok = match cfg.decoding {
            Decoding::Greedy => {
                let mut best: Option<usize> = None;
                for j in 0..lsm.len() {
                    if allowed(j) && best.is_none_or(|b| lsm[j] > lsm[b]) {
                        best = Some(j);
                    }
                }
                best.unwrap_or(EOS_ID)
            }
            Decoding::Sample { temperature } => {
                let max = (0..lsm.len())
                    .filter(|&j| allowed(j))
                    .map(|j| lsm[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, w) in weights.iter_mut().enumerate() {
                    *w = if allowed(j) {
                        ((lsm[j] - max) / temperature).exp()
                    } else {
                        0.0
                    };
                    total += *w;
                }
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = None;
                for (j, &w) in weights.iter().enumerate() {
                    if w > 0.0 {
                        acc += w;
                        pick = Some(j);
                        if u < acc {
                            break;
                        }
                    }
                }
                pick.unwrap_or(EOS_ID)
            }
        };
        tokens.push(tok);
        old_logps.push(lsm[tok]);
        grammar.advance(tok);
        if tok == EOS_ID {
            break;
        }
    }
    Ok(Rollout {
        tokens,
        old_logps,
        source,
        reward: 0.0,
        advantage: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn dims() -> PolicyDims {
        PolicyDims {
            vocab: STRUCTURAL_COUNT + 5,
            d_tok: 4,
            d_img: 3,
            n_queries: 2,
            d_h: 6,
        }
    }

    fn ctx() -> Context {
        Context::new(vec![0.5, -0.2, 0.8], QUERY_OPEN)
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(dims());
        let lp = p.logprobs(&ctx(), &[13, 14, 0, 12]).unwrap();
        let expected = -(dims().vocab as f64).ln();
        for v in lp {
            assert!((v - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn tape_and_incremental_paths_agree_bitwise() {
        let p = PolicyParams::init(dims(), &mut seeded(3));
        let toks = [0, 13, 14, 15, 1, 2, 16, 3, 12];
        let fast = p.logprobs(&ctx(), &toks).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let lp = token_logprobs(&mut tape, &vars, &ctx(), &toks).unwrap();
        let slow = tape.value(lp).data();
        for (a, b) in fast.iter().zip(slow) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn entropy_term_of_uniform_policy() {
        let p = PolicyParams::zeros(dims());
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let h = sequence_entropy_term(&mut tape, &vars, &ctx(), &[13, 14, 15]).unwrap();
        let expected = -3.0 * (dims().vocab as f64).ln();
        assert!((tape.value(h).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocab_and_empty_are_errors() {
        let p = PolicyParams::zeros(dims());
        assert!(matches!(
            p.logprobs(&ctx(), &[999]),
            Err(PolicyError::Vocab(_))
        ));
        assert!(matches!(
            p.logprobs(&ctx(), &[]),
            Err(PolicyError::EmptySequence)
        ));
        let bad = Context::new(vec![0.0; 2], 0);
        assert!(matches!(
            p.logprobs(&bad, &[13]),
            Err(PolicyError::ContextDim { .. })
        ));
    }

    #[test]
    fn last_hidden_of_zero_weights_is_tanh_bias() {
        let mut p = PolicyParams::zeros(dims());
        let bias: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.7).collect();
        p.hidden_bias = Tensor::vector(bias.clone());
        let h = p.last_hidden_state(&ctx(), &[13, 14]).unwrap();
        for (a, b) in h.iter().zip(&bias) {
            assert_eq!(*a, b.tanh());
        }
    }

    #[test]
    fn image_feature_changes_logprobs() {
        let p = PolicyParams::init(dims(), &mut seeded(5));
        let other = Context::new(vec![-0.9, 0.1, 0.0], QUERY_OPEN);
        assert_ne!(
            p.logprobs(&ctx(), &[13, 14]).unwrap(),
            p.logprobs(&other, &[13, 14]).unwrap()
        );
        let mut frozen = p.clone();
        frozen.ctx_proj = Tensor::zeros(frozen.ctx_proj.shape().to_vec());
        assert_eq!(
            frozen.logprobs(&ctx(), &[13, 14]).unwrap(),
            frozen.logprobs(&other, &[13, 14]).unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = PolicyParams::init(dims(), &mut seeded(11));
        let bytes = p.to_checkpoint_bytes(42);
        let back = PolicyParams::read_checkpoint(&mut bytes.as_slice(), Some(42)).unwrap();
        assert_eq!(back, p);
        assert!(PolicyParams::read_checkpoint(&mut bytes.as_slice(), Some(43)).is_err());
        let mut truncated = &bytes[..bytes.len() - 1];
        assert!(PolicyParams::read_checkpoint(&mut truncated, None).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = PolicyParams::init(dims(), &mut seeded(1));
        let cfg = SampleConfig {
            decoding: Decoding::Sample { temperature: 1.0 },
            max_len: 12,
            grammar_mask: false,
        };
        let a = sample(&p, &ctx(), &cfg, None, Source::Anchor, &mut seeded(9)).unwrap();
        let b = sample(&p, &ctx(), &cfg, None, Source::Anchor, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), a.old_logps.len());
        assert!(a.old_logps.iter().all(|&l| l <= 0.0));
        // recorded log-probs are those of the untempered policy
        assert_eq!(a.old_logps, p.logprobs(&ctx(), &a.tokens).unwrap());
    }

    #[test]
    fn greedy_is_reproducible_and_rejects_bad_temperature() {
        let p = PolicyParams::init(dims(), &mut seeded(2));
        let cfg = SampleConfig {
            decoding: Decoding::Greedy,
            max_len: 10,
            grammar_mask: true,
        };
        let a = sample(&p, &ctx(), &cfg, None, Source::Anchor, &mut seeded(1)).unwrap();
        let b = sample(&p, &ctx(), &cfg, None, Source::Anchor, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        let hot = SampleConfig {
            decoding: Decoding::Sample { temperature: 0.0 },
            ..cfg
        };
        assert!(sample(&p, &ctx(), &hot, None, Source::Anchor, &mut seeded(1)).is_err());
    }

    #[test]
    fn grammar_closes_only_open_tags() {
        let g = GrammarState::new(None);
        assert!(!g.allows(Tag::Answer.close_id()));
        assert!(g.allows(Tag::Answer.open_id()));
        assert!(g.allows(EOS_ID));
        let mut g = GrammarState::new(None);
        g.advance(Tag::Think.open_id());
        g.advance(Tag::Analysis.open_id());
        assert!(!g.allows(Tag::Think.close_id()));
        assert!(g.allows(Tag::Analysis.close_id()));
        assert!(!g.allows(EOS_ID));
        assert!(!g.allows(Tag::Think.open_id()));
    }

    #[test]
    fn constrained_answer_spells_a_candidate() {
        let c = AnswerConstraint {
            candidates: vec![vec![13, 14], vec![15, 16]],
        };
        let mut g = GrammarState::new(Some(&c));
        g.advance(Tag::Answer.open_id());
        assert!(g.allows(13) && g.allows(15));
        assert!(!g.allows(14) && !g.allows(Tag::Answer.close_id()));
        g.advance(13);
        assert!(g.allows(14) && !g.allows(16));
        g.advance(14);
        assert!(g.allows(Tag::Answer.close_id()));
        assert!(!g.allows(13));
    }

    #[test]
    fn masked_sampling_produces_grammatical_tags() {
        let p = PolicyParams::init(dims(), &mut seeded(4));
        let cfg = SampleConfig {
            decoding: Decoding::Sample { temperature: 1.5 },
            max_len: 40,
            grammar_mask: true,
        };
        for s in 0..50 {
            let r = sample(&p, &ctx(), &cfg, None, Source::Anchor, &mut seeded(s)).unwrap();
            let mut stack = Vec::new();
            for &t in &r.tokens {
                if t < EOS_ID {
                    let tag = Tag::ALL[t / 2];
                    if t % 2 == 0 {
                        stack.push(tag);
                    } else {
                        assert_eq!(stack.pop(), Some(tag));
                    }
                }
            }
        }
    }
}
