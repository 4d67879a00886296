//! Tabular autoregressive softmax policy over a small vocabulary.
//!
//! The next-token distribution is a softmax over a logit row addressed by
//! the last `k` tokens of the prefix, optionally paired with a privileged
//! answer slot. Rows that were never written read as zero logits.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::credit::{score_gradient, CategoricalDist};
use crate::error::{Error, Result};

/// Largest supported context window.
pub const MAX_WINDOW: usize = 8;
/// Largest supported vocabulary.
pub const MAX_VOCAB: usize = 64;

/// A vocabulary id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u8);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Token alphabet of the arithmetic-chain task for a given modulus.
///
/// Prompt operators are distinct from step operators so that a window over
/// the prompt never coincides with a window inside a written step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    modulus: u8,
}

impl Vocabulary {
    pub const BOS: Token = Token(0);
    pub const EOS: Token = Token(1);
    pub const PRIV_SEP: Token = Token(2);
    pub const MARKER: Token = Token(3);
    pub const SEP: Token = Token(4);
    pub const PLUS: Token = Token(5);
    pub const TIMES: Token = Token(6);
    pub const PROMPT_PLUS: Token = Token(7);
    pub const PROMPT_TIMES: Token = Token(8);
    const DIGIT_BASE: u8 = 9;

    pub fn new(modulus: u8) -> Result<Self> {
        if modulus < 2 || Self::DIGIT_BASE as usize + modulus as usize > MAX_VOCAB {
            return Err(Error::InvalidArgument(format!(
                "modulus {modulus} outside [2, {}]",
                MAX_VOCAB - Self::DIGIT_BASE as usize
            )));
        }
        Ok(Self { modulus })
    }

    pub fn modulus(&self) -> u8 {
        self.modulus
    }

    pub fn size(&self) -> usize {
        Self::DIGIT_BASE as usize + self.modulus as usize
    }

    pub fn digit(&self, value: u8) -> Token {
        assert!(value < self.modulus, "digit {value} outside modulus {}", self.modulus);
        Token(Self::DIGIT_BASE + value)
    }

    pub fn digit_value(&self, token: Token) -> Option<u8> {
        token.0.checked_sub(Self::DIGIT_BASE).filter(|&v| v < self.modulus)
    }

    pub fn name(&self, token: Token) -> String {
        match token {
            Self::BOS => "<bos>".into(),
            Self::EOS => "<eos>".into(),
            Self::PRIV_SEP => "<priv>".into(),
            Self::MARKER => "<wait>".into(),
            Self::SEP => ";".into(),
            Self::PLUS => "+".into(),
            Self::TIMES => "*".into(),
            Self::PROMPT_PLUS => "q+".into(),
            Self::PROMPT_TIMES => "q*".into(),
            t => match self.digit_value(t) {
                Some(v) => v.to_string(),
                None => format!("<{}>", t.0),
            },
        }
    }

    pub fn parse_name(&self, name: &str) -> Option<Token> {
        (0..self.size() as u8).map(Token).find(|&t| self.name(t) == name)
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.size() as u8).map(|t| self.name(Token(t))).collect()
    }

    pub fn render(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }
}

/// Row address: the last `k` prefix tokens plus the optional privileged slot.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey {
    window: [u8; MAX_WINDOW],
    k: u8,
    priv_slot: Option<u8>,
}

impl ContextKey {
    /// Builds the key for `prefix`, left-padding with `pad` when shorter than `k`.
    pub fn from_prefix(prefix: &[Token], k: usize, pad: Token, privileged: Option<Token>) -> Self {
        assert!((1..=MAX_WINDOW).contains(&k), "window {k} outside [1, {MAX_WINDOW}]");
        let mut window = [0u8; MAX_WINDOW];
        let take = prefix.len().min(k);
        let pad_len = k - take;
        for w in window.iter_mut().take(pad_len) {
            *w = pad.0;
        }
        for (dst, src) in window[pad_len..k].iter_mut().zip(&prefix[prefix.len() - take..]) {
            *dst = src.0;
        }
        Self {
            window,
            k: k as u8,
            priv_slot: privileged.map(|t| t.0),
        }
    }

    pub fn window(&self) -> &[u8] {
        &self.window[..self.k as usize]
    }

    pub fn privileged(&self) -> Option<Token> {
        self.priv_slot.map(Token)
    }

    pub fn is_privileged(&self) -> bool {
        self.priv_slot.is_some()
    }

    /// The same window without the privileged slot.
    pub fn student(&self) -> Self {
        Self {
            priv_slot: None,
            ..*self
        }
    }

    pub(crate) fn from_parts(window: &[u8], priv_slot: Option<u8>) -> Result<Self> {
        if window.is_empty() || window.len() > MAX_WINDOW {
            return Err(Error::InvalidArgument(format!("window length {}", window.len())));
        }
        let mut w = [0u8; MAX_WINDOW];
        w[..window.len()].copy_from_slice(window);
        Ok(Self {
            window: w,
            k: window.len() as u8,
            priv_slot,
        })
    }
}

impl fmt::Debug for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContextKey({:?}", self.window())?;
        if let Some(p) = self.priv_slot {
            write!(f, " | priv {p}")?;
        }
        write!(f, ")")
    }
}

/// Logit table of the policy. Rows for privileged keys hold offsets added
/// to the student row of the same window.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    window: usize,
    bos: Token,
    eos: Token,
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl PolicyParams {
    /// Fresh table over `vocab_size` symbols with BOS = 0 and EOS = 1
    /// (EOS = 0 for a single-symbol vocabulary).
    pub fn new(vocab_size: usize, window: usize) -> Result<Self> {
        let eos = Token(vocab_size.saturating_sub(1).min(1) as u8);
        Self::with_specials(vocab_size, window, Token(0), eos)
    }

    pub fn with_specials(vocab_size: usize, window: usize, bos: Token, eos: Token) -> Result<Self> {
        if vocab_size == 0 || vocab_size > MAX_VOCAB {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size {vocab_size} outside [1, {MAX_VOCAB}]"
            )));
        }
        if !(1..=MAX_WINDOW).contains(&window) {
            return Err(Error::InvalidArgument(format!(
                "window {window} outside [1, {MAX_WINDOW}]"
            )));
        }
        for t in [bos, eos] {
            if t.index() >= vocab_size {
                return Err(Error::InvalidToken {
                    token: t.0,
                    size: vocab_size,
                });
            }
        }
        Ok(Self {
            vocab_size,
            window,
            bos,
            eos,
            rows: BTreeMap::new(),
        })
    }

    pub fn for_vocabulary(vocab: &Vocabulary, window: usize) -> Result<Self> {
        Self::with_specials(vocab.size(), window, Vocabulary::BOS, Vocabulary::EOS)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn bos(&self) -> Token {
        self.bos
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn rows(&self) -> &BTreeMap<ContextKey, Vec<f64>> {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    fn check_token(&self, t: Token) -> Result<()> {
        if t.index() >= self.vocab_size {
            return Err(Error::InvalidToken {
                token: t.0,
                size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Key for a prefix; validates token ids.
    pub fn key(&self, prefix: &[Token], privileged: Option<Token>) -> Result<ContextKey> {
        for &t in prefix.iter().chain(privileged.iter()) {
            self.check_token(t)?;
        }
        Ok(self.key_unchecked(prefix, privileged))
    }

    pub(crate) fn key_unchecked(&self, prefix: &[Token], privileged: Option<Token>) -> ContextKey {
        ContextKey::from_prefix(prefix, self.window, self.bos, privileged)
    }

    pub fn logits(&self, key: &ContextKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    /// Overwrites one row.
    pub fn set_row(&mut self, key: ContextKey, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab_size {
            return Err(Error::SizeMismatch {
                expected: self.vocab_size,
                found: logits.len(),
            });
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite(format!("logits for {key:?}")));
        }
        if key.window().len() != self.window {
            return Err(Error::InvalidArgument(format!(
                "key {key:?} has the wrong window length"
            )));
        }
        self.rows.insert(key, logits);
        Ok(())
    }

    /// Student keys read their own row. Privileged keys share the student
    /// row at the same window and add their own row as an offset, so a
    /// privileged key without a row behaves exactly like the student.
    pub fn distribution_for_key(&self, key: &ContextKey) -> CategoricalDist {
        if key.is_privileged() {
            match (self.rows.get(&key.student()), self.rows.get(key)) {
                (Some(base), Some(offset)) => {
                    let z: Vec<f64> = base.iter().zip(offset).map(|(a, b)| a + b).collect();
                    return CategoricalDist::from_logits(&z);
                }
                (Some(row), None) | (None, Some(row)) => return CategoricalDist::from_logits(row),
                (None, None) => return CategoricalDist::uniform(self.vocab_size),
            }
        }
        match self.rows.get(key) {
            Some(row) => CategoricalDist::from_logits(row),
            None => CategoricalDist::uniform(self.vocab_size),
        }
    }

    /// Next-token distribution for a prefix, on the student or privileged branch.
    pub fn next_distribution(&self, prefix: &[Token], privileged: Option<Token>) -> Result<CategoricalDist> {
        Ok(self.distribution_for_key(&self.key(prefix, privileged)?))
    }
}

/// One sampled position of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledToken {
    pub token: Token,
    pub logprob: f64,
    pub entropy: f64,
}

/// A generated continuation of a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub steps: Vec<SampledToken>,
    /// Whether generation stopped on EOS rather than the length limit.
    pub terminated: bool,
}

impl Rollout {
    pub fn tokens(&self) -> Vec<Token> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.entropy).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Samples a continuation by inverse-CDF draws from `next_distribution`,
/// one uniform per position, stopping at EOS or `max_len` tokens.
pub fn sample_rollout<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[Token],
    max_len: usize,
    rng: &mut R,
    privileged: Option<Token>,
) -> Result<Rollout> {
    generate(params, prompt, max_len, rng, privileged, |_, _, dist| Ok(dist))
}

/// General generation loop.
///
/// `choose(position, prefix, policy_dist)` returns the distribution the token
/// at `position` is actually drawn from; recorded logprobs and entropies
/// always come from the policy distribution on the requested branch.
pub fn generate<R, F>(
    params: &PolicyParams,
    prompt: &[Token],
    max_len: usize,
    rng: &mut R,
    privileged: Option<Token>,
    mut choose: F,
) -> Result<Rollout>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &[Token], CategoricalDist) -> Result<CategoricalDist>,
{
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let mut prefix: Vec<Token> = prompt.to_vec();
    params.key(&prefix, privileged)?;
    let mut steps = Vec::with_capacity(max_len);
    let mut terminated = false;
    for pos in 0..max_len {
        let dist = params.distribution_for_key(&params.key_unchecked(&prefix, privileged));
        let u: f64 = rng.random();
        let draw_from = choose(pos, &prefix, dist.clone())?;
        if draw_from.len() != params.vocab_size() {
            return Err(Error::SizeMismatch {
                expected: params.vocab_size(),
                found: draw_from.len(),
            });
        }
        let idx = draw_from.sample_index(u);
        let token = Token(idx as u8);
        steps.push(SampledToken {
            token,
            logprob: dist.log_prob(idx),
            entropy: dist.entropy(),
        });
        prefix.push(token);
        if token == params.eos() {
            terminated = true;
            break;
        }
    }
    Ok(Rollout { steps, terminated })
}

/// Sparse gradient restricted to one row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGradient {
    pub key: ContextKey,
    pub values: Vec<f64>,
}

/// `∇ log p(token)` with respect to the addressed row: `e_token − softmax(row)`.
pub fn logprob_grad(
    params: &PolicyParams,
    prefix: &[Token],
    privileged: Option<Token>,
    token: Token,
) -> Result<RowGradient> {
    params.check_token(token)?;
    let key = params.key(prefix, privileged)?;
    let dist = params.distribution_for_key(&key);
    Ok(RowGradient {
        key,
        values: score_gradient(&dist, token.index()),
    })
}

/// Accumulated sparse gradient over rows, reduced in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl Gradient {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `scale * values` to the row for `key`.
    pub fn add(&mut self, key: ContextKey, scale: f64, values: &[f64]) {
        let row = self.rows.entry(key).or_insert_with(|| vec![0.0; values.len()]);
        for (r, v) in row.iter_mut().zip(values) {
            *r += scale * v;
        }
    }

    /// Adds `scale * (e_token − p)` without materializing the score vector.
    pub fn add_score(&mut self, key: ContextKey, scale: f64, dist: &CategoricalDist, token: usize) {
        let row = self.rows.entry(key).or_insert_with(|| vec![0.0; dist.len()]);
        for (j, (r, p)) in row.iter_mut().zip(dist.probs()).enumerate() {
            let e = if j == token { 1.0 } else { 0.0 };
            *r += scale * (e - p);
        }
    }

    pub fn rows(&self) -> &BTreeMap<ContextKey, Vec<f64>> {
        &self.rows
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().all(|r| r.iter().all(|&g| g == 0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.values().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Gradient ascent step `logits += learning_rate * gradient`.
pub fn apply_update(params: &mut PolicyParams, gradient: &Gradient, learning_rate: f64) -> Result<()> {
    if !learning_rate.is_finite() {
        return Err(Error::NonFinite("learning rate".into()));
    }
    for (key, row) in &gradient.rows {
        if row.len() != params.vocab_size {
            return Err(Error::SizeMismatch {
                expected: params.vocab_size,
                found: row.len(),
            });
        }
        if row.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient row {key:?}")));
        }
        if key.window().len() != params.window {
            return Err(Error::InvalidArgument(format!(
                "gradient key {key:?} has the wrong window length"
            )));
        }
    }
    if learning_rate == 0.0 {
        return Ok(());
    }
    for (key, row) in &gradient.rows {
        if row.iter().all(|&g| g == 0.0) {
            continue;
        }
        let logits = params.rows.entry(*key).or_insert_with(|| vec![0.0; row.len()]);
        for (z, g) in logits.iter_mut().zip(row) {
            *z += learning_rate * g;
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite(format!("logits after update of {key:?}")));
        }
    }
    Ok(())
}
