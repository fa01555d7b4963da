//! Tabular softmax policies keyed by the generation state.
//!
//! By default every state owns an independent logit row, so `J`, the surrogate and
//! the per-state divergences can be computed exactly by enumeration. A policy can
//! instead key rows by the prompt and the last `k` tokens (a context window), in
//! which case states sharing that suffix share parameters. Rows are created
//! lazily: a missing row behaves as all-zero logits (the uniform distribution).

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dist::{self, Distribution, Token, Vocab};
use crate::error::{Error, Result};
use crate::rng::hash_words;

/// Generation state: the prompt plus all previously generated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub prompt_id: u32,
    pub prefix: Vec<Token>,
}

impl StateKey {
    pub fn root(prompt_id: u32) -> Self {
        Self { prompt_id, prefix: Vec::new() }
    }

    pub fn new(prompt_id: u32, prefix: Vec<Token>) -> Self {
        Self { prompt_id, prefix }
    }

    /// Successor state after emitting `token`.
    pub fn child(&self, token: Token) -> Self {
        let mut prefix = Vec::with_capacity(self.prefix.len() + 1);
        prefix.extend_from_slice(&self.prefix);
        prefix.push(token);
        Self { prompt_id: self.prompt_id, prefix }
    }

    pub fn depth(&self) -> usize {
        self.prefix.len()
    }

    /// Hash that is stable across platforms and toolchains. The prefix length is
    /// folded in so that the encoding stays injective on `(prompt, prefix)`.
    pub fn stable_hash(&self) -> u64 {
        hash_words(
            [self.prompt_id as u64, self.prefix.len() as u64]
                .into_iter()
                .chain(self.prefix.iter().map(|t| *t as u64)),
        )
    }
}

/// Sparse gradient over `(state, token)` logits, stored as dense rows per state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseGrad {
    rows: BTreeMap<StateKey, Vec<f64>>,
}

impl SparseGrad {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, state: &StateKey, token: Token) -> f64 {
        self.rows.get(state).map_or(0.0, |r| r[token as usize])
    }

    pub fn row(&self, state: &StateKey) -> Option<&[f64]> {
        self.rows.get(state).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&StateKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Non-zero entries in `(state, token)` order.
    pub fn entries(&self) -> impl Iterator<Item = (&StateKey, Token, f64)> {
        self.rows
            .iter()
            .flat_map(|(k, row)| row.iter().enumerate().filter(|(_, g)| **g != 0.0).map(move |(a, g)| (k, a as Token, *g)))
    }

    pub fn add(&mut self, state: &StateKey, token: Token, value: f64, vocab: Vocab) {
        let row = self.rows.entry(state.clone()).or_insert_with(|| vec![0.0; vocab.size()]);
        row[token as usize] += value;
    }

    /// Adds `coef * ∇ log π(token | state)`, i.e. `coef * (1{b = token} - π(b|state))`.
    pub fn add_score(&mut self, state: &StateKey, token: Token, coef: f64, dist: &Distribution) {
        if coef == 0.0 {
            return;
        }
        let row = self.rows.entry(state.clone()).or_insert_with(|| vec![0.0; dist.len()]);
        for (b, (g, p)) in row.iter_mut().zip(dist.probs()).enumerate() {
            let indicator = if b == token as usize { 1.0 } else { 0.0 };
            *g += coef * (indicator - p);
        }
    }

    /// `self += scale * other`, visiting rows in key order.
    pub fn add_scaled(&mut self, other: &SparseGrad, scale: f64) {
        for (k, row) in &other.rows {
            let dst = self.rows.entry(k.clone()).or_insert_with(|| vec![0.0; row.len()]);
            for (d, g) in dst.iter_mut().zip(row) {
                *d += scale * g;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for row in self.rows.values_mut() {
            for g in row.iter_mut() {
                *g *= c;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.values().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.rows.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn first_non_finite(&self) -> Option<(&StateKey, Token, f64)> {
        self.rows
            .iter()
            .find_map(|(k, row)| row.iter().position(|g| !g.is_finite()).map(|a| (k, a as Token, row[a])))
    }
}

/// State-keyed logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    window: Option<usize>,
    table: HashMap<StateKey, Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab, window: None, table: HashMap::new() }
    }

    /// Policy whose rows are keyed by the prompt and the last `k` tokens.
    pub fn with_window(vocab: Vocab, k: usize) -> Self {
        Self { vocab, window: Some(k), table: HashMap::new() }
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    /// Key of the parameter row used at `state`. Idempotent.
    pub fn row_key<'a>(&self, state: &'a StateKey) -> Cow<'a, StateKey> {
        match self.window {
            Some(k) if state.prefix.len() > k => {
                Cow::Owned(StateKey::new(state.prompt_id, state.prefix[state.prefix.len() - k..].to_vec()))
            }
            _ => Cow::Borrowed(state),
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn num_rows(&self) -> usize {
        self.table.len()
    }

    /// Explicit logits for `state`, if the row has been materialised.
    pub fn logits(&self, state: &StateKey) -> Option<&[f64]> {
        self.table.get(self.row_key(state).as_ref()).map(Vec::as_slice)
    }

    /// Logits for `state`, zeros when the row is absent.
    pub fn logits_or_zero(&self, state: &StateKey) -> Vec<f64> {
        self.logits(state).map_or_else(|| vec![0.0; self.vocab.size()], <[f64]>::to_vec)
    }

    pub fn set_logits(&mut self, state: StateKey, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab.size() {
            return Err(Error::LengthMismatch { left: logits.len(), right: self.vocab.size() });
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidLogits(format!("non-finite logit for {state:?}")));
        }
        let key = self.row_key(&state).into_owned();
        self.table.insert(key, logits);
        Ok(())
    }

    /// Sets the row so that its softmax equals `probs` (all entries must be > 0).
    pub fn set_probs(&mut self, state: StateKey, probs: &[f64]) -> Result<()> {
        let d = Distribution::new(probs.to_vec())?;
        if d.probs().iter().any(|p| *p <= 0.0) {
            return Err(Error::InvalidDistribution("set_probs needs strictly positive probabilities".into()));
        }
        self.set_logits(state, d.probs().iter().map(|p| p.ln()).collect())
    }

    pub fn distribution(&self, state: &StateKey) -> Distribution {
        match self.logits(state) {
            Some(row) => dist::softmax(row).expect("policy rows hold finite logits"),
            None => Distribution::uniform(self.vocab),
        }
    }

    /// `ln π(token | state)` via log-sum-exp.
    pub fn logprob(&self, state: &StateKey, token: Token) -> f64 {
        match self.logits(state) {
            Some(row) => row[token as usize] - dist::log_sum_exp(row),
            None => -(self.vocab.size() as f64).ln(),
        }
    }

    /// `∂ ln π(token|state) / ∂ logit(state, b) = 1{b = token} - π(b|state)`.
    pub fn logprob_grad(&self, state: &StateKey, token: Token) -> SparseGrad {
        let mut g = SparseGrad::new();
        g.add_score(&self.row_key(state), token, 1.0, &self.distribution(state));
        g
    }

    /// Rows in key order.
    pub fn rows(&self) -> Vec<(&StateKey, &[f64])> {
        let mut rows: Vec<_> = self.table.iter().map(|(k, v)| (k, v.as_slice())).collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        rows
    }

    fn row_mut(&mut self, state: &StateKey) -> &mut Vec<f64> {
        let n = self.vocab.size();
        let key = self.row_key(state).into_owned();
        self.table.entry(key).or_insert_with(|| vec![0.0; n])
    }

    /// Serialises to the snapshot text format.
    ///
    /// ```text
    /// # trustlab tabular policy v1
    /// vocab <size>
    /// window <k>            (only for context-window policies)
    /// <prompt_id>\t<prefix tokens, space separated, or ->\t<logits, space separated>
    /// ```
    /// Logits are written with Rust's shortest round-trip formatting, so parsing
    /// the text reproduces every double exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# trustlab tabular policy v1\n");
        let _ = writeln!(out, "vocab {}", self.vocab.size());
        if let Some(k) = self.window {
            let _ = writeln!(out, "window {k}");
        }
        for (k, row) in self.rows() {
            let prefix = if k.prefix.is_empty() {
                "-".to_string()
            } else {
                k.prefix.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
            };
            let logits = row.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
            let _ = writeln!(out, "{}\t{}\t{}", k.prompt_id, prefix, logits);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vocab = None;
        let mut policy: Option<TabularPolicy> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let perr = |msg: String| Error::Parse { line: line_no, msg };
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("vocab ") {
                let size: usize = rest.trim().parse().map_err(|e| perr(format!("bad vocab: {e}")))?;
                let v = Vocab::new(size)?;
                vocab = Some(v);
                policy = Some(TabularPolicy::new(v));
                continue;
            }
            let p = policy.as_mut().ok_or_else(|| perr("row before vocab line".into()))?;
            if let Some(rest) = line.strip_prefix("window ") {
                p.window = Some(rest.trim().parse().map_err(|e| perr(format!("bad window: {e}")))?);
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(pid), Some(prefix), Some(logits), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(perr("expected 3 tab-separated fields".into()));
            };
            let prompt_id: u32 = pid.parse().map_err(|e| perr(format!("bad prompt id: {e}")))?;
            let prefix: Vec<Token> = if prefix == "-" {
                Vec::new()
            } else {
                prefix
                    .split(' ')
                    .map(|t| t.parse::<Token>().map_err(|e| perr(format!("bad token: {e}"))))
                    .collect::<Result<_>>()?
            };
            let logits: Vec<f64> = logits
                .split(' ')
                .map(|x| x.parse::<f64>().map_err(|e| perr(format!("bad logit: {e}"))))
                .collect::<Result<_>>()?;
            if prefix.iter().any(|t| *t as usize >= vocab.map_or(0, Vocab::size)) {
                return Err(perr("token outside vocab".into()));
            }
            p.set_logits(StateKey { prompt_id, prefix }, logits).map_err(|e| perr(e.to_string()))?;
        }
        policy.ok_or_else(|| Error::Parse { line: 0, msg: "missing vocab line".into() })
    }
}

/// First-order optimiser settings. Updates ascend the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { .. } => OptimizerConfig::Sgd { lr },
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => OptimizerConfig::Adam { lr, beta1, beta2, eps },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamRow {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u32>,
}

/// Per-entry optimiser state (Adam moments and step counts).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    adam: HashMap<StateKey, AdamRow>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_rows(&self) -> usize {
        self.adam.len()
    }
}

/// Applies one ascent step. Entries absent from `grad` are untouched; Adam
/// moments advance only for entries with a non-zero gradient.
pub fn apply_update(
    policy: &mut TabularPolicy,
    grad: &SparseGrad,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<()> {
    if let Some((k, a, g)) = grad.first_non_finite() {
        return Err(Error::GradientBlowup(format!("gradient {g} at state {k:?}, token {a}")));
    }
    for (key, g_row) in grad.rows() {
        if g_row.iter().all(|g| *g == 0.0) {
            continue;
        }
        let key = &policy.row_key(key).into_owned();
        match *config {
            OptimizerConfig::Sgd { lr } => {
                let row = policy.row_mut(key);
                for (x, g) in row.iter_mut().zip(g_row) {
                    *x += lr * g;
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let n = g_row.len();
                let st = state
                    .adam
                    .entry(key.clone())
                    .or_insert_with(|| AdamRow { m: vec![0.0; n], v: vec![0.0; n], steps: vec![0; n] });
                let row = policy.row_mut(key);
                for b in 0..n {
                    let g = g_row[b];
                    if g == 0.0 {
                        continue;
                    }
                    st.steps[b] += 1;
                    let t = st.steps[b] as i32;
                    st.m[b] = beta1 * st.m[b] + (1.0 - beta1) * g;
                    st.v[b] = beta2 * st.v[b] + (1.0 - beta2) * g * g;
                    let m_hat = st.m[b] / (1.0 - beta1.powi(t));
                    let v_hat = st.v[b] / (1.0 - beta2.powi(t));
                    row[b] += lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        if let Some(x) = policy.table[key].iter().find(|x| !x.is_finite()) {
            return Err(Error::GradientBlowup(format!("logit became {x} at state {key:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(n: usize) -> Vocab {
        Vocab::new(n).unwrap()
    }

    #[test]
    fn fresh_policy_is_uniform() {
        let p = TabularPolicy::new(v(4));
        let s = StateKey::new(3, vec![1, 2]);
        assert_eq!(p.distribution(&s).probs(), &[0.25; 4]);
        assert_abs_diff_eq!(p.logprob(&s, 2), -(4f64.ln()), epsilon = 1e-15);
    }

    #[test]
    fn set_logits_and_row_independence() {
        let mut p = TabularPolicy::new(v(2));
        let s = StateKey::root(0);
        let other = StateKey::root(1);
        p.set_logits(s.clone(), vec![3f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p.distribution(&s).prob(0), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(p.logprob(&s, 0), 0.75f64.ln(), epsilon = 1e-15);
        assert_eq!(p.distribution(&other).probs(), &[0.5, 0.5]);
    }

    #[test]
    fn logprob_grad_uniform_binary() {
        let p = TabularPolicy::new(v(2));
        let s = StateKey::root(0);
        let g = p.logprob_grad(&s, 0);
        assert_eq!(g.get(&s, 0), 0.5);
        assert_eq!(g.get(&s, 1), -0.5);
        assert_eq!(g.num_rows(), 1);
    }

    #[test]
    fn sgd_step_is_ascent() {
        let mut p = TabularPolicy::new(v(3));
        let s = StateKey::root(0);
        let mut g = SparseGrad::new();
        g.add(&s, 0, 1.0, v(3));
        let mut st = OptimizerState::new();
        apply_update(&mut p, &g, &mut st, &OptimizerConfig::Sgd { lr: 1.0 }).unwrap();
        assert_eq!(p.logits(&s).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_grad_leaves_policy_unchanged() {
        let mut p = TabularPolicy::new(v(3));
        p.set_logits(StateKey::root(0), vec![0.1, 0.2, 0.3]).unwrap();
        let before = p.clone();
        let mut st = OptimizerState::new();
        apply_update(&mut p, &SparseGrad::new(), &mut st, &OptimizerConfig::default()).unwrap();
        assert_eq!(p, before);
        let mut zero = SparseGrad::new();
        zero.add(&StateKey::root(0), 1, 0.0, v(3));
        apply_update(&mut p, &zero, &mut st, &OptimizerConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = TabularPolicy::new(v(3));
        let s = StateKey::root(0);
        let mut g = SparseGrad::new();
        g.add(&s, 0, 0.37, v(3));
        g.add(&s, 1, -2.5, v(3));
        let mut st = OptimizerState::new();
        let cfg = OptimizerConfig::Adam { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        apply_update(&mut p, &g, &mut st, &cfg).unwrap();
        let row = p.logits(&s).unwrap();
        assert_abs_diff_eq!(row[0], 0.01, epsilon = 1e-4);
        assert_abs_diff_eq!(row[1], -0.01, epsilon = 1e-4);
        assert_eq!(row[2], 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = TabularPolicy::new(v(2));
        let mut g = SparseGrad::new();
        g.add(&StateKey::root(0), 0, f64::NAN, v(2));
        let err = apply_update(&mut p, &g, &mut OptimizerState::new(), &OptimizerConfig::default()).unwrap_err();
        assert!(err.to_string().contains("gradient blowup"));
    }

    #[test]
    fn snapshot_text_is_lossless() {
        let mut p = TabularPolicy::new(v(3));
        p.set_logits(StateKey::root(0), vec![0.1 + 0.2, -1e-300, 12345.678901234567]).unwrap();
        p.set_logits(StateKey::new(2, vec![0, 2, 1]), vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0]).unwrap();
        let text = p.to_text();
        let q = TabularPolicy::from_text(&text).unwrap();
        assert_eq!(p.rows().len(), q.rows().len());
        for ((k1, r1), (k2, r2)) in p.rows().into_iter().zip(q.rows()) {
            assert_eq!(k1, k2);
            let b1: Vec<u64> = r1.iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u64> = r2.iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn snapshot_parse_errors_name_the_line() {
        let err = TabularPolicy::from_text("vocab 2\n0\t-\t0.0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(TabularPolicy::from_text("0\t-\t0 0\n").is_err());
    }

    #[test]
    fn stable_hash_separates_prefixes() {
        let a = StateKey::new(0, vec![1, 2]);
        let b = StateKey::new(0, vec![2, 1]);
        let c = StateKey::new(1, vec![1, 2]);
        assert_ne!(a.stable_hash(), b.stable_hash());
        assert_ne!(a.stable_hash(), c.stable_hash());
        assert_eq!(a.stable_hash(), StateKey::new(0, vec![1, 2]).stable_hash());
    }
}
