//! The noise-predictor abstraction, classifier-free guidance and the
//! closed-form consistency noise.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::plan::tokenize;
use crate::schedule::DiffusionSchedule;
use crate::tensor::LatentTensor;

/// Text conditioning for one prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    tokens: Vec<String>,
    /// Aspect text (lowercase) → semantic label, for backends that use labels.
    label_bindings: BTreeMap<String, String>,
}

impl Conditioning {
    pub fn new(tokens: Vec<String>, label_bindings: BTreeMap<String, String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("conditioning needs at least one token".into()));
        }
        let label_bindings = label_bindings
            .into_iter()
            .map(|(k, v)| (k.to_lowercase(), v))
            .collect();
        Ok(Self {
            tokens,
            label_bindings,
        })
    }

    /// Tokenizes `prompt` and keeps the vocabulary entries that occur in it.
    pub fn from_prompt(prompt: &str, vocabulary: &BTreeMap<String, String>) -> Result<Self> {
        Self::from_tokens(tokenize(prompt), vocabulary)
    }

    pub fn from_tokens(tokens: Vec<String>, vocabulary: &BTreeMap<String, String>) -> Result<Self> {
        let mut cond = Self::new(tokens, BTreeMap::new())?;
        cond.label_bindings = vocabulary
            .iter()
            .filter(|(text, _)| !find_phrase(&cond.tokens, text).is_empty())
            .map(|(k, v)| (k.to_lowercase(), v.clone()))
            .collect();
        Ok(cond)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn label_bindings(&self) -> &BTreeMap<String, String> {
        &self.label_bindings
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Every occurrence of every bound aspect, with its label.
    pub fn bound_spans(&self) -> Vec<(Range<usize>, &str)> {
        let mut out: Vec<(Range<usize>, &str)> = self
            .label_bindings
            .iter()
            .flat_map(|(text, label)| {
                find_phrase(&self.tokens, text)
                    .into_iter()
                    .map(move |r| (r, label.as_str()))
            })
            .collect();
        out.sort_by_key(|(r, _)| (r.start, r.end));
        out
    }
}

/// Case-insensitive occurrences of the whitespace-separated `phrase`.
fn find_phrase(tokens: &[String], phrase: &str) -> Vec<Range<usize>> {
    let words: Vec<String> = tokenize(phrase).iter().map(|w| w.to_lowercase()).collect();
    if words.is_empty() || words.len() > tokens.len() {
        return Vec::new();
    }
    (0..=tokens.len() - words.len())
        .filter(|&i| {
            words
                .iter()
                .enumerate()
                .all(|(k, w)| tokens[i + k].to_lowercase() == *w)
        })
        .map(|i| i..i + words.len())
        .collect()
}

/// One ε prediction plus any per-token attention maps the backend exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub epsilon: LatentTensor,
    pub token_maps: Vec<AttentionMap>,
}

impl PredictionResult {
    pub fn new(epsilon: LatentTensor) -> Self {
        Self {
            epsilon,
            token_maps: Vec::new(),
        }
    }

    pub fn map_for(&self, token_index: usize) -> Option<&AttentionMap> {
        self.token_maps.iter().find(|m| m.token_index == token_index)
    }
}

/// The ε_θ interface. `cond = None` requests the unconditional prediction.
pub trait NoisePredictor: Send + Sync {
    fn name(&self) -> &str;

    fn predict(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: Option<&Conditioning>,
    ) -> Result<PredictionResult>;

    /// Whether callers may issue predictions from several threads at once.
    fn concurrent_safe(&self) -> bool {
        false
    }

    /// Guided prediction; backends that guide internally may override this.
    fn predict_guided(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning,
        guidance: f64,
    ) -> Result<PredictionResult> {
        guided_epsilon(self, z_t, t, cond, guidance)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn predict(&self, z_t: &LatentTensor, t: usize, cond: Option<&Conditioning>) -> Result<PredictionResult> {
        (**self).predict(z_t, t, cond)
    }

    fn concurrent_safe(&self) -> bool {
        (**self).concurrent_safe()
    }

    fn predict_guided(&self, z_t: &LatentTensor, t: usize, cond: &Conditioning, guidance: f64) -> Result<PredictionResult> {
        (**self).predict_guided(z_t, t, cond, guidance)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn predict(&self, z_t: &LatentTensor, t: usize, cond: Option<&Conditioning>) -> Result<PredictionResult> {
        (**self).predict(z_t, t, cond)
    }

    fn concurrent_safe(&self) -> bool {
        (**self).concurrent_safe()
    }

    fn predict_guided(&self, z_t: &LatentTensor, t: usize, cond: &Conditioning, guidance: f64) -> Result<PredictionResult> {
        (**self).predict_guided(z_t, t, cond, guidance)
    }
}

/// `ε_u + g·(ε_c − ε_u)` from one unconditional and one conditional call.
/// Token maps come from the conditional call.
pub fn guided_epsilon<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z_t: &LatentTensor,
    t: usize,
    cond: &Conditioning,
    guidance: f64,
) -> Result<PredictionResult> {
    if !(guidance >= 0.0 && guidance.is_finite()) {
        return Err(Error::InvalidArgument(format!("guidance {guidance} must be finite and >= 0")));
    }
    let uncond = predictor.predict(z_t, t, None)?;
    let cond = predictor.predict(z_t, t, Some(cond))?;
    for r in [&uncond, &cond] {
        if r.epsilon.shape() != z_t.shape() {
            return Err(Error::backend(format!(
                "{} returned epsilon of shape {:?} for latent {:?}",
                predictor.name(),
                r.epsilon.shape().dims(),
                z_t.shape().dims()
            )));
        }
    }
    Ok(PredictionResult {
        epsilon: uncond.epsilon.axpby(1.0 - guidance, &cond.epsilon, guidance)?,
        token_maps: cond.token_maps,
    })
}

/// The noise that makes a single denoise step at `t` land exactly on `z_ref`:
/// `(z_t − sqrt(ab_t)·z_ref) / sqrt(1 − ab_t)`.
pub fn consistency_noise(
    z_t: &LatentTensor,
    z_ref: &LatentTensor,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<LatentTensor> {
    let ab = schedule.alpha_bar(t)?;
    if ab >= 1.0 {
        return Err(Error::DivisionByZero { t });
    }
    let r = (1.0 - ab).sqrt();
    z_t.axpby(1.0 / r, z_ref, -ab.sqrt() / r)
}

/// Returns the input latent as ε; used for transport conformance checks.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoPredictor;

impl NoisePredictor for EchoPredictor {
    fn name(&self) -> &str {
        "echo"
    }

    fn predict(&self, z_t: &LatentTensor, _t: usize, _cond: Option<&Conditioning>) -> Result<PredictionResult> {
        Ok(PredictionResult::new(z_t.clone()))
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Adds a fixed delay to every call of the wrapped predictor, standing in for
/// the cost of a network forward pass in timing experiments.
#[derive(Debug, Clone)]
pub struct Latency<P> {
    inner: P,
    delay: Duration,
}

impl<P: NoisePredictor> Latency<P> {
    pub fn new(inner: P, delay: Duration) -> Self {
        Self { inner, delay }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: NoisePredictor> NoisePredictor for Latency<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn predict(&self, z_t: &LatentTensor, t: usize, cond: Option<&Conditioning>) -> Result<PredictionResult> {
        std::thread::sleep(self.delay);
        self.inner.predict(z_t, t, cond)
    }

    fn concurrent_safe(&self) -> bool {
        self.inner.concurrent_safe()
    }
}
