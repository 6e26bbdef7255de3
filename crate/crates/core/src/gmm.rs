//! Isotropic Gaussian-mixture data worlds with an exact posterior-mean ε.
//!
//! For data `z0 ~ Σ π_k N(μ_k, s_k² I)` and `x = sqrt(ab)·z0 + sqrt(1−ab)·ε`,
//! the posterior over components has weights
//! `w_k ∝ π_k N(x; sqrt(ab)·μ_k, (ab·s_k² + 1 − ab) I)` and the per-component
//! posterior mean is `μ_k + sqrt(ab)·s_k² / (ab·s_k² + 1 − ab) · (x − sqrt(ab)·μ_k)`.
//! Conditioning restricts the mixture to the components shared by every
//! label bound in the prompt; no labels means the full mixture.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, MapOrigin};
use crate::error::{Error, Result};
use crate::predictor::{Conditioning, NoisePredictor, PredictionResult};
use crate::rng::{stream_rng, NoiseStream};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{LatentTensor, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub stddev: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub components: Vec<usize>,
    /// Half-open range of latent coordinates this label's tokens attend to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureWorld {
    pub dimension: usize,
    pub components: Vec<Component>,
    pub labels: BTreeMap<String, LabelSpec>,
    /// Aspect text → label; the default label bindings for prompts.
    #[serde(default)]
    pub vocabulary: BTreeMap<String, String>,
}

impl GaussianMixtureWorld {
    pub fn from_json(text: &str) -> Result<Self> {
        let world: Self = serde_json::from_str(text)?;
        world.validate()?;
        Ok(world)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dimension;
        if d == 0 || self.components.is_empty() {
            return Err(Error::InvalidArgument("world needs a positive dimension and components".into()));
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != d || c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("component {k}: mean must have {d} finite entries")));
            }
            if !(c.stddev > 0.0 && c.stddev.is_finite()) || !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidArgument(format!("component {k}: stddev and weight must be positive")));
            }
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("component weights sum to {total}, not 1")));
        }
        for (name, spec) in &self.labels {
            if spec.components.is_empty() || spec.components.iter().any(|&k| k >= self.components.len()) {
                return Err(Error::InvalidArgument(format!("label `{name}` needs valid component indices")));
            }
            if let Some([a, b]) = spec.block {
                if a >= b || b > d {
                    return Err(Error::InvalidArgument(format!("label `{name}` block {a}..{b} outside 0..{d}")));
                }
            }
        }
        for (word, label) in &self.vocabulary {
            if !self.labels.contains_key(label) {
                return Err(Error::UnknownConditioning(format!("{label} (vocabulary entry `{word}`)")));
            }
        }
        Ok(())
    }

    /// Mixture with one component per corner of `{−spread, +spread}^D`.
    /// Axis `i` gets labels `c{i}+` / `c{i}-` bound to `words[i] = (pos, neg)`,
    /// each attending to coordinate `i`.
    pub fn hypercube(spread: f64, stddev: f64, words: &[(&str, &str)]) -> Result<Self> {
        let d = words.len();
        if d == 0 || d > 16 {
            return Err(Error::InvalidArgument("hypercube world needs 1..=16 axes".into()));
        }
        let n = 1usize << d;
        let components = (0..n)
            .map(|k| Component {
                // bit i clear → positive side of axis i
                mean: (0..d).map(|i| if k >> i & 1 == 0 { spread } else { -spread }).collect(),
                stddev,
                weight: 1.0 / n as f64,
            })
            .collect();
        let mut labels = BTreeMap::new();
        let mut vocabulary = BTreeMap::new();
        for (i, (pos, neg)) in words.iter().enumerate() {
            for (sign, bit, word) in [("+", 0, pos), ("-", 1, neg)] {
                let name = format!("c{i}{sign}");
                labels.insert(
                    name.clone(),
                    LabelSpec {
                        components: (0..n).filter(|k| k >> i & 1 == bit).collect(),
                        block: Some([i, i + 1]),
                    },
                );
                vocabulary.insert(word.to_string(), name);
            }
        }
        let world = Self {
            dimension: d,
            components,
            labels,
            vocabulary,
        };
        world.validate()?;
        Ok(world)
    }

    /// The two-axis demo world: `red`/`blue` on axis 0, `cat`/`dog` on axis 1,
    /// component means `(±2, ±2)`, stddev 0.1.
    pub fn demo() -> Self {
        Self::hypercube(2.0, 0.1, &[("red", "blue"), ("cat", "dog")]).expect("demo world is valid")
    }

    pub fn latent_shape(&self) -> Shape {
        Shape::row(self.dimension)
    }

    /// Components selected by the labels bound in `cond` (all when none).
    pub fn select(&self, cond: Option<&Conditioning>) -> Result<Vec<usize>> {
        let all: BTreeSet<usize> = (0..self.components.len()).collect();
        let Some(cond) = cond else {
            return Ok(all.into_iter().collect());
        };
        let mut chosen = all;
        for label in cond.label_bindings().values() {
            let spec = self
                .labels
                .get(label)
                .ok_or_else(|| Error::UnknownConditioning(label.clone()))?;
            let subset: BTreeSet<usize> = spec.components.iter().copied().collect();
            chosen = chosen.intersection(&subset).copied().collect();
        }
        if chosen.is_empty() {
            let labels: Vec<&String> = cond.label_bindings().values().collect();
            return Err(Error::UnknownConditioning(format!(
                "{labels:?} share no mixture component"
            )));
        }
        Ok(chosen.into_iter().collect())
    }

    /// Exact `E[z0 | x]` under the components in `subset`, at noise level `ab`.
    pub fn posterior_mean(&self, x: &[f64], ab: f64, subset: &[usize]) -> Vec<f64> {
        let root = ab.sqrt();
        let d = self.dimension as f64;
        let mut log_w = Vec::with_capacity(subset.len());
        let mut means = Vec::with_capacity(subset.len());
        for &k in subset {
            let c = &self.components[k];
            let var = ab * c.stddev * c.stddev + (1.0 - ab);
            let mut dist2 = 0.0;
            let mut m = Vec::with_capacity(x.len());
            let gain = root * c.stddev * c.stddev / var;
            for (xi, mu) in x.iter().zip(&c.mean) {
                let r = xi - root * mu;
                dist2 += r * r;
                m.push(mu + gain * r);
            }
            log_w.push(c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - dist2 / (2.0 * var));
            means.push(m);
        }
        let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut out = vec![0.0; x.len()];
        for (wk, m) in w.iter().zip(&means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += wk / total * v;
            }
        }
        out
    }

    /// One block-indicator map per token of every bound aspect, on the
    /// latent's `height × width` grid.
    pub fn token_maps(&self, cond: &Conditioning, shape: Shape) -> Result<Vec<AttentionMap>> {
        let (h, w) = (shape.height, shape.width);
        let cells = h * w;
        let mut maps: BTreeMap<usize, AttentionMap> = BTreeMap::new();
        for (span, label) in cond.bound_spans() {
            let spec = self
                .labels
                .get(label)
                .ok_or_else(|| Error::UnknownConditioning(label.to_string()))?;
            let Some([a, b]) = spec.block else { continue };
            let mut values = vec![0.0; cells];
            for coord in a..b {
                values[coord % cells] = 1.0;
            }
            for token in span {
                let map = AttentionMap::new(h, w, values.clone(), token, MapOrigin::Target)?;
                maps.entry(token)
                    .and_modify(|m| *m = m.add(&map).expect("same grid"))
                    .or_insert(map);
            }
        }
        Ok(maps.into_values().collect())
    }

    /// Draws `z0` from the mixture restricted to `subset`.
    pub fn sample(&self, seed: u64, stream: u64, subset: &[usize]) -> Result<LatentTensor> {
        if subset.is_empty() {
            return Err(Error::InvalidArgument("cannot sample from an empty component set".into()));
        }
        let mut rng = stream_rng(seed, NoiseStream::Custom(stream));
        let total: f64 = subset.iter().map(|&k| self.components[k].weight).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = subset[subset.len() - 1];
        for &k in subset {
            u -= self.components[k].weight;
            if u < 0.0 {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        let data = c
            .mean
            .iter()
            .map(|mu| {
                let n: f64 = StandardNormal.sample(&mut rng);
                mu + c.stddev * n
            })
            .collect();
        LatentTensor::new(self.latent_shape(), data)
    }
}

/// Closed-form ε for a mixture world; `cond = None` is the unconditional
/// (full-mixture) prediction.
pub fn gmm_epsilon(
    world: &GaussianMixtureWorld,
    z_t: &LatentTensor,
    t: usize,
    cond: Option<&Conditioning>,
    schedule: &DiffusionSchedule,
) -> Result<PredictionResult> {
    if z_t.len() != world.dimension {
        return Err(Error::shape(&[world.dimension], &[z_t.len()]));
    }
    let ab = schedule.alpha_bar(t)?;
    if ab >= 1.0 {
        return Err(Error::DivisionByZero { t });
    }
    let subset = world.select(cond)?;
    let m = world.posterior_mean(z_t.data(), ab, &subset);
    let (root, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps = z_t
        .data()
        .iter()
        .zip(&m)
        .map(|(x, mi)| (x - root * mi) / noise)
        .collect();
    let token_maps = match cond {
        Some(c) => world.token_maps(c, z_t.shape())?,
        None => Vec::new(),
    };
    Ok(PredictionResult {
        epsilon: LatentTensor::new(z_t.shape(), eps)?,
        token_maps,
    })
}

/// [`gmm_epsilon`] bound to a world and schedule.
#[derive(Debug, Clone)]
pub struct GmmPredictor {
    world: GaussianMixtureWorld,
    schedule: DiffusionSchedule,
}

impl GmmPredictor {
    pub fn new(world: GaussianMixtureWorld, schedule: DiffusionSchedule) -> Result<Self> {
        world.validate()?;
        Ok(Self { world, schedule })
    }

    pub fn world(&self) -> &GaussianMixtureWorld {
        &self.world
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }
}

impl NoisePredictor for GmmPredictor {
    fn name(&self) -> &str {
        "gmm"
    }

    fn predict(&self, z_t: &LatentTensor, t: usize, cond: Option<&Conditioning>) -> Result<PredictionResult> {
        gmm_epsilon(&self.world, z_t, t, cond, &self.schedule)
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}
