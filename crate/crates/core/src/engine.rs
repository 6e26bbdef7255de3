//! The N-branch editing sampler.
//!
//! Branch 0 is the source branch and reconstructs the source latent exactly.
//! Branch `n` moves away from branch `n − 1` by the difference of their guided
//! noise predictions:
//!
//! ```text
//! z(n) = (x_n − sqrt(1 − ab)·(ε_n − ε_{n−1} + ε_cons)) / sqrt(ab)
//! ε_cons = (x_{n−1} − sqrt(ab)·ż(n−1)) / sqrt(1 − ab)
//! ```
//!
//! where `x_n` is the noisy latent of branch `n` and `ż(n−1)` is branch
//! `n − 1`'s clean estimate from the previous timestep (parallel mode) or from
//! the current one (sequential mode). Every branch is re-noised with the same
//! keyed noise, so a branch whose conditioning matches its predecessor tracks
//! it exactly.

use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{binarize, sum_maps, AttentionMap, BinaryMask};
use crate::error::{Error, Result};
use crate::grouping::{BranchPlan, BranchSpec, EditType, GroupingParams};
use crate::plan::{apply_actions_traced, diff_tokens, ActionKind, EditPlan, HunkKind};
use crate::predictor::{consistency_noise, Conditioning, NoisePredictor, PredictionResult};
use crate::sampler::{initial_latent, renoise_noise, renoise_step, source_update, SamplerConfig};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{encode_f32_le, LatentTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    /// Branches read their predecessor's previous-timestep latent and run concurrently.
    #[default]
    Parallel,
    /// Branches run in order and read their predecessor's current latent.
    Sequential,
}

impl ExecutionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionMode::Parallel => "parallel",
            ExecutionMode::Sequential => "sequential",
        }
    }
}

impl FromStr for ExecutionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(ExecutionMode::Parallel),
            "sequential" => Ok(ExecutionMode::Sequential),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{other}` (expected parallel or sequential)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub sampler: SamplerConfig,
    pub grouping: GroupingParams,
    pub mode: ExecutionMode,
}

impl EngineConfig {
    pub fn new(sampler: SamplerConfig) -> Self {
        Self {
            sampler,
            grouping: GroupingParams::default(),
            mode: ExecutionMode::Parallel,
        }
    }

    pub fn with_mode(mut self, mode: ExecutionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.grouping.validate()
    }
}

/// Consistency noise of branch `n` against its predecessor's clean estimate.
pub fn branch_consistency_noise(
    z_noisy: &LatentTensor,
    z_prev: &LatentTensor,
    tau: usize,
    schedule: &DiffusionSchedule,
) -> Result<LatentTensor> {
    consistency_noise(z_noisy, z_prev, tau, schedule)
}

/// `(z_noisy − sqrt(1 − ab)·(eps_n − eps_prev + eps_cons)) / sqrt(ab)`.
pub fn branch_update(
    z_noisy: &LatentTensor,
    eps_n: &LatentTensor,
    eps_prev: &LatentTensor,
    eps_cons: &LatentTensor,
    tau: usize,
    schedule: &DiffusionSchedule,
) -> Result<LatentTensor> {
    let ab = schedule.alpha_bar(tau)?;
    if ab <= 0.0 || ab >= 1.0 {
        return Err(Error::SingularSchedule {
            t: tau,
            reason: "branch update needs 0 < alpha_bar < 1",
        });
    }
    let (root, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let direction = eps_n.axpby(1.0, eps_prev, -1.0)?.axpby(1.0, eps_cons, 1.0)?;
    z_noisy.axpby(1.0 / root, &direction, -noise / root)
}

/// Self-attention features of one branch, `pixels × d` each.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionFeatures {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

/// What one branch exposes to its successor at a timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionContext {
    pub tokens: Vec<String>,
    pub token_maps: Vec<AttentionMap>,
    pub features: Option<SelfAttentionFeatures>,
}

impl AttentionContext {
    pub fn map_for(&self, token: usize) -> Option<&AttentionMap> {
        self.token_maps.iter().find(|m| m.token_index == token)
    }
}

/// For each token of `current`, the aligned token of `previous`: equal runs
/// align position-wise, replaced runs align to the corresponding (or last)
/// replaced token, inserted tokens have no partner.
fn align_tokens(previous: &[String], current: &[String]) -> Vec<Option<usize>> {
    let mut out = vec![None; current.len()];
    for h in diff_tokens(previous, current) {
        match h.kind {
            HunkKind::Equal | HunkKind::Replace => {
                for (k, j) in h.target.clone().enumerate() {
                    out[j] = Some(h.source.start + k.min(h.source.len() - 1));
                }
            }
            HunkKind::Insert | HunkKind::Delete => {}
        }
    }
    out
}

fn control(
    current: &AttentionContext,
    previous: &AttentionContext,
    edit_type: EditType,
    require_features: bool,
) -> Result<AttentionContext> {
    match edit_type {
        EditType::Global => Ok(current.clone()),
        EditType::RigidLocal => {
            // refine on aligned-equal tokens, replace on swapped tokens
            let partner = align_tokens(&previous.tokens, &current.tokens);
            let mut maps = Vec::new();
            for j in 0..current.tokens.len() {
                let injected = partner[j].and_then(|p| previous.map_for(p)).map(|m| {
                    let mut m = m.clone();
                    m.token_index = j;
                    m.origin = current.map_for(j).map(|c| c.origin).unwrap_or(m.origin);
                    m
                });
                if let Some(m) = injected.or_else(|| current.map_for(j).cloned()) {
                    maps.push(m);
                }
            }
            Ok(AttentionContext {
                tokens: current.tokens.clone(),
                token_maps: maps,
                features: current.features.clone(),
            })
        }
        EditType::NonRigidLocal => {
            let features = match (&current.features, &previous.features) {
                (Some(c), Some(p)) => Some(SelfAttentionFeatures {
                    q: c.q.clone(),
                    k: p.k.clone(),
                    v: p.v.clone(),
                }),
                _ if require_features => {
                    return Err(Error::MissingFeature(
                        "non-rigid control needs self-attention K/V from both branches".into(),
                    ))
                }
                _ => current.features.clone(),
            };
            let partner = align_tokens(&previous.tokens, &current.tokens);
            let mut maps = Vec::new();
            for j in 0..current.tokens.len() {
                let prev = partner[j].and_then(|p| previous.map_for(p));
                let merged = match (current.map_for(j), prev) {
                    (Some(c), Some(p)) => Some(c.add(p)?),
                    (Some(c), None) => Some(c.clone()),
                    (None, Some(p)) => {
                        let mut m = p.clone();
                        m.token_index = j;
                        Some(m)
                    }
                    (None, None) => None,
                };
                maps.extend(merged);
            }
            Ok(AttentionContext {
                tokens: current.tokens.clone(),
                token_maps: maps,
                features,
            })
        }
    }
}

/// Cross-branch attention control of branch `n` given branch `n − 1`.
///
/// * global: `current` unchanged.
/// * rigid-local: maps of tokens aligned with `previous` are taken from
///   `previous` (injected for unchanged tokens, swapped in for replaced ones).
/// * non-rigid-local: K and V come from `previous`, Q stays; each token map
///   gets its aligned predecessor map added.
pub fn apply_cross_branch_control(
    current: &AttentionContext,
    previous: &AttentionContext,
    edit_type: EditType,
) -> Result<AttentionContext> {
    control(current, previous, edit_type, true)
}

/// Nearest-neighbour lookup of `mask` for every element of `like`; the mask
/// grid spans the latent's `height × width` and is shared by all channels.
fn mask_weights(mask: &BinaryMask, like: &LatentTensor) -> Vec<bool> {
    let s = like.shape();
    let (mh, mw) = mask.grid();
    let mut out = Vec::with_capacity(like.len());
    for _c in 0..s.channels {
        for y in 0..s.height {
            for x in 0..s.width {
                out.push(mask.get(y * mh / s.height, x * mw / s.width));
            }
        }
    }
    out
}

/// `M̄ ⊙ z_n + (1 − M̄) ⊙ z_prev` for a binary mask.
pub fn blend_with_mask(z_n: &LatentTensor, z_prev: &LatentTensor, mask: &BinaryMask) -> Result<LatentTensor> {
    z_n.ensure_same_shape(z_prev)?;
    let keep = mask_weights(mask, z_n);
    let data = z_n
        .data()
        .iter()
        .zip(z_prev.data())
        .zip(keep)
        .map(|((a, b), k)| if k { *a } else { *b })
        .collect();
    LatentTensor::new(z_n.shape(), data)
}

/// Binarizes the sum of `masks` and blends; with no masks `z_n` is returned.
pub fn blend_latents(
    z_n: &LatentTensor,
    z_prev: &LatentTensor,
    masks: &[AttentionMap],
    threshold: f64,
) -> Result<LatentTensor> {
    z_n.ensure_same_shape(z_prev)?;
    match sum_maps(masks)? {
        Some(total) => blend_with_mask(z_n, z_prev, &binarize(&total, threshold)),
        None => Ok(z_n.clone()),
    }
}

/// Per-branch state carried across timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchState {
    pub n: usize,
    /// Clean estimate at the current step, `z(n)`.
    pub z_edt: LatentTensor,
    /// Noisy latent the current step started from.
    pub z_noisy: LatentTensor,
    /// Clean estimate from the previous step, `ż(n)`.
    pub z_prev_step: LatentTensor,
    pub eps_param: LatentTensor,
    pub accumulated_mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub branch: usize,
    pub step: usize,
    pub tau: usize,
    pub conditioning: String,
    pub z_noisy: LatentTensor,
    pub eps_param: LatentTensor,
    pub eps_cons: LatentTensor,
    /// The predecessor estimate this branch was calibrated against.
    pub z_ref: LatentTensor,
    pub z_edt: LatentTensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EditTrace {
    pub records: Vec<TraceRecord>,
}

impl EditTrace {
    pub fn get(&self, branch: usize, step: usize) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.branch == branch && r.step == step)
    }

    pub fn branch(&self, branch: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.branch == branch)
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            branch: usize,
            step: usize,
            tau: usize,
            conditioning: &'a str,
            shape: [usize; 3],
            z_noisy: String,
            eps_param: String,
            eps_cons: String,
            z_edt: String,
        }
        for r in &self.records {
            let rec = Record {
                branch: r.branch,
                step: r.step,
                tau: r.tau,
                conditioning: &r.conditioning,
                shape: r.z_edt.shape().dims(),
                z_noisy: encode_f32_le(r.z_noisy.data()),
                eps_param: encode_f32_le(r.eps_param.data()),
                eps_cons: encode_f32_le(r.eps_cons.data()),
                z_edt: encode_f32_le(r.z_edt.data()),
            };
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub final_latent: LatentTensor,
    pub states: Vec<BranchState>,
    pub trace: EditTrace,
}

fn predict_all<P: NoisePredictor + ?Sized>(
    predictor: &P,
    latents: &[LatentTensor],
    conds: &[&Conditioning],
    tau: usize,
    step: usize,
    guidance: f64,
    concurrent: bool,
) -> Result<Vec<PredictionResult>> {
    let one = |n: usize| {
        predictor
            .predict_guided(&latents[n], tau, conds[n], guidance)
            .map_err(|e| e.with_context(format!("branch {n}, step {step}")))
    };
    if concurrent && latents.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..latents.len()).map(|n| scope.spawn(move || one(n))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::backend("prediction thread panicked"))))
                .collect()
        })
    } else {
        (0..latents.len()).map(one).collect()
    }
}

fn span_maps(ctx: &AttentionContext, spans: &[Range<usize>]) -> Vec<AttentionMap> {
    spans
        .iter()
        .flat_map(|r| r.clone())
        .filter_map(|t| ctx.map_for(t).cloned())
        .collect()
}

/// Runs the source branch and `branches` over the sampler's timestep grid
/// and returns the last branch's final clean latent with a full trace.
pub fn run_edit<P: NoisePredictor + ?Sized>(
    z_src: &LatentTensor,
    cond_src: &Conditioning,
    branches: &[BranchSpec],
    predictor: &P,
    config: &EngineConfig,
) -> Result<EditOutcome> {
    config.validate()?;
    if branches.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let sampler = &config.sampler;
    let schedule = &sampler.schedule;
    let taus = sampler.timesteps()?;
    let n_total = branches.len() + 1;
    let mut conds: Vec<&Conditioning> = vec![cond_src];
    for b in branches {
        conds.push(b.conditioning()?);
    }
    let concurrent = config.mode == ExecutionMode::Parallel && predictor.concurrent_safe();

    // fallback blend masks when the backend exposes no maps: accumulated group unions
    let mut static_masks: Vec<Option<BinaryMask>> = vec![None];
    let mut acc: Option<BinaryMask> = None;
    for b in branches {
        acc = Some(match acc {
            Some(m) if m.grid() == b.mask.grid() => crate::attention::union(&m, &b.mask)?,
            _ => b.mask.clone(),
        });
        static_masks.push(acc.clone());
    }

    let start = initial_latent(sampler.seed, z_src);
    let mut x: Vec<LatentTensor> = vec![start; n_total];
    let mut z_hat: Vec<LatentTensor> = vec![z_src.clone(); n_total];
    let mut trace = EditTrace::default();
    let mut states: Vec<BranchState> = Vec::new();

    for (i, &tau) in taus.iter().enumerate() {
        let preds = predict_all(predictor, &x, &conds, tau, i, sampler.guidance, concurrent)?;
        let mut new: Vec<LatentTensor> = Vec::with_capacity(n_total);
        let mut eps_cons_all = Vec::with_capacity(n_total);
        let mut refs = Vec::with_capacity(n_total);
        let mut masks_used: Vec<Option<BinaryMask>> = vec![None];

        let (ec0, z0) = source_update(&x[0], z_src, tau, schedule)?;
        new.push(z0);
        eps_cons_all.push(ec0);
        refs.push(z_src.clone());

        let mut prev_ctx = AttentionContext {
            tokens: conds[0].tokens().to_vec(),
            token_maps: preds[0].token_maps.clone(),
            features: None,
        };
        let mut accumulated: Vec<AttentionMap> = Vec::new();
        for n in 1..n_total {
            let spec = &branches[n - 1];
            let z_ref = match config.mode {
                ExecutionMode::Parallel => z_hat[n - 1].clone(),
                ExecutionMode::Sequential if i == 0 => z_hat[n - 1].clone(),
                ExecutionMode::Sequential => new[n - 1].clone(),
            };
            let eps_cons = branch_consistency_noise(&x[n - 1], &z_ref, tau, schedule)?;
            let mut z = branch_update(&x[n], &preds[n].epsilon, &preds[n - 1].epsilon, &eps_cons, tau, schedule)?;

            let raw = AttentionContext {
                tokens: conds[n].tokens().to_vec(),
                token_maps: preds[n].token_maps.clone(),
                features: None,
            };
            let ctx = control(&raw, &prev_ctx, spec.edit_type, false)?;
            let mut branch_maps = span_maps(&ctx, &spec.target_spans);
            branch_maps.extend(span_maps(&prev_ctx, &spec.source_spans_prev));
            accumulated.extend(branch_maps);

            let mask = if spec.edit_type == EditType::Global {
                None
            } else {
                match sum_maps(&accumulated)? {
                    Some(total) => Some(binarize(&total, config.grouping.bin_threshold)),
                    None => static_masks[n].clone(),
                }
            };
            if let Some(m) = &mask {
                z = blend_with_mask(&z, &z_ref, m)?;
            }
            if !z.is_finite() {
                return Err(Error::InternalConsistency(format!(
                    "branch {n} produced a non-finite latent at step {i}"
                )));
            }
            masks_used.push(mask);
            new.push(z);
            eps_cons_all.push(eps_cons);
            refs.push(z_ref);
            prev_ctx = ctx;
        }

        for n in 0..n_total {
            trace.records.push(TraceRecord {
                branch: n,
                step: i,
                tau,
                conditioning: conds[n].text(),
                z_noisy: x[n].clone(),
                eps_param: preds[n].epsilon.clone(),
                eps_cons: eps_cons_all[n].clone(),
                z_ref: refs[n].clone(),
                z_edt: new[n].clone(),
            });
        }

        if i + 1 == taus.len() {
            states = (0..n_total)
                .map(|n| BranchState {
                    n,
                    z_edt: new[n].clone(),
                    z_noisy: x[n].clone(),
                    z_prev_step: z_hat[n].clone(),
                    eps_param: preds[n].epsilon.clone(),
                    accumulated_mask: masks_used[n].clone(),
                })
                .collect();
        } else {
            let noise = renoise_noise(sampler.seed, i, z_src);
            let next_tau = taus[i + 1];
            for n in 0..n_total {
                x[n] = renoise_step(&new[n], next_tau, &noise, schedule)?;
            }
        }
        z_hat = new;
    }

    Ok(EditOutcome {
        final_latent: z_hat.pop().expect("at least one branch"),
        states,
        trace,
    })
}

/// Per-token maps of the source and target prompts, read off one
/// conditional prediction each at the zero latent halfway through the
/// schedule.
pub fn probe_token_maps<P: NoisePredictor + ?Sized>(
    predictor: &P,
    source: &Conditioning,
    target: &Conditioning,
    shape: crate::tensor::Shape,
    schedule: &DiffusionSchedule,
) -> Result<(Vec<AttentionMap>, Vec<AttentionMap>)> {
    let z = LatentTensor::zeros(shape);
    let t = schedule.len().div_ceil(2).max(1);
    let mut src = predictor
        .predict(&z, t, Some(source))
        .map_err(|e| e.with_context("probing source maps"))?
        .token_maps;
    for m in &mut src {
        m.origin = crate::attention::MapOrigin::Source;
    }
    let tgt = predictor
        .predict(&z, t, Some(target))
        .map_err(|e| e.with_context("probing target maps"))?
        .token_maps;
    Ok((src, tgt))
}

/// Baseline that realises the edits one at a time: each edit is a separate
/// single-branch run whose source is the previous run's output.
pub fn run_sequential_repeat<P: NoisePredictor + ?Sized>(
    z_src: &LatentTensor,
    plan: &EditPlan,
    branch_plan: &BranchPlan,
    vocabulary: &std::collections::BTreeMap<String, String>,
    predictor: &P,
    config: &EngineConfig,
) -> Result<LatentTensor> {
    let edits = plan.edits();
    let mut current = z_src.clone();
    for k in 0..edits.len() {
        let before = apply_actions_traced(&plan.source_tokens, edits[..k].iter().copied())?;
        let after = apply_actions_traced(&plan.source_tokens, edits[..=k].iter().copied())?;
        let classified = branch_plan
            .classified
            .iter()
            .find(|c| c.edit == k)
            .ok_or_else(|| Error::InvalidArgument(format!("edit {k} was not classified")))?;
        let source_spans_prev = match (&edits[k].source, edits[k].action) {
            (Some(s), ActionKind::Swap | ActionKind::Delete) => {
                match (before.source_positions[s.start], before.source_positions[s.end - 1]) {
                    (Some(a), Some(b)) => vec![a..b + 1],
                    _ => Vec::new(),
                }
            }
            _ => Vec::new(),
        };
        let target_spans = match after.spans[k].clone() {
            r if r.is_empty() => Vec::new(),
            r => vec![r],
        };
        let branch = BranchSpec {
            index: 1,
            edit_type: classified.edit_type,
            members: vec![k],
            auxiliary: false,
            mask: classified.footprint.clone(),
            conditioning: Some(Conditioning::from_tokens(after.tokens.clone(), vocabulary)?),
            target_spans,
            source_spans_prev,
        };
        let cond_src = Conditioning::from_tokens(before.tokens, vocabulary)?;
        current = run_edit(&current, &cond_src, &[branch], predictor, config)?.final_latent;
    }
    Ok(current)
}
