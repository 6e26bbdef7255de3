//! Evaluation: pixel fidelity, directional text/image agreement and
//! per-aspect edit accuracy.
//!
//! Images are [`LatentTensor`]s with values in `[0, 1]`. Text/image
//! similarity goes through the [`Embedder`] trait; [`ToyEmbedder`] is a
//! deterministic stand-in for a pretrained joint embedding model.

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::BinaryMask;
use crate::error::{Error, Result};
use crate::plan::{tokenize, EditPlan};
use crate::tensor::{LatentTensor, Shape};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Prompt template for a vision-language judge of per-aspect success.
pub const LLAVA_PROMPT: &str = "Does the image match the elements in [ ]: ... Return a list of numbers where 1 is matched and 0 is unmatched.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PixelMetrics {
    pub psnr: f64,
    pub mse: f64,
    pub ssim: f64,
}

/// Per-pixel membership of `mask` resized (nearest neighbour) to the image grid.
fn pixel_mask(mask: &BinaryMask, shape: Shape) -> Vec<bool> {
    let (mh, mw) = mask.grid();
    let mut out = Vec::with_capacity(shape.height * shape.width);
    for y in 0..shape.height {
        for x in 0..shape.width {
            out.push(mask.get(y * mh / shape.height, x * mw / shape.width));
        }
    }
    out
}

/// Summed-area table with one row and column of zero padding.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let mut sums = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(y, x);
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    fn window(&self, y: usize, x: usize, wh: usize, ww: usize) -> f64 {
        let s = |r: usize, c: usize| self.sums[r * (self.w + 1) + c];
        s(y + wh, x + ww) - s(y, x + ww) - s(y + wh, x) + s(y, x)
    }
}

fn ssim_from_moments(n: f64, sa: f64, sb: f64, saa: f64, sbb: f64, sab: f64) -> f64 {
    let (ma, mb) = (sa / n, sb / n);
    let va = (saa / n - ma * ma).max(0.0);
    let vb = (sbb / n - mb * mb).max(0.0);
    let cov = sab / n - ma * mb;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean SSIM over all `8×8` windows (smaller if the image is smaller) of
/// every channel. With a mask only windows lying fully inside it count; if
/// none does, the masked pixels form a single window.
pub fn ssim(a: &LatentTensor, b: &LatentTensor, mask: Option<&BinaryMask>) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let s = a.shape();
    if a.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let inside = mask.map(|m| pixel_mask(m, s));
    if inside.as_ref().is_some_and(|m| !m.iter().any(|&v| v)) {
        return Err(Error::EmptyRegion);
    }
    let (wh, ww) = (SSIM_WINDOW.min(s.height), SSIM_WINDOW.min(s.width));
    let plane = s.height * s.width;
    let coverage = inside
        .as_ref()
        .map(|m| Integral::new(s.height, s.width, |y, x| f64::from(u8::from(m[y * s.width + x]))));
    let full = (wh * ww) as f64;

    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..s.channels {
        let pa = &a.data()[c * plane..(c + 1) * plane];
        let pb = &b.data()[c * plane..(c + 1) * plane];
        let at = |p: &[f64], y: usize, x: usize| p[y * s.width + x];
        let ia = Integral::new(s.height, s.width, |y, x| at(pa, y, x));
        let ib = Integral::new(s.height, s.width, |y, x| at(pb, y, x));
        let iaa = Integral::new(s.height, s.width, |y, x| at(pa, y, x).powi(2));
        let ibb = Integral::new(s.height, s.width, |y, x| at(pb, y, x).powi(2));
        let iab = Integral::new(s.height, s.width, |y, x| at(pa, y, x) * at(pb, y, x));
        for y in 0..=s.height - wh {
            for x in 0..=s.width - ww {
                if let Some(cov) = &coverage {
                    if cov.window(y, x, wh, ww) < full {
                        continue;
                    }
                }
                total += ssim_from_moments(
                    full,
                    ia.window(y, x, wh, ww),
                    ib.window(y, x, wh, ww),
                    iaa.window(y, x, wh, ww),
                    ibb.window(y, x, wh, ww),
                    iab.window(y, x, wh, ww),
                );
                count += 1;
            }
        }
    }
    if count > 0 {
        return Ok(total / count as f64);
    }
    // mask too thin for any full window: pool the masked pixels per channel
    let inside = inside.expect("windows are only skipped under a mask");
    let mut total = 0.0;
    for c in 0..s.channels {
        let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, _) in inside.iter().enumerate().filter(|(_, &m)| m) {
            let (va, vb) = (a.data()[c * plane + i], b.data()[c * plane + i]);
            n += 1.0;
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
        total += ssim_from_moments(n, sa, sb, saa, sbb, sab);
    }
    Ok(total / s.channels as f64)
}

/// MSE, PSNR (peak 1, capped at 100 dB) and SSIM, optionally restricted to `mask`.
pub fn pixel_metrics(a: &LatentTensor, b: &LatentTensor, mask: Option<&BinaryMask>) -> Result<PixelMetrics> {
    a.ensure_same_shape(b)?;
    let s = a.shape();
    let plane = s.height * s.width;
    let inside = mask.map(|m| pixel_mask(m, s));
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if inside.as_ref().is_some_and(|m| !m[i % plane.max(1)]) {
            continue;
        }
        sum += (x - y).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    let mse = sum / n as f64;
    let psnr = if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    };
    Ok(PixelMetrics {
        psnr,
        mse,
        ssim: ssim(a, b, mask)?,
    })
}

/// A joint text/image embedding model producing unit-norm vectors.
pub trait Embedder {
    fn name(&self) -> &str;
    fn image_embed(&self, image: &LatentTensor) -> Result<Vec<f64>>;
    fn text_embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn normalize(v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::backend("embedding has zero or non-finite norm"));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic embedder: text is a normalized sum of per-token Gaussian
/// vectors keyed by a hash of the token; an image is the normalized random
/// projection of its per-channel `4×4` region means.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEmbedder {
    pub dim: usize,
    pub seed: u64,
}

pub const TOY_REGIONS: usize = 4;

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self { dim: 16, seed: 0 }
    }
}

impl ToyEmbedder {
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&token.to_lowercase()) ^ self.seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Region means, `channels × 4 × 4`; a region smaller than one pixel
    /// takes the nearest pixel.
    pub fn image_features(&self, image: &LatentTensor) -> Vec<f64> {
        let s = image.shape();
        let r = TOY_REGIONS;
        let mut out = Vec::with_capacity(s.channels * r * r);
        for c in 0..s.channels {
            for ry in 0..r {
                for rx in 0..r {
                    let ys = (ry * s.height / r)..((ry + 1) * s.height / r).max(ry * s.height / r + 1);
                    let xs = (rx * s.width / r)..((rx + 1) * s.width / r).max(rx * s.width / r + 1);
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            sum += image.data()[(c * s.height + y) * s.width + x];
                            n += 1.0;
                        }
                    }
                    out.push(sum / n);
                }
            }
        }
        out
    }

    /// The fixed `dim × (channels·16)` image projection.
    pub fn projection(&self, channels: usize) -> DMatrix<f64> {
        let cols = channels * TOY_REGIONS * TOY_REGIONS;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1ee7_0000 ^ channels as u64);
        DMatrix::from_fn(self.dim, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    /// An image of `shape` whose embedding is `target` normalized. Height and
    /// width must be multiples of 4 and `channels·16 ≥ dim`.
    pub fn preimage(&self, target: &[f64], shape: Shape) -> Result<LatentTensor> {
        let r = TOY_REGIONS;
        if target.len() != self.dim {
            return Err(Error::shape(&[self.dim], &[target.len()]));
        }
        if !shape.height.is_multiple_of(r) || !shape.width.is_multiple_of(r) || shape.channels * r * r < self.dim {
            return Err(Error::InvalidArgument(format!(
                "preimage needs a grid divisible by {r} with at least {} channels",
                self.dim.div_ceil(r * r)
            )));
        }
        let p = self.projection(shape.channels);
        let pinv = p
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::InternalConsistency(format!("pseudo-inverse failed: {e}")))?;
        let features = pinv * nalgebra::DVector::from_column_slice(target);
        let mut data = vec![0.0; shape.len()];
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let region = (y * r / shape.height) * r + x * r / shape.width;
                    data[(c * shape.height + y) * shape.width + x] = features[c * r * r + region];
                }
            }
        }
        LatentTensor::new(shape, data)
    }
}

impl Embedder for ToyEmbedder {
    fn name(&self) -> &str {
        "toy"
    }

    fn image_embed(&self, image: &LatentTensor) -> Result<Vec<f64>> {
        let f = nalgebra::DVector::from_vec(self.image_features(image));
        let v = self.projection(image.shape().channels) * f;
        normalize(v.iter().copied().collect())
    }

    fn text_embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        for token in tokenize(text) {
            for (a, v) in acc.iter_mut().zip(self.token_vector(&token)) {
                *a += v;
            }
        }
        normalize(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DirectionalScore {
    pub score: f64,
    /// Set when either embedding difference vanished; `score` is then 0.
    pub degenerate: bool,
}

/// Cosine between the image-embedding change and the text-embedding change.
pub fn dclip_score(
    embedder: &dyn Embedder,
    src_image: &LatentTensor,
    edt_image: &LatentTensor,
    src_prompt: &str,
    edt_prompt: &str,
) -> Result<DirectionalScore> {
    let diff = |a: Vec<f64>, b: Vec<f64>| -> Vec<f64> { a.iter().zip(&b).map(|(x, y)| x - y).collect() };
    let di = diff(embedder.image_embed(edt_image)?, embedder.image_embed(src_image)?);
    let dt = diff(embedder.text_embed(edt_prompt)?, embedder.text_embed(src_prompt)?);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm(&di) < 1e-12 || norm(&dt) < 1e-12 {
        return Ok(DirectionalScore {
            score: 0.0,
            degenerate: true,
        });
    }
    Ok(DirectionalScore {
        score: cosine(&di, &dt),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AspectCheck {
    /// Index into [`EditPlan::edits`].
    pub edit: usize,
    pub description: String,
    pub reverted_prompt: String,
    pub s1: f64,
    pub s2: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AspectAccuracy {
    pub accuracy: f64,
    pub aspects: Vec<AspectCheck>,
    /// Scored units: single edits, or object/attribute pairs counted once.
    pub units: usize,
    pub passed_units: usize,
}

/// Per-aspect success: the edited image must be strictly closer to the
/// target prompt than to the target prompt with that aspect reverted.
pub fn aspacc_clip(embedder: &dyn Embedder, edt_image: &LatentTensor, plan: &EditPlan) -> Result<AspectAccuracy> {
    let edits = plan.edits();
    if edits.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let image = embedder.image_embed(edt_image)?;
    let target = plan.target_tokens.join(" ");
    let s1 = cosine(&image, &embedder.text_embed(&target)?);
    let mut aspects = Vec::with_capacity(edits.len());
    for (j, edit) in edits.iter().enumerate() {
        let reverted = plan.revert_edit(j).map_err(|e| match e {
            Error::Composition(m) => Error::Composition(m),
            other => Error::Composition(other.to_string()),
        })?;
        if reverted.is_empty() {
            return Err(Error::Composition(format!("reverting edit {j} leaves an empty prompt")));
        }
        let reverted_prompt = reverted.join(" ");
        let s2 = cosine(&image, &embedder.text_embed(&reverted_prompt)?);
        aspects.push(AspectCheck {
            edit: j,
            description: edit.describe(),
            reverted_prompt,
            s1,
            s2,
            passed: s1 > s2,
        });
    }
    let mut paired = vec![false; edits.len()];
    let mut units = 0;
    let mut passed_units = 0;
    for &(a, b) in &plan.aspect_pairs {
        if a >= edits.len() || b >= edits.len() || paired[a] || paired[b] || a == b {
            return Err(Error::Validation(format!("invalid aspect pair ({a}, {b})")));
        }
        paired[a] = true;
        paired[b] = true;
        units += 1;
        passed_units += usize::from(aspects[a].passed && aspects[b].passed);
    }
    for (j, check) in aspects.iter().enumerate() {
        if !paired[j] {
            units += 1;
            passed_units += usize::from(check.passed);
        }
    }
    Ok(AspectAccuracy {
        accuracy: passed_units as f64 / units as f64,
        aspects,
        units,
        passed_units,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Psnr,
    Mse,
    Ssim,
    Dclip,
    Aspacc,
    /// Needs a pretrained perceptual network; no implementation ships.
    Lpips,
    /// Needs a vision-language model driven by [`LLAVA_PROMPT`].
    AspaccLlava,
}

impl MetricKind {
    pub const DEFAULT: [MetricKind; 5] = [
        MetricKind::Psnr,
        MetricKind::Mse,
        MetricKind::Ssim,
        MetricKind::Dclip,
        MetricKind::Aspacc,
    ];
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "psnr" => MetricKind::Psnr,
            "mse" => MetricKind::Mse,
            "ssim" => MetricKind::Ssim,
            "dclip" => MetricKind::Dclip,
            "aspacc" => MetricKind::Aspacc,
            "lpips" => MetricKind::Lpips,
            "aspacc-llava" => MetricKind::AspaccLlava,
            other => return Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        })
    }
}

/// Parses a comma-separated metric list, dropping duplicates.
pub fn parse_metric_list(list: &str) -> Result<Vec<MetricKind>> {
    let mut out: Vec<MetricKind> = Vec::new();
    for item in list.split(',').filter(|s| !s.trim().is_empty()) {
        let kind = item.parse()?;
        if !out.contains(&kind) {
            out.push(kind);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("empty metric list".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dclip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dclip_degenerate: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aspacc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aspects: Option<Vec<AspectCheck>>,
}

/// Everything an evaluation may need; metrics that lack an input fail with
/// an invalid-argument error.
#[derive(Debug, Clone, Copy)]
pub struct EvalInput<'a> {
    pub source_image: &'a LatentTensor,
    pub edited_image: &'a LatentTensor,
    pub mask: Option<&'a BinaryMask>,
    pub plan: Option<&'a EditPlan>,
}

pub fn evaluate(kinds: &[MetricKind], input: &EvalInput<'_>, embedder: &dyn Embedder) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    let wants = |k: MetricKind| kinds.contains(&k);
    for k in kinds {
        match k {
            MetricKind::Lpips => return Err(Error::UnsupportedBackend("lpips needs a perceptual network".into())),
            MetricKind::AspaccLlava => {
                return Err(Error::UnsupportedBackend("aspacc-llava needs a vision-language model".into()))
            }
            _ => {}
        }
    }
    if wants(MetricKind::Psnr) || wants(MetricKind::Mse) || wants(MetricKind::Ssim) {
        let px = pixel_metrics(input.source_image, input.edited_image, input.mask)?;
        report.psnr = wants(MetricKind::Psnr).then_some(px.psnr);
        report.mse = wants(MetricKind::Mse).then_some(px.mse);
        report.ssim = wants(MetricKind::Ssim).then_some(px.ssim);
    }
    if wants(MetricKind::Dclip) || wants(MetricKind::Aspacc) {
        let plan = input
            .plan
            .ok_or_else(|| Error::InvalidArgument("dclip and aspacc need prompts".into()))?;
        if wants(MetricKind::Dclip) {
            let d = dclip_score(
                embedder,
                input.source_image,
                input.edited_image,
                &plan.source_tokens.join(" "),
                &plan.target_tokens.join(" "),
            )?;
            report.dclip = Some(d.score);
            report.dclip_degenerate = Some(d.degenerate);
        }
        if wants(MetricKind::Aspacc) {
            let a = aspacc_clip(embedder, input.edited_image, plan)?;
            report.aspacc = Some(a.accuracy);
            report.aspects = Some(a.aspects);
        }
    }
    Ok(report)
}
