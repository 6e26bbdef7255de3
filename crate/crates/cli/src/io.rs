//! Input loading shared by the subcommands.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use aspectedit_core::attention::{read_map_dir, AttentionMap, MapOrigin};
use aspectedit_core::engine::{probe_token_maps, ExecutionMode};
use aspectedit_core::gmm::{GaussianMixtureWorld, GmmPredictor};
use aspectedit_core::plan::{parse_annotation, EditPlan};
use aspectedit_core::predictor::{Conditioning, NoisePredictor};
use aspectedit_core::remote::{Endpoint, RemotePredictor};
use aspectedit_core::{Error, LatentTensor, RunConfig, Shape};

use crate::{BackendFlags, BackendKind, Failure, GroupingFlags, ModeFlag, PlanInput, SamplingFlags};

pub fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::from(Error::InvalidArgument(format!("cannot read {}: {e}", path.display()))))
}

pub fn load_plan(input: &PlanInput) -> Result<EditPlan, Failure> {
    let prompts = input.source_prompt.is_some() || input.target_prompt.is_some();
    let sources = usize::from(prompts) + usize::from(input.annotation.is_some()) + usize::from(input.plan.is_some());
    if sources > 1 {
        return Err(Failure::usage(
            "give either --source-prompt/--target-prompt, --annotation or --plan, not several",
        ));
    }
    let plan = if let Some(path) = &input.annotation {
        parse_annotation(&read_text(path)?)?.to_plan()?
    } else if let Some(path) = &input.plan {
        let doc: serde_json::Value = serde_json::from_str(&read_text(path)?).map_err(Error::from)?;
        let body = doc.get("plan").cloned().unwrap_or(doc);
        serde_json::from_value::<EditPlan>(body).map_err(|e| Error::Schema(format!("plan document: {e}")))?
    } else {
        match (&input.source_prompt, &input.target_prompt) {
            (Some(s), Some(t)) => EditPlan::infer(s, t)?,
            (None, None) => {
                return Err(Failure::usage(
                    "a plan needs --source-prompt and --target-prompt, --annotation or --plan",
                ))
            }
            _ => return Err(Failure::usage("--source-prompt and --target-prompt go together")),
        }
    };
    let violations = plan.validate();
    if let Some(v) = violations.first() {
        return Err(Error::Validation(format!("plan is inconsistent: {v:?}")).into());
    }
    Ok(plan)
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::from_toml(&read_text(p)?)?),
        None => Ok(RunConfig::default()),
    }
}

pub fn apply_grouping(config: &mut RunConfig, flags: &GroupingFlags) {
    if let Some(v) = flags.lambda {
        config.grouping.lambda = v;
    }
    if let Some(v) = flags.beta {
        config.grouping.beta = v;
    }
    if let Some(v) = flags.bin_threshold {
        config.grouping.bin_threshold = v;
    }
}

pub fn apply_sampling(config: &mut RunConfig, flags: &SamplingFlags) {
    if let Some(v) = flags.steps {
        config.sampler.steps = v;
    }
    if let Some(v) = flags.guidance {
        config.sampler.guidance = v;
    }
    if let Some(v) = flags.seed {
        config.sampler.seed = v;
    }
    if let Some(m) = flags.mode {
        config.engine.mode = match m {
            ModeFlag::Parallel => ExecutionMode::Parallel,
            ModeFlag::Sequential => ExecutionMode::Sequential,
        };
    }
}

pub struct Backend {
    pub predictor: Box<dyn NoisePredictor>,
    pub kind: &'static str,
    pub world: Option<GaussianMixtureWorld>,
    pub vocabulary: BTreeMap<String, String>,
}

pub fn open_backend(flags: &BackendFlags, config: &RunConfig, required: bool) -> Result<Option<Backend>, Failure> {
    let Some(kind) = flags.backend else {
        if required {
            return Err(Failure::usage("--backend {gmm,external} is required"));
        }
        return Ok(None);
    };
    match kind {
        BackendKind::Gmm => {
            let world = match &flags.world {
                Some(path) => GaussianMixtureWorld::from_json(&read_text(path)?)?,
                None => GaussianMixtureWorld::demo(),
            };
            let predictor = GmmPredictor::new(world.clone(), config.build_schedule()?)?;
            Ok(Some(Backend {
                predictor: Box::new(predictor),
                kind: "gmm",
                vocabulary: world.vocabulary.clone(),
                world: Some(world),
            }))
        }
        BackendKind::External => {
            let endpoint = flags
                .endpoint
                .as_deref()
                .ok_or_else(|| Failure::usage("--backend external needs --endpoint ADDR"))?;
            let endpoint: Endpoint = endpoint.parse()?;
            let remote = RemotePredictor::connect(&endpoint)?;
            Ok(Some(Backend {
                predictor: Box::new(remote),
                kind: "external",
                world: None,
                vocabulary: BTreeMap::new(),
            }))
        }
    }
}

/// Source and target token maps, from `--maps` or probed from the backend.
pub fn load_maps(
    dir: Option<&Path>,
    backend: Option<&Backend>,
    plan: &EditPlan,
    shape: Option<Shape>,
    config: &RunConfig,
) -> Result<(Vec<AttentionMap>, Vec<AttentionMap>), Failure> {
    if let Some(dir) = dir {
        let maps = read_map_dir(dir)?;
        let (src, tgt): (Vec<_>, Vec<_>) = maps.into_iter().partition(|m| m.origin == MapOrigin::Source);
        return Ok((src, tgt));
    }
    if plan.edit_count() == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let (Some(backend), Some(shape)) = (backend, shape) else {
        return Err(Failure::usage("attention maps needed: pass --maps DIR or a --backend"));
    };
    let src = Conditioning::from_tokens(plan.source_tokens.clone(), &backend.vocabulary)?;
    let tgt = Conditioning::from_tokens(plan.target_tokens.clone(), &backend.vocabulary)?;
    let maps = probe_token_maps(backend.predictor.as_ref(), &src, &tgt, shape, &config.build_schedule()?)?;
    if maps.0.is_empty() && maps.1.is_empty() {
        return Err(Error::MissingMask("the backend returned no attention maps; pass --maps DIR".into()).into());
    }
    Ok(maps)
}

/// A tensor as plain JSON numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorDoc {
    pub fn from_tensor(t: &LatentTensor) -> Self {
        Self {
            shape: t.shape().dims().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<LatentTensor, Failure> {
        Ok(LatentTensor::new(Shape::from_dims(&self.shape)?, self.data.clone())?)
    }
}

pub fn read_tensor(path: &Path) -> Result<LatentTensor, Failure> {
    let doc: TensorDoc =
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    doc.to_tensor()
}

pub fn write_json(path: &Path, doc: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(doc).map_err(Error::from)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
