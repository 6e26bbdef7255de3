//! One function per subcommand; each returns the JSON document to print.

use std::io::BufWriter;

use serde_json::{json, Value};

use aspectedit_core::attention::{binarize, union_all};
use aspectedit_core::grouping::{group_report, source_conditioning};
use aspectedit_core::metrics::{evaluate, parse_metric_list, EvalInput, MetricKind, ToyEmbedder};
use aspectedit_core::predictor::Conditioning;
use aspectedit_core::{plan_branches, run_edit, EditPlan, Error, GaussianMixtureWorld, GmmPredictor, RunConfig};

use crate::io::{self, Backend, TensorDoc};
use crate::{DemoArgs, EditArgs, EvalArgs, Failure, GroupArgs, PlanArgs};

/// The demo edit: two independent aspects, one per mixture axis.
pub const DEMO_SOURCE: &str = "a red car near a cat";
pub const DEMO_TARGET: &str = "a blue car near a dog";
pub const DEMO_RUNS: u64 = 100;
pub const DEMO_REQUIRED_HITS: usize = 95;

pub struct Outcome {
    pub doc: Value,
    pub code: u8,
}

impl Outcome {
    fn ok(doc: Value) -> Self {
        Self { doc, code: 0 }
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value, Failure> {
    Ok(serde_json::to_value(v).map_err(Error::from)?)
}

fn edit_summary(plan: &EditPlan) -> Vec<String> {
    plan.edits().iter().map(|a| a.describe()).collect()
}

pub fn plan(args: PlanArgs) -> Result<Outcome, Failure> {
    let plan = io::load_plan(&args.input)?;
    let doc = json!({
        "command": "plan",
        "edits": edit_summary(&plan),
        "plan": to_value(&plan)?,
    });
    if let Some(out) = &args.out {
        io::write_json(out, &doc)?;
    }
    Ok(Outcome::ok(doc))
}

struct Prepared {
    plan: EditPlan,
    config: RunConfig,
    backend: Option<Backend>,
    branch_plan: aspectedit_core::BranchPlan,
}

fn prepare(
    input: &crate::PlanInput,
    grouping: &crate::GroupingFlags,
    backend: &crate::BackendFlags,
    mut config: RunConfig,
    backend_required: bool,
    shape: Option<aspectedit_core::Shape>,
) -> Result<Prepared, Failure> {
    let plan = io::load_plan(input)?;
    io::apply_grouping(&mut config, grouping);
    let backend = io::open_backend(backend, &config, backend_required)?;
    let shape = shape.or_else(|| backend.as_ref().and_then(|b| b.world.as_ref()).map(|w| w.latent_shape()));
    let (src_maps, tgt_maps) = io::load_maps(grouping.maps.as_deref(), backend.as_ref(), &plan, shape, &config)?;
    let vocabulary = backend.as_ref().map(|b| b.vocabulary.clone()).unwrap_or_default();
    let branch_plan = plan_branches(&plan, &src_maps, &tgt_maps, &config.grouping_params(), &vocabulary)?;
    Ok(Prepared {
        plan,
        config,
        backend,
        branch_plan,
    })
}

pub fn group(args: GroupArgs) -> Result<Outcome, Failure> {
    let config = io::load_config(args.config.as_deref())?;
    let p = prepare(&args.input, &args.grouping, &args.backend, config, false, None)?;
    let report = group_report(&p.plan, &p.branch_plan)?;
    let doc = json!({
        "command": "group",
        "edits": edit_summary(&p.plan),
        "lambda": p.config.grouping.lambda,
        "beta": p.config.grouping.beta,
        "bin_threshold": p.config.grouping.bin_threshold,
        "report": to_value(&report)?,
    });
    if let Some(out) = &args.out {
        io::write_json(out, &doc)?;
    }
    Ok(Outcome::ok(doc))
}

pub fn edit(args: EditArgs) -> Result<Outcome, Failure> {
    if args.backend.backend.is_none() {
        return Err(Failure::usage("edit needs --backend {gmm,external}"));
    }
    let mut config = io::load_config(args.sampling.config.as_deref())?;
    io::apply_sampling(&mut config, &args.sampling);
    let codec = config.build_codec()?;
    let image = args.image.as_deref().map(io::read_tensor).transpose()?;
    let encoded = image.as_ref().map(|i| codec.encode(i)).transpose()?;
    let p = prepare(
        &args.input,
        &args.grouping,
        &args.backend,
        config,
        true,
        encoded.as_ref().map(|z| z.shape()),
    )?;
    let backend = p.backend.as_ref().expect("backend is required above");
    let cond_src = source_conditioning(&p.plan, &backend.vocabulary)?;
    let z_src = match (encoded, &backend.world) {
        (Some(z), _) => z,
        (None, Some(world)) => world.sample(p.config.sampler.seed, 0, &world.select(Some(&cond_src))?)?,
        (None, None) => return Err(Failure::usage("the external backend needs a source --image")),
    };
    let engine = p.config.engine_config()?;
    let outcome = run_edit(&z_src, &cond_src, &p.branch_plan.branches, backend.predictor.as_ref(), &engine)?;
    if let Some(out) = &args.out {
        let mut w = BufWriter::new(std::fs::File::create(out)?);
        outcome.trace.write_jsonl(&mut w)?;
    }
    let decoded = codec.decode(&outcome.final_latent)?;
    let report = group_report(&p.plan, &p.branch_plan)?;
    let doc = json!({
        "command": "edit",
        "backend": backend.kind,
        "mode": engine.mode.as_str(),
        "steps": p.config.sampler.steps,
        "guidance": p.config.sampler.guidance,
        "seed": p.config.sampler.seed,
        "edits": edit_summary(&p.plan),
        "branches": to_value(&report)?,
        "source_latent": to_value(&TensorDoc::from_tensor(&z_src))?,
        "final_latent": to_value(&TensorDoc::from_tensor(&outcome.final_latent))?,
        "edited_image": to_value(&TensorDoc::from_tensor(&decoded))?,
    });
    Ok(Outcome::ok(doc))
}

pub fn eval(args: EvalArgs) -> Result<Outcome, Failure> {
    let (Some(image), Some(edited)) = (&args.image, &args.edited) else {
        return Err(Failure::usage("eval needs --image and --edited"));
    };
    let kinds = match &args.metrics {
        Some(list) => parse_metric_list(list)?,
        None => MetricKind::DEFAULT.to_vec(),
    };
    let needs_plan = kinds.contains(&MetricKind::Dclip) || kinds.contains(&MetricKind::Aspacc);
    let has_plan = args.input.source_prompt.is_some() || args.input.annotation.is_some() || args.input.plan.is_some();
    let plan = if needs_plan || has_plan {
        Some(io::load_plan(&args.input)?)
    } else {
        None
    };
    let source = io::read_tensor(image)?;
    let edited = io::read_tensor(edited)?;
    let background = match &args.maps {
        Some(dir) => {
            let threshold = args.bin_threshold.unwrap_or(aspectedit_core::grouping::DEFAULT_BIN_THRESHOLD);
            let maps = aspectedit_core::attention::read_map_dir(dir)?;
            let masks: Vec<_> = maps.iter().map(|m| binarize(m, threshold)).collect();
            union_all(&masks)?.map(|u| u.complement())
        }
        None => None,
    };
    let embedder = ToyEmbedder::default();
    let report = evaluate(
        &kinds,
        &EvalInput {
            source_image: &source,
            edited_image: &edited,
            mask: background.as_ref(),
            plan: plan.as_ref(),
        },
        &embedder,
    )?;
    let doc = json!({
        "command": "eval",
        "embedder": aspectedit_core::metrics::Embedder::name(&embedder),
        "masked": background.is_some(),
        "metrics": to_value(&report)?,
    });
    if let Some(out) = &args.out {
        io::write_json(out, &doc)?;
    }
    Ok(Outcome::ok(doc))
}

pub fn demo(args: DemoArgs) -> Result<Outcome, Failure> {
    let mut config = io::load_config(args.sampling.config.as_deref())?;
    io::apply_sampling(&mut config, &args.sampling);
    let world = GaussianMixtureWorld::demo();
    let predictor = GmmPredictor::new(world.clone(), config.build_schedule()?)?;
    let plan = EditPlan::infer(DEMO_SOURCE, DEMO_TARGET)?;
    let vocab = &world.vocabulary;
    let cond_src = source_conditioning(&plan, vocab)?;
    let cond_tgt = Conditioning::from_tokens(plan.target_tokens.clone(), vocab)?;
    let (src_maps, tgt_maps) = aspectedit_core::engine::probe_token_maps(
        &predictor,
        &cond_src,
        &cond_tgt,
        world.latent_shape(),
        predictor.schedule(),
    )?;
    let branch_plan = plan_branches(&plan, &src_maps, &tgt_maps, &config.grouping_params(), vocab)?;
    let source_components = world.select(Some(&cond_src))?;
    let target = &world.components[world.select(Some(&cond_tgt))?[0]];
    let radius = 3.0 * target.stddev;

    let first = config.sampler.seed;
    let mut hits = 0;
    let mut example = Value::Null;
    for seed in first..first + DEMO_RUNS {
        let mut run_config = config.clone();
        run_config.sampler.seed = seed;
        let engine = run_config.engine_config()?;
        let z_src = world.sample(seed, 0, &source_components)?;
        let out = run_edit(&z_src, &cond_src, &branch_plan.branches, &predictor, &engine)?;
        let dist = out
            .final_latent
            .data()
            .iter()
            .zip(&target.mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        hits += usize::from(dist <= radius);
        if seed == first {
            if let Some(path) = &args.out {
                let mut w = BufWriter::new(std::fs::File::create(path)?);
                out.trace.write_jsonl(&mut w)?;
            }
            example = json!({
                "seed": seed,
                "source_latent": z_src.data(),
                "final_latent": out.final_latent.data(),
                "distance": dist,
            });
        }
    }
    let passed = hits >= DEMO_REQUIRED_HITS;
    let doc = json!({
        "command": "demo",
        "source_prompt": DEMO_SOURCE,
        "target_prompt": DEMO_TARGET,
        "branches": to_value(&group_report(&plan, &branch_plan)?)?,
        "mode": config.engine.mode.as_str(),
        "steps": config.sampler.steps,
        "guidance": config.sampler.guidance,
        "target_mean": target.mean,
        "radius": radius,
        "first_seed": first,
        "runs": DEMO_RUNS,
        "hits": hits,
        "required": DEMO_REQUIRED_HITS,
        "passed": passed,
        "example": example,
    });
    Ok(Outcome {
        doc,
        code: if passed { 0 } else { 1 },
    })
}
