//! Fixtures shared by the benchmarks.

use aspectedit_core::engine::probe_token_maps;
use aspectedit_core::grouping::source_conditioning;
use aspectedit_core::predictor::Conditioning;
use aspectedit_core::schedule::DiffusionSchedule;
use aspectedit_core::{
    plan_branches, BranchPlan, EditPlan, GaussianMixtureWorld, GmmPredictor, GroupingParams, LatentTensor, Shape,
};

/// The two-aspect edit on the demo mixture world, ready to run.
pub struct DemoEdit {
    pub predictor: GmmPredictor,
    pub plan: EditPlan,
    pub branch_plan: BranchPlan,
    pub cond_src: Conditioning,
    pub z_src: LatentTensor,
}

pub fn demo_edit(seed: u64) -> DemoEdit {
    let world = GaussianMixtureWorld::demo();
    let schedule = DiffusionSchedule::linear(1000).expect("valid schedule");
    let predictor = GmmPredictor::new(world.clone(), schedule.clone()).expect("valid predictor");
    let plan = EditPlan::infer("a red car near a cat", "a blue car near a dog").expect("plan infers");
    let cond_src = source_conditioning(&plan, &world.vocabulary).expect("source binds");
    let cond_tgt = Conditioning::from_tokens(plan.target_tokens.clone(), &world.vocabulary).expect("target binds");
    let (sm, tm) = probe_token_maps(&predictor, &cond_src, &cond_tgt, world.latent_shape(), &schedule).expect("maps");
    let branch_plan =
        plan_branches(&plan, &sm, &tm, &GroupingParams::default(), &world.vocabulary).expect("branches");
    let subset = world.select(Some(&cond_src)).expect("components");
    let z_src = world.sample(seed, 0, &subset).expect("sample");
    DemoEdit {
        predictor,
        plan,
        branch_plan,
        cond_src,
        z_src,
    }
}

/// A smooth image with a deterministic ripple, values in `[0, 1]`.
pub fn ripple_image(shape: Shape, phase: f64) -> LatentTensor {
    let [c, h, w] = shape.dims();
    let data = (0..c * h * w)
        .map(|i| {
            let (y, x) = ((i / w) % h, i % w);
            0.5 + 0.5 * ((x as f64 * 0.3 + y as f64 * 0.2 + phase).sin())
        })
        .collect();
    LatentTensor::new(shape, data).expect("shape matches data")
}
