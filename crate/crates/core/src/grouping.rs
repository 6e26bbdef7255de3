//! Edit typing, greedy overlap grouping, branch allocation and per-branch
//! conditioning.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{alpha_matte, binarize, miou, union, union_all, AttentionMap, BinaryMask};
use crate::error::{Error, Result};
use crate::plan::{apply_actions_traced, ActionKind, EditAction, EditPlan};
use crate::predictor::Conditioning;

pub const DEFAULT_LAMBDA: f64 = 0.9;
pub const DEFAULT_BETA: f64 = 0.8;
pub const DEFAULT_BIN_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditType {
    Global,
    RigidLocal,
    NonRigidLocal,
}

impl EditType {
    pub fn as_str(self) -> &'static str {
        match self {
            EditType::Global => "global",
            EditType::RigidLocal => "rigid-local",
            EditType::NonRigidLocal => "non-rigid-local",
        }
    }

    /// Position in branch order: non-rigid first, global last.
    fn rank(self) -> u8 {
        match self {
            EditType::NonRigidLocal => 0,
            EditType::RigidLocal => 1,
            EditType::Global => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupingParams {
    pub lambda: f64,
    pub beta: f64,
    pub bin_threshold: f64,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            bin_threshold: DEFAULT_BIN_THRESHOLD,
        }
    }
}

impl GroupingParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta), ("bin-threshold", self.bin_threshold)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Binarized masks of one action's source and target aspects.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AspectMasks {
    pub source: Option<BinaryMask>,
    pub target: Option<BinaryMask>,
}

impl AspectMasks {
    /// The region an action occupies: its target mask, or the source mask
    /// for deletions.
    pub fn footprint(&self, action: &EditAction) -> Option<&BinaryMask> {
        match action.action {
            ActionKind::Delete => self.source.as_ref(),
            _ => self.target.as_ref(),
        }
    }
}

/// Union of the binarized maps of the tokens in `span`; `None` when no token
/// in the span has a map.
pub fn span_mask(maps: &[AttentionMap], span: Range<usize>, threshold: f64) -> Result<Option<BinaryMask>> {
    let masks: Vec<BinaryMask> = maps
        .iter()
        .filter(|m| span.contains(&m.token_index))
        .map(|m| binarize(m, threshold))
        .collect();
    union_all(&masks)
}

/// Masks for every edit of `plan` (in [`EditPlan::edits`] order), from
/// per-token maps over the source and target prompts.
pub fn aspect_masks(
    plan: &EditPlan,
    source_maps: &[AttentionMap],
    target_maps: &[AttentionMap],
    threshold: f64,
) -> Result<Vec<AspectMasks>> {
    plan.edits()
        .into_iter()
        .map(|a| {
            Ok(AspectMasks {
                source: match &a.source {
                    Some(s) => span_mask(source_maps, s.span(), threshold)?,
                    None => None,
                },
                target: match &a.target {
                    Some(t) => span_mask(target_maps, t.span(), threshold)?,
                    None => None,
                },
            })
        })
        .collect()
}

/// Types one edit. Global when its target matte reaches `beta` times the
/// matte of the union of all target masks; otherwise non-rigid when the
/// source/target overlap is below `lambda`, else rigid. Adds have no source
/// mask and deletes no target mask; both are non-rigid unless an add passes
/// the global test. An empty target mask never counts as global.
pub fn classify_edit(
    action: &EditAction,
    masks: &AspectMasks,
    all_target_masks: &[BinaryMask],
    lambda: f64,
    beta: f64,
) -> Result<EditType> {
    if action.action == ActionKind::Delete {
        return Ok(EditType::NonRigidLocal);
    }
    let target = masks
        .target
        .as_ref()
        .ok_or_else(|| Error::MissingMask(format!("target mask for {}", action.describe())))?;
    let everything = union_all(all_target_masks)?.unwrap_or_else(|| target.clone());
    let matte = alpha_matte(target);
    if matte > 0.0 && matte >= beta * alpha_matte(&everything) {
        return Ok(EditType::Global);
    }
    match action.action {
        ActionKind::Add => Ok(EditType::NonRigidLocal),
        ActionKind::Swap => {
            let source = masks
                .source
                .as_ref()
                .ok_or_else(|| Error::MissingMask(format!("source mask for {}", action.describe())))?;
            if miou(source, target)? < lambda {
                Ok(EditType::NonRigidLocal)
            } else {
                Ok(EditType::RigidLocal)
            }
        }
        ActionKind::None | ActionKind::Delete => Err(Error::InvalidArgument(format!(
            "cannot type a no-change action: {}",
            action.describe()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedEdit {
    /// Index into [`EditPlan::edits`].
    pub edit: usize,
    pub edit_type: EditType,
    pub footprint: BinaryMask,
}

/// Types every edit of the plan.
pub fn classify_plan(plan: &EditPlan, masks: &[AspectMasks], params: &GroupingParams) -> Result<Vec<ClassifiedEdit>> {
    params.validate()?;
    let edits = plan.edits();
    if masks.len() != edits.len() {
        return Err(Error::InvalidArgument(format!(
            "{} mask sets for {} edits",
            masks.len(),
            edits.len()
        )));
    }
    let all_targets: Vec<BinaryMask> = masks.iter().filter_map(|m| m.target.clone()).collect();
    edits
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (a, m))| {
            let edit_type = classify_edit(a, m, &all_targets, params.lambda, params.beta)?;
            let footprint = m
                .footprint(a)
                .cloned()
                .ok_or_else(|| Error::MissingMask(format!("footprint for {}", a.describe())))?;
            Ok(ClassifiedEdit {
                edit: i,
                edit_type,
                footprint,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub edit_type: EditType,
    /// Indices into [`EditPlan::edits`], in joining order.
    pub members: Vec<usize>,
    pub union: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupAssignment {
    pub groups: Vec<Group>,
}

impl GroupAssignment {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Greedy single-pass grouping in input order. A local edit joins the first
/// group of its type whose union mask overlaps its footprint with mIoU ≥
/// `lambda`, else it starts a new group. Membership is not transitive. All
/// global edits share one group.
pub fn group_edits(classified: &[ClassifiedEdit], lambda: f64) -> Result<GroupAssignment> {
    let mut groups: Vec<Group> = Vec::new();
    for c in classified {
        let mut joined = None;
        for (g_idx, g) in groups.iter().enumerate() {
            if g.edit_type != c.edit_type {
                continue;
            }
            if c.edit_type == EditType::Global || miou(&g.union, &c.footprint)? >= lambda {
                joined = Some(g_idx);
                break;
            }
        }
        match joined {
            Some(g_idx) => {
                let g = &mut groups[g_idx];
                g.members.push(c.edit);
                g.union = union(&g.union, &c.footprint)?;
            }
            None => groups.push(Group {
                edit_type: c.edit_type,
                members: vec![c.edit],
                union: c.footprint.clone(),
            }),
        }
    }
    Ok(GroupAssignment { groups })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec {
    /// 1-based branch index; branch 0 is the source branch.
    pub index: usize,
    pub edit_type: EditType,
    /// Indices into [`EditPlan::edits`].
    pub members: Vec<usize>,
    pub auxiliary: bool,
    pub mask: BinaryMask,
    /// `c_n`; filled by [`compose_conditioning`].
    pub conditioning: Option<Conditioning>,
    /// Where this branch's edits sit in `c_n` (adds and swaps only).
    pub target_spans: Vec<Range<usize>>,
    /// Where the source side of this branch's swaps and deletes sits in `c_{n−1}`.
    pub source_spans_prev: Vec<Range<usize>>,
}

impl BranchSpec {
    pub fn conditioning(&self) -> Result<&Conditioning> {
        self.conditioning
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("branch {} has no conditioning", self.index)))
    }
}

/// Orders groups non-rigid, rigid, global (stable within a type) and numbers
/// them `1..=N`. Later groups of a local type are auxiliary.
pub fn allocate_branches(assignment: &GroupAssignment, plan: &EditPlan) -> Result<Vec<BranchSpec>> {
    if assignment.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let n_edits = plan.edit_count();
    if let Some(bad) = assignment.groups.iter().flat_map(|g| &g.members).find(|&&m| m >= n_edits) {
        return Err(Error::InvalidArgument(format!("group member {bad} is not an edit of the plan")));
    }
    let mut order: Vec<&Group> = assignment.groups.iter().collect();
    order.sort_by_key(|g| g.edit_type.rank());
    let mut seen = BTreeMap::new();
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let count = seen.entry(g.edit_type).or_insert(0usize);
            *count += 1;
            BranchSpec {
                index: i + 1,
                edit_type: g.edit_type,
                members: g.members.clone(),
                auxiliary: g.edit_type != EditType::Global && *count > 1,
                mask: g.union.clone(),
                conditioning: None,
                target_spans: Vec::new(),
                source_spans_prev: Vec::new(),
            }
        })
        .collect())
}

/// Fills `c_n` = source prompt with the edits of branches `1..=n` applied.
/// Fails when `c_N` does not reproduce the target prompt.
pub fn compose_conditioning(
    plan: &EditPlan,
    mut branches: Vec<BranchSpec>,
    vocabulary: &BTreeMap<String, String>,
) -> Result<Vec<BranchSpec>> {
    let edits = plan.edits();
    let mut applied: Vec<&EditAction> = Vec::new();
    let mut prev = apply_actions_traced(&plan.source_tokens, std::iter::empty())?;
    for b in &mut branches {
        let first_new = applied.len();
        for &m in &b.members {
            let e = edits
                .get(m)
                .ok_or_else(|| Error::Composition(format!("branch {} references missing edit {m}", b.index)))?;
            applied.push(e);
        }
        let cur = apply_actions_traced(&plan.source_tokens, applied.iter().copied())?;
        b.target_spans = cur.spans[first_new..]
            .iter()
            .filter(|r| !r.is_empty())
            .cloned()
            .collect();
        b.source_spans_prev = applied[first_new..]
            .iter()
            .filter_map(|a| a.source.as_ref().filter(|_| a.action != ActionKind::Add))
            .map(|s| {
                let first = prev.source_positions[s.start];
                let last = prev.source_positions[s.end - 1];
                match (first, last) {
                    (Some(f), Some(l)) => Ok(f..l + 1),
                    _ => Err(Error::Composition(format!(
                        "source aspect `{}` was already rewritten before branch {}",
                        s.text, b.index
                    ))),
                }
            })
            .collect::<Result<_>>()?;
        b.conditioning = Some(Conditioning::from_tokens(cur.tokens.clone(), vocabulary)?);
        prev = cur;
    }
    if let Some(last) = branches.last() {
        let got: Vec<String> = last.conditioning()?.tokens().iter().map(|t| t.to_lowercase()).collect();
        let want: Vec<String> = plan.target_tokens.iter().map(|t| t.to_lowercase()).collect();
        if got != want {
            return Err(Error::Composition(format!(
                "applying every edit gives `{}`, not the target prompt",
                got.join(" ")
            )));
        }
    }
    Ok(branches)
}

/// `c_0`: the source prompt.
pub fn source_conditioning(plan: &EditPlan, vocabulary: &BTreeMap<String, String>) -> Result<Conditioning> {
    Conditioning::from_tokens(plan.source_tokens.clone(), vocabulary)
}

/// Everything the engine needs before sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPlan {
    pub classified: Vec<ClassifiedEdit>,
    pub assignment: GroupAssignment,
    pub branches: Vec<BranchSpec>,
}

/// Masks → types → groups → branches → conditioning. A plan without edits
/// gets a single pass-through branch conditioned on the (unchanged) target.
pub fn plan_branches(
    plan: &EditPlan,
    source_maps: &[AttentionMap],
    target_maps: &[AttentionMap],
    params: &GroupingParams,
    vocabulary: &BTreeMap<String, String>,
) -> Result<BranchPlan> {
    params.validate()?;
    if plan.edit_count() == 0 {
        let grid = source_maps
            .first()
            .or(target_maps.first())
            .map(|m| m.grid())
            .unwrap_or((1, 1));
        let branch = BranchSpec {
            index: 1,
            edit_type: EditType::Global,
            members: Vec::new(),
            auxiliary: false,
            mask: BinaryMask::full(grid.0, grid.1),
            conditioning: Some(Conditioning::from_tokens(plan.target_tokens.clone(), vocabulary)?),
            target_spans: Vec::new(),
            source_spans_prev: Vec::new(),
        };
        return Ok(BranchPlan {
            classified: Vec::new(),
            assignment: GroupAssignment::default(),
            branches: vec![branch],
        });
    }
    let masks = aspect_masks(plan, source_maps, target_maps, params.bin_threshold)?;
    let classified = classify_plan(plan, &masks, params)?;
    let assignment = group_edits(&classified, params.lambda)?;
    let branches = allocate_branches(&assignment, plan)?;
    let branches = compose_conditioning(plan, branches, vocabulary)?;
    Ok(BranchPlan {
        classified,
        assignment,
        branches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReportEntry {
    pub branch: usize,
    pub edit_type: EditType,
    pub auxiliary: bool,
    pub aspects: Vec<String>,
    pub matte: f64,
    pub pairwise_miou: Vec<Vec<f64>>,
    pub conditioning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub n: usize,
    pub groups: Vec<GroupReportEntry>,
}

/// Per-branch summary: type, member aspects, union matte and the pairwise
/// mIoU of member footprints.
pub fn group_report(plan: &EditPlan, bp: &BranchPlan) -> Result<GroupReport> {
    let edits = plan.edits();
    let footprint = |m: usize| bp.classified.iter().find(|c| c.edit == m).map(|c| &c.footprint);
    let mut groups = Vec::new();
    for b in &bp.branches {
        let mut pairwise = Vec::new();
        for &i in &b.members {
            let mut row = Vec::new();
            for &j in &b.members {
                row.push(match (footprint(i), footprint(j)) {
                    (Some(a), Some(c)) => miou(a, c)?,
                    _ => f64::NAN,
                });
            }
            pairwise.push(row);
        }
        groups.push(GroupReportEntry {
            branch: b.index,
            edit_type: b.edit_type,
            auxiliary: b.auxiliary,
            aspects: b.members.iter().map(|&m| edits[m].describe()).collect(),
            matte: alpha_matte(&b.mask),
            pairwise_miou: pairwise,
            conditioning: b.conditioning.as_ref().map(|c| c.text()),
        });
    }
    Ok(GroupReport {
        n: bp.branches.len(),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::MapOrigin;
    use crate::plan::{tokenize, Aspect, Category};
    use proptest::prelude::*;

    fn mask(cells: &[u8]) -> BinaryMask {
        BinaryMask::from_cells(1, cells.len(), cells.iter().map(|&c| c == 1).collect()).unwrap()
    }

    fn swap(src: &str, tgt: &str) -> EditAction {
        let s = tokenize(src);
        let t = tokenize(tgt);
        EditAction {
            source: Some(Aspect::from_tokens(&s, 0..s.len())),
            target: Some(Aspect::from_tokens(&t, 0..t.len())),
            action: ActionKind::Swap,
            category: Category::ChangeObject,
            category_authoritative: false,
            insert_at: None,
        }
    }

    fn masks(src: &[u8], tgt: &[u8]) -> AspectMasks {
        AspectMasks {
            source: Some(mask(src)),
            target: Some(mask(tgt)),
        }
    }

    #[test]
    fn global_when_target_covers_most_of_the_union() {
        // 17 of 20 cells = 85% of the union
        let mut t = vec![1u8; 17];
        t.extend([0, 0, 0]);
        let other = vec![1u8; 20];
        let m = masks(&t, &t);
        let ty = classify_edit(&swap("day", "night"), &m, &[mask(&t), mask(&other)], 0.9, 0.8).unwrap();
        assert_eq!(ty, EditType::Global);
    }

    #[test]
    fn identical_masks_are_rigid() {
        let m = masks(&[1, 1, 0, 0, 0, 0], &[1, 1, 0, 0, 0, 0]);
        let all = [mask(&[1, 1, 0, 0, 0, 0]), mask(&[0, 0, 0, 1, 1, 1])];
        assert_eq!(classify_edit(&swap("red", "blue"), &m, &all, 0.9, 0.8).unwrap(), EditType::RigidLocal);
    }

    #[test]
    fn low_overlap_is_non_rigid() {
        // φ = 3/10 against λ = 0.9
        let src = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
        let tgt = [0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
        let all = [mask(&tgt), mask(&[1; 10])];
        let ty = classify_edit(&swap("sitting", "jumping"), &masks(&src, &tgt), &all, 0.9, 0.8).unwrap();
        assert_eq!(ty, EditType::NonRigidLocal);
    }

    #[test]
    fn missing_masks_are_reported() {
        let m = AspectMasks {
            source: None,
            target: Some(mask(&[1, 0])),
        };
        let all = [mask(&[1, 1])];
        assert!(matches!(classify_edit(&swap("a", "b"), &m, &all, 0.9, 0.8), Err(Error::MissingMask(_))));
        let none = AspectMasks::default();
        assert!(matches!(classify_edit(&swap("a", "b"), &none, &all, 0.9, 0.8), Err(Error::MissingMask(_))));
    }

    fn classified(edit: usize, ty: EditType, cells: &[u8]) -> ClassifiedEdit {
        ClassifiedEdit {
            edit,
            edit_type: ty,
            footprint: mask(cells),
        }
    }

    #[test]
    fn disjoint_non_rigid_edits_split() {
        let c = [
            classified(0, EditType::NonRigidLocal, &[1, 1, 0, 0]),
            classified(1, EditType::NonRigidLocal, &[0, 0, 1, 1]),
        ];
        assert_eq!(group_edits(&c, 0.9).unwrap().len(), 2);
    }

    #[test]
    fn identical_rigid_edits_merge() {
        let c = [
            classified(0, EditType::RigidLocal, &[0, 1, 1, 0]),
            classified(1, EditType::RigidLocal, &[0, 1, 1, 0]),
        ];
        let g = group_edits(&c, 0.9).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.groups[0].members, vec![0, 1]);
    }

    #[test]
    fn grouping_is_not_transitive() {
        // A∩B and B∩C are 8/10, A∩C is 7/11. With λ = 0.75 a closure would
        // merge all three; the greedy scan does not.
        let a = [1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0];
        let b = [0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0];
        let c = [0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1];
        let m = [
            classified(0, EditType::RigidLocal, &a),
            classified(1, EditType::RigidLocal, &b),
            classified(2, EditType::RigidLocal, &c),
        ];
        assert!((miou(&mask(&a), &mask(&b)).unwrap() - 0.8).abs() < 1e-12);
        let g = group_edits(&m, 0.75).unwrap();
        // by hand: A founds g0; B vs g0 = 8/10 joins, union = cells 0..=9;
        // C vs that union = 8/11 < 0.75 founds g1
        assert_eq!(g.groups.iter().map(|g| g.members.clone()).collect::<Vec<_>>(), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn global_edits_share_one_group_and_never_mix() {
        let c = [
            classified(0, EditType::Global, &[1, 1, 1, 1]),
            classified(1, EditType::RigidLocal, &[1, 1, 1, 1]),
            classified(2, EditType::Global, &[1, 0, 0, 0]),
        ];
        let g = group_edits(&c, 0.9).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.groups[0].members, vec![0, 2]);
    }

    fn group(ty: EditType, members: Vec<usize>) -> Group {
        Group {
            edit_type: ty,
            members,
            union: mask(&[1]),
        }
    }

    fn fig1_plan() -> EditPlan {
        EditPlan::infer(
            "a photo of a cat sitting in front of a wall",
            "a photo of a cat with a necktie sitting in front of a beach",
        )
        .unwrap()
    }

    #[test]
    fn branch_order_and_auxiliaries() {
        let plan = EditPlan::infer("a red car near a cat on grass", "a blue truck near a dog on sand").unwrap();
        assert_eq!(plan.edit_count(), 3);
        let a = GroupAssignment {
            groups: vec![group(EditType::RigidLocal, vec![0]), group(EditType::NonRigidLocal, vec![1])],
        };
        let b = allocate_branches(&a, &plan).unwrap();
        assert_eq!(b.iter().map(|b| b.edit_type).collect::<Vec<_>>(), vec![EditType::NonRigidLocal, EditType::RigidLocal]);
        assert!(b.iter().all(|b| !b.auxiliary));

        let a = GroupAssignment {
            groups: vec![group(EditType::RigidLocal, vec![0]), group(EditType::RigidLocal, vec![1])],
        };
        let b = allocate_branches(&a, &plan).unwrap();
        assert_eq!((b[0].auxiliary, b[1].auxiliary), (false, true));

        let a = GroupAssignment {
            groups: vec![
                group(EditType::Global, vec![2]),
                group(EditType::RigidLocal, vec![0]),
                group(EditType::NonRigidLocal, vec![1]),
            ],
        };
        let b = allocate_branches(&a, &plan).unwrap();
        assert_eq!(
            b.iter().map(|b| (b.index, b.edit_type)).collect::<Vec<_>>(),
            vec![(1, EditType::NonRigidLocal), (2, EditType::RigidLocal), (3, EditType::Global)]
        );
        assert!(matches!(allocate_branches(&GroupAssignment::default(), &plan), Err(Error::EmptyPlan)));
    }

    #[test]
    fn conditioning_accumulates_edits() {
        let plan = fig1_plan();
        let vocab = BTreeMap::new();
        // edits: 0 = +"with a necktie", 1 = wall→beach
        let a = GroupAssignment {
            groups: vec![group(EditType::RigidLocal, vec![1]), group(EditType::RigidLocal, vec![0])],
        };
        let b = compose_conditioning(&plan, allocate_branches(&a, &plan).unwrap(), &vocab).unwrap();
        assert_eq!(b[0].conditioning().unwrap().text(), "a photo of a cat sitting in front of a beach");
        assert_eq!(b[0].target_spans, vec![10..11]);
        assert_eq!(b[0].source_spans_prev, vec![10..11]);
        assert_eq!(b[1].conditioning().unwrap().tokens(), plan.target_tokens.as_slice());
        assert_eq!(b[1].target_spans, vec![5..8]);

        let single = GroupAssignment {
            groups: vec![group(EditType::RigidLocal, vec![0, 1])],
        };
        let b = compose_conditioning(&plan, allocate_branches(&single, &plan).unwrap(), &vocab).unwrap();
        assert_eq!(b[0].conditioning().unwrap().tokens(), plan.target_tokens.as_slice());
    }

    #[test]
    fn no_edit_plan_gets_pass_through_branch() {
        let plan = EditPlan::infer("a cat on a mat", "a cat on a mat").unwrap();
        let bp = plan_branches(&plan, &[], &[], &GroupingParams::default(), &BTreeMap::new()).unwrap();
        assert_eq!(bp.branches.len(), 1);
        assert_eq!(bp.branches[0].conditioning().unwrap().tokens(), plan.source_tokens.as_slice());
    }

    #[test]
    fn end_to_end_from_token_maps() {
        let plan = EditPlan::infer("a red car near a cat", "a blue car near a dog").unwrap();
        let map = |token, cells: &[f64], origin| AttentionMap::new(1, 2, cells.to_vec(), token, origin).unwrap();
        let src = [map(1, &[1.0, 0.0], MapOrigin::Source), map(5, &[0.0, 1.0], MapOrigin::Source)];
        let tgt = [map(1, &[0.9, 0.0], MapOrigin::Target), map(5, &[0.0, 0.7], MapOrigin::Target)];
        let bp = plan_branches(&plan, &src, &tgt, &GroupingParams::default(), &BTreeMap::new()).unwrap();
        assert_eq!(bp.branches.len(), 2);
        assert!(bp.branches.iter().all(|b| b.edit_type == EditType::RigidLocal));
        assert!(bp.branches[1].auxiliary);
        let report = group_report(&plan, &bp).unwrap();
        assert_eq!(report.n, 2);
        assert_eq!(report.groups[0].matte, 0.5);
        assert_eq!(report.groups[1].conditioning.as_deref(), Some("a blue car near a dog"));
    }

    fn arb_cells(len: usize) -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..2, len)
    }

    proptest! {
        #[test]
        fn raising_beta_never_makes_an_edit_global(
            src in arb_cells(12), tgt in arb_cells(12), other in arb_cells(12),
            beta in 0.05f64..1.0, bump in 0.0f64..0.5,
        ) {
            let m = masks(&src, &tgt);
            let all = [mask(&tgt), mask(&other)];
            let lo = classify_edit(&swap("a", "b"), &m, &all, 0.9, beta);
            let hi = classify_edit(&swap("a", "b"), &m, &all, 0.9, (beta + bump).min(1.0));
            if let (Ok(lo), Ok(hi)) = (lo, hi) {
                prop_assert!(!(lo != EditType::Global && hi == EditType::Global));
            }
        }

        #[test]
        fn groups_partition_and_are_homogeneous(
            items in prop::collection::vec((0u8..3, arb_cells(8)), 1..10),
            lambda in 0.1f64..1.0,
        ) {
            let types = [EditType::Global, EditType::RigidLocal, EditType::NonRigidLocal];
            let c: Vec<ClassifiedEdit> = items
                .iter()
                .enumerate()
                .map(|(i, (t, cells))| classified(i, types[*t as usize], cells))
                .collect();
            let g = group_edits(&c, lambda).unwrap();
            let mut seen: Vec<usize> = g.groups.iter().flat_map(|g| g.members.clone()).collect();
            seen.sort();
            prop_assert_eq!(seen, (0..c.len()).collect::<Vec<_>>());
            for grp in &g.groups {
                prop_assert!(!grp.members.is_empty());
                prop_assert!(grp.members.iter().all(|&m| c[m].edit_type == grp.edit_type));
            }
        }

        #[test]
        fn auxiliary_only_on_later_local_groups(types in prop::collection::vec(0u8..3, 1..8)) {
            let all = [EditType::Global, EditType::RigidLocal, EditType::NonRigidLocal];
            let plan = EditPlan::infer("a b c d e f g h", "A B C D E F G H").unwrap();
            let a = GroupAssignment {
                groups: types.iter().map(|&t| group(all[t as usize], vec![])).collect(),
            };
            let b = allocate_branches(&a, &plan).unwrap();
            for (i, br) in b.iter().enumerate() {
                let earlier_same = b[..i].iter().any(|x| x.edit_type == br.edit_type);
                prop_assert_eq!(br.auxiliary, br.edit_type != EditType::Global && earlier_same);
                prop_assert_eq!(br.index, i + 1);
            }
            prop_assert!(b.windows(2).all(|w| w[0].edit_type.rank() <= w[1].edit_type.rank()));
        }

        #[test]
        fn conditioning_edits_are_nested(split in 0usize..=3) {
            let plan = EditPlan::infer("a red car near a cat on grass", "a blue truck near a dog on sand").unwrap();
            let n = plan.edit_count();
            let split = split.min(n);
            let mut groups = Vec::new();
            if split > 0 {
                groups.push(group(EditType::NonRigidLocal, (0..split).collect()));
            }
            if split < n {
                groups.push(group(EditType::RigidLocal, (split..n).collect()));
            }
            let b = compose_conditioning(
                &plan,
                allocate_branches(&GroupAssignment { groups }, &plan).unwrap(),
                &BTreeMap::new(),
            )
            .unwrap();
            for w in b.windows(2) {
                let next = w[1].conditioning().unwrap().tokens();
                for tok in w[0].target_spans.iter().flat_map(|r| w[0].conditioning().unwrap().tokens()[r.clone()].to_vec()) {
                    prop_assert!(next.contains(&tok));
                }
            }
            prop_assert_eq!(b.last().unwrap().conditioning().unwrap().tokens(), plan.target_tokens.as_slice());
        }
    }
}
