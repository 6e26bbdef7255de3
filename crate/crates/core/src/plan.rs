//! Prompt pairs → aspect-level edit actions.
//!
//! Prompts are tokenized on whitespace with surrounding punctuation removed.
//! Alignment is case-insensitive; tokens keep their original casing.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const PUNCTUATION: &[char] = &[
    '.', ',', ';', ':', '!', '?', '"', '\'', '(', ')', '[', ']', '{', '}',
];

pub fn tokenize(prompt: &str) -> Vec<String> {
    tokenize_with_brackets(prompt).0
}

/// Tokenizes and also returns the token spans enclosed in `[ ]`.
pub fn tokenize_with_brackets(prompt: &str) -> (Vec<String>, Vec<Range<usize>>) {
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for raw in prompt.split_whitespace() {
        let opens = raw.trim_start_matches(|c: char| c != '[' && PUNCTUATION.contains(&c)).starts_with('[');
        let closes = raw.trim_end_matches(|c: char| c != ']' && PUNCTUATION.contains(&c)).ends_with(']');
        let word = raw.trim_matches(|c: char| PUNCTUATION.contains(&c));
        if opens && open.is_none() {
            open = Some(tokens.len());
        }
        if !word.is_empty() {
            tokens.push(word.to_string());
        }
        if closes {
            if let Some(start) = open.take() {
                if tokens.len() > start {
                    spans.push(start..tokens.len());
                }
            }
        }
    }
    (tokens, spans)
}

fn same(a: &str, b: &str) -> bool {
    a.to_lowercase() == b.to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HunkKind {
    Equal,
    Replace,
    Delete,
    Insert,
}

/// One maximal run of the token alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub kind: HunkKind,
    pub source: Range<usize>,
    pub target: Range<usize>,
}

/// Longest-common-subsequence alignment of two token lists, grouped into
/// maximal equal and changed runs. Adjacent deletions and insertions merge
/// into a single replace hunk.
pub fn diff_tokens(source: &[String], target: &[String]) -> Vec<Hunk> {
    let (n, m) = (source.len(), target.len());
    let src: Vec<String> = source.iter().map(|t| t.to_lowercase()).collect();
    let tgt: Vec<String> = target.iter().map(|t| t.to_lowercase()).collect();
    // suffix LCS lengths
    let mut lcs = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if src[i] == tgt[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }

    let mut hunks: Vec<Hunk> = Vec::new();
    let mut push = |equal: bool, di: usize, dj: usize, i: usize, j: usize| {
        let kind = if equal { HunkKind::Equal } else { HunkKind::Replace };
        match hunks.last_mut() {
            Some(h) if (h.kind == HunkKind::Equal) == equal => {
                h.source.end = i + di;
                h.target.end = j + dj;
            }
            _ => hunks.push(Hunk {
                kind,
                source: i..i + di,
                target: j..j + dj,
            }),
        }
    };
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && src[i] == tgt[j] {
            push(true, 1, 1, i, j);
            i += 1;
            j += 1;
        } else if j == m || (i < n && lcs[i + 1][j] >= lcs[i][j + 1]) {
            push(false, 1, 0, i, j);
            i += 1;
        } else {
            push(false, 0, 1, i, j);
            j += 1;
        }
    }
    for h in &mut hunks {
        if h.kind == HunkKind::Replace {
            h.kind = match (h.source.is_empty(), h.target.is_empty()) {
                (false, false) => HunkKind::Replace,
                (false, true) => HunkKind::Delete,
                (true, false) => HunkKind::Insert,
                (true, true) => unreachable!("empty hunk"),
            };
        }
    }
    hunks
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aspect {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl Aspect {
    pub fn from_tokens(tokens: &[String], span: Range<usize>) -> Self {
        Self {
            text: tokens[span.clone()].join(" "),
            start: span.start,
            end: span.end,
        }
    }

    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Swap,
    Add,
    Delete,
    None,
}

impl ActionKind {
    pub fn symbol(self) -> char {
        match self {
            ActionKind::Swap => '⊗',
            ActionKind::Add => '⊕',
            ActionKind::Delete => '⊖',
            ActionKind::None => '⊘',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    ChangeObject,
    ChangeContent,
    ChangePose,
    ChangeColor,
    ChangeMaterial,
    ChangeBackground,
    ChangeStyle,
    AddObject,
    DeleteObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditAction {
    pub source: Option<Aspect>,
    pub target: Option<Aspect>,
    pub action: ActionKind,
    pub category: Category,
    /// `false` for categories filled in by [`infer_actions`].
    pub category_authoritative: bool,
    /// Source-token index before which an add action inserts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insert_at: Option<usize>,
}

impl EditAction {
    pub fn is_edit(&self) -> bool {
        self.action != ActionKind::None
    }

    /// Source-side position: the span start, or the insertion point of an add.
    pub fn source_position(&self) -> usize {
        self.source
            .as_ref()
            .map(|a| a.start)
            .or(self.insert_at)
            .unwrap_or(0)
    }

    pub fn describe(&self) -> String {
        let s = self.source.as_ref().map(|a| a.text.as_str()).unwrap_or("∅");
        let t = self.target.as_ref().map(|a| a.text.as_str()).unwrap_or("∅");
        format!("{} {s} → {t}", self.action.symbol())
    }

    /// Checks the per-kind shape rules.
    pub fn check(&self) -> std::result::Result<(), String> {
        match (self.action, &self.source, &self.target) {
            (ActionKind::Swap, Some(_), Some(_)) => Ok(()),
            (ActionKind::Swap, _, _) => Err("swap requires both source and target aspects".into()),
            (ActionKind::Add, None, Some(_)) if self.insert_at.is_some() => Ok(()),
            (ActionKind::Add, None, Some(_)) => Err("add requires an insertion point".into()),
            (ActionKind::Add, _, _) => Err("add requires a target aspect only".into()),
            (ActionKind::Delete, Some(_), None) => Ok(()),
            (ActionKind::Delete, _, _) => Err("delete requires a source aspect only".into()),
            (ActionKind::None, Some(s), Some(t)) if same(&s.text, &t.text) => Ok(()),
            (ActionKind::None, Some(_), Some(_)) => {
                Err("no-change requires equal source and target text".into())
            }
            (ActionKind::None, _, _) => Err("no-change requires both aspects".into()),
        }
        .and_then(|()| {
            for a in [&self.source, &self.target].into_iter().flatten() {
                if a.is_empty() {
                    return Err(format!("empty aspect span {}..{}", a.start, a.end));
                }
            }
            Ok(())
        })
    }
}

/// A validated set of aspect-level edits between two prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub source_prompt: String,
    pub target_prompt: String,
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub actions: Vec<EditAction>,
    /// Object/attribute pairs, as indices into [`EditPlan::edits`].
    #[serde(default)]
    pub aspect_pairs: Vec<(usize, usize)>,
}

impl EditPlan {
    pub fn infer(source_prompt: &str, target_prompt: &str) -> Result<Self> {
        let actions = infer_actions(source_prompt, target_prompt)?;
        Ok(Self {
            source_prompt: source_prompt.to_string(),
            target_prompt: target_prompt.to_string(),
            source_tokens: tokenize(source_prompt),
            target_tokens: tokenize(target_prompt),
            actions,
            aspect_pairs: Vec::new(),
        })
    }

    /// Actions other than no-change, in plan order.
    pub fn edits(&self) -> Vec<&EditAction> {
        self.actions.iter().filter(|a| a.is_edit()).collect()
    }

    pub fn edit_count(&self) -> usize {
        self.actions.iter().filter(|a| a.is_edit()).count()
    }

    /// Source tokens with the selected actions applied.
    pub fn apply<'a>(&self, actions: impl IntoIterator<Item = &'a EditAction>) -> Result<Vec<String>> {
        apply_actions(&self.source_tokens, actions)
    }

    /// The target prompt with edit `index` (into [`EditPlan::edits`]) reverted
    /// to its source form.
    pub fn revert_edit(&self, index: usize) -> Result<Vec<String>> {
        let edits = self.edits();
        if index >= edits.len() {
            return Err(Error::InvalidArgument(format!("no edit #{index}")));
        }
        self.apply(edits.iter().enumerate().filter(|(i, _)| *i != index).map(|(_, a)| *a))
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_plan(&self.actions, &self.source_prompt, &self.target_prompt)
    }
}

/// Aligns the two prompts and turns each run into one action.
pub fn infer_actions(source_prompt: &str, target_prompt: &str) -> Result<Vec<EditAction>> {
    let src = tokenize(source_prompt);
    let tgt = tokenize(target_prompt);
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::InvalidArgument("prompts must contain at least one token".into()));
    }
    Ok(diff_tokens(&src, &tgt)
        .into_iter()
        .map(|h| action_from_hunk(&src, &tgt, &h, Category::ChangeObject, false))
        .collect())
}

fn action_from_hunk(
    src: &[String],
    tgt: &[String],
    h: &Hunk,
    category: Category,
    authoritative: bool,
) -> EditAction {
    let source = (!h.source.is_empty()).then(|| Aspect::from_tokens(src, h.source.clone()));
    let target = (!h.target.is_empty()).then(|| Aspect::from_tokens(tgt, h.target.clone()));
    let action = match h.kind {
        HunkKind::Equal => ActionKind::None,
        HunkKind::Replace => ActionKind::Swap,
        HunkKind::Delete => ActionKind::Delete,
        HunkKind::Insert => ActionKind::Add,
    };
    EditAction {
        insert_at: (action == ActionKind::Add).then_some(h.source.start),
        source,
        target,
        action,
        category,
        category_authoritative: authoritative,
    }
}

/// Applies `actions` to `source` tokens. Add actions insert their target text
/// before `insert_at`; swaps substitute; deletes drop; no-change keeps.
pub fn apply_actions<'a>(
    source: &[String],
    actions: impl IntoIterator<Item = &'a EditAction>,
) -> Result<Vec<String>> {
    Ok(apply_actions_traced(source, actions)?.tokens)
}

/// Result of [`apply_actions_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub tokens: Vec<String>,
    /// Output span written by each input action (empty for deletes).
    pub spans: Vec<Range<usize>>,
    /// Output index of every source token that was copied through unchanged.
    pub source_positions: Vec<Option<usize>>,
}

/// [`apply_actions`] that also reports where every action and every
/// surviving source token ended up.
pub fn apply_actions_traced<'a>(
    source: &[String],
    actions: impl IntoIterator<Item = &'a EditAction>,
) -> Result<Applied> {
    let n = source.len();
    let mut inserts: Vec<(usize, usize, &EditAction)> = Vec::new();
    let mut replaced: Vec<Option<(usize, &EditAction)>> = vec![None; n];
    let mut count = 0;
    for (order, a) in actions.into_iter().enumerate() {
        count += 1;
        match a.action {
            ActionKind::Add => {
                let at = a
                    .insert_at
                    .ok_or_else(|| Error::Composition(format!("add without position: {}", a.describe())))?;
                if at > n || a.target.is_none() {
                    return Err(Error::Composition(format!(
                        "insertion point {at} outside source of {n} tokens"
                    )));
                }
                inserts.push((at, order, a));
            }
            ActionKind::Swap | ActionKind::Delete | ActionKind::None => {
                let s = a
                    .source
                    .as_ref()
                    .ok_or_else(|| Error::Composition(format!("missing source aspect: {}", a.describe())))?;
                if s.end > n || s.is_empty() {
                    return Err(Error::Composition(format!(
                        "source span {}..{} outside {n} tokens",
                        s.start, s.end
                    )));
                }
                for slot in &mut replaced[s.span()] {
                    if slot.is_some() {
                        return Err(Error::Composition(format!(
                            "overlapping source spans at {}..{}",
                            s.start, s.end
                        )));
                    }
                    *slot = Some((order, a));
                }
            }
        }
    }
    inserts.sort_by_key(|&(at, order, _)| (at, order));

    let mut out: Vec<String> = Vec::new();
    let mut spans = vec![0..0; count];
    let mut source_positions = vec![None; n];
    let mut next_insert = inserts.iter().peekable();
    let mut i = 0;
    while i <= n {
        while let Some((_, order, a)) = next_insert.next_if(|(at, _, _)| *at == i) {
            let t = a.target.as_ref().expect("checked above");
            let start = out.len();
            out.extend(t.text.split(' ').map(str::to_string));
            spans[*order] = start..out.len();
        }
        if i == n {
            break;
        }
        match replaced[i] {
            Some((order, a)) => {
                let s = a.source.as_ref().expect("checked above");
                let start = out.len();
                match a.action {
                    ActionKind::Swap => {
                        let t = a
                            .target
                            .as_ref()
                            .ok_or_else(|| Error::Composition("swap without target".into()))?;
                        out.extend(t.text.split(' ').map(str::to_string));
                    }
                    ActionKind::None => {
                        for (k, tok) in source[s.span()].iter().enumerate() {
                            source_positions[s.start + k] = Some(out.len());
                            out.push(tok.clone());
                        }
                    }
                    _ => {}
                }
                spans[order] = start..out.len();
                i = s.end;
            }
            None => {
                source_positions[i] = Some(out.len());
                out.push(source[i].clone());
                i += 1;
            }
        }
    }
    Ok(Applied {
        tokens: out,
        spans,
        source_positions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    Invariant { action: usize, reason: String },
    OutOfBounds { action: usize, reason: String },
    SourceOverlap { first: usize, second: usize, spans: [(usize, usize); 2] },
    TargetOverlap { first: usize, second: usize, spans: [(usize, usize); 2] },
    UncoveredSource { index: usize },
    UncoveredTarget { index: usize },
    TextMismatch { action: usize, reason: String },
}

/// Reports every structural problem of `plan`; an empty report means consistent.
pub fn validate_plan(plan: &[EditAction], source_prompt: &str, target_prompt: &str) -> Vec<Violation> {
    let src = tokenize(source_prompt);
    let tgt = tokenize(target_prompt);
    let mut report = Vec::new();

    for (i, a) in plan.iter().enumerate() {
        if let Err(reason) = a.check() {
            report.push(Violation::Invariant { action: i, reason });
        }
        for (aspect, tokens, side) in [(&a.source, &src, "source"), (&a.target, &tgt, "target")] {
            if let Some(asp) = aspect {
                if asp.end > tokens.len() {
                    report.push(Violation::OutOfBounds {
                        action: i,
                        reason: format!("{side} span {}..{} beyond {} tokens", asp.start, asp.end, tokens.len()),
                    });
                } else if !same(&tokens[asp.span()].join(" "), &asp.text) {
                    report.push(Violation::TextMismatch {
                        action: i,
                        reason: format!("{side} text `{}` differs from tokens", asp.text),
                    });
                }
            }
        }
        if let Some(at) = a.insert_at {
            if at > src.len() {
                report.push(Violation::OutOfBounds {
                    action: i,
                    reason: format!("insertion point {at} beyond {} tokens", src.len()),
                });
            }
        }
    }

    let spans = |side: fn(&EditAction) -> &Option<Aspect>| -> Vec<(usize, Range<usize>)> {
        plan.iter()
            .enumerate()
            .filter_map(|(i, a)| side(a).as_ref().map(|s| (i, s.span())))
            .collect()
    };
    let src_spans = spans(|a| &a.source);
    let tgt_spans = spans(|a| &a.target);
    for (list, is_source) in [(&src_spans, true), (&tgt_spans, false)] {
        for (x, (i, a)) in list.iter().enumerate() {
            for (j, b) in &list[x + 1..] {
                if a.start < b.end && b.start < a.end {
                    let spans = [(a.start, a.end), (b.start, b.end)];
                    report.push(if is_source {
                        Violation::SourceOverlap { first: *i, second: *j, spans }
                    } else {
                        Violation::TargetOverlap { first: *i, second: *j, spans }
                    });
                }
            }
        }
    }

    let covered = |list: &[(usize, Range<usize>)]| -> BTreeSet<usize> {
        list.iter().flat_map(|(_, r)| r.clone()).collect()
    };
    let (cs, ct) = (covered(&src_spans), covered(&tgt_spans));
    report.extend((0..src.len()).filter(|i| !cs.contains(i)).map(|index| Violation::UncoveredSource { index }));
    report.extend((0..tgt.len()).filter(|i| !ct.contains(i)).map(|index| Violation::UncoveredTarget { index }));
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatedAction {
    Swap,
    Add,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedEdit {
    pub position: Vec<usize>,
    #[serde(rename = "type")]
    pub category: Category,
    pub action: AnnotatedAction,
}

/// One benchmark annotation: prompts (aspects may be marked with `[ ]`),
/// the authoritative edit actions, and object/attribute pairings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_path: String,
    pub source_prompt: String,
    pub target_prompt: String,
    pub edit_actions: Vec<AnnotatedEdit>,
    pub aspect_mapping: Vec<[usize; 2]>,
}

impl AnnotationRecord {
    pub fn source_tokens(&self) -> Vec<String> {
        tokenize(&self.source_prompt)
    }

    pub fn target_tokens(&self) -> Vec<String> {
        tokenize(&self.target_prompt)
    }

    /// Bracketed aspects of the target prompt.
    pub fn target_aspects(&self) -> Vec<Aspect> {
        let (tokens, spans) = tokenize_with_brackets(&self.target_prompt);
        spans.into_iter().map(|s| Aspect::from_tokens(&tokens, s)).collect()
    }

    pub fn source_aspects(&self) -> Vec<Aspect> {
        let (tokens, spans) = tokenize_with_brackets(&self.source_prompt);
        spans.into_iter().map(|s| Aspect::from_tokens(&tokens, s)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn validate(&self) -> Result<()> {
        let n_src = self.source_tokens().len();
        if n_src == 0 || self.target_tokens().is_empty() {
            return Err(Error::Validation("prompts must not be empty".into()));
        }
        for (i, e) in self.edit_actions.iter().enumerate() {
            if e.position.is_empty() {
                return Err(Error::Validation(format!("edit_actions[{i}].position is empty")));
            }
            let limit = if e.action == AnnotatedAction::Add { n_src + 1 } else { n_src };
            if let Some(p) = e.position.iter().find(|&&p| p >= limit) {
                return Err(Error::Validation(format!(
                    "edit_actions[{i}].position {p} outside source prompt of {n_src} tokens"
                )));
            }
            if e.position.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(Error::Validation(format!(
                    "edit_actions[{i}].position must be contiguous and ascending"
                )));
            }
        }
        for (i, [o, a]) in self.aspect_mapping.iter().enumerate() {
            if *o >= self.edit_actions.len() || *a >= self.edit_actions.len() {
                return Err(Error::Validation(format!(
                    "aspect_mapping[{i}] references an undeclared edit action"
                )));
            }
        }
        Ok(())
    }

    /// Builds the plan: annotated actions are authoritative; the prompt
    /// alignment only locates the target-side span of each annotated edit and
    /// fills the untouched runs with no-change actions.
    pub fn to_plan(&self) -> Result<EditPlan> {
        self.validate()?;
        let src = self.source_tokens();
        let tgt = self.target_tokens();
        let hunks = diff_tokens(&src, &tgt);
        let mut actions = Vec::new();
        let mut claimed_src = vec![false; src.len()];
        let mut claimed_tgt = vec![false; tgt.len()];

        for (i, e) in self.edit_actions.iter().enumerate() {
            let first = e.position[0];
            let span = first..e.position[e.position.len() - 1] + 1;
            let action = match e.action {
                AnnotatedAction::Delete => EditAction {
                    source: Some(Aspect::from_tokens(&src, span.clone())),
                    target: None,
                    action: ActionKind::Delete,
                    category: e.category,
                    category_authoritative: true,
                    insert_at: None,
                },
                AnnotatedAction::Swap => {
                    let t = target_span_for(&hunks, span.clone()).ok_or_else(|| {
                        Error::Validation(format!(
                            "edit_actions[{i}]: no changed target tokens align with source {}..{}",
                            span.start, span.end
                        ))
                    })?;
                    EditAction {
                        source: Some(Aspect::from_tokens(&src, span.clone())),
                        target: Some(Aspect::from_tokens(&tgt, t)),
                        action: ActionKind::Swap,
                        category: e.category,
                        category_authoritative: true,
                        insert_at: None,
                    }
                }
                AnnotatedAction::Add => {
                    let t = hunks
                        .iter()
                        .find(|h| h.kind != HunkKind::Equal && h.source.start == first && !h.target.is_empty())
                        .map(|h| h.target.clone())
                        .ok_or_else(|| {
                            Error::Validation(format!(
                                "edit_actions[{i}]: no inserted target tokens at source position {first}"
                            ))
                        })?;
                    EditAction {
                        source: None,
                        target: Some(Aspect::from_tokens(&tgt, t)),
                        action: ActionKind::Add,
                        category: e.category,
                        category_authoritative: true,
                        insert_at: Some(first),
                    }
                }
            };
            if e.action != AnnotatedAction::Add {
                for k in span.clone() {
                    claimed_src[k] = true;
                }
            }
            if let Some(t) = &action.target {
                for k in t.span() {
                    claimed_tgt[k] = true;
                }
            }
            actions.push(action);
        }

        // unchanged runs become no-change actions, clipped to unclaimed tokens
        for h in hunks.iter().filter(|h| h.kind == HunkKind::Equal) {
            let mut k = h.source.start;
            while k < h.source.end {
                let offset = k - h.source.start;
                if claimed_src[k] || claimed_tgt[h.target.start + offset] {
                    k += 1;
                    continue;
                }
                let start = k;
                while k < h.source.end
                    && !claimed_src[k]
                    && !claimed_tgt[h.target.start + (k - h.source.start)]
                {
                    k += 1;
                }
                let t0 = h.target.start + (start - h.source.start);
                actions.push(EditAction {
                    source: Some(Aspect::from_tokens(&src, start..k)),
                    target: Some(Aspect::from_tokens(&tgt, t0..t0 + (k - start))),
                    action: ActionKind::None,
                    category: Category::ChangeObject,
                    category_authoritative: false,
                    insert_at: None,
                });
            }
        }

        let n_edits = self.edit_actions.len();
        let plan = EditPlan {
            source_prompt: self.source_prompt.clone(),
            target_prompt: self.target_prompt.clone(),
            source_tokens: src,
            target_tokens: tgt,
            // the annotated edits stay first so aspect_mapping indices line up
            actions,
            aspect_pairs: self.aspect_mapping.iter().map(|[o, a]| (*o, *a)).collect(),
        };
        debug_assert_eq!(plan.edit_count(), n_edits);
        Ok(plan)
    }
}

/// Target span aligned with a source span lying in one changed hunk.
fn target_span_for(hunks: &[Hunk], span: Range<usize>) -> Option<Range<usize>> {
    let h = hunks.iter().find(|h| {
        h.kind == HunkKind::Replace && h.source.start <= span.start && span.end <= h.source.end
    })?;
    if span == h.source {
        Some(h.target.clone())
    } else if h.source.len() == h.target.len() {
        let off = span.start - h.source.start;
        Some(h.target.start + off..h.target.start + off + span.len())
    } else {
        None
    }
}

/// Parses an annotation document, naming the first missing field.
pub fn parse_annotation(document: &str) -> Result<AnnotationRecord> {
    let value: Value = serde_json::from_str(document)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Schema("<root object>".into()))?;
    for (key, check) in [
        ("image_path", Value::is_string as fn(&Value) -> bool),
        ("source_prompt", Value::is_string),
        ("target_prompt", Value::is_string),
        ("edit_actions", Value::is_array),
        ("aspect_mapping", Value::is_array),
    ] {
        match obj.get(key) {
            Some(v) if check(v) => {}
            _ => return Err(Error::Schema(key.into())),
        }
    }
    for (i, e) in obj["edit_actions"].as_array().into_iter().flatten().enumerate() {
        for key in ["position", "type", "action"] {
            if e.get(key).is_none() {
                return Err(Error::Schema(format!("edit_actions[{i}].{key}")));
            }
        }
    }
    let record: AnnotationRecord = serde_json::from_value(value)
        .map_err(|e| Error::Schema(e.to_string()))?;
    record.validate()?;
    Ok(record)
}
