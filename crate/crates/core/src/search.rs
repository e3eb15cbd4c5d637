//! Greedy operation sorting with adaptive re-evaluation and pre-sorting
//! filtering, plus budget truncation of the result.
//!
//! The pipeline:
//!
//! 1. Exclusions: critical-group operations at shallow layers (`l <= l_d`)
//!    are never pruned, nor is anything whose redundancy partner is one of
//!    them.
//! 2. Free-to-prune search: for each (group, module) a lower-bound binary
//!    search finds the earliest layer from which pruning every deeper
//!    operation keeps the baseline score. Those operations form the fixed
//!    head of the sequence.
//! 3. Greedy sort of the rest. Each step picks the candidate whose pruning
//!    (together with the current prefix) scores best. In adaptive mode the
//!    scores from the last full rescoring are reused; the pick is confirmed
//!    with a single call and a full rescoring happens only when the
//!    confirmed score falls below the active threshold. When every rescored
//!    candidate is below the threshold the next (lower) threshold becomes
//!    active; once all thresholds are used up every confirmation passes.
//! 4. Truncation at the shortest prefix meeting the FLOPs budget.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::eval::{EvalError, Evaluator, Score};
use crate::flops::{self, Flops, FlopsError, FlopsReport, Truncation};
use crate::model::{
    all_operations, partner_satisfied, DecoderConfig, GroupId, GroupKind, ModelError, ModuleKind,
    Operation, Policy, TokenLayout,
};
use crate::trace::{SinkError, TraceEvent, TraceSink};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SearchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flops(#[from] FlopsError),
    #[error("{source} (after {committed} committed step(s))")]
    Eval { source: EvalError, committed: usize },
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("invalid threshold schedule: {0}")]
    Schedule(&'static str),
    #[error("no admissible candidate at step {step} with {remaining} operation(s) left")]
    Stalled { step: usize, remaining: usize },
    #[error("evaluator returned different scores for the same policy at step {step}")]
    Nondeterministic { step: usize },
    #[error("evaluator returned a non-finite score")]
    NonFiniteScore,
    #[error(transparent)]
    Sink(#[from] SinkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Reuse cached scores; rescore only when a confirmation misses the threshold.
    #[default]
    Adaptive,
    /// Rescore every candidate at every step.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Earliest in canonical operation order wins.
    #[default]
    Canonical,
}

/// Strictly decreasing score thresholds `μ_1 > … > μ_Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdSchedule {
    mu: Vec<Score>,
}

impl ThresholdSchedule {
    pub fn new(mu: Vec<Score>) -> Result<Self, SearchError> {
        if mu.is_empty() {
            return Err(SearchError::Schedule("at least one threshold is required"));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(SearchError::Schedule("thresholds must be finite"));
        }
        if mu.windows(2).any(|w| w[0] <= w[1]) {
            return Err(SearchError::Schedule("thresholds must be strictly decreasing"));
        }
        Ok(ThresholdSchedule { mu })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn get(&self, z: usize) -> Option<Score> {
        self.mu.get(z).copied()
    }

    pub fn values(&self) -> &[Score] {
        &self.mu
    }
}

impl TryFrom<Vec<f64>> for ThresholdSchedule {
    type Error = SearchError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        ThresholdSchedule::new(v)
    }
}

impl From<ThresholdSchedule> for Vec<f64> {
    fn from(s: ThresholdSchedule) -> Self {
        s.mu
    }
}

/// `Z` thresholds stepping evenly from the baseline down to 20% of it:
/// `μ_z = baseline · (1 − 0.8·z/Z)`.
pub fn default_thresholds(baseline: Score, z: usize) -> Result<ThresholdSchedule, SearchError> {
    if !(baseline > 0.0) || !baseline.is_finite() {
        return Err(SearchError::Schedule(
            "baseline score must be positive to derive default thresholds",
        ));
    }
    if z == 0 {
        return Err(SearchError::Schedule("at least one threshold is required"));
    }
    // 1 − 0.8·i/Z = (5Z − 4i) / 5Z, kept integral until the last step
    let den = 5.0 * z as f64;
    let mu = (1..=z)
        .map(|i| baseline * (5 * z - 4 * i) as f64 / den)
        .collect();
    ThresholdSchedule::new(mu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdSpec {
    /// Derived from the baseline via [`default_thresholds`].
    Default { z: usize },
    Explicit { mu: ThresholdSchedule },
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec::Default { z: 15 }
    }
}

impl ThresholdSpec {
    pub fn resolve(&self, baseline: Score) -> Result<ThresholdSchedule, SearchError> {
        match self {
            ThresholdSpec::Default { z } => default_thresholds(baseline, *z),
            ThresholdSpec::Explicit { mu } => Ok(mu.clone()),
        }
    }
}

/// Inclusive 1-indexed layer interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: u16,
    pub end: u16,
}

impl LayerRange {
    /// The deeper half of the decoder: `L/2 + 1 ..= L`.
    pub fn posterior_half(layers: u16) -> Self {
        LayerRange {
            start: layers / 2 + 1,
            end: layers,
        }
    }

    pub fn len(&self) -> usize {
        (self.end as usize + 1).saturating_sub(self.start as usize)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub thresholds: ThresholdSpec,
    /// Critical-group operations at layers `1..=danger_layer` are never
    /// pruned. Zero disables the exclusion.
    pub danger_layer: u16,
    pub free_search: bool,
    /// Layers scanned by the free-to-prune search; `None` means the deeper
    /// half of the decoder.
    pub free_search_range: Option<LayerRange>,
    pub flash_pairing: bool,
    pub tie_break: TieBreak,
    pub mode: SearchMode,
    pub parallel_eval: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            thresholds: ThresholdSpec::default(),
            danger_layer: 0,
            free_search: true,
            free_search_range: None,
            flash_pairing: false,
            tie_break: TieBreak::Canonical,
            mode: SearchMode::Adaptive,
            parallel_eval: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, layers: u16) -> Result<(), SearchError> {
        if self.danger_layer >= layers {
            return Err(SearchError::Config(alloc::format!(
                "danger_layer {} must be below the layer count {layers}",
                self.danger_layer
            )));
        }
        if let Some(r) = self.free_search_range {
            if r.start == 0 || r.end > layers || r.start > r.end {
                return Err(SearchError::Config(alloc::format!(
                    "free_search_range {}..={} must be a nonempty range within 1..={layers}",
                    r.start, r.end
                )));
            }
        }
        match &self.thresholds {
            ThresholdSpec::Default { z: 0 } => Err(SearchError::Schedule("z must be at least 1")),
            _ => Ok(()),
        }
    }

    pub fn free_range(&self, layers: u16) -> LayerRange {
        self.free_search_range
            .unwrap_or_else(|| LayerRange::posterior_half(layers))
    }
}

/// What a search step selects: one operation, or the fused MHA-out/MHA-in
/// pair of a (group, layer) when flash pairing is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Candidate {
    lead: Operation,
    partner: Option<Operation>,
}

impl Candidate {
    pub fn single(op: Operation) -> Self {
        Candidate {
            lead: op,
            partner: None,
        }
    }

    pub fn fused(out: Operation, inp: Operation) -> Self {
        debug_assert_eq!(out.module, ModuleKind::MhaOut);
        debug_assert_eq!(inp.module, ModuleKind::MhaIn);
        Candidate {
            lead: out,
            partner: Some(inp),
        }
    }

    pub fn lead(&self) -> Operation {
        self.lead
    }

    pub fn ops(&self) -> impl Iterator<Item = Operation> + '_ {
        core::iter::once(self.lead).chain(self.partner)
    }

    pub fn len(&self) -> usize {
        1 + self.partner.is_some() as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn admissible(&self, selected: &Policy, layout: &TokenLayout) -> bool {
        self.ops().all(|op| partner_satisfied(&op, selected, layout))
    }
}

/// Splits canonically ordered operations into search units.
pub fn into_candidates(ops: &[Operation], flash_pairing: bool) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(ops.len());
    let mut i = 0;
    while i < ops.len() {
        let op = ops[i];
        if flash_pairing && op.module == ModuleKind::MhaOut {
            if let Some(&next) = ops.get(i + 1) {
                if next == op.with_module(ModuleKind::MhaIn) {
                    out.push(Candidate::fused(op, next));
                    i += 2;
                    continue;
                }
            }
        }
        out.push(Candidate::single(op));
        i += 1;
    }
    out
}

/// Batch evaluation used for full rescoring. Results come back in input
/// order so selection never depends on scheduling.
pub trait BatchEval {
    fn evaluate_all(&self, evaluator: &dyn Evaluator, policies: &[Policy]) -> Vec<Result<Score, EvalError>>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Sequential;

impl BatchEval for Sequential {
    fn evaluate_all(&self, evaluator: &dyn Evaluator, policies: &[Policy]) -> Vec<Result<Score, EvalError>> {
        policies.iter().map(|p| evaluator.evaluate(p)).collect()
    }
}

fn checked(score: Result<Score, EvalError>, committed: usize) -> Result<Score, SearchError> {
    match score {
        Ok(s) if s.is_nan() => Err(SearchError::NonFiniteScore),
        Ok(s) => Ok(s),
        Err(source) => Err(SearchError::Eval { source, committed }),
    }
}

/// Operations never pruned: the danger set and everything that depends on
/// it through redundancy partners.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Exclusions {
    pub danger: Vec<Operation>,
    pub blocked: Vec<Operation>,
}

impl Exclusions {
    pub fn contains(&self, op: &Operation) -> bool {
        self.danger.contains(op) || self.blocked.contains(op)
    }
}

pub fn exclusions(config: &DecoderConfig, search: &SearchConfig) -> Result<Exclusions, SearchError> {
    let layout = &config.layout;
    let ops = all_operations(config)?;
    let danger: Vec<Operation> = ops
        .iter()
        .filter(|op| {
            layout.group(op.group).kind == GroupKind::VisualCritical && op.layer <= search.danger_layer
        })
        .copied()
        .collect();
    let mut excluded: alloc::collections::BTreeSet<Operation> = danger.iter().copied().collect();
    let mut blocked = Vec::new();
    // canonical order visits partners before dependents at equal (layer, module)
    for op in &ops {
        if excluded.contains(op) {
            continue;
        }
        if let Some(p) = layout.partner(op.group) {
            if excluded.contains(&op.with_group(p)) {
                excluded.insert(*op);
                blocked.push(*op);
            }
        }
    }
    Ok(Exclusions { danger, blocked })
}

/// Outcome of one free-to-prune binary search.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeSearch {
    pub group: GroupId,
    pub modules: Vec<ModuleKind>,
    /// Earliest qualifying layer, or `layers + 1` if none qualified.
    pub l_star: u16,
    pub probes: usize,
}

/// Earliest `l*` in `range` such that pruning `modules` of `group` at every
/// layer `>= l*` scores at least `baseline`. Returns `layers + 1` when no
/// layer in the range qualifies. Lower-bound binary search: assumes the
/// predicate is monotone in `l*`.
#[allow(clippy::too_many_arguments)]
pub fn binary_search_free(
    config: &DecoderConfig,
    group: GroupId,
    modules: &[ModuleKind],
    range: LayerRange,
    baseline: Score,
    evaluator: &dyn Evaluator,
    sink: &mut dyn TraceSink,
) -> Result<FreeSearch, SearchError> {
    let layers = config.shape.layers;
    let digest = config.digest();
    let mut probes = 0;
    let (mut lo, mut hi) = (range.start as u32, range.end as u32 + 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        let policy = Policy::from_ops(
            digest,
            (mid as u16..=layers)
                .flat_map(|l| modules.iter().map(move |&m| Operation::new(group, l, m))),
        );
        let score = checked(evaluator.evaluate(&policy), 0)?;
        probes += 1;
        let qualifies = score >= baseline;
        sink.record(&TraceEvent::FreeProbe {
            group,
            modules: modules.to_vec(),
            start_layer: mid as u16,
            score,
            qualifies,
            calls: evaluator.call_count(),
        })?;
        if qualifies {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let l_star = if lo > range.end as u32 { layers + 1 } else { lo as u16 };
    sink.record(&TraceEvent::FreeResult {
        group,
        modules: modules.to_vec(),
        l_star,
        calls: evaluator.call_count(),
    })?;
    Ok(FreeSearch {
        group,
        modules: modules.to_vec(),
        l_star,
        probes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    /// Free-to-prune operations in canonical order: the fixed sequence head.
    pub free: Vec<Operation>,
    /// Operations left for the greedy sort, canonical order.
    pub sortable: Vec<Operation>,
    pub exclusions: Exclusions,
    pub searches: Vec<FreeSearch>,
}

fn module_units(flash_pairing: bool) -> Vec<Vec<ModuleKind>> {
    if flash_pairing {
        alloc::vec![
            alloc::vec![ModuleKind::MhaOut, ModuleKind::MhaIn],
            alloc::vec![ModuleKind::Mlp],
        ]
    } else {
        ModuleKind::ALL.iter().map(|&m| alloc::vec![m]).collect()
    }
}

/// Splits the operation space into the free-to-prune head, the sortable
/// set and the permanently retained exclusions.
///
/// Groups are searched most-redundant first and a group's search starts no
/// earlier than its partner's `l*`, so the free set respects group
/// ordering. With flash pairing the two attention modules are searched as
/// one unit.
pub fn presort_filter(
    config: &DecoderConfig,
    search: &SearchConfig,
    baseline: Score,
    evaluator: &dyn Evaluator,
    sink: &mut dyn TraceSink,
) -> Result<FilterResult, SearchError> {
    search.validate(config.shape.layers)?;
    let layout = &config.layout;
    let layers = config.shape.layers;
    let ops = all_operations(config)?;
    let excl = exclusions(config, search)?;
    let range = search.free_range(layers);

    let mut free_from: BTreeMap<(GroupId, ModuleKind), u16> = BTreeMap::new();
    let mut searches = Vec::new();
    if search.free_search {
        for g in layout.prunable_groups() {
            for unit in module_units(search.flash_pairing) {
                let partner_start = layout
                    .partner(g)
                    .map(|p| free_from[&(p, unit[0])])
                    .unwrap_or(1);
                let start = range.start.max(partner_start);
                let found = if start > range.end {
                    FreeSearch {
                        group: g,
                        modules: unit.clone(),
                        l_star: layers + 1,
                        probes: 0,
                    }
                } else {
                    binary_search_free(
                        config,
                        g,
                        &unit,
                        LayerRange { start, end: range.end },
                        baseline,
                        evaluator,
                        sink,
                    )?
                };
                for &m in &unit {
                    free_from.insert((g, m), found.l_star);
                }
                searches.push(found);
            }
        }
    }

    let is_free = |op: &Operation| {
        free_from
            .get(&(op.group, op.module))
            .is_some_and(|&l| op.layer >= l)
    };
    let mut free = Vec::new();
    let mut sortable = Vec::new();
    for op in ops {
        if excl.contains(&op) {
            continue;
        }
        if is_free(&op) {
            free.push(op);
        } else {
            sortable.push(op);
        }
    }
    Ok(FilterResult {
        free,
        sortable,
        exclusions: excl,
        searches,
    })
}

/// One committed greedy step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub candidate: Candidate,
    /// Score the candidate was selected on (from the most recent rescoring).
    pub cached_score: Score,
    /// Score of the prefix including the candidate, evaluated at this step.
    pub score: Score,
    pub evaluator_calls: u64,
    /// 1-based active threshold, `None` once all thresholds are used up
    /// (and always in naive mode).
    pub threshold_index: Option<usize>,
}

/// Operations from most to least redundant.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedSequence {
    pub order: Vec<Operation>,
    /// Exclusive end index (into `order`) of each unit; valid truncation
    /// points. Fused flash pairs form a single unit.
    pub unit_ends: Vec<usize>,
    /// Length of the free-to-prune head.
    pub prefix_len: usize,
    pub steps: Vec<StepRecord>,
    pub evaluator_calls: u64,
    pub flash_pairing: bool,
}

impl SortedSequence {
    /// Prefix policies at every unit boundary, shortest first (excluding the
    /// empty prefix).
    pub fn prefixes<'a>(&'a self, config: &'a DecoderConfig) -> impl Iterator<Item = Policy> + 'a {
        let digest = config.digest();
        self.unit_ends
            .iter()
            .map(move |&end| Policy::from_ops(digest, self.order[..end].iter().copied()))
    }
}

fn unit_ends_of(candidates: &[Candidate]) -> Vec<usize> {
    let mut end = 0;
    candidates
        .iter()
        .map(|c| {
            end += c.len();
            end
        })
        .collect()
}

fn argmax_admissible(
    remaining: &[Candidate],
    cache: &BTreeMap<Candidate, Score>,
    selected: &Policy,
    layout: &TokenLayout,
) -> Option<(usize, Score)> {
    let mut best: Option<(usize, Score)> = None;
    for (i, c) in remaining.iter().enumerate() {
        if !c.admissible(selected, layout) {
            continue;
        }
        let s = cache.get(c).copied().unwrap_or(f64::NEG_INFINITY);
        // remaining is canonical; strict > keeps the earliest on ties
        if best.is_none_or(|(_, b)| s.partial_cmp(&b) == Some(Ordering::Greater)) {
            best = Some((i, s));
        }
    }
    best
}

struct Refresher<'a> {
    evaluator: &'a dyn Evaluator,
    batch: &'a dyn BatchEval,
}

impl Refresher<'_> {
    fn rescore(
        &self,
        selected: &Policy,
        remaining: &[Candidate],
        cache: &mut BTreeMap<Candidate, Score>,
        committed: usize,
    ) -> Result<(), SearchError> {
        let policies: Vec<Policy> = remaining.iter().map(|c| selected.with(&c.ops().collect::<Vec<_>>())).collect();
        let scores = self.batch.evaluate_all(self.evaluator, &policies);
        for (c, s) in remaining.iter().zip(scores) {
            cache.insert(*c, checked(s, committed)?);
        }
        Ok(())
    }
}

/// Moves to the next threshold while every admissible candidate's (fresh)
/// score is below the active one.
#[allow(clippy::too_many_arguments)]
fn advance_while_below(
    z: &mut usize,
    schedule: &ThresholdSchedule,
    remaining: &[Candidate],
    cache: &BTreeMap<Candidate, Score>,
    selected: &Policy,
    layout: &TokenLayout,
    step: usize,
    evaluator: &dyn Evaluator,
    sink: &mut dyn TraceSink,
) -> Result<(), SearchError> {
    while let Some(t) = schedule.get(*z) {
        let all_below = remaining
            .iter()
            .filter(|c| c.admissible(selected, layout))
            .all(|c| cache[c] < t);
        if !all_below {
            break;
        }
        *z += 1;
        sink.record(&TraceEvent::ThresholdAdvance {
            step,
            from: *z,
            to: (*z < schedule.len()).then_some(*z + 1),
            calls: evaluator.call_count(),
        })?;
    }
    Ok(())
}

/// Greedily orders `filter.sortable` after the fixed head `filter.free`.
///
/// `batch` is used for full rescoring; pass [`Sequential`] unless the
/// evaluator is safe to call concurrently.
pub fn greedy_sort(
    config: &DecoderConfig,
    filter: &FilterResult,
    schedule: &ThresholdSchedule,
    mode: SearchMode,
    flash_pairing: bool,
    evaluator: &dyn Evaluator,
    batch: &dyn BatchEval,
    sink: &mut dyn TraceSink,
) -> Result<SortedSequence, SearchError> {
    let layout = &config.layout;
    let head = into_candidates(&filter.free, flash_pairing);
    let mut order: Vec<Operation> = filter.free.clone();
    let mut unit_ends = unit_ends_of(&head);
    let prefix_len = order.len();
    let mut selected = Policy::from_ops(config.digest(), order.iter().copied());

    let mut remaining = into_candidates(&filter.sortable, flash_pairing);
    let mut cache: BTreeMap<Candidate, Score> = BTreeMap::new();
    let refresher = Refresher { evaluator, batch };
    let mut steps = Vec::new();
    let mut z = 0usize;
    let mut step = 1usize;
    let mut just_refreshed = false;

    if mode == SearchMode::Adaptive && !remaining.is_empty() {
        refresher.rescore(&selected, &remaining, &mut cache, 0)?;
        sink.record(&TraceEvent::Refresh {
            step,
            threshold_index: Some(1),
            evaluated: remaining.len(),
            calls: evaluator.call_count(),
        })?;
        advance_while_below(&mut z, schedule, &remaining, &cache, &selected, layout, step, evaluator, sink)?;
        just_refreshed = true;
    }

    while !remaining.is_empty() {
        let committed = steps.len();
        if mode == SearchMode::Naive {
            refresher.rescore(&selected, &remaining, &mut cache, committed)?;
            sink.record(&TraceEvent::Refresh {
                step,
                threshold_index: None,
                evaluated: remaining.len(),
                calls: evaluator.call_count(),
            })?;
        }
        let (idx, cached) = argmax_admissible(&remaining, &cache, &selected, layout).ok_or(
            SearchError::Stalled {
                step,
                remaining: remaining.len(),
            },
        )?;
        let cand = remaining[idx];

        let (score, threshold_index) = match mode {
            SearchMode::Naive => (cached, None),
            SearchMode::Adaptive => {
                let ops: Vec<Operation> = cand.ops().collect();
                let score = checked(evaluator.evaluate(&selected.with(&ops)), committed)?;
                let threshold = schedule.get(z);
                let passed = threshold.is_none_or(|t| score >= t);
                sink.record(&TraceEvent::Confirm {
                    step,
                    candidate: cand,
                    cached,
                    score,
                    threshold,
                    passed,
                    calls: evaluator.call_count(),
                })?;
                if !passed {
                    // fresh scores only pass the active threshold, so a miss
                    // right after rescoring means the evaluator changed its mind
                    if just_refreshed {
                        return Err(SearchError::Nondeterministic { step });
                    }
                    refresher.rescore(&selected, &remaining, &mut cache, committed)?;
                    sink.record(&TraceEvent::Refresh {
                        step,
                        threshold_index: Some(z + 1),
                        evaluated: remaining.len(),
                        calls: evaluator.call_count(),
                    })?;
                    advance_while_below(&mut z, schedule, &remaining, &cache, &selected, layout, step, evaluator, sink)?;
                    just_refreshed = true;
                    continue;
                }
                (score, (z < schedule.len()).then_some(z + 1))
            }
        };

        remaining.remove(idx);
        cache.remove(&cand);
        for op in cand.ops() {
            selected.insert(op);
            order.push(op);
        }
        unit_ends.push(order.len());
        sink.record(&TraceEvent::Commit {
            step,
            candidate: cand,
            score,
            calls: evaluator.call_count(),
        })?;
        steps.push(StepRecord {
            step,
            candidate: cand,
            cached_score: cached,
            score,
            evaluator_calls: evaluator.call_count(),
            threshold_index,
        });
        step += 1;
        just_refreshed = false;
    }

    Ok(SortedSequence {
        order,
        unit_ends,
        prefix_len,
        steps,
        evaluator_calls: evaluator.call_count(),
        flash_pairing,
    })
}

/// Largest FLOPs reduction any policy avoiding the exclusions can reach.
pub fn max_reduction(config: &DecoderConfig, excl: &Exclusions) -> Result<Flops, SearchError> {
    let ops = all_operations(config)?;
    let policy = Policy::from_ops(config.digest(), ops.into_iter().filter(|o| !excl.contains(o)));
    Ok(flops::policy_flops(&policy, config)?.reduction())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortOutput {
    pub baseline: Score,
    pub schedule: ThresholdSchedule,
    pub filter: FilterResult,
    pub sequence: SortedSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub sort: SortOutput,
    pub truncation: Truncation,
    pub report: FlopsReport,
}

fn pick_batch<'a>(
    search: &SearchConfig,
    evaluator: &dyn Evaluator,
    parallel: Option<&'a dyn BatchEval>,
) -> &'a dyn BatchEval {
    match parallel {
        Some(p) if search.parallel_eval && evaluator.concurrency_safe() => p,
        _ => &Sequential,
    }
}

/// Baseline, pre-sorting filter and greedy sort; no truncation.
pub fn sort_pipeline(
    config: &DecoderConfig,
    search: &SearchConfig,
    evaluator: &dyn Evaluator,
    parallel: Option<&dyn BatchEval>,
    sink: &mut dyn TraceSink,
) -> Result<SortOutput, SearchError> {
    search.validate(config.shape.layers)?;
    let baseline = checked(evaluator.baseline(&config.empty_policy()), 0)?;
    sink.record(&TraceEvent::Baseline {
        score: baseline,
        calls: evaluator.call_count(),
    })?;
    let schedule = search.thresholds.resolve(baseline)?;
    let filter = presort_filter(config, search, baseline, evaluator, sink)?;
    let batch = pick_batch(search, evaluator, parallel);
    let sequence = greedy_sort(
        config,
        &filter,
        &schedule,
        search.mode,
        search.flash_pairing,
        evaluator,
        batch,
        sink,
    )?;
    Ok(SortOutput {
        baseline,
        schedule,
        filter,
        sequence,
    })
}

/// Full search: sort, then truncate to a FLOPs reduction of at least `tau`.
/// Infeasible budgets are rejected before any evaluator call.
pub fn run_pipeline(
    config: &DecoderConfig,
    search: &SearchConfig,
    evaluator: &dyn Evaluator,
    tau: Flops,
    parallel: Option<&dyn BatchEval>,
    sink: &mut dyn TraceSink,
) -> Result<PipelineOutput, SearchError> {
    search.validate(config.shape.layers)?;
    let excl = exclusions(config, search)?;
    let max = max_reduction(config, &excl)?;
    if tau > max {
        return Err(FlopsError::Infeasible {
            tau,
            max_reduction: max,
        }
        .into());
    }
    let sort = sort_pipeline(config, search, evaluator, parallel, sink)?;
    let truncation = flops::truncate_to_budget(&sort.sequence, config, tau)?;
    let report = flops::policy_flops(&truncation.policy, config)?;
    Ok(PipelineOutput {
        sort,
        truncation,
        report,
    })
}
