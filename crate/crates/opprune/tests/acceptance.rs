//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any failed.

use std::cmp::Reverse;
use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};

use opprune::core::eval::Evaluator;
use opprune::core::flops::{self, module_proportions, policy_flops, truncate_ops, FlopsError};
use opprune::core::model::{
    all_operations, validate_policy, ConstraintFlags, DecoderConfig, DecoderShape, GroupId,
    GroupKind, GroupSpec, ModuleKind, Operation, Policy, TokenLayout,
};
use opprune::core::oracle::{RandomOracleParams, SyntheticOracle, SyntheticOracleSpec};
use opprune::core::presets;
use opprune::core::search::{
    binary_search_free, sort_pipeline, LayerRange, SearchConfig, SearchMode, SortOutput,
};
use opprune::core::toy::{LayerMask, ToyDecoder, ToyDecoderSpec, ToyMetric};
use opprune::core::trace::{NullSink, VecSink};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// shared fixtures

fn single_group(layers: u16, count: u32) -> DecoderConfig {
    DecoderConfig::new(
        DecoderShape::new(layers, 8, 8, 16).unwrap(),
        TokenLayout::new(
            vec![
                GroupSpec::new("system", GroupKind::System, 2, false),
                GroupSpec::new("v", GroupKind::VisualRedundant, count, true),
            ],
            None,
        )
        .unwrap(),
    )
}

fn chain3(layers: u16) -> DecoderConfig {
    DecoderConfig::new(
        DecoderShape::new(layers, 8, 8, 16).unwrap(),
        TokenLayout::new(
            vec![
                GroupSpec::new("a", GroupKind::VisualCritical, 3, true).with_partner("b"),
                GroupSpec::new("b", GroupKind::VisualRedundant, 5, true).with_partner("c"),
                GroupSpec::new("c", GroupKind::VisualRedundant, 9, true),
                GroupSpec::new("text", GroupKind::Text, 4, false),
            ],
            None,
        )
        .unwrap(),
    )
}

fn split(layers: u16, r: f64) -> DecoderConfig {
    DecoderConfig::new(
        DecoderShape::new(layers, 8, 8, 16).unwrap(),
        TokenLayout::visual_split(2, 20, r, 3).unwrap(),
    )
}

/// A decoder with at most 12 operations.
fn small_config(rng: &mut ChaCha8Rng) -> DecoderConfig {
    match rng.random_range(0..4) {
        0 => single_group(rng.random_range(1..=4), rng.random_range(1..=9)),
        1 => split(rng.random_range(1..=2), [10.0, 25.0, 50.0][rng.random_range(0..3)]),
        2 => chain3(1),
        _ => split(2, 20.0),
    }
}

fn random_spec(
    ops: &[Operation],
    rng: &mut ChaCha8Rng,
    base: f64,
    interactions: usize,
) -> SyntheticOracleSpec {
    SyntheticOracleSpec::random(
        ops,
        rng.random(),
        RandomOracleParams {
            base,
            max_weight: 4.0,
            interactions,
            max_interaction: 2.0,
            quantum: 256.0,
        },
    )
}

fn sort_only(mode: SearchMode) -> SearchConfig {
    SearchConfig {
        free_search: false,
        mode,
        ..SearchConfig::default()
    }
}

fn run_sort(
    config: &DecoderConfig,
    search: &SearchConfig,
    spec: &SyntheticOracleSpec,
) -> (SortOutput, Vec<opprune::core::TraceEvent>, u64) {
    let oracle = SyntheticOracle::new(spec.clone());
    let mut trace = VecSink::default();
    let out = sort_pipeline(config, search, &oracle, None, &mut trace).expect("sort");
    (out, trace.0, oracle.call_count())
}

/// Hops along partner links until a group without a partner.
fn depth(layout: &TokenLayout, g: GroupId) -> usize {
    let mut d = 0;
    let mut cur = g;
    while let Some(p) = layout.group(cur).redundancy_partner.as_deref() {
        cur = layout.find(p).unwrap();
        d += 1;
    }
    d
}

fn canonical_key(layout: &TokenLayout, o: &Operation) -> (Reverse<u16>, usize, u16, usize) {
    let m = match o.module {
        ModuleKind::MhaOut => 0,
        ModuleKind::MhaIn => 1,
        ModuleKind::Mlp => 2,
    };
    (Reverse(o.layer), depth(layout, o.group), o.group.0, m)
}

fn enumerate_ops(config: &DecoderConfig) -> Vec<Operation> {
    let layout = &config.layout;
    let mut ops = Vec::new();
    for (i, g) in layout.groups().iter().enumerate() {
        if !g.prunable {
            continue;
        }
        for l in 1..=config.shape.layers {
            for m in [ModuleKind::MhaOut, ModuleKind::MhaIn, ModuleKind::Mlp] {
                ops.push(Operation::new(GroupId(i as u16), l, m));
            }
        }
    }
    ops.sort_by_key(|o| canonical_key(layout, o));
    ops
}

/// Score recomputed from scratch for an explicit operation set.
fn reference_score(spec: &SyntheticOracleSpec, set: &BTreeSet<Operation>) -> f64 {
    let harmless = |o: &Operation| {
        spec.harmless_depth
            .iter()
            .any(|&((g, m), d)| g == o.group && m == o.module && o.layer >= d)
    };
    let counts = |o: &Operation| set.contains(o) && !harmless(o);
    let mut s = spec.base;
    for (o, w) in &spec.weights {
        if counts(o) {
            s -= w;
        }
    }
    for ((a, b), w) in &spec.interactions {
        if counts(a) && counts(b) {
            s -= w;
        }
    }
    s
}

/// Textbook greedy: at every step rescore each admissible remaining
/// operation against the prefix and take the best, earliest on ties.
fn reference_greedy(config: &DecoderConfig, spec: &SyntheticOracleSpec) -> Vec<Operation> {
    let layout = &config.layout;
    let mut remaining = enumerate_ops(config);
    let mut prefix: BTreeSet<Operation> = BTreeSet::new();
    let mut order = Vec::new();
    while !remaining.is_empty() {
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in remaining.iter().enumerate() {
            if let Some(p) = layout.group(o.group).redundancy_partner.as_deref() {
                let partner = Operation::new(layout.find(p).unwrap(), o.layer, o.module);
                if !prefix.contains(&partner) {
                    continue;
                }
            }
            let mut with = prefix.clone();
            with.insert(*o);
            let s = reference_score(spec, &with);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let (i, _) = best.expect("some operation is always admissible");
        let o = remaining.remove(i);
        prefix.insert(o);
        order.push(o);
    }
    order
}

// ---------------------------------------------------------------------------
// criteria

fn c1_proportions() -> Check {
    let (out, inp, mlp) = module_proportions(&presets::llama_7b_shape(), 576);
    let detail = format!("mha_out {:.4}, mha_in {:.4}, mlp {:.4}", out, inp, mlp);
    ensure!((out - 0.175).abs() <= 0.005, "{detail}");
    ensure!((inp - 0.175).abs() <= 0.005, "{detail}");
    ensure!((mlp - 0.65).abs() <= 0.005, "{detail}");
    Ok(detail)
}

fn retained_keeping(r: f64) -> f64 {
    let config = presets::vision_7b(r).unwrap();
    let g1 = config.layout.find("g1").unwrap();
    let g2 = config.layout.find("g2").unwrap();
    let all = all_operations(&config).unwrap();
    let drop_redundant = Policy::from_ops(config.digest(), all.iter().copied().filter(|o| o.group == g2));
    let kept = config.layout.group(g1).count;
    assert_eq!(kept as f64, (576.0 * r / 100.0_f64).round());
    policy_flops(&drop_redundant, &config).unwrap().retained_ratio
}

fn c2_budget_consistency() -> Check {
    let config = presets::vision_7b(20.0).unwrap();
    let all = Policy::from_ops(config.digest(), all_operations(&config).unwrap());
    let zero = policy_flops(&all, &config).unwrap().retained_ratio;
    let r20 = retained_keeping(20.0);
    let r8 = retained_keeping(8.0);
    let detail = format!(
        "zero visual {:.4}, 20% visual {:.4}, 8% visual {:.4} (text tokens {})",
        zero,
        r20,
        r8,
        config.layout.group(config.layout.find("text").unwrap()).count
    );
    ensure!((zero - 0.186).abs() <= 0.001, "{detail}");
    ensure!((r20 - 0.35).abs() <= 0.01, "{detail}");
    ensure!((r8 - 0.25).abs() <= 0.01, "{detail}");
    Ok(detail)
}

fn c3_operation_count() -> Check {
    let config = presets::vision_7b(20.0).unwrap();
    let n = all_operations(&config).unwrap().len();
    ensure!(config.layout.prunable_groups().len() == 2, "prunable groups != 2");
    ensure!(n == 192, "{n} operations");
    Ok(format!("{n} operations"))
}

fn c4_greedy_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let instances = 200;
    let mut with_interactions = 0;
    for i in 0..instances {
        let config = small_config(&mut rng);
        let ops = all_operations(&config).unwrap();
        ensure!(ops.len() <= 12, "instance {i}: {} operations", ops.len());
        let k = rng.random_range(0..=10);
        with_interactions += (k > 0) as usize;
        let spec = random_spec(&ops, &mut rng, 100.0, k);
        let (out, _, _) = run_sort(&config, &sort_only(SearchMode::Naive), &spec);
        let reference = reference_greedy(&config, &spec);
        ensure!(
            out.sequence.order == reference,
            "instance {i}: sequences differ\n  got  {:?}\n  want {:?}",
            out.sequence.order,
            reference
        );
    }
    Ok(format!(
        "{instances} instances ({with_interactions} with interactions), all sequence-exact"
    ))
}

fn sort_calls(trace: &[opprune::core::TraceEvent]) -> u64 {
    use opprune::core::TraceEvent::*;
    trace
        .iter()
        .filter(|e| matches!(e, Refresh { .. } | Confirm { .. }))
        .map(|e| e.call_cost())
        .sum()
}

fn c5_adaptive() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = 0;
    let mut rescoring = 0;
    for i in 0..150 {
        let config = match i % 3 {
            0 => single_group(rng.random_range(2..=8), 4),
            1 => split(rng.random_range(1..=4), 25.0),
            _ => chain3(rng.random_range(1..=3)),
        };
        let ops = all_operations(&config).unwrap();
        let n = ops.len() as u64;
        // a high base keeps every score above the first threshold; base 100
        // forces threshold misses and rescoring
        let base = if i % 2 == 0 { 10_000.0 } else { 100.0 };
        let spec = random_spec(&ops, &mut rng, base, 0);
        let (naive, naive_trace, naive_calls) = run_sort(&config, &sort_only(SearchMode::Naive), &spec);
        let (adaptive, ad_trace, ad_calls) = run_sort(&config, &sort_only(SearchMode::Adaptive), &spec);
        ensure!(
            naive.sequence.order == adaptive.sequence.order,
            "additive instance {i}: adaptive sequence differs from naive"
        );
        let (a, nv) = (sort_calls(&ad_trace), sort_calls(&naive_trace));
        ensure!(a + 1 == ad_calls && nv + 1 == naive_calls, "instance {i}: trace does not account for every call");
        ensure!(nv == n * (n + 1) / 2, "instance {i}: naive made {nv} calls for {n} operations");
        let refreshes = ad_trace
            .iter()
            .filter(|e| matches!(e, opprune::core::TraceEvent::Refresh { .. }))
            .count();
        if refreshes == 1 {
            ensure!(a == 2 * n, "instance {i}: adaptive made {a} calls, expected {}", 2 * n);
            exact += 1;
        } else {
            rescoring += 1;
        }
        ensure!(a < nv, "instance {i}: adaptive {a} calls vs naive {nv} ({n} operations)");
    }

    let mut worst: f64 = 0.0;
    let mut mu_z = 0.0;
    for i in 0..100 {
        let config = small_config(&mut rng);
        let ops = all_operations(&config).unwrap();
        if ops.len() < 4 {
            continue;
        }
        let k = rng.random_range(1..=10);
        let spec = random_spec(&ops, &mut rng, 100.0, k);
        let (naive, _, _) = run_sort(&config, &sort_only(SearchMode::Naive), &spec);
        let (adaptive, _, _) = run_sort(&config, &sort_only(SearchMode::Adaptive), &spec);
        mu_z = *adaptive.schedule.values().last().unwrap();
        let max = flops::prefix_reductions(&naive.sequence.order, &naive.sequence.unit_ends, &config)
            .last()
            .copied()
            .unwrap();
        for frac in [0.1, 0.25, 0.5, 0.75, 0.9, 1.0] {
            let tau = (max as f64 * frac) as u64;
            let pn = flops::truncate_to_budget(&naive.sequence, &config, tau).unwrap().policy;
            let pa = flops::truncate_to_budget(&adaptive.sequence, &config, tau).unwrap().policy;
            let gap = (spec.score(&pa) - spec.score(&pn)).abs();
            worst = worst.max(gap);
            ensure!(gap <= mu_z, "interaction instance {i}, tau {tau}: gap {gap} > {mu_z}");
        }
    }
    Ok(format!(
        "150 additive oracles identical with fewer calls ({exact} at exactly |O_1|+n, {rescoring} with rescoring); interaction gap max {worst:.4} <= mu_Z {mu_z}"
    ))
}

fn c6_truncation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut infeasible = 0;
    let trials = 1500;
    for t in 0..trials {
        let config = match rng.random_range(0..3) {
            0 => single_group(rng.random_range(1..=6), rng.random_range(1..=50)),
            1 => split(rng.random_range(1..=6), 30.0),
            _ => chain3(rng.random_range(1..=4)),
        };
        let mut ops = all_operations(&config).unwrap();
        // random subset in random order, cut into random units
        for i in (1..ops.len()).rev() {
            ops.swap(i, rng.random_range(0..=i));
        }
        ops.truncate(rng.random_range(0..=ops.len()));
        let mut unit_ends = Vec::new();
        let mut end = 0;
        while end < ops.len() {
            end = (end + rng.random_range(1..=2)).min(ops.len());
            unit_ends.push(end);
        }
        let reduction = |k: usize| {
            let p = Policy::from_ops(config.digest(), ops[..k].iter().copied());
            let r = policy_flops(&p, &config).unwrap();
            r.baseline_total - r.total
        };
        let max = unit_ends.last().map(|&e| reduction(e)).unwrap_or(0);
        let tau = match rng.random_range(0..10) {
            0 => 0,
            1 => max + 1 + rng.random_range(0..1000),
            2 => max,
            _ => rng.random_range(0..=max),
        };
        let scan = std::iter::once(0)
            .chain(unit_ends.iter().copied())
            .find(|&k| reduction(k) >= tau);
        match (truncate_ops(&ops, &unit_ends, &config, tau), scan) {
            (Ok(got), Some(k)) => {
                ensure!(got.k_star == k, "trial {t}: k* {} vs scan {k}", got.k_star);
                ensure!(got.reduction == reduction(k), "trial {t}: reduction mismatch");
            }
            (Err(FlopsError::Infeasible { .. }), None) => infeasible += 1,
            (got, want) => return Err(format!("trial {t}: {got:?} vs scan {want:?}")),
        }
    }
    Ok(format!("{trials} sequences ({infeasible} infeasible budgets) match the linear scan"))
}

fn c7_binary_search() -> Check {
    let mut pairs = 0u64;
    let mut worst_ratio: f64 = 0.0;
    for layers in [8u16, 16, 32] {
        let config = single_group(layers, 5);
        let g = config.layout.find("v").unwrap();
        let ops = all_operations(&config).unwrap();
        for module in ModuleKind::ALL {
            for d in 1..=layers + 1 {
                let mut spec = SyntheticOracleSpec::additive(
                    10.0,
                    ops.iter().map(|&o| (o, 0.5)).collect(),
                );
                spec.harmless_depth = vec![((g, module), d)];
                let oracle = SyntheticOracle::new(spec.clone());
                let baseline = spec.score(&config.empty_policy());
                for start in 1..=layers {
                    for end in start..=layers {
                        let range = LayerRange { start, end };
                        let before = oracle.call_count();
                        let got = binary_search_free(
                            &config, g, &[module], range, baseline, &oracle, &mut NullSink,
                        )
                        .map_err(|e| e.to_string())?;
                        let calls = oracle.call_count() - before;
                        let qualifies = |l: u16| {
                            let p = Policy::from_ops(
                                config.digest(),
                                (l..=layers).map(|x| Operation::new(g, x, module)),
                            );
                            spec.score(&p) >= baseline
                        };
                        let want = (start..=end).find(|&l| qualifies(l)).unwrap_or(layers + 1);
                        ensure!(
                            got.l_star == want,
                            "L={layers} {module} depth {d} range {start}..={end}: {} vs {want}",
                            got.l_star
                        );
                        let len = (end - start + 1) as u64;
                        let bound = 64 - len.leading_zeros() as u64; // floor(log2 len) + 1
                        ensure!(
                            calls <= bound,
                            "L={layers} range {start}..={end}: {calls} calls > {bound}"
                        );
                        worst_ratio = worst_ratio.max(calls as f64 / (len as f64).log2().max(1.0));
                        pairs += 1;
                    }
                }
            }
        }
    }
    Ok(format!(
        "{pairs} (depth, range) pairs match the linear scan, calls <= floor(log2 len) + 1 (max {worst_ratio:.2} per log2 len)"
    ))
}

fn c8_structure() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut prefixes = 0;
    for i in 0..120 {
        let layers = rng.random_range(2..=6);
        let config = if i % 3 == 2 { chain3(layers) } else { split(layers, 25.0) };
        let ops = all_operations(&config).unwrap();
        let flash = rng.random_bool(0.5);
        let danger = rng.random_range(0..layers);
        let mode = if rng.random_bool(0.5) { SearchMode::Adaptive } else { SearchMode::Naive };
        let k = rng.random_range(0..12);
        let mut spec = random_spec(&ops, &mut rng, 100.0, k);
        for g in config.layout.prunable_groups() {
            for m in ModuleKind::ALL {
                if rng.random_bool(0.3) {
                    spec.harmless_depth.push(((g, m), rng.random_range(1..=layers)));
                }
            }
        }
        let search = SearchConfig {
            danger_layer: danger,
            flash_pairing: flash,
            free_search: rng.random_bool(0.7),
            mode,
            ..SearchConfig::default()
        };
        let (out, _, _) = run_sort(&config, &search, &spec);
        let seq = &out.sequence;
        let layout = &config.layout;
        let flags = ConstraintFlags {
            group_ordering: true,
            flash_pairing: flash,
        };
        let unique: BTreeSet<_> = seq.order.iter().collect();
        ensure!(unique.len() == seq.order.len(), "instance {i}: repeated operation");
        let excluded = out.filter.exclusions.danger.len() + out.filter.exclusions.blocked.len();
        ensure!(seq.order.len() + excluded == ops.len(), "instance {i}: sequence does not cover the operation space");
        for o in &seq.order {
            ensure!(
                !(layout.group(o.group).kind == GroupKind::VisualCritical && o.layer <= danger),
                "instance {i}: danger operation {o:?} in sequence"
            );
        }
        for (pos, o) in seq.order.iter().enumerate() {
            if let Some(p) = layout.partner(o.group) {
                let before = seq.order[..pos].contains(&o.with_group(p));
                ensure!(before, "instance {i}: {o:?} precedes its partner operation");
            }
        }
        for p in seq.prefixes(&config) {
            let report = validate_policy(&p, &config, flags).map_err(|e| e.to_string())?;
            ensure!(report.is_valid(), "instance {i}: invalid prefix {:?}", report.violations);
            if flash {
                for o in p.iter() {
                    let twin = match o.module {
                        ModuleKind::MhaOut => o.with_module(ModuleKind::MhaIn),
                        ModuleKind::MhaIn => o.with_module(ModuleKind::MhaOut),
                        ModuleKind::Mlp => continue,
                    };
                    ensure!(p.contains(&twin), "instance {i}: attention pair split at {o:?}");
                }
            }
            prefixes += 1;
        }
    }
    Ok(format!("120 sequences, {prefixes} prefixes valid"))
}

fn bits(h: &[Vec<f64>]) -> Vec<u64> {
    h.iter().flatten().map(|x| x.to_bits()).collect()
}

/// Attention-only forward written directly from the weights.
fn attention_only(model: &ToyDecoder, tokens: &[u32]) -> Vec<Vec<f64>> {
    let w = model.weights();
    let kv = model.spec().shape.kv_dim as usize;
    let norm = |x: &[f64]| {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = (ms + 1e-6).sqrt().recip();
        x.iter().map(|v| v * inv).collect::<Vec<f64>>()
    };
    let mul = |x: &[f64], m: &opprune::core::toy::Matrix| {
        (0..m.cols)
            .map(|c| (0..m.rows).map(|r| x[r] * m.data[r * m.cols + c]).sum::<f64>())
            .collect::<Vec<f64>>()
    };
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| w.embed.data[t as usize * w.embed.cols..(t as usize + 1) * w.embed.cols].to_vec())
        .collect();
    for lw in &w.layers {
        let normed: Vec<Vec<f64>> = h.iter().map(|x| norm(x)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|x| mul(x, &lw.wk)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| mul(x, &lw.wv)).collect();
        let mut next = h.clone();
        for t in 0..h.len() {
            let q = mul(&normed[t], &lw.wq);
            let s: Vec<f64> = (0..=t)
                .map(|j| q.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (kv as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut ctx = vec![0.0; kv];
            for j in 0..=t {
                for c in 0..kv {
                    ctx[c] += e[j] / z * v[j][c];
                }
            }
            for (a, b) in next[t].iter_mut().zip(mul(&ctx, &lw.wo)) {
                *a += b;
            }
        }
        h = next;
    }
    h
}

fn c9_masked_forward() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_rel: f64 = 0.0;
    let mut drops = 0;
    for seed in 0..12u64 {
        let shape = DecoderShape::new(3, 8, 6, 12).unwrap();
        // every group prunable so the whole MLP can be switched off
        let open = TokenLayout::new(
            vec![
                GroupSpec::new("s", GroupKind::System, 2, true),
                GroupSpec::new("v", GroupKind::VisualRedundant, 6, true),
                GroupSpec::new("t", GroupKind::Text, 3, true),
            ],
            None,
        )
        .unwrap();
        for layout in [open, TokenLayout::visual_split(2, 8, 25.0, 3).unwrap()] {
            let config = DecoderConfig::new(shape, layout.clone());
            let spec = ToyDecoderSpec::self_labelled(shape, layout.clone(), seed, 17, 1, ToyMetric::Accuracy, vec![])
                .map_err(|e| e.to_string())?;
            let model = ToyDecoder::new(spec).map_err(|e| e.to_string())?;
            let n = layout.total_tokens() as usize;
            let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..17)).collect();

            let vanilla = model.vanilla_hidden(&tokens).unwrap();
            let masked = model.forward_hidden(&tokens, &config.empty_policy()).unwrap();
            ensure!(bits(&vanilla) == bits(&masked), "seed {seed}: empty policy differs from vanilla");

            if layout.groups().iter().all(|g| g.prunable) {
                let no_mlp = Policy::from_ops(
                    config.digest(),
                    layout.ids().flat_map(|g| (1..=3).map(move |l| Operation::new(g, l, ModuleKind::Mlp))),
                );
                let got = model.forward_hidden(&tokens, &no_mlp).unwrap();
                let want = attention_only(&model, &tokens);
                for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
                    let rel = (a - b).abs() / b.abs().max(1e-300);
                    worst_rel = worst_rel.max(rel);
                    ensure!(rel <= 1e-12, "seed {seed}: prune-all-MLP relative error {rel:e}");
                }
            }

            for g in layout.prunable_groups() {
                for l in 1..=3u16 {
                    let p = Policy::from_ops(
                        config.digest(),
                        (l..=3).flat_map(|x| ModuleKind::ALL.map(|m| Operation::new(g, x, m))),
                    );
                    let masked = model.forward_hidden(&tokens, &p).unwrap();
                    let mut h = model.embed(&tokens).unwrap();
                    for x in 1..l {
                        model.apply_layer(&mut h, x, &LayerMask::full(n)).unwrap();
                    }
                    let dropped = layout.token_range(g);
                    let frozen: Vec<Vec<f64>> = h[dropped.clone()].to_vec();
                    let mut kept: Vec<Vec<f64>> = h
                        .into_iter()
                        .enumerate()
                        .filter(|(i, _)| !dropped.contains(i))
                        .map(|(_, r)| r)
                        .collect();
                    for x in l..=3 {
                        let mask = LayerMask::full(kept.len());
                        model.apply_layer(&mut kept, x, &mask).unwrap();
                    }
                    let survivors: Vec<Vec<f64>> = masked
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !dropped.contains(i))
                        .map(|(_, r)| r.clone())
                        .collect();
                    ensure!(bits(&survivors) == bits(&kept), "seed {seed}: drop of {g:?} at {l} not bit-identical");
                    ensure!(bits(&masked[dropped]) == bits(&frozen), "seed {seed}: dropped rows changed");
                    drops += 1;
                }
            }
        }
    }
    Ok(format!(
        "empty policy bit-identical; prune-all-MLP max relative error {worst_rel:.1e}; {drops} token drops bit-identical"
    ))
}

fn opprune(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_opprune"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "opprune {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for n in names {
        let x = std::fs::read(a.join(n)).map_err(|e| format!("{n}: {e}"))?;
        let y = std::fs::read(b.join(n)).map_err(|e| format!("{n}: {e}"))?;
        ensure!(x == y, "{n} differs between {} and {}", a.display(), b.display());
    }
    Ok(())
}

fn c10_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let configs = [
        (
            "oracle",
            r#"{
  "decoder": {"layers": 4, "hidden": 64, "kv_dim": 64, "mlp_dim": 172},
  "layout": {"groups": [
    {"id": "system", "kind": "system", "count": 2, "prunable": false},
    {"id": "g1", "kind": "visual_critical", "count": 4, "prunable": true, "redundancy_partner": "g2"},
    {"id": "g2", "kind": "visual_redundant", "count": 12, "prunable": true},
    {"id": "text", "kind": "text", "count": 3, "prunable": false}]},
  "search": {"danger_layer": 1, "flash_pairing": true},
  "evaluator": {"oracle": {"base": 100.0, "seed": 3,
    "random": {"max_weight": 4.0, "interactions": 20, "max_interaction": 1.0}}},
  "budget": {"retain_ratio": 0.5}
}"#,
        ),
        (
            "toy",
            r#"{
  "decoder": {"layers": 3, "hidden": 8, "kv_dim": 8, "mlp_dim": 16},
  "layout": {"groups": [
    {"id": "system", "kind": "system", "count": 1, "prunable": false},
    {"id": "g1", "kind": "visual_critical", "count": 2, "prunable": true, "redundancy_partner": "g2"},
    {"id": "g2", "kind": "visual_redundant", "count": 6, "prunable": true},
    {"id": "text", "kind": "text", "count": 2, "prunable": false}]},
  "search": {"thresholds": {"z": 4}},
  "evaluator": {"toy": {"seed": 1, "vocab": 13, "metric": "accuracy", "eval_samples": 6}},
  "budget": {"retain_ratio": 0.7}
}"#,
        ),
    ];
    let files = ["sequence.json", "trace.jsonl", "policy.json", "flops.json"];
    for (name, text) in configs {
        let cfg = dir.path().join(format!("{name}.json"));
        std::fs::write(&cfg, text).map_err(|e| e.to_string())?;
        let cfg = cfg.to_str().unwrap();
        let runs: Vec<(String, Vec<&str>)> = vec![
            ("a".into(), vec![]),
            ("b".into(), vec![]),
            ("par".into(), vec!["--parallel", "--threads", "4"]),
        ];
        for (tag, extra) in &runs {
            let out = dir.path().join(format!("{name}-{tag}"));
            let mut args = vec!["run", "--config", cfg, "--seed", "11", "--out", out.to_str().unwrap()];
            args.extend(extra.iter().copied());
            opprune(&args)?;
        }
        let a = dir.path().join(format!("{name}-a"));
        same_files(&a, &dir.path().join(format!("{name}-b")), &files)?;
        same_files(&a, &dir.path().join(format!("{name}-par")), &files)?;
        let report = dir.path().join(format!("{name}-report.json"));
        opprune(&["flops", "--policy", a.join("policy.json").to_str().unwrap(), "--out", report.to_str().unwrap()])?;
        let x = std::fs::read(&report).unwrap();
        let y = std::fs::read(a.join("flops.json")).unwrap();
        ensure!(x == y, "{name}: flops report from the policy file differs");
    }
    Ok("oracle and toy runs byte-identical across reruns and --parallel".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("module proportions", c1_proportions),
        ("budget/token cross-consistency", c2_budget_consistency),
        ("operation-space size", c3_operation_count),
        ("greedy oracle equivalence", c4_greedy_equivalence),
        ("adaptive efficiency and soundness", c5_adaptive),
        ("truncation minimality", c6_truncation),
        ("free-to-prune binary search", c7_binary_search),
        ("structural invariants", c8_structure),
        ("masked-forward correctness", c9_masked_forward),
        ("determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
