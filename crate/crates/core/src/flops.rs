//! Theoretical FLOPs of LLaMA-style decoder prefill under a pruning policy.
//!
//! Per layer, with `n_out`, `n_in`, `n_mlp` tokens taking part in each
//! module:
//!
//! ```text
//! MHA-out = 4·n_out·h·d + 2·d·n_out·n_in      (K, V projections and QKᵀ)
//! MHA-in  = 4·n_in·h·d  + 2·d·n_out·n_in      (Q, output projections and AV)
//! MLP     = 6·n_mlp·h·m                       (gate, up, down)
//! ```
//!
//! Everything is integer arithmetic; only ratios are floating point. Costs
//! must be computed for a whole policy at once: the attention cross term
//! couples `n_out` and `n_in`, so per-operation marginals depend on the
//! rest of the policy.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{
    validate_policy, ConstraintFlags, DecoderConfig, DecoderShape, ModelError, ModuleKind,
    Operation, Policy, Violation,
};
use crate::search::SortedSequence;

pub type Flops = u64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlopsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("policy is not valid for this config ({} violation(s))", .0.len())]
    InvalidPolicy(Vec<Violation>),
    #[error("budget infeasible: requested reduction {tau} exceeds the maximal achievable reduction {max_reduction}")]
    Infeasible { tau: Flops, max_reduction: Flops },
}

/// Token counts taking part in each module of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PerLayerCounts {
    pub n_out: u64,
    pub n_in: u64,
    pub n_mlp: u64,
}

impl PerLayerCounts {
    pub fn uniform(n: u64) -> Self {
        PerLayerCounts {
            n_out: n,
            n_in: n,
            n_mlp: n,
        }
    }

    fn get_mut(&mut self, module: ModuleKind) -> &mut u64 {
        match module {
            ModuleKind::MhaOut => &mut self.n_out,
            ModuleKind::MhaIn => &mut self.n_in,
            ModuleKind::Mlp => &mut self.n_mlp,
        }
    }
}

/// FLOPs of one layer, attributed to modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: u16,
    pub mha_out: Flops,
    pub mha_in: Flops,
    pub mlp: Flops,
}

impl LayerFlops {
    pub fn total(&self) -> Flops {
        self.mha_out + self.mha_in + self.mlp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub total: Flops,
    pub baseline_total: Flops,
    pub retained_ratio: f64,
}

impl FlopsReport {
    pub fn reduction(&self) -> Flops {
        self.baseline_total - self.total
    }
}

/// Closed-form layer cost.
pub fn layer_flops(c: PerLayerCounts, shape: &DecoderShape) -> Flops {
    let h = shape.hidden as u64;
    let d = shape.kv_dim as u64;
    let m = shape.mlp_dim as u64;
    2 * d * ((c.n_out + 2 * c.n_in) * h + 2 * c.n_out * c.n_in + c.n_out * h) + 6 * c.n_mlp * h * m
}

/// Per-module attribution of [`layer_flops`]. The attention cross term is
/// split evenly: QKᵀ to MHA-out, AV to MHA-in.
pub fn layer_breakdown(layer: u16, c: PerLayerCounts, shape: &DecoderShape) -> LayerFlops {
    let h = shape.hidden as u64;
    let d = shape.kv_dim as u64;
    let m = shape.mlp_dim as u64;
    let k_proj = 2 * c.n_out * h * d;
    let v_proj = 2 * c.n_out * h * d;
    let q_proj = 2 * c.n_in * h * d;
    let o_proj = 2 * c.n_in * d * h;
    let qk = 2 * c.n_out * c.n_in * d;
    let av = 2 * c.n_out * c.n_in * d;
    LayerFlops {
        layer,
        mha_out: k_proj + v_proj + qk,
        mha_in: q_proj + o_proj + av,
        mlp: 3 * (2 * c.n_mlp * h * m),
    }
}

fn check_policy(policy: &Policy, config: &DecoderConfig) -> Result<(), FlopsError> {
    let structural = ConstraintFlags {
        group_ordering: false,
        flash_pairing: false,
    };
    let report = validate_policy(policy, config, structural)?;
    if report.is_valid() {
        Ok(())
    } else {
        Err(FlopsError::InvalidPolicy(report.violations))
    }
}

/// Remaining token counts per layer (index 0 is layer 1).
pub fn policy_counts(policy: &Policy, config: &DecoderConfig) -> Result<Vec<PerLayerCounts>, FlopsError> {
    check_policy(policy, config)?;
    Ok(counts_unchecked(policy.iter(), config))
}

fn counts_unchecked<'a, I>(ops: I, config: &DecoderConfig) -> Vec<PerLayerCounts>
where
    I: IntoIterator<Item = &'a Operation>,
{
    let total = config.layout.total_tokens();
    let mut counts = vec![PerLayerCounts::uniform(total); config.shape.layers as usize];
    for op in ops {
        let size = config.layout.group(op.group).count as u64;
        *counts[op.layer as usize - 1].get_mut(op.module) -= size;
    }
    counts
}

pub fn baseline_flops(config: &DecoderConfig) -> Flops {
    let per = layer_flops(PerLayerCounts::uniform(config.layout.total_tokens()), &config.shape);
    per * config.shape.layers as u64
}

pub fn policy_flops(policy: &Policy, config: &DecoderConfig) -> Result<FlopsReport, FlopsError> {
    let counts = policy_counts(policy, config)?;
    let per_layer: Vec<LayerFlops> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| layer_breakdown(i as u16 + 1, c, &config.shape))
        .collect();
    let total = per_layer.iter().map(LayerFlops::total).sum();
    let baseline_total = baseline_flops(config);
    Ok(FlopsReport {
        per_layer,
        total,
        baseline_total,
        retained_ratio: total as f64 / baseline_total as f64,
    })
}

/// Share of one layer's FLOPs spent in (MHA-out, MHA-in, MLP) when every
/// module sees `n` tokens.
pub fn module_proportions(shape: &DecoderShape, n: u64) -> (f64, f64, f64) {
    let b = layer_breakdown(1, PerLayerCounts::uniform(n), shape);
    let total = b.total() as f64;
    let p_out = b.mha_out as f64 / total;
    let p_in = b.mha_in as f64 / total;
    (p_out, p_in, 1.0 - p_out - p_in)
}

/// FLOPs reduction after each unit boundary of `order`; entry `i` is the
/// reduction of the prefix `order[..unit_ends[i]]`. Counts are updated
/// incrementally, one layer recomputed per operation.
pub fn prefix_reductions(
    order: &[Operation],
    unit_ends: &[usize],
    config: &DecoderConfig,
) -> Vec<Flops> {
    let shape = &config.shape;
    let mut counts = counts_unchecked(core::iter::empty(), config);
    let mut per_layer: Vec<Flops> = counts.iter().map(|&c| layer_flops(c, shape)).collect();
    let baseline: Flops = per_layer.iter().sum();
    let mut total = baseline;
    let mut out = Vec::with_capacity(unit_ends.len());
    let mut next = 0;
    for &end in unit_ends {
        for op in &order[next..end] {
            let idx = op.layer as usize - 1;
            *counts[idx].get_mut(op.module) -= config.layout.group(op.group).count as u64;
            let fresh = layer_flops(counts[idx], shape);
            total = total - per_layer[idx] + fresh;
            per_layer[idx] = fresh;
        }
        next = end;
        out.push(baseline - total);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truncation {
    /// Number of operations in the chosen prefix.
    pub k_star: usize,
    pub policy: Policy,
    pub reduction: Flops,
}

/// Shortest prefix of `order`, cut at a unit boundary, whose FLOPs
/// reduction is at least `tau`.
pub fn truncate_ops(
    order: &[Operation],
    unit_ends: &[usize],
    config: &DecoderConfig,
    tau: Flops,
) -> Result<Truncation, FlopsError> {
    for op in order {
        config.check_operation(op)?;
    }
    if tau == 0 {
        return Ok(Truncation {
            k_star: 0,
            policy: config.empty_policy(),
            reduction: 0,
        });
    }
    let reductions = prefix_reductions(order, unit_ends, config);
    let max_reduction = reductions.last().copied().unwrap_or(0);
    if tau > max_reduction {
        return Err(FlopsError::Infeasible { tau, max_reduction });
    }
    // reductions are nondecreasing in prefix length
    let unit = reductions.partition_point(|&r| r < tau);
    let k_star = unit_ends[unit];
    Ok(Truncation {
        k_star,
        policy: Policy::from_ops(config.digest(), order[..k_star].iter().copied()),
        reduction: reductions[unit],
    })
}

pub fn truncate_to_budget(
    sequence: &SortedSequence,
    config: &DecoderConfig,
    tau: Flops,
) -> Result<Truncation, FlopsError> {
    truncate_ops(&sequence.order, &sequence.unit_ends, config, tau)
}

/// Non-visual token count whose all-visual-pruned layout retains the FLOPs
/// fraction closest to `target_ratio`. Used to build reference layouts when
/// only the visual token count and a zero-visual retention figure are known.
pub fn calibrate_prompt_tokens(shape: &DecoderShape, visual: u64, target_ratio: f64) -> u64 {
    let f = |n: u64| layer_flops(PerLayerCounts::uniform(n), shape) as f64;
    let ratio = |t: u64| f(t) / f(t + visual);
    // ratio(t) increases with t; bisect for the crossing then pick the closer side
    let (mut lo, mut hi) = (0u64, 1u64);
    while ratio(hi) < target_ratio {
        hi *= 2;
        if hi > 1 << 40 {
            return hi;
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ratio(mid) < target_ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (ratio(lo) - target_ratio).abs() <= (ratio(hi) - target_ratio).abs() {
        lo
    } else {
        hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GroupKind, GroupSpec, TokenLayout};
    use alloc::vec;

    fn shape(h: u32, d: u32, m: u32) -> DecoderShape {
        DecoderShape::new(1, h, d, m).unwrap()
    }

    #[test]
    fn direct_substitution() {
        // 4·2·(2 + 2 + 1) + 6·1·2·4
        assert_eq!(layer_flops(PerLayerCounts::uniform(1), &shape(2, 2, 4)), 88);
        assert_eq!(layer_flops(PerLayerCounts::uniform(0), &shape(2, 2, 4)), 0);
    }

    #[test]
    fn breakdown_matches_closed_form() {
        let s = shape(7, 3, 11);
        for n_out in 0..6 {
            for n_in in 0..6 {
                for n_mlp in 0..3 {
                    let c = PerLayerCounts { n_out, n_in, n_mlp };
                    assert_eq!(layer_breakdown(1, c, &s).total(), layer_flops(c, &s));
                }
            }
        }
    }

    #[test]
    fn proportions_reference_shape() {
        let s = shape(4096, 4096, 11008);
        let (o, i, m) = module_proportions(&s, 576);
        assert!((o - 0.1735).abs() < 0.005, "{o}");
        assert_eq!(o, i);
        assert!((m - 0.6530).abs() < 0.005, "{m}");
        assert_eq!(o + i + m, 1.0);

        let (_, _, m_big) = module_proportions(&shape(64, 64, 4_000_000), 8);
        assert!(m_big > 0.999);
    }

    #[test]
    fn counts_drop_group_sizes() {
        let layout = TokenLayout::new(
            vec![
                GroupSpec::new("sys", GroupKind::System, 74, false),
                GroupSpec::new("g1", GroupKind::VisualCritical, 144, true).with_partner("g2"),
                GroupSpec::new("g2", GroupKind::VisualRedundant, 432, true),
            ],
            None,
        )
        .unwrap();
        let cfg = DecoderConfig::new(DecoderShape::new(4, 8, 8, 8).unwrap(), layout);
        let g2 = cfg.layout.find("g2").unwrap();
        let p = Policy::from_ops(
            cfg.digest(),
            (1..=4).map(|l| Operation::new(g2, l, ModuleKind::Mlp)),
        );
        for c in policy_counts(&p, &cfg).unwrap() {
            assert_eq!(c, PerLayerCounts { n_out: 650, n_in: 650, n_mlp: 218 });
        }
        let empty = policy_counts(&cfg.empty_policy(), &cfg).unwrap();
        assert!(empty.iter().all(|&c| c == PerLayerCounts::uniform(650)));
    }

    #[test]
    fn calibration_hits_lower_bound() {
        let s = DecoderShape::new(32, 4096, 4096, 11008).unwrap();
        let t = calibrate_prompt_tokens(&s, 576, 0.186);
        assert_eq!(t, 135);
    }
}
