//! JSON schemas for configs, policies, sequences, filter results and reports.
//!
//! Operations are written as `{"group": <id>, "layer": <1-based>, "module":
//! "mha_out" | "mha_in" | "mlp"}` and always listed in canonical order.
//! Struct fields serialize in declaration order and maps are `BTreeMap`s, so
//! identical inputs give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use opprune_core::flops::Flops;
use opprune_core::model::{
    ConfigDigest, DecoderConfig, DecoderShape, GroupId, ModuleKind, Operation, Policy, TokenLayout,
};
use opprune_core::oracle::{RandomOracleParams, SyntheticOracleSpec};
use opprune_core::search::{FilterResult, SearchConfig, SortOutput, SortedSequence, StepRecord};
use opprune_core::toy::{ToyDecoderSpec, ToyMetric, ToySample};
use opprune_core::trace::TraceEvent;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

impl FormatError {
    fn invalid(msg: impl Into<String>) -> Self {
        FormatError::Invalid(msg.into())
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| FormatError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("schema types always serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    fs::write(path, to_json_string(value)).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpRecord {
    pub group: String,
    pub layer: u16,
    pub module: ModuleKind,
}

impl OpRecord {
    pub fn from_op(layout: &TokenLayout, op: &Operation) -> Self {
        OpRecord {
            group: layout.name(op.group).to_string(),
            layer: op.layer,
            module: op.module,
        }
    }

    pub fn resolve(&self, layout: &TokenLayout, layers: u16) -> Result<Operation, FormatError> {
        let group = layout
            .find(&self.group)
            .ok_or_else(|| FormatError::invalid(format!("unknown group `{}`", self.group)))?;
        if self.layer == 0 || self.layer > layers {
            return Err(FormatError::invalid(format!(
                "layer {} outside 1..={layers}",
                self.layer
            )));
        }
        Ok(Operation::new(group, self.layer, self.module))
    }
}

pub fn records(layout: &TokenLayout, ops: &[Operation]) -> Vec<OpRecord> {
    ops.iter().map(|op| OpRecord::from_op(layout, op)).collect()
}

pub fn policy_records(layout: &TokenLayout, policy: &Policy) -> Vec<OpRecord> {
    records(layout, &policy.canonical_ops(layout))
}

pub fn resolve_all(
    recs: &[OpRecord],
    config: &DecoderConfig,
) -> Result<Vec<Operation>, FormatError> {
    recs.iter()
        .map(|r| r.resolve(&config.layout, config.shape.layers))
        .collect()
}

// ---------------------------------------------------------------------------
// Config file

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub decoder: DecoderShape,
    pub layout: TokenLayout,
    #[serde(default)]
    pub search: SearchConfig,
    pub evaluator: EvaluatorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<Budget>,
}

impl ConfigFile {
    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig::new(self.decoder, self.layout.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    Oracle(OracleFile),
    Toy(ToyFile),
    External(ExternalFile),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_absolute: Option<Flops>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retain_ratio: Option<f64>,
}

impl Budget {
    /// Required FLOPs reduction for a decoder with `baseline` FLOPs.
    pub fn tau(&self, baseline: Flops) -> Result<Flops, FormatError> {
        match (self.tau_absolute, self.retain_ratio) {
            (Some(t), None) => Ok(t),
            (None, Some(r)) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(FormatError::invalid(format!(
                        "retain_ratio {r} must lie in (0, 1]"
                    )));
                }
                let keep = (r * baseline as f64).ceil() as Flops;
                Ok(baseline.saturating_sub(keep.min(baseline)))
            }
            _ => Err(FormatError::invalid(
                "budget needs exactly one of tau_absolute / retain_ratio",
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic oracle spec

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightRecord {
    pub group: String,
    pub layer: u16,
    pub module: ModuleKind,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionRecord {
    pub a: OpRecord,
    pub b: OpRecord,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmlessRecord {
    pub group: String,
    pub module: ModuleKind,
    /// Operations at this layer and deeper are free.
    pub layer: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomWeights {
    pub max_weight: f64,
    #[serde(default)]
    pub interactions: usize,
    #[serde(default = "one")]
    pub max_interaction: f64,
    #[serde(default = "quantum")]
    pub quantum: f64,
}

fn one() -> f64 {
    1.0
}

fn quantum() -> f64 {
    256.0
}

/// Synthetic oracle as stored on disk. Weights not listed are zero. When
/// `random` is set, weights and interactions are drawn from `seed` over the
/// whole operation space (in canonical order) and appended after the listed
/// ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleFile {
    pub base: f64,
    #[serde(default)]
    pub weights: Vec<WeightRecord>,
    #[serde(default)]
    pub interactions: Vec<InteractionRecord>,
    #[serde(default)]
    pub harmless_depth: Vec<HarmlessRecord>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<RandomWeights>,
}

impl OracleFile {
    pub fn to_spec(&self, config: &DecoderConfig) -> Result<SyntheticOracleSpec, FormatError> {
        let layout = &config.layout;
        let layers = config.shape.layers;
        let op = |group: &str, layer: u16, module: ModuleKind| {
            OpRecord {
                group: group.to_string(),
                layer,
                module,
            }
            .resolve(layout, layers)
        };
        let mut weights = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            weights.push((op(&w.group, w.layer, w.module)?, w.weight));
        }
        let mut interactions = Vec::with_capacity(self.interactions.len());
        for i in &self.interactions {
            let a = i.a.resolve(layout, layers)?;
            let b = i.b.resolve(layout, layers)?;
            interactions.push(((a, b), i.weight));
        }
        let mut harmless_depth = Vec::new();
        for h in &self.harmless_depth {
            let g = layout
                .find(&h.group)
                .ok_or_else(|| FormatError::invalid(format!("unknown group `{}`", h.group)))?;
            harmless_depth.push(((g, h.module), h.layer));
        }
        if let Some(r) = self.random {
            let ops = opprune_core::all_operations(config)
                .map_err(|e| FormatError::invalid(e.to_string()))?;
            let params = RandomOracleParams {
                base: self.base,
                max_weight: r.max_weight,
                interactions: r.interactions,
                max_interaction: r.max_interaction,
                quantum: r.quantum,
            };
            let drawn = SyntheticOracleSpec::random(&ops, self.seed, params);
            weights.extend(drawn.weights);
            interactions.extend(drawn.interactions);
        }
        let mut seen = std::collections::BTreeSet::new();
        for (o, _) in &weights {
            if !seen.insert(*o) {
                return Err(FormatError::invalid(format!(
                    "weight listed twice for {:?}",
                    OpRecord::from_op(layout, o)
                )));
            }
        }
        Ok(SyntheticOracleSpec {
            base: self.base,
            weights,
            interactions,
            harmless_depth,
            seed: self.seed,
        })
    }

    /// The explicit form of `spec` (no `random` section).
    pub fn from_spec(spec: &SyntheticOracleSpec, layout: &TokenLayout) -> Self {
        OracleFile {
            base: spec.base,
            weights: spec
                .weights
                .iter()
                .map(|(o, w)| WeightRecord {
                    group: layout.name(o.group).to_string(),
                    layer: o.layer,
                    module: o.module,
                    weight: *w,
                })
                .collect(),
            interactions: spec
                .interactions
                .iter()
                .map(|((a, b), w)| InteractionRecord {
                    a: OpRecord::from_op(layout, a),
                    b: OpRecord::from_op(layout, b),
                    weight: *w,
                })
                .collect(),
            harmless_depth: spec
                .harmless_depth
                .iter()
                .map(|((g, m), l)| HarmlessRecord {
                    group: layout.name(*g).to_string(),
                    module: *m,
                    layer: *l,
                })
                .collect(),
            seed: spec.seed,
            random: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Toy decoder spec

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyFile {
    pub seed: u64,
    pub vocab: u32,
    pub metric: ToyMetric,
    /// Explicit samples; when absent, `eval_samples` self-labelled samples
    /// are generated from the seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_set: Option<Vec<ToySample>>,
    #[serde(default)]
    pub eval_samples: usize,
    #[serde(default)]
    pub zero_mlp_layers: Vec<u16>,
}

impl ToyFile {
    pub fn to_spec(&self, config: &DecoderConfig) -> Result<ToyDecoderSpec, FormatError> {
        let err = |e: opprune_core::ToyError| FormatError::invalid(e.to_string());
        match &self.eval_set {
            Some(set) => Ok(ToyDecoderSpec {
                shape: config.shape,
                layout: config.layout.clone(),
                seed: self.seed,
                vocab: self.vocab,
                eval_set: set.clone(),
                metric: self.metric,
                zero_mlp_layers: self.zero_mlp_layers.clone(),
            }),
            None => ToyDecoderSpec::self_labelled(
                config.shape,
                config.layout.clone(),
                self.seed,
                self.vocab,
                self.eval_samples,
                self.metric,
                self.zero_mlp_layers.clone(),
            )
            .map_err(err),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalFile {
    pub command: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

// ---------------------------------------------------------------------------
// Policy

pub const POLICY_FORMAT: &str = "opprune-policy";
pub const SEQUENCE_FORMAT: &str = "opprune-sequence";
pub const FILTER_FORMAT: &str = "opprune-filter";
pub const FORMAT_VERSION: u32 = 1;

/// A policy plus the decoder it was built for, so it can be priced and
/// drawn without the original config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub format: String,
    pub version: u32,
    pub config_digest: ConfigDigest,
    pub decoder: DecoderConfig,
    pub pruned: Vec<OpRecord>,
}

impl PolicyFile {
    pub fn new(config: &DecoderConfig, policy: &Policy) -> Self {
        PolicyFile {
            format: POLICY_FORMAT.into(),
            version: FORMAT_VERSION,
            config_digest: policy.digest(),
            decoder: config.clone(),
            pruned: policy_records(&config.layout, policy),
        }
    }

    pub fn to_policy(&self) -> Result<(DecoderConfig, Policy), FormatError> {
        check_header(&self.format, POLICY_FORMAT, self.version)?;
        let config = self.decoder.clone();
        if config.digest() != self.config_digest {
            return Err(FormatError::invalid(format!(
                "policy digest {} does not match its embedded decoder ({})",
                self.config_digest,
                config.digest()
            )));
        }
        let ops = resolve_all(&self.pruned, &config)?;
        let policy = Policy::from_ops(self.config_digest, ops);
        if policy.len() != self.pruned.len() {
            return Err(FormatError::invalid("policy lists an operation twice"));
        }
        Ok((config, policy))
    }
}

fn check_header(found: &str, expected: &str, version: u32) -> Result<(), FormatError> {
    if found != expected {
        return Err(FormatError::invalid(format!(
            "expected a `{expected}` file, found `{found}`"
        )));
    }
    if version != FORMAT_VERSION {
        return Err(FormatError::invalid(format!(
            "unsupported {expected} version {version}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sorted sequence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepFile {
    pub step: usize,
    pub ops: Vec<OpRecord>,
    pub cached_score: f64,
    pub score: f64,
    pub evaluator_calls: u64,
    pub threshold_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcludedFile {
    pub danger: Vec<OpRecord>,
    pub blocked: Vec<OpRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceFile {
    pub format: String,
    pub version: u32,
    pub config_digest: ConfigDigest,
    pub decoder: DecoderConfig,
    pub flash_pairing: bool,
    pub baseline_score: f64,
    pub thresholds: Vec<f64>,
    /// Length of the free-to-prune head.
    pub prefix_len: usize,
    pub order: Vec<OpRecord>,
    pub unit_ends: Vec<usize>,
    pub excluded: ExcludedFile,
    pub steps: Vec<StepFile>,
    pub evaluator_calls: u64,
}

impl SequenceFile {
    pub fn new(config: &DecoderConfig, out: &SortOutput) -> Self {
        let layout = &config.layout;
        let seq = &out.sequence;
        SequenceFile {
            format: SEQUENCE_FORMAT.into(),
            version: FORMAT_VERSION,
            config_digest: config.digest(),
            decoder: config.clone(),
            flash_pairing: seq.flash_pairing,
            baseline_score: out.baseline,
            thresholds: out.schedule.values().to_vec(),
            prefix_len: seq.prefix_len,
            order: records(layout, &seq.order),
            unit_ends: seq.unit_ends.clone(),
            excluded: ExcludedFile {
                danger: records(layout, &out.filter.exclusions.danger),
                blocked: records(layout, &out.filter.exclusions.blocked),
            },
            steps: seq
                .steps
                .iter()
                .map(|s| StepFile {
                    step: s.step,
                    ops: records(layout, &s.candidate.ops().collect::<Vec<_>>()),
                    cached_score: s.cached_score,
                    score: s.score,
                    evaluator_calls: s.evaluator_calls,
                    threshold_index: s.threshold_index,
                })
                .collect(),
            evaluator_calls: seq.evaluator_calls,
        }
    }

    /// The decoder and the sequence (step records are not rebuilt).
    pub fn to_sequence(&self) -> Result<(DecoderConfig, SortedSequence), FormatError> {
        check_header(&self.format, SEQUENCE_FORMAT, self.version)?;
        let config = self.decoder.clone();
        if config.digest() != self.config_digest {
            return Err(FormatError::invalid("sequence digest does not match its embedded decoder"));
        }
        let order = resolve_all(&self.order, &config)?;
        let distinct: std::collections::BTreeSet<_> = order.iter().collect();
        if distinct.len() != order.len() {
            return Err(FormatError::invalid("sequence lists an operation twice"));
        }
        let mut prev = 0;
        for &end in &self.unit_ends {
            if end <= prev || end > order.len() {
                return Err(FormatError::invalid("unit_ends must be strictly increasing within the order"));
            }
            prev = end;
        }
        if prev != order.len() {
            return Err(FormatError::invalid("unit_ends must cover the whole order"));
        }
        let seq = SortedSequence {
            order,
            unit_ends: self.unit_ends.clone(),
            prefix_len: self.prefix_len,
            steps: Vec::<StepRecord>::new(),
            evaluator_calls: self.evaluator_calls,
            flash_pairing: self.flash_pairing,
        };
        Ok((config, seq))
    }
}

// ---------------------------------------------------------------------------
// Filter result

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRecord {
    pub start_layer: u16,
    pub score: f64,
    pub qualifies: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeSearchRecord {
    pub group: String,
    pub modules: Vec<ModuleKind>,
    pub l_star: u16,
    pub free_count: usize,
    pub probes: Vec<ProbeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterFile {
    pub format: String,
    pub version: u32,
    pub config_digest: ConfigDigest,
    pub baseline_score: f64,
    /// Free-to-prune operation count per `group/module`.
    pub free_counts: BTreeMap<String, usize>,
    pub free: Vec<OpRecord>,
    pub sortable: Vec<OpRecord>,
    pub excluded: ExcludedFile,
    pub searches: Vec<FreeSearchRecord>,
    pub evaluator_calls: u64,
}

impl FilterFile {
    pub fn new(
        config: &DecoderConfig,
        baseline: f64,
        filter: &FilterResult,
        trace: &[TraceEvent],
        evaluator_calls: u64,
    ) -> Self {
        let layout = &config.layout;
        let mut free_counts = BTreeMap::new();
        for g in layout.prunable_groups() {
            for m in ModuleKind::ALL {
                let n = filter
                    .free
                    .iter()
                    .filter(|o| o.group == g && o.module == m)
                    .count();
                free_counts.insert(format!("{}/{}", layout.name(g), m), n);
            }
        }
        let searches = filter
            .searches
            .iter()
            .map(|s| FreeSearchRecord {
                group: layout.name(s.group).to_string(),
                modules: s.modules.clone(),
                l_star: s.l_star,
                free_count: filter
                    .free
                    .iter()
                    .filter(|o| o.group == s.group && s.modules.contains(&o.module))
                    .count(),
                probes: probes_for(trace, s.group, &s.modules),
            })
            .collect();
        FilterFile {
            format: FILTER_FORMAT.into(),
            version: FORMAT_VERSION,
            config_digest: config.digest(),
            baseline_score: baseline,
            free_counts,
            free: records(layout, &filter.free),
            sortable: records(layout, &filter.sortable),
            excluded: ExcludedFile {
                danger: records(layout, &filter.exclusions.danger),
                blocked: records(layout, &filter.exclusions.blocked),
            },
            searches,
            evaluator_calls,
        }
    }
}

fn probes_for(trace: &[TraceEvent], group: GroupId, modules: &[ModuleKind]) -> Vec<ProbeRecord> {
    trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::FreeProbe {
                group: g,
                modules: m,
                start_layer,
                score,
                qualifies,
                ..
            } if *g == group && m == modules => Some(ProbeRecord {
                start_layer: *start_layer,
                score: *score,
                qualifies: *qualifies,
            }),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use opprune_core::model::{GroupKind, GroupSpec};

    fn config() -> DecoderConfig {
        DecoderConfig::new(
            DecoderShape::new(4, 8, 8, 16).unwrap(),
            TokenLayout::visual_split(2, 8, 25.0, 2).unwrap(),
        )
    }

    #[test]
    fn budget_requires_exactly_one_field() {
        assert!(Budget::default().tau(100).is_err());
        let both = Budget {
            tau_absolute: Some(1),
            retain_ratio: Some(0.5),
        };
        assert!(both.tau(100).is_err());
        let r = Budget {
            retain_ratio: Some(0.3),
            ..Default::default()
        };
        assert_eq!(r.tau(1000).unwrap(), 700);
        let full = Budget {
            retain_ratio: Some(1.0),
            ..Default::default()
        };
        assert_eq!(full.tau(1000).unwrap(), 0);
        let bad = Budget {
            retain_ratio: Some(0.0),
            ..Default::default()
        };
        assert!(bad.tau(1000).is_err());
    }

    #[test]
    fn unknown_architecture_is_rejected() {
        let err = serde_json::from_str::<DecoderShape>(
            r#"{"architecture":"phi3","layers":2,"hidden":4,"kv_dim":4,"mlp_dim":4}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("phi3"), "{err}");
        let ok: DecoderShape =
            serde_json::from_str(r#"{"layers":2,"hidden":4,"kv_dim":4,"mlp_dim":4}"#).unwrap();
        assert_eq!(ok.layers, 2);
    }

    #[test]
    fn oracle_file_resolves_names() {
        let cfg = config();
        let file: OracleFile = serde_json::from_str(
            r#"{"base": 2.0,
                "weights": [{"group":"g2","layer":3,"module":"mlp","weight":0.5}],
                "harmless_depth": [{"group":"g1","module":"mha_in","layer":4}]}"#,
        )
        .unwrap();
        let spec = file.to_spec(&cfg).unwrap();
        let g2 = cfg.layout.find("g2").unwrap();
        assert_eq!(spec.weights, vec![(Operation::new(g2, 3, ModuleKind::Mlp), 0.5)]);
        assert_eq!(OracleFile::from_spec(&spec, &cfg.layout).weights, file.weights);

        let bad: OracleFile = serde_json::from_str(
            r#"{"base": 2.0, "weights": [{"group":"nope","layer":3,"module":"mlp","weight":0.5}]}"#,
        )
        .unwrap();
        assert!(bad.to_spec(&cfg).is_err());
    }

    #[test]
    fn policy_file_rejects_tampered_decoder() {
        let cfg = config();
        let g2 = cfg.layout.find("g2").unwrap();
        let p = Policy::from_ops(cfg.digest(), [Operation::new(g2, 1, ModuleKind::Mlp)]);
        let mut file = PolicyFile::new(&cfg, &p);
        assert_eq!(file.to_policy().unwrap(), (cfg.clone(), p));
        file.decoder.layout = TokenLayout::new(
            vec![GroupSpec::new("g2", GroupKind::VisualRedundant, 3, true)],
            None,
        )
        .unwrap();
        assert!(file.to_policy().is_err());
    }

    #[test]
    fn parse_errors_carry_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{\n  \"decoder\": 3\n}\n").unwrap();
        match read_json::<ConfigFile>(&path) {
            Err(FormatError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
