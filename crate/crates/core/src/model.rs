//! Operations, token layouts, policies and the structural rules they obey.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("empty operation space: the layout has no prunable group")]
    EmptyOperationSpace,
    #[error("layout has no tokens")]
    EmptyLayout,
    #[error("duplicate group id `{0}`")]
    DuplicateGroup(String),
    #[error("group `{group}` names unknown redundancy partner `{partner}`")]
    UnknownPartner { group: String, partner: String },
    #[error("redundancy partner `{partner}` of group `{group}` is not prunable")]
    PartnerNotPrunable { group: String, partner: String },
    #[error("redundancy partner links of group `{0}` form a cycle")]
    PartnerCycle(String),
    #[error("too many groups ({0}); at most 65535 are supported")]
    TooManyGroups(usize),
    #[error("invalid decoder shape: {0} must be positive")]
    InvalidShape(&'static str),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("layer {layer} outside 1..={layers}")]
    LayerOutOfRange { layer: u32, layers: u16 },
    #[error("stale policy: built against config {found}, current config is {expected}")]
    StalePolicy { expected: ConfigDigest, found: ConfigDigest },
}

/// The three per-token compute modules of a decoder layer.
///
/// Declaration order is the canonical order used for tie-breaking and
/// serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    /// Key/value transforms and the products of this token's keys/values with all queries.
    MhaOut,
    /// Query transform, attention over keys/values and the output projection.
    MhaIn,
    Mlp,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 3] = [ModuleKind::MhaOut, ModuleKind::MhaIn, ModuleKind::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::MhaOut => "mha_out",
            ModuleKind::MhaIn => "mha_in",
            ModuleKind::Mlp => "mlp",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mha_out" => Ok(ModuleKind::MhaOut),
            "mha_in" => Ok(ModuleKind::MhaIn),
            "mlp" => Ok(ModuleKind::Mlp),
            other => Err(alloc::format!("unknown module `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    System,
    VisualCritical,
    VisualRedundant,
    Text,
}

impl GroupKind {
    fn as_str(self) -> &'static str {
        match self {
            GroupKind::System => "system",
            GroupKind::VisualCritical => "visual_critical",
            GroupKind::VisualRedundant => "visual_redundant",
            GroupKind::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    #[serde(rename = "id")]
    pub name: String,
    pub kind: GroupKind,
    pub count: u32,
    pub prunable: bool,
    /// The more redundant group whose operation must be pruned before this
    /// group's operation at the same (layer, module).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redundancy_partner: Option<String>,
}

impl GroupSpec {
    pub fn new(name: &str, kind: GroupKind, count: u32, prunable: bool) -> Self {
        GroupSpec {
            name: name.to_string(),
            kind,
            count,
            prunable,
            redundancy_partner: None,
        }
    }

    pub fn with_partner(mut self, partner: &str) -> Self {
        self.redundancy_partner = Some(partner.to_string());
        self
    }
}

/// Index of a group within its [`TokenLayout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId(pub u16);

impl GroupId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Ordered token groups of the prefill sequence. Tokens of group 0 come
/// first in the sequence, then group 1, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct TokenLayout {
    groups: Vec<GroupSpec>,
    visual_ratio_r: Option<f64>,
    partners: Vec<Option<GroupId>>,
    depth: Vec<u16>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutRepr {
    groups: Vec<GroupSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    visual_ratio_r: Option<f64>,
}

impl TryFrom<LayoutRepr> for TokenLayout {
    type Error = ModelError;

    fn try_from(repr: LayoutRepr) -> Result<Self, Self::Error> {
        TokenLayout::new(repr.groups, repr.visual_ratio_r)
    }
}

impl From<TokenLayout> for LayoutRepr {
    fn from(layout: TokenLayout) -> Self {
        LayoutRepr {
            groups: layout.groups,
            visual_ratio_r: layout.visual_ratio_r,
        }
    }
}

impl TokenLayout {
    pub fn new(groups: Vec<GroupSpec>, visual_ratio_r: Option<f64>) -> Result<Self, ModelError> {
        if groups.len() > u16::MAX as usize {
            return Err(ModelError::TooManyGroups(groups.len()));
        }
        for (i, g) in groups.iter().enumerate() {
            if groups[..i].iter().any(|o| o.name == g.name) {
                return Err(ModelError::DuplicateGroup(g.name.clone()));
            }
        }
        if groups.iter().map(|g| g.count as u64).sum::<u64>() == 0 {
            return Err(ModelError::EmptyLayout);
        }
        let mut partners = Vec::with_capacity(groups.len());
        for g in &groups {
            let partner = match &g.redundancy_partner {
                None => None,
                Some(p) => {
                    let idx = groups.iter().position(|o| &o.name == p).ok_or_else(|| {
                        ModelError::UnknownPartner {
                            group: g.name.clone(),
                            partner: p.clone(),
                        }
                    })?;
                    if !groups[idx].prunable {
                        return Err(ModelError::PartnerNotPrunable {
                            group: g.name.clone(),
                            partner: p.clone(),
                        });
                    }
                    Some(GroupId(idx as u16))
                }
            };
            partners.push(partner);
        }
        let mut depth = Vec::with_capacity(groups.len());
        for (i, g) in groups.iter().enumerate() {
            let mut hops = 0u16;
            let mut cur = partners[i];
            while let Some(p) = cur {
                hops += 1;
                if hops as usize > groups.len() {
                    return Err(ModelError::PartnerCycle(g.name.clone()));
                }
                cur = partners[p.index()];
            }
            depth.push(hops);
        }
        Ok(TokenLayout {
            groups,
            visual_ratio_r,
            partners,
            depth,
        })
    }

    /// `system` tokens, then visual tokens split into a critical top-`r`%
    /// group and a redundant remainder, then `text` tokens. Only the two
    /// visual groups are prunable; the critical group's partner is the
    /// redundant group.
    pub fn visual_split(system: u32, visual: u32, r_percent: f64, text: u32) -> Result<Self, ModelError> {
        let critical = libm::round(visual as f64 * r_percent / 100.0) as u32;
        let critical = critical.min(visual);
        let groups = alloc::vec![
            GroupSpec::new("system", GroupKind::System, system, false),
            GroupSpec::new("g1", GroupKind::VisualCritical, critical, true).with_partner("g2"),
            GroupSpec::new("g2", GroupKind::VisualRedundant, visual - critical, true),
            GroupSpec::new("text", GroupKind::Text, text, false),
        ];
        TokenLayout::new(groups, Some(r_percent))
    }

    pub fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    pub fn group(&self, id: GroupId) -> &GroupSpec {
        &self.groups[id.index()]
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn visual_ratio_r(&self) -> Option<f64> {
        self.visual_ratio_r
    }

    pub fn ids(&self) -> impl Iterator<Item = GroupId> + '_ {
        (0..self.groups.len()).map(|i| GroupId(i as u16))
    }

    pub fn find(&self, name: &str) -> Option<GroupId> {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .map(|i| GroupId(i as u16))
    }

    pub fn name(&self, id: GroupId) -> &str {
        &self.groups[id.index()].name
    }

    pub fn total_tokens(&self) -> u64 {
        self.groups.iter().map(|g| g.count as u64).sum()
    }

    /// Prunable groups, most redundant first.
    pub fn prunable_groups(&self) -> Vec<GroupId> {
        let mut ids: Vec<GroupId> = self.ids().filter(|&g| self.group(g).prunable).collect();
        ids.sort_by_key(|&g| (self.depth[g.index()], g));
        ids
    }

    pub fn partner(&self, id: GroupId) -> Option<GroupId> {
        self.partners[id.index()]
    }

    /// Number of partner links between this group and the most redundant
    /// group of its chain. Zero is most redundant.
    pub fn redundancy_depth(&self, id: GroupId) -> u16 {
        self.depth[id.index()]
    }

    /// Half-open token index range of a group in the prefill sequence.
    pub fn token_range(&self, id: GroupId) -> core::ops::Range<usize> {
        let start: usize = self.groups[..id.index()].iter().map(|g| g.count as usize).sum();
        start..start + self.groups[id.index()].count as usize
    }

    /// Canonical operation order: deeper layers first, then more redundant
    /// groups, then `MhaOut < MhaIn < Mlp`.
    pub fn canonical_cmp(&self, a: &Operation, b: &Operation) -> Ordering {
        b.layer
            .cmp(&a.layer)
            .then_with(|| self.redundancy_depth(a.group).cmp(&self.redundancy_depth(b.group)))
            .then_with(|| a.group.cmp(&b.group))
            .then_with(|| a.module.cmp(&b.module))
    }

    pub fn canonical_sort(&self, ops: &mut [Operation]) {
        ops.sort_by(|a, b| self.canonical_cmp(a, b));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Llama,
}

/// Decoder dimensions for a LLaMA-style layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ShapeRepr", into = "ShapeRepr")]
pub struct DecoderShape {
    pub layers: u16,
    pub hidden: u32,
    pub kv_dim: u32,
    pub mlp_dim: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeRepr {
    #[serde(default)]
    architecture: Architecture,
    layers: u16,
    hidden: u32,
    kv_dim: u32,
    mlp_dim: u32,
}

impl TryFrom<ShapeRepr> for DecoderShape {
    type Error = ModelError;

    fn try_from(r: ShapeRepr) -> Result<Self, Self::Error> {
        DecoderShape::new(r.layers, r.hidden, r.kv_dim, r.mlp_dim)
    }
}

impl From<DecoderShape> for ShapeRepr {
    fn from(s: DecoderShape) -> Self {
        ShapeRepr {
            architecture: Architecture::Llama,
            layers: s.layers,
            hidden: s.hidden,
            kv_dim: s.kv_dim,
            mlp_dim: s.mlp_dim,
        }
    }
}

impl DecoderShape {
    pub fn new(layers: u16, hidden: u32, kv_dim: u32, mlp_dim: u32) -> Result<Self, ModelError> {
        if layers == 0 {
            return Err(ModelError::InvalidShape("layers"));
        }
        if hidden == 0 {
            return Err(ModelError::InvalidShape("hidden"));
        }
        if kv_dim == 0 {
            return Err(ModelError::InvalidShape("kv_dim"));
        }
        if mlp_dim == 0 {
            return Err(ModelError::InvalidShape("mlp_dim"));
        }
        Ok(DecoderShape {
            layers,
            hidden,
            kv_dim,
            mlp_dim,
        })
    }
}

/// Shape plus token layout: everything the FLOPs model and the search need
/// to know about the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub shape: DecoderShape,
    pub layout: TokenLayout,
}

impl DecoderConfig {
    pub fn new(shape: DecoderShape, layout: TokenLayout) -> Self {
        DecoderConfig { shape, layout }
    }

    pub fn digest(&self) -> ConfigDigest {
        let mut h = Sha256::new();
        let s = &self.shape;
        h.update(b"llama;");
        h.update(s.layers.to_le_bytes());
        h.update(s.hidden.to_le_bytes());
        h.update(s.kv_dim.to_le_bytes());
        h.update(s.mlp_dim.to_le_bytes());
        for g in &self.layout.groups {
            h.update(b"g;");
            h.update(g.name.as_bytes());
            h.update([0u8]);
            h.update(g.kind.as_str().as_bytes());
            h.update([0u8]);
            h.update(g.count.to_le_bytes());
            h.update([g.prunable as u8]);
            if let Some(p) = &g.redundancy_partner {
                h.update(p.as_bytes());
            }
            h.update([0u8]);
        }
        let out = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&out[..8]);
        ConfigDigest(bytes)
    }

    pub fn empty_policy(&self) -> Policy {
        Policy::new(self.digest())
    }

    pub fn check_operation(&self, op: &Operation) -> Result<(), ModelError> {
        if op.group.index() >= self.layout.len() {
            return Err(ModelError::UnknownGroup(alloc::format!("#{}", op.group.0)));
        }
        if op.layer == 0 || op.layer > self.shape.layers {
            return Err(ModelError::LayerOutOfRange {
                layer: op.layer as u32,
                layers: self.shape.layers,
            });
        }
        Ok(())
    }
}

/// Truncated SHA-256 of a [`DecoderConfig`]; ties policies to the config
/// they were built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConfigDigest(pub [u8; 8]);

impl fmt::Display for ConfigDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl FromStr for ConfigDigest {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 16 || !s.is_ascii() {
            return Err(alloc::format!("config digest must be 16 hex digits, got `{s}`"));
        }
        let mut bytes = [0u8; 8];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| alloc::format!("invalid hex in config digest `{s}`"))?;
        }
        Ok(ConfigDigest(bytes))
    }
}

impl Serialize for ConfigDigest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConfigDigest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One prunable unit of computation: the tokens of `group` skip `module` at
/// `layer` (1-indexed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Operation {
    pub group: GroupId,
    pub layer: u16,
    pub module: ModuleKind,
}

impl Operation {
    pub fn new(group: GroupId, layer: u16, module: ModuleKind) -> Self {
        Operation { group, layer, module }
    }

    /// The same (layer, module) operation for another group.
    pub fn with_group(self, group: GroupId) -> Self {
        Operation { group, ..self }
    }

    pub fn with_module(self, module: ModuleKind) -> Self {
        Operation { module, ..self }
    }
}

/// A set of pruned operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pruned: BTreeSet<Operation>,
    digest: ConfigDigest,
}

impl Policy {
    pub fn new(digest: ConfigDigest) -> Self {
        Policy {
            pruned: BTreeSet::new(),
            digest,
        }
    }

    pub fn from_ops<I: IntoIterator<Item = Operation>>(digest: ConfigDigest, ops: I) -> Self {
        Policy {
            pruned: ops.into_iter().collect(),
            digest,
        }
    }

    pub fn digest(&self) -> ConfigDigest {
        self.digest
    }

    pub fn contains(&self, op: &Operation) -> bool {
        self.pruned.contains(op)
    }

    /// Returns false if the operation was already present.
    pub fn insert(&mut self, op: Operation) -> bool {
        self.pruned.insert(op)
    }

    pub fn remove(&mut self, op: &Operation) -> bool {
        self.pruned.remove(op)
    }

    pub fn len(&self) -> usize {
        self.pruned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pruned.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Operation> + '_ {
        self.pruned.iter()
    }

    pub fn ops(&self) -> &BTreeSet<Operation> {
        &self.pruned
    }

    /// This policy plus `extra`.
    pub fn with<'a, I: IntoIterator<Item = &'a Operation>>(&self, extra: I) -> Policy {
        let mut p = self.clone();
        p.pruned.extend(extra.into_iter().copied());
        p
    }

    /// Operations in canonical order for `layout`.
    pub fn canonical_ops(&self, layout: &TokenLayout) -> Vec<Operation> {
        let mut ops: Vec<Operation> = self.pruned.iter().copied().collect();
        layout.canonical_sort(&mut ops);
        ops
    }
}

/// Every operation over prunable groups, in canonical order.
pub fn all_operations(config: &DecoderConfig) -> Result<Vec<Operation>, ModelError> {
    let groups = config.layout.prunable_groups();
    if groups.is_empty() {
        return Err(ModelError::EmptyOperationSpace);
    }
    let mut ops = Vec::with_capacity(groups.len() * config.shape.layers as usize * 3);
    for layer in (1..=config.shape.layers).rev() {
        for &group in &groups {
            for module in ModuleKind::ALL {
                ops.push(Operation::new(group, layer, module));
            }
        }
    }
    config.layout.canonical_sort(&mut ops);
    Ok(ops)
}

/// True when `op`'s redundancy partner (if any) has already been pruned at
/// the same (layer, module).
pub fn partner_satisfied(op: &Operation, selected: &Policy, layout: &TokenLayout) -> bool {
    match layout.partner(op.group) {
        None => true,
        Some(p) => selected.contains(&op.with_group(p)),
    }
}

/// Remaining operations that may be appended to `selected` without breaking
/// group ordering. An operation with a redundancy partner only becomes a
/// candidate once the partner's operation at the same (layer, module) is in
/// `selected`.
pub fn admissible_candidates(
    selected: &Policy,
    remaining: &[Operation],
    layout: &TokenLayout,
) -> Vec<Operation> {
    remaining
        .iter()
        .filter(|op| !selected.contains(op) && partner_satisfied(op, selected, layout))
        .copied()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintFlags {
    pub group_ordering: bool,
    /// MHA-out and MHA-in of the same (group, layer) are pruned together.
    pub flash_pairing: bool,
}

impl Default for ConstraintFlags {
    fn default() -> Self {
        ConstraintFlags {
            group_ordering: true,
            flash_pairing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// `op` is pruned while its partner's `retained` operation is kept.
    GroupOrder { op: Operation, retained: Operation },
    /// Exactly one of MHA-out / MHA-in is pruned for this (group, layer).
    FlashPairing { group: GroupId, layer: u16 },
    LayerOutOfRange { op: Operation },
    UnknownGroup { op: Operation },
    NotPrunable { op: Operation },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_policy(
    policy: &Policy,
    config: &DecoderConfig,
    flags: ConstraintFlags,
) -> Result<ValidationReport, ModelError> {
    let expected = config.digest();
    if policy.digest() != expected {
        return Err(ModelError::StalePolicy {
            expected,
            found: policy.digest(),
        });
    }
    let layout = &config.layout;
    let mut violations = Vec::new();
    for op in policy.iter() {
        if op.group.index() >= layout.len() {
            violations.push(Violation::UnknownGroup { op: *op });
            continue;
        }
        if op.layer == 0 || op.layer > config.shape.layers {
            violations.push(Violation::LayerOutOfRange { op: *op });
        }
        if !layout.group(op.group).prunable {
            violations.push(Violation::NotPrunable { op: *op });
        }
        if flags.group_ordering {
            if let Some(p) = layout.partner(op.group) {
                let partner_op = op.with_group(p);
                if !policy.contains(&partner_op) {
                    violations.push(Violation::GroupOrder {
                        op: *op,
                        retained: partner_op,
                    });
                }
            }
        }
        if flags.flash_pairing
            && op.module == ModuleKind::MhaOut
            && !policy.contains(&op.with_module(ModuleKind::MhaIn))
        {
            violations.push(Violation::FlashPairing {
                group: op.group,
                layer: op.layer,
            });
        }
        if flags.flash_pairing
            && op.module == ModuleKind::MhaIn
            && !policy.contains(&op.with_module(ModuleKind::MhaOut))
        {
            violations.push(Violation::FlashPairing {
                group: op.group,
                layer: op.layer,
            });
        }
    }
    Ok(ValidationReport { violations })
}
