//! Closed-form synthetic evaluator.
//!
//! `score(P) = base − Σ_{o∈P} w(o) − Σ_{{a,b}⊆P} w(a,b)`, where operations
//! at or below a harmless depth contribute nothing (neither their weight nor
//! any interaction they take part in). Terms are subtracted in the order
//! they are listed, so any implementation that walks the same lists produces
//! bit-identical scores.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{CallCounter, EvalError, Evaluator, Score};
use crate::model::{GroupId, ModuleKind, Operation, Policy};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOracleSpec {
    pub base: Score,
    pub weights: Vec<(Operation, f64)>,
    pub interactions: Vec<((Operation, Operation), f64)>,
    /// Operations of `(group, module)` at `layer >= threshold` are free.
    pub harmless_depth: Vec<((GroupId, ModuleKind), u16)>,
    pub seed: u64,
}

/// Knobs for [`SyntheticOracleSpec::random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomOracleParams {
    pub base: Score,
    pub max_weight: f64,
    /// Number of interaction pairs to draw.
    pub interactions: usize,
    pub max_interaction: f64,
    /// Weights are multiples of `1 / quantum`, which keeps all sums exact
    /// for modest `quantum` (a power of two).
    pub quantum: f64,
}

impl Default for RandomOracleParams {
    fn default() -> Self {
        RandomOracleParams {
            base: 100.0,
            max_weight: 4.0,
            interactions: 0,
            max_interaction: 1.0,
            quantum: 256.0,
        }
    }
}

impl SyntheticOracleSpec {
    pub fn additive(base: Score, weights: Vec<(Operation, f64)>) -> Self {
        SyntheticOracleSpec {
            base,
            weights,
            interactions: Vec::new(),
            harmless_depth: Vec::new(),
            seed: 0,
        }
    }

    /// Random weights (non-negative) and interactions (either sign) over
    /// `ops`, reproducible from `seed`.
    pub fn random(ops: &[Operation], seed: u64, params: RandomOracleParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = params.quantum;
        let quantized = |rng: &mut ChaCha8Rng, max: f64, signed: bool| {
            let steps = libm::floor(max * q) as i64;
            let k = if signed {
                rng.random_range(-steps..=steps)
            } else {
                rng.random_range(0..=steps)
            };
            k as f64 / q
        };
        let weights = ops
            .iter()
            .map(|&op| (op, quantized(&mut rng, params.max_weight, false)))
            .collect();
        let mut interactions = Vec::new();
        let mut seen = BTreeSet::new();
        if ops.len() >= 2 {
            let mut attempts = 0;
            while interactions.len() < params.interactions && attempts < params.interactions * 20 {
                attempts += 1;
                let a = ops[rng.random_range(0..ops.len())];
                let b = ops[rng.random_range(0..ops.len())];
                if a == b {
                    continue;
                }
                let key = if a < b { (a, b) } else { (b, a) };
                if !seen.insert(key) {
                    continue;
                }
                interactions.push((key, quantized(&mut rng, params.max_interaction, true)));
            }
        }
        SyntheticOracleSpec {
            base: params.base,
            weights,
            interactions,
            harmless_depth: Vec::new(),
            seed,
        }
    }

    pub fn is_harmless(&self, op: &Operation) -> bool {
        self.harmless_depth
            .iter()
            .any(|&((g, m), depth)| g == op.group && m == op.module && op.layer >= depth)
    }

    pub fn score(&self, policy: &Policy) -> Score {
        let counts = |op: &Operation| policy.contains(op) && !self.is_harmless(op);
        let mut score = self.base;
        for (op, w) in &self.weights {
            if counts(op) {
                score -= w;
            }
        }
        for ((a, b), w) in &self.interactions {
            if counts(a) && counts(b) {
                score -= w;
            }
        }
        score
    }
}

/// [`Evaluator`] over a [`SyntheticOracleSpec`].
#[derive(Debug)]
pub struct SyntheticOracle {
    spec: SyntheticOracleSpec,
    calls: CallCounter,
}

impl SyntheticOracle {
    pub fn new(spec: SyntheticOracleSpec) -> Self {
        SyntheticOracle {
            spec,
            calls: CallCounter::new(),
        }
    }

    pub fn spec(&self) -> &SyntheticOracleSpec {
        &self.spec
    }
}

impl Evaluator for SyntheticOracle {
    fn evaluate(&self, policy: &Policy) -> Result<Score, EvalError> {
        self.calls.bump();
        Ok(self.spec.score(policy))
    }

    fn call_count(&self) -> u64 {
        self.calls.get()
    }

    fn concurrency_safe(&self) -> bool {
        true
    }
}
