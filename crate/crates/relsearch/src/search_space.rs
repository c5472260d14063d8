//! The configuration search space: architectures, augmentation plans and
//! training hyperparameters, with uniform sampling and structural
//! validation.
//!
//! An architecture is an ordered list of blocks.  Each block picks an
//! operation, a spatial resolution level in [2, 5], and up to two
//! predecessor blocks (strictly earlier ones).  The first block has the
//! sentinel predecessors (-1, -1) and reads the stem output; the second
//! always reads block 0 and carries (0, -1).

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Sentinel predecessor id meaning "no block input".
pub const PRED_SENTINEL: i64 = -1;
/// Inclusive block-count range.
pub const MIN_BLOCKS: usize = 5;
pub const MAX_BLOCKS: usize = 12;
/// Inclusive spatial-resolution level range.
pub const MIN_LEVEL: i64 = 2;
pub const MAX_LEVEL: i64 = 5;
/// Number of augmentation slots applied in sequence.
pub const NUM_AUG_SLOTS: usize = 5;
/// Number of augmentation candidates per slot.
pub const NUM_AUG_CANDIDATES: i64 = 8;

/// Discrete learning-rate candidates, indexed by `lr_idx`.
pub const LR_CANDIDATES: [f64; 5] = [0.01, 0.005, 0.001, 0.0005, 0.0001];
/// Scheduler names, indexed by `sched_idx`.
pub const SCHED_NAMES: [&str; 2] = ["constant", "polynomial"];
/// Loss names, indexed by `loss_idx`.
pub const LOSS_NAMES: [&str; 5] = ["dice", "dice-squared", "ce", "dice-ce", "dice-focal"];
/// Optimizer names, indexed by `opt_idx`.
pub const OPT_NAMES: [&str; 5] = ["adam", "sgd", "momentum", "nesterov", "novograd"];
/// Augmentation names, indexed by slot value.
pub const AUG_NAMES: [&str; 8] = [
    "flip-x",
    "flip-y",
    "flip-z",
    "rot90-xy",
    "zoom",
    "gaussian-noise",
    "intensity-shift",
    "intensity-scale-shift",
];

/// Block operation kind, serialized as its integer index 0..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum OpKind {
    Residual3D,
    Bottleneck3D,
    AxialAttnXYZ,
    AxialAttnYXZ,
}

impl OpKind {
    pub const COUNT: usize = 4;

    pub fn index(self) -> i64 {
        match self {
            OpKind::Residual3D => 0,
            OpKind::Bottleneck3D => 1,
            OpKind::AxialAttnXYZ => 2,
            OpKind::AxialAttnYXZ => 3,
        }
    }

    pub fn from_index(idx: i64) -> Option<OpKind> {
        match idx {
            0 => Some(OpKind::Residual3D),
            1 => Some(OpKind::Bottleneck3D),
            2 => Some(OpKind::AxialAttnXYZ),
            3 => Some(OpKind::AxialAttnYXZ),
            _ => None,
        }
    }

    pub fn all() -> [OpKind; 4] {
        [
            OpKind::Residual3D,
            OpKind::Bottleneck3D,
            OpKind::AxialAttnXYZ,
            OpKind::AxialAttnYXZ,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Residual3D => "residual3d",
            OpKind::Bottleneck3D => "bottleneck3d",
            OpKind::AxialAttnXYZ => "axial-attn-xyz",
            OpKind::AxialAttnYXZ => "axial-attn-yxz",
        }
    }
}

impl From<OpKind> for i64 {
    fn from(op: OpKind) -> i64 {
        op.index()
    }
}

impl TryFrom<i64> for OpKind {
    type Error = String;
    fn try_from(v: i64) -> std::result::Result<Self, String> {
        OpKind::from_index(v).ok_or_else(|| format!("op index {v} out of range 0..=3"))
    }
}

/// One architectural block.  Serialized as `[id, op, level, pred1, pred2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub block_id: usize,
    pub op: OpKind,
    pub level: i64,
    pub pred1: i64,
    pub pred2: i64,
}

impl BlockSpec {
    /// Real (non-sentinel) predecessor ids.
    pub fn preds(&self) -> impl Iterator<Item = usize> {
        [self.pred1, self.pred2]
            .into_iter()
            .filter(|&p| p >= 0)
            .map(|p| p as usize)
    }
}

impl Serialize for BlockSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(5))?;
        seq.serialize_element(&(self.block_id as i64))?;
        seq.serialize_element(&self.op.index())?;
        seq.serialize_element(&self.level)?;
        seq.serialize_element(&self.pred1)?;
        seq.serialize_element(&self.pred2)?;
        seq.end()
    }
}

impl<'de> Deserialize<'de> for BlockSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = BlockSpec;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a 5-integer block [id, op, level, pred1, pred2]")
            }
            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<BlockSpec, A::Error> {
                let mut next = |pos: usize| -> std::result::Result<i64, A::Error> {
                    seq.next_element::<i64>()?
                        .ok_or_else(|| de::Error::invalid_length(pos, &"5 integers"))
                };
                let id = next(0)?;
                let op_idx = next(1)?;
                let level = next(2)?;
                let pred1 = next(3)?;
                let pred2 = next(4)?;
                if seq.next_element::<i64>()?.is_some() {
                    return Err(de::Error::invalid_length(6, &"5 integers"));
                }
                let op = OpKind::from_index(op_idx)
                    .ok_or_else(|| de::Error::custom(format!("op index {op_idx} out of range")))?;
                if id < 0 {
                    return Err(de::Error::custom("negative block id"));
                }
                Ok(BlockSpec {
                    block_id: id as usize,
                    op,
                    level,
                    pred1,
                    pred2,
                })
            }
        }
        d.deserialize_seq(V)
    }
}

/// Ordered block list; list order is the topological order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub blocks: Vec<BlockSpec>,
}

impl ArchitectureSpec {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Index of the final block (the one feeding the head).
    pub fn final_block(&self) -> usize {
        self.blocks.len() - 1
    }
}

/// Training hyperparameter indices into the frozen candidate tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainHyperParams {
    pub lr_idx: i64,
    pub sched_idx: i64,
    pub loss_idx: i64,
    pub opt_idx: i64,
}

impl TrainHyperParams {
    pub fn learning_rate(&self) -> f64 {
        LR_CANDIDATES[self.lr_idx as usize]
    }
}

/// Exactly five augmentation slots, each an index into the candidate table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugmentationPlan {
    pub slots: Vec<i64>,
}

/// One point in the search space.
///
/// Canonical JSON form:
/// `{"arch":{"blocks":[[id,op,level,pred1,pred2],...]},"aug":[...],"hp":{...}}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub arch: ArchitectureSpec,
    pub aug: AugmentationPlan,
    pub hp: TrainHyperParams,
}

impl Configuration {
    /// Build a configuration, validating every structural invariant.
    pub fn new(arch: ArchitectureSpec, aug: AugmentationPlan, hp: TrainHyperParams) -> Result<Self> {
        let cfg = Configuration { arch, aug, hp };
        let report = validate_configuration(&cfg);
        if report.is_ok() {
            Ok(cfg)
        } else {
            Err(Error::InvalidConfig(report))
        }
    }

    pub fn validate(&self) -> ValidationReport {
        validate_configuration(self)
    }
}

// ---------------------------------------------------------------------------
// Validation

/// Rule identifiers used in validation reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    BlockCountOutOfRange,
    BlockIdMismatch,
    LevelOutOfRange,
    PredecessorNotEarlier,
    SentinelViolation,
    AugLengthInvalid,
    AugSlotOutOfRange,
    HpIndexOutOfRange,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::BlockCountOutOfRange => "block-count-out-of-range",
            Rule::BlockIdMismatch => "block-id-mismatch",
            Rule::LevelOutOfRange => "level-out-of-range",
            Rule::PredecessorNotEarlier => "predecessor-not-earlier",
            Rule::SentinelViolation => "sentinel-violation",
            Rule::AugLengthInvalid => "aug-length-invalid",
            Rule::AugSlotOutOfRange => "aug-slot-out-of-range",
            Rule::HpIndexOutOfRange => "hp-index-out-of-range",
        }
    }
}

/// A single violated invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Offending block index, when the rule concerns a block.
    pub block: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

/// Outcome of validating an architecture or configuration.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, block: Option<usize>, rule: Rule, detail: String) {
        self.violations.push(Violation { block, rule, detail });
    }

    pub fn has_rule(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for v in &self.violations {
            match v.block {
                Some(b) => writeln!(f, "  block {}: {} ({})", b, v.rule.name(), v.detail)?,
                None => writeln!(f, "  {} ({})", v.rule.name(), v.detail)?,
            }
        }
        Ok(())
    }
}

/// Check every architecture invariant, reporting all violations.
pub fn validate_architecture(arch: &ArchitectureSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = arch.blocks.len();
    if !(MIN_BLOCKS..=MAX_BLOCKS).contains(&n) {
        report.push(
            None,
            Rule::BlockCountOutOfRange,
            format!("{n} blocks, expected {MIN_BLOCKS}..={MAX_BLOCKS}"),
        );
    }
    for (i, b) in arch.blocks.iter().enumerate() {
        if b.block_id != i {
            report.push(
                Some(i),
                Rule::BlockIdMismatch,
                format!("block_id {} at position {i}", b.block_id),
            );
        }
        if !(MIN_LEVEL..=MAX_LEVEL).contains(&b.level) {
            report.push(
                Some(i),
                Rule::LevelOutOfRange,
                format!("level {}, expected {MIN_LEVEL}..={MAX_LEVEL}", b.level),
            );
        }
        match i {
            0 => {
                if (b.pred1, b.pred2) != (PRED_SENTINEL, PRED_SENTINEL) {
                    report.push(
                        Some(i),
                        Rule::SentinelViolation,
                        format!("block 0 must have preds (-1,-1), got ({},{})", b.pred1, b.pred2),
                    );
                }
            }
            1 => {
                if (b.pred1, b.pred2) != (0, PRED_SENTINEL) {
                    report.push(
                        Some(i),
                        Rule::SentinelViolation,
                        format!("block 1 must have preds (0,-1), got ({},{})", b.pred1, b.pred2),
                    );
                }
            }
            _ => {
                for p in [b.pred1, b.pred2] {
                    if p < 0 {
                        report.push(
                            Some(i),
                            Rule::SentinelViolation,
                            format!("block {i} may not use sentinel predecessors"),
                        );
                    } else if p >= i as i64 {
                        report.push(
                            Some(i),
                            Rule::PredecessorNotEarlier,
                            format!("pred {p} is not earlier than block {i}"),
                        );
                    }
                }
            }
        }
    }
    report
}

/// Validate the full configuration (architecture + augmentation + hp).
pub fn validate_configuration(cfg: &Configuration) -> ValidationReport {
    let mut report = validate_architecture(&cfg.arch);
    if cfg.aug.slots.len() != NUM_AUG_SLOTS {
        report.push(
            None,
            Rule::AugLengthInvalid,
            format!("{} slots, expected {NUM_AUG_SLOTS}", cfg.aug.slots.len()),
        );
    }
    for (i, &s) in cfg.aug.slots.iter().enumerate() {
        if !(0..NUM_AUG_CANDIDATES).contains(&s) {
            report.push(
                None,
                Rule::AugSlotOutOfRange,
                format!("slot {i} value {s}, expected 0..={}", NUM_AUG_CANDIDATES - 1),
            );
        }
    }
    let hp = &cfg.hp;
    for (name, val, max) in [
        ("lr_idx", hp.lr_idx, 4),
        ("sched_idx", hp.sched_idx, 1),
        ("loss_idx", hp.loss_idx, 4),
        ("opt_idx", hp.opt_idx, 4),
    ] {
        if !(0..=max).contains(&val) {
            report.push(
                None,
                Rule::HpIndexOutOfRange,
                format!("{name} = {val}, expected 0..={max}"),
            );
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Sampling

/// Uniformly sample an architecture.
///
/// Draw order is fixed (N, then per block: op, level, preds) so that a
/// seed fully determines the result.
pub fn sample_architecture<R: Rng>(rng: &mut R) -> ArchitectureSpec {
    let n = rng.gen_range(MIN_BLOCKS..=MAX_BLOCKS);
    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        let op = OpKind::all()[rng.gen_range(0..OpKind::COUNT)];
        let level = rng.gen_range(MIN_LEVEL..=MAX_LEVEL);
        let (pred1, pred2) = match i {
            0 => (PRED_SENTINEL, PRED_SENTINEL),
            1 => (0, PRED_SENTINEL),
            _ => (
                rng.gen_range(0..i as i64),
                rng.gen_range(0..i as i64),
            ),
        };
        blocks.push(BlockSpec {
            block_id: i,
            op,
            level,
            pred1,
            pred2,
        });
    }
    ArchitectureSpec { blocks }
}

/// Uniformly sample a full configuration (architecture, then augmentation
/// slots, then hyperparameter indices).
pub fn sample_configuration<R: Rng>(rng: &mut R) -> Configuration {
    let arch = sample_architecture(rng);
    let slots = (0..NUM_AUG_SLOTS)
        .map(|_| rng.gen_range(0..NUM_AUG_CANDIDATES))
        .collect();
    let hp = TrainHyperParams {
        lr_idx: rng.gen_range(0..5),
        sched_idx: rng.gen_range(0..2),
        loss_idx: rng.gen_range(0..5),
        opt_idx: rng.gen_range(0..5),
    };
    Configuration {
        arch,
        aug: AugmentationPlan { slots },
        hp,
    }
}

// ---------------------------------------------------------------------------
// Reachability

/// All block ids on some predecessor path ending at the final block,
/// including the final block itself.  Blocks not in this set are dangling
/// and get pruned when the network is built.
pub fn reachable_blocks(arch: &ArchitectureSpec) -> Result<BTreeSet<usize>> {
    let report = validate_architecture(arch);
    if !report.is_ok() {
        return Err(Error::InvalidConfig(report));
    }
    let mut reach = BTreeSet::new();
    let mut stack = vec![arch.final_block()];
    while let Some(id) = stack.pop() {
        if reach.insert(id) {
            for p in arch.blocks[id].preds() {
                stack.push(p);
            }
        }
    }
    Ok(reach)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn linear_chain(n: usize) -> ArchitectureSpec {
        let blocks = (0..n)
            .map(|i| BlockSpec {
                block_id: i,
                op: OpKind::Residual3D,
                level: 2,
                pred1: match i {
                    0 => PRED_SENTINEL,
                    _ => i as i64 - 1,
                },
                pred2: if i < 2 { PRED_SENTINEL } else { i as i64 - 2 },
            })
            .collect();
        ArchitectureSpec { blocks }
    }

    #[test]
    fn op_kind_round_trips_through_index() {
        for op in OpKind::all() {
            assert_eq!(OpKind::from_index(op.index()), Some(op));
        }
        assert_eq!(OpKind::from_index(4), None);
        assert_eq!(OpKind::from_index(-1), None);
    }

    #[test]
    fn sampled_architecture_is_valid_and_has_sentinels() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..100 {
            let arch = sample_architecture(&mut rng);
            assert!(validate_architecture(&arch).is_ok());
            assert_eq!(arch.blocks[0].pred1, PRED_SENTINEL);
            assert_eq!(arch.blocks[0].pred2, PRED_SENTINEL);
            assert_eq!(arch.blocks[1].pred1, 0);
            assert_eq!(arch.blocks[1].pred2, PRED_SENTINEL);
        }
    }

    #[test]
    fn block_count_histogram_is_uniform() {
        // chi-squared against uniform over 8 bins; critical value for
        // p=0.01 with 7 degrees of freedom.
        let mut rng = StdRng::seed_from_u64(7);
        let mut counts = [0usize; 8];
        let samples = 10_000;
        for _ in 0..samples {
            let arch = sample_architecture(&mut rng);
            counts[arch.num_blocks() - MIN_BLOCKS] += 1;
        }
        let expected = samples as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 18.475, "chi2 = {chi2}");
    }

    #[test]
    fn sampling_is_pure_in_the_seed() {
        let a = sample_configuration(&mut StdRng::seed_from_u64(0));
        let b = sample_configuration(&mut StdRng::seed_from_u64(0));
        let c = sample_configuration(&mut StdRng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn loss_idx_frequencies_are_uniform() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut counts = [0usize; 5];
        let samples = 10_000;
        for _ in 0..samples {
            let cfg = sample_configuration(&mut rng);
            counts[cfg.hp.loss_idx as usize] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / samples as f64;
            assert!((freq - 0.2).abs() <= 0.02, "freq = {freq}");
        }
    }

    #[test]
    fn validator_flags_forward_reference() {
        let mut arch = linear_chain(5);
        arch.blocks[3].pred1 = 7;
        let report = validate_architecture(&arch);
        assert!(report.has_rule(Rule::PredecessorNotEarlier));
        assert_eq!(
            report
                .violations
                .iter()
                .find(|v| v.rule == Rule::PredecessorNotEarlier)
                .unwrap()
                .block,
            Some(3)
        );
    }

    #[test]
    fn validator_flags_block_count() {
        let report = validate_architecture(&linear_chain(4));
        assert!(report.has_rule(Rule::BlockCountOutOfRange));
        assert!(validate_architecture(&linear_chain(13)).has_rule(Rule::BlockCountOutOfRange));
        assert!(validate_architecture(&linear_chain(5)).is_ok());
    }

    #[test]
    fn reachability_on_chain_and_dangling() {
        let arch = linear_chain(5);
        let reach = reachable_blocks(&arch).unwrap();
        assert_eq!(reach.len(), 5);

        // Make block 2 dangling: blocks 3 and 4 skip over it.
        let mut arch = linear_chain(5);
        arch.blocks[3].pred1 = 1;
        arch.blocks[3].pred2 = 0;
        arch.blocks[4].pred1 = 3;
        arch.blocks[4].pred2 = 1;
        let reach = reachable_blocks(&arch).unwrap();
        assert!(!reach.contains(&2));
        assert_eq!(reach.len(), 4);
    }

    #[test]
    fn reachability_on_diamond() {
        // 0 -> 1 -> {2, 3} -> 4, plus 4 also reads 1 via the diamond arms.
        let blocks = vec![
            BlockSpec { block_id: 0, op: OpKind::Residual3D, level: 2, pred1: -1, pred2: -1 },
            BlockSpec { block_id: 1, op: OpKind::Residual3D, level: 3, pred1: 0, pred2: -1 },
            BlockSpec { block_id: 2, op: OpKind::Bottleneck3D, level: 2, pred1: 1, pred2: 1 },
            BlockSpec { block_id: 3, op: OpKind::AxialAttnXYZ, level: 4, pred1: 1, pred2: 0 },
            BlockSpec { block_id: 4, op: OpKind::Residual3D, level: 2, pred1: 2, pred2: 3 },
        ];
        let arch = ArchitectureSpec { blocks };
        let reach = reachable_blocks(&arch).unwrap();
        assert_eq!(reach.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn reachable_rejects_invalid_arch() {
        assert!(reachable_blocks(&linear_chain(3)).is_err());
    }

    #[test]
    fn canonical_json_shape() {
        let cfg = Configuration {
            arch: linear_chain(5),
            aug: AugmentationPlan { slots: vec![0, 1, 2, 3, 4] },
            hp: TrainHyperParams { lr_idx: 4, sched_idx: 0, loss_idx: 3, opt_idx: 0 },
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.starts_with(r#"{"arch":{"blocks":[[0,0,2,-1,-1],"#), "{json}");
        assert!(json.contains(r#""aug":[0,1,2,3,4]"#));
        assert!(json.contains(r#""hp":{"lr_idx":4,"sched_idx":0,"loss_idx":3,"opt_idx":0}"#));
        let back: Configuration = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn configuration_new_rejects_bad_hp() {
        let err = Configuration::new(
            linear_chain(5),
            AugmentationPlan { slots: vec![0; 5] },
            TrainHyperParams { lr_idx: 9, sched_idx: 0, loss_idx: 0, opt_idx: 0 },
        );
        assert!(err.is_err());
    }
}
