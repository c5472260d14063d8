//! Bijective mapping between [`Configuration`] and the flat integer vector
//! consumed by the predictors.
//!
//! Layout: `[id, op, level, pred1, pred2]` for each block, then the five
//! augmentation slots, then `[lr_idx, sched_idx, loss_idx, opt_idx]`.
//! Length is `5*N + 9`, so N is recoverable from the length alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::{
    ArchitectureSpec, AugmentationPlan, BlockSpec, Configuration, OpKind, TrainHyperParams,
    MAX_BLOCKS, MAX_LEVEL, MIN_BLOCKS, MIN_LEVEL, NUM_AUG_CANDIDATES, NUM_AUG_SLOTS,
    PRED_SENTINEL,
};

/// Tokens appended after the per-block section (5 aug slots + 4 hp).
pub const TAIL_LEN: usize = NUM_AUG_SLOTS + 4;
/// Shortest legal vector (5 blocks).
pub const MIN_LEN: usize = 5 * MIN_BLOCKS + TAIL_LEN;
/// Longest legal vector (12 blocks).
pub const MAX_LEN: usize = 5 * MAX_BLOCKS + TAIL_LEN;

/// The 1D integer encoding of a configuration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EncodedConfig {
    pub tokens: Vec<i64>,
}

impl EncodedConfig {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of blocks implied by the vector length.
    pub fn num_blocks(&self) -> usize {
        (self.tokens.len() - TAIL_LEN) / 5
    }

    /// Compact one-line text form (space-separated integers).
    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens = text
            .split_whitespace()
            .map(|t| {
                t.parse::<i64>()
                    .map_err(|_| Error::Config(format!("bad token {t:?} in encoded text")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedConfig { tokens })
    }
}

/// Encode a configuration into its flat token vector.
pub fn encode(config: &Configuration) -> Result<EncodedConfig> {
    let report = config.validate();
    if !report.is_ok() {
        return Err(Error::InvalidConfig(report));
    }
    let mut tokens = Vec::with_capacity(5 * config.arch.num_blocks() + TAIL_LEN);
    for b in &config.arch.blocks {
        tokens.extend([b.block_id as i64, b.op.index(), b.level, b.pred1, b.pred2]);
    }
    tokens.extend_from_slice(&config.aug.slots);
    tokens.extend([
        config.hp.lr_idx,
        config.hp.sched_idx,
        config.hp.loss_idx,
        config.hp.opt_idx,
    ]);
    Ok(EncodedConfig { tokens })
}

fn check(cond: bool, position: usize, token: i64, field: &'static str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::TokenOutOfRange { position, token, field })
    }
}

/// Decode a flat token vector back into a configuration.
///
/// Every token is range-checked; the block-id column must equal the block
/// position.  The decoded configuration always passes validation.
pub fn decode(vec: &EncodedConfig) -> Result<Configuration> {
    let len = vec.tokens.len();
    if len < MIN_LEN || len > MAX_LEN || (len - TAIL_LEN) % 5 != 0 {
        return Err(Error::MalformedLength { len });
    }
    let n = (len - TAIL_LEN) / 5;
    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        let base = 5 * i;
        let t = &vec.tokens[base..base + 5];
        check(t[0] == i as i64, base, t[0], "block-id (must equal position)")?;
        let op = OpKind::from_index(t[1]).ok_or(Error::TokenOutOfRange {
            position: base + 1,
            token: t[1],
            field: "op",
        })?;
        check((MIN_LEVEL..=MAX_LEVEL).contains(&t[2]), base + 2, t[2], "level")?;
        let (pred1, pred2) = (t[3], t[4]);
        match i {
            0 => {
                check(pred1 == PRED_SENTINEL, base + 3, pred1, "pred1 (block 0 sentinel)")?;
                check(pred2 == PRED_SENTINEL, base + 4, pred2, "pred2 (block 0 sentinel)")?;
            }
            1 => {
                check(pred1 == 0, base + 3, pred1, "pred1 (block 1 reads block 0)")?;
                check(pred2 == PRED_SENTINEL, base + 4, pred2, "pred2 (block 1 sentinel)")?;
            }
            _ => {
                check((0..i as i64).contains(&pred1), base + 3, pred1, "pred1")?;
                check((0..i as i64).contains(&pred2), base + 4, pred2, "pred2")?;
            }
        }
        blocks.push(BlockSpec { block_id: i, op, level: t[2], pred1, pred2 });
    }
    let aug_base = 5 * n;
    let slots = vec.tokens[aug_base..aug_base + NUM_AUG_SLOTS].to_vec();
    for (k, &s) in slots.iter().enumerate() {
        check((0..NUM_AUG_CANDIDATES).contains(&s), aug_base + k, s, "aug-slot")?;
    }
    let hp_base = aug_base + NUM_AUG_SLOTS;
    let hp = &vec.tokens[hp_base..hp_base + 4];
    check((0..=4).contains(&hp[0]), hp_base, hp[0], "lr_idx")?;
    check((0..=1).contains(&hp[1]), hp_base + 1, hp[1], "sched_idx")?;
    check((0..=4).contains(&hp[2]), hp_base + 2, hp[2], "loss_idx")?;
    check((0..=4).contains(&hp[3]), hp_base + 3, hp[3], "opt_idx")?;

    Configuration::new(
        ArchitectureSpec { blocks },
        AugmentationPlan { slots },
        TrainHyperParams {
            lr_idx: hp[0],
            sched_idx: hp[1],
            loss_idx: hp[2],
            opt_idx: hp[3],
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::sample_configuration;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn five_block_config_has_34_tokens() {
        let mut rng = StdRng::seed_from_u64(3);
        loop {
            let cfg = sample_configuration(&mut rng);
            if cfg.arch.num_blocks() == 5 {
                assert_eq!(encode(&cfg).unwrap().len(), 34);
                break;
            }
        }
    }

    #[test]
    fn block_zero_subvector_uses_sentinels() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut cfg = sample_configuration(&mut rng);
        cfg.arch.blocks[0].op = OpKind::Residual3D;
        cfg.arch.blocks[0].level = 2;
        let v = encode(&cfg).unwrap();
        assert_eq!(&v.tokens[0..5], &[0, 0, 2, -1, -1]);
    }

    #[test]
    fn searched_training_setting_encodes_as_4_0_3_0() {
        // LR 0.0001 / constant / Dice (no squared) + CE / Adam.
        let mut cfg = sample_configuration(&mut StdRng::seed_from_u64(1));
        cfg.hp = TrainHyperParams { lr_idx: 4, sched_idx: 0, loss_idx: 3, opt_idx: 0 };
        let v = encode(&cfg).unwrap();
        let tail = &v.tokens[v.len() - 4..];
        assert_eq!(tail, &[4, 0, 3, 0]);
    }

    #[test]
    fn length_33_is_malformed() {
        let v = EncodedConfig { tokens: vec![0; 33] };
        assert!(matches!(decode(&v), Err(Error::MalformedLength { len: 33 })));
    }

    #[test]
    fn forward_pred_token_is_out_of_range() {
        let mut rng = StdRng::seed_from_u64(9);
        let cfg = loop {
            let c = sample_configuration(&mut rng);
            if c.arch.num_blocks() == 5 {
                break c;
            }
        };
        let mut v = encode(&cfg).unwrap();
        // pred1 of block 3 points forward.
        v.tokens[5 * 3 + 3] = 9;
        match decode(&v) {
            Err(Error::TokenOutOfRange { position, token, .. }) => {
                assert_eq!(position, 18);
                assert_eq!(token, 9);
            }
            other => panic!("expected token-out-of-range, got {other:?}"),
        }
    }

    #[test]
    fn text_form_round_trips() {
        let cfg = sample_configuration(&mut StdRng::seed_from_u64(17));
        let v = encode(&cfg).unwrap();
        let back = EncodedConfig::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(seed in 0u64..10_000) {
            let cfg = sample_configuration(&mut StdRng::seed_from_u64(seed));
            let v = encode(&cfg).unwrap();
            prop_assert!(v.len() >= MIN_LEN && v.len() <= MAX_LEN);
            prop_assert_eq!((v.len() - TAIL_LEN) % 5, 0);
            let back = decode(&v).unwrap();
            prop_assert_eq!(&back, &cfg);
            // And the other direction: re-encoding is bit-identical.
            prop_assert_eq!(encode(&back).unwrap(), v);
        }

        #[test]
        fn decode_rejects_any_single_token_out_of_range(seed in 0u64..2_000, pos_sel in 0usize..69) {
            let cfg = sample_configuration(&mut StdRng::seed_from_u64(seed));
            let mut v = encode(&cfg).unwrap();
            let pos = pos_sel % v.len();
            // Push the token far outside every field's range.
            v.tokens[pos] = 999;
            prop_assert!(decode(&v).is_err());
        }
    }
}
