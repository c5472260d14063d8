//! Field-typed vocabulary over encoded configuration vectors.
//!
//! Every position of an encoded vector has a known field type, and each
//! field type owns a disjoint id range, so the same integer value maps
//! to different tokens in different fields and the predecessor sentinel
//! can never collide with a real predecessor id.

use crate::encoding::{EncodedConfig, MAX_LEN, MIN_LEN, TAIL_LEN};
use crate::error::{Error, Result};
use crate::search_space::MAX_BLOCKS;

pub const BLOCK_ID_BASE: usize = 0;
pub const OP_BASE: usize = 12;
pub const LEVEL_BASE: usize = 16;
/// Predecessor range: sentinel -1 at the base, values 0..=10 after it.
pub const PRED_BASE: usize = 20;
pub const AUG_BASE: usize = 32;
pub const LR_BASE: usize = 40;
pub const SCHED_BASE: usize = 45;
pub const LOSS_BASE: usize = 47;
pub const OPT_BASE: usize = 52;
/// Padding id used only inside batched encoding, masked everywhere.
pub const PAD_TOKEN: usize = 57;
pub const VOCAB_SIZE: usize = 58;

fn field_token(position: usize, num_blocks: usize, value: i64) -> Result<usize> {
    let oob = |field: &'static str| Error::TokenOutOfRange {
        position,
        token: value,
        field,
    };
    let check = |lo: i64, hi: i64, base: usize, field: &'static str| {
        if (lo..=hi).contains(&value) {
            Ok(base + (value - lo) as usize)
        } else {
            Err(oob(field))
        }
    };
    if position < 5 * num_blocks {
        match position % 5 {
            0 => check(0, MAX_BLOCKS as i64 - 1, BLOCK_ID_BASE, "block_id"),
            1 => check(0, 3, OP_BASE, "op"),
            2 => check(2, 5, LEVEL_BASE, "level"),
            // Sentinel first, then predecessor ids 0..=MAX_BLOCKS-2.
            _ => check(-1, MAX_BLOCKS as i64 - 2, PRED_BASE, "pred"),
        }
    } else {
        match position - 5 * num_blocks {
            0..=4 => check(0, 7, AUG_BASE, "aug"),
            5 => check(0, 4, LR_BASE, "lr"),
            6 => check(0, 1, SCHED_BASE, "sched"),
            7 => check(0, 4, LOSS_BASE, "loss"),
            _ => check(0, 4, OPT_BASE, "opt"),
        }
    }
}

/// Map an encoded vector to vocabulary ids, one per position.
pub fn tokenize(vec: &EncodedConfig) -> Result<Vec<usize>> {
    let len = vec.tokens.len();
    if !(MIN_LEN..=MAX_LEN).contains(&len) || (len - TAIL_LEN) % 5 != 0 {
        return Err(Error::MalformedLength { len });
    }
    let num_blocks = (len - TAIL_LEN) / 5;
    vec.tokens
        .iter()
        .enumerate()
        .map(|(position, &value)| field_token(position, num_blocks, value))
        .collect()
}
