//! Segmentation losses over class-probability maps.
//!
//! All losses consume (C, x, y, z) probability maps (normalized over the
//! class axis) and a one-hot ground truth of the same shape, and reduce
//! to a scalar.  Each has a tape form for training and an array
//! convenience form for direct evaluation.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

/// Smoothing constant in both Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;
/// Added inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;
/// Focal exponent used by the searchable Dice+Focal combination.
pub const FOCAL_GAMMA: u32 = 2;

/// The five searchable loss functions, in hyperparameter index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Dice,
    DiceSquared,
    CrossEntropy,
    DiceCe,
    DiceFocal,
}

impl LossKind {
    pub const COUNT: usize = 5;

    pub fn index(self) -> i64 {
        match self {
            LossKind::Dice => 0,
            LossKind::DiceSquared => 1,
            LossKind::CrossEntropy => 2,
            LossKind::DiceCe => 3,
            LossKind::DiceFocal => 4,
        }
    }

    pub fn from_index(idx: i64) -> Option<LossKind> {
        match idx {
            0 => Some(LossKind::Dice),
            1 => Some(LossKind::DiceSquared),
            2 => Some(LossKind::CrossEntropy),
            3 => Some(LossKind::DiceCe),
            4 => Some(LossKind::DiceFocal),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        crate::search_space::LOSS_NAMES[self.index() as usize]
    }
}

fn check_pair(pred: &ArrayD<f64>, gt: &ArrayD<f64>) -> Result<()> {
    if pred.shape() != gt.shape() || pred.ndim() != 4 || pred.shape()[0] < 2 {
        return Err(Error::ShapeMismatch {
            expected: "(C >= 2, x, y, z) prediction and matching one-hot".into(),
            actual: format!("pred {:?}, gt {:?}", pred.shape(), gt.shape()),
        });
    }
    Ok(())
}

/// One-hot encode an integer label map to (num_classes, x, y, z).
pub fn one_hot(label: &ArrayD<u8>, num_classes: usize) -> ArrayD<f64> {
    let s = label.shape();
    assert_eq!(s.len(), 3, "label must be (x, y, z)");
    let mut out = ArrayD::zeros(ndarray::IxDyn(&[num_classes, s[0], s[1], s[2]]));
    for ((x, y, z), &c) in label
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .indexed_iter()
    {
        out[[c as usize, x, y, z]] = 1.0;
    }
    out
}

/// Soft Dice loss on the tape:
/// `L = 1 - mean_fg (2*sum(p*g) + eps) / (sum(p^k) + sum(g^k) + eps)`
/// with k = 2 when `squared`, averaged over foreground classes.
pub fn dice_loss_on_tape(tape: &mut Tape, pred: NodeId, gt: NodeId, squared: bool) -> NodeId {
    let c = tape.value(pred).shape()[0];
    let pg = tape.mul(pred, gt);
    let spg = tape.sum_per_channel(pg);
    let num = tape.affine(spg, 2.0, DICE_EPS);
    let (p_k, g_k) = if squared {
        let pp = tape.mul(pred, pred);
        let gg = tape.mul(gt, gt);
        (tape.sum_per_channel(pp), tape.sum_per_channel(gg))
    } else {
        (tape.sum_per_channel(pred), tape.sum_per_channel(gt))
    };
    let den_sum = tape.add(p_k, g_k);
    let den = tape.affine(den_sum, 1.0, DICE_EPS);
    let dice = tape.div(num, den);
    let fg = tape.slice1d(dice, 1, c - 1);
    let mean = tape.mean_all(fg);
    tape.affine(mean, -1.0, 1.0)
}

/// Cross-entropy on the tape: `-mean_vox sum_c g * ln(p + eps)`.
pub fn ce_loss_on_tape(tape: &mut Tape, pred: NodeId, gt: NodeId) -> NodeId {
    let voxels: usize = tape.value(pred).shape()[1..].iter().product();
    let shifted = tape.affine(pred, 1.0, LOG_EPS);
    let logp = tape.log(shifted);
    let gl = tape.mul(gt, logp);
    let total = tape.sum_all(gl);
    tape.affine(total, -1.0 / voxels as f64, 0.0)
}

/// Focal loss on the tape: `-mean_vox sum_c g * (1-p)^gamma * ln(p + eps)`
/// for an integer exponent; gamma = 0 reduces exactly to cross-entropy.
pub fn focal_loss_on_tape(tape: &mut Tape, pred: NodeId, gt: NodeId, gamma: u32) -> NodeId {
    let voxels: usize = tape.value(pred).shape()[1..].iter().product();
    let shifted = tape.affine(pred, 1.0, LOG_EPS);
    let logp = tape.log(shifted);
    let mut weighted = tape.mul(gt, logp);
    if gamma > 0 {
        let om = tape.affine(pred, -1.0, 1.0);
        let mut pw = om;
        for _ in 1..gamma {
            pw = tape.mul(pw, om);
        }
        weighted = tape.mul(weighted, pw);
    }
    let total = tape.sum_all(weighted);
    tape.affine(total, -1.0 / voxels as f64, 0.0)
}

/// One of the five searchable losses on the tape; combinations sum their
/// parts with equal unit weights.
pub fn combined_loss_on_tape(tape: &mut Tape, kind: LossKind, pred: NodeId, gt: NodeId) -> NodeId {
    match kind {
        LossKind::Dice => dice_loss_on_tape(tape, pred, gt, false),
        LossKind::DiceSquared => dice_loss_on_tape(tape, pred, gt, true),
        LossKind::CrossEntropy => ce_loss_on_tape(tape, pred, gt),
        LossKind::DiceCe => {
            let d = dice_loss_on_tape(tape, pred, gt, false);
            let c = ce_loss_on_tape(tape, pred, gt);
            tape.add(d, c)
        }
        LossKind::DiceFocal => {
            let d = dice_loss_on_tape(tape, pred, gt, false);
            let f = focal_loss_on_tape(tape, pred, gt, FOCAL_GAMMA);
            tape.add(d, f)
        }
    }
}

fn eval_scalar(
    pred: &ArrayD<f64>,
    gt: &ArrayD<f64>,
    build: impl Fn(&mut Tape, NodeId, NodeId) -> NodeId,
) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let g = tape.leaf(gt.clone());
    let loss = build(&mut tape, p, g);
    Ok(tape.scalar(loss))
}

pub fn dice_loss(pred: &ArrayD<f64>, gt: &ArrayD<f64>, squared: bool) -> Result<f64> {
    eval_scalar(pred, gt, |t, p, g| dice_loss_on_tape(t, p, g, squared))
}

pub fn ce_loss(pred: &ArrayD<f64>, gt: &ArrayD<f64>) -> Result<f64> {
    eval_scalar(pred, gt, ce_loss_on_tape)
}

pub fn focal_loss(pred: &ArrayD<f64>, gt: &ArrayD<f64>, gamma: u32) -> Result<f64> {
    eval_scalar(pred, gt, |t, p, g| focal_loss_on_tape(t, p, g, gamma))
}

pub fn combined_loss(kind: LossKind, pred: &ArrayD<f64>, gt: &ArrayD<f64>) -> Result<f64> {
    eval_scalar(pred, gt, |t, p, g| combined_loss_on_tape(t, kind, p, g))
}
