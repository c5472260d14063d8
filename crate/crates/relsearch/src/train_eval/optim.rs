//! Searchable optimizers and learning-rate schedules.
//!
//! Every optimizer updates a [`ParamSet`](crate::nn::ParamSet) in place
//! from a gradient vector in registration order.  State is kept per
//! tensor so an optimizer can be carried across steps.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::ParamSet;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const NOVOGRAD_BETA1: f64 = 0.9;
const NOVOGRAD_BETA2: f64 = 0.98;
const MOMENTUM: f64 = 0.9;
const EPS: f64 = 1e-8;

/// The five searchable optimizers, in hyperparameter index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
    Momentum,
    Nesterov,
    NovoGrad,
}

impl OptimizerKind {
    pub const COUNT: usize = 5;

    pub fn index(self) -> i64 {
        match self {
            OptimizerKind::Adam => 0,
            OptimizerKind::Sgd => 1,
            OptimizerKind::Momentum => 2,
            OptimizerKind::Nesterov => 3,
            OptimizerKind::NovoGrad => 4,
        }
    }

    pub fn from_index(idx: i64) -> Option<OptimizerKind> {
        match idx {
            0 => Some(OptimizerKind::Adam),
            1 => Some(OptimizerKind::Sgd),
            2 => Some(OptimizerKind::Momentum),
            3 => Some(OptimizerKind::Nesterov),
            4 => Some(OptimizerKind::NovoGrad),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        crate::search_space::OPT_NAMES[self.index() as usize]
    }
}

/// The two searchable schedules, in hyperparameter index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    Constant,
    Polynomial,
}

impl SchedulerKind {
    pub fn from_index(idx: i64) -> Option<SchedulerKind> {
        match idx {
            0 => Some(SchedulerKind::Constant),
            1 => Some(SchedulerKind::Polynomial),
            _ => None,
        }
    }

    pub fn index(self) -> i64 {
        match self {
            SchedulerKind::Constant => 0,
            SchedulerKind::Polynomial => 1,
        }
    }

    pub fn name(self) -> &'static str {
        crate::search_space::SCHED_NAMES[self.index() as usize]
    }
}

/// Learning rate for iteration `iter` of `total` under a schedule.
/// Polynomial decay uses `base * (1 - iter/total)^0.9`.
pub fn lr_at(base: f64, sched: SchedulerKind, iter: usize, total: usize) -> f64 {
    match sched {
        SchedulerKind::Constant => base,
        SchedulerKind::Polynomial => {
            let frac = if total == 0 { 0.0 } else { iter as f64 / total as f64 };
            base * (1.0 - frac).max(0.0).powf(0.9)
        }
    }
}

/// Stateful optimizer over one parameter set.
pub struct Optimizer {
    kind: OptimizerKind,
    step_count: u64,
    /// First moment (Adam, NovoGrad) or velocity buffer (momentum variants).
    m: Vec<ArrayD<f64>>,
    /// Elementwise second moment (Adam only).
    v: Vec<ArrayD<f64>>,
    /// Per-tensor second moment (NovoGrad only).
    v_tensor: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        let shapes: Vec<_> = params.values().iter().map(|a| a.shape().to_vec()).collect();
        let zero = |shapes: &[Vec<usize>]| {
            shapes
                .iter()
                .map(|s| ArrayD::zeros(ndarray::IxDyn(s)))
                .collect::<Vec<_>>()
        };
        let (m, v) = match kind {
            OptimizerKind::Adam => (zero(&shapes), zero(&shapes)),
            OptimizerKind::Momentum | OptimizerKind::Nesterov | OptimizerKind::NovoGrad => {
                (zero(&shapes), Vec::new())
            }
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer {
            kind,
            step_count: 0,
            m,
            v,
            v_tensor: vec![0.0; shapes.len()],
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Apply one update.  `grads` must align with the registration order
    /// of `params`; any non-finite gradient aborts with its tensor name.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::LengthMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, _), g) in params.iter().zip(grads.iter()) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NanGradient {
                    role: name.to_string(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        for (i, g) in grads.iter().enumerate() {
            let w = &mut params.values_mut()[i];
            match self.kind {
                OptimizerKind::Sgd => {
                    w.zip_mut_with(g, |w, &g| *w -= lr * g);
                }
                OptimizerKind::Momentum => {
                    let buf = &mut self.m[i];
                    buf.zip_mut_with(g, |b, &g| *b = MOMENTUM * *b + g);
                    w.zip_mut_with(buf, |w, &b| *w -= lr * b);
                }
                OptimizerKind::Nesterov => {
                    let buf = &mut self.m[i];
                    buf.zip_mut_with(g, |b, &g| *b = MOMENTUM * *b + g);
                    ndarray::Zip::from(&mut *w)
                        .and(g)
                        .and(&*buf)
                        .for_each(|w, &g, &b| *w -= lr * (g + MOMENTUM * b));
                }
                OptimizerKind::Adam => {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
                    v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
                    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
                    ndarray::Zip::from(&mut *w)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|w, &m, &v| {
                            *w -= lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
                        });
                }
                OptimizerKind::NovoGrad => {
                    let gnorm2: f64 = g.iter().map(|x| x * x).sum();
                    let m = &mut self.m[i];
                    if t == 1 {
                        self.v_tensor[i] = gnorm2;
                        let denom = self.v_tensor[i].sqrt() + EPS;
                        m.zip_mut_with(g, |m, &g| *m = g / denom);
                    } else {
                        self.v_tensor[i] =
                            NOVOGRAD_BETA2 * self.v_tensor[i] + (1.0 - NOVOGRAD_BETA2) * gnorm2;
                        let denom = self.v_tensor[i].sqrt() + EPS;
                        m.zip_mut_with(g, |m, &g| *m = NOVOGRAD_BETA1 * *m + g / denom);
                    }
                    w.zip_mut_with(&self.m[i], |w, &m| *w -= lr * m);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn scalar_params(w: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.register("w", ArrayD::from_elem(IxDyn(&[1]), w));
        ps
    }

    fn grad(g: f64) -> Vec<ArrayD<f64>> {
        vec![ArrayD::from_elem(IxDyn(&[1]), g)]
    }

    #[test]
    fn kinds_round_trip() {
        for i in 0..5 {
            assert_eq!(OptimizerKind::from_index(i).unwrap().index(), i);
        }
        assert!(OptimizerKind::from_index(5).is_none());
        assert_eq!(OptimizerKind::NovoGrad.name(), "novograd");
        for i in 0..2 {
            assert_eq!(SchedulerKind::from_index(i).unwrap().index(), i);
        }
    }

    #[test]
    fn sgd_takes_the_exact_gradient_step() {
        let mut ps = scalar_params(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &ps);
        opt.step(&mut ps, &grad(0.25), 0.1).unwrap();
        assert!((ps.values()[0][[0]] - 0.975).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_a_scalar_oracle_over_three_steps() {
        let mut ps = scalar_params(0.5);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &ps);
        let gs = [0.3, -0.1, 0.2];
        let lr = 0.01;

        let (mut w, mut m, mut v) = (0.5_f64, 0.0_f64, 0.0_f64);
        for (step, &g) in gs.iter().enumerate() {
            let t = (step + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9_f64.powi(t));
            let vhat = v / (1.0 - 0.999_f64.powi(t));
            w -= lr * mhat / (vhat.sqrt() + 1e-8);
            opt.step(&mut ps, &grad(g), lr).unwrap();
        }
        assert!((ps.values()[0][[0]] - w).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_a_velocity_buffer() {
        let mut ps = scalar_params(0.0);
        let mut opt = Optimizer::new(OptimizerKind::Momentum, &ps);
        opt.step(&mut ps, &grad(1.0), 0.1).unwrap();
        // buf = 1, w = -0.1
        opt.step(&mut ps, &grad(1.0), 0.1).unwrap();
        // buf = 1.9, w = -0.1 - 0.19
        assert!((ps.values()[0][[0]] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn nesterov_applies_the_lookahead_form() {
        let mut ps = scalar_params(0.0);
        let mut opt = Optimizer::new(OptimizerKind::Nesterov, &ps);
        opt.step(&mut ps, &grad(1.0), 0.1).unwrap();
        // buf = 1, w -= 0.1 * (1 + 0.9) = 0.19
        opt.step(&mut ps, &grad(1.0), 0.1).unwrap();
        // buf = 1.9, w -= 0.1 * (1 + 1.71) = 0.271
        assert!((ps.values()[0][[0]] + 0.461).abs() < 1e-15);
    }

    #[test]
    fn novograd_matches_a_scalar_oracle() {
        let mut ps = scalar_params(1.0);
        let mut opt = Optimizer::new(OptimizerKind::NovoGrad, &ps);
        let lr = 0.05;
        // Step 1: v = 4, m = 2/(2 + 1e-8), w -= lr*m.
        opt.step(&mut ps, &grad(2.0), lr).unwrap();
        let m1 = 2.0 / (2.0 + 1e-8);
        let w1 = 1.0 - lr * m1;
        assert!((ps.values()[0][[0]] - w1).abs() < 1e-15);
        // Step 2: v = 0.98*4 + 0.02*1, m = 0.9*m1 + 1/(sqrt(v)+eps).
        opt.step(&mut ps, &grad(1.0), lr).unwrap();
        let v2: f64 = 0.98 * 4.0 + 0.02;
        let m2 = 0.9 * m1 + 1.0 / (v2.sqrt() + 1e-8);
        let w2 = w1 - lr * m2;
        assert!((ps.values()[0][[0]] - w2).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        for idx in 0..5 {
            let kind = OptimizerKind::from_index(idx).unwrap();
            let mut ps = scalar_params(0.7);
            let mut opt = Optimizer::new(kind, &ps);
            opt.step(&mut ps, &grad(0.0), 0.1).unwrap();
            assert_eq!(ps.values()[0][[0]], 0.7, "{kind:?}");
        }
    }

    #[test]
    fn non_finite_gradient_names_the_offending_tensor() {
        let mut ps = ParamSet::new();
        ps.register("a", ArrayD::zeros(IxDyn(&[1])));
        ps.register("b", ArrayD::zeros(IxDyn(&[1])));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &ps);
        let gs = vec![
            ArrayD::from_elem(IxDyn(&[1]), 0.0),
            ArrayD::from_elem(IxDyn(&[1]), f64::NAN),
        ];
        match opt.step(&mut ps, &gs, 0.1) {
            Err(Error::NanGradient { role }) => assert_eq!(role, "b"),
            other => panic!("expected NanGradient, got {other:?}"),
        }
    }

    #[test]
    fn gradient_count_mismatch_is_rejected() {
        let mut ps = scalar_params(0.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &ps);
        assert!(matches!(
            opt.step(&mut ps, &[], 0.1),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn schedules_shape_the_learning_rate() {
        assert_eq!(lr_at(0.01, SchedulerKind::Constant, 150, 200), 0.01);
        assert_eq!(lr_at(0.01, SchedulerKind::Polynomial, 0, 200), 0.01);
        let mid = lr_at(0.01, SchedulerKind::Polynomial, 100, 200);
        assert!((mid - 0.01 * 0.5_f64.powf(0.9)).abs() < 1e-15);
        let late = lr_at(0.01, SchedulerKind::Polynomial, 199, 200);
        assert!(late > 0.0 && late < mid);
    }
}
