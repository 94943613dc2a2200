//! Central-difference gradient oracle for the recurrent cells.
//!
//! The oracle never touches the backward pass: every probe perturbs one
//! scalar and recomputes the loss with a fresh forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{
    backward_segment, batch_loss, forward_segment, init_params, output_forward, CellDims, CellKind,
    ParamGrads, RecurrentState, StateGrad, SubNetworkParams,
};

pub const FD_EPSILON: f64 = 1e-6;
pub const REL_TOLERANCE: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-8;

/// `(f(x + ε) - f(x - ε)) / 2ε`
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Relative error with the absolute floor applied: values whose absolute
/// difference is under the floor count as exact.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

pub fn agrees(analytic: f64, numeric: f64) -> bool {
    relative_error(analytic, numeric) < REL_TOLERANCE
}

/// Which scalar a finite-difference probe perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    /// Element `index` of the `buffer`-th parameter buffer in canonical order.
    Param {
        buffer: usize,
        index: usize,
    },
    InitialH {
        index: usize,
    },
    InitialC {
        index: usize,
    },
}

/// Scalar test loss over one segment: a fixed linear probe of the final
/// state, plus the mean classification loss when the sub-network has a head.
#[derive(Debug, Clone)]
pub struct ProbeLoss {
    pub probe: RecurrentState,
    pub labels: Option<Vec<usize>>,
}

impl ProbeLoss {
    pub fn value(
        &self,
        params: &SubNetworkParams,
        state0: &RecurrentState,
        segment: &[Matrix],
    ) -> Result<f64> {
        let (state, _) = forward_segment(params, state0, segment)?;
        let mut loss = self.probe.dot(&state)?;
        if let Some(labels) = &self.labels {
            let logits = output_forward(params, &state)?;
            loss += batch_loss(&logits, labels)?.0;
        }
        Ok(loss)
    }

    /// Gradients by the backward pass.
    pub fn analytic(
        &self,
        params: &SubNetworkParams,
        state0: &RecurrentState,
        segment: &[Matrix],
    ) -> Result<(ParamGrads, StateGrad)> {
        let (state, tape) = forward_segment(params, state0, segment)?;
        let grad_logits = match &self.labels {
            Some(labels) => Some(batch_loss(&output_forward(params, &state)?, labels)?.1),
            None => None,
        };
        backward_segment(params, &tape, &self.probe, grad_logits.as_ref())
    }
}

fn perturbed<T: Clone>(base: &T, eps: f64, slot: impl Fn(&mut T) -> Option<&mut f64>) -> Result<T> {
    let mut out = base.clone();
    let v = slot(&mut out).ok_or_else(|| Error::Config("gradient target out of range".into()))?;
    *v += eps;
    Ok(out)
}

/// Numeric derivative of `loss` with respect to one scalar.
pub fn fd_gradient_oracle(
    params: &SubNetworkParams,
    state0: &RecurrentState,
    segment: &[Matrix],
    target: GradTarget,
    loss: &ProbeLoss,
    eps: f64,
) -> Result<f64> {
    let eval = |delta: f64| -> Result<f64> {
        match target {
            GradTarget::Param { buffer, index } => {
                let p = perturbed(params, delta, |p| {
                    p.buffers_mut()
                        .into_iter()
                        .nth(buffer)
                        .and_then(|m| m.data_mut().get_mut(index))
                })?;
                loss.value(&p, state0, segment)
            }
            GradTarget::InitialH { index } => {
                let s = perturbed(state0, delta, |s| s.h.data_mut().get_mut(index))?;
                loss.value(params, &s, segment)
            }
            GradTarget::InitialC { index } => {
                let s = perturbed(state0, delta, |s| {
                    s.c.as_mut().and_then(|c| c.data_mut().get_mut(index))
                })?;
                loss.value(params, &s, segment)
            }
        }
    };
    let plus = eval(eps)?;
    let minus = eval(-eps)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// A random small problem: params, initial state, segment and loss.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub params: SubNetworkParams,
    pub state0: RecurrentState,
    pub segment: Vec<Matrix>,
    pub loss: ProbeLoss,
}

fn random_matrix(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect(),
    )
    .expect("length matches")
}

pub fn random_state(
    kind: CellKind,
    batch: usize,
    hidden: usize,
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> RecurrentState {
    RecurrentState {
        h: random_matrix(batch, hidden, bound, rng),
        c: kind
            .has_cell_state()
            .then(|| random_matrix(batch, hidden, bound, rng)),
    }
}

/// Builds a random instance with hidden ≤ 5 and at most 8 time steps. Every
/// parameter, including biases and IRNN recurrent weights, is randomized.
pub fn random_instance(kind: CellKind, seed: u64, with_head: bool) -> GradCheckInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = CellDims {
        input: rng.gen_range(1..=4),
        hidden: rng.gen_range(1..=5),
        output: rng.gen_range(1..=4),
    };
    let steps = rng.gen_range(1..=8);
    let batch = rng.gen_range(1..=3);
    let position = if with_head { 2 } else { 1 };
    let params = init_params(kind, dims, seed, position, 2)
        .expect("dims are positive")
        .map_values(|_| rng.gen_range(-0.9..0.9));
    let state0 = random_state(kind, batch, dims.hidden, 0.5, &mut rng);
    let segment = (0..steps)
        .map(|_| random_matrix(batch, dims.input, 1.0, &mut rng))
        .collect();
    let probe = random_state(kind, batch, dims.hidden, 1.0, &mut rng);
    let labels = with_head.then(|| {
        let classes = dims.output.max(2);
        (0..batch).map(|_| rng.gen_range(0..classes)).collect()
    });
    GradCheckInstance {
        params,
        state0,
        segment,
        loss: ProbeLoss { probe, labels },
    }
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel >= REL_TOLERANCE || !rel.is_finite() {
            self.failures += 1;
        }
        if rel > self.max_rel_err || rel.is_nan() {
            self.max_rel_err = rel;
        }
    }

    pub fn merge(&mut self, other: &CheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

/// Compares every parameter gradient and every initial-state gradient of an
/// instance against the oracle.
pub fn check_instance(inst: &GradCheckInstance) -> Result<CheckReport> {
    let (grads, grad_state0) = inst
        .loss
        .analytic(&inst.params, &inst.state0, &inst.segment)?;
    let mut report = CheckReport::default();
    for (buffer, g) in grads.buffers().iter().enumerate() {
        for (index, &analytic) in g.data().iter().enumerate() {
            let numeric = fd_gradient_oracle(
                &inst.params,
                &inst.state0,
                &inst.segment,
                GradTarget::Param { buffer, index },
                &inst.loss,
                FD_EPSILON,
            )?;
            report.record(analytic, numeric);
        }
    }
    for (index, &analytic) in grad_state0.h.data().iter().enumerate() {
        let numeric = fd_gradient_oracle(
            &inst.params,
            &inst.state0,
            &inst.segment,
            GradTarget::InitialH { index },
            &inst.loss,
            FD_EPSILON,
        )?;
        report.record(analytic, numeric);
    }
    if let Some(gc) = &grad_state0.c {
        for (index, &analytic) in gc.data().iter().enumerate() {
            let numeric = fd_gradient_oracle(
                &inst.params,
                &inst.state0,
                &inst.segment,
                GradTarget::InitialC { index },
                &inst.loss,
                FD_EPSILON,
            )?;
            report.record(analytic, numeric);
        }
    }
    Ok(report)
}

/// Runs `seeds` random instances of `kind`, alternating between upstream
/// (no head) and last-position (with head) sub-networks.
pub fn check_cell(kind: CellKind, seeds: u64) -> Result<CheckReport> {
    let mut total = CheckReport::default();
    for seed in 0..seeds {
        let inst = random_instance(kind, 1000 + seed, seed % 2 == 1);
        total.merge(&check_instance(&inst)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_toy() {
        let g = central_difference(|w| w * w, 3.0, FD_EPSILON);
        assert!((g - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-10, 3e-10), 0.0);
        assert!(agrees(1.0, 1.0 + 5e-6));
        assert!(!agrees(1.0, 1.0 + 5e-5));
    }

    #[test]
    fn every_cell_matches_oracle() {
        for kind in CellKind::ALL {
            let report = check_cell(kind, 6).unwrap();
            assert!(report.passed(), "{kind}: {report:?}");
        }
    }

    #[test]
    fn state_gradient_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for kind in CellKind::ALL {
            let inst = random_instance(kind, 77, true);
            let (_, g0) = inst
                .loss
                .analytic(&inst.params, &inst.state0, &inst.segment)
                .unwrap();
            let dir = random_state(
                kind,
                inst.state0.batch(),
                inst.state0.hidden(),
                1.0,
                &mut rng,
            );
            let eps = 1e-6;
            let shift = |k: f64| {
                let mut s = inst.state0.clone();
                s.h.axpy(k, &dir.h).unwrap();
                if let (Some(c), Some(d)) = (s.c.as_mut(), dir.c.as_ref()) {
                    c.axpy(k, d).unwrap();
                }
                inst.loss.value(&inst.params, &s, &inst.segment).unwrap()
            };
            let numeric = (shift(eps) - shift(-eps)) / (2.0 * eps);
            let analytic = g0.dot(&dir).unwrap();
            assert!(agrees(analytic, numeric), "{kind}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn dropping_cell_gradient_changes_upstream_gradient() {
        // An LSTM upstream segment receives (dh, dc); discarding dc must
        // produce a different, wrong gradient.
        for seed in 0..5 {
            let inst = random_instance(CellKind::Lstm, 500 + seed, false);
            let (_, tape) = forward_segment(&inst.params, &inst.state0, &inst.segment).unwrap();
            let full = inst.loss.probe.clone();
            let mut h_only = full.clone();
            h_only.c = Some(Matrix::zeros(full.h.rows(), full.h.cols()));
            let (g_full, s_full) = backward_segment(&inst.params, &tape, &full, None).unwrap();
            let (g_h, s_h) = backward_segment(&inst.params, &tape, &h_only, None).unwrap();
            let diff: f64 = s_full
                .values()
                .zip(s_h.values())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 1e-6, "seed {seed}: c-gradient had no effect");
            assert_ne!(g_full, g_h);
        }
    }

    #[test]
    fn bad_target_is_error() {
        let inst = random_instance(CellKind::Gru, 1, false);
        let r = fd_gradient_oracle(
            &inst.params,
            &inst.state0,
            &inst.segment,
            GradTarget::InitialC { index: 0 },
            &inst.loss,
            FD_EPSILON,
        );
        assert!(r.is_err());
    }
}
