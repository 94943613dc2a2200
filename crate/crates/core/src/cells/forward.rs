use crate::error::{Error, Result};
use crate::linalg::{matmul_bt, sigmoid, Matrix};

use super::{CellKind, Gate, RecurrentState, SubNetworkParams};

/// Per-step cache for one time step.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct StepRecord {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub c_prev: Option<Matrix>,
    /// Plain cells: the pre-activation. GRU: `[r, z, n]`. LSTM:
    /// `[i, f, g, o]`. Gated cells store post-activation values.
    pub gates: Vec<Matrix>,
    pub h: Matrix,
    pub c: Option<Matrix>,
}

/// Everything a backward pass over one segment needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTape {
    pub(crate) kind: CellKind,
    pub(crate) input_dim: usize,
    pub(crate) hidden_dim: usize,
    pub(crate) steps: Vec<StepRecord>,
}

impl SegmentTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.steps.first().map_or(0, |s| s.x.rows())
    }

    /// State after the last step.
    pub fn final_state(&self) -> Option<RecurrentState> {
        self.steps.last().map(|s| RecurrentState {
            h: s.h.clone(),
            c: s.c.clone(),
        })
    }
}

fn gate_pre(gate: &Gate, x: &Matrix, h: &Matrix) -> Result<Matrix> {
    let mut pre = matmul_bt(x, &gate.w_input)?;
    pre.add_assign(&matmul_bt(h, &gate.w_recurrent)?)?;
    pre.add_row_broadcast(&gate.bias)
}

fn step(
    params: &SubNetworkParams,
    x: &Matrix,
    h_prev: &Matrix,
    c_prev: Option<&Matrix>,
) -> Result<StepRecord> {
    let (gates, h, c) = match params.kind {
        CellKind::VanillaRnn | CellKind::Irnn => {
            let act = params.kind.rnn_activation();
            let pre = gate_pre(&params.gates[0], x, h_prev)?;
            let h = pre.map(|v| act.eval(v));
            (vec![pre], h, None)
        }
        CellKind::Gru => {
            let r = gate_pre(&params.gates[0], x, h_prev)?.map(sigmoid);
            let z = gate_pre(&params.gates[1], x, h_prev)?.map(sigmoid);
            let rh = r.hadamard(h_prev)?;
            let n = gate_pre(&params.gates[2], x, &rh)?.map(f64::tanh);
            // h' = (1 - z) n + z h
            let mut h = n.clone();
            for (((hv, &zv), &nv), &pv) in h
                .data_mut()
                .iter_mut()
                .zip(z.data())
                .zip(n.data())
                .zip(h_prev.data())
            {
                *hv = (1.0 - zv) * nv + zv * pv;
            }
            (vec![r, z, n], h, None)
        }
        CellKind::Lstm => {
            let c_prev =
                c_prev.ok_or_else(|| Error::Shape("lstm step without cell state".into()))?;
            let i = gate_pre(&params.gates[0], x, h_prev)?.map(sigmoid);
            let f = gate_pre(&params.gates[1], x, h_prev)?.map(sigmoid);
            let g = gate_pre(&params.gates[2], x, h_prev)?.map(f64::tanh);
            let o = gate_pre(&params.gates[3], x, h_prev)?.map(sigmoid);
            let mut c = Matrix::zeros(c_prev.rows(), c_prev.cols());
            let mut h = Matrix::zeros(c_prev.rows(), c_prev.cols());
            for k in 0..c.data().len() {
                let cv = f.data()[k] * c_prev.data()[k] + i.data()[k] * g.data()[k];
                c.data_mut()[k] = cv;
                h.data_mut()[k] = o.data()[k] * cv.tanh();
            }
            (vec![i, f, g, o], h, Some(c))
        }
    };
    Ok(StepRecord {
        x: x.clone(),
        h_prev: h_prev.clone(),
        c_prev: c_prev.cloned(),
        gates,
        h,
        c,
    })
}

/// Runs the cell over `segment` (one `batch x input_dim` matrix per time
/// step) starting from `state0`. Returns the final state and the tape.
pub fn forward_segment(
    params: &SubNetworkParams,
    state0: &RecurrentState,
    segment: &[Matrix],
) -> Result<(RecurrentState, SegmentTape)> {
    if segment.is_empty() {
        return Err(Error::Shape("segment has no time steps".into()));
    }
    let batch = state0.batch();
    state0.validate(params.kind, batch, params.hidden_dim)?;
    for (t, x) in segment.iter().enumerate() {
        if x.shape() != (batch, params.input_dim) {
            return Err(Error::Shape(format!(
                "step {t} input is {}x{}, expected {batch}x{}",
                x.rows(),
                x.cols(),
                params.input_dim
            )));
        }
    }
    let mut steps = Vec::with_capacity(segment.len());
    let mut h = state0.h.clone();
    let mut c = state0.c.clone();
    for x in segment {
        let rec = step(params, x, &h, c.as_ref())?;
        h = rec.h.clone();
        c = rec.c.clone();
        steps.push(rec);
    }
    let tape = SegmentTape {
        kind: params.kind,
        input_dim: params.input_dim,
        hidden_dim: params.hidden_dim,
        steps,
    };
    Ok((RecurrentState { h, c }, tape))
}

/// `logits = h · W_hyᵀ + b_y`. Only the last-position sub-network has a head.
pub fn output_forward(params: &SubNetworkParams, state: &RecurrentState) -> Result<Matrix> {
    let head = params.head.as_ref().ok_or_else(|| {
        Error::Protocol("output requested from a sub-network without an output head".into())
    })?;
    matmul_bt(&state.h, &head.weight)?.add_row_broadcast(&head.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{init_params, CellDims, OutputHead};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_rnn(w_in: f64, w_rec: f64) -> SubNetworkParams {
        let mut p = init_params(
            CellKind::VanillaRnn,
            CellDims {
                input: 1,
                hidden: 1,
                output: 1,
            },
            0,
            1,
            1,
        )
        .unwrap();
        p.gates[0].w_input = Matrix::from_rows(&[&[w_in]]);
        p.gates[0].w_recurrent = Matrix::from_rows(&[&[w_rec]]);
        p
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let p = init_params(
            CellKind::VanillaRnn,
            CellDims {
                input: 3,
                hidden: 4,
                output: 2,
            },
            9,
            1,
            1,
        )
        .unwrap()
        .map_values(|_| 0.0);
        let seg: Vec<Matrix> = (0..5)
            .map(|t| Matrix::from_vec(2, 3, vec![t as f64 + 0.3; 6]).unwrap())
            .collect();
        let (s, tape) =
            forward_segment(&p, &RecurrentState::zeros(CellKind::VanillaRnn, 2, 4), &seg).unwrap();
        assert!(s.h.data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.len(), 5);
    }

    #[test]
    fn one_step_hand_computation() {
        let p = scalar_rnn(1.0, 0.0);
        let seg = [Matrix::from_rows(&[&[0.5]])];
        let (s, _) =
            forward_segment(&p, &RecurrentState::zeros(CellKind::VanillaRnn, 1, 1), &seg).unwrap();
        assert!((s.h.get(0, 0) - 0.5f64.tanh()).abs() < 1e-15);
        assert!((s.h.get(0, 0) - 0.462117).abs() < 1e-6);
    }

    /// Straight-line scalar reimplementation of the LSTM recurrence for one
    /// batch row, written without the matrix kernels.
    fn reference_lstm(
        p: &SubNetworkParams,
        xs: &[Vec<f64>],
        h0: &[f64],
        c0: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hid = p.hidden_dim;
        let mut h = h0.to_vec();
        let mut c = c0.to_vec();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for x in xs {
            let mut gate_vals = vec![vec![0.0; hid]; 4];
            for (g, gate) in p.gates.iter().enumerate() {
                for (j, slot) in gate_vals[g].iter_mut().enumerate() {
                    let mut acc = gate.bias.get(0, j);
                    for (k, xv) in x.iter().enumerate() {
                        acc += gate.w_input.get(j, k) * xv;
                    }
                    for (k, hv) in h.iter().enumerate() {
                        acc += gate.w_recurrent.get(j, k) * hv;
                    }
                    *slot = if g == 2 { acc.tanh() } else { sig(acc) };
                }
            }
            for j in 0..hid {
                c[j] = gate_vals[1][j] * c[j] + gate_vals[0][j] * gate_vals[2][j];
            }
            for j in 0..hid {
                h[j] = gate_vals[3][j] * c[j].tanh();
            }
        }
        (h, c)
    }

    #[test]
    fn lstm_matches_reference_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = init_params(
            CellKind::Lstm,
            CellDims {
                input: 3,
                hidden: 4,
                output: 2,
            },
            4,
            1,
            1,
        )
        .unwrap()
        .map_values(|_| rng.gen_range(-0.8..0.8));
        let batch = 2;
        let seg: Vec<Matrix> = (0..6)
            .map(|_| {
                Matrix::from_vec(
                    batch,
                    3,
                    (0..batch * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let state0 = RecurrentState {
            h: Matrix::from_vec(batch, 4, (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .unwrap(),
            c: Some(
                Matrix::from_vec(batch, 4, (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect())
                    .unwrap(),
            ),
        };
        let (s, _) = forward_segment(&p, &state0, &seg).unwrap();
        for b in 0..batch {
            let xs: Vec<Vec<f64>> = seg.iter().map(|m| m.row(b).to_vec()).collect();
            let (h, c) =
                reference_lstm(&p, &xs, state0.h.row(b), state0.c.as_ref().unwrap().row(b));
            for j in 0..4 {
                assert!((h[j] - s.h.get(b, j)).abs() < 1e-13);
                assert!((c[j] - s.c.as_ref().unwrap().get(b, j)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in CellKind::ALL {
            let p = init_params(
                kind,
                CellDims {
                    input: 2,
                    hidden: 3,
                    output: 2,
                },
                5,
                1,
                1,
            )
            .unwrap();
            let seg: Vec<Matrix> = (0..4)
                .map(|_| {
                    Matrix::from_vec(2, 2, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap()
                })
                .collect();
            let s0 = RecurrentState::zeros(kind, 2, 3);
            let (_, a) = forward_segment(&p, &s0, &seg).unwrap();
            let (_, b) = forward_segment(&p, &s0, &seg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forward_rejects_mismatched_inputs() {
        let p = init_params(
            CellKind::Gru,
            CellDims {
                input: 2,
                hidden: 3,
                output: 2,
            },
            5,
            1,
            1,
        )
        .unwrap();
        let bad_width = [Matrix::zeros(2, 3)];
        assert!(
            forward_segment(&p, &RecurrentState::zeros(CellKind::Gru, 2, 3), &bad_width).is_err()
        );
        let bad_batch = [Matrix::zeros(1, 2)];
        assert!(
            forward_segment(&p, &RecurrentState::zeros(CellKind::Gru, 2, 3), &bad_batch).is_err()
        );
        let lstm_state = RecurrentState::zeros(CellKind::Lstm, 2, 3);
        assert!(forward_segment(&p, &lstm_state, &[Matrix::zeros(2, 2)]).is_err());
    }

    #[test]
    fn output_head() {
        let mut p = init_params(
            CellKind::Gru,
            CellDims {
                input: 2,
                hidden: 3,
                output: 3,
            },
            5,
            1,
            1,
        )
        .unwrap();
        p.head = Some(OutputHead {
            weight: Matrix::identity(3),
            bias: Matrix::zeros(1, 3),
        });
        let state = RecurrentState {
            h: Matrix::from_rows(&[&[0.1, -0.2, 0.3], &[1.0, 2.0, 3.0]]),
            c: None,
        };
        assert_eq!(output_forward(&p, &state).unwrap(), state.h);

        let zero = p.map_values(|_| 0.0);
        assert!(output_forward(&zero, &state)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rand_p = p.map_values(|_| rng.gen_range(-1.0..1.0));
        let head = rand_p.head.as_ref().unwrap();
        let got = output_forward(&rand_p, &state).unwrap();
        for b in 0..2 {
            for o in 0..3 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += state.h.get(b, j) * head.weight.get(o, j);
                }
                acc += head.bias.get(0, o);
                assert!((got.get(b, o) - acc).abs() < 1e-15);
            }
        }

        let upstream = init_params(
            CellKind::Gru,
            CellDims {
                input: 2,
                hidden: 3,
                output: 3,
            },
            5,
            1,
            2,
        )
        .unwrap();
        assert!(matches!(
            output_forward(&upstream, &state),
            Err(Error::Protocol(_))
        ));
    }
}
