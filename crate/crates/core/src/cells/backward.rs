use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_at, Matrix};

use super::forward::{SegmentTape, StepRecord};
use super::{CellKind, Gate, ParamGrads, StateGrad, SubNetworkParams};

/// Accumulates the weight gradients of one gate from its pre-activation
/// gradient and returns `dpre · W_recurrent` (the contribution to the
/// gradient of the recurrent input).
fn accumulate_gate(
    grad: &mut Gate,
    gate: &Gate,
    dpre: &Matrix,
    x: &Matrix,
    recurrent_in: &Matrix,
) -> Result<Matrix> {
    grad.w_input.add_assign(&matmul_at(dpre, x)?)?;
    grad.w_recurrent
        .add_assign(&matmul_at(dpre, recurrent_in)?)?;
    grad.bias.add_assign(&dpre.sum_rows())?;
    matmul(dpre, &gate.w_recurrent)
}

fn elementwise(n: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..n).map(f).collect()
}

fn like(m: &Matrix, data: Vec<f64>) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), data).expect("same length")
}

/// One step of reverse mode. Takes `dh`/`dc` with respect to this step's
/// outputs and returns them with respect to its inputs.
fn step_backward(
    params: &SubNetworkParams,
    grads: &mut ParamGrads,
    rec: &StepRecord,
    dh: &Matrix,
    dc: Option<&Matrix>,
) -> Result<(Matrix, Option<Matrix>)> {
    let n = dh.data().len();
    match params.kind {
        CellKind::VanillaRnn | CellKind::Irnn => {
            let act = params.kind.rnn_activation();
            let pre = &rec.gates[0];
            let dpre = like(
                pre,
                elementwise(n, |k| dh.data()[k] * act.derivative(pre.data()[k])),
            );
            let dh_prev = accumulate_gate(
                &mut grads.gates[0],
                &params.gates[0],
                &dpre,
                &rec.x,
                &rec.h_prev,
            )?;
            Ok((dh_prev, None))
        }
        CellKind::Gru => {
            let (r, z, cand) = (&rec.gates[0], &rec.gates[1], &rec.gates[2]);
            let hp = &rec.h_prev;
            let (dhd, zd, nd, hpd, rd) = (dh.data(), z.data(), cand.data(), hp.data(), r.data());

            let dpre_n = like(
                cand,
                elementwise(n, |k| dhd[k] * (1.0 - zd[k]) * (1.0 - nd[k] * nd[k])),
            );
            let rh = r.hadamard(hp)?;
            let d_rh =
                accumulate_gate(&mut grads.gates[2], &params.gates[2], &dpre_n, &rec.x, &rh)?;
            let d_rh = d_rh.data();

            let dpre_z = like(
                z,
                elementwise(n, |k| dhd[k] * (hpd[k] - nd[k]) * zd[k] * (1.0 - zd[k])),
            );
            let dpre_r = like(
                r,
                elementwise(n, |k| d_rh[k] * hpd[k] * rd[k] * (1.0 - rd[k])),
            );

            let from_z =
                accumulate_gate(&mut grads.gates[1], &params.gates[1], &dpre_z, &rec.x, hp)?;
            let from_r =
                accumulate_gate(&mut grads.gates[0], &params.gates[0], &dpre_r, &rec.x, hp)?;

            let dh_prev = like(
                hp,
                elementwise(n, |k| {
                    dhd[k] * zd[k] + d_rh[k] * rd[k] + from_z.data()[k] + from_r.data()[k]
                }),
            );
            Ok((dh_prev, None))
        }
        CellKind::Lstm => {
            let (i, f, g, o) = (&rec.gates[0], &rec.gates[1], &rec.gates[2], &rec.gates[3]);
            let c = rec.c.as_ref().expect("lstm tape stores c");
            let c_prev = rec.c_prev.as_ref().expect("lstm tape stores c_prev");
            let dc_next =
                dc.ok_or_else(|| Error::Shape("lstm backward without cell gradient".into()))?;
            let (id, fd, gd, od) = (i.data(), f.data(), g.data(), o.data());
            let dhd = dh.data();

            let tc: Vec<f64> = c.data().iter().map(|v| v.tanh()).collect();
            let dcell = elementwise(n, |k| {
                dc_next.data()[k] + dhd[k] * od[k] * (1.0 - tc[k] * tc[k])
            });

            let dpre_i = like(
                i,
                elementwise(n, |k| dcell[k] * gd[k] * id[k] * (1.0 - id[k])),
            );
            let dpre_f = like(
                f,
                elementwise(n, |k| dcell[k] * c_prev.data()[k] * fd[k] * (1.0 - fd[k])),
            );
            let dpre_g = like(
                g,
                elementwise(n, |k| dcell[k] * id[k] * (1.0 - gd[k] * gd[k])),
            );
            let dpre_o = like(
                o,
                elementwise(n, |k| dhd[k] * tc[k] * od[k] * (1.0 - od[k])),
            );

            let mut dh_prev = Matrix::zeros(dh.rows(), dh.cols());
            for (g_idx, dpre) in [dpre_i, dpre_f, dpre_g, dpre_o].iter().enumerate() {
                let part = accumulate_gate(
                    &mut grads.gates[g_idx],
                    &params.gates[g_idx],
                    dpre,
                    &rec.x,
                    &rec.h_prev,
                )?;
                dh_prev.add_assign(&part)?;
            }
            let dc_prev = like(c_prev, elementwise(n, |k| dcell[k] * fd[k]));
            Ok((dh_prev, Some(dc_prev)))
        }
    }
}

/// Exact backpropagation through one segment.
///
/// The recursion is seeded with `grad_final` (gradient with respect to the
/// state the segment hands on) plus, on the last-position sub-network, the
/// head contribution from `grad_logits`. Returns gradients for every local
/// parameter and the gradient with respect to the segment's initial state.
pub fn backward_segment(
    params: &SubNetworkParams,
    tape: &SegmentTape,
    grad_final: &StateGrad,
    grad_logits: Option<&Matrix>,
) -> Result<(ParamGrads, StateGrad)> {
    if tape.kind != params.kind
        || tape.input_dim != params.input_dim
        || tape.hidden_dim != params.hidden_dim
    {
        return Err(Error::Shape(format!(
            "tape recorded for {} ({}->{}) replayed on {} ({}->{})",
            tape.kind,
            tape.input_dim,
            tape.hidden_dim,
            params.kind,
            params.input_dim,
            params.hidden_dim
        )));
    }
    let last = tape
        .steps
        .last()
        .ok_or_else(|| Error::Shape("empty tape".into()))?;
    grad_final.validate(params.kind, tape.batch(), params.hidden_dim)?;

    let mut grads = ParamGrads::zeros_like(params);
    let mut dh = grad_final.h.clone();
    let mut dc = grad_final.c.clone();

    match (params.head.as_ref(), grad_logits) {
        (Some(head), Some(dlogits)) => {
            if dlogits.shape() != (tape.batch(), head.weight.rows()) {
                return Err(Error::Shape("logit gradient does not match head".into()));
            }
            let gh = grads.head.as_mut().expect("allocated with head");
            gh.weight.add_assign(&matmul_at(dlogits, &last.h)?)?;
            gh.bias.add_assign(&dlogits.sum_rows())?;
            dh.add_assign(&matmul(dlogits, &head.weight)?)?;
        }
        (None, None) => {}
        (Some(_), None) => {
            return Err(Error::Protocol(
                "last-position sub-network needs the logit gradient".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::Protocol(
                "logit gradient routed to a sub-network without a head".into(),
            ))
        }
    }

    for rec in tape.steps.iter().rev() {
        let (dh_prev, dc_prev) = step_backward(params, &mut grads, rec, &dh, dc.as_ref())?;
        dh = dh_prev;
        dc = dc_prev;
    }
    Ok((grads, StateGrad { h: dh, c: dc }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{forward_segment, init_params, CellDims, RecurrentState};

    #[test]
    fn scalar_chain_rule() {
        for &(w, h0) in &[(0.7, 0.4), (-1.3, 0.9), (0.0, 0.5)] {
            let mut p = init_params(
                CellKind::VanillaRnn,
                CellDims {
                    input: 1,
                    hidden: 1,
                    output: 1,
                },
                0,
                1,
                2,
            )
            .unwrap();
            p.gates[0].w_input = Matrix::from_rows(&[&[0.0]]);
            p.gates[0].w_recurrent = Matrix::from_rows(&[&[w]]);
            let s0 = RecurrentState {
                h: Matrix::from_rows(&[&[h0]]),
                c: None,
            };
            let (_, tape) = forward_segment(&p, &s0, &[Matrix::from_rows(&[&[0.3]])]).unwrap();
            // loss = h1
            let seed = RecurrentState {
                h: Matrix::from_rows(&[&[1.0]]),
                c: None,
            };
            let (_, g0) = backward_segment(&p, &tape, &seed, None).unwrap();
            let t = (w * h0).tanh();
            assert!((g0.h.get(0, 0) - w * (1.0 - t * t)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        for kind in CellKind::ALL {
            let p = init_params(
                kind,
                CellDims {
                    input: 2,
                    hidden: 3,
                    output: 2,
                },
                4,
                1,
                2,
            )
            .unwrap();
            let seg = vec![Matrix::from_rows(&[&[0.2, -0.4], &[0.9, 0.1]]); 3];
            let s0 = RecurrentState::zeros(kind, 2, 3);
            let (_, tape) = forward_segment(&p, &s0, &seg).unwrap();
            let (g, g0) =
                backward_segment(&p, &tape, &RecurrentState::zeros(kind, 2, 3), None).unwrap();
            assert!(g.is_zero());
            assert!(g0.values().all(|v| v == 0.0));
        }
    }

    #[test]
    fn head_routing_is_checked() {
        let kind = CellKind::Gru;
        let last = init_params(
            kind,
            CellDims {
                input: 2,
                hidden: 3,
                output: 2,
            },
            4,
            2,
            2,
        )
        .unwrap();
        let first = init_params(
            kind,
            CellDims {
                input: 2,
                hidden: 3,
                output: 2,
            },
            4,
            1,
            2,
        )
        .unwrap();
        let seg = vec![Matrix::zeros(1, 2); 2];
        let s0 = RecurrentState::zeros(kind, 1, 3);
        let (_, tape) = forward_segment(&last, &s0, &seg).unwrap();
        assert!(backward_segment(&last, &tape, &s0, None).is_err());
        assert!(backward_segment(&first, &tape, &s0, Some(&Matrix::zeros(1, 2))).is_err());
        let lstm = init_params(
            CellKind::Lstm,
            CellDims {
                input: 2,
                hidden: 3,
                output: 2,
            },
            4,
            1,
            2,
        )
        .unwrap();
        assert!(backward_segment(&lstm, &tape, &s0, None).is_err());
    }
}
