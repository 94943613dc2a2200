use super::gradcheck::{chain_fd_check, random_chain, tied_equivalence};
use super::*;
use crate::cells::{init_params, CellDims, CellKind};
use crate::data::{assign_segments, SequenceRecord};
use crate::fed::IdBank;

fn two_segment_setup(kind: CellKind, output: usize) -> (Vec<ClientEndpoint>, Vec<SampleId>) {
    let records: Vec<SequenceRecord> = (0..4)
        .map(|i| SequenceRecord {
            sample_id: 10 + i,
            features: Matrix::from_vec(
                6,
                2,
                (0..12)
                    .map(|k| ((k + i as usize) as f64 * 0.37).sin())
                    .collect(),
            )
            .unwrap(),
            label: Some(i as usize % 2),
        })
        .collect();
    let ids: Vec<SampleId> = records.iter().map(|r| r.sample_id).collect();
    let mut bank = IdBank::new();
    let assignment =
        assign_segments(&records, std::slice::from_ref(&ids), &[3, 3], &mut bank).unwrap();
    let dims = CellDims {
        input: 2,
        hidden: 3,
        output,
    };
    let chain = assignment
        .clients
        .into_iter()
        .map(|d| {
            let p = init_params(kind, dims, 42, d.position, 2).unwrap();
            ClientEndpoint::from_data(d, p)
        })
        .collect();
    (chain, ids)
}

fn zero(p: &SubNetworkParams) -> SubNetworkParams {
    p.map_values(|_| 0.0)
}

#[test]
fn zero_weights_send_zero_state() {
    let (mut chain, ids) = two_segment_setup(CellKind::Gru, 2);
    chain[0].params = zero(&chain[0].params);
    let msg = upstream_forward(&mut chain[0], 0, &ids[..2], None).unwrap();
    assert_eq!(msg.state.batch(), 2);
    assert!(msg.state.values().all(|v| v == 0.0));
    assert_eq!(msg.segment_position, 1);
}

#[test]
fn zero_incoming_and_weights_give_uniform_loss() {
    let (mut chain, ids) = two_segment_setup(CellKind::VanillaRnn, 10);
    // 10 classes but labels in {0, 1}: still uniform
    chain[1].params = zero(&chain[1].params);
    let msg = ActivationMsg {
        sample_ids: ids.clone(),
        segment_position: 1,
        round: 0,
        state: RecurrentState::zeros(CellKind::VanillaRnn, 4, 3),
    };
    let out = downstream_train_step(&mut chain[1], 0, &ids, Some(&msg), 0.1).unwrap();
    assert!((out.loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_lr_keeps_params_and_still_sends_gradient() {
    let (mut chain, ids) = two_segment_setup(CellKind::Lstm, 1);
    let before: Vec<_> = chain.iter().map(|c| c.params.clone()).collect();
    let mut log = MessageLog::new(true);
    sl_train_batch(&mut chain, 0, &ids, 0.0, &mut log).unwrap();
    for (c, b) in chain.iter().zip(&before) {
        assert_eq!(&c.params, b);
        assert_eq!(c.version(), 1);
    }
    assert_eq!(log.lines().len(), 2);
    assert!(log.lines()[1].starts_with("gradient 0 1 10,11,12,13 4x3+4x3 "));
}

#[test]
fn zero_gradient_is_a_no_op_upstream() {
    let (mut chain, ids) = two_segment_setup(CellKind::Gru, 1);
    let before = chain[0].params.clone();
    let act = upstream_forward(&mut chain[0], 1, &ids, None).unwrap();
    let grad = GradientMsg {
        sample_ids: ids.clone(),
        segment_position: 1,
        round: 1,
        grad_state: RecurrentState::zeros(CellKind::Gru, act.state.batch(), 3),
    };
    assert!(upstream_backward(&mut chain[0], &grad, 0.5)
        .unwrap()
        .is_none());
    chain[0].commit().unwrap();
    assert_eq!(chain[0].params, before);
}

#[test]
fn duplicate_and_stale_gradients_rejected() {
    let (mut chain, ids) = two_segment_setup(CellKind::VanillaRnn, 1);
    let act = upstream_forward(&mut chain[0], 2, &ids, None).unwrap();
    let out = downstream_train_step(&mut chain[1], 2, &ids, Some(&act), 0.1).unwrap();
    let grad = out.gradient.unwrap();
    upstream_backward(&mut chain[0], &grad, 0.1).unwrap();
    chain[0].commit().unwrap();
    assert!(matches!(
        upstream_backward(&mut chain[0], &grad, 0.1),
        Err(Error::Protocol(_))
    ));
    let stale = GradientMsg { round: 1, ..grad };
    assert!(matches!(
        upstream_backward(&mut chain[0], &stale, 0.1),
        Err(Error::Protocol(_))
    ));
}

#[test]
fn misrouted_messages_rejected() {
    let (mut chain, ids) = two_segment_setup(CellKind::Gru, 1);
    let act = upstream_forward(&mut chain[0], 0, &ids, None).unwrap();
    let swapped = ActivationMsg {
        sample_ids: vec![ids[1], ids[0], ids[2], ids[3]],
        ..act.clone()
    };
    assert!(downstream_train_step(&mut chain[1], 0, &ids, Some(&swapped), 0.1).is_err());
    // upstream client cannot act as the label holder and vice versa
    assert!(downstream_train_step(&mut chain[0], 0, &ids, None, 0.1).is_err());
    assert!(upstream_forward(&mut chain[1], 0, &ids, Some(&act)).is_err());
    // position 2 needs the activation
    assert!(downstream_train_step(&mut chain[1], 0, &ids, None, 0.1).is_err());
    assert!(upstream_forward(&mut chain[0], 0, &[999], None).is_err());
}

#[test]
fn failed_batch_rolls_back_every_client() {
    let (mut chain, ids) = two_segment_setup(CellKind::Lstm, 1);
    // unknown sample at the label holder only
    let mut bad = ids.clone();
    bad.push(77);
    chain[0].store.insert(
        77,
        crate::data::StoredSegment {
            features: Matrix::zeros(3, 2),
            label: None,
        },
    );
    let before: Vec<_> = chain.iter().map(|c| c.params.clone()).collect();
    let mut log = MessageLog::new(true);
    assert!(sl_train_batch(&mut chain, 0, &bad, 0.1, &mut log).is_err());
    for (c, b) in chain.iter().zip(&before) {
        assert_eq!(&c.params, b);
        assert_eq!(c.version(), 0);
        assert_eq!(c.pending_batches(), 0);
        assert!(c.staged_grads().is_none());
    }
    assert!(log.lines().is_empty());
    assert!(log.links().is_empty());
    // the chain is still usable
    sl_train_batch(&mut chain, 0, &ids, 0.1, &mut log).unwrap();
    assert!(chain.iter().all(|c| c.version() == 1));
}

#[test]
fn single_position_chain_is_plain_training() {
    let kind = CellKind::Gru;
    let inst = random_chain(kind, 1, 8, false).unwrap();
    let mut chain = inst.endpoints().unwrap();
    let loss = sl_train_batch(
        &mut chain,
        0,
        &inst.sample_ids(),
        0.05,
        &mut MessageLog::new(true),
    )
    .unwrap();

    let mut params = inst.positions[0].clone();
    let steps = inst.segment_inputs(0);
    let zeros = RecurrentState::zeros(kind, inst.records.len(), params.hidden_dim);
    let (state, tape) = forward_segment(&params, &zeros, &steps).unwrap();
    let logits = output_forward(&params, &state).unwrap();
    let (expect, gl) = batch_loss(&logits, &inst.labels()).unwrap();
    let (g, _) = backward_segment(&params, &tape, &zeros, Some(&gl)).unwrap();
    sgd_step(&mut params, &g, 0.05).unwrap();
    assert_eq!(loss, expect);
    assert_eq!(chain[0].params, params);
}

#[test]
fn counters_and_conservation() {
    for segments in [2, 3] {
        let inst = random_chain(CellKind::Lstm, segments, 3, false).unwrap();
        let mut chain = inst.endpoints().unwrap();
        let mut log = MessageLog::new(false);
        for round in 0..5 {
            sl_train_batch(&mut chain, round, &inst.sample_ids(), 0.01, &mut log).unwrap();
            assert!(chain.iter().all(|c| c.version() == round + 1));
            assert!(chain.iter().all(|c| c.pending_batches() == 0));
        }
        assert_eq!(log.links().len(), 2 * (segments - 1));
        for s in 0..segments - 1 {
            let (a, b) = (chain[s].client_id, chain[s + 1].client_id);
            assert_eq!(log.links()[&(a, b)], (5, 0));
            assert_eq!(log.links()[&(b, a)], (0, 5));
        }
    }
}

#[test]
fn deterministic_loss_sequence() {
    let run = || {
        let inst = random_chain(CellKind::Gru, 2, 21, false).unwrap();
        let mut chain = inst.endpoints().unwrap();
        let mut log = MessageLog::new(false);
        (0..50)
            .map(|r| sl_train_batch(&mut chain, r, &inst.sample_ids(), 0.1, &mut log).unwrap())
            .collect::<Vec<f64>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a[49] < a[0]);
}

#[test]
fn tied_chain_matches_unsplit_cell() {
    for kind in CellKind::ALL {
        for segments in [2, 3] {
            for seed in 0..4 {
                let r = tied_equivalence(kind, segments, seed).unwrap();
                assert!(r.passed(), "{kind} S={segments} seed={seed}: {r:?}");
            }
        }
    }
}

#[test]
fn tied_four_plus_four() {
    // fixed 4 + 4 split, independent of the random length draw
    let kind = CellKind::VanillaRnn;
    let mut inst = random_chain(kind, 2, 5, true).unwrap();
    inst.records.iter_mut().for_each(|r| {
        let width = r.features.cols();
        r.features = Matrix::from_vec(
            8,
            width,
            (0..8 * width).map(|k| (k as f64 * 0.3).cos()).collect(),
        )
        .unwrap();
    });
    inst.lengths = vec![4, 4];
    let split_logits = chain_logits(
        &inst.positions,
        &[inst.segment_inputs(0), inst.segment_inputs(1)],
    )
    .unwrap();
    let full = inst.positions[1].clone();
    let all: Vec<Matrix> = inst
        .segment_inputs(0)
        .into_iter()
        .chain(inst.segment_inputs(1))
        .collect();
    let zeros = RecurrentState::zeros(kind, inst.records.len(), full.hidden_dim);
    let (state, _) = forward_segment(&full, &zeros, &all).unwrap();
    assert_eq!(split_logits, output_forward(&full, &state).unwrap());
}

#[test]
fn chain_gradients_match_finite_differences() {
    for kind in CellKind::ALL {
        for segments in [2, 3] {
            let r = chain_fd_check(kind, segments, 9).unwrap();
            assert!(r.passed(), "{kind} S={segments}: {r:?}");
        }
    }
}

#[test]
fn traffic_carries_only_states() {
    let inst = random_chain(CellKind::Lstm, 3, 4, false).unwrap();
    let mut chain = inst.endpoints().unwrap();
    let mut log = MessageLog::new(true);
    for r in 0..3 {
        sl_train_batch(&mut chain, r, &inst.sample_ids(), 0.1, &mut log).unwrap();
    }
    let mut forbidden: Vec<f64> = inst
        .records
        .iter()
        .flat_map(|r| r.features.data().to_vec())
        .collect();
    for p in inst.positions.iter().chain(chain.iter().map(|c| &c.params)) {
        forbidden.extend(p.buffers().iter().flat_map(|m| m.data().to_vec()));
    }
    let report = audit_traffic(
        log.lines().iter().map(String::as_str),
        inst.positions[0].hidden_dim,
        forbidden,
    )
    .unwrap();
    assert!(report.clean(), "{report:?}");
    assert_eq!(report.activations, 6);
    assert_eq!(report.gradients, 6);
}
