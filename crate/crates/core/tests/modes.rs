//! The four training modes collapse onto each other in the degenerate
//! settings where they describe the same computation.

use fedsl::cells::CellKind;
use fedsl::harness::{run, Mode, RunSpec, SynthSpec};
use fedsl::metrics::MetricsRow;

fn base(mode: Mode, cell: CellKind) -> RunSpec {
    RunSpec {
        mode,
        cell,
        hidden: 5,
        rounds: 4,
        clients: 1,
        batch_size: 6,
        lr: 0.3,
        seed: 17,
        synth: SynthSpec {
            n_train: 40,
            n_test: 20,
            steps: 6,
            features: 2,
            ..SynthSpec::default()
        },
        ..RunSpec::default()
    }
}

fn rows(spec: &RunSpec) -> Vec<MetricsRow> {
    run(spec, |_| Ok(())).unwrap()
}

#[test]
fn one_segment_split_learning_is_centralized_training() {
    for cell in CellKind::ALL {
        let central = rows(&base(Mode::Centralized, cell));
        let sl = rows(&RunSpec {
            segments: Some(1),
            ..base(Mode::Sl, cell)
        });
        assert_eq!(central, sl, "{cell}");
    }
}

#[test]
fn single_client_fedavg_is_centralized_training() {
    for cell in CellKind::ALL {
        let central = rows(&base(Mode::Centralized, cell));
        let fedavg = rows(&base(Mode::Fedavg, cell));
        assert_eq!(central, fedavg, "{cell}");
    }
}

#[test]
fn single_chain_fedsl_is_split_learning() {
    let sl = rows(&base(Mode::Sl, CellKind::Lstm));
    let fedsl = rows(&RunSpec {
        clients: 2,
        ..base(Mode::Fedsl, CellKind::Lstm)
    });
    assert_eq!(sl, fedsl);
}

#[test]
fn tied_two_segment_first_loss_matches_centralized() {
    // with tied weights the first batch sees the same function
    let central = rows(&RunSpec {
        rounds: 1,
        batch_size: 40,
        tie_init: true,
        ..base(Mode::Centralized, CellKind::Gru)
    });
    let sl = rows(&RunSpec {
        rounds: 1,
        batch_size: 40,
        tie_init: true,
        ..base(Mode::Sl, CellKind::Gru)
    });
    assert!((central[0].train_loss - sl[0].train_loss).abs() <= 1e-12);
}
