use std::collections::HashSet;

use crate::error::{Error, Result};

use super::{decode_message, Message};

/// What an audit of encoded inter-client traffic found.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub messages: usize,
    pub activations: usize,
    pub gradients: usize,
    pub payload_values: usize,
    /// Lines whose payload contains a forbidden value, with that value.
    pub leaks: Vec<(usize, f64)>,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.leaks.is_empty()
    }
}

/// Decodes every traffic line, requires each to be a well-formed state or
/// state-gradient message of width `hidden`, and flags payload values that
/// bitwise equal any nonzero entry of `forbidden` (raw features, parameter
/// buffers). Zero is excluded: it is a legitimate state value.
pub fn audit_traffic<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    hidden: usize,
    forbidden: impl IntoIterator<Item = f64>,
) -> Result<AuditReport> {
    let forbidden: HashSet<u64> = forbidden
        .into_iter()
        .filter(|v| *v != 0.0)
        .map(f64::to_bits)
        .collect();
    let mut report = AuditReport::default();
    for (i, line) in lines.into_iter().enumerate() {
        let msg = decode_message(line)?;
        let state = match &msg {
            Message::Activation(m) => {
                report.activations += 1;
                &m.state
            }
            Message::Gradient(m) => {
                report.gradients += 1;
                &m.grad_state
            }
        };
        if state.hidden() != hidden {
            return Err(Error::Protocol(format!(
                "line {i}: payload width {} is not the hidden width {hidden}",
                state.hidden()
            )));
        }
        report.messages += 1;
        for v in state.values() {
            report.payload_values += 1;
            if forbidden.contains(&v.to_bits()) {
                report.leaks.push((i, v));
            }
        }
    }
    Ok(report)
}
