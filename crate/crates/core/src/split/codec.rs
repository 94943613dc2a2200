//! One-line text encoding of inter-client messages:
//!
//! ```text
//! <msg_type> <round> <segment_position> <id,id,..> <shape> <v,v,..>
//! ```
//!
//! `msg_type` is `activation` or `gradient`; `shape` is `BxH`, or `BxH+BxH`
//! when a cell state follows the hidden state. Values are written in the
//! shortest form that parses back to the same `f64`.

use crate::cells::RecurrentState;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{ActivationMsg, GradientMsg, Message};

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn shape(state: &RecurrentState) -> String {
    let h = format!("{}x{}", state.h.rows(), state.h.cols());
    match &state.c {
        Some(c) => format!("{h}+{}x{}", c.rows(), c.cols()),
        None => h,
    }
}

pub fn encode_message(msg: &Message) -> String {
    let (kind, round, position, ids, state) = match msg {
        Message::Activation(m) => (
            "activation",
            m.round,
            m.segment_position,
            &m.sample_ids,
            &m.state,
        ),
        Message::Gradient(m) => (
            "gradient",
            m.round,
            m.segment_position,
            &m.sample_ids,
            &m.grad_state,
        ),
    };
    let payload = state
        .values()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{kind} {round} {position} {} {} {payload}",
        join(ids.iter()),
        shape(state)
    )
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s
        .split_once('x')
        .ok_or_else(|| Error::Format(format!("bad shape `{s}`")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad shape `{s}`")))
    };
    Ok((parse(r)?, parse(c)?))
}

pub fn decode_message(line: &str) -> Result<Message> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 6 {
        return Err(Error::Format(format!(
            "message has {} fields, expected 6",
            fields.len()
        )));
    }
    let round: u64 = fields[1]
        .parse()
        .map_err(|_| Error::Format(format!("bad round `{}`", fields[1])))?;
    let position: usize = fields[2]
        .parse()
        .map_err(|_| Error::Format(format!("bad segment position `{}`", fields[2])))?;
    let sample_ids = fields[3]
        .split(',')
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Format(format!("bad sample id `{s}`")))
        })
        .collect::<Result<Vec<u64>>>()?;
    let dims = fields[4]
        .split('+')
        .map(parse_dims)
        .collect::<Result<Vec<_>>>()?;
    if dims.is_empty() || dims.len() > 2 || dims.iter().any(|&d| d != dims[0]) {
        return Err(Error::Format(format!("bad shape `{}`", fields[4])));
    }
    let values = fields[5]
        .split(',')
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad value `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rows, cols) = dims[0];
    if values.len() != rows * cols * dims.len() {
        return Err(Error::Format(format!(
            "shape {} needs {} values, found {}",
            fields[4],
            rows * cols * dims.len(),
            values.len()
        )));
    }
    if rows != sample_ids.len() {
        return Err(Error::Format(format!(
            "{} sample ids for batch dimension {rows}",
            sample_ids.len()
        )));
    }
    let (h, c) = values.split_at(rows * cols);
    let state = RecurrentState {
        h: Matrix::from_vec(rows, cols, h.to_vec())?,
        c: (dims.len() == 2)
            .then(|| Matrix::from_vec(rows, cols, c.to_vec()))
            .transpose()?,
    };
    match fields[0] {
        "activation" => Ok(Message::Activation(ActivationMsg {
            sample_ids,
            segment_position: position,
            round,
            state,
        })),
        "gradient" => Ok(Message::Gradient(GradientMsg {
            sample_ids,
            segment_position: position,
            round,
            grad_state: state,
        })),
        other => Err(Error::Format(format!("unknown message type `{other}`"))),
    }
}
