//! Flat little-endian serialisation of layer weights and buffers.

use std::io::{self, Read, Write};

use crate::layer::Layer;

/// Every parameter value followed by every buffer, in visiting order.
pub fn export_state(model: &mut dyn Layer) -> Vec<f32> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| out.extend_from_slice(&p.value));
    model.visit_buffers(&mut |b| out.extend_from_slice(b));
    out
}

/// Inverse of [`export_state`]. Fails if the length does not match the layer.
pub fn import_state(model: &mut dyn Layer, state: &[f32]) -> Result<(), StateError> {
    let mut expected = 0;
    model.visit_params(&mut |p| expected += p.len());
    model.visit_buffers(&mut |b| expected += b.len());
    if expected != state.len() {
        return Err(StateError::Length { expected, found: state.len() });
    }
    let mut at = 0;
    model.visit_params(&mut |p| {
        let n = p.len();
        p.value.copy_from_slice(&state[at..at + n]);
        at += n;
    });
    model.visit_buffers(&mut |b| {
        let n = b.len();
        b.copy_from_slice(&state[at..at + n]);
        at += n;
    });
    Ok(())
}

pub fn write_f32s(mut w: impl Write, values: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_f32s(mut r: impl Read) -> io::Result<Vec<f32>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % 4 != 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "truncated f32 stream"));
    }
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StateError {
    Length { expected: usize, found: usize },
}

impl std::fmt::Display for StateError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateError::Length { expected, found } => {
                write!(f, "weight file holds {found} values, model expects {expected}")
            }
        }
    }
}

impl std::error::Error for StateError {}
