//! Trainable parameter storage, initialization, the Adam update, and the
//! named-tensor container used by checkpoints.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// A dense value with an optional gradient slot of the same shape.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub value: Mat,
    pub grad: Option<Mat>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(value: Mat, requires_grad: bool) -> Self {
        Tensor {
            value,
            grad: None,
            requires_grad,
        }
    }
}

/// Named collection of tensors; iteration order is registration order and
/// is what checkpoint files and Adam state follow.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Mat, requires_grad: bool) -> usize {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        let idx = self.entries.len();
        self.index.insert(name.to_string(), idx);
        self.entries.push((name.to_string(), Tensor::new(value, requires_grad)));
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| self.tensor(i))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| self.tensor_mut(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.tensor(i).requires_grad)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.grad = None;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.value.is_finite())
    }

    /// Pull leaf gradients off a finished backward pass into the grad slots.
    /// Trainable parameters untouched by the graph get zero gradients, and
    /// repeated calls without `zero_grads` accumulate.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Gradients) {
        let bindings = tape.leaf_bindings();
        for i in 0..self.len() {
            if !self.tensor(i).requires_grad {
                continue;
            }
            let shape = (self.tensor(i).value.rows, self.tensor(i).value.cols);
            let slot = &mut self.entries[i].1.grad;
            if slot.is_none() {
                *slot = Some(Mat::zeros(shape.0, shape.1));
            }
        }
        for (param_idx, node) in bindings {
            if let Some(g) = grads.get(node) {
                if let Some(slot) = self.entries[param_idx].1.grad.as_mut() {
                    slot.add_assign(g);
                }
            }
        }
    }

    /// Register every trainable tensor as a tape leaf; returns leaf node ids
    /// aligned with parameter indices (None for non-trainable entries, which
    /// enter the tape as constants on demand).
    pub fn bind_leaves(&self, tape: &mut Tape) -> Vec<Option<crate::autodiff::NodeId>> {
        (0..self.len())
            .map(|i| {
                let t = self.tensor(i);
                if t.requires_grad {
                    Some(tape.param(i, t.value.clone()))
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Xavier/Glorot uniform init: entries in ±√(6/(rows+cols)), seeded.
pub fn xavier_init(rows: usize, cols: usize, seed: u64) -> Mat {
    assert!(rows > 0 && cols > 0, "xavier_init requires positive dims");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// First/second-moment accumulators for Adam, aligned with a ParameterSet.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let m = (0..params.len())
            .map(|i| {
                let t = params.tensor(i);
                Mat::zeros(t.value.rows, t.value.cols)
            })
            .collect::<Vec<_>>();
        AdamState { v: m.clone(), m, t: 0 }
    }
}

/// One bias-corrected Adam step in place; gradients are zeroed afterwards.
pub fn adam_step(
    params: &mut ParameterSet,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    for &i in &params.trainable_indices() {
        if params.tensor(i).grad.is_none() {
            return Err(Error::Config(format!(
                "adam_step: missing gradient for parameter {}",
                params.name(i)
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let tensor = &mut params.entries[i].1;
        if !tensor.requires_grad {
            continue;
        }
        let grad = tensor.grad.take().expect("checked above");
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for k in 0..grad.data.len() {
            let g = grad.data[k];
            m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * g;
            v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * g * g;
            let m_hat = m.data[k] / bc1;
            let v_hat = v.data[k] / bc2;
            tensor.value.data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---- named-tensor container -------------------------------------------------

const CONTAINER_VERSION: u8 = 1;

/// Write named tensors: version byte, tensor count, then per tensor a
/// (name, rows, cols) header followed by little-endian f64 values.
pub fn write_tensors(path: &Path, items: &[(&str, &Mat)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&[CONTAINER_VERSION])?;
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for (name, mat) in items {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "tensor name too long");
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(mat.rows as u64).to_le_bytes())?;
        w.write_all(&(mat.cols as u64).to_le_bytes())?;
        for &v in &mat.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated file while reading {what}")))
}

/// Read a container written by [`write_tensors`], preserving order.
pub fn read_tensors(path: &Path) -> Result<Vec<(String, Mat)>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut byte = [0u8; 1];
    read_exact_or_format(&mut r, &mut byte, "version byte")?;
    if byte[0] != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {} (expected {CONTAINER_VERSION})",
            byte[0]
        )));
    }
    let mut u32buf = [0u8; 4];
    read_exact_or_format(&mut r, &mut u32buf, "tensor count")?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut u16buf = [0u8; 2];
        read_exact_or_format(&mut r, &mut u16buf, "name length")?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or_format(&mut r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("tensor {k}: name is not UTF-8")))?;
        let mut u64buf = [0u8; 8];
        read_exact_or_format(&mut r, &mut u64buf, "row count")?;
        let rows = u64::from_le_bytes(u64buf) as usize;
        read_exact_or_format(&mut r, &mut u64buf, "column count")?;
        let cols = u64::from_le_bytes(u64buf) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            read_exact_or_format(&mut r, &mut u64buf, &format!("values of {name}"))?;
            data.push(f64::from_le_bytes(u64buf));
        }
        out.push((name, Mat::from_vec(rows, cols, data)));
    }
    Ok(out)
}
