//! Named parameter storage and the Adam optimizer.

use crate::container::Container;
use crate::error::{shape_err, Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// Carried state such as running statistics; never differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered, named tensors belonging to one module. Entry order is stable and
/// doubles as the binding order on a tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            kind,
        });
        self.entries.len() - 1
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Puts every entry on the tape. Weights become trainable leaves when
    /// `trainable` is set; buffers are always constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                if trainable && e.kind == ParamKind::Weight {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.dims() == b.value.dims())
    }

    /// Writes every entry as `{prefix}{name}`.
    pub fn export(&self, out: &mut Container, prefix: &str) {
        for e in &self.entries {
            out.insert(format!("{prefix}{}", e.name), e.value.clone());
        }
    }

    /// Overwrites every entry from `{prefix}{name}` records, checking dims.
    pub fn import(&mut self, src: &Container, prefix: &str) -> Result<()> {
        for e in &mut self.entries {
            let name = format!("{prefix}{}", e.name);
            let t = src.require(&name)?;
            if t.dims() != e.value.dims() {
                return shape_err(format!(
                    "record `{name}` has dims {:?}, expected {:?}",
                    t.dims(),
                    e.value.dims()
                ));
            }
            e.value = t.clone();
        }
        Ok(())
    }

    /// Squared Euclidean distance between two stores with equal layouts.
    pub fn distance_sq(&self, other: &ParamStore) -> Result<f64> {
        if !self.same_layout(other) {
            return shape_err("parameter layouts differ");
        }
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
            .sum())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        let zeros = || -> Vec<Vec<f32>> {
            store.entries.iter().map(|e| vec![0.0; e.value.len()]).collect()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients of `vars`, the tape handles
    /// returned by [`ParamStore::bind`].
    pub fn step(&mut self, store: &mut ParamStore, vars: &[Var], grads: &Gradients) -> Result<()> {
        if vars.len() != store.entries.len() || self.m.len() != vars.len() {
            return Err(Error::Usage("optimizer bound to a different store".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (entry, var)) in store.entries.iter_mut().zip(vars).enumerate() {
            if entry.kind != ParamKind::Weight {
                continue;
            }
            let Some(g) = grads.get(*var) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in entry.value.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
