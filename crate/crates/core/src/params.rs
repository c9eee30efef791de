//! Named parameter store with deterministic, seed-pinned initialization.
//!
//! Model constructors receive a [`ParamBuilder`] scoped by dotted prefixes
//! (`enc.blocks.0.attn.q.weight`). Parameters are created in construction
//! order from one ChaCha stream, stored as `Var`s keyed by full name, and
//! iterated in name order by the optimizer and the checkpoint writer.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::rng::{normal_vec, uniform_vec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f32),
    Normal { std: f32 },
    Uniform { lo: f32, hi: f32 },
}

/// All learnable parameters of one model, keyed by dotted name.
#[derive(Debug, Default)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Name-ordered iteration; the optimizer and checkpoint writer rely on
    /// this order being stable.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total element count across all parameters.
    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Element count restricted to names starting with `prefix`.
    pub fn element_count_under(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrite parameter values by name, rejecting unknown names or shape
    /// mismatches. Names absent from `values` are left untouched.
    pub fn load(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in values {
            let var = self
                .vars
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
            if var.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, checkpoint has {:?}",
                    var.shape(),
                    t.shape()
                )));
            }
            var.set(t)?;
        }
        Ok(())
    }

    /// Snapshot all parameter values (detached copies).
    pub fn dump(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), var.as_tensor().copy()?);
        }
        Ok(out)
    }
}

struct BuildState {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

/// Prefix-scoped handle used while constructing a model.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuildState>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn new(rng: ChaCha8Rng, device: Device) -> Self {
        ParamBuilder {
            state: Rc::new(RefCell::new(BuildState {
                vars: BTreeMap::new(),
                rng,
                device,
            })),
            prefix: String::new(),
        }
    }

    /// Child builder under `prefix.name`.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            state: Rc::clone(&self.state),
            prefix,
        }
    }

    pub fn device(&self) -> Device {
        self.state.borrow().device.clone()
    }

    /// Create and register a parameter; returns a tensor view sharing the
    /// `Var`'s storage so gradients reach the registered variable.
    pub fn take(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut st = self.state.borrow_mut();
        if st.vars.contains_key(&full) {
            return Err(Error::msg(format!("duplicate parameter '{full}'")));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0f32; n],
            Init::Ones => vec![1.0f32; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => normal_vec(&mut st.rng, n, 0.0, std),
            Init::Uniform { lo, hi } => uniform_vec(&mut st.rng, n, lo, hi),
        };
        let t = Tensor::from_vec(data, shape, &st.device)?;
        let var = Var::from_tensor(&t)?;
        let view = var.as_tensor().clone();
        st.vars.insert(full, var);
        Ok(view)
    }

    /// Finish construction, returning the accumulated parameter set.
    pub fn finish(self) -> ParamSet {
        let state = Rc::try_unwrap(self.state)
            .map(|c| c.into_inner())
            .unwrap_or_else(|rc| {
                let b = rc.borrow();
                BuildState {
                    vars: b.vars.clone(),
                    rng: b.rng.clone(),
                    device: b.device.clone(),
                }
            });
        ParamSet { vars: state.vars }
    }
}
