//! Named parameter storage shared by all models.
//!
//! Parameters live outside any graph and are bound as leaves per forward
//! pass. Storage is a plain ordered `Vec`, so iteration order (and with it
//! every optimizer update and checkpoint layout) is deterministic.

use std::collections::HashMap;

use crate::diffcore::real::Real;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param<R: Real = f32> {
    pub name: String,
    pub value: Tensor<R>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamSet<R: Real = f32> {
    params: Vec<Param<R>>,
    by_name: HashMap<String, usize>,
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a parameter; names must be unique. Returns its slot.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<R>) -> usize {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let slot = self.params.len();
        self.by_name.insert(name.clone(), slot);
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        slot
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Param<R> {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Param<R> {
        &mut self.params[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.params.iter()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Fresh zeroed gradient store, one (possibly empty) buffer per slot.
    /// Buffers are lazily sized by `Graph::accumulate_param_grads`.
    pub fn zero_grads(&self) -> Vec<Vec<R>> {
        vec![Vec::new(); self.params.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Overwrite values from another set matched by name; shapes must agree.
    /// Parameters of `self` missing in `other` are left untouched, which is
    /// how a finetune model adopts a pretrained encoder while keeping its
    /// fresh head.
    pub fn load_matching(&mut self, other: &ParamSet<R>) -> Result<usize> {
        let mut loaded = 0;
        for p in &mut self.params {
            if let Some(&slot) = other.by_name.get(&p.name) {
                let src = &other.params[slot].value;
                if src.shape() != p.value.shape() {
                    return Err(Error::shape(format!(
                        "parameter {}: checkpoint shape {:?} vs model shape {:?}",
                        p.name,
                        src.shape(),
                        p.value.shape()
                    )));
                }
                p.value = src.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn cast<S: Real>(&self) -> ParamSet<S> {
        let mut out = ParamSet::new();
        for p in &self.params {
            let slot = out.register(p.name.clone(), p.value.cast::<S>());
            out.params[slot].trainable = p.trainable;
        }
        out
    }
}
