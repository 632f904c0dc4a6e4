//! Trainable parameters and the visitor trait used to enumerate them by name.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter, used to find its gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

/// A trainable tensor.
#[derive(Debug)]
pub struct Param<T> {
    id: ParamId,
    value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param {
            id: ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

impl<T: Clone> Clone for Param<T> {
    /// A clone is a distinct parameter with a fresh identity.
    fn clone(&self) -> Self {
        Param {
            id: ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
            value: self.value.clone(),
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything holding named parameters and (optionally) non-trainable buffers.
pub trait Module<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));

    /// Non-trainable state such as batch-norm running statistics.
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(String, &Tensor<T>)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Tensor<T>)) {}

    /// Number of trainable scalars.
    fn count_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _| names.push(name));
        names
    }
}

/// A flat list of named parameters; handy as a gradient-check target.
#[derive(Debug, Default)]
pub struct ParamSet<T> {
    pub entries: Vec<(String, Param<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, value: Tensor<T>) -> usize {
        self.entries.push((name.to_string(), Param::new(value)));
        self.entries.len() - 1
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.entries[i].1
    }
}

impl<T: Scalar> Module<T> for ParamSet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        for (name, p) in &self.entries {
            f(join(prefix, name), p);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (name, p) in &mut self.entries {
            f(join(prefix, name), p);
        }
    }
}
