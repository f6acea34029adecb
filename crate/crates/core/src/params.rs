//! Named parameter storage and seeded initialization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Shape, Tensor};

/// Learnable tensors receive gradients and count toward the parameter total;
/// buffers (batch-norm running statistics) do neither.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EntryKind {
    Learnable,
    Buffer,
}

impl EntryKind {
    pub fn code(self) -> u8 {
        match self {
            EntryKind::Learnable => 0,
            EntryKind::Buffer => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EntryKind::Learnable),
            1 => Some(EntryKind::Buffer),
            _ => None,
        }
    }
}

/// How a declared tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) with samples beyond two standard deviations redrawn.
    TruncNormal(f64),
    Zeros,
    Ones,
}

pub const WEIGHT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub kind: EntryKind,
    pub init: Init,
}

/// Named map of tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, (EntryKind, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    /// Materializes declarations. Each tensor draws from its own stream seeded
    /// by `(seed, name)`, so adding or removing a layer leaves every other
    /// tensor's initial value unchanged.
    pub fn from_decls(decls: &[ParamDecl], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        for d in decls {
            if store.contains(&d.name) {
                return Err(Error::Config(format!("parameter `{}` declared twice", d.name)));
            }
            store.insert(&d.name, d.kind, init_tensor(d, seed));
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, kind: EntryKind, tensor: Tensor<T>) {
        self.entries.insert(name.to_string(), (kind, tensor));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not in store")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not in store")))
    }

    pub fn kind(&self, name: &str) -> Option<EntryKind> {
        self.entries.get(name).map(|(k, _)| *k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, EntryKind, &Tensor<T>)> {
        self.entries.iter().map(|(n, (k, t))| (n.as_str(), *k, t))
    }

    pub fn learnable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, k, _)| *k == EntryKind::Learnable)
            .map(|(n, _, t)| (n, t))
    }

    pub fn learnable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .filter(|(_, (k, _))| *k == EntryKind::Learnable)
            .map(|(n, (_, t))| (n.as_str(), t))
    }

    /// Exact count of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.learnable().map(|(_, t)| t.numel()).sum()
    }

    /// Copies every tensor whose name starts with `prefix`, stripping the prefix.
    pub fn sub_store(&self, prefix: &str) -> ParamStore<T> {
        let dotted = format!("{prefix}.");
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, e)| n.strip_prefix(&dotted).map(|rest| (rest.to_string(), e.clone())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, (k, t))| (n.clone(), (*k, t.cast())))
                .collect(),
        }
    }
}

/// `prefix.name`, or `name` when the prefix is empty.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn init_tensor<T: Scalar>(decl: &ParamDecl, seed: u64) -> Tensor<T> {
    match decl.init {
        Init::Zeros => Tensor::zeros(decl.shape),
        Init::Ones => Tensor::full(decl.shape, T::one()),
        Init::TruncNormal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(decl.name.as_bytes()));
            let data = (0..numel(&decl.shape))
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break T::of(z * std);
                    }
                })
                .collect();
            Tensor::from_vec(decl.shape, data).expect("declared shape")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decl(name: &str, init: Init) -> ParamDecl {
        ParamDecl {
            name: name.into(),
            shape: [4, 3, 3, 3],
            kind: EntryKind::Learnable,
            init,
        }
    }

    #[test]
    fn truncated_normal_respects_two_sigma() {
        let t: Tensor<f64> = init_tensor(&decl("w", Init::TruncNormal(0.02)), 1);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        assert!(t.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn streams_are_keyed_by_name() {
        let a: Tensor<f32> = init_tensor(&decl("a", Init::TruncNormal(1.0)), 3);
        let a2: Tensor<f32> = init_tensor(&decl("a", Init::TruncNormal(1.0)), 3);
        let b: Tensor<f32> = init_tensor(&decl("b", Init::TruncNormal(1.0)), 3);
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn buffers_do_not_count() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", EntryKind::Learnable, Tensor::zeros([2, 2, 1, 1]));
        s.insert("m", EntryKind::Buffer, Tensor::zeros([1, 2, 1, 1]));
        assert_eq!(s.count_params(), 4);
        assert!(matches!(s.get("x"), Err(Error::Lookup(_))));
    }

    #[test]
    fn duplicate_declarations_are_rejected() {
        let d = decl("w", Init::Zeros);
        assert!(ParamStore::<f32>::from_decls(&[d.clone(), d], 0).is_err());
    }
}
