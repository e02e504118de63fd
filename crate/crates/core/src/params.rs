//! Named parameter storage, trainable-group partitions, gradient buffers.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::Scalar;

/// Parameter groups that training stages freeze or update as a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Vision,
    ReconDecoder,
    MlpConnector,
    DeepLens,
    Lm,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] =
        [Self::Vision, Self::ReconDecoder, Self::MlpConnector, Self::DeepLens, Self::Lm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vision => "vision",
            Self::ReconDecoder => "recon_decoder",
            Self::MlpConnector => "mlp_connector",
            Self::DeepLens => "deeplens",
            Self::Lm => "lm",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of trainable groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const NONE: GroupSet = GroupSet(0);

    pub fn of(groups: &[ParamGroup]) -> Self {
        Self(groups.iter().fold(0, |m, g| m | Self::bit(*g)))
    }

    fn bit(g: ParamGroup) -> u8 {
        1 << (g as u8)
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & Self::bit(g) != 0
    }

    pub fn groups(self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| self.contains(*g)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over the names and 32-bit little-endian values of one group.
    pub fn checksum(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for x in p.value.data() {
                h.update(x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksums(&self) -> BTreeMap<ParamGroup, String> {
        ParamGroup::ALL.into_iter().map(|g| (g, self.checksum(g))).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, value: p.value.cast() })
                .collect(),
        }
    }
}

/// Parameter store plus the set of groups that record gradients on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Bind<'a, T> {
    pub store: &'a ParamStore<T>,
    pub trainable: GroupSet,
}

impl<'a, T: Scalar> Bind<'a, T> {
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: GroupSet::NONE }
    }

    pub fn new(store: &'a ParamStore<T>, trainable: GroupSet) -> Self {
        Self { store, trainable }
    }

    pub fn var(&self, tape: &mut Tape<T>, id: ParamId) -> Result<Var, NumericsError> {
        let p = self.store.param(id);
        tape.param(id.0, &p.value, self.trainable.contains(p.group))
    }
}

/// Per-parameter gradient accumulators, summed in a fixed order.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(n_params: usize) -> Self {
        Self { slots: vec![None; n_params] }
    }

    pub fn accumulate(&mut self, tape: &Tape<T>) {
        for (id, g) in tape.param_grads() {
            match &mut self.slots[id] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a = *a + *b;
                    }
                }
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.slots.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x = *x * c;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0)?.as_deref()
    }

    pub fn present(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| {
                let v = x.to_f64().unwrap_or(0.0);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

pub fn normal<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

pub fn uniform<T: Scalar>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("shape")
}
