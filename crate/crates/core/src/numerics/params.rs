use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::{Mat, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamGroup<T: Scalar = f32> {
    pub name: String,
    pub value: Mat<T>,
    pub trainable: bool,
}

/// Named parameter groups. Group order is insertion order and is part of the
/// checkpoint layout.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    seed: u64,
    groups: Vec<ParamGroup<T>>,
    index: HashMap<String, usize>,
}

/// How a freshly added group is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Plain normal with the given std (query embeddings).
    Normal(f64),
}

pub const PROJ_STD: f64 = 0.02;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream id derived from a seed and a list of integer keys.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn init_matrix<T: Scalar>(seed: u64, name: &str, rows: usize, cols: usize, init: Init) -> Mat<T> {
    match init {
        Init::Zeros => Mat::zeros(rows, cols),
        Init::Ones => Mat::filled(rows, cols, T::from_f64(1.0)),
        Init::TruncNormal(std) | Init::Normal(std) => {
            let stream = derive_seed(seed, &[fnv1a(name.as_bytes()), rows as u64, cols as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let truncate = matches!(init, Init::TruncNormal(_));
            let data = (0..rows * cols)
                .map(|_| loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if !truncate || z.abs() <= 2.0 {
                        break T::from_f64(z * std);
                    }
                })
                .collect();
            Mat::from_vec(rows, cols, data)
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { seed, groups: Vec::new(), index: HashMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        let value = init_matrix(self.seed, name, rows, cols, init);
        self.insert(name, value, true)
    }

    pub fn insert(&mut self, name: &str, value: Mat<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = self.groups.len();
        self.groups.push(ParamGroup { name: name.to_string(), value, trainable });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.groups[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.groups[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Mat<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn group(&self, id: ParamId) -> &ParamGroup<T> {
        &self.groups[id.0]
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.groups.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.groups[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.groups[id.0].trainable = trainable;
    }

    /// Sets the flag on every group whose name starts with `prefix`; returns
    /// how many groups matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for g in &mut self.groups {
            if g.name.starts_with(prefix) {
                g.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn num_values(&self) -> usize {
        self.groups.iter().map(|g| g.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup { name: g.name.clone(), value: g.value.cast(), trainable: g.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Bitwise equality of names, flags and values.
    pub fn bit_equal(&self, other: &ParamStore<T>) -> bool {
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| {
                a.name == b.name && a.trainable == b.trainable && a.value.shape() == b.value.shape() && {
                    a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
                }
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_pure_function_of_seed() {
        let mut a = ParamStore::<f32>::new(7);
        let mut b = ParamStore::<f32>::new(7);
        a.add("w", 4, 5, Init::TruncNormal(PROJ_STD)).unwrap();
        b.add("w", 4, 5, Init::TruncNormal(PROJ_STD)).unwrap();
        assert!(a.bit_equal(&b));
        let mut c = ParamStore::<f32>::new(8);
        c.add("w", 4, 5, Init::TruncNormal(PROJ_STD)).unwrap();
        assert!(!a.bit_equal(&c));
        assert!(a.by_name("w").unwrap().data().iter().all(|x| x.abs() <= 0.04 + 1e-7));
    }

    #[test]
    fn names_are_unique_and_lookups_fail_on_unknown() {
        let mut s = ParamStore::<f32>::new(0);
        s.add("b", 1, 3, Init::Zeros).unwrap();
        assert!(matches!(s.add("b", 1, 3, Init::Zeros), Err(Error::DuplicateParam(_))));
        assert!(matches!(s.id("nope"), Err(Error::UnknownParam(_))));
        s.add("g", 1, 3, Init::Ones).unwrap();
        assert_eq!(s.by_name("g").unwrap().data(), &[1.0, 1.0, 1.0]);
    }
}
