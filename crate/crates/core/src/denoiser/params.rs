use ndarray::{ArrayD, IxDyn, Zip};

use crate::error::{Error, Result};

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub(crate) fn at(&self, index: usize) -> &ArrayD<f64> {
        &self.entries[index].1
    }

    pub(crate) fn at_mut(&mut self, index: usize) -> &mut ArrayD<f64> {
        &mut self.entries[index].1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, a)| (n.clone(), ArrayD::zeros(a.raw_dim())))
                .collect(),
        }
    }

    /// True when names and shapes agree entry by entry.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    pub(crate) fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Usage("parameter sets have different layouts".into()))
        }
    }

    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_layout(other)?;
        for ((_, dst), (_, src)) in self.entries.iter_mut().zip(&other.entries) {
            dst.assign(src);
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        for (_, a) in &mut self.entries {
            a.fill(value);
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        self.check_layout(other)?;
        for ((_, dst), (_, src)) in self.entries.iter_mut().zip(&other.entries) {
            Zip::from(dst).and(src).for_each(|d, &s| *d += scale * s);
        }
        Ok(())
    }

    /// All values flattened in entry order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, a)| a.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::Shape {
                expected: vec![self.num_scalars()],
                got: vec![values.len()],
            });
        }
        let mut it = values.iter();
        for (_, a) in &mut self.entries {
            for v in a.iter_mut() {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.same_layout(other)
            && self.entries.iter().zip(&other.entries).all(|((_, a), (_, b))| {
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn from_entries(entries: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut out = ParamSet::new();
        for (name, shape, values) in entries {
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
                .map_err(|e| Error::format(format!("parameter {name}"), e))?;
            out.push(name, arr);
        }
        Ok(out)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}
