//! Client updates, their wire encoding and server-side aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};
use crate::tensor::Tensor;
use crate::wire::{self, Container};

/// Reserved tensor name carrying the sample count on the wire.
pub const SAMPLE_COUNT: &str = "@sample_count";

/// Encoder and decoder parameters uploaded by one client after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelUpdate {
    pub client_id: u32,
    pub round_index: u32,
    pub tensors: Vec<(String, Tensor)>,
    /// Informational; aggregation is unweighted.
    pub sample_count: u64,
}

impl ModelUpdate {
    pub fn bit_eq(&self, other: &ModelUpdate) -> bool {
        self.sample_count == other.sample_count && self.to_container().bit_eq(&other.to_container())
    }

    fn to_container(&self) -> Container {
        let mut tensors = self.tensors.clone();
        tensors.push((SAMPLE_COUNT.into(), Tensor::scalar(self.sample_count as f64)));
        Container {
            round_index: self.round_index,
            client_id: self.client_id,
            tensors,
        }
    }
}

pub fn serialize_update(u: &ModelUpdate) -> Result<Vec<u8>> {
    if let Some((name, _)) = u.tensors.iter().find(|(n, _)| n.starts_with('@')) {
        return Err(Error::Input(format!("tensor name `{name}` uses the reserved `@` prefix")));
    }
    if u.sample_count > (1u64 << 53) {
        return Err(Error::Input("sample count too large".into()));
    }
    wire::encode(&u.to_container())
}

pub fn deserialize_update(bytes: &[u8]) -> Result<ModelUpdate, ParseError> {
    let c = wire::decode(bytes)?;
    let mut sample_count = None;
    let mut tensors = Vec::with_capacity(c.tensors.len());
    for (name, t) in c.tensors {
        if name == SAMPLE_COUNT {
            let v = t.data().first().copied().unwrap_or(f64::NAN);
            if t.rank() != 0 || !(v >= 0.0 && v.fract() == 0.0 && v <= (1u64 << 53) as f64) {
                return Err(ParseError::Shape {
                    name,
                    dims: t.shape().iter().map(|&d| d as u32).collect(),
                });
            }
            sample_count = Some(v as u64);
        } else {
            tensors.push((name, t));
        }
    }
    Ok(ModelUpdate {
        client_id: c.client_id,
        round_index: c.round_index,
        tensors,
        sample_count: sample_count.unwrap_or(0),
    })
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summation {
    /// Plain left-to-right sum in client order.
    Naive,
    /// Differences from the lowest client's value, Neumaier-summed.
    #[default]
    Compensated,
}

/// Neumaier's compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in values {
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

/// Unweighted elementwise mean of every named parameter over all updates,
/// taken in ascending client order. With compensated summation the mean is
/// `x₀ + Σ(xᵢ − x₀)/N` where `x₀` belongs to the lowest client, so identical
/// inputs reproduce themselves exactly.
pub fn aggregate(updates: &[ModelUpdate], summation: Summation) -> Result<Vec<(String, Tensor)>> {
    let mut sorted: Vec<&ModelUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let (first, rest) = sorted
        .split_first()
        .ok_or_else(|| Error::Input("aggregate needs at least one update".into()))?;
    let lookups: Vec<BTreeMap<&str, &Tensor>> = rest
        .iter()
        .map(|u| u.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect())
        .collect();
    for (u, map) in rest.iter().zip(&lookups) {
        if map.len() != first.tensors.len() {
            return Err(Error::Contract(format!(
                "client {} sent {} tensors, client {} sent {}",
                u.client_id,
                map.len(),
                first.client_id,
                first.tensors.len()
            )));
        }
    }

    let n = sorted.len() as f64;
    let mut out = Vec::with_capacity(first.tensors.len());
    for (name, reference) in &first.tensors {
        let mut others = Vec::with_capacity(rest.len());
        for (u, map) in rest.iter().zip(&lookups) {
            let t = map
                .get(name.as_str())
                .ok_or_else(|| Error::Contract(format!("parameter `{name}` missing from client {}", u.client_id)))?;
            if t.shape() != reference.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` has shape {:?} at client {} but {:?} at client {}",
                    t.shape(),
                    u.client_id,
                    reference.shape(),
                    first.client_id
                )));
            }
            others.push(*t);
        }
        let data = (0..reference.numel())
            .map(|j| {
                let x0 = reference.data()[j];
                match summation {
                    Summation::Naive => others.iter().fold(x0, |acc, t| acc + t.data()[j]) / n,
                    Summation::Compensated => x0 + compensated_sum(others.iter().map(|t| t.data()[j] - x0)) / n,
                }
            })
            .collect();
        out.push((name.clone(), Tensor::new(reference.shape().to_vec(), data)?));
    }
    Ok(out)
}
