use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// The three freezable components of a multimodal model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    VisualEncoder,
    Projector,
    Llm,
}

impl GroupKind {
    pub const ALL: [GroupKind; 3] = [
        GroupKind::VisualEncoder,
        GroupKind::Projector,
        GroupKind::Llm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::VisualEncoder => "visual_encoder",
            GroupKind::Projector => "projector",
            GroupKind::Llm => "llm",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupKind::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown parameter group {s:?}")))
    }
}

/// Named tensors that are frozen or trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGroup<S = f64> {
    kind: GroupKind,
    params: Vec<(String, Tensor<S>)>,
    trainable: bool,
}

impl<S: Scalar> ParameterGroup<S> {
    pub fn new(kind: GroupKind) -> Self {
        ParameterGroup {
            kind,
            params: Vec::new(),
            trainable: false,
        }
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.as_str()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Contract(format!(
                "duplicate parameter {name:?} in group {}",
                self.kind
            )));
        }
        self.params.push((name, tensor));
        Ok(self.params.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, index: usize) -> &Tensor<S> {
        &self.params[index].1
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor<S> {
        &mut self.params[index].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| self.get(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) -> Result<()> {
        if trainable && self.kind == GroupKind::VisualEncoder {
            return Err(Error::Contract(
                "the visual encoder is always frozen".into(),
            ));
        }
        self.trainable = trainable;
        for (_, t) in &mut self.params {
            t.set_requires_grad(trainable);
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in &mut self.params {
            t.clear_grad();
        }
    }

    /// Bitwise equality of every parameter value.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut g = ParameterGroup::<f64>::new(GroupKind::Projector);
        g.push("w1", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(g.push("w1", Tensor::zeros(vec![1])).is_err());
        assert_eq!(g.num_scalars(), 4);
    }

    #[test]
    fn encoder_cannot_be_unfrozen() {
        let mut g = ParameterGroup::<f64>::new(GroupKind::VisualEncoder);
        assert!(g.set_trainable(true).is_err());
        assert!(g.set_trainable(false).is_ok());
    }

    #[test]
    fn group_names_round_trip() {
        for g in GroupKind::ALL {
            assert_eq!(g.as_str().parse::<GroupKind>().unwrap(), g);
        }
    }
}
