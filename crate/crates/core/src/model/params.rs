use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Frozen base weights of the encoder (patch embedding, blocks).
    EncoderBase,
    /// Decoder head weights.
    DecoderBase,
    /// Low-rank adapter factors.
    Lora,
}

/// Which parameters receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TuneScope {
    None,
    /// Every base weight, encoder and decoder.
    All,
    Encoder,
    Decoder,
    /// Only the adapter factors.
    Lora,
}

impl TuneScope {
    pub fn trains(self, kind: ParamKind) -> bool {
        match self {
            TuneScope::None => false,
            TuneScope::All => kind != ParamKind::Lora,
            TuneScope::Encoder => kind == ParamKind::EncoderBase,
            TuneScope::Decoder => kind == ParamKind::DecoderBase,
            TuneScope::Lora => kind == ParamKind::Lora,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TuneScope::None => "none",
            TuneScope::All => "all",
            TuneScope::Encoder => "encoder",
            TuneScope::Decoder => "decoder",
            TuneScope::Lora => "lora",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => TuneScope::None,
            "all" => TuneScope::All,
            "encoder" => TuneScope::Encoder,
            "decoder" => TuneScope::Decoder,
            "lora" => TuneScope::Lora,
            other => return Err(Error::Config(format!("unknown tuning scope `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Flat, ordered parameter storage shared by every layer of a network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self, scope: TuneScope) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| scope.trains(p.kind))
            .map(|(id, _)| id)
            .collect()
    }

    /// Total element count, optionally restricted to one kind.
    pub fn count(&self, kind: Option<ParamKind>) -> usize {
        self.params
            .iter()
            .filter(|p| kind.is_none_or(|k| p.kind == k))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Registers every parameter on `tape`; only those in `scope` require grad.
    pub fn bind(&self, tape: &mut Tape, scope: TuneScope) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), scope.trains(p.kind)))
            .collect();
        Bound { vars }
    }

    /// Same names, kinds and shapes in the same order.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::StructureMismatch(format!(
                "{} vs {} parameters",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::StructureMismatch(format!(
                    "{} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
