use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Modality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Item {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Item {
    pub fn modality(&self) -> Modality {
        match self {
            Item::Discrete(_) => Modality::Discrete,
            Item::Continuous(_) => Modality::Continuous,
        }
    }
}

/// Mixed token sequence with a per-position modality mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedSequence {
    items: Vec<Item>,
    mask: Vec<Modality>,
    vocab: usize,
    width: usize,
}

impl PackedSequence {
    pub fn empty(vocab: usize, width: usize) -> Self {
        Self {
            items: Vec::new(),
            mask: Vec::new(),
            vocab,
            width,
        }
    }

    pub fn from_items(items: Vec<Item>, vocab: usize, width: usize) -> Result<Self> {
        let mut s = Self::empty(vocab, width);
        for it in items {
            s.push(it)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, item: Item) -> Result<()> {
        match &item {
            Item::Discrete(id) if *id >= self.vocab => {
                return Err(Error::TokenOutOfRange {
                    id: *id,
                    vocab: self.vocab,
                })
            }
            Item::Continuous(v) if v.len() != self.width => {
                return Err(Error::shape("continuous token", &[v.len()], &[self.width]))
            }
            _ => {}
        }
        self.mask.push(item.modality());
        self.items.push(item);
        Ok(())
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn modality_mask(&self) -> &[Modality] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn truncate(&mut self, len: usize) {
        self.items.truncate(len);
        self.mask.truncate(len);
    }

    /// Discrete ids and continuous vectors in order of appearance.
    pub fn unpack(&self) -> (Vec<usize>, Vec<Vec<f64>>) {
        let mut ids = Vec::new();
        let mut vecs = Vec::new();
        for it in &self.items {
            match it {
                Item::Discrete(id) => ids.push(*id),
                Item::Continuous(v) => vecs.push(v.clone()),
            }
        }
        (ids, vecs)
    }
}

/// Discrete block first, then the continuous block.
pub fn pack_tokens(
    discrete: &[usize],
    continuous: &[Vec<f64>],
    vocab: usize,
    width: usize,
) -> Result<PackedSequence> {
    let items = discrete
        .iter()
        .map(|&id| Item::Discrete(id))
        .chain(continuous.iter().map(|v| Item::Continuous(v.clone())))
        .collect();
    PackedSequence::from_items(items, vocab, width)
}
