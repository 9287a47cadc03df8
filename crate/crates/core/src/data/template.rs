//! Masked-entity templates.
//!
//! Pretraining: `[CLS] <description> is the description of [MASK] [SEP]`
//! Reasoning:   `[CLS] <head> <head description> [SEP] <relation> [SEP] [MASK] [SEP]`

use super::vocab::{CLS, MASK, NO_DESCRIPTION, SEP};
use super::{EntityId, MultimodalKG, RelationId, Vocabulary};
use crate::error::{Error, Result};

pub const PRETRAIN_PHRASE: [&str; 4] = ["is", "the", "description", "of"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedQuery {
    pub token_ids: Vec<usize>,
    pub mask_pos: usize,
    /// Position of the head-entity token; absent for pretraining templates.
    pub head_entity_pos: Option<usize>,
    /// Entity to predict at `mask_pos`; unset at inference time.
    pub target: Option<EntityId>,
    /// Entity whose structural row and images accompany the query: the head
    /// for reasoning templates, the described entity for pretraining.
    pub anchor: EntityId,
    pub relation: Option<RelationId>,
}

impl TokenizedQuery {
    /// Checks that the recorded positions point at the claimed tokens.
    pub fn check(&self, vocab: &Vocabulary) -> Result<()> {
        if self.token_ids.get(self.mask_pos) != Some(&MASK) {
            return Err(Error::Format(format!("mask_pos {} is not [MASK]", self.mask_pos)));
        }
        if let Some(p) = self.head_entity_pos {
            if self.token_ids.get(p).and_then(|&t| vocab.token_entity(t)) != Some(self.anchor) {
                return Err(Error::Format(format!("head_entity_pos {p} is not the head entity token")));
            }
        }
        Ok(())
    }
}

fn description_tokens(e: EntityId, mkg: &MultimodalKG, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let attr = mkg.text.get(e.0).ok_or_else(|| Error::Lookup {
        kind: "entity",
        name: e.0.to_string(),
    })?;
    if attr.is_missing() {
        return Ok(vec![vocab.word(NO_DESCRIPTION)?]);
    }
    attr.words.iter().map(|w| vocab.word(w)).collect()
}

pub fn build_pretrain_template(e: EntityId, mkg: &MultimodalKG, vocab: &Vocabulary) -> Result<TokenizedQuery> {
    let mut ids = vec![CLS];
    ids.extend(description_tokens(e, mkg, vocab)?);
    for w in PRETRAIN_PHRASE {
        ids.push(vocab.word(w)?);
    }
    let mask_pos = ids.len();
    ids.push(MASK);
    ids.push(SEP);
    Ok(TokenizedQuery {
        token_ids: ids,
        mask_pos,
        head_entity_pos: None,
        target: Some(e),
        anchor: e,
        relation: None,
    })
}

pub fn build_reason_template(
    head: EntityId,
    relation: RelationId,
    tail: Option<EntityId>,
    mkg: &MultimodalKG,
    vocab: &Vocabulary,
) -> Result<TokenizedQuery> {
    if relation.0 >= mkg.num_relations() {
        return Err(Error::Lookup {
            kind: "relation",
            name: relation.0.to_string(),
        });
    }
    let mut ids = vec![CLS, vocab.entity_token(head)];
    ids.extend(description_tokens(head, mkg, vocab)?);
    ids.push(SEP);
    ids.push(vocab.relation_token(relation));
    ids.push(SEP);
    let mask_pos = ids.len();
    ids.push(MASK);
    ids.push(SEP);
    Ok(TokenizedQuery {
        token_ids: ids,
        mask_pos,
        head_entity_pos: Some(1),
        target: tail,
        anchor: head,
        relation: Some(relation),
    })
}
