use std::collections::{BTreeSet, HashMap};

use super::{EntityId, MultimodalKG, RelationId};
use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
const SPECIALS: [&str; 3] = ["[CLS]", "[SEP]", "[MASK]"];

/// Word token standing in for a missing description.
pub const NO_DESCRIPTION: &str = "[NODESC]";

/// Token ids, laid out as four disjoint contiguous ranges:
/// specials, one token per entity, one per relation, then words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    words: HashMap<String, usize>,
    num_entities: usize,
    num_relations: usize,
}

/// Specials, entity and relation tokens, and every description word (sorted,
/// deduplicated).
pub fn build_vocabulary(mkg: &MultimodalKG) -> Vocabulary {
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(mkg.entity_names.iter().map(|n| format!("[ENT:{n}]")));
    tokens.extend(mkg.relation_names.iter().map(|n| format!("[REL:{n}]")));
    let mut vocab = Vocabulary {
        tokens,
        words: HashMap::new(),
        num_entities: mkg.num_entities(),
        num_relations: mkg.num_relations(),
    };
    let words: BTreeSet<&str> = mkg.text.iter().flat_map(|t| t.words.iter().map(String::as_str)).collect();
    for w in words {
        vocab.add_word(w);
    }
    vocab
}

impl Vocabulary {
    /// [`build_vocabulary`] plus the words of the pretraining phrase and the
    /// missing-description placeholder: everything the templates can emit.
    pub fn for_templates(mkg: &MultimodalKG) -> Self {
        let mut vocab = build_vocabulary(mkg);
        for w in super::PRETRAIN_PHRASE {
            vocab.add_word(w);
        }
        vocab.add_word(NO_DESCRIPTION);
        vocab
    }

    /// Interns a word token; returns its id.
    pub fn add_word(&mut self, word: &str) -> usize {
        if let Some(&id) = self.words.get(word) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(word.to_string());
        self.words.insert(word.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn entity_offset(&self) -> usize {
        SPECIALS.len()
    }

    pub fn relation_offset(&self) -> usize {
        SPECIALS.len() + self.num_entities
    }

    pub fn word_offset(&self) -> usize {
        self.relation_offset() + self.num_relations
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_words(&self) -> usize {
        self.tokens.len() - self.word_offset()
    }

    pub fn entity_token(&self, e: EntityId) -> usize {
        debug_assert!(e.0 < self.num_entities);
        self.entity_offset() + e.0
    }

    pub fn relation_token(&self, r: RelationId) -> usize {
        debug_assert!(r.0 < self.num_relations);
        self.relation_offset() + r.0
    }

    /// The entity a token stands for, if it is an entity token.
    pub fn token_entity(&self, token: usize) -> Option<EntityId> {
        (self.entity_offset()..self.relation_offset())
            .contains(&token)
            .then(|| EntityId(token - self.entity_offset()))
    }

    pub fn word(&self, word: &str) -> Result<usize> {
        self.words.get(word).copied().ok_or_else(|| Error::Lookup {
            kind: "word",
            name: word.to_string(),
        })
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Surface form: tokens joined by single spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let parts = ids
            .iter()
            .map(|&id| {
                self.token(id).ok_or_else(|| Error::Lookup {
                    kind: "token id",
                    name: id.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.join(" "))
    }

    /// Inverse of [`Vocabulary::decode`] for strings made of known tokens.
    pub fn encode(&self, surface: &str) -> Result<Vec<usize>> {
        surface
            .split_whitespace()
            .map(|tok| {
                if let Some(id) = SPECIALS.iter().position(|s| *s == tok) {
                    return Ok(id);
                }
                if let Some(&id) = self.words.get(tok) {
                    return Ok(id);
                }
                self.tokens[SPECIALS.len()..self.word_offset()]
                    .iter()
                    .position(|t| t == tok)
                    .map(|i| i + SPECIALS.len())
                    .ok_or_else(|| Error::Lookup {
                        kind: "token",
                        name: tok.to_string(),
                    })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{TextAttribute, VisualAttribute};

    fn mkg(descs: &[&str]) -> MultimodalKG {
        MultimodalKG {
            entity_names: (0..descs.len()).map(|i| format!("e{i}")).collect(),
            relation_names: vec!["r".into()],
            train: vec![],
            dev: vec![],
            test: vec![],
            text: descs.iter().map(|d| TextAttribute::from_text(d)).collect(),
            visual: vec![VisualAttribute::Missing; descs.len()],
        }
    }

    #[test]
    fn two_entities_one_relation_three_words() {
        let vocab = build_vocabulary(&mkg(&["a b", "b c"]));
        assert_eq!(vocab.len(), 9);
        assert_eq!(vocab.num_words(), 3);
    }

    #[test]
    fn no_text_means_only_structural_tokens() {
        let vocab = build_vocabulary(&mkg(&["", ""]));
        assert_eq!(vocab.len(), 3 + 2 + 1);
    }

    #[test]
    fn repeated_word_has_one_token() {
        let vocab = build_vocabulary(&mkg(&["x x", "x"]));
        assert_eq!(vocab.num_words(), 1);
    }

    #[test]
    fn ranges_are_disjoint_and_round_trip() {
        let vocab = Vocabulary::for_templates(&mkg(&["a b", "b c"]));
        assert_eq!(vocab.entity_token(EntityId(1)), 4);
        assert_eq!(vocab.relation_token(RelationId(0)), 5);
        assert!(vocab.word("a").unwrap() >= vocab.word_offset());
        assert_eq!(vocab.token_entity(4), Some(EntityId(1)));
        assert_eq!(vocab.token_entity(5), None);
        let ids: Vec<usize> = (0..vocab.len()).collect();
        let surface = vocab.decode(&ids).unwrap();
        assert_eq!(vocab.encode(&surface).unwrap(), ids);
    }
}
