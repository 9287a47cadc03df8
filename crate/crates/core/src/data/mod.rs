//! Multimodal knowledge-graph data: ids, triples, attributes, file formats,
//! vocabulary, masked-entity templates and synthetic generation.

mod io;
mod synth;
mod template;
mod vocab;

use std::fmt;

use crate::tensor::Tensor;

pub use io::{
    load_dataset, load_descriptions, load_triples, load_triples_with, read_visual_features, save_dataset,
    write_triples, write_visual_features, Interner,
};
pub use synth::{generate_synthetic_mkg, GridRule, SynthConfig};
pub use template::{build_pretrain_template, build_reason_template, TokenizedQuery, PRETRAIN_PHRASE};
pub use vocab::{build_vocabulary, Vocabulary, CLS, MASK, NO_DESCRIPTION, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head.0, self.relation.0, self.tail.0)
    }
}

/// Whitespace-split description words. An empty list means the entity has no
/// description; templates then use the placeholder token.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TextAttribute {
    pub words: Vec<String>,
}

impl TextAttribute {
    pub fn from_text(text: &str) -> Self {
        TextAttribute {
            words: text.split_whitespace().map(str::to_owned).collect(),
        }
    }

    pub fn is_missing(&self) -> bool {
        self.words.is_empty()
    }
}

/// Pre-extracted image features: one `P x D_in` patch matrix per image.
#[derive(Clone, Debug, PartialEq)]
pub enum VisualAttribute {
    Images(Vec<Tensor>),
    /// No image available; the vision encoder substitutes a learned placeholder.
    Missing,
}

impl VisualAttribute {
    pub fn num_images(&self) -> usize {
        match self {
            VisualAttribute::Images(images) => images.len(),
            VisualAttribute::Missing => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// A multimodal knowledge graph with train/dev/test splits. Attribute vectors
/// are indexed by entity id and always cover every entity.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalKG {
    pub entity_names: Vec<String>,
    pub relation_names: Vec<String>,
    pub train: Vec<Triple>,
    pub dev: Vec<Triple>,
    pub test: Vec<Triple>,
    pub text: Vec<TextAttribute>,
    pub visual: Vec<VisualAttribute>,
}

impl MultimodalKG {
    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// `(patches, patch_dim)` shared by every image, if any image exists.
    pub fn patch_shape(&self) -> Option<(usize, usize)> {
        self.visual.iter().find_map(|v| match v {
            VisualAttribute::Images(images) => images.first().map(|m| (m.rows(), m.cols())),
            VisualAttribute::Missing => None,
        })
    }

    /// Checks ids, attribute coverage, split disjointness and patch shapes.
    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        let (n, r) = (self.num_entities(), self.num_relations());
        for t in self.all_triples() {
            if t.head.0 >= n || t.tail.0 >= n || t.relation.0 >= r {
                return Err(Error::Format(format!("triple {t} out of range (N={n}, R={r})")));
            }
        }
        if self.text.len() != n || self.visual.len() != n {
            return Err(Error::Format("attribute tables must cover every entity".into()));
        }
        let train: std::collections::HashSet<_> = self.train.iter().collect();
        let dev: std::collections::HashSet<_> = self.dev.iter().collect();
        for t in &self.dev {
            if train.contains(t) {
                return Err(Error::Format(format!("triple {t} is in train and dev")));
            }
        }
        for t in &self.test {
            if train.contains(t) || dev.contains(t) {
                return Err(Error::Format(format!("triple {t} appears in test and another split")));
            }
        }
        if let Some(shape) = self.patch_shape() {
            for v in &self.visual {
                if let VisualAttribute::Images(images) = v {
                    if images.is_empty() {
                        return Err(Error::Format("image list must not be empty".into()));
                    }
                    for m in images {
                        if (m.rows(), m.cols()) != shape {
                            return Err(Error::dim("visual features", &[shape.0, shape.1], m.shape()));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
