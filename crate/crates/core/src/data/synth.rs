//! Seeded synthetic multimodal KGs with a tunable structural signal.
//!
//! Entities are placed on a `W x ⌈N/W⌉` grid (random placement). Each
//! relation is a fixed grid shift `(dx, dy)`: with probability `s` a triple
//! follows the shift rule, otherwise head and tail are uniform. The rule is
//! compositional, so translation-style embeddings can recover held-out
//! triples from the training graph alone.
//!
//! Every description contains the entity's identity word (replaced by a
//! random other identity word with probability `text_noise`) followed by
//! filler words. Each image is the entity's Gaussian prototype plus
//! `vision_noise`-scaled Gaussian noise.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EntityId, MultimodalKG, RelationId, TextAttribute, Triple, VisualAttribute};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_triples: usize,
    /// Probability that a triple follows the relation rule.
    pub structure_signal: f64,
    pub text_noise: f64,
    pub vision_noise: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub filler_vocab: usize,
    pub filler_per_description: usize,
    pub images_per_entity: usize,
    pub patches: usize,
    pub patch_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_entities: 200,
            num_relations: 24,
            num_triples: 3000,
            structure_signal: 0.9,
            text_noise: 0.3,
            vision_noise: 1.0,
            dev_fraction: 0.05,
            test_fraction: 0.1,
            filler_vocab: 20,
            filler_per_description: 2,
            images_per_entity: 2,
            patches: 4,
            patch_dim: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_entities < 2 || self.num_relations == 0 {
            return bad("synthetic KG needs at least 2 entities and 1 relation".into());
        }
        let capacity = (self.num_entities as u128).pow(2) * self.num_relations as u128;
        if self.num_triples as u128 > capacity {
            return bad(format!(
                "{} triples requested but only N²·R = {capacity} distinct triples exist",
                self.num_triples
            ));
        }
        for (name, v) in [
            ("structure_signal", self.structure_signal),
            ("text_noise", self.text_noise),
            ("dev_fraction", self.dev_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.dev_fraction + self.test_fraction >= 1.0 {
            return bad("dev_fraction + test_fraction must be < 1".into());
        }
        if !(self.vision_noise >= 0.0 && self.vision_noise.is_finite()) {
            return bad("vision_noise must be finite and non-negative".into());
        }
        if self.images_per_entity == 0 || self.patches == 0 || self.patch_dim == 0 {
            return bad("image count, patches and patch_dim must be positive".into());
        }
        Ok(())
    }
}

/// The relational rule behind a synthetic KG.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridRule {
    width: usize,
    cell_of: Vec<usize>,
    entity_at: Vec<usize>,
    shifts: Vec<(i64, i64)>,
}

impl GridRule {
    pub fn new(num_entities: usize, num_relations: usize, rng: &mut impl Rng) -> Self {
        let width = (num_entities as f64).sqrt().ceil() as usize;
        let mut entity_at: Vec<usize> = (0..num_entities).collect();
        entity_at.shuffle(rng);
        let mut cell_of = vec![0; num_entities];
        for (cell, &e) in entity_at.iter().enumerate() {
            cell_of[e] = cell;
        }
        let mut shifts = Vec::with_capacity(num_relations);
        let mut radius = 1i64;
        while shifts.len() < num_relations {
            let mut ring: Vec<(i64, i64)> = (-radius..=radius)
                .flat_map(|dx| (-radius..=radius).map(move |dy| (dx, dy)))
                .filter(|&(dx, dy)| dx.abs().max(dy.abs()) == radius)
                .collect();
            ring.shuffle(rng);
            shifts.extend(ring.into_iter().take(num_relations - shifts.len()));
            radius += 1;
        }
        GridRule {
            width,
            cell_of,
            entity_at,
            shifts,
        }
    }

    pub fn shift(&self, r: RelationId) -> (i64, i64) {
        self.shifts[r.0]
    }

    /// Grid coordinates `(x, y)` of an entity.
    pub fn position(&self, e: EntityId) -> (i64, i64) {
        let cell = self.cell_of[e.0];
        ((cell % self.width) as i64, (cell / self.width) as i64)
    }

    /// The rule's tail for `(h, r)`, if the shifted cell exists.
    pub fn tail(&self, h: EntityId, r: RelationId) -> Option<EntityId> {
        let (x, y) = self.position(h);
        let (dx, dy) = self.shifts[r.0];
        let (nx, ny) = (x + dx, y + dy);
        if nx < 0 || ny < 0 || nx >= self.width as i64 {
            return None;
        }
        let cell = ny as usize * self.width + nx as usize;
        self.entity_at.get(cell).map(|&e| EntityId(e))
    }
}

/// Generates a dataset and the rule it was drawn from. Pure in `(cfg, seed)`.
pub fn generate_synthetic_mkg(cfg: &SynthConfig, seed: u64) -> Result<(MultimodalKG, GridRule)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, r) = (cfg.num_entities, cfg.num_relations);
    let rule = GridRule::new(n, r, &mut rng);

    let valid_heads: Vec<Vec<usize>> = (0..r)
        .map(|rel| (0..n).filter(|&h| rule.tail(EntityId(h), RelationId(rel)).is_some()).collect())
        .collect();

    // The coin decides the kind of each triple; duplicates are redrawn within
    // that kind so the rule share stays at `structure_signal`.
    const MAX_REDRAWS: usize = 10_000;
    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(cfg.num_triples);
    while triples.len() < cfg.num_triples {
        let follow_rule = rng.random::<f64>() < cfg.structure_signal;
        let mut drawn = None;
        for _ in 0..MAX_REDRAWS {
            let rel = rng.random_range(0..r);
            let triple = if follow_rule {
                if valid_heads[rel].is_empty() {
                    continue;
                }
                let h = valid_heads[rel][rng.random_range(0..valid_heads[rel].len())];
                let t = rule.tail(EntityId(h), RelationId(rel)).expect("valid head");
                Triple::new(h, rel, t.0)
            } else {
                Triple::new(rng.random_range(0..n), rel, rng.random_range(0..n))
            };
            if seen.insert(triple) {
                drawn = Some(triple);
                break;
            }
        }
        match drawn {
            Some(t) => triples.push(t),
            None => {
                let kind = if follow_rule { "rule" } else { "uniform" };
                return Err(Error::Config(format!(
                    "ran out of distinct {kind} triples after {} of {}; lower num_triples or raise num_relations",
                    triples.len(),
                    cfg.num_triples
                )));
            }
        }
    }
    triples.shuffle(&mut rng);
    let n_test = (cfg.test_fraction * triples.len() as f64).round() as usize;
    let n_dev = (cfg.dev_fraction * triples.len() as f64).round() as usize;
    let test = triples.split_off(triples.len() - n_test);
    let dev = triples.split_off(triples.len() - n_dev);
    let train = triples;

    let text = (0..n)
        .map(|e| {
            let identity = if rng.random::<f64>() < cfg.text_noise {
                let mut other = rng.random_range(0..n - 1);
                if other >= e {
                    other += 1;
                }
                other
            } else {
                e
            };
            let mut words = vec![format!("id{identity}")];
            for _ in 0..cfg.filler_per_description {
                words.push(format!("w{}", rng.random_range(0..cfg.filler_vocab.max(1))));
            }
            TextAttribute { words }
        })
        .collect();

    let gaussian = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
    let cells = cfg.patches * cfg.patch_dim;
    let visual = (0..n)
        .map(|_| {
            let prototype = gaussian(&mut rng, cells);
            let images = (0..cfg.images_per_entity)
                .map(|_| {
                    let noise = gaussian(&mut rng, cells);
                    let data = prototype.iter().zip(noise).map(|(p, z)| p + cfg.vision_noise * z).collect();
                    Tensor::from_matrix(cfg.patches, cfg.patch_dim, data).expect("patch shape")
                })
                .collect();
            VisualAttribute::Images(images)
        })
        .collect();

    let mkg = MultimodalKG {
        entity_names: (0..n).map(|e| format!("e{e}")).collect(),
        relation_names: (0..r).map(|k| format!("r{k}")).collect(),
        train,
        dev,
        test,
        text,
        visual,
    };
    mkg.validate()?;
    Ok((mkg, rule))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(s: f64) -> SynthConfig {
        SynthConfig {
            num_entities: 50,
            num_relations: 6,
            num_triples: 200,
            structure_signal: s,
            text_noise: 0.0,
            vision_noise: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn full_signal_determines_every_tail() {
        let (mkg, rule) = generate_synthetic_mkg(&small(1.0), 7).unwrap();
        for t in mkg.all_triples() {
            assert_eq!(rule.tail(t.head, t.relation), Some(t.tail));
        }
    }

    #[test]
    fn rule_share_tracks_structure_signal_near_capacity() {
        let cfg = SynthConfig::default();
        let (mkg, rule) = generate_synthetic_mkg(&cfg, 0).unwrap();
        let all: Vec<_> = mkg.all_triples().collect();
        let on_rule = all.iter().filter(|t| rule.tail(t.head, t.relation) == Some(t.tail)).count();
        let share = on_rule as f64 / all.len() as f64;
        assert!((share - cfg.structure_signal).abs() < 0.03, "rule share {share}");
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_synthetic_mkg(&small(0.5), 3).unwrap();
        let b = generate_synthetic_mkg(&small(0.5), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_mkg(&small(0.5), 4).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn infeasible_triple_count_is_a_config_error() {
        let cfg = SynthConfig {
            num_entities: 3,
            num_relations: 1,
            num_triples: 10,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic_mkg(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rule_capacity_shortfall_is_a_config_error() {
        // With s = 1 only rule triples exist: at most N per relation.
        let cfg = SynthConfig {
            num_entities: 10,
            num_relations: 1,
            num_triples: 50,
            structure_signal: 1.0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic_mkg(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn splits_have_the_configured_sizes() {
        let cfg = small(0.8);
        let (mkg, _) = generate_synthetic_mkg(&cfg, 1).unwrap();
        assert_eq!(mkg.test.len(), 20);
        assert_eq!(mkg.dev.len(), 10);
        assert_eq!(mkg.train.len(), 170);
        mkg.validate().unwrap();
    }

    #[test]
    fn noise_free_descriptions_name_their_entity() {
        let (mkg, _) = generate_synthetic_mkg(&small(1.0), 2).unwrap();
        for (e, t) in mkg.text.iter().enumerate() {
            assert_eq!(t.words[0], format!("id{e}"));
        }
    }

    #[test]
    fn relation_shifts_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rule = GridRule::new(30, 20, &mut rng);
        let shifts: HashSet<_> = (0..20).map(|r| rule.shift(RelationId(r))).collect();
        assert_eq!(shifts.len(), 20);
    }
}
