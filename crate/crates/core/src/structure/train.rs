use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{KgeModel, ModelKind, StructuralEmbeddingTable, StructureEncoderConfig};
use crate::data::{EntityId, Triple};
use crate::error::{Error, Result};
use crate::eval::{Direction, EvalReport, FilterIndex, RankRecord};
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tensor};

/// A trained table together with its per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct TrainedStructure {
    pub table: StructuralEmbeddingTable,
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−ln σ(x)`, stable for large |x|.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn initialise(cfg: &StructureEncoderConfig, n: usize, r: usize, rng: &mut ChaCha8Rng) -> KgeModel {
    let d = cfg.dim;
    let w = cfg.kind.row_width(d);
    let range = (cfg.margin.max(1.0) + 2.0) / d as f64;
    let mut uniform = |len: usize, lo: f64, hi: f64| -> Vec<f64> { (0..len).map(|_| rng.random_range(lo..hi)).collect() };
    let (entities, relations) = match cfg.kind {
        ModelKind::TransE | ModelKind::DistMult => (uniform(n * w, -range, range), uniform(r * w, -range, range)),
        ModelKind::Hake => {
            let pi = std::f64::consts::PI;
            let mut ent = Vec::with_capacity(n * w);
            for _ in 0..n {
                ent.extend(uniform(d, -range, range));
                ent.extend(uniform(d, -pi, pi));
            }
            let mut rel = Vec::with_capacity(r * w);
            for _ in 0..r {
                rel.extend(uniform(d, 0.5, 1.5));
                rel.extend(uniform(d, -pi, pi));
            }
            (ent, rel)
        }
    };
    KgeModel {
        kind: cfg.kind,
        dim: d,
        phase_weight: cfg.phase_weight,
        entities: Tensor::from_matrix(n, w, entities).expect("entity table shape"),
        relations: Tensor::from_matrix(r, w, relations).expect("relation table shape"),
    }
}

/// Trains a structure encoder on `train` with uniform head/tail corruption.
///
/// TransE and HAKE minimise `−ln σ(γ + f⁺) − Σᵢ pᵢ ln σ(−γ − fᵢ⁻)` where `f`
/// is the score and `pᵢ` the (detached) self-adversarial softmax of the
/// negative scores at the configured temperature. DistMult minimises the
/// logistic loss `−ln σ(f⁺) − mean ln σ(−fᵢ⁻)` plus an L2 penalty.
/// Deterministic in `cfg.seed`. The returned table is not projected.
pub fn train_structure_encoder(
    train: &[Triple],
    num_entities: usize,
    num_relations: usize,
    cfg: &StructureEncoderConfig,
) -> Result<TrainedStructure> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("structure encoder needs a non-empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = initialise(cfg, num_entities, num_relations, &mut rng);
    let w = cfg.kind.row_width(cfg.dim);

    let mut store = ParamStore::new();
    let ent_id = store.add("entities", model.entities.clone(), true);
    let rel_id = store.add("relations", model.relations.clone(), true);
    let mut adam = AdamState::new(
        &store,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let k = cfg.negatives;
    let mut neg_scores = vec![0.0; k];
    let mut negs = vec![Triple::new(0, 0, 0); k];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            let ents = store.value(ent_id).clone();
            let rels = store.value(rel_id).clone();
            let current = KgeModel {
                entities: ents,
                relations: rels,
                ..model.clone()
            };
            let mut ge = vec![0.0; num_entities * w];
            let mut gr = vec![0.0; num_relations * w];
            let scale = 1.0 / batch.len() as f64;
            let add_grad = |t: &Triple, dscore: f64, m: &KgeModel, ge: &mut [f64], gr: &mut [f64]| {
                let g = m.score_grad(t.head, t.relation, t.tail);
                for i in 0..w {
                    ge[t.head.0 * w + i] += dscore * g.head[i];
                    ge[t.tail.0 * w + i] += dscore * g.tail[i];
                    gr[t.relation.0 * w + i] += dscore * g.relation[i];
                }
            };
            let mut batch_loss = 0.0;
            for &idx in batch {
                let pos = train[idx];
                for neg in negs.iter_mut() {
                    let corrupt = EntityId(rng.random_range(0..num_entities));
                    *neg = if rng.random::<bool>() {
                        Triple { head: corrupt, ..pos }
                    } else {
                        Triple { tail: corrupt, ..pos }
                    };
                }
                let f_pos = current.score(pos.head, pos.relation, pos.tail);
                for (s, neg) in neg_scores.iter_mut().zip(&negs) {
                    *s = current.score(neg.head, neg.relation, neg.tail);
                }
                match cfg.kind {
                    ModelKind::TransE | ModelKind::Hake => {
                        let gamma = cfg.margin;
                        let weights = adversarial_weights(&neg_scores, cfg.adversarial_temperature);
                        batch_loss += neg_log_sigmoid(gamma + f_pos);
                        add_grad(&pos, -sigmoid(-gamma - f_pos) * scale, &current, &mut ge, &mut gr);
                        for ((neg, &f), &p) in negs.iter().zip(&neg_scores).zip(&weights) {
                            batch_loss += p * neg_log_sigmoid(-gamma - f);
                            add_grad(neg, p * sigmoid(gamma + f) * scale, &current, &mut ge, &mut gr);
                        }
                    }
                    ModelKind::DistMult => {
                        batch_loss += neg_log_sigmoid(f_pos);
                        add_grad(&pos, -sigmoid(-f_pos) * scale, &current, &mut ge, &mut gr);
                        for (neg, &f) in negs.iter().zip(&neg_scores) {
                            batch_loss += neg_log_sigmoid(-f) / k as f64;
                            add_grad(neg, sigmoid(f) / k as f64 * scale, &current, &mut ge, &mut gr);
                        }
                        let lambda = cfg.regularization;
                        for (row, is_entity) in [(pos.head.0, true), (pos.tail.0, true), (pos.relation.0, false)] {
                            let (table, grad) = if is_entity {
                                (&current.entities, &mut ge)
                            } else {
                                (&current.relations, &mut gr)
                            };
                            for (i, &v) in table.row_slice(row).iter().enumerate() {
                                batch_loss += lambda * v * v;
                                grad[row * w + i] += 2.0 * lambda * v * scale;
                            }
                        }
                    }
                }
            }
            let batch_loss = batch_loss * scale;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, loss: batch_loss });
            }
            total += batch_loss * batch.len() as f64;
            store.accumulate_grad(ent_id, &Tensor::from_matrix(num_entities, w, ge)?, 1.0)?;
            store.accumulate_grad(rel_id, &Tensor::from_matrix(num_relations, w, gr)?, 1.0)?;
            adam.step(&mut store);
        }
        let mean = total / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }

    let trained = KgeModel {
        entities: store.value(ent_id).clone(),
        relations: store.value(rel_id).clone(),
        ..model
    };
    trained.entities.ensure_finite("structure training")?;
    Ok(TrainedStructure {
        table: StructuralEmbeddingTable::from_model(trained, cfg),
        epoch_losses,
    })
}

fn adversarial_weights(scores: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        return vec![1.0 / scores.len() as f64; scores.len()];
    }
    let mut w: Vec<f64> = scores.iter().map(|s| s * temperature).collect();
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in &mut w {
        *v = (*v - max).exp();
        total += *v;
    }
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Ranks of `triples` under the table's embedding model. Tail prediction
/// always; head prediction too when `heads` is set.
pub fn evaluate_structure(
    table: &StructuralEmbeddingTable,
    triples: &[Triple],
    filter: &FilterIndex,
    heads: bool,
) -> Result<EvalReport> {
    let model = &table.model;
    let mut records = Vec::with_capacity(triples.len() * (1 + heads as usize));
    for t in triples {
        let scores = model.tail_scores(t.head, t.relation);
        records.push(RankRecord::from_scores(*t, Direction::Tail, &scores, filter));
        if heads {
            let scores = model.head_scores(t.relation, t.tail);
            records.push(RankRecord::from_scores(*t, Direction::Head, &scores, filter));
        }
    }
    EvalReport::from_records(records, table.config_hash.clone(), table.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(kind: ModelKind) -> StructureEncoderConfig {
        StructureEncoderConfig {
            kind,
            dim: 4,
            epochs: 1,
            negatives: 2,
            ..StructureEncoderConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initialisation() {
        let train = [Triple::new(0, 0, 1)];
        for kind in [ModelKind::TransE, ModelKind::DistMult, ModelKind::Hake] {
            let cfg = StructureEncoderConfig {
                learning_rate: 0.0,
                ..tiny_cfg(kind)
            };
            let trained = train_structure_encoder(&train, 3, 1, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let init = initialise(&cfg, 3, 1, &mut rng);
            assert_eq!(trained.table.model.entities, init.entities, "{kind}");
            assert_eq!(trained.table.model.relations, init.relations, "{kind}");
        }
    }

    #[test]
    fn same_seed_same_table() {
        let train: Vec<Triple> = (0..6).map(|i| Triple::new(i, i % 2, (i + 1) % 6)).collect();
        let cfg = StructureEncoderConfig {
            epochs: 3,
            ..tiny_cfg(ModelKind::Hake)
        };
        let a = train_structure_encoder(&train, 6, 2, &cfg).unwrap();
        let b = train_structure_encoder(&train, 6, 2, &cfg).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn empty_split_is_rejected() {
        assert!(matches!(
            train_structure_encoder(&[], 3, 1, &tiny_cfg(ModelKind::TransE)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let train: Vec<Triple> = (0..8).map(|i| Triple::new(i, 0, (i + 1) % 8)).collect();
        let cfg = StructureEncoderConfig {
            kind: ModelKind::DistMult,
            learning_rate: 1e200,
            epochs: 5,
            regularization: 0.0,
            ..tiny_cfg(ModelKind::DistMult)
        };
        match train_structure_encoder(&train, 8, 1, &cfg) {
            Err(Error::Divergence { .. }) | Err(Error::NonFinite { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|t| t.epoch_losses)),
        }
    }

    #[test]
    fn uniform_adversarial_weights_at_zero_temperature() {
        assert_eq!(adversarial_weights(&[1.0, -3.0], 0.0), vec![0.5, 0.5]);
        let w = adversarial_weights(&[1.0, -3.0, 0.0], 2.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[0] > w[2] && w[2] > w[1]);
    }
}
