use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RunConfig;
use crate::backbone::{backbone_train_step, Backbone};
use crate::data::{
    build_pretrain_template, build_reason_template, generate_synthetic_mkg, load_dataset, EntityId, MultimodalKG,
    Split, TokenizedQuery, Triple, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_with, EvalReport, FilterIndex};
use crate::fusion::{train_step, FusedModel, FusionConfig};
use crate::structure::{
    evaluate_structure, project_to_dim, train_structure_encoder, ProjectionReport, StructuralEmbeddingTable,
    StructureEncoderConfig,
};
use crate::tensor::{AdamState, ParamStore, Tape};

/// A loaded dataset with its vocabulary and filter index.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub mkg: MultimodalKG,
    pub vocab: Vocabulary,
    pub filter: FilterIndex,
}

impl Workspace {
    pub fn new(mkg: MultimodalKG) -> Self {
        let vocab = Vocabulary::for_templates(&mkg);
        let filter = FilterIndex::from_mkg(&mkg);
        Workspace { mkg, vocab, filter }
    }

    /// Reads `data_dir`, or generates the synthetic dataset from the run seed.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let mkg = match &cfg.data_dir {
            Some(dir) => load_dataset(Path::new(dir))?,
            None => generate_synthetic_mkg(&cfg.synth, cfg.seed)?.0,
        };
        Ok(Workspace::new(mkg))
    }

    pub fn eval_split(&self, cfg: &RunConfig) -> &[Triple] {
        match cfg.eval.split.as_str() {
            "dev" => self.mkg.split(Split::Dev),
            _ => self.mkg.split(Split::Test),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    fn epochs(self, cfg: &RunConfig) -> usize {
        match self {
            Stage::Pretrain => cfg.train.pretrain_epochs,
            Stage::Finetune => cfg.train.finetune_epochs,
        }
    }

    fn queries(self, ws: &Workspace) -> Result<Vec<TokenizedQuery>> {
        match self {
            Stage::Pretrain => (0..ws.mkg.num_entities())
                .map(|e| build_pretrain_template(EntityId(e), &ws.mkg, &ws.vocab))
                .collect(),
            Stage::Finetune => ws
                .mkg
                .train
                .iter()
                .map(|t| build_reason_template(t.head, t.relation, Some(t.tail), &ws.mkg, &ws.vocab))
                .collect(),
        }
    }

    fn shuffle_seed(self, seed: u64) -> u64 {
        match self {
            Stage::Pretrain => seed.wrapping_mul(2).wrapping_add(1),
            Stage::Finetune => seed.wrapping_mul(2).wrapping_add(2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct StructureOutcome {
    /// Projected to the model width.
    pub table: StructuralEmbeddingTable,
    pub projection: ProjectionReport,
    pub epoch_losses: Vec<f64>,
    pub report: EvalReport,
}

pub(crate) fn structure_config(cfg: &RunConfig) -> StructureEncoderConfig {
    StructureEncoderConfig {
        seed: cfg.seed,
        ..cfg.structure.clone()
    }
}

/// Trains the structure encoder on the training split, projects it to the
/// model width and evaluates it on the evaluation split.
pub fn build_structure(cfg: &RunConfig, ws: &Workspace) -> Result<StructureOutcome> {
    let scfg = structure_config(cfg);
    let mkg = &ws.mkg;
    let trained = train_structure_encoder(&mkg.train, mkg.num_entities(), mkg.num_relations(), &scfg)?;
    let split = ws.eval_split(cfg);
    let report = if split.is_empty() {
        evaluate_structure(&trained.table, &mkg.train, &ws.filter, cfg.eval.head_prediction)?
    } else {
        evaluate_structure(&trained.table, split, &ws.filter, cfg.eval.head_prediction)?
    };
    let (table, projection) = project_to_dim(&trained.table, cfg.model.dim, cfg.seed)?;
    Ok(StructureOutcome {
        table,
        projection,
        epoch_losses: trained.epoch_losses,
        report,
    })
}

/// Freshly initialised fused model for the run's dataset.
pub fn build_model(
    cfg: &RunConfig,
    ws: &Workspace,
    table: Option<&StructuralEmbeddingTable>,
) -> Result<(FusedModel, ParamStore)> {
    let mut store = ParamStore::new();
    let model_cfg = cfg.model.clone().with_data(&ws.vocab, &ws.mkg)?;
    let backbone = Backbone::new(model_cfg, &mut store, cfg.seed)?;
    let model = FusedModel::new(backbone, cfg.fusion.clone(), table, &mut store)?;
    Ok((model, store))
}

fn run_epochs(
    cfg: &RunConfig,
    ws: &Workspace,
    store: &mut ParamStore,
    stage: Stage,
    losses: &mut Vec<LossRow>,
    mut step_fn: impl FnMut(&mut ParamStore, &mut AdamState, &[TokenizedQuery]) -> Result<f64>,
) -> Result<()> {
    let mut queries = stage.queries(ws)?;
    if queries.is_empty() || stage.epochs(cfg) == 0 {
        return Ok(());
    }
    let mut adam = AdamState::new(store, cfg.train.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(stage.shuffle_seed(cfg.seed));
    let mut step = 0;
    for epoch in 0..stage.epochs(cfg) {
        queries.shuffle(&mut rng);
        for batch in queries.chunks(cfg.train.batch_size) {
            let loss = step_fn(store, &mut adam, batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            losses.push(LossRow {
                stage,
                epoch,
                step,
                loss,
            });
            step += 1;
        }
        log::debug!("{} epoch {epoch}: last loss {:?}", stage.name(), losses.last().map(|r| r.loss));
    }
    Ok(())
}

/// Runs one training stage of the fused model; appends one row per step.
pub fn train_stage(
    cfg: &RunConfig,
    ws: &Workspace,
    model: &FusedModel,
    store: &mut ParamStore,
    stage: Stage,
    losses: &mut Vec<LossRow>,
) -> Result<()> {
    run_epochs(cfg, ws, store, stage, losses, |s, adam, batch| {
        train_step(model, s, adam, batch, &ws.mkg)
    })
}

/// Same schedule as [`train_stage`] for the bare backbone.
pub fn train_backbone_stage(
    cfg: &RunConfig,
    ws: &Workspace,
    backbone: &Backbone,
    store: &mut ParamStore,
    stage: Stage,
    losses: &mut Vec<LossRow>,
) -> Result<()> {
    run_epochs(cfg, ws, store, stage, losses, |s, adam, batch| {
        backbone_train_step(backbone, s, adam, batch, &ws.mkg)
    })
}

pub fn evaluate_model(cfg: &RunConfig, ws: &Workspace, model: &FusedModel, store: &ParamStore) -> Result<EvalReport> {
    if cfg.eval.head_prediction {
        return Err(Error::Config(
            "head prediction is only available for the structure encoder".into(),
        ));
    }
    evaluate(
        model,
        store,
        &ws.mkg,
        &ws.vocab,
        ws.eval_split(cfg),
        &ws.filter,
        &cfg.hash(),
        cfg.seed,
    )
}

pub struct RunOutcome {
    pub store: ParamStore,
    pub losses: Vec<LossRow>,
    pub report: EvalReport,
}

/// Pretrain, finetune and evaluate the fused model.
pub fn run_fused(cfg: &RunConfig, ws: &Workspace, table: Option<&StructuralEmbeddingTable>) -> Result<RunOutcome> {
    let (model, mut store) = build_model(cfg, ws, table)?;
    let mut losses = Vec::new();
    train_stage(cfg, ws, &model, &mut store, Stage::Pretrain, &mut losses)?;
    train_stage(cfg, ws, &model, &mut store, Stage::Finetune, &mut losses)?;
    let report = evaluate_model(cfg, ws, &model, &store)?;
    Ok(RunOutcome { store, losses, report })
}

/// The same schedule with the bare backbone; no fusion code is involved.
pub fn run_backbone_only(cfg: &RunConfig, ws: &Workspace) -> Result<RunOutcome> {
    let mut store = ParamStore::new();
    let model_cfg = cfg.model.clone().with_data(&ws.vocab, &ws.mkg)?;
    let backbone = Backbone::new(model_cfg, &mut store, cfg.seed)?;
    let mut losses = Vec::new();
    train_backbone_stage(cfg, ws, &backbone, &mut store, Stage::Pretrain, &mut losses)?;
    train_backbone_stage(cfg, ws, &backbone, &mut store, Stage::Finetune, &mut losses)?;
    let report = evaluate_with(ws.eval_split(cfg), &ws.filter, &cfg.hash(), cfg.seed, |t| {
        let q = build_reason_template(t.head, t.relation, None, &ws.mkg, &ws.vocab)?;
        let mut tape = Tape::new();
        let logits = backbone.query_logits(&mut tape, &store, &q, &ws.mkg)?;
        Ok(tape.value(logits).data().to_vec())
    })?;
    Ok(RunOutcome { store, losses, report })
}

/// Fusion settings with every pathway off, for baselines.
pub(crate) fn disabled(cfg: &FusionConfig) -> FusionConfig {
    cfg.with_flags([false; 4])
}
