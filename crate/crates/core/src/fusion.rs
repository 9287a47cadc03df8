//! Structure-guided fusion.
//!
//! Weighted summation adds the head entity's structural row into its text
//! state (`h^ts = h^t + λ_s^ts h^s`) and into every image row
//! (`H^vs = H^v + λ_s^vs H^s_exp`). The alignment constraint adds
//! `λ_a^ts L_ts + λ_a^vs L_vs` to the cross-entropy, where both losses are
//! `2 − 2 cos` between normalised features. Alignment uses the features
//! before summation.
//!
//! A disabled pathway is not computed at all. With every pathway disabled the
//! forward pass performs exactly the bare backbone's operations.

use serde::{Deserialize, Serialize};

use crate::backbone::{visual_of, Backbone};
use crate::data::{EntityId, MultimodalKG, TokenizedQuery};
use crate::error::{Error, Result};
use crate::structure::{ProjectionKind, StructuralEmbeddingTable};
use crate::tensor::{AdamState, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub lambda_s_ts: f64,
    pub lambda_s_vs: f64,
    pub lambda_a_ts: f64,
    pub lambda_a_vs: f64,
    pub ws_ts: bool,
    pub ws_vs: bool,
    pub ac_ts: bool,
    pub ac_vs: bool,
    /// Mean of per-row cosine distances for `L_vs` instead of one cosine
    /// over the flattened matrices.
    pub per_row_alignment: bool,
    pub projection: ProjectionKind,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda_s_ts: 0.01,
            lambda_s_vs: 0.01,
            lambda_a_ts: 0.001,
            lambda_a_vs: 0.001,
            ws_ts: true,
            ws_vs: true,
            ac_ts: true,
            ac_vs: true,
            per_row_alignment: false,
            projection: ProjectionKind::Orthonormal,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_s_ts", self.lambda_s_ts),
            ("lambda_s_vs", self.lambda_s_vs),
            ("lambda_a_ts", self.lambda_a_ts),
            ("lambda_a_vs", self.lambda_a_vs),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn any_enabled(&self) -> bool {
        self.ws_ts || self.ws_vs || self.ac_ts || self.ac_vs
    }

    /// The same λs with the four switches set from `flags` in the order
    /// `[ws_ts, ws_vs, ac_ts, ac_vs]`.
    pub fn with_flags(&self, flags: [bool; 4]) -> Self {
        FusionConfig {
            ws_ts: flags[0],
            ws_vs: flags[1],
            ac_ts: flags[2],
            ac_vs: flags[3],
            ..self.clone()
        }
    }

    pub fn flags(&self) -> [bool; 4] {
        [self.ws_ts, self.ws_vs, self.ac_ts, self.ac_vs]
    }
}

/// `h^ts = h^t + λ h^s`.
pub fn weighted_sum_text(h_t: &Tensor, h_s: &Tensor, lambda: f64) -> Result<Tensor> {
    h_t.add(&h_s.scale(lambda))
}

/// `H^t` with row `pos` replaced by `h_ts`; `None` passes `H^t` through.
pub fn replace_entity_row(h_text: &Tensor, pos: Option<usize>, h_ts: &Tensor) -> Result<Tensor> {
    let Some(pos) = pos else {
        return Ok(h_text.clone());
    };
    if pos >= h_text.rows() || h_ts.shape() != [1, h_text.cols()] {
        return Err(Error::dim("replace_entity_row", h_text.shape(), h_ts.shape()));
    }
    let mut out = h_text.clone();
    out.row_slice_mut(pos).copy_from_slice(h_ts.data());
    Ok(out)
}

/// `I` stacked copies of the `1 x D` row `h_s`.
pub fn expand_structural(h_s: &Tensor, images: usize) -> Result<Tensor> {
    if images == 0 || h_s.rows() != 1 {
        return Err(Error::dim("expand_structural", h_s.shape(), &[images]));
    }
    Tensor::concat_rows(&vec![h_s; images])
}

/// `H^vs = H^v + λ H^s_exp`.
pub fn weighted_sum_vision(h_v: &Tensor, h_s_exp: &Tensor, lambda: f64) -> Result<Tensor> {
    h_v.add(&h_s_exp.scale(lambda))
}

fn cosine_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (av, bv) = (tape.input(a.clone())?, tape.input(b.clone())?);
    let d = tape.cosine_distance(av, bv)?;
    Ok(tape.value(d).item())
}

/// `L_ts = ‖h^t/‖h^t‖ − h^s/‖h^s‖‖²`.
pub fn align_loss_text(h_t: &Tensor, h_s: &Tensor) -> Result<f64> {
    cosine_value(h_t, h_s)
}

/// `L_vs` with Frobenius normalisation of both matrices.
pub fn align_loss_vision(h_v: &Tensor, h_s_exp: &Tensor) -> Result<f64> {
    cosine_value(h_v, h_s_exp)
}

/// Mean over rows of the per-row cosine distance.
pub fn align_loss_vision_rows(h_v: &Tensor, h_s_exp: &Tensor) -> Result<f64> {
    if h_v.shape() != h_s_exp.shape() || h_v.rows() == 0 {
        return Err(Error::dim("align_loss_vision_rows", h_v.shape(), h_s_exp.shape()));
    }
    let mut total = 0.0;
    for i in 0..h_v.rows() {
        total += cosine_value(&h_v.slice_rows(i, 1)?, &h_s_exp.slice_rows(i, 1)?)?;
    }
    Ok(total / h_v.rows() as f64)
}

/// `L_a = λ_a^ts L_ts + λ_a^vs L_vs` with disabled terms dropped.
pub fn total_alignment_loss(l_ts: f64, l_vs: f64, cfg: &FusionConfig) -> f64 {
    let mut total = 0.0;
    if cfg.ac_ts {
        total += cfg.lambda_a_ts * l_ts;
    }
    if cfg.ac_vs {
        total += cfg.lambda_a_vs * l_vs;
    }
    total
}

pub fn total_loss(l_ce: f64, l_a: f64) -> f64 {
    l_ce + l_a
}

#[derive(Clone, Debug)]
enum StructureSource {
    /// Frozen `N x D` table.
    Fixed(ParamId),
    /// Frozen raw rows times a trainable map.
    Projected { raw: ParamId, map: ParamId },
}

/// Recorded pieces of one fused forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FusedForward {
    pub h_text: Var,
    pub h_vision: Var,
    pub h_ts: Option<Var>,
    pub h_vs: Option<Var>,
    pub h_s: Option<Var>,
    pub logits: Var,
    pub ce: Option<Var>,
    pub l_ts: Option<Var>,
    pub l_vs: Option<Var>,
    pub loss: Option<Var>,
}

/// The backbone with structural fusion attached.
#[derive(Clone, Debug)]
pub struct FusedModel {
    pub backbone: Backbone,
    pub cfg: FusionConfig,
    structure: Option<StructureSource>,
}

impl FusedModel {
    /// Registers the structural table in `store` (frozen) when any pathway is
    /// enabled. A trainable projection adds one `raw_width x D` parameter.
    pub fn new(
        backbone: Backbone,
        cfg: FusionConfig,
        table: Option<&StructuralEmbeddingTable>,
        store: &mut ParamStore,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = backbone.cfg.dim;
        let structure = if !cfg.any_enabled() {
            None
        } else {
            let table = table.ok_or_else(|| Error::Config("fusion is enabled but no structural table was given".into()))?;
            if table.num_entities() != backbone.cfg.num_entities {
                return Err(Error::Config(format!(
                    "structural table has {} rows but the model has {} entities",
                    table.num_entities(),
                    backbone.cfg.num_entities
                )));
            }
            if table.dim() != d {
                return Err(Error::Config(format!(
                    "structural table width {} differs from model dim {d}",
                    table.dim()
                )));
            }
            Some(match cfg.projection {
                ProjectionKind::Orthonormal => StructureSource::Fixed(store.add("structure.table", table.matrix.clone(), false)),
                ProjectionKind::Trainable => {
                    let raw = &table.model.entities;
                    let map = match &table.projection {
                        Some(p) => p.clone(),
                        None => Tensor::identity(raw.cols()),
                    };
                    StructureSource::Projected {
                        raw: store.add("structure.raw", raw.clone(), false),
                        map: store.add("structure.projection", map, true),
                    }
                }
            })
        };
        Ok(FusedModel {
            backbone,
            cfg,
            structure,
        })
    }

    /// `h^s_e`, a `1 x D` row.
    pub fn structural_row(&self, tape: &mut Tape, store: &ParamStore, e: EntityId) -> Result<Var> {
        match &self.structure {
            None => Err(Error::Config("no structural table attached".into())),
            Some(StructureSource::Fixed(id)) => {
                let t = tape.param(store, *id);
                tape.gather(t, &[e.0])
            }
            Some(StructureSource::Projected { raw, map }) => {
                let t = tape.param(store, *raw);
                let row = tape.gather(t, &[e.0])?;
                let m = tape.param(store, *map);
                tape.matmul(row, m)
            }
        }
    }

    /// One query through `f_t`, `f_v`, the enabled fusion pathways, `f_m`
    /// and the entity head. Losses are recorded when the query has a target.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: &TokenizedQuery, mkg: &MultimodalKG) -> Result<FusedForward> {
        let cfg = &self.cfg;
        let bb = &self.backbone;
        let head_pos = query.head_entity_pos;
        let text_path = head_pos.is_some() && (cfg.ws_ts || cfg.ac_ts);
        let vision_path = cfg.ws_vs || cfg.ac_vs;

        let h_text = bb.encode_text(tape, store, query)?;
        let h_vision = bb.encode_vision(tape, store, visual_of(mkg, query.anchor)?)?;
        let h_s = if text_path || vision_path {
            Some(self.structural_row(tape, store, query.anchor)?)
        } else {
            None
        };

        let mut h_t = None;
        let mut h_ts = None;
        let mut text_in = h_text;
        if let (Some(pos), Some(hs)) = (head_pos.filter(|_| text_path), h_s) {
            let row = tape.slice_rows(h_text, pos, 1)?;
            h_t = Some(row);
            if cfg.ws_ts {
                let scaled = tape.scale(hs, cfg.lambda_s_ts)?;
                let fused = tape.add(row, scaled)?;
                text_in = replace_row(tape, h_text, pos, fused)?;
                h_ts = Some(text_in);
            }
        }

        let mut h_s_exp = None;
        let mut h_vs = None;
        let mut vision_in = h_vision;
        if let (true, Some(hs)) = (vision_path, h_s) {
            let images = tape.value(h_vision).rows();
            let expanded = tape.repeat_rows(hs, images)?;
            h_s_exp = Some(expanded);
            if cfg.ws_vs {
                let scaled = tape.scale(expanded, cfg.lambda_s_vs)?;
                vision_in = tape.add(h_vision, scaled)?;
                h_vs = Some(vision_in);
            }
        }

        let fused = bb.encode_multimodal(tape, store, text_in, Some(vision_in))?;
        let h_mask = tape.slice_rows(fused, query.mask_pos, 1)?;
        let logits = bb.mlm_logits(tape, store, h_mask)?;

        let mut out = FusedForward {
            h_text,
            h_vision,
            h_ts,
            h_vs,
            h_s,
            logits,
            ce: None,
            l_ts: None,
            l_vs: None,
            loss: None,
        };
        let Some(target) = query.target else {
            return Ok(out);
        };
        let ce = tape.cross_entropy(logits, target.0)?;
        out.ce = Some(ce);
        let mut loss = ce;
        if let (true, Some(ht), Some(hs)) = (cfg.ac_ts, h_t, h_s) {
            let l = tape.cosine_distance(ht, hs)?;
            out.l_ts = Some(l);
            let weighted = tape.scale(l, cfg.lambda_a_ts)?;
            loss = tape.add(loss, weighted)?;
        }
        if let (true, Some(exp)) = (cfg.ac_vs, h_s_exp) {
            let l = if cfg.per_row_alignment {
                per_row_cosine(tape, h_vision, exp)?
            } else {
                tape.cosine_distance(h_vision, exp)?
            };
            out.l_vs = Some(l);
            let weighted = tape.scale(l, cfg.lambda_a_vs)?;
            loss = tape.add(loss, weighted)?;
        }
        out.loss = Some(loss);
        Ok(out)
    }

    /// Entity scores for a query (target ignored).
    pub fn logits(&self, store: &ParamStore, query: &TokenizedQuery, mkg: &MultimodalKG) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, query, mkg)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Loss of one query and its gradient added into `store` with `scale`.
    pub fn accumulate(&self, store: &mut ParamStore, query: &TokenizedQuery, mkg: &MultimodalKG, scale: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, query, mkg)?;
        let loss = out.loss.ok_or(Error::Undefined("training query without a target"))?;
        let grads = tape.backward(loss)?;
        tape.accumulate_param_grads(&grads, store, scale)?;
        Ok(tape.value(loss).item())
    }
}

fn replace_row(tape: &mut Tape, h: Var, pos: usize, row: Var) -> Result<Var> {
    let rows = tape.value(h).rows();
    let mut parts = Vec::with_capacity(3);
    if pos > 0 {
        parts.push(tape.slice_rows(h, 0, pos)?);
    }
    parts.push(row);
    if pos + 1 < rows {
        parts.push(tape.slice_rows(h, pos + 1, rows - pos - 1)?);
    }
    tape.concat_rows(&parts)
}

fn per_row_cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let rows = tape.value(a).rows();
    let mut total = None;
    for i in 0..rows {
        let ra = tape.slice_rows(a, i, 1)?;
        let rb = tape.slice_rows(b, i, 1)?;
        let d = tape.cosine_distance(ra, rb)?;
        total = Some(match total {
            None => d,
            Some(t) => tape.add(t, d)?,
        });
    }
    let total = total.ok_or(Error::Undefined("alignment over zero images"))?;
    tape.scale(total, 1.0 / rows as f64)
}

/// One optimiser step on the mean loss of `batch`; returns that mean.
pub fn train_step(
    model: &FusedModel,
    store: &mut ParamStore,
    adam: &mut AdamState,
    batch: &[TokenizedQuery],
    mkg: &MultimodalKG,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Undefined("training step on an empty batch"));
    }
    store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for q in batch {
        total += model.accumulate(store, q, mkg, scale)?;
    }
    adam.step(store);
    Ok(total * scale)
}
