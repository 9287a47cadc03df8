//! Tiny transformer encoders: text `f_t`, vision `f_v`, multimodal `f_m`,
//! and the tied-embedding entity head.
//!
//! All blocks are pre-norm (`x + sublayer(LN(x))`) with GELU feed-forward
//! layers. The multimodal layers add text-to-vision cross-attention between
//! self-attention and the feed-forward layer. Every stack ends with a layer
//! norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{EntityId, MultimodalKG, TokenizedQuery, VisualAttribute, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{scaled_dot_attention, AdamState, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub vision_layers: usize,
    pub fusion_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Std of token, position and patch-position embeddings.
    pub embed_std: f64,
    /// Start multimodal layers with a zero cross-attention output map.
    pub zero_cross_output: bool,
    /// Filled from the dataset by [`ModelConfig::with_data`]; not part of
    /// the serialised configuration.
    #[serde(skip)]
    pub num_entities: usize,
    #[serde(skip)]
    pub vocab_size: usize,
    #[serde(skip)]
    pub entity_offset: usize,
    #[serde(skip)]
    pub patches: usize,
    #[serde(skip)]
    pub patch_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 16,
            heads: 2,
            text_layers: 1,
            vision_layers: 1,
            fusion_layers: 1,
            ffn_dim: 32,
            max_len: 64,
            embed_std: 0.1,
            zero_cross_output: false,
            num_entities: 0,
            vocab_size: 0,
            entity_offset: 0,
            patches: 0,
            patch_dim: 0,
        }
    }
}

impl ModelConfig {
    /// Copies vocabulary and image shapes from the dataset.
    pub fn with_data(mut self, vocab: &Vocabulary, mkg: &MultimodalKG) -> Result<Self> {
        self.num_entities = vocab.num_entities();
        self.vocab_size = vocab.len();
        self.entity_offset = vocab.entity_offset();
        let (p, d) = mkg.patch_shape().ok_or_else(|| {
            Error::Config("dataset has no images; the vision encoder needs a patch shape".into())
        })?;
        self.patches = p;
        self.patch_dim = d;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.text_layers == 0 || self.vision_layers == 0 || self.fusion_layers == 0 {
            return Err(Error::Config("text, vision and fusion layer counts must be >= 1".into()));
        }
        if self.ffn_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("ffn_dim and max_len must be >= 1".into()));
        }
        if self.num_entities == 0 || self.vocab_size < self.entity_offset + self.num_entities {
            return Err(Error::Config("vocabulary does not cover the entity range".into()));
        }
        if self.patches == 0 || self.patch_dim == 0 {
            return Err(Error::Config("patch shape must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct FusionLayer {
    ln1: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross: Attention,
    ln2: Norm,
    ffn: FeedForward,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        let value = Tensor::from_matrix(rows, cols, data).expect("shape");
        self.store.add(name, value, true)
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.normal(name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    fn constant(&mut self, name: String, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Tensor::full(1, cols, value), true)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.constant(format!("{prefix}.gain"), d, 1.0),
            bias: self.constant(format!("{prefix}.bias"), d, 0.0),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize, zero_out: bool) -> Attention {
        let wq = self.linear(format!("{prefix}.wq"), d, d);
        let wk = self.linear(format!("{prefix}.wk"), d, d);
        let wv = self.linear(format!("{prefix}.wv"), d, d);
        let wo = if zero_out {
            self.store.add(format!("{prefix}.wo"), Tensor::zeros(d, d), true)
        } else {
            self.linear(format!("{prefix}.wo"), d, d)
        };
        Attention { wq, wk, wv, wo }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            w1: self.linear(format!("{prefix}.w1"), d, hidden),
            b1: self.constant(format!("{prefix}.b1"), hidden, 0.0),
            w2: self.linear(format!("{prefix}.w2"), hidden, d),
            b2: self.constant(format!("{prefix}.b2"), d, 0.0),
        }
    }

    fn encoder_layer(&mut self, prefix: &str, cfg: &ModelConfig) -> EncoderLayer {
        EncoderLayer {
            ln1: self.norm(&format!("{prefix}.ln1"), cfg.dim),
            attn: self.attention(&format!("{prefix}.attn"), cfg.dim, false),
            ln2: self.norm(&format!("{prefix}.ln2"), cfg.dim),
            ffn: self.ffn(&format!("{prefix}.ffn"), cfg.dim, cfg.ffn_dim),
        }
    }
}

/// Parameter handles of the three encoders. Values live in a [`ParamStore`],
/// so one backbone layout can be evaluated against different checkpoints.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: ModelConfig,
    tokens: ParamId,
    positions: ParamId,
    embed_ln: Norm,
    text: Vec<EncoderLayer>,
    text_ln: Norm,
    patch_proj: ParamId,
    patch_bias: ParamId,
    patch_positions: ParamId,
    no_image: ParamId,
    vision: Vec<EncoderLayer>,
    vision_ln: Norm,
    fusion: Vec<FusionLayer>,
    fusion_ln: Norm,
}

impl Backbone {
    /// Registers freshly initialised parameters in `store`. Deterministic in
    /// `seed`; parameter names are prefixed `embed.`, `text.`, `vision.` and
    /// `multimodal.`.
    pub fn new(cfg: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut init = Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let tokens = init.normal("embed.tokens".into(), cfg.vocab_size, d, cfg.embed_std);
        let positions = init.normal("embed.positions".into(), cfg.max_len, d, cfg.embed_std);
        let embed_ln = init.norm("embed.ln", d);
        let text = (0..cfg.text_layers)
            .map(|i| init.encoder_layer(&format!("text.{i}"), &cfg))
            .collect();
        let text_ln = init.norm("text.ln_f", d);

        let patch_proj = init.linear("vision.patch_proj".into(), cfg.patch_dim, d);
        let patch_bias = init.constant("vision.patch_bias".into(), d, 0.0);
        let patch_positions = init.normal("vision.positions".into(), cfg.patches, d, cfg.embed_std);
        let no_image = init.normal("vision.no_image".into(), cfg.patches, cfg.patch_dim, 1.0);
        let vision = (0..cfg.vision_layers)
            .map(|i| init.encoder_layer(&format!("vision.{i}"), &cfg))
            .collect();
        let vision_ln = init.norm("vision.ln_f", d);

        let fusion = (0..cfg.fusion_layers)
            .map(|i| {
                let p = format!("multimodal.{i}");
                FusionLayer {
                    ln1: init.norm(&format!("{p}.ln1"), d),
                    self_attn: init.attention(&format!("{p}.self_attn"), d, false),
                    ln_cross: init.norm(&format!("{p}.ln_cross"), d),
                    cross: init.attention(&format!("{p}.cross_attn"), d, cfg.zero_cross_output),
                    ln2: init.norm(&format!("{p}.ln2"), d),
                    ffn: init.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim),
                }
            })
            .collect();
        let fusion_ln = init.norm("multimodal.ln_f", d);
        Ok(Backbone {
            cfg,
            tokens,
            positions,
            embed_ln,
            text,
            text_ln,
            patch_proj,
            patch_bias,
            patch_positions,
            no_image,
            vision,
            vision_ln,
            fusion,
            fusion_ln,
        })
    }

    fn norm(&self, tape: &mut Tape, store: &ParamStore, n: &Norm, x: Var) -> Result<Var> {
        let g = tape.param(store, n.gain);
        let b = tape.param(store, n.bias);
        tape.layer_norm(x, g, b)
    }

    fn attention(&self, tape: &mut Tape, store: &ParamStore, a: &Attention, x: Var, context: Var) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            tape.param(store, a.wq),
            tape.param(store, a.wk),
            tape.param(store, a.wv),
            tape.param(store, a.wo),
        );
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(context, wk)?;
        let v = tape.matmul(context, wv)?;
        let heads = self.cfg.heads;
        let merged = if heads == 1 {
            scaled_dot_attention(tape, q, k, v, None)?
        } else {
            let dh = self.cfg.dim / heads;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                outs.push(scaled_dot_attention(tape, qh, kh, vh, None)?);
            }
            tape.concat_cols(&outs)?
        };
        tape.matmul(merged, wo)
    }

    fn ffn(&self, tape: &mut Tape, store: &ParamStore, f: &FeedForward, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(store, f.w1),
            tape.param(store, f.b1),
            tape.param(store, f.w2),
            tape.param(store, f.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, w2)?;
        tape.add_row(h, b2)
    }

    fn encoder_layer(&self, tape: &mut Tape, store: &ParamStore, l: &EncoderLayer, x: Var) -> Result<Var> {
        let n = self.norm(tape, store, &l.ln1, x)?;
        let a = self.attention(tape, store, &l.attn, n, n)?;
        let x = tape.add(x, a)?;
        let n = self.norm(tape, store, &l.ln2, x)?;
        let f = self.ffn(tape, store, &l.ffn, n)?;
        tape.add(x, f)
    }

    /// `H^t`: one row per token after the text layers.
    pub fn encode_text(&self, tape: &mut Tape, store: &ParamStore, query: &TokenizedQuery) -> Result<Var> {
        let len = query.token_ids.len();
        if len > self.cfg.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.cfg.max_len,
            });
        }
        if let Some(&bad) = query.token_ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Lookup {
                kind: "token",
                name: bad.to_string(),
            });
        }
        let table = tape.param(store, self.tokens);
        let pos_table = tape.param(store, self.positions);
        let tok = tape.gather(table, &query.token_ids)?;
        let pos = tape.slice_rows(pos_table, 0, len)?;
        let x = tape.add(tok, pos)?;
        let mut x = self.norm(tape, store, &self.embed_ln, x)?;
        for layer in &self.text {
            x = self.encoder_layer(tape, store, layer, x)?;
        }
        self.norm(tape, store, &self.text_ln, x)
    }

    /// `H^v`: one row per image, the mean of its final patch states.
    /// [`VisualAttribute::Missing`] encodes the learned placeholder image.
    pub fn encode_vision(&self, tape: &mut Tape, store: &ParamStore, attr: &VisualAttribute) -> Result<Var> {
        let images: Vec<Var> = match attr {
            VisualAttribute::Images(images) if !images.is_empty() => images
                .iter()
                .map(|img| {
                    if img.shape() != [self.cfg.patches, self.cfg.patch_dim] {
                        return Err(Error::dim(
                            "encode_vision",
                            img.shape(),
                            &[self.cfg.patches, self.cfg.patch_dim],
                        ));
                    }
                    tape.input(img.clone())
                })
                .collect::<Result<_>>()?,
            _ => vec![tape.param(store, self.no_image)],
        };
        let proj = tape.param(store, self.patch_proj);
        let bias = tape.param(store, self.patch_bias);
        let pos = tape.param(store, self.patch_positions);
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            let x = tape.matmul(img, proj)?;
            let x = tape.add_row(x, bias)?;
            let mut x = tape.add(x, pos)?;
            for layer in &self.vision {
                x = self.encoder_layer(tape, store, layer, x)?;
            }
            let x = self.norm(tape, store, &self.vision_ln, x)?;
            rows.push(tape.mean_rows(x)?);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            tape.concat_rows(&rows)
        }
    }

    /// Fused text-side states. With `vision = None` the cross-attention
    /// sublayers are skipped (text-only stack).
    pub fn encode_multimodal(&self, tape: &mut Tape, store: &ParamStore, text: Var, vision: Option<Var>) -> Result<Var> {
        let d = self.cfg.dim;
        if tape.value(text).cols() != d {
            return Err(Error::dim("encode_multimodal", tape.value(text).shape(), &[d]));
        }
        if let Some(v) = vision {
            if tape.value(v).cols() != d {
                return Err(Error::dim("encode_multimodal", tape.value(v).shape(), &[d]));
            }
        }
        let mut x = text;
        for l in &self.fusion {
            let n = self.norm(tape, store, &l.ln1, x)?;
            let a = self.attention(tape, store, &l.self_attn, n, n)?;
            x = tape.add(x, a)?;
            if let Some(v) = vision {
                let n = self.norm(tape, store, &l.ln_cross, x)?;
                let c = self.attention(tape, store, &l.cross, n, v)?;
                x = tape.add(x, c)?;
            }
            let n = self.norm(tape, store, &l.ln2, x)?;
            let f = self.ffn(tape, store, &l.ffn, n)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, store, &self.fusion_ln, x)
    }

    /// Scores for every entity: `h_mask` against the entity rows of the
    /// token embedding table.
    pub fn mlm_logits(&self, tape: &mut Tape, store: &ParamStore, h_mask: Var) -> Result<Var> {
        let table = tape.param(store, self.tokens);
        let entities = tape.slice_rows(table, self.cfg.entity_offset, self.cfg.num_entities)?;
        tape.matmul_t(h_mask, entities)
    }

    /// Entity logits for a query without any structural input.
    pub fn query_logits(&self, tape: &mut Tape, store: &ParamStore, query: &TokenizedQuery, mkg: &MultimodalKG) -> Result<Var> {
        let ht = self.encode_text(tape, store, query)?;
        let hv = self.encode_vision(tape, store, visual_of(mkg, query.anchor)?)?;
        let fused = self.encode_multimodal(tape, store, ht, Some(hv))?;
        let h_mask = tape.slice_rows(fused, query.mask_pos, 1)?;
        self.mlm_logits(tape, store, h_mask)
    }

    /// Cross-entropy of the query's target under the bare backbone.
    pub fn query_loss(&self, tape: &mut Tape, store: &ParamStore, query: &TokenizedQuery, mkg: &MultimodalKG) -> Result<Var> {
        let logits = self.query_logits(tape, store, query, mkg)?;
        let target = query.target.ok_or(Error::Undefined("loss of a query without a target"))?;
        tape.cross_entropy(logits, target.0)
    }

    pub fn token_embeddings(&self) -> ParamId {
        self.tokens
    }
}

/// One Adam step on the mean bare-backbone loss of `batch`.
pub fn backbone_train_step(
    backbone: &Backbone,
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
        let mut tape = Tape::new();
        let loss = backbone.query_loss(&mut tape, store, q, mkg)?;
        let grads = tape.backward(loss)?;
        tape.accumulate_param_grads(&grads, store, scale)?;
        total += tape.value(loss).item();
    }
    adam.step(store);
    Ok(total * scale)
}

pub(crate) fn visual_of(mkg: &MultimodalKG, e: EntityId) -> Result<&VisualAttribute> {
    mkg.visual.get(e.0).ok_or_else(|| Error::Lookup {
        kind: "entity",
        name: e.0.to_string(),
    })
}

/// `h_mask · Eᵀ` for a `1 x D` mask state and an `N x D` entity table.
pub fn mlm_logits(h_mask: &Tensor, entity_table: &Tensor) -> Result<Tensor> {
    h_mask.matmul_t(entity_table)
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy_loss(logits: &Tensor, target: EntityId) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.input(logits.clone())?;
    let loss = tape.cross_entropy(l, target.0)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_reason_template, generate_synthetic_mkg, SynthConfig};
    use crate::tensor::{finite_diff_check, GradCheckOptions};

    fn tiny() -> (MultimodalKG, Vocabulary, ModelConfig) {
        let synth = SynthConfig {
            num_entities: 6,
            num_relations: 4,
            num_triples: 12,
            images_per_entity: 2,
            patches: 3,
            patch_dim: 4,
            ..SynthConfig::default()
        };
        let (mkg, _) = generate_synthetic_mkg(&synth, 1).unwrap();
        let vocab = Vocabulary::for_templates(&mkg);
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            text_layers: 1,
            vision_layers: 1,
            fusion_layers: 1,
            ffn_dim: 12,
            max_len: 16,
            ..ModelConfig::default()
        }
        .with_data(&vocab, &mkg)
        .unwrap();
        (mkg, vocab, cfg)
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        let (_, _, cfg) = tiny();
        for bad in [
            ModelConfig { heads: 3, ..cfg.clone() },
            ModelConfig { fusion_layers: 0, ..cfg.clone() },
            ModelConfig { num_entities: 0, ..cfg.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn output_shapes() {
        let (mkg, vocab, cfg) = tiny();
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg, &mut store, 0).unwrap();
        let q = build_reason_template(mkg.train[0].head, mkg.train[0].relation, None, &mkg, &vocab).unwrap();
        let mut tape = Tape::new();
        let ht = bb.encode_text(&mut tape, &store, &q).unwrap();
        assert_eq!(tape.value(ht).shape(), &[q.token_ids.len(), 8]);
        let hv = bb.encode_vision(&mut tape, &store, &mkg.visual[0]).unwrap();
        assert_eq!(tape.value(hv).shape(), &[2, 8]);
        let fused = bb.encode_multimodal(&mut tape, &store, ht, Some(hv)).unwrap();
        assert_eq!(tape.value(fused).shape(), &[q.token_ids.len(), 8]);
        let logits = bb.query_logits(&mut tape, &store, &q, &mkg).unwrap();
        assert_eq!(tape.value(logits).shape(), &[1, 6]);
        let missing = bb.encode_vision(&mut tape, &store, &VisualAttribute::Missing).unwrap();
        assert_eq!(tape.value(missing).shape(), &[1, 8]);
    }

    #[test]
    fn over_length_is_an_error() {
        let (mkg, vocab, cfg) = tiny();
        let mut store = ParamStore::new();
        let bb = Backbone::new(ModelConfig { max_len: 3, ..cfg }, &mut store, 0).unwrap();
        let q = build_reason_template(mkg.train[0].head, mkg.train[0].relation, None, &mkg, &vocab).unwrap();
        let err = bb.encode_text(&mut Tape::new(), &store, &q).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { max: 3, .. }));
    }

    #[test]
    fn cross_entropy_by_hand() {
        let logits = Tensor::row(vec![2.0, 1.0, 0.0]);
        let expect = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((cross_entropy_loss(&logits, EntityId(0)).unwrap() - expect).abs() < 1e-15);
        let uniform = Tensor::row(vec![0.3; 7]);
        assert!((cross_entropy_loss(&uniform, EntityId(4)).unwrap() - 7f64.ln()).abs() < 1e-14);
        let sharp = Tensor::row(vec![30.0, 0.0, 0.0]);
        assert!(cross_entropy_loss(&sharp, EntityId(0)).unwrap() < 1e-12);
    }

    #[test]
    fn logits_by_hand() {
        let h = Tensor::row(vec![1.0, -2.0]);
        let table = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![-1.0, 3.0]]).unwrap();
        assert_eq!(mlm_logits(&h, &table).unwrap().data(), &[1.0, -0.5, -7.0]);
    }

    #[test]
    fn backbone_loss_passes_gradient_check() {
        let (mkg, vocab, cfg) = tiny();
        let t = mkg.train[0];
        let q = build_reason_template(t.head, t.relation, Some(t.tail), &mkg, &vocab).unwrap();
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg, &mut store, 3).unwrap();
        let report = finite_diff_check(
            &mut store,
            |s| {
                let mut tape = Tape::new();
                let loss = bb.query_loss(&mut tape, s, &q, &mkg)?;
                let grads = tape.backward(loss)?;
                tape.accumulate_param_grads(&grads, s, 1.0)?;
                Ok(tape.value(loss).item())
            },
            GradCheckOptions {
                max_entries_per_block: 6,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
