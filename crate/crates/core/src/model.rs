//! Text-conditioned box proposal generator.
//!
//! Frame -> patch tokens -> language-guided query selection -> cross-modality
//! decoder (self-attention, visual cross-attention, text cross-attention,
//! feed-forward; pre-norm residual blocks) -> box and confidence heads.
//!
//! The token embedding table is frozen. Everything else is trainable.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::ModelError;
use crate::geometry::BoundingBox;
use crate::params::{init_linear, init_normal, Binding, ParamId, ParamStore};
use crate::rng;
use crate::synthdata::vocab;
use crate::synthdata::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub queries: usize,
    pub ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            dim: 64,
            heads: 4,
            layers: 6,
            queries: 8,
            ffn_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_visual_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_features(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(ModelError::Shape(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Shape(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(ModelError::Shape("dim must be a multiple of 4".into()));
        }
        if self.queries == 0 || self.queries > self.num_visual_tokens() {
            return Err(ModelError::TooManyQueries {
                queries: self.queries,
                tokens: self.num_visual_tokens(),
            });
        }
        Ok(())
    }
}

/// Patch tokens of one frame, `N_v x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens {
    pub tokens: Mat,
}

/// Frozen token vectors of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTokens {
    /// `L_max x D`, one row per position (pad rows included).
    pub tokens: Mat,
    /// Whether each position holds a non-pad token.
    pub valid: Vec<bool>,
    /// Mean of the non-pad rows.
    pub pooled: Vec<f64>,
}

impl TextTokens {
    pub fn valid_rows(&self) -> Vec<usize> {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
            .collect()
    }

    /// Same sentence with every position masked out.
    pub fn masked(&self) -> Self {
        Self {
            valid: vec![false; self.valid.len()],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectQuerySet {
    /// `N_q x D`.
    pub queries: Mat,
    /// Visual token index that seeded each query.
    pub provenance: Vec<usize>,
    /// Text-similarity score of each seed token.
    pub seed_scores: Vec<f64>,
    /// `N_q x 2` anchor centers: each query's attention-weighted mean of
    /// patch centers over the visual tokens.
    pub anchors: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.proposals.iter().map(|p| p.confidence).collect()
    }
}

/// Highest-confidence proposal, ties to the lowest index.
pub fn select_top(p: &ProposalSet) -> Result<(usize, Proposal), ModelError> {
    let first = p.proposals.first().ok_or(ModelError::EmptyProposals)?;
    let mut best = (0, *first);
    for (i, cand) in p.proposals.iter().enumerate().skip(1) {
        if cand.confidence > best.1.confidence {
            best = (i, *cand);
        }
    }
    Ok(best)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Squashes raw head outputs into a proposal set: `N_q x 4` box logits and
/// `N_q` confidence logits.
pub fn proposals_from_logits(box_logits: &Mat, conf_logits: &[f64]) -> ProposalSet {
    let proposals = box_logits
        .rows()
        .into_iter()
        .zip(conf_logits)
        .map(|(row, &c)| Proposal {
            bbox: BoundingBox::raw(
                sigmoid(row[0]),
                sigmoid(row[1]),
                sigmoid(row[2]),
                sigmoid(row[3]),
            ),
            confidence: sigmoid(c),
        })
        .collect();
    ProposalSet { proposals }
}

/// Tape handles for one frame's head outputs.
#[derive(Debug, Clone)]
pub struct ProposalVars {
    /// `N_q x 4` squashed boxes.
    pub boxes: Var,
    /// `N_q x 1` confidence logits.
    pub conf_logits: Var,
    pub provenance: Vec<usize>,
}

impl ProposalVars {
    pub fn to_set(&self, tape: &Tape) -> ProposalSet {
        let boxes = tape.value(self.boxes);
        let conf = tape.value(self.conf_logits);
        let proposals = boxes
            .rows()
            .into_iter()
            .zip(conf.iter())
            .map(|(b, &c)| Proposal {
                bbox: BoundingBox::raw(b[0], b[1], b[2], b[3]),
                confidence: sigmoid(c),
            })
            .collect();
        ProposalSet { proposals }
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    self_norm: NormIds,
    self_attn: AttnIds,
    vis_norm: NormIds,
    vis_attn: AttnIds,
    txt_norm: NormIds,
    txt_attn: AttnIds,
    ffn_norm: NormIds,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    patch_w1: ParamId,
    patch_b1: ParamId,
    patch_w2: ParamId,
    patch_b2: ParamId,
    backbone_norm: NormIds,
    query_content: ParamId,
    layers: Vec<LayerIds>,
    head_norm: NormIds,
    box_w: [ParamId; 3],
    box_b: [ParamId; 3],
    conf_w: ParamId,
    conf_b: ParamId,
    text_embedding: ParamId,
    point_w: ParamId,
}

/// Per-layer key/value projections of a memory sequence, shared across
/// every query set decoded against it.
#[derive(Debug, Clone)]
pub struct Memory {
    kv: Vec<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct ProposalModel {
    cfg: ModelConfig,
    params: ParamStore,
    ids: Ids,
    pos: Mat,
}

struct Builder<'a, R: rand::Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: rand::Rng> Builder<'_, R> {
    fn add(&mut self, name: &str, value: Mat) -> ParamId {
        self.store.add(name, value, true)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> ParamId {
        let v = init_linear(self.rng, fan_in, fan_out) * gain;
        self.add(name, v)
    }

    fn zeros(&mut self, name: &str, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((1, cols)))
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> NormIds {
        NormIds {
            gamma: self.add(&format!("{prefix}.gamma"), Mat::ones((1, dim))),
            beta: self.zeros(&format!("{prefix}.beta"), dim),
        }
    }

    fn attn(&mut self, prefix: &str, dim: usize) -> AttnIds {
        AttnIds {
            wq: self.linear(&format!("{prefix}.wq"), dim, dim, 1.0),
            wk: self.linear(&format!("{prefix}.wk"), dim, dim, 1.0),
            wv: self.linear(&format!("{prefix}.wv"), dim, dim, 1.0),
            wo: self.linear(&format!("{prefix}.wo"), dim, dim, 0.5),
        }
    }
}

/// Fixed 2-D sinusoidal encoding of patch centers, `N_v x D`.
fn positional_encoding(cfg: &ModelConfig) -> Mat {
    let g = cfg.grid();
    let per_axis = cfg.dim / 2;
    let freqs = per_axis / 2;
    let mut pos = Mat::zeros((g * g, cfg.dim));
    for r in 0..g {
        for c in 0..g {
            let n = r * g + c;
            let coords = [(c as f64 + 0.5) / g as f64, (r as f64 + 0.5) / g as f64];
            for (axis, &u) in coords.iter().enumerate() {
                for k in 0..freqs {
                    let angle = std::f64::consts::PI * (k + 1) as f64 * u;
                    pos[[n, axis * per_axis + 2 * k]] = angle.sin();
                    pos[[n, axis * per_axis + 2 * k + 1]] = angle.cos();
                }
            }
        }
    }
    pos
}

impl ProposalModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "model.init");
        let d = cfg.dim;
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let patch_w1 = b.linear("backbone.patch.w1", cfg.patch_features(), d, 1.0);
        let patch_b1 = b.zeros("backbone.patch.b1", d);
        let patch_w2 = b.linear("backbone.patch.w2", d, d, 1.0);
        let patch_b2 = b.zeros("backbone.patch.b2", d);
        let backbone_norm = b.norm("backbone.norm", d);
        let query_content = {
            let v = init_normal(b.rng, (cfg.queries, d), 0.1);
            b.add("queries.content", v)
        };
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("decoder.layer{l}");
                LayerIds {
                    self_norm: b.norm(&format!("{p}.self_norm"), d),
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    vis_norm: b.norm(&format!("{p}.vis_norm"), d),
                    vis_attn: b.attn(&format!("{p}.vis_attn"), d),
                    txt_norm: b.norm(&format!("{p}.txt_norm"), d),
                    txt_attn: b.attn(&format!("{p}.txt_attn"), d),
                    ffn_norm: b.norm(&format!("{p}.ffn_norm"), d),
                    ffn_w1: b.linear(&format!("{p}.ffn.w1"), d, cfg.ffn_dim, 1.0),
                    ffn_b1: b.zeros(&format!("{p}.ffn.b1"), cfg.ffn_dim),
                    ffn_w2: b.linear(&format!("{p}.ffn.w2"), cfg.ffn_dim, d, 0.5),
                    ffn_b2: b.zeros(&format!("{p}.ffn.b2"), d),
                }
            })
            .collect();
        let head_norm = b.norm("head.norm", d);
        let box_w = [
            b.linear("head.box.w0", d, d, 1.0),
            b.linear("head.box.w1", d, d, 1.0),
            b.linear("head.box.w2", d, 4, 0.05),
        ];
        let box_b = [
            b.zeros("head.box.b0", d),
            b.zeros("head.box.b1", d),
            b.zeros("head.box.b2", 4),
        ];
        let conf_w = b.linear("head.conf.w", d, 1, 0.1);
        let conf_b = b.zeros("head.conf.b", 1);
        let text_embedding = {
            let v = init_normal(b.rng, (vocab::vocab_size(), d), 1.0);
            store.add("text.embedding", v, false)
        };
        let point_w = store.add("head.point.w", Mat::eye(d), true);
        let ids = Ids {
            patch_w1,
            patch_b1,
            patch_w2,
            patch_b2,
            backbone_norm,
            query_content,
            layers,
            head_norm,
            box_w,
            box_b,
            conf_w,
            conf_b,
            text_embedding,
            point_w,
        };
        Ok(Self {
            pos: positional_encoding(&cfg),
            cfg,
            params: store,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces parameter values, keeping names, shapes and the partition.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<(), ModelError> {
        if other.len() != self.params.len() {
            return Err(ModelError::Shape(format!(
                "{} parameters, expected {}",
                other.len(),
                self.params.len()
            )));
        }
        for (id, p) in other.iter() {
            let mine = self.params.param(id);
            if mine.name != p.name || mine.value.dim() != p.value.dim() {
                return Err(ModelError::Shape(format!(
                    "parameter {} ({:?}) does not match {} ({:?})",
                    p.name,
                    p.value.dim(),
                    mine.name,
                    mine.value.dim()
                )));
            }
        }
        for (id, p) in other.iter() {
            *self.params.get_mut(id) = p.value.clone();
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.params.bind(tape)
    }

    // ---- frame encoder --------------------------------------------------

    fn patchify(&self, frame: &Frame) -> Result<Mat, ModelError> {
        let s = self.cfg.image_size;
        if frame.width != s || frame.height != s || frame.rgb.len() != s * s * 3 {
            return Err(ModelError::Shape(format!(
                "frame is {}x{}, model expects {s}x{s}",
                frame.width, frame.height
            )));
        }
        let (g, p) = (self.cfg.grid(), self.cfg.patch);
        let mut out = Mat::zeros((g * g, self.cfg.patch_features()));
        for r in 0..g {
            for c in 0..g {
                let mut row = out.row_mut(r * g + c);
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let px = frame.pixel(c * p + dx, r * p + dy);
                        for ch in px {
                            row[k] = ch as f64 / 255.0 - 0.5;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn norm_on(&self, tape: &mut Tape, bind: &Binding, x: Var, ids: NormIds) -> Var {
        let n = tape.layer_norm_rows(x);
        let n = tape.mul_row(n, bind.var(ids.gamma));
        tape.add_row(n, bind.var(ids.beta))
    }

    fn linear_on(&self, tape: &mut Tape, bind: &Binding, x: Var, w: ParamId, b: ParamId) -> Var {
        let y = tape.matmul(x, bind.var(w));
        tape.add_row(y, bind.var(b))
    }

    /// Patch tokens on the tape, `N_v x D`.
    pub fn encode_frame_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        frame: &Frame,
    ) -> Result<Var, ModelError> {
        let patches = tape.constant(self.patchify(frame)?);
        let h = self.linear_on(tape, bind, patches, self.ids.patch_w1, self.ids.patch_b1);
        let h = tape.relu(h);
        let h = self.linear_on(tape, bind, h, self.ids.patch_w2, self.ids.patch_b2);
        let pos = tape.constant(self.pos.clone());
        let h = tape.add(h, pos);
        Ok(self.norm_on(tape, bind, h, self.ids.backbone_norm))
    }

    pub fn encode_frame(&self, frame: &Frame) -> Result<VisualTokens, ModelError> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let v = self.encode_frame_on(&mut tape, &bind, frame)?;
        Ok(VisualTokens {
            tokens: tape.value(v).clone(),
        })
    }

    // ---- text encoder (frozen) -------------------------------------------

    pub fn encode_text(&self, ids: &[usize]) -> Result<TextTokens, ModelError> {
        let table = self.params.get(self.ids.text_embedding);
        let d = self.cfg.dim;
        let mut tokens = Mat::zeros((ids.len(), d));
        let mut valid = Vec::with_capacity(ids.len());
        let mut pooled = vec![0.0; d];
        for (row, &id) in ids.iter().enumerate() {
            if id >= table.nrows() {
                return Err(ModelError::InvalidToken(id));
            }
            tokens.row_mut(row).assign(&table.row(id));
            let is_valid = id != vocab::PAD;
            valid.push(is_valid);
            if is_valid {
                for (acc, &v) in pooled.iter_mut().zip(table.row(id)) {
                    *acc += v;
                }
            }
        }
        let n = valid.iter().filter(|&&v| v).count();
        if n > 0 {
            pooled.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(TextTokens {
            tokens,
            valid,
            pooled,
        })
    }

    /// The non-pad text rows as a constant, `None` when all are masked.
    pub fn text_on(&self, tape: &mut Tape, txt: &TextTokens) -> Option<Var> {
        let rows = txt.valid_rows();
        if rows.is_empty() {
            return None;
        }
        Some(tape.constant(txt.tokens.select(ndarray::Axis(0), &rows)))
    }

    // ---- query generation -------------------------------------------------

    /// Ranks visual tokens by their best dot product with any text token.
    /// Returns `(token index, score)` for the top `n`, best first, ties to the
    /// lower index.
    pub fn rank_tokens(
        vis: &Mat,
        txt: Option<&Mat>,
        n: usize,
    ) -> Result<Vec<(usize, f64)>, ModelError> {
        if n > vis.nrows() {
            return Err(ModelError::TooManyQueries {
                queries: n,
                tokens: vis.nrows(),
            });
        }
        let scale = 1.0 / (vis.ncols() as f64).sqrt();
        let scores: Vec<f64> = match txt {
            Some(t) => {
                let sim = vis.dot(&t.t());
                sim.rows()
                    .into_iter()
                    .map(|r| r.fold(f64::NEG_INFINITY, |m, &e| m.max(e)) * scale)
                    .collect()
            }
            None => vec![0.0; vis.nrows()],
        };
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(order.into_iter().take(n).map(|i| (i, scores[i])).collect())
    }

    /// Selected-token queries on the tape. Returns `(queries, provenance,
    /// seed scores)` where the scores are an `N_q x 1` tape value.
    pub fn generate_queries_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        vis: Var,
        txt: Option<Var>,
    ) -> Result<(Var, Vec<usize>, Var), ModelError> {
        let ranked = Self::rank_tokens(
            tape.value(vis),
            txt.map(|t| tape.value(t)),
            self.cfg.queries,
        )?;
        let provenance: Vec<usize> = ranked.iter().map(|(i, _)| *i).collect();
        let seeds = tape.select_rows(vis, &provenance);
        let queries = tape.add(seeds, bind.var(self.ids.query_content));
        let scores = match txt {
            Some(t) => {
                let sim = tape.matmul_t(seeds, t);
                let best = tape.max_cols(sim);
                tape.scale(best, 1.0 / (self.cfg.dim as f64).sqrt())
            }
            None => tape.constant(Mat::zeros((self.cfg.queries, 1))),
        };
        Ok((queries, provenance, scores))
    }

    /// Anchor centers: softmax attention of each normalized query over the
    /// visual tokens, then the weighted mean of patch centers. `N_q x 2`.
    pub fn anchors_on(&self, tape: &mut Tape, bind: &Binding, queries: Var, vis: Var) -> Var {
        let g = self.cfg.grid();
        let mut centers = Mat::zeros((g * g, 2));
        for tok in 0..g * g {
            centers[[tok, 0]] = ((tok % g) as f64 + 0.5) / g as f64;
            centers[[tok, 1]] = ((tok / g) as f64 + 0.5) / g as f64;
        }
        let h = self.norm_on(tape, bind, queries, self.ids.head_norm);
        let h = tape.matmul(h, bind.var(self.ids.point_w));
        let sim = tape.matmul_t(h, vis);
        let sim = tape.scale(sim, 1.0 / (self.cfg.dim as f64).sqrt());
        let w = tape.softmax_rows(sim);
        let centers = tape.constant(centers);
        tape.matmul(w, centers)
    }

    pub fn generate_queries(
        &self,
        vis: &VisualTokens,
        txt: &TextTokens,
    ) -> Result<ObjectQuerySet, ModelError> {
        self.check_visual(vis)?;
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let v = tape.constant(vis.tokens.clone());
        let t = self.text_on(&mut tape, txt);
        let (q, provenance, s) = self.generate_queries_on(&mut tape, &bind, v, t)?;
        let a = self.anchors_on(&mut tape, &bind, q, v);
        Ok(ObjectQuerySet {
            queries: tape.value(q).clone(),
            provenance,
            seed_scores: tape.value(s).iter().copied().collect(),
            anchors: tape.value(a).clone(),
        })
    }

    // ---- decoder ------------------------------------------------------------

    fn check_visual(&self, vis: &VisualTokens) -> Result<(), ModelError> {
        let want = (self.cfg.num_visual_tokens(), self.cfg.dim);
        if vis.tokens.dim() != want {
            return Err(ModelError::Shape(format!(
                "visual tokens {:?}, expected {want:?}",
                vis.tokens.dim()
            )));
        }
        Ok(())
    }

    fn memory_on(&self, tape: &mut Tape, bind: &Binding, seq: Var, text: bool) -> Memory {
        let kv = self
            .ids
            .layers
            .iter()
            .map(|l| {
                let a = if text { l.txt_attn } else { l.vis_attn };
                (
                    tape.matmul(seq, bind.var(a.wk)),
                    tape.matmul(seq, bind.var(a.wv)),
                )
            })
            .collect();
        Memory { kv }
    }

    /// Key/value projections of visual tokens for every decoder layer.
    pub fn visual_memory_on(&self, tape: &mut Tape, bind: &Binding, vis: Var) -> Memory {
        self.memory_on(tape, bind, vis, false)
    }

    /// Key/value projections of text tokens, `None` when all are masked.
    pub fn text_memory_on(&self, tape: &mut Tape, bind: &Binding, txt: Option<Var>) -> Option<Memory> {
        txt.map(|t| self.memory_on(tape, bind, t, true))
    }

    fn attention(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        keys: Var,
        values: Var,
        ids: AttnIds,
    ) -> Var {
        let q = tape.matmul(x, bind.var(ids.wq));
        let heads = self.cfg.heads;
        let hd = self.cfg.dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * hd, hd);
                let kh = tape.slice_cols(keys, h * hd, hd);
                let vh = tape.slice_cols(values, h * hd, hd);
                let logits = tape.matmul_t(qh, kh);
                let logits = tape.scale(logits, scale);
                let w = tape.softmax_rows(logits);
                tape.matmul(w, vh)
            })
            .collect();
        let cat = tape.concat_cols(&outs);
        tape.matmul(cat, bind.var(ids.wo))
    }

    pub fn decode_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        queries: Var,
        vis: &Memory,
        txt: Option<&Memory>,
    ) -> Var {
        let mut x = queries;
        for (l, layer) in self.ids.layers.iter().enumerate() {
            let n = self.norm_on(tape, bind, x, layer.self_norm);
            let k = tape.matmul(n, bind.var(layer.self_attn.wk));
            let v = tape.matmul(n, bind.var(layer.self_attn.wv));
            let a = self.attention(tape, bind, n, k, v, layer.self_attn);
            x = tape.add(x, a);

            let n = self.norm_on(tape, bind, x, layer.vis_norm);
            let (k, v) = vis.kv[l];
            let a = self.attention(tape, bind, n, k, v, layer.vis_attn);
            x = tape.add(x, a);

            if let Some(txt) = txt {
                let n = self.norm_on(tape, bind, x, layer.txt_norm);
                let (k, v) = txt.kv[l];
                let a = self.attention(tape, bind, n, k, v, layer.txt_attn);
                x = tape.add(x, a);
            }

            let n = self.norm_on(tape, bind, x, layer.ffn_norm);
            let h = self.linear_on(tape, bind, n, layer.ffn_w1, layer.ffn_b1);
            let h = tape.relu(h);
            let h = self.linear_on(tape, bind, h, layer.ffn_w2, layer.ffn_b2);
            x = tape.add(x, h);
        }
        x
    }

    pub fn cross_modality_decode(
        &self,
        q: &ObjectQuerySet,
        vis: &VisualTokens,
        txt: &TextTokens,
    ) -> Result<ObjectQuerySet, ModelError> {
        self.check_visual(vis)?;
        if q.queries.ncols() != self.cfg.dim {
            return Err(ModelError::Shape(format!(
                "queries have width {}, expected {}",
                q.queries.ncols(),
                self.cfg.dim
            )));
        }
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let v = tape.constant(vis.tokens.clone());
        let t = self.text_on(&mut tape, txt);
        let vm = self.visual_memory_on(&mut tape, &bind, v);
        let tm = self.text_memory_on(&mut tape, &bind, t);
        let qv = tape.constant(q.queries.clone());
        let out = self.decode_on(&mut tape, &bind, qv, &vm, tm.as_ref());
        let a = self.anchors_on(&mut tape, &bind, out, v);
        Ok(ObjectQuerySet {
            queries: tape.value(out).clone(),
            anchors: tape.value(a).clone(),
            ..q.clone()
        })
    }

    // ---- heads ------------------------------------------------------------------

    /// Anchor box of a visual token: its patch center, two patches wide.
    /// The head takes its centers from [`ObjectQuerySet::anchors`] and only
    /// the side from here.
    pub fn reference_box(&self, token: usize) -> BoundingBox {
        let g = self.cfg.grid();
        let (r, c) = (token / g, token % g);
        let side = self.anchor_side();
        BoundingBox::raw(
            (c as f64 + 0.5) / g as f64,
            (r as f64 + 0.5) / g as f64,
            side,
            side,
        )
    }

    fn anchor_side(&self) -> f64 {
        (2.0 / self.cfg.grid() as f64).min(0.5)
    }

    /// Raw head outputs: `(N_q x 4 box logits, N_q x 1 confidence logits)`.
    pub fn head_logits_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        queries: Var,
        seed_scores: Var,
        anchors: Var,
    ) -> (Var, Var) {
        let n = self.norm_on(tape, bind, queries, self.ids.head_norm);
        let mut h = n;
        for k in 0..3 {
            h = self.linear_on(tape, bind, h, self.ids.box_w[k], self.ids.box_b[k]);
            if k < 2 {
                h = tape.relu(h);
            }
        }
        let centers = tape.logit(anchors);
        let side = logit(self.anchor_side());
        let sides = tape.constant(Mat::from_elem((tape.shape(anchors).0, 2), side));
        let refs = tape.concat_cols(&[centers, sides]);
        let box_logits = tape.add(h, refs);
        let c = self.linear_on(tape, bind, n, self.ids.conf_w, self.ids.conf_b);
        let conf_logits = tape.add(c, seed_scores);
        (box_logits, conf_logits)
    }

    pub fn predict_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        queries: Var,
        provenance: Vec<usize>,
        seed_scores: Var,
        anchors: Var,
    ) -> ProposalVars {
        let (box_logits, conf_logits) =
            self.head_logits_on(tape, bind, queries, seed_scores, anchors);
        ProposalVars {
            boxes: tape.sigmoid(box_logits),
            conf_logits,
            provenance,
        }
    }

    pub fn predict_proposals(&self, q: &ObjectQuerySet) -> Result<ProposalSet, ModelError> {
        let n = q.queries.nrows();
        if q.provenance.len() != n || q.seed_scores.len() != n || q.anchors.dim() != (n, 2) {
            return Err(ModelError::Shape("query set fields disagree in length".into()));
        }
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let qv = tape.constant(q.queries.clone());
        let s = tape.constant(
            Mat::from_shape_vec((q.seed_scores.len(), 1), q.seed_scores.clone())
                .expect("column"),
        );
        let a = tape.constant(q.anchors.clone());
        let (b, c) = self.head_logits_on(&mut tape, &bind, qv, s, a);
        let conf: Vec<f64> = tape.value(c).iter().copied().collect();
        Ok(proposals_from_logits(tape.value(b), &conf))
    }

    // ---- full pipeline ----------------------------------------------------------

    /// One frame through the whole generator, on an existing tape.
    pub fn forward_frame_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        vis: Var,
        vis_memory: &Memory,
        txt: Option<Var>,
        txt_memory: Option<&Memory>,
    ) -> Result<ProposalVars, ModelError> {
        let (q, provenance, scores) = self.generate_queries_on(tape, bind, vis, txt)?;
        let decoded = self.decode_on(tape, bind, q, vis_memory, txt_memory);
        let anchors = self.anchors_on(tape, bind, decoded, vis);
        Ok(self.predict_on(tape, bind, decoded, provenance, scores, anchors))
    }

    /// Frame-by-frame inference. Each frame is processed on its own tape with
    /// no state carried between frames; the sentence is encoded once.
    pub fn forward_clip(
        &self,
        frames: &[Frame],
        token_ids: &[usize],
    ) -> Result<Vec<FrameOutput>, ModelError> {
        let txt = self.encode_text(token_ids)?;
        frames
            .iter()
            .map(|f| self.forward_single(f, &txt))
            .collect()
    }

    pub fn forward_single(&self, frame: &Frame, txt: &TextTokens) -> Result<FrameOutput, ModelError> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let v = self.encode_frame_on(&mut tape, &bind, frame)?;
        let t = self.text_on(&mut tape, txt);
        let vm = self.visual_memory_on(&mut tape, &bind, v);
        let tm = self.text_memory_on(&mut tape, &bind, t);
        let out = self.forward_frame_on(&mut tape, &bind, v, &vm, t, tm.as_ref())?;
        let proposals = out.to_set(&tape);
        let (selected, _) = select_top(&proposals)?;
        Ok(FrameOutput {
            proposals,
            selected,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub proposals: ProposalSet,
    pub selected: usize,
}

impl FrameOutput {
    pub fn selected_proposal(&self) -> Proposal {
        self.proposals.proposals[self.selected]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_video, tokenize, GenerationSpec};
    use ndarray::array;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            ..ModelConfig::default()
        }
    }

    fn frame(seed: u64) -> Frame {
        generate_video(&GenerationSpec::default(), seed).unwrap().frames[0].clone()
    }

    #[test]
    fn frame_tokens_shape_and_determinism() {
        let m = ProposalModel::new(small_cfg(), 0).unwrap();
        let f = frame(1);
        let a = m.encode_frame(&f).unwrap();
        assert_eq!(a.tokens.dim(), (64, 64));
        assert_eq!(a, m.encode_frame(&f).unwrap());
        assert!(a.tokens.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn one_patch_change_changes_tokens() {
        let m = ProposalModel::new(small_cfg(), 0).unwrap();
        let f = frame(1);
        let mut g = f.clone();
        for y in 0..8 {
            for x in 0..8 {
                g.put(x, y, [255, 255, 255]);
            }
        }
        assert_ne!(m.encode_frame(&f).unwrap(), m.encode_frame(&g).unwrap());
    }

    #[test]
    fn wrong_frame_size_is_rejected() {
        let m = ProposalModel::new(small_cfg(), 0).unwrap();
        let f = Frame::filled(32, 32, [0, 0, 0]);
        assert!(matches!(m.encode_frame(&f), Err(ModelError::Shape(_))));
    }

    #[test]
    fn text_pooling_ignores_padding() {
        let m = ProposalModel::new(small_cfg(), 0).unwrap();
        let ids = tokenize("the red circle moving right").unwrap();
        let t = m.encode_text(&ids).unwrap();
        let mut short = ids.clone();
        short.truncate(7);
        assert_eq!(t.pooled, m.encode_text(&short).unwrap().pooled);
        assert_eq!(t.valid.iter().filter(|&&v| v).count(), 7);
        let other = m
            .encode_text(&tokenize("the red circle moving left").unwrap())
            .unwrap();
        assert_ne!(t.pooled, other.pooled);
        assert!(matches!(
            m.encode_text(&[1, 999]),
            Err(ModelError::InvalidToken(999))
        ));
    }

    #[test]
    fn token_ranking() {
        // Hand-set similarities: scores are (0.1, 0.9, 0.5, 0.7) after scaling.
        let vis = array![[0.1, 0.0], [0.9, 0.0], [0.5, 0.0], [0.7, 0.0]] * 2f64.sqrt();
        let txt = array![[1.0, 0.0], [0.0, 1.0]];
        let ranked = ProposalModel::rank_tokens(&vis, Some(&txt), 2).unwrap();
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 3]);
        let scaled = &txt * 3.5;
        let again = ProposalModel::rank_tokens(&vis, Some(&scaled), 2).unwrap();
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), again.iter().map(|r| r.0).collect::<Vec<_>>());
        let all = ProposalModel::rank_tokens(&vis, Some(&txt), 4).unwrap();
        assert_eq!(all.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 3, 2, 0]);
        assert!(matches!(
            ProposalModel::rank_tokens(&vis, Some(&txt), 5),
            Err(ModelError::TooManyQueries { .. })
        ));
    }

    #[test]
    fn exhaustive_selection_when_queries_equal_tokens() {
        let cfg = ModelConfig {
            image_size: 16,
            patch: 8,
            queries: 4,
            layers: 1,
            ..ModelConfig::default()
        };
        let m = ProposalModel::new(cfg, 3).unwrap();
        let f = Frame::filled(16, 16, [10, 200, 30]);
        let vis = m.encode_frame(&f).unwrap();
        let txt = m.encode_text(&tokenize("the green square staying still").unwrap()).unwrap();
        let q = m.generate_queries(&vis, &txt).unwrap();
        let mut sorted = q.provenance.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert!(q.seed_scores.windows(2).all(|w| w[0] >= w[1]));
    }

    fn zero_outputs(m: &mut ProposalModel) {
        let names: Vec<String> = m
            .params()
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|n| n.ends_with(".wo") || n.ends_with("ffn.w2") || n.ends_with("ffn.b2"))
            .collect();
        for n in names {
            let id = m.params().id(&n).unwrap();
            m.params_mut().get_mut(id).fill(0.0);
        }
    }

    fn decode_inputs(m: &ProposalModel) -> (ObjectQuerySet, VisualTokens, TextTokens) {
        let vis = m.encode_frame(&frame(2)).unwrap();
        let txt = m
            .encode_text(&tokenize("the blue triangle moving up").unwrap())
            .unwrap();
        let q = m.generate_queries(&vis, &txt).unwrap();
        (q, vis, txt)
    }

    #[test]
    fn zeroed_output_projections_make_decoder_identity() {
        let mut m = ProposalModel::new(ModelConfig::default(), 4).unwrap();
        zero_outputs(&mut m);
        let (q, vis, txt) = decode_inputs(&m);
        let out = m.cross_modality_decode(&q, &vis, &txt).unwrap();
        assert_eq!(out.queries, q.queries);
    }

    #[test]
    fn anchors_are_centers_inside_the_frame() {
        let m = ProposalModel::new(small_cfg(), 9).unwrap();
        let (q, _, _) = decode_inputs(&m);
        assert_eq!(q.anchors.dim(), (m.config().queries, 2));
        assert!(q.anchors.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn zero_pointer_projection_anchors_at_frame_center() {
        let mut m = ProposalModel::new(small_cfg(), 9).unwrap();
        let id = m.params().id("head.point.w").unwrap();
        m.params_mut().get_mut(id).fill(0.0);
        let (q, _, _) = decode_inputs(&m);
        // Uniform attention averages the patch centers of a symmetric grid.
        assert!(q.anchors.iter().all(|&a| (a - 0.5).abs() < 1e-12));
    }

    #[test]
    fn decoder_is_permutation_equivariant() {
        let m = ProposalModel::new(small_cfg(), 5).unwrap();
        let (q, vis, txt) = decode_inputs(&m);
        let out = m.cross_modality_decode(&q, &vis, &txt).unwrap();
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let permuted = ObjectQuerySet {
            queries: q.queries.select(ndarray::Axis(0), &perm),
            provenance: perm.iter().map(|&i| q.provenance[i]).collect(),
            seed_scores: perm.iter().map(|&i| q.seed_scores[i]).collect(),
            anchors: q.anchors.select(ndarray::Axis(0), &perm),
        };
        let out_p = m.cross_modality_decode(&permuted, &vis, &txt).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..m.config().dim {
                assert!((out_p.queries[[k, c]] - out.queries[[i, c]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn text_tokens_change_decoder_output() {
        let m = ProposalModel::new(small_cfg(), 6).unwrap();
        let (q, vis, txt) = decode_inputs(&m);
        let with = m.cross_modality_decode(&q, &vis, &txt).unwrap();
        let without = m.cross_modality_decode(&q, &vis, &txt.masked()).unwrap();
        assert_ne!(with.queries, without.queries);
    }

    #[test]
    fn squashing_zero_logits() {
        let p = proposals_from_logits(&Mat::zeros((3, 4)), &[0.0; 3]);
        assert_eq!(p.len(), 3);
        for prop in &p.proposals {
            assert_eq!(prop.bbox.to_array(), [0.5; 4]);
            assert_eq!(prop.confidence, 0.5);
        }
    }

    #[test]
    fn proposals_match_query_count() {
        let m = ProposalModel::new(small_cfg(), 7).unwrap();
        let (q, vis, txt) = decode_inputs(&m);
        let d = m.cross_modality_decode(&q, &vis, &txt).unwrap();
        let p = m.predict_proposals(&d).unwrap();
        assert_eq!(p.len(), m.config().queries);
        for prop in &p.proposals {
            assert!(prop.bbox.to_array().iter().all(|v| *v > 0.0 && *v < 1.0));
            assert!(prop.confidence > 0.0 && prop.confidence < 1.0);
        }
    }

    fn set(conf: &[f64]) -> ProposalSet {
        ProposalSet {
            proposals: conf
                .iter()
                .enumerate()
                .map(|(i, &c)| Proposal {
                    bbox: BoundingBox::raw(0.1 * (i + 1) as f64, 0.5, 0.1, 0.1),
                    confidence: c,
                })
                .collect(),
        }
    }

    #[test]
    fn top_selection() {
        assert_eq!(select_top(&set(&[0.2, 0.9, 0.4])).unwrap().0, 1);
        assert_eq!(select_top(&set(&[0.3, 0.3, 0.3])).unwrap().0, 0);
        let transformed: Vec<f64> = [0.2, 0.9, 0.4].iter().map(|c: &f64| c.powi(3) + 2.0).collect();
        assert_eq!(select_top(&set(&transformed)).unwrap().0, 1);
        assert!(matches!(
            select_top(&ProposalSet::default()),
            Err(ModelError::EmptyProposals)
        ));
    }

    #[test]
    fn clip_forward_is_per_frame() {
        let m = ProposalModel::new(small_cfg(), 8).unwrap();
        let v = generate_video(&GenerationSpec::default(), 9).unwrap();
        let ids = tokenize(&v.expressions[0].text).unwrap();
        let full = m.forward_clip(&v.frames, &ids).unwrap();
        let prefix = m.forward_clip(&v.frames[..3], &ids).unwrap();
        assert_eq!(&full[..3], &prefix[..]);
        let single = m.forward_clip(&v.frames[..1], &ids).unwrap();
        assert_eq!(single[0], full[0]);
        let dup = vec![v.frames[4].clone(), v.frames[2].clone(), v.frames[4].clone()];
        let out = m.forward_clip(&dup, &ids).unwrap();
        assert_eq!(out[0], out[2]);
    }

    #[test]
    fn text_table_is_the_only_frozen_parameter() {
        let m = ProposalModel::new(small_cfg(), 0).unwrap();
        let frozen: Vec<_> = m
            .params()
            .frozen_ids()
            .into_iter()
            .map(|id| m.params().param(id).name.clone())
            .collect();
        assert_eq!(frozen, vec!["text.embedding".to_string()]);
        for (_, p) in m.params().iter().filter(|(_, p)| p.trainable) {
            let root = p.name.split('.').next().unwrap();
            assert!(["backbone", "queries", "decoder", "head"].contains(&root), "{}", p.name);
        }
    }
}
