//! Long/short-term matcher: query embedding, the four association
//! architectures, matching-probability matrices and model checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    AttentionParams, BoundAttention, BoundFfn, BoundLayerNorm, FfnParams, LayerNormParams, Matrix,
    NumericsError, Parameterized, Result, Tape, Var,
};
use crate::rescoring::{BoundHead, RescoringHead};

pub const CHECKPOINT_FORMAT: &str = "qtrack-model/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherVariant {
    /// Shared FFN, then per branch a self-attention encoder over history and
    /// a cross-attention decoder for the current frame.
    #[serde(rename = "transformer")]
    TransformerBased,
    /// Cosine similarity of raw queries; no parameters.
    #[serde(rename = "similarity")]
    SimilarityOnly,
    /// Cosine similarity of shared-FFN embeddings.
    #[serde(rename = "ffn")]
    FfnBased,
    /// Shared FFN, then per branch a residual cross-attention of the current
    /// frame over history.
    #[serde(rename = "crossattn")]
    CrossAttnBased,
}

impl MatcherVariant {
    pub const ALL: [MatcherVariant; 4] = [
        MatcherVariant::TransformerBased,
        MatcherVariant::SimilarityOnly,
        MatcherVariant::FfnBased,
        MatcherVariant::CrossAttnBased,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatcherVariant::TransformerBased => "transformer",
            MatcherVariant::SimilarityOnly => "similarity",
            MatcherVariant::FfnBased => "ffn",
            MatcherVariant::CrossAttnBased => "crossattn",
        }
    }
}

impl fmt::Display for MatcherVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatcherVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        MatcherVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Short,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherDims {
    pub d_q: usize,
    pub d_e: usize,
    pub heads: usize,
}

impl MatcherDims {
    pub fn new(d_q: usize, d_e: usize) -> Self {
        Self { d_q, d_e, heads: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    /// `S = cos / temperature`.
    pub temperature: f64,
    /// Constant logit of the no-match column.
    pub null_logit: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            null_logit: 0.0,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(format!("temperature must be positive, got {}", self.temperature));
        }
        if !self.null_logit.is_finite() {
            return Err("null_logit must be finite".into());
        }
        Ok(())
    }
}

/// Pre-norm encoder layer: `h = x + SelfAttn(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub norm1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FfnParams,
}

/// Decoder layer: `h = x + CrossAttn(x, memory)`, `y = h + FFN(LN(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub cross_attn: AttentionParams,
    pub norm: LayerNormParams,
    pub ffn: FfnParams,
}

fn ffn_hidden(d: usize) -> usize {
    2 * d
}

impl EncoderLayer {
    fn init(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::new(d),
            self_attn: AttentionParams::init(rng, d, heads)?,
            norm2: LayerNormParams::new(d),
            ffn: FfnParams::init(rng, d, ffn_hidden(d), d),
        })
    }

    fn count(d: usize) -> usize {
        2 * LayerNormParams::count(d) + AttentionParams::count(d) + FfnParams::count(d, ffn_hidden(d), d)
    }
}

impl DecoderLayer {
    fn init(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            cross_attn: AttentionParams::init(rng, d, heads)?,
            norm: LayerNormParams::new(d),
            ffn: FfnParams::init(rng, d, ffn_hidden(d), d),
        })
    }

    fn count(d: usize) -> usize {
        AttentionParams::count(d) + LayerNormParams::count(d) + FfnParams::count(d, ffn_hidden(d), d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BranchParams {
    Plain,
    CrossAttn(AttentionParams),
    Transformer {
        encoder: EncoderLayer,
        decoder: DecoderLayer,
    },
}

impl Parameterized for BranchParams {
    fn visit(&self, f: &mut dyn FnMut(&Matrix)) {
        match self {
            BranchParams::Plain => {}
            BranchParams::CrossAttn(a) => a.visit(f),
            BranchParams::Transformer { encoder, decoder } => {
                encoder.norm1.visit(f);
                encoder.self_attn.visit(f);
                encoder.norm2.visit(f);
                encoder.ffn.visit(f);
                decoder.cross_attn.visit(f);
                decoder.norm.visit(f);
                decoder.ffn.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        match self {
            BranchParams::Plain => {}
            BranchParams::CrossAttn(a) => a.visit_mut(f),
            BranchParams::Transformer { encoder, decoder } => {
                encoder.norm1.visit_mut(f);
                encoder.self_attn.visit_mut(f);
                encoder.norm2.visit_mut(f);
                encoder.ffn.visit_mut(f);
                decoder.cross_attn.visit_mut(f);
                decoder.norm.visit_mut(f);
                decoder.ffn.visit_mut(f);
            }
        }
    }
}

/// Trainable matcher parameters. The embedding FFN is shared by both
/// branches; attention blocks are per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams {
    pub variant: MatcherVariant,
    pub dims: MatcherDims,
    pub embed: Option<FfnParams>,
    pub short: BranchParams,
    pub long: BranchParams,
}

impl MatcherParams {
    pub fn init(variant: MatcherVariant, dims: MatcherDims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d_e;
        if variant == MatcherVariant::SimilarityOnly {
            if dims.d_e != dims.d_q {
                return Err(NumericsError::Shape(format!(
                    "similarity variant needs d_e = d_q, got {} and {}",
                    dims.d_e, dims.d_q
                )));
            }
        } else if dims.d_q == 0 || d == 0 {
            return Err(NumericsError::Shape("dimensions must be positive".into()));
        }
        let embed = match variant {
            MatcherVariant::SimilarityOnly => None,
            _ => Some(FfnParams::init(&mut rng, dims.d_q, d, d)),
        };
        let branch = |rng: &mut ChaCha8Rng| -> Result<BranchParams> {
            Ok(match variant {
                MatcherVariant::SimilarityOnly | MatcherVariant::FfnBased => BranchParams::Plain,
                MatcherVariant::CrossAttnBased => {
                    BranchParams::CrossAttn(AttentionParams::init(rng, d, dims.heads)?)
                }
                MatcherVariant::TransformerBased => BranchParams::Transformer {
                    encoder: EncoderLayer::init(rng, d, dims.heads)?,
                    decoder: DecoderLayer::init(rng, d, dims.heads)?,
                },
            })
        };
        let short = branch(&mut rng)?;
        let long = branch(&mut rng)?;
        Ok(Self {
            variant,
            dims,
            embed,
            short,
            long,
        })
    }

    pub fn branch(&self, branch: Branch) -> &BranchParams {
        match branch {
            Branch::Short => &self.short,
            Branch::Long => &self.long,
        }
    }

    pub fn branch_mut(&mut self, branch: Branch) -> &mut BranchParams {
        match branch {
            Branch::Short => &mut self.short,
            Branch::Long => &mut self.long,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMatcher {
        BoundMatcher {
            embed: self.embed.as_ref().map(|p| p.bind(tape, trainable)),
            short: bind_branch(&self.short, tape, trainable),
            long: bind_branch(&self.long, tape, trainable),
        }
    }
}

impl Parameterized for MatcherParams {
    fn visit(&self, f: &mut dyn FnMut(&Matrix)) {
        if let Some(e) = &self.embed {
            e.visit(f);
        }
        self.short.visit(f);
        self.long.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        if let Some(e) = &mut self.embed {
            e.visit_mut(f);
        }
        self.short.visit_mut(f);
        self.long.visit_mut(f);
    }
}

/// Closed-form trainable-parameter count of the matcher (both branches plus
/// the shared FFN). The rescoring head is not included. Splitting into
/// heads does not change the count.
pub fn count_parameters(variant: MatcherVariant, d_q: usize, d_e: usize, _heads: usize) -> usize {
    let shared = FfnParams::count(d_q, d_e, d_e);
    match variant {
        MatcherVariant::SimilarityOnly => 0,
        MatcherVariant::FfnBased => shared,
        MatcherVariant::CrossAttnBased => shared + 2 * AttentionParams::count(d_e),
        MatcherVariant::TransformerBased => {
            shared + 2 * (EncoderLayer::count(d_e) + DecoderLayer::count(d_e))
        }
    }
}

fn bind_branch(p: &BranchParams, tape: &mut Tape, trainable: bool) -> BoundBranch {
    match p {
        BranchParams::Plain => BoundBranch::Plain,
        BranchParams::CrossAttn(a) => BoundBranch::CrossAttn(a.bind(tape, trainable)),
        BranchParams::Transformer { encoder, decoder } => BoundBranch::Transformer {
            norm1: encoder.norm1.bind(tape, trainable),
            self_attn: encoder.self_attn.bind(tape, trainable),
            norm2: encoder.norm2.bind(tape, trainable),
            enc_ffn: encoder.ffn.bind(tape, trainable),
            cross_attn: decoder.cross_attn.bind(tape, trainable),
            dec_norm: decoder.norm.bind(tape, trainable),
            dec_ffn: decoder.ffn.bind(tape, trainable),
        },
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoundBranch {
    Plain,
    CrossAttn(BoundAttention),
    Transformer {
        norm1: BoundLayerNorm,
        self_attn: BoundAttention,
        norm2: BoundLayerNorm,
        enc_ffn: BoundFfn,
        cross_attn: BoundAttention,
        dec_norm: BoundLayerNorm,
        dec_ffn: BoundFfn,
    },
}

impl BoundBranch {
    fn vars(&self, out: &mut Vec<Var>) {
        match self {
            BoundBranch::Plain => {}
            BoundBranch::CrossAttn(a) => a.vars(out),
            BoundBranch::Transformer {
                norm1,
                self_attn,
                norm2,
                enc_ffn,
                cross_attn,
                dec_norm,
                dec_ffn,
            } => {
                norm1.vars(out);
                self_attn.vars(out);
                norm2.vars(out);
                enc_ffn.vars(out);
                cross_attn.vars(out);
                dec_norm.vars(out);
                dec_ffn.vars(out);
            }
        }
    }

    /// Transforms `(current, history)` embeddings into the representations
    /// that are compared. An empty history leaves both sides unchanged.
    pub fn forward(&self, tape: &mut Tape, current: Var, history: Var) -> Result<(Var, Var)> {
        if tape.value(history).rows() == 0 {
            return Ok((current, history));
        }
        match self {
            BoundBranch::Plain => Ok((current, history)),
            BoundBranch::CrossAttn(attn) => {
                let mixed = attn.forward(tape, current, history, history)?;
                Ok((tape.add(current, mixed)?, history))
            }
            BoundBranch::Transformer {
                norm1,
                self_attn,
                norm2,
                enc_ffn,
                cross_attn,
                dec_norm,
                dec_ffn,
            } => {
                let n = norm1.forward(tape, history)?;
                let a = self_attn.forward(tape, n, n, n)?;
                let h = tape.add(history, a)?;
                let n = norm2.forward(tape, h)?;
                let f = enc_ffn.forward(tape, n)?;
                let memory = tape.add(h, f)?;

                let c = cross_attn.forward(tape, current, memory, memory)?;
                let h = tape.add(current, c)?;
                let n = dec_norm.forward(tape, h)?;
                let f = dec_ffn.forward(tape, n)?;
                Ok((tape.add(h, f)?, memory))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMatcher {
    pub embed: Option<BoundFfn>,
    pub short: BoundBranch,
    pub long: BoundBranch,
}

impl BoundMatcher {
    /// Leaf handles in the same order as [`Parameterized::visit`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(e) = &self.embed {
            e.vars(&mut out);
        }
        self.short.vars(&mut out);
        self.long.vars(&mut out);
        out
    }

    pub fn embed(&self, tape: &mut Tape, queries: Var) -> Result<Var> {
        match &self.embed {
            Some(ffn) => ffn.forward(tape, queries),
            None => Ok(queries),
        }
    }

    /// Similarity logits `S` (`n_cur × (n_hist + 1)`, null column last).
    pub fn similarity(
        &self,
        tape: &mut Tape,
        branch: Branch,
        current: Var,
        history: Var,
        cfg: &SimilarityConfig,
    ) -> Result<Var> {
        let b = match branch {
            Branch::Short => &self.short,
            Branch::Long => &self.long,
        };
        let (cur, hist) = b.forward(tape, current, history)?;
        let cur = tape.l2_normalize_rows(cur);
        let hist = tape.l2_normalize_rows(hist);
        let cos = tape.matmul_t(cur, hist)?;
        let s = tape.scale(cos, 1.0 / cfg.temperature);
        Ok(tape.append_const_col(s, cfg.null_logit))
    }
}

/// Similarities `S` and probabilities `G = softmax_rows(S)`; the last column
/// is the no-match slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMatrix {
    pub similarities: Matrix,
    pub probabilities: Matrix,
}

impl AssociationMatrix {
    pub fn null_column(&self) -> usize {
        self.similarities.cols() - 1
    }
}

/// Embeds an `n × d_q` query matrix (identity for the similarity variant).
pub fn embed_queries(queries: &Matrix, params: &MatcherParams) -> Result<Matrix> {
    if queries.cols() != params.dims.d_q {
        return Err(NumericsError::Shape(format!(
            "queries have {} columns, d_q is {}",
            queries.cols(),
            params.dims.d_q
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let q = tape.constant(queries.clone());
    let e = bound.embed(&mut tape, q)?;
    Ok(tape.value(e).clone())
}

/// Association matrix of current embeddings against history embeddings on
/// one branch.
pub fn matcher_forward(
    params: &MatcherParams,
    cfg: &SimilarityConfig,
    branch: Branch,
    current: &Matrix,
    history: &Matrix,
) -> Result<AssociationMatrix> {
    let d = params.dims.d_e;
    if current.cols() != d || history.cols() != d {
        return Err(NumericsError::Shape(format!(
            "embeddings have {} and {} columns, d_e is {d}",
            current.cols(),
            history.cols()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let c = tape.constant(current.clone());
    let h = tape.constant(history.clone());
    let s = bound.similarity(&mut tape, branch, c, h, cfg)?;
    let g = tape.softmax_rows(s);
    Ok(AssociationMatrix {
        similarities: tape.value(s).clone(),
        probabilities: tape.value(g).clone(),
    })
}

/// Matcher, rescoring head and similarity settings: everything a tracker
/// needs besides its thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub matcher: MatcherParams,
    pub head: RescoringHead,
    pub similarity: SimilarityConfig,
}

impl Model {
    pub fn init(variant: MatcherVariant, dims: MatcherDims, seed: u64) -> Result<Self> {
        Ok(Self {
            matcher: MatcherParams::init(variant, dims, seed)?,
            head: RescoringHead::new(dims.d_q),
            similarity: SimilarityConfig::default(),
        })
    }

    pub fn variant(&self) -> MatcherVariant {
        self.matcher.variant
    }

    pub fn dims(&self) -> MatcherDims {
        self.matcher.dims
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            matcher: self.matcher.bind(tape, true),
            head: self.head.bind(tape),
        }
    }
}

impl Parameterized for Model {
    fn visit(&self, f: &mut dyn FnMut(&Matrix)) {
        self.matcher.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.matcher.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundModel {
    pub matcher: BoundMatcher,
    pub head: BoundHead,
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.matcher.vars();
        self.head.vars(&mut out);
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    variant: MatcherVariant,
    dims: MatcherDims,
    config: SimilarityConfig,
    params: Vec<f64>,
}

pub fn checkpoint_to_string(model: &Model) -> String {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        variant: model.variant(),
        dims: model.dims(),
        config: model.similarity,
        params: model.flatten(),
    };
    serde_json::to_string(&file).expect("finite parameters serialize")
}

pub fn checkpoint_from_str(text: &str) -> std::result::Result<Model, CheckpointError> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Format(format!(
            "expected format {CHECKPOINT_FORMAT:?}, got {:?}",
            file.format
        )));
    }
    file.config.validate().map_err(CheckpointError::Format)?;
    let mut model =
        Model::init(file.variant, file.dims, 0).map_err(|e| CheckpointError::Format(e.to_string()))?;
    model.similarity = file.config;
    model
        .load_flat(&file.params)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> std::result::Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_string(model) + "\n").map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> std::result::Result<Model, CheckpointError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_str(&text)
}
