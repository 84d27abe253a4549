//! Target assignment, set matching for the rescoring head, the rescoring and
//! long/short-term association losses, and the optimization loop.

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{Annotations, BBox, DetectionStream};
use crate::error::{Error, Result};
use crate::hungarian::assign_rows;
use crate::matcher::{Branch, BoundModel, Model};
use crate::numerics::{sigmoid, Matrix, Parameterized, Tape, Var};

/// IoU a detection needs with a ground-truth box to become its target.
pub const ASSIGN_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassCost {
    /// `α(1−p)^γ(−ln p) − (1−α)p^γ(−ln(1−p))`.
    #[default]
    Focal,
    /// `1 − p`.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_res: f64,
    pub lambda_asso: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// λ_c: weight of the classification cost in set matching.
    pub cost_class: f64,
    /// λ_b: weight of the normalized-box L1 cost in set matching.
    pub cost_bbox: f64,
    pub class_cost: ClassCost,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_res: 1.0,
            lambda_asso: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            cost_class: 2.0,
            cost_bbox: 5.0,
            class_cost: ClassCost::Focal,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_res", self.lambda_res),
            ("lambda_asso", self.lambda_asso),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
            ("cost_class", self.cost_class),
            ("cost_bbox", self.cost_bbox),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.focal_alpha > 1.0 {
            return Err(Error::Config("focal_alpha must be at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// B: frames per clip.
    pub clip_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub iterations: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_len: 6,
            learning_rate: 5e-5,
            warmup_steps: 500,
            iterations: 2000,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len < 2 {
            return Err(Error::Config("clip_len must be at least 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Eq.-1-style target assignment for one frame: each present ground-truth
/// box gets the detection with the highest IoU if that IoU is at least 0.5.
/// When two tracks want one detection the higher IoU wins and the other
/// track falls back to its best unclaimed detection.
pub fn assign_targets(pred_boxes: &[BBox], gt_boxes: &[Option<BBox>]) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (k, gt) in gt_boxes.iter().enumerate() {
        let Some(gt) = gt else { continue };
        for (i, p) in pred_boxes.iter().enumerate() {
            let iou = p.iou(gt);
            if iou >= ASSIGN_IOU {
                pairs.push((iou, k, i));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; gt_boxes.len()];
    let mut taken = vec![false; pred_boxes.len()];
    for (_, k, i) in pairs {
        if out[k].is_none() && !taken[i] {
            out[k] = Some(i);
            taken[i] = true;
        }
    }
    out
}

/// Scale used to bring box coordinates into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxNorm {
    pub width: f64,
    pub height: f64,
}

impl BoxNorm {
    /// Header canvas size when present, otherwise the largest coordinate seen.
    pub fn for_sequence(stream: &DetectionStream, ann: Option<&Annotations>) -> Self {
        if let (Some(width), Some(height)) = (stream.header.width, stream.header.height) {
            return Self { width, height };
        }
        let mut w: f64 = 1.0;
        let mut h: f64 = 1.0;
        let mut see = |b: &BBox| {
            w = w.max(b.x_max);
            h = h.max(b.y_max);
        };
        stream.frames.iter().flat_map(|f| &f.records).for_each(|r| see(&r.bbox));
        if let Some(a) = ann {
            a.tracks.iter().flat_map(|t| t.frames.values()).for_each(|g| see(&g.bbox));
        }
        Self { width: w, height: h }
    }

    pub fn l1(&self, a: &BBox, b: &BBox) -> f64 {
        (a.x_min - b.x_min).abs() / self.width
            + (a.x_max - b.x_max).abs() / self.width
            + (a.y_min - b.y_min).abs() / self.height
            + (a.y_max - b.y_max).abs() / self.height
    }
}

/// Classification cost of predicting text with probability `p`.
pub fn class_cost(p: f64, cfg: &LossConfig) -> f64 {
    match cfg.class_cost {
        ClassCost::Plain => 1.0 - p,
        ClassCost::Focal => {
            let (a, g) = (cfg.focal_alpha, cfg.focal_gamma);
            let eps = 1e-12;
            let pos = a * (1.0 - p).powf(g) * -(p.max(eps)).ln();
            let neg = (1.0 - a) * p.powf(g) * -((1.0 - p).max(eps)).ln();
            pos - neg
        }
    }
}

/// `C[i][j] = λ_c · cls(p̂_i) + λ_b · L1(b̂_i, b_j)` over normalized boxes.
pub fn matching_cost(
    pred_scores: &[f64],
    pred_boxes: &[BBox],
    gt_boxes: &[BBox],
    norm: &BoxNorm,
    cfg: &LossConfig,
) -> Result<Matrix> {
    if pred_scores.len() != pred_boxes.len() {
        return Err(Error::Invalid(format!(
            "{} scores for {} boxes",
            pred_scores.len(),
            pred_boxes.len()
        )));
    }
    let mut c = Matrix::zeros(pred_boxes.len(), gt_boxes.len());
    for (i, (p, pb)) in pred_scores.iter().zip(pred_boxes).enumerate() {
        let cls = cfg.cost_class * class_cost(*p, cfg);
        for (j, gb) in gt_boxes.iter().enumerate() {
            c[(i, j)] = cls + cfg.cost_bbox * norm.l1(pb, gb);
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs, one per ground truth.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of every ground truth (column) to a distinct
/// prediction (row).
pub fn hungarian_match(cost: &Matrix) -> Result<MatchResult> {
    let (n_pred, n_gt) = cost.shape();
    if n_gt > n_pred {
        return Err(Error::Invalid(format!(
            "{n_gt} ground truths but only {n_pred} predictions"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::Invalid("non-finite matching cost".into()));
    }
    let cols = assign_rows(&cost.transpose());
    let mut pairs: Vec<(usize, usize)> = cols.into_iter().enumerate().map(|(g, p)| (p, g)).collect();
    pairs.sort_unstable_by_key(|&(_, g)| g);
    let total_cost = pairs.iter().map(|&(p, g)| cost[(p, g)]).sum();
    Ok(MatchResult { pairs, total_cost })
}

/// Predictions that the set matching marks as text. When ground truths
/// outnumber predictions every prediction is matched to its best ground truth
/// instead.
pub fn positive_predictions(cost: &Matrix) -> Vec<bool> {
    let (n_pred, n_gt) = cost.shape();
    let mut positive = vec![false; n_pred];
    if n_pred == 0 || n_gt == 0 {
        return positive;
    }
    if n_gt <= n_pred {
        for p in assign_rows(&cost.transpose()) {
            positive[p] = true;
        }
    } else {
        positive.iter_mut().for_each(|x| *x = true);
    }
    positive
}

/// Focal rescoring loss from probabilities; matched predictions are
/// positives, all others negatives.
pub fn rescoring_loss(probs: &[f64], positive: &[bool], cfg: &LossConfig) -> Result<f64> {
    let logits: Vec<f64> = probs.iter().map(|&p| (p / (1.0 - p)).ln()).collect();
    let mut tape = Tape::new();
    let z = tape.constant(Matrix::from_vec(logits.len(), 1, logits)?);
    let l = tape.focal_loss(z, positive, cfg.focal_alpha, cfg.focal_gamma)?;
    Ok(tape.value(l).item())
}

/// `−Σ log G[row][col]` over `(row, col)` targets, from similarity logits.
pub fn short_term_loss(similarities: &Matrix, targets: &[(usize, usize)]) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(similarities.clone());
    let v = short_term_terms(&mut tape, s, targets)?;
    Ok(tape.value(v).item())
}

/// `−Σ log Σ_{c ∈ cols} G[row][c]` over `(row, cols)` targets.
pub fn long_term_loss(similarities: &Matrix, targets: &[(usize, Vec<usize>)]) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(similarities.clone());
    let v = long_term_terms(&mut tape, s, targets)?;
    Ok(tape.value(v).item())
}

fn short_term_terms(tape: &mut Tape, s: Var, targets: &[(usize, usize)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(targets.len());
    for &(row, col) in targets {
        terms.push(tape.neg_log_softmax_mass(s, row, &[col])?);
    }
    Ok(tape.sum(&terms)?)
}

fn long_term_terms(tape: &mut Tape, s: Var, targets: &[(usize, Vec<usize>)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(targets.len());
    for (row, cols) in targets {
        terms.push(tape.neg_log_softmax_mass(s, *row, cols)?);
    }
    Ok(tape.sum(&terms)?)
}

/// One frame of a training clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFrame {
    pub frame_index: u32,
    /// All detections, `n × d_q`.
    pub queries: Matrix,
    pub boxes: Vec<BBox>,
    /// Ground-truth boxes present in this frame.
    pub gt_boxes: Vec<BBox>,
    /// `(track id, detection index)` for every ground-truth track that has
    /// a target detection in this frame.
    pub assigned: Vec<(u64, usize)>,
}

/// `B` consecutive frames of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    pub frames: Vec<ClipFrame>,
    pub norm: BoxNorm,
}

impl ClipBatch {
    /// Frames `start .. start + len` (frames without detections included).
    pub fn from_sequence(stream: &DetectionStream, ann: &Annotations, start: u32, len: usize) -> Result<Self> {
        let d_q = stream.header.d_q;
        let norm = BoxNorm::for_sequence(stream, Some(ann));
        let mut frames = Vec::with_capacity(len);
        for f in start..start + len as u32 {
            let records = stream.frame(f).map(|fr| fr.records.as_slice()).unwrap_or(&[]);
            let rows: Vec<Vec<f64>> = records.iter().map(|r| r.query.clone()).collect();
            let boxes: Vec<BBox> = records.iter().map(|r| r.bbox).collect();
            let present: Vec<(u64, BBox)> = ann
                .tracks
                .iter()
                .filter_map(|t| t.get(f).map(|g| (t.track_id, g.bbox)))
                .collect();
            let gt: Vec<Option<BBox>> = present.iter().map(|&(_, b)| Some(b)).collect();
            let assigned = assign_targets(&boxes, &gt)
                .into_iter()
                .zip(&present)
                .filter_map(|(a, &(id, _))| a.map(|i| (id, i)))
                .collect();
            frames.push(ClipFrame {
                frame_index: f,
                queries: Matrix::from_rows(&rows, d_q)?,
                boxes,
                gt_boxes: present.iter().map(|&(_, b)| b).collect(),
                assigned,
            });
        }
        Ok(Self { frames, norm })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rescoring: f64,
    pub short_term: f64,
    pub long_term: f64,
}

struct LossVars {
    total: Var,
    rescoring: Var,
    short_term: Var,
    long_term: Var,
}

fn rescoring_part(
    tape: &mut Tape,
    bound: &BoundModel,
    model: &Model,
    batch: &ClipBatch,
    cfg: &LossConfig,
) -> Result<Var> {
    let mut terms = Vec::new();
    for f in &batch.frames {
        if f.queries.rows() == 0 {
            continue;
        }
        let probs: Vec<f64> = f
            .queries
            .iter_rows()
            .map(|q| model.head.logit(q).map(sigmoid))
            .collect::<std::result::Result<_, _>>()?;
        let positive = if f.gt_boxes.is_empty() {
            vec![false; probs.len()]
        } else {
            let cost = matching_cost(&probs, &f.boxes, &f.gt_boxes, &batch.norm, cfg)?;
            positive_predictions(&cost)
        };
        let q = tape.constant(f.queries.clone());
        let z = bound.head.logits(tape, q)?;
        terms.push(tape.focal_loss(z, &positive, cfg.focal_alpha, cfg.focal_gamma)?);
    }
    Ok(tape.sum(&terms)?)
}

fn association_parts(tape: &mut Tape, bound: &BoundModel, model: &Model, batch: &ClipBatch) -> Result<(Var, Var)> {
    let d_q = model.dims().d_q;
    let sim = model.similarity;
    // stack every assigned detection of the clip, frame by frame
    let mut rows = Vec::new();
    let mut spans = Vec::with_capacity(batch.frames.len());
    let mut owners: Vec<Vec<u64>> = Vec::with_capacity(batch.frames.len());
    for f in &batch.frames {
        let start = rows.len();
        for &(_, i) in &f.assigned {
            rows.push(f.queries.row(i).to_vec());
        }
        spans.push(start..rows.len());
        owners.push(f.assigned.iter().map(|&(id, _)| id).collect());
    }
    let q = tape.constant(Matrix::from_rows(&rows, d_q)?);
    let all = bound.matcher.embed(tape, q)?;

    let mut st_terms = Vec::new();
    for t in 1..batch.frames.len() {
        if spans[t].is_empty() {
            continue;
        }
        let cur = tape.select_rows(all, &spans[t].clone().collect::<Vec<_>>())?;
        let hist = tape.select_rows(all, &spans[t - 1].clone().collect::<Vec<_>>())?;
        let s = bound.matcher.similarity(tape, Branch::Short, cur, hist, &sim)?;
        let null = owners[t - 1].len();
        let targets: Vec<(usize, usize)> = owners[t]
            .iter()
            .enumerate()
            .map(|(r, id)| (r, owners[t - 1].iter().position(|o| o == id).unwrap_or(null)))
            .collect();
        st_terms.push(short_term_terms(tape, s, &targets)?);
    }

    let mut lt_terms = Vec::new();
    for t in 0..batch.frames.len() {
        if spans[t].is_empty() {
            continue;
        }
        let cur = tape.select_rows(all, &spans[t].clone().collect::<Vec<_>>())?;
        let mut hist_idx = Vec::new();
        let mut hist_owner: Vec<u64> = Vec::new();
        for (u, span) in spans.iter().enumerate() {
            if u != t {
                hist_idx.extend(span.clone());
                hist_owner.extend(owners[u].iter().copied());
            }
        }
        let hist = tape.select_rows(all, &hist_idx)?;
        let s = bound.matcher.similarity(tape, Branch::Long, cur, hist, &sim)?;
        let null = hist_owner.len();
        let targets: Vec<(usize, Vec<usize>)> = owners[t]
            .iter()
            .enumerate()
            .map(|(r, id)| {
                let own: Vec<usize> = hist_owner
                    .iter()
                    .enumerate()
                    .filter_map(|(c, o)| (o == id).then_some(c))
                    .collect();
                (r, if own.is_empty() { vec![null] } else { own })
            })
            .collect();
        lt_terms.push(long_term_terms(tape, s, &targets)?);
    }
    Ok((tape.sum(&st_terms)?, tape.sum(&lt_terms)?))
}

fn build_loss(tape: &mut Tape, bound: &BoundModel, model: &Model, batch: &ClipBatch, cfg: &LossConfig) -> Result<LossVars> {
    let rescoring = rescoring_part(tape, bound, model, batch, cfg)?;
    let (short_term, long_term) = association_parts(tape, bound, model, batch)?;
    let res = tape.scale(rescoring, cfg.lambda_res);
    let asso = tape.sum(&[short_term, long_term])?;
    let asso = tape.scale(asso, cfg.lambda_asso);
    let total = tape.sum(&[res, asso])?;
    Ok(LossVars {
        total,
        rescoring,
        short_term,
        long_term,
    })
}

/// `λ_res·L_res + λ_asso·(L_s + L_l)` on one clip.
pub fn total_loss(batch: &ClipBatch, model: &Model, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(total_loss_and_grad_inner(batch, model, cfg, false)?.0)
}

/// Loss and its gradient, flattened in [`Parameterized`] order of `model`.
pub fn total_loss_and_grad(batch: &ClipBatch, model: &Model, cfg: &LossConfig) -> Result<(LossBreakdown, Vec<f64>)> {
    total_loss_and_grad_inner(batch, model, cfg, true)
}

fn total_loss_and_grad_inner(
    batch: &ClipBatch,
    model: &Model,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let v = build_loss(&mut tape, &bound, model, batch, cfg)?;
    let breakdown = LossBreakdown {
        total: tape.value(v.total).item(),
        rescoring: tape.value(v.rescoring).item(),
        short_term: tape.value(v.short_term).item(),
        long_term: tape.value(v.long_term).item(),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Invalid("non-finite training loss".into()));
    }
    let mut grad = Vec::new();
    if with_grad {
        let grads = tape.backward(v.total)?;
        for var in bound.vars() {
            grad.extend_from_slice(grads.get(&tape, var).as_slice());
        }
    }
    Ok((breakdown, grad))
}

/// Linear warmup to the base rate, then cosine decay to zero at the last
/// iteration.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    let base = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return base * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let decay_steps = cfg.iterations.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / decay_steps as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }
}

/// One training video.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub stream: DetectionStream,
    pub annotations: Annotations,
}

impl Sequence {
    pub fn len(&self) -> u32 {
        let ann_end = self
            .annotations
            .tracks
            .iter()
            .filter_map(|t| t.frames.keys().next_back())
            .max()
            .map_or(0, |f| f + 1);
        self.stream.sequence_len().max(ann_end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub losses: Vec<LossBreakdown>,
    pub learning_rates: Vec<f64>,
}

/// Optimizes `model` on random contiguous clips. Deterministic given
/// `cfg.seed`.
pub fn train(model: &mut Model, dataset: &[Sequence], cfg: &TrainConfig, loss_cfg: &LossConfig) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.iterations == 0 {
        return Ok(report);
    }
    let mut eligible = Vec::new();
    for (i, s) in dataset.iter().enumerate() {
        if s.stream.header.d_q != model.dims().d_q {
            return Err(Error::Invalid(format!(
                "sequence {} has d_q {}, model expects {}",
                s.stream.header.video,
                s.stream.header.d_q,
                model.dims().d_q
            )));
        }
        if (s.len() as usize) < cfg.clip_len {
            warn!("skipping {}: {} frames is shorter than a clip", s.stream.header.video, s.len());
        } else {
            eligible.push(i);
        }
    }
    if eligible.is_empty() {
        return Err(Error::Invalid("no sequence is long enough for one clip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.flatten();
    let mut opt = AdamW::new(params.len(), cfg);
    for step in 0..cfg.iterations {
        let seq = &dataset[eligible[rng.random_range(0..eligible.len())]];
        let last_start = seq.len() as usize - cfg.clip_len;
        let start = rng.random_range(0..=last_start) as u32;
        let batch = ClipBatch::from_sequence(&seq.stream, &seq.annotations, start, cfg.clip_len)?;
        let (loss, grad) = total_loss_and_grad(&batch, model, loss_cfg)?;
        let lr = learning_rate(cfg, step);
        opt.step(&mut params, &grad, lr);
        model.load_flat(&params)?;
        if step % 100 == 0 {
            debug!("step {step}: loss {:.5} lr {lr:.3e}", loss.total);
        }
        report.losses.push(loss);
        report.learning_rates.push(lr);
    }
    if let Some(last) = report.losses.last() {
        info!("trained {} iterations, final loss {:.5}", cfg.iterations, last.total);
    }
    Ok(report)
}
