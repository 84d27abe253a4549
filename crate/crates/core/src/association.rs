//! Inference pipeline: rescoring, non-maximum suppression, two-stage
//! short/long-term matching against a memory bank, and trajectory
//! finalization.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::data_io::{DetectionFrame, DetectionStream, TrajectoryOutput, TrajectoryPoint};
use crate::error::{Error, Result};
use crate::matcher::{embed_queries, matcher_forward, Branch, Model};
use crate::numerics::{softmax_in_place, Matrix};
use crate::rescoring::{filter_instances, ScoredInstance};

/// Which matching stages run each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMode {
    /// Short-term stage, then long-term stage for leftovers.
    #[default]
    LongShort,
    /// Only trajectories seen in the previous frame are candidates.
    ShortOnly,
    /// Every live trajectory goes through the long-term branch.
    LongOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// θ: minimum matching probability for a link.
    pub assoc_threshold: f64,
    /// H: frames of embeddings kept per trajectory.
    pub history_depth: u32,
    pub nms_iou: f64,
    pub detect_threshold: f64,
    pub min_track_len: usize,
    pub mode: AssociationMode,
    /// Fuse the rescoring head's score with the spotter score.
    pub rescoring: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            assoc_threshold: 0.2,
            history_depth: 5,
            nms_iou: 0.5,
            detect_threshold: 0.3,
            min_track_len: 5,
            mode: AssociationMode::LongShort,
            rescoring: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.assoc_threshold > 0.0 && self.assoc_threshold < 1.0) {
            return bad(format!("assoc_threshold {} is outside (0, 1)", self.assoc_threshold));
        }
        if self.history_depth < 1 {
            return bad("history_depth must be at least 1".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad(format!("nms_iou {} is outside (0, 1]", self.nms_iou));
        }
        if !(0.0..=1.0).contains(&self.detect_threshold) {
            return bad(format!("detect_threshold {} is outside [0, 1]", self.detect_threshold));
        }
        if self.min_track_len < 1 {
            return bad("min_track_len must be at least 1".into());
        }
        Ok(())
    }
}

/// Greedy non-maximum suppression in descending fused score. Survivors are
/// returned in their input order.
pub fn nms(instances: Vec<ScoredInstance>, iou_threshold: f64) -> Vec<ScoredInstance> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| {
        instances[b]
            .fused_score
            .total_cmp(&instances[a].fused_score)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &instances[i].record.bbox;
        if kept
            .iter()
            .all(|&k| instances[k].record.bbox.iou(b) < iou_threshold)
        {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    let mut keep = vec![false; instances.len()];
    for k in kept {
        keep[k] = true;
    }
    instances
        .into_iter()
        .zip(keep)
        .filter_map(|(inst, k)| k.then_some(inst))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankTrajectory {
    pub id: u64,
    /// `(frame, embedding)`, oldest first.
    pub entries: VecDeque<(u32, Vec<f64>)>,
    pub last_seen: u32,
}

/// Live trajectories with their embeddings from the last `H` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    horizon: u32,
    tracks: Vec<BankTrajectory>,
    next_id: u64,
}

impl MemoryBank {
    pub fn new(horizon: u32) -> Self {
        Self {
            horizon,
            tracks: Vec::new(),
            next_id: 1,
        }
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn trajectories(&self) -> &[BankTrajectory] {
        &self.tracks
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn oldest_frame(&self) -> Option<u32> {
        self.tracks
            .iter()
            .filter_map(|t| t.entries.front().map(|e| e.0))
            .min()
    }

    /// Drops embeddings older than `frame − H`; trajectories left without
    /// embeddings are finalized and returned by id.
    pub fn evict(&mut self, frame: u32) -> Vec<u64> {
        let cutoff = frame.saturating_sub(self.horizon);
        for t in &mut self.tracks {
            while t.entries.front().is_some_and(|e| e.0 < cutoff) {
                t.entries.pop_front();
            }
        }
        let finalized = self
            .tracks
            .iter()
            .filter(|t| t.entries.is_empty())
            .map(|t| t.id)
            .collect();
        self.tracks.retain(|t| !t.entries.is_empty());
        finalized
    }

    fn position(&self, id: u64) -> Option<usize> {
        self.tracks.iter().position(|t| t.id == id)
    }

    fn extend(&mut self, id: u64, frame: u32, embedding: Vec<f64>) {
        let i = self.position(id).expect("matched trajectory is live");
        let t = &mut self.tracks[i];
        t.entries.push_back((frame, embedding));
        t.last_seen = frame;
    }

    fn create(&mut self, frame: u32, embedding: Vec<f64>) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.tracks.push(BankTrajectory {
            id,
            entries: VecDeque::from([(frame, embedding)]),
            last_seen: frame,
        });
        id
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub instance: usize,
    pub track_id: u64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssociationOutcome {
    pub st_matches: Vec<Link>,
    pub lt_matches: Vec<Link>,
    /// `(instance, new track id)`.
    pub new_tracks: Vec<(usize, u64)>,
    /// Instances left over after the short-term stage.
    pub unmatched_after_st: Vec<usize>,
}

impl AssociationOutcome {
    /// Track id assigned to every instance, by instance index.
    pub fn assignments(&self, n: usize) -> Vec<u64> {
        let mut out = vec![0; n];
        for l in self.st_matches.iter().chain(&self.lt_matches) {
            out[l.instance] = l.track_id;
        }
        for &(i, id) in &self.new_tracks {
            out[i] = id;
        }
        out
    }
}

/// One-to-one greedy resolution: candidate pairs with `p ≥ θ` are taken in
/// descending `p`, ties to the lower instance then lower trajectory index.
fn greedy_links(scores: &[Vec<f64>], theta: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, row) in scores.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p >= theta {
                pairs.push((i, j, p));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let n_tracks = scores.first().map_or(0, Vec::len);
    let mut inst_used = vec![false; scores.len()];
    let mut track_used = vec![false; n_tracks];
    let mut out = Vec::new();
    for (i, j, p) in pairs {
        if !inst_used[i] && !track_used[j] {
            inst_used[i] = true;
            track_used[j] = true;
            out.push((i, j, p));
        }
    }
    out.sort_by_key(|&(i, _, _)| i);
    out
}

/// Links the embedded instances of `frame` to the bank and updates it:
/// matched trajectories get the new embedding, leftovers start trajectories.
/// Eviction for `frame` must already have happened.
pub fn associate_frame(
    embeddings: &Matrix,
    frame: u32,
    bank: &mut MemoryBank,
    model: &Model,
    config: &TrackerConfig,
) -> Result<AssociationOutcome> {
    let n = embeddings.rows();
    let d = embeddings.cols();
    let theta = config.assoc_threshold;
    let mut outcome = AssociationOutcome::default();
    let mut claimed: Vec<u64> = Vec::new();
    let mut unmatched: Vec<usize> = (0..n).collect();

    if config.mode != AssociationMode::LongOnly && n > 0 {
        let candidates: Vec<&BankTrajectory> = bank
            .tracks
            .iter()
            .filter(|t| frame > 0 && t.last_seen == frame - 1)
            .collect();
        if !candidates.is_empty() {
            let hist: Vec<Vec<f64>> = candidates
                .iter()
                .map(|t| t.entries.back().expect("live trajectory").1.clone())
                .collect();
            let hist = Matrix::from_rows(&hist, d)?;
            let g = matcher_forward(&model.matcher, &model.similarity, Branch::Short, embeddings, &hist)?;
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|i| g.probabilities.row(i)[..candidates.len()].to_vec())
                .collect();
            for (i, j, p) in greedy_links(&scores, theta) {
                let id = candidates[j].id;
                claimed.push(id);
                outcome.st_matches.push(Link {
                    instance: i,
                    track_id: id,
                    probability: p,
                });
            }
            unmatched.retain(|i| !outcome.st_matches.iter().any(|l| l.instance == *i));
        }
    }
    outcome.unmatched_after_st = unmatched.clone();

    if config.mode != AssociationMode::ShortOnly && !unmatched.is_empty() {
        let candidates: Vec<&BankTrajectory> = bank
            .tracks
            .iter()
            .filter(|t| !claimed.contains(&t.id))
            .collect();
        if !candidates.is_empty() {
            let mut rows = Vec::new();
            let mut owner = Vec::new();
            for (j, t) in candidates.iter().enumerate() {
                for (_, e) in &t.entries {
                    rows.push(e.clone());
                    owner.push(j);
                }
            }
            let hist = Matrix::from_rows(&rows, d)?;
            let cur = embeddings.select_rows(&unmatched);
            let g = matcher_forward(&model.matcher, &model.similarity, Branch::Long, &cur, &hist)?;
            // a trajectory's similarity is the max over its stored
            // embeddings; pooled columns then compete with the null slot
            let null_col = rows.len();
            let scores: Vec<Vec<f64>> = (0..unmatched.len())
                .map(|k| {
                    let mut pooled = vec![f64::NEG_INFINITY; candidates.len() + 1];
                    for (c, &j) in owner.iter().enumerate() {
                        pooled[j] = pooled[j].max(g.similarities[(k, c)]);
                    }
                    pooled[candidates.len()] = g.similarities[(k, null_col)];
                    softmax_in_place(&mut pooled);
                    pooled.truncate(candidates.len());
                    pooled
                })
                .collect();
            for (k, j, p) in greedy_links(&scores, theta) {
                outcome.lt_matches.push(Link {
                    instance: unmatched[k],
                    track_id: candidates[j].id,
                    probability: p,
                });
            }
            unmatched.retain(|i| !outcome.lt_matches.iter().any(|l| l.instance == *i));
        }
    }

    for l in outcome.st_matches.iter().chain(&outcome.lt_matches) {
        bank.extend(l.track_id, frame, embeddings.row(l.instance).to_vec());
    }
    for i in unmatched {
        let id = bank.create(frame, embeddings.row(i).to_vec());
        outcome.new_tracks.push((i, id));
    }
    Ok(outcome)
}

/// Frame-by-frame tracker state.
#[derive(Debug, Clone)]
pub struct Tracker<'a> {
    model: &'a Model,
    config: TrackerConfig,
    bank: MemoryBank,
    tracks: BTreeMap<u64, Vec<TrajectoryPoint>>,
    last_frame: Option<u32>,
}

impl<'a> Tracker<'a> {
    pub fn new(model: &'a Model, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            bank: MemoryBank::new(config.history_depth),
            tracks: BTreeMap::new(),
            last_frame: None,
        })
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    /// Rescore, filter, suppress, embed and associate one frame.
    pub fn step(&mut self, frame: &DetectionFrame) -> Result<AssociationOutcome> {
        if self.last_frame.is_some_and(|f| f >= frame.frame_index) {
            return Err(Error::Invalid(format!(
                "frame {} does not follow frame {}",
                frame.frame_index,
                self.last_frame.unwrap_or_default()
            )));
        }
        self.last_frame = Some(frame.frame_index);
        let head = self.config.rescoring.then_some(&self.model.head);
        let scored = filter_instances(frame, head, self.config.detect_threshold)?;
        let kept = nms(scored, self.config.nms_iou);
        let d_q = self.model.dims().d_q;
        let queries: Vec<Vec<f64>> = kept.iter().map(|s| s.record.query.clone()).collect();
        let queries = Matrix::from_rows(&queries, d_q)?;
        let embeddings = embed_queries(&queries, &self.model.matcher)?;

        self.bank.evict(frame.frame_index);
        let outcome = associate_frame(&embeddings, frame.frame_index, &mut self.bank, self.model, &self.config)?;
        for (i, id) in outcome.assignments(kept.len()).into_iter().enumerate() {
            let inst = &kept[i];
            self.tracks.entry(id).or_default().push(TrajectoryPoint {
                frame_index: frame.frame_index,
                bbox: inst.record.bbox,
                polygon: inst.record.polygon.clone(),
                score: inst.fused_score,
                text: inst.record.text.clone(),
            });
        }
        Ok(outcome)
    }

    /// Trajectories with at least `min_track_len` frames, ordered by id.
    pub fn finish(self) -> Vec<TrajectoryOutput> {
        let min_len = self.config.min_track_len;
        self.tracks
            .into_iter()
            .filter(|(_, pts)| pts.len() >= min_len)
            .map(|(track_id, points)| TrajectoryOutput { track_id, points })
            .collect()
    }
}

/// Runs the full pipeline over a stream.
pub fn track_sequence(
    stream: &DetectionStream,
    model: &Model,
    config: &TrackerConfig,
) -> Result<Vec<TrajectoryOutput>> {
    if stream.header.d_q != model.dims().d_q {
        return Err(Error::Invalid(format!(
            "stream d_q {} does not match model d_q {}",
            stream.header.d_q,
            model.dims().d_q
        )));
    }
    let mut tracker = Tracker::new(model, *config)?;
    for frame in &stream.frames {
        tracker.step(frame)?;
    }
    Ok(tracker.finish())
}
