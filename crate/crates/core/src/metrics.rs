//! CLEAR-MOT, IDF1 and per-frame detection precision/recall.
//!
//! Ground truth and predictions are both [`Annotations`]; predicted
//! trajectories convert with [`crate::data_io::trajectories_as_annotations`].
//! GT regions of category `other` are don't-care when
//! [`EvalConfig::dont_care_other`] is set: they are never missed, and a
//! prediction left unmatched that overlaps one is dropped instead of
//! counted as a false positive.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_io::{Annotations, BBox, Category};
use crate::error::{Error, Result};
use crate::hungarian::min_cost_pairs;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Tracking,
    /// A match also needs equal transcriptions.
    Spotting,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tracking" => Ok(Self::Tracking),
            "spotting" => Ok(Self::Spotting),
            other => Err(Error::Config(format!("unknown eval mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub mode: EvalMode,
    pub dont_care_other: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            mode: EvalMode::Tracking,
            dont_care_other: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Case-insensitive comparison after trimming.
pub fn transcriptions_match(a: &str, b: &str) -> bool {
    a.trim().to_lowercase() == b.trim().to_lowercase()
}

/// One box in one frame, as seen by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub track_id: u64,
    pub bbox: BBox,
    pub text: String,
    pub dont_care: bool,
}

pub type FrameSets = BTreeMap<u32, Vec<EvalInstance>>;

fn check_unique_ids(ann: &Annotations, side: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for t in &ann.tracks {
        if !seen.insert(t.track_id) {
            return Err(Error::Invalid(format!("{side}: duplicate track id {}", t.track_id)));
        }
    }
    Ok(())
}

/// Regroups tracks by frame, flagging don't-care regions.
pub fn frame_sets(ann: &Annotations, cfg: &EvalConfig) -> FrameSets {
    let mut out = FrameSets::new();
    for t in &ann.tracks {
        let dont_care = cfg.dont_care_other && t.category == Category::Other;
        for (&f, g) in &t.frames {
            out.entry(f).or_default().push(EvalInstance {
                track_id: t.track_id,
                bbox: g.bbox,
                text: g.text.clone(),
                dont_care,
            });
        }
    }
    out
}

fn pair_iou(g: &EvalInstance, p: &EvalInstance, cfg: &EvalConfig) -> Option<f64> {
    let iou = g.bbox.iou(&p.bbox);
    if iou < cfg.iou_threshold {
        return None;
    }
    if cfg.mode == EvalMode::Spotting && !transcriptions_match(&g.text, &p.text) {
        return None;
    }
    Some(iou)
}

fn absorbed_by_dont_care(p: &EvalInstance, dont_care: &[&EvalInstance], cfg: &EvalConfig) -> bool {
    dont_care.iter().any(|g| g.bbox.iou(&p.bbox) >= cfg.iou_threshold)
}

/// Summable evaluation counts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub idsw: u64,
    pub gt: u64,
    pub iou_sum: f64,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

impl MotCounts {
    /// `1 − (FN + FP + IDSW) / GT`; with no GT the denominator is taken as 1.
    pub fn mota(&self) -> f64 {
        1.0 - (self.fn_ + self.fp + self.idsw) as f64 / self.gt.max(1) as f64
    }

    /// Mean IoU of matched pairs, 0 with no matches.
    pub fn motp(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    /// 0 when undefined.
    pub fn idf1(&self) -> f64 {
        let den = 2 * self.idtp + self.idfp + self.idfn;
        if den == 0 {
            0.0
        } else {
            2.0 * self.idtp as f64 / den as f64
        }
    }

    pub fn add(&mut self, o: &MotCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.idsw += o.idsw;
        self.gt += o.gt;
        self.iou_sum += o.iou_sum;
        self.idtp += o.idtp;
        self.idfp += o.idfp;
        self.idfn += o.idfn;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub video: String,
    pub mota: f64,
    pub motp: f64,
    pub idf1: f64,
    pub counts: MotCounts,
}

impl SequenceReport {
    fn from_counts(video: String, counts: MotCounts) -> Self {
        Self {
            video,
            mota: counts.mota(),
            motp: counts.motp(),
            idf1: counts.idf1(),
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotReport {
    pub mota: f64,
    pub motp: f64,
    pub idf1: f64,
    pub counts: MotCounts,
    pub sequences: Vec<SequenceReport>,
}

impl MotReport {
    /// Pools sequences by summing their counts.
    pub fn merge(sequences: Vec<SequenceReport>) -> Self {
        let mut counts = MotCounts::default();
        for s in &sequences {
            counts.add(&s.counts);
        }
        Self {
            mota: counts.mota(),
            motp: counts.motp(),
            idf1: counts.idf1(),
            counts,
            sequences,
        }
    }

    /// Aligned plain-text table, one row per sequence plus a total row.
    pub fn to_table(&self) -> String {
        let header = [
            "sequence", "MOTA", "MOTP", "IDF1", "TP", "FP", "FN", "IDSW", "GT",
        ];
        let row = |name: &str, mota: f64, motp: f64, idf1: f64, c: &MotCounts| -> Vec<String> {
            vec![
                name.to_string(),
                format!("{:.2}", 100.0 * mota),
                format!("{:.2}", 100.0 * motp),
                format!("{:.2}", 100.0 * idf1),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.idsw.to_string(),
                c.gt.to_string(),
            ]
        };
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for s in &self.sequences {
            rows.push(row(&s.video, s.mota, s.motp, s.idf1, &s.counts));
        }
        rows.push(row("TOTAL", self.mota, self.motp, self.idf1, &self.counts));
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, v)| {
                    if c == 0 {
                        format!("{v:<w$}", w = widths[c])
                    } else {
                        format!("{v:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  "));
        }
        out
    }
}

/// CLEAR-MOT counts for one sequence, with `idtp`/`idfp`/`idfn` left zero.
pub fn clear_counts(gt: &Annotations, pred: &Annotations, cfg: &EvalConfig) -> Result<MotCounts> {
    cfg.validate()?;
    check_unique_ids(gt, "ground truth")?;
    check_unique_ids(pred, "predictions")?;
    let gt_frames = frame_sets(gt, cfg);
    let pred_frames = frame_sets(pred, cfg);
    let frames: BTreeSet<u32> = gt_frames.keys().chain(pred_frames.keys()).copied().collect();
    let empty = Vec::new();

    let mut c = MotCounts::default();
    // last predicted id each GT track was matched to
    let mut last: HashMap<u64, u64> = HashMap::new();
    for f in frames {
        let all_g = gt_frames.get(&f).unwrap_or(&empty);
        let preds = pred_frames.get(&f).unwrap_or(&empty);
        let gts: Vec<&EvalInstance> = all_g.iter().filter(|g| !g.dont_care).collect();
        let dont_care: Vec<&EvalInstance> = all_g.iter().filter(|g| g.dont_care).collect();
        c.gt += gts.len() as u64;

        let mut g_used = vec![false; gts.len()];
        let mut p_used = vec![false; preds.len()];
        let mut matches: Vec<(usize, usize, f64)> = Vec::new();
        for (gi, g) in gts.iter().enumerate() {
            let Some(&pid) = last.get(&g.track_id) else { continue };
            let Some(pi) = preds.iter().position(|p| p.track_id == pid) else { continue };
            if p_used[pi] {
                continue;
            }
            if let Some(iou) = pair_iou(g, &preds[pi], cfg) {
                g_used[gi] = true;
                p_used[pi] = true;
                matches.push((gi, pi, iou));
            }
        }

        let free_g: Vec<usize> = (0..gts.len()).filter(|&i| !g_used[i]).collect();
        let free_p: Vec<usize> = (0..preds.len()).filter(|&j| !p_used[j]).collect();
        if !free_g.is_empty() && !free_p.is_empty() {
            // invalid pairs cost more than any set of valid ones, so the
            // assignment maximizes the number of valid pairs first
            let invalid = 1.0 + free_g.len().max(free_p.len()) as f64;
            let mut cost = Matrix::zeros(free_g.len(), free_p.len());
            let mut ious = vec![vec![None; free_p.len()]; free_g.len()];
            for (a, &gi) in free_g.iter().enumerate() {
                for (b, &pi) in free_p.iter().enumerate() {
                    ious[a][b] = pair_iou(gts[gi], &preds[pi], cfg);
                    cost[(a, b)] = ious[a][b].map_or(invalid, |iou| 1.0 - iou);
                }
            }
            for (a, b) in min_cost_pairs(&cost) {
                if let Some(iou) = ious[a][b] {
                    let (gi, pi) = (free_g[a], free_p[b]);
                    g_used[gi] = true;
                    p_used[pi] = true;
                    matches.push((gi, pi, iou));
                }
            }
        }

        for &(gi, pi, iou) in &matches {
            let gid = gts[gi].track_id;
            let pid = preds[pi].track_id;
            if last.insert(gid, pid).is_some_and(|prev| prev != pid) {
                c.idsw += 1;
            }
            c.tp += 1;
            c.iou_sum += iou;
        }
        c.fn_ += g_used.iter().filter(|u| !**u).count() as u64;
        c.fp += preds
            .iter()
            .zip(&p_used)
            .filter(|(p, used)| !**used && !absorbed_by_dont_care(p, &dont_care, cfg))
            .count() as u64;
    }
    Ok(c)
}

/// IDTP, IDFP, IDFN under the best one-to-one trajectory assignment.
pub fn id_counts(gt: &Annotations, pred: &Annotations, cfg: &EvalConfig) -> Result<(u64, u64, u64)> {
    cfg.validate()?;
    check_unique_ids(gt, "ground truth")?;
    check_unique_ids(pred, "predictions")?;
    let gt_frames = frame_sets(gt, cfg);
    let pred_frames = frame_sets(pred, cfg);

    let gt_ids: Vec<u64> = gt
        .tracks
        .iter()
        .filter(|t| !(cfg.dont_care_other && t.category == Category::Other))
        .map(|t| t.track_id)
        .collect();
    let pred_ids: Vec<u64> = pred.tracks.iter().map(|t| t.track_id).collect();
    let g_index: HashMap<u64, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let p_index: HashMap<u64, usize> = pred_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut hits = vec![vec![0u64; pred_ids.len()]; gt_ids.len()];
    let mut n_gt = 0u64;
    let mut n_pred = 0u64;
    let empty = Vec::new();
    for (f, preds) in &pred_frames {
        let all_g = gt_frames.get(f).unwrap_or(&empty);
        let gts: Vec<&EvalInstance> = all_g.iter().filter(|g| !g.dont_care).collect();
        let dont_care: Vec<&EvalInstance> = all_g.iter().filter(|g| g.dont_care).collect();
        for p in preds {
            let mut hit_any = false;
            for g in &gts {
                if pair_iou(g, p, cfg).is_some() {
                    hits[g_index[&g.track_id]][p_index[&p.track_id]] += 1;
                    hit_any = true;
                }
            }
            if hit_any || !absorbed_by_dont_care(p, &dont_care, cfg) {
                n_pred += 1;
            }
        }
    }
    for g in gt_frames.values().flatten() {
        if !g.dont_care {
            n_gt += 1;
        }
    }

    let mut idtp = 0u64;
    if !gt_ids.is_empty() && !pred_ids.is_empty() {
        let mut cost = Matrix::zeros(gt_ids.len(), pred_ids.len());
        for (i, row) in hits.iter().enumerate() {
            for (j, &h) in row.iter().enumerate() {
                cost[(i, j)] = -(h as f64);
            }
        }
        idtp = min_cost_pairs(&cost).into_iter().map(|(i, j)| hits[i][j]).sum();
    }
    Ok((idtp, n_pred - idtp, n_gt - idtp))
}

/// IDF1 = 2·IDTP / (2·IDTP + IDFP + IDFN).
pub fn idf1(gt: &Annotations, pred: &Annotations, cfg: &EvalConfig) -> Result<f64> {
    let (idtp, idfp, idfn) = id_counts(gt, pred, cfg)?;
    Ok(MotCounts {
        idtp,
        idfp,
        idfn,
        ..Default::default()
    }
    .idf1())
}

/// Full report for one sequence.
pub fn clear_mot(gt: &Annotations, pred: &Annotations, cfg: &EvalConfig) -> Result<MotReport> {
    let mut counts = clear_counts(gt, pred, cfg)?;
    let (idtp, idfp, idfn) = id_counts(gt, pred, cfg)?;
    counts.idtp = idtp;
    counts.idfp = idfp;
    counts.idfn = idfn;
    Ok(MotReport::merge(vec![SequenceReport::from_counts(gt.video.clone(), counts)]))
}

/// Evaluates several `(gt, pred)` sequences and pools their counts.
pub fn evaluate(pairs: &[(Annotations, Annotations)], cfg: &EvalConfig) -> Result<MotReport> {
    let mut seqs = Vec::with_capacity(pairs.len());
    for (gt, pred) in pairs {
        seqs.extend(clear_mot(gt, pred, cfg)?.sequences);
    }
    Ok(MotReport::merge(seqs))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrfReport {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl PrfReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f_score = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f_score,
            tp,
            fp,
            fn_,
        }
    }
}

/// Frame-wise greedy one-to-one matching in descending IoU, micro-averaged.
/// Track ids are ignored.
pub fn detection_prf(gt: &FrameSets, pred: &FrameSets, cfg: &EvalConfig) -> Result<PrfReport> {
    cfg.validate()?;
    let frames: BTreeSet<u32> = gt.keys().chain(pred.keys()).copied().collect();
    let empty = Vec::new();
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for f in frames {
        let all_g = gt.get(&f).unwrap_or(&empty);
        let preds = pred.get(&f).unwrap_or(&empty);
        let gts: Vec<&EvalInstance> = all_g.iter().filter(|g| !g.dont_care).collect();
        let dont_care: Vec<&EvalInstance> = all_g.iter().filter(|g| g.dont_care).collect();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (gi, g) in gts.iter().enumerate() {
            for (pi, p) in preds.iter().enumerate() {
                if let Some(iou) = pair_iou(g, p, cfg) {
                    pairs.push((iou, gi, pi));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut g_used = vec![false; gts.len()];
        let mut p_used = vec![false; preds.len()];
        for (_, gi, pi) in pairs {
            if !g_used[gi] && !p_used[pi] {
                g_used[gi] = true;
                p_used[pi] = true;
                tp += 1;
            }
        }
        fn_ += g_used.iter().filter(|u| !**u).count() as u64;
        fp += preds
            .iter()
            .zip(&p_used)
            .filter(|(p, used)| !**used && !absorbed_by_dont_care(p, &dont_care, cfg))
            .count() as u64;
    }
    Ok(PrfReport::from_counts(tp, fp, fn_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{BoxType, GroundTruthTrack, GtInstance};
    use proptest::prelude::*;

    fn bx(x: f64) -> BBox {
        BBox {
            x_min: x,
            y_min: 0.0,
            x_max: x + 10.0,
            y_max: 10.0,
        }
    }

    fn inst(b: BBox, text: &str) -> GtInstance {
        GtInstance {
            bbox: b,
            polygon: None,
            text: text.into(),
            box_type: BoxType::Quadrilateral,
        }
    }

    fn track(id: u64, frames: impl IntoIterator<Item = (u32, BBox)>) -> GroundTruthTrack {
        GroundTruthTrack {
            track_id: id,
            category: Category::Alphanumeric,
            frames: frames.into_iter().map(|(f, b)| (f, inst(b, "word"))).collect(),
        }
    }

    fn ann(tracks: Vec<GroundTruthTrack>) -> Annotations {
        Annotations {
            video: "v".into(),
            tracks,
        }
    }

    fn cfg() -> EvalConfig {
        EvalConfig::default()
    }

    #[test]
    fn perfect_predictions() {
        let gt = ann(vec![
            track(1, (0..10).map(|f| (f, bx(0.0)))),
            track(2, (3..8).map(|f| (f, bx(100.0)))),
        ]);
        let r = clear_mot(&gt, &gt, &cfg()).unwrap();
        assert_eq!((r.mota, r.motp, r.idf1, r.counts.idsw), (1.0, 1.0, 1.0, 0));
    }

    #[test]
    fn one_fp_one_fn_over_ten() {
        // two tracks, five frames each; one box missed, one spurious box
        let gt = ann(vec![
            track(1, (0..5).map(|f| (f, bx(0.0)))),
            track(2, (0..5).map(|f| (f, bx(100.0)))),
        ]);
        let pred = ann(vec![
            track(1, (0..5).map(|f| (f, bx(0.0)))),
            track(2, (0..4).map(|f| (f, bx(100.0)))),
            track(3, [(2, bx(300.0))]),
        ]);
        let r = clear_mot(&gt, &pred, &cfg()).unwrap();
        assert_eq!((r.counts.gt, r.counts.fp, r.counts.fn_, r.counts.idsw), (10, 1, 1, 0));
        assert_eq!(r.mota, 0.8);
    }

    #[test]
    fn one_id_change_over_ten_frames() {
        let gt = ann(vec![track(1, (0..10).map(|f| (f, bx(0.0))))]);
        let pred = ann(vec![
            track(7, (0..5).map(|f| (f, bx(0.0)))),
            track(8, (5..10).map(|f| (f, bx(0.0)))),
        ]);
        let r = clear_mot(&gt, &pred, &cfg()).unwrap();
        assert_eq!(r.counts.idsw, 1);
        assert_eq!(r.mota, 0.9);
    }

    #[test]
    fn split_track_idf1_half() {
        let gt = ann(vec![track(1, (0..10).map(|f| (f, bx(0.0))))]);
        let pred = ann(vec![
            track(7, (0..5).map(|f| (f, bx(0.0)))),
            track(8, (5..10).map(|f| (f, bx(0.0)))),
        ]);
        assert_eq!(id_counts(&gt, &pred, &cfg()).unwrap(), (5, 5, 5));
        assert_eq!(idf1(&gt, &pred, &cfg()).unwrap(), 0.5);
    }

    #[test]
    fn empty_predictions() {
        let gt = ann(vec![track(1, (0..4).map(|f| (f, bx(0.0))))]);
        let none = ann(vec![]);
        assert_eq!(idf1(&gt, &none, &cfg()).unwrap(), 0.0);
        let r = clear_mot(&gt, &none, &cfg()).unwrap();
        assert_eq!((r.mota, r.motp, r.counts.fn_), (0.0, 0.0, 4));
    }

    #[test]
    fn continuation_beats_better_iou() {
        // prediction 5 follows the GT; at frame 1 prediction 6 overlaps
        // slightly better but the existing pairing is kept
        let gt = ann(vec![track(1, [(0, bx(0.0)), (1, bx(0.0))])]);
        let pred = ann(vec![
            track(5, [(0, bx(0.0)), (1, bx(2.0))]),
            track(6, [(1, bx(1.0))]),
        ]);
        let r = clear_mot(&gt, &pred, &cfg()).unwrap();
        assert_eq!((r.counts.idsw, r.counts.fp, r.counts.tp), (0, 1, 2));
    }

    #[test]
    fn switch_counted_across_gap() {
        let gt = ann(vec![track(1, [(0, bx(0.0)), (3, bx(0.0))])]);
        let pred = ann(vec![track(5, [(0, bx(0.0))]), track(6, [(3, bx(0.0))])]);
        assert_eq!(clear_mot(&gt, &pred, &cfg()).unwrap().counts.idsw, 1);
    }

    #[test]
    fn dont_care_regions() {
        let mut other = track(2, [(0, bx(100.0))]);
        other.category = Category::Other;
        let gt = ann(vec![track(1, [(0, bx(0.0))]), other]);
        let pred = ann(vec![track(5, [(0, bx(0.0))]), track(6, [(0, bx(101.0))])]);
        let r = clear_mot(&gt, &pred, &cfg()).unwrap();
        assert_eq!((r.counts.gt, r.counts.fp, r.counts.fn_), (1, 0, 0));
        assert_eq!(r.idf1, 1.0);

        let strict = EvalConfig { dont_care_other: false, ..cfg() };
        let r = clear_mot(&gt, &pred, &strict).unwrap();
        assert_eq!((r.counts.gt, r.counts.fp, r.counts.fn_), (2, 0, 0));
    }

    #[test]
    fn spotting_needs_text() {
        let gt = ann(vec![track(1, [(0, bx(0.0))])]);
        let mut pred = gt.clone();
        pred.tracks[0].frames.get_mut(&0).unwrap().text = "  WORD ".into();
        let spot = EvalConfig { mode: EvalMode::Spotting, ..cfg() };
        assert_eq!(clear_mot(&gt, &pred, &spot).unwrap().mota, 1.0);
        pred.tracks[0].frames.get_mut(&0).unwrap().text = "ward".into();
        let r = clear_mot(&gt, &pred, &spot).unwrap();
        assert_eq!((r.counts.fp, r.counts.fn_), (1, 1));
        assert_eq!(clear_mot(&gt, &pred, &cfg()).unwrap().mota, 1.0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let gt = ann(vec![track(1, [(0, bx(0.0))])]);
        let pred = ann(vec![track(3, [(0, bx(0.0))]), track(3, [(1, bx(0.0))])]);
        assert!(clear_mot(&gt, &pred, &cfg()).is_err());
        assert!(EvalConfig { iou_threshold: 1.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn prf_examples() {
        let gt = ann(vec![track(1, (0..10).map(|f| (f, bx(0.0))))]);
        let c = cfg();
        let g = frame_sets(&gt, &c);
        let r = detection_prf(&g, &g, &c).unwrap();
        assert_eq!((r.precision, r.recall, r.f_score), (1.0, 1.0, 1.0));

        let pred = ann(vec![
            track(1, (0..8).map(|f| (f, bx(0.0)))),
            track(2, [(0, bx(200.0)), (9, bx(200.0))]),
        ]);
        let r = detection_prf(&g, &frame_sets(&pred, &c), &c).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (8, 2, 2));
        assert!((r.precision - 0.8).abs() < 1e-15 && (r.recall - 0.8).abs() < 1e-15);
        assert!((r.f_score - 0.8).abs() < 1e-15);

        let r = detection_prf(&g, &FrameSets::new(), &c).unwrap();
        assert_eq!((r.precision, r.recall, r.f_score), (0.0, 0.0, 0.0));
    }

    #[test]
    fn table_has_total_row() {
        let gt = ann(vec![track(1, (0..3).map(|f| (f, bx(0.0))))]);
        let t = clear_mot(&gt, &gt, &cfg()).unwrap().to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("TOTAL"));
        assert!(lines[2].contains("100.00"));
    }

    #[test]
    fn removing_a_correct_prediction_never_helps() {
        // third field: every correct point is also an identity match; in the
        // fragmented case one fragment is IDFP, and dropping a point of it
        // legitimately raises IDF1
        let scripted = [
            (
                ann(vec![track(1, (0..6).map(|f| (f, bx(0.0)))), track(2, (2..8).map(|f| (f, bx(100.0))))]),
                ann(vec![track(1, (0..6).map(|f| (f, bx(0.0)))), track(2, (2..8).map(|f| (f, bx(100.0))))]),
                true,
            ),
            (
                ann(vec![track(1, (0..8).map(|f| (f, bx(0.0))))]),
                ann(vec![
                    track(4, (0..4).map(|f| (f, bx(0.0)))),
                    track(5, (4..8).map(|f| (f, bx(1.0)))),
                    track(6, [(3, bx(300.0))]),
                ]),
                false,
            ),
        ];
        for (gt, pred, identity_correct) in scripted {
            let full = clear_mot(&gt, &pred, &cfg()).unwrap();
            for (k, t) in pred.tracks.iter().enumerate() {
                for (&f, g) in &t.frames {
                    let correct = gt.tracks.iter().filter_map(|t| t.get(f)).any(|x| x.bbox.iou(&g.bbox) >= 0.5);
                    if !correct {
                        continue;
                    }
                    let mut fewer = pred.clone();
                    fewer.tracks[k].frames.remove(&f);
                    let r = clear_mot(&gt, &fewer, &cfg()).unwrap();
                    assert!(r.mota <= full.mota, "track {} frame {f}", t.track_id);
                    assert!(!identity_correct || r.idf1 <= full.idf1, "track {} frame {f}", t.track_id);
                }
            }
        }
    }

    /// Maximum total hits over all partial injections, by enumeration.
    fn brute_idtp(hits: &[Vec<u64>]) -> u64 {
        fn go(hits: &[Vec<u64>], row: usize, used: &mut Vec<bool>) -> u64 {
            if row == hits.len() {
                return 0;
            }
            let mut best = go(hits, row + 1, used);
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(hits[row][j] + go(hits, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        let m = hits.first().map_or(0, |r| r.len());
        go(hits, 0, &mut vec![false; m])
    }

    /// Scenario generator: tracks on a few fixed lanes, so overlap is all
    /// or nothing and hit counts are easy to recount.
    fn scenario() -> impl Strategy<Value = (Annotations, Annotations)> {
        let side = || {
            prop::collection::vec(
                (0usize..3, prop::collection::btree_set(0u32..8, 1..6)),
                0..=6,
            )
        };
        (side(), side()).prop_map(|(g, p)| {
            let build = |v: Vec<(usize, BTreeSet<u32>)>| {
                ann(v
                    .into_iter()
                    .enumerate()
                    .map(|(i, (lane, frames))| track(i as u64 + 1, frames.into_iter().map(|f| (f, bx(100.0 * lane as f64)))))
                    .collect())
            };
            (build(g), build(p))
        })
    }

    proptest! {
        #[test]
        fn idtp_matches_enumeration((gt, pred) in scenario()) {
            let mut hits = vec![vec![0u64; pred.tracks.len()]; gt.tracks.len()];
            for (i, g) in gt.tracks.iter().enumerate() {
                for (j, p) in pred.tracks.iter().enumerate() {
                    hits[i][j] = g.frames.iter()
                        .filter(|(f, b)| p.get(**f).is_some_and(|q| q.bbox.iou(&b.bbox) >= 0.5))
                        .count() as u64;
                }
            }
            let (idtp, _, _) = id_counts(&gt, &pred, &cfg()).unwrap();
            prop_assert_eq!(idtp, brute_idtp(&hits));
        }

        #[test]
        fn self_evaluation_is_perfect(lifetimes in prop::collection::vec(prop::collection::btree_set(0u32..8, 1..6), 1..=6)) {
            let a = ann(lifetimes
                .into_iter()
                .enumerate()
                .map(|(i, frames)| track(i as u64 + 1, frames.into_iter().map(move |f| (f, bx(100.0 * i as f64)))))
                .collect());
            let r = clear_mot(&a, &a, &cfg()).unwrap();
            prop_assert_eq!((r.mota, r.motp, r.idf1), (1.0, 1.0, 1.0));
        }
    }
}
