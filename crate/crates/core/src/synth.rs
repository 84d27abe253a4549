//! Synthetic detection streams with ground truth.
//!
//! Every track owns a horizontal lane so boxes of different tracks never
//! overlap, and moves by a reflecting random walk inside it. Queries are
//! noisy copies of a per-track unit latent; false positives get fresh
//! latents on the opposite side of a shared "text" direction so that a
//! linear rescoring head has something to learn.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data_io::{
    Annotations, BBox, BoxType, Category, DetectionRecord, DetectionStream, GroundTruthTrack, GtInstance, Polygon,
    StreamHeader,
};
use crate::error::{Error, Result};
use crate::numerics::norm;

const WORDS: &[&str] = &[
    "EXIT", "Coffee", "OPEN", "Station", "SALE", "Hotel", "Bank", "PARKING", "Market", "Taxi", "Pharmacy", "STOP",
    "Bakery", "Museum", "Police", "Library",
];

/// IoU at which a record counts as covering a ground-truth box.
pub const GT_OVERLAP_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub video: String,
    /// T.
    pub frames: u32,
    pub width: f64,
    pub height: f64,
    pub tracks: usize,
    pub d_q: usize,
    /// σ of the per-coordinate Gaussian added to latents.
    pub noise_sigma: f64,
    pub miss_prob: f64,
    /// Mean number of false positives per frame.
    pub fp_rate: f64,
    /// Shortest track lifetime in frames (capped at T).
    pub min_lifetime: u32,
    /// Largest horizontal move per frame, pixels.
    pub motion_step: f64,
    /// Weight of the shared text direction in every latent (sign flipped
    /// for false positives).
    pub class_signal: f64,
    pub degrade_fraction: f64,
    pub degrade_floor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            video: "synth".into(),
            frames: 40,
            width: 640.0,
            height: 480.0,
            tracks: 6,
            d_q: 32,
            noise_sigma: 0.1,
            miss_prob: 0.0,
            fp_rate: 0.0,
            min_lifetime: 10,
            motion_step: 4.0,
            class_signal: 0.3,
            degrade_fraction: 0.0,
            degrade_floor: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if self.d_q < 2 {
            return bad("d_q must be at least 2");
        }
        if !(self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite()) {
            return bad("canvas size must be positive");
        }
        if self.tracks as f64 > self.height / 4.0 {
            return bad("too many tracks for the canvas height");
        }
        for (name, p) in [
            ("miss_prob", self.miss_prob),
            ("degrade_fraction", self.degrade_fraction),
            ("degrade_floor", self.degrade_floor),
            ("class_signal", self.class_signal),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be nonnegative");
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return bad("fp_rate must be nonnegative");
        }
        if !(self.motion_step >= 0.0 && self.motion_step.is_finite()) {
            return bad("motion_step must be nonnegative");
        }
        Ok(())
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector `s·u + √(1−s²)·r` with `r ⊥ u` random.
fn latent_around(rng: &mut ChaCha8Rng, u: &[f64], s: f64) -> Vec<f64> {
    loop {
        let r = random_unit(rng, u.len());
        let proj: f64 = r.iter().zip(u).map(|(a, b)| a * b).sum();
        let perp: Vec<f64> = r.iter().zip(u).map(|(a, b)| a - proj * b).collect();
        let n = norm(&perp);
        if n > 1e-6 {
            let c = (1.0 - s * s).sqrt();
            let v: Vec<f64> = u.iter().zip(&perp).map(|(a, p)| s * a + c * p / n).collect();
            let n = norm(&v);
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Shared direction along which true text and clutter latents differ. Fixed
/// per `d_q` so that a head trained on one seed transfers to another.
pub fn text_direction(d_q: usize) -> Vec<f64> {
    random_unit(&mut ChaCha8Rng::seed_from_u64(TEXT_DIRECTION_SEED), d_q)
}

const TEXT_DIRECTION_SEED: u64 = 0x7e47;

fn noisy_query(rng: &mut ChaCha8Rng, latent: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return latent.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let v: Vec<f64> = latent.iter().map(|x| x + normal.sample(rng)).collect();
    let n = norm(&v);
    if n < 1e-12 {
        return latent.to_vec();
    }
    v.into_iter().map(|x| x / n).collect()
}

fn corners(b: &BBox) -> Polygon {
    vec![
        [b.x_min, b.y_min],
        [b.x_max, b.y_min],
        [b.x_max, b.y_max],
        [b.x_min, b.y_max],
    ]
}

struct TrackPlan {
    id: u64,
    start: u32,
    end: u32,
    latent: Vec<f64>,
    text: String,
    boxes: Vec<BBox>,
}

/// Generates a detection stream and its ground truth. Deterministic given
/// `cfg.seed`.
pub fn generate_sequence(cfg: &SynthConfig) -> Result<(DetectionStream, Annotations)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t_len = cfg.frames;
    let text_dir = text_direction(cfg.d_q);
    let lane_h = cfg.height / cfg.tracks.max(1) as f64;
    let box_h = (0.6 * lane_h).min(40.0);

    let mut plans = Vec::with_capacity(cfg.tracks);
    for k in 0..cfg.tracks {
        let min_life = cfg.min_lifetime.clamp(1, t_len);
        let life = rng.random_range(min_life..=t_len);
        let start = rng.random_range(0..=t_len - life);
        let box_w = rng.random_range(0.08..0.2) * cfg.width;
        let y0 = k as f64 * lane_h + (lane_h - box_h) / 2.0;
        let mut x = rng.random_range(0.0..cfg.width - box_w);
        let mut boxes = Vec::with_capacity(life as usize);
        for _ in 0..life {
            boxes.push(BBox {
                x_min: x,
                y_min: y0,
                x_max: x + box_w,
                y_max: y0 + box_h,
            });
            if cfg.motion_step > 0.0 {
                x += rng.random_range(-cfg.motion_step..=cfg.motion_step);
            }
            let max_x = cfg.width - box_w;
            if x < 0.0 {
                x = -x;
            }
            if x > max_x {
                x = 2.0 * max_x - x;
            }
            x = x.clamp(0.0, max_x);
        }
        plans.push(TrackPlan {
            id: k as u64 + 1,
            start,
            end: start + life,
            latent: latent_around(&mut rng, &text_dir, cfg.class_signal),
            text: WORDS[rng.random_range(0..WORDS.len())].to_string(),
            boxes,
        });
    }

    let fp_count = if cfg.fp_rate > 0.0 {
        Some(Poisson::new(cfg.fp_rate).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut records = Vec::new();
    for f in 0..t_len {
        let mut frame_records = Vec::new();
        for p in &plans {
            if f < p.start || f >= p.end {
                continue;
            }
            // draw every random quantity so a change of miss_prob does not
            // shift the rest of the sequence
            let missed = rng.random_bool(cfg.miss_prob);
            let query = noisy_query(&mut rng, &p.latent, cfg.noise_sigma);
            let score = rng.random_range(0.7..=1.0);
            if missed {
                continue;
            }
            let bbox = p.boxes[(f - p.start) as usize];
            frame_records.push(DetectionRecord {
                frame_index: f,
                query,
                bbox,
                polygon: Some(corners(&bbox)),
                score,
                text: Some(p.text.clone()),
            });
        }
        let n_fp = fp_count.as_ref().map_or(0, |d| d.sample(&mut rng) as usize);
        for _ in 0..n_fp {
            let w = rng.random_range(0.05..0.2) * cfg.width;
            let h = rng.random_range(0.3..1.0) * box_h;
            let x = rng.random_range(0.0..cfg.width - w);
            let y = rng.random_range(0.0..cfg.height - h);
            let bbox = BBox {
                x_min: x,
                y_min: y,
                x_max: x + w,
                y_max: y + h,
            };
            let latent = latent_around(&mut rng, &text_dir, -cfg.class_signal);
            let query = noisy_query(&mut rng, &latent, cfg.noise_sigma);
            frame_records.push(DetectionRecord {
                frame_index: f,
                query,
                bbox,
                polygon: Some(corners(&bbox)),
                score: rng.random_range(0.05..=0.5),
                text: Some(WORDS[rng.random_range(0..WORDS.len())].to_string()),
            });
        }
        frame_records.shuffle(&mut rng);
        records.extend(frame_records);
    }

    let mut header = StreamHeader::new(cfg.video.clone(), cfg.d_q);
    header.width = Some(cfg.width);
    header.height = Some(cfg.height);
    header.num_frames = Some(t_len);
    let stream = DetectionStream::from_records(header, records);

    let tracks = plans
        .into_iter()
        .map(|p| GroundTruthTrack {
            track_id: p.id,
            category: Category::Alphanumeric,
            frames: (p.start..p.end)
                .zip(&p.boxes)
                .map(|(f, b)| {
                    (
                        f,
                        GtInstance {
                            bbox: *b,
                            polygon: Some(corners(b)),
                            text: p.text.clone(),
                            box_type: BoxType::Quadrilateral,
                        },
                    )
                })
                .collect(),
        })
        .collect();
    let ann = Annotations {
        video: cfg.video.clone(),
        tracks,
    };
    let stream = if cfg.degrade_fraction > 0.0 {
        degrade_scores(&stream, &ann, cfg.degrade_fraction, cfg.degrade_floor, cfg.seed ^ 0x5eed)?
    } else {
        stream
    };
    Ok((stream, ann))
}

/// Resamples the spotter score of `round(fraction · n)` of the `n` records
/// that cover a ground-truth box, uniformly in `[0, floor]`. The chosen
/// records depend only on `seed` and the stream.
pub fn degrade_scores(
    stream: &DetectionStream,
    gt: &Annotations,
    fraction: f64,
    floor: f64,
    seed: u64,
) -> Result<DetectionStream> {
    if !(0.0..=1.0).contains(&fraction) || !(0.0..=1.0).contains(&floor) {
        return Err(Error::Config("fraction and floor must lie in [0, 1]".into()));
    }
    let mut out = stream.clone();
    let mut covering: Vec<(usize, usize)> = Vec::new();
    for (fi, frame) in out.frames.iter().enumerate() {
        for (ri, r) in frame.records.iter().enumerate() {
            let hit = gt
                .tracks
                .iter()
                .filter_map(|t| t.get(frame.frame_index))
                .any(|g| g.bbox.iou(&r.bbox) >= GT_OVERLAP_IOU);
            if hit {
                covering.push((fi, ri));
            }
        }
    }
    let k = (fraction * covering.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    covering.shuffle(&mut rng);
    let mut chosen = covering[..k].to_vec();
    chosen.sort_unstable();
    for (fi, ri) in chosen {
        out.frames[fi].records[ri].score = rng.random_range(0.0..=floor);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{read_detection_stream, write_detection_stream_to};
    use crate::numerics::cosine_similarity;
    use crate::training::assign_targets;

    fn noiseless(tracks: usize, frames: u32) -> SynthConfig {
        SynthConfig {
            frames,
            tracks,
            noise_sigma: 0.0,
            min_lifetime: frames,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_single_track_repeats_query() {
        let (s, ann) = generate_sequence(&noiseless(1, 6)).unwrap();
        assert_eq!(s.frames.len(), 6);
        let q0 = &s.frames[0].records[0].query;
        assert!(s.frames.iter().all(|f| f.records.len() == 1 && &f.records[0].query == q0));
        assert_eq!(ann.tracks.len(), 1);
    }

    #[test]
    fn certain_misses_give_empty_stream() {
        let cfg = SynthConfig { miss_prob: 1.0, ..Default::default() };
        let (s, ann) = generate_sequence(&cfg).unwrap();
        assert_eq!(s.num_records(), 0);
        assert!(!ann.tracks.is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig { fp_rate: 1.5, miss_prob: 0.2, seed: 4, ..Default::default() };
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_detection_stream_to(&generate_sequence(&cfg).unwrap().0, &mut a).unwrap();
        write_detection_stream_to(&generate_sequence(&cfg).unwrap().0, &mut b).unwrap();
        assert_eq!(a, b);
        let other = SynthConfig { seed: 5, ..cfg };
        let mut c = Vec::new();
        write_detection_stream_to(&generate_sequence(&other).unwrap().0, &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_frames_rejected() {
        assert!(generate_sequence(&SynthConfig { frames: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn generated_streams_parse() {
        for seed in 0..5 {
            let cfg = SynthConfig { fp_rate: 2.0, miss_prob: 0.3, seed, ..Default::default() };
            let (s, _) = generate_sequence(&cfg).unwrap();
            let mut buf = Vec::new();
            write_detection_stream_to(&s, &mut buf).unwrap();
            assert_eq!(read_detection_stream(buf.as_slice()).unwrap(), s);
        }
    }

    #[test]
    fn targets_recoverable_without_noise() {
        let cfg = noiseless(5, 12);
        let (s, ann) = generate_sequence(&cfg).unwrap();
        for f in &s.frames {
            let boxes: Vec<BBox> = f.records.iter().map(|r| r.bbox).collect();
            let gt: Vec<Option<BBox>> = ann.tracks.iter().map(|t| t.get(f.frame_index).map(|g| g.bbox)).collect();
            for (k, a) in assign_targets(&boxes, &gt).into_iter().enumerate() {
                if let Some(g) = gt[k] {
                    let i = a.expect("present track assigned");
                    assert_eq!(boxes[i].iou(&g), 1.0);
                }
            }
        }
    }

    #[test]
    fn same_track_similar_other_tracks_not() {
        let cfg = SynthConfig { noise_sigma: 0.05, tracks: 2, min_lifetime: 40, ..Default::default() };
        let (s, ann) = generate_sequence(&cfg).unwrap();
        let by_track = |f: &crate::data_io::DetectionFrame, k: usize| {
            let g = ann.tracks[k].get(f.frame_index).unwrap().bbox;
            f.records.iter().find(|r| r.bbox == g).unwrap().query.clone()
        };
        let a0 = by_track(&s.frames[0], 0);
        let a1 = by_track(&s.frames[1], 0);
        let b1 = by_track(&s.frames[1], 1);
        assert!(cosine_similarity(&a0, &a1).unwrap().value > 0.8);
        assert!(cosine_similarity(&a0, &b1).unwrap().value < 0.6);
    }

    #[test]
    fn degrade_examples() {
        let cfg = SynthConfig { fp_rate: 1.0, ..Default::default() };
        let (s, ann) = generate_sequence(&cfg).unwrap();
        assert_eq!(degrade_scores(&s, &ann, 0.0, 0.1, 1).unwrap(), s);

        let all = degrade_scores(&s, &ann, 1.0, 0.1, 1).unwrap();
        for (fa, fb) in all.frames.iter().zip(&s.frames) {
            for (ra, rb) in fa.records.iter().zip(&fb.records) {
                let covers = ann
                    .tracks
                    .iter()
                    .filter_map(|t| t.get(fa.frame_index))
                    .any(|g| g.bbox.iou(&ra.bbox) >= GT_OVERLAP_IOU);
                if covers {
                    assert!(ra.score <= 0.1);
                } else {
                    assert_eq!(ra.score, rb.score);
                }
            }
        }
    }

    #[test]
    fn degrade_half_is_reproducible() {
        let cfg = SynthConfig { tracks: 5, frames: 20, min_lifetime: 20, ..Default::default() };
        let (s, ann) = generate_sequence(&cfg).unwrap();
        assert_eq!(s.num_records(), 100);
        let changed = |d: &DetectionStream| -> Vec<(u32, usize)> {
            d.frames
                .iter()
                .zip(&s.frames)
                .flat_map(|(a, b)| {
                    a.records
                        .iter()
                        .zip(&b.records)
                        .enumerate()
                        .filter(|(_, (x, y))| x.score != y.score)
                        .map(move |(i, _)| (a.frame_index, i))
                })
                .collect()
        };
        let a = changed(&degrade_scores(&s, &ann, 0.5, 0.1, 9).unwrap());
        let b = changed(&degrade_scores(&s, &ann, 0.5, 0.1, 9).unwrap());
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
    }
}
