//! Detection streams, ground-truth annotations and trajectory files.
//!
//! Streams and trajectories are line-delimited JSON; annotations are a single
//! JSON document. Everything is validated on ingest so downstream code can
//! rely on well-formed boxes, scores in `[0, 1]` and consistent dimensions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

pub const STREAM_FORMAT: &str = "qtrack-det/1";

/// Tolerance for the polygon-envelope / box consistency check, in pixels.
pub const ENVELOPE_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: invalid `{field}`: {msg}")]
    Invalid {
        line: usize,
        field: &'static str,
        msg: String,
    },
    #[error("{0}")]
    Schema(String),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Rejects boxes that are non-finite or have no area.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> std::result::Result<Self, String> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> std::result::Result<Self, String> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(format!("non-finite coordinate in {a:?}"));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(format!("degenerate box {a:?}"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = w * h;
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).min(1.0)
        }
    }

    /// Axis-aligned envelope of a point list.
    pub fn envelope(points: &[[f64; 2]]) -> Option<BBox> {
        let first = points.first()?;
        let mut b = BBox {
            x_min: first[0],
            y_min: first[1],
            x_max: first[0],
            y_max: first[1],
        };
        for p in &points[1..] {
            b.x_min = b.x_min.min(p[0]);
            b.y_min = b.y_min.min(p[1]);
            b.x_max = b.x_max.max(p[0]);
            b.y_max = b.y_max.max(p[1]);
        }
        Some(b)
    }

    pub fn max_abs_diff(&self, other: &BBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 4]>::deserialize(d)?;
        BBox::from_array(a).map_err(serde::de::Error::custom)
    }
}

pub type Polygon = Vec<[f64; 2]>;

fn check_envelope(poly: &[[f64; 2]], bbox: &BBox) -> std::result::Result<(), String> {
    let env = BBox::envelope(poly).ok_or_else(|| "empty polygon".to_string())?;
    let diff = env.max_abs_diff(bbox);
    if diff > ENVELOPE_TOL {
        return Err(format!(
            "polygon envelope {:?} differs from box {:?} by {diff}",
            env.to_array(),
            bbox.to_array()
        ));
    }
    Ok(())
}

/// Trims surrounding whitespace; case is preserved.
pub fn normalize_transcription(text: &str) -> String {
    text.trim().to_string()
}

/// One detected text instance in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub frame_index: u32,
    pub query: Vec<f64>,
    pub bbox: BBox,
    pub polygon: Option<Polygon>,
    /// Score reported by the image spotter, in `[0, 1]`.
    pub score: f64,
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub format: String,
    pub d_q: usize,
    pub video: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_frames: Option<u32>,
}

impl StreamHeader {
    pub fn new(video: impl Into<String>, d_q: usize) -> Self {
        Self {
            format: STREAM_FORMAT.to_string(),
            d_q,
            video: video.into(),
            width: None,
            height: None,
            num_frames: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub frame_index: u32,
    pub records: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionStream {
    pub header: StreamHeader,
    pub frames: Vec<DetectionFrame>,
}

impl DetectionStream {
    pub fn num_records(&self) -> usize {
        self.frames.iter().map(|f| f.records.len()).sum()
    }

    pub fn frame(&self, index: u32) -> Option<&DetectionFrame> {
        self.frames
            .binary_search_by_key(&index, |f| f.frame_index)
            .ok()
            .map(|i| &self.frames[i])
    }

    /// Number of frames in the sequence: the header value when present,
    /// otherwise one past the last frame holding a record.
    pub fn sequence_len(&self) -> u32 {
        self.header
            .num_frames
            .unwrap_or_else(|| self.frames.last().map_or(0, |f| f.frame_index + 1))
    }

    /// Groups loose records into frames sorted by index.
    pub fn from_records(header: StreamHeader, records: Vec<DetectionRecord>) -> Self {
        let mut by_frame: BTreeMap<u32, Vec<DetectionRecord>> = BTreeMap::new();
        for r in records {
            by_frame.entry(r.frame_index).or_default().push(r);
        }
        let frames = by_frame
            .into_iter()
            .map(|(frame_index, records)| DetectionFrame {
                frame_index,
                records,
            })
            .collect();
        Self { header, frames }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    frame: u32,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    poly: Option<Polygon>,
    score: f64,
    query: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

pub fn read_detection_stream(reader: impl BufRead) -> Result<DetectionStream> {
    let mut lines = reader.lines().enumerate();
    let header: StreamHeader = loop {
        match lines.next() {
            None => return Err(DataError::Parse { line: 1, msg: "missing header line".into() }),
            Some((i, line)) => {
                let line = line.map_err(|e| DataError::Parse { line: i + 1, msg: e.to_string() })?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| DataError::Parse {
                    line: i + 1,
                    msg: format!("bad header: {e}"),
                })?;
            }
        }
    };
    if header.format != STREAM_FORMAT {
        return Err(DataError::Invalid {
            line: 1,
            field: "format",
            msg: format!("expected {STREAM_FORMAT:?}, got {:?}", header.format),
        });
    }
    if header.d_q == 0 {
        return Err(DataError::Invalid { line: 1, field: "d_q", msg: "must be positive".into() });
    }

    let mut frames: Vec<DetectionFrame> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| DataError::Parse { line: line_no, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse { line: line_no, msg: e.to_string() })?;
        let invalid = |field, msg: String| DataError::Invalid { line: line_no, field, msg };
        let bbox = BBox::from_array(raw.bbox).map_err(|m| invalid("box", m))?;
        if !(0.0..=1.0).contains(&raw.score) {
            return Err(invalid("score", format!("{} is outside [0, 1]", raw.score)));
        }
        if raw.query.len() != header.d_q {
            return Err(invalid(
                "query",
                format!("dimension {} does not match d_q = {}", raw.query.len(), header.d_q),
            ));
        }
        if raw.query.iter().any(|v| !v.is_finite()) {
            return Err(invalid("query", "non-finite entry".into()));
        }
        if let Some(poly) = &raw.poly {
            check_envelope(poly, &bbox).map_err(|m| invalid("poly", m))?;
        }
        let record = DetectionRecord {
            frame_index: raw.frame,
            query: raw.query,
            bbox,
            polygon: raw.poly,
            score: raw.score,
            text: raw.text.map(|t| normalize_transcription(&t)),
        };
        match frames.last_mut() {
            Some(last) if last.frame_index == record.frame_index => last.records.push(record),
            Some(last) if last.frame_index > record.frame_index => {
                return Err(invalid(
                    "frame",
                    format!("frame {} after frame {}", record.frame_index, last.frame_index),
                ));
            }
            _ => frames.push(DetectionFrame {
                frame_index: record.frame_index,
                records: vec![record],
            }),
        }
    }
    Ok(DetectionStream { header, frames })
}

pub fn parse_detection_stream(path: impl AsRef<Path>) -> Result<DetectionStream> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_detection_stream(BufReader::new(file))
}

pub fn write_detection_stream_to(stream: &DetectionStream, mut w: impl Write) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, &stream.header)?;
    writeln!(w)?;
    for frame in &stream.frames {
        for r in &frame.records {
            let line = RecordLine {
                frame: r.frame_index,
                bbox: r.bbox.to_array(),
                poly: r.polygon.clone(),
                score: r.score,
                query: r.query.clone(),
                text: r.text.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
    }
    w.flush()
}

pub fn write_detection_stream(stream: &DetectionStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_detection_stream_to(stream, BufWriter::new(file)).map_err(|e| DataError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Alphanumeric,
    /// Blurry or non-Latin text; a don't-care region in evaluation.
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxType {
    Quadrilateral,
    Polygon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub bbox: BBox,
    pub polygon: Option<Polygon>,
    pub text: String,
    pub box_type: BoxType,
}

/// Ground-truth tube: a frame absent from `frames` means the instance is
/// not present in that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTrack {
    pub track_id: u64,
    pub category: Category,
    pub frames: BTreeMap<u32, GtInstance>,
}

impl GroundTruthTrack {
    pub fn get(&self, frame: u32) -> Option<&GtInstance> {
        self.frames.get(&frame)
    }

    pub fn is_present(&self, frame: u32) -> bool {
        self.frames.contains_key(&frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub video: String,
    pub tracks: Vec<GroundTruthTrack>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtFrameRaw {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    poly: Option<Polygon>,
    text: String,
    box_type: BoxType,
}

/// Frame map that refuses duplicate keys instead of keeping the last one.
#[derive(Debug, Default)]
struct FrameMap(Vec<(String, GtFrameRaw)>);

impl<'de> Deserialize<'de> for FrameMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = FrameMap;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from frame index to instance")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<FrameMap, A::Error> {
                let mut seen = BTreeSet::new();
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, GtFrameRaw>()? {
                    if !seen.insert(k.clone()) {
                        return Err(serde::de::Error::custom(format!("duplicate frame key {k:?}")));
                    }
                    out.push((k, v));
                }
                Ok(FrameMap(out))
            }
        }
        d.deserialize_map(V)
    }
}

impl Serialize for FrameMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TrackRaw {
    id: u64,
    category: Category,
    frames: FrameMap,
}

#[derive(Debug, Deserialize, Serialize)]
struct AnnotationsRaw {
    video: String,
    tracks: Vec<TrackRaw>,
}

fn validate_gt_instance(raw: GtFrameRaw) -> std::result::Result<GtInstance, String> {
    let bbox = BBox::from_array(raw.bbox)?;
    if let Some(poly) = &raw.poly {
        match raw.box_type {
            BoxType::Quadrilateral if poly.len() != 4 => {
                return Err(format!("quadrilateral with {} points", poly.len()));
            }
            BoxType::Polygon if poly.len() < 3 => {
                return Err(format!("polygon with {} points", poly.len()));
            }
            _ => {}
        }
        check_envelope(poly, &bbox)?;
    }
    Ok(GtInstance {
        bbox,
        polygon: raw.poly,
        text: normalize_transcription(&raw.text),
        box_type: raw.box_type,
    })
}

pub fn read_annotations(json: &str) -> Result<Annotations> {
    let raw: AnnotationsRaw = serde_json::from_str(json).map_err(|e| DataError::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let mut ids = BTreeSet::new();
    let mut tracks = Vec::with_capacity(raw.tracks.len());
    for t in raw.tracks {
        if !ids.insert(t.id) {
            return Err(DataError::Schema(format!("duplicate track id {}", t.id)));
        }
        let mut frames = BTreeMap::new();
        for (key, inst) in t.frames.0 {
            let frame: u32 = key
                .parse()
                .map_err(|_| DataError::Schema(format!("track {}: bad frame key {key:?}", t.id)))?;
            let inst = validate_gt_instance(inst)
                .map_err(|m| DataError::Schema(format!("track {} frame {frame}: {m}", t.id)))?;
            if frames.insert(frame, inst).is_some() {
                return Err(DataError::Schema(format!("duplicate (track {}, frame {frame})", t.id)));
            }
        }
        if frames.is_empty() {
            return Err(DataError::Schema(format!("track {} has no frames", t.id)));
        }
        tracks.push(GroundTruthTrack {
            track_id: t.id,
            category: t.category,
            frames,
        });
    }
    Ok(Annotations {
        video: raw.video,
        tracks,
    })
}

pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Annotations> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    read_annotations(&text)
}

pub fn annotations_to_string(ann: &Annotations) -> String {
    let raw = AnnotationsRaw {
        video: ann.video.clone(),
        tracks: ann
            .tracks
            .iter()
            .map(|t| TrackRaw {
                id: t.track_id,
                category: t.category,
                frames: FrameMap(
                    t.frames
                        .iter()
                        .map(|(f, inst)| {
                            (
                                f.to_string(),
                                GtFrameRaw {
                                    bbox: inst.bbox.to_array(),
                                    poly: inst.polygon.clone(),
                                    text: inst.text.clone(),
                                    box_type: inst.box_type,
                                },
                            )
                        })
                        .collect(),
                ),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).expect("annotations are always serializable")
}

pub fn write_annotations(ann: &Annotations, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, annotations_to_string(ann) + "\n").map_err(|e| DataError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub frame_index: u32,
    pub bbox: BBox,
    pub polygon: Option<Polygon>,
    /// Fused score of the instance assigned in this frame.
    pub score: f64,
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryOutput {
    pub track_id: u64,
    pub points: Vec<TrajectoryPoint>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryLine {
    id: u64,
    frame: u32,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    poly: Option<Polygon>,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

/// Writes one line per (track, frame), ordered by track id then frame.
pub fn write_trajectories_to(tracks: &[TrajectoryOutput], mut w: impl Write) -> std::io::Result<()> {
    let mut ordered: Vec<&TrajectoryOutput> = tracks.iter().collect();
    ordered.sort_by_key(|t| t.track_id);
    for t in ordered {
        let mut points: Vec<&TrajectoryPoint> = t.points.iter().collect();
        points.sort_by_key(|p| p.frame_index);
        for p in points {
            let line = TrajectoryLine {
                id: t.track_id,
                frame: p.frame_index,
                bbox: p.bbox.to_array(),
                poly: p.polygon.clone(),
                score: p.score,
                text: p.text.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
    }
    w.flush()
}

pub fn write_trajectories(tracks: &[TrajectoryOutput], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_trajectories_to(tracks, BufWriter::new(file)).map_err(|e| DataError::io(path, e))
}

pub fn read_trajectories_from(reader: impl BufRead) -> Result<Vec<TrajectoryOutput>> {
    let mut by_id: BTreeMap<u64, Vec<TrajectoryPoint>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DataError::Parse { line: line_no, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: TrajectoryLine = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse { line: line_no, msg: e.to_string() })?;
        let invalid = |field, msg: String| DataError::Invalid { line: line_no, field, msg };
        let bbox = BBox::from_array(raw.bbox).map_err(|m| invalid("box", m))?;
        if !(0.0..=1.0).contains(&raw.score) {
            return Err(invalid("score", format!("{} is outside [0, 1]", raw.score)));
        }
        if let Some(poly) = &raw.poly {
            check_envelope(poly, &bbox).map_err(|m| invalid("poly", m))?;
        }
        let points = by_id.entry(raw.id).or_default();
        if points.iter().any(|p| p.frame_index == raw.frame) {
            return Err(invalid(
                "frame",
                format!("track {} has frame {} twice", raw.id, raw.frame),
            ));
        }
        points.push(TrajectoryPoint {
            frame_index: raw.frame,
            bbox,
            polygon: raw.poly,
            score: raw.score,
            text: raw.text,
        });
    }
    Ok(by_id
        .into_iter()
        .map(|(track_id, mut points)| {
            points.sort_by_key(|p| p.frame_index);
            TrajectoryOutput { track_id, points }
        })
        .collect())
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<TrajectoryOutput>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_trajectories_from(BufReader::new(file))
}

/// Views predicted trajectories as ground truth (every track alphanumeric).
pub fn trajectories_as_annotations(video: &str, tracks: &[TrajectoryOutput]) -> Annotations {
    Annotations {
        video: video.to_string(),
        tracks: tracks
            .iter()
            .map(|t| GroundTruthTrack {
                track_id: t.track_id,
                category: Category::Alphanumeric,
                frames: t
                    .points
                    .iter()
                    .map(|p| {
                        let box_type = match &p.polygon {
                            Some(poly) if poly.len() != 4 => BoxType::Polygon,
                            _ => BoxType::Quadrilateral,
                        };
                        (
                            p.frame_index,
                            GtInstance {
                                bbox: p.bbox,
                                polygon: p.polygon.clone(),
                                text: p.text.clone().unwrap_or_default(),
                                box_type,
                            },
                        )
                    })
                    .collect(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_line(d_q: usize) -> String {
        format!(r#"{{"format":"qtrack-det/1","d_q":{d_q},"video":"v"}}"#)
    }

    #[test]
    fn iou_hand_values() {
        let a = BBox::new(0., 0., 2., 2.).unwrap();
        let b = BBox::new(1., 1., 3., 3.).unwrap();
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(5., 5., 6., 6.).unwrap()), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(1., 0., 1., 2.).is_err());
        assert!(BBox::new(0., 0., f64::NAN, 2.).is_err());
    }

    #[test]
    fn empty_body_gives_no_frames() {
        let s = read_detection_stream(header_line(4).as_bytes()).unwrap();
        assert!(s.frames.is_empty());
        assert_eq!(s.header.d_q, 4);
    }

    #[test]
    fn two_frames_two_records() {
        let mut text = header_line(4) + "\n";
        for f in 0..2 {
            for k in 0..2 {
                let x = 10.0 * k as f64;
                text += &format!(
                    r#"{{"frame":{f},"box":[{x},0,{},5],"score":0.9,"query":[1,0,0,{k}]}}"#,
                    x + 5.0
                );
                text += "\n";
            }
        }
        let s = read_detection_stream(text.as_bytes()).unwrap();
        assert_eq!(s.frames.len(), 2);
        assert!(s.frames.iter().all(|f| f.records.len() == 2));
        let mut out = Vec::new();
        write_detection_stream_to(&s, &mut out).unwrap();
        assert_eq!(read_detection_stream(out.as_slice()).unwrap(), s);
    }

    #[test]
    fn bad_score_names_field() {
        let text = header_line(2) + "\n" + r#"{"frame":0,"box":[0,0,1,1],"score":1.5,"query":[1,0]}"#;
        let err = read_detection_stream(text.as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Invalid { line: 2, field: "score", .. }), "{err}");
    }

    #[test]
    fn dimension_mismatch_and_order_errors() {
        let text = header_line(3) + "\n" + r#"{"frame":0,"box":[0,0,1,1],"score":0.5,"query":[1,0]}"#;
        assert!(matches!(
            read_detection_stream(text.as_bytes()),
            Err(DataError::Invalid { field: "query", .. })
        ));
        let text = header_line(1)
            + "\n"
            + r#"{"frame":2,"box":[0,0,1,1],"score":0.5,"query":[1]}"#
            + "\n"
            + r#"{"frame":1,"box":[0,0,1,1],"score":0.5,"query":[1]}"#;
        assert!(matches!(
            read_detection_stream(text.as_bytes()),
            Err(DataError::Invalid { line: 3, field: "frame", .. })
        ));
        let text = header_line(1) + "\nnot json";
        assert!(matches!(
            read_detection_stream(text.as_bytes()),
            Err(DataError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn annotations_single_and_gapped() {
        let json = r#"{"video":"v","tracks":[
            {"id":1,"category":"alphanumeric","frames":{"0":{"box":[0,0,4,2],"text":" AB ","box_type":"quadrilateral"}}},
            {"id":2,"category":"other","frames":{
                "1":{"box":[0,0,4,2],"text":"x","box_type":"quadrilateral"},
                "2":{"box":[0,0,4,2],"text":"x","box_type":"quadrilateral"},
                "5":{"box":[0,0,4,2],"text":"x","box_type":"quadrilateral"}}}]}"#;
        let ann = read_annotations(json).unwrap();
        assert_eq!(ann.tracks[0].frames.len(), 1);
        assert_eq!(ann.tracks[0].frames[&0].text, "AB");
        let gapped = &ann.tracks[1];
        assert_eq!(gapped.frames.keys().copied().collect::<Vec<_>>(), vec![1, 2, 5]);
        assert!(!gapped.is_present(3) && !gapped.is_present(4));
        assert_eq!(gapped.category, Category::Other);
        assert_eq!(read_annotations(&annotations_to_string(&ann)).unwrap(), ann);
    }

    fn poly_json(n: usize) -> String {
        // points on an ellipse inside [0, 20] × [0, 10], touching every edge
        let pts: Vec<String> = (0..n)
            .map(|i| {
                let t = i as f64 / n as f64 * std::f64::consts::TAU;
                let (x, y) = match i % 4 {
                    0 => (0.0, 5.0),
                    1 => (10.0, 0.0),
                    2 => (20.0, 5.0),
                    _ => (10.0 + 5.0 * t.cos(), 10.0),
                };
                format!("[{x},{y}]")
            })
            .collect();
        format!("[{}]", pts.join(","))
    }

    #[test]
    fn polygon_point_counts() {
        let make = |n: usize, ty: &str| {
            format!(
                r#"{{"video":"v","tracks":[{{"id":1,"category":"alphanumeric","frames":{{"0":{{"box":[0,0,20,10],"poly":{},"text":"t","box_type":"{ty}"}}}}}}]}}"#,
                poly_json(n)
            )
        };
        assert!(read_annotations(&make(14, "polygon")).is_ok());
        assert!(read_annotations(&make(5, "quadrilateral")).is_err());
        assert!(read_annotations(&make(4, "quadrilateral")).is_ok());
    }

    #[test]
    fn envelope_mismatch_rejected() {
        let json = r#"{"video":"v","tracks":[{"id":1,"category":"alphanumeric","frames":{"0":
            {"box":[0,0,20,11],"poly":[[0,0],[20,0],[20,10],[0,10]],"text":"t","box_type":"quadrilateral"}}}]}"#;
        assert!(read_annotations(json).is_err());
    }

    #[test]
    fn annotation_errors() {
        let dup_frame = r#"{"video":"v","tracks":[{"id":1,"category":"alphanumeric","frames":{
            "0":{"box":[0,0,1,1],"text":"t","box_type":"quadrilateral"},
            "0":{"box":[0,0,2,2],"text":"t","box_type":"quadrilateral"}}}]}"#;
        assert!(read_annotations(dup_frame).is_err());
        let dup_track = r#"{"video":"v","tracks":[
            {"id":1,"category":"alphanumeric","frames":{"0":{"box":[0,0,1,1],"text":"t","box_type":"quadrilateral"}}},
            {"id":1,"category":"alphanumeric","frames":{"1":{"box":[0,0,1,1],"text":"t","box_type":"quadrilateral"}}}]}"#;
        assert!(read_annotations(dup_track).is_err());
        let bad_cat = r#"{"video":"v","tracks":[{"id":1,"category":"symbol","frames":{"0":{"box":[0,0,1,1],"text":"t","box_type":"quadrilateral"}}}]}"#;
        assert!(read_annotations(bad_cat).is_err());
    }

    fn sample_tracks() -> Vec<TrajectoryOutput> {
        vec![
            TrajectoryOutput {
                track_id: 3,
                points: vec![TrajectoryPoint {
                    frame_index: 0,
                    bbox: BBox::new(0.125, 0.5, 10.0, 4.0).unwrap(),
                    polygon: Some(vec![[0.125, 0.5], [10.0, 0.5], [10.0, 4.0], [0.125, 4.0]]),
                    score: 0.1 + 0.2,
                    text: Some("Hello".into()),
                }],
            },
            TrajectoryOutput {
                track_id: 1,
                points: (0..3)
                    .map(|f| TrajectoryPoint {
                        frame_index: f,
                        bbox: BBox::new(f as f64 / 3.0, 1.0, 7.0, 9.0).unwrap(),
                        polygon: None,
                        score: 1.0 / 3.0,
                        text: None,
                    })
                    .collect(),
            },
        ]
    }

    #[test]
    fn trajectory_round_trip_is_ordered_and_exact() {
        let tracks = sample_tracks();
        let mut buf = Vec::new();
        write_trajectories_to(&tracks, &mut buf).unwrap();
        let back = read_trajectories_from(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].track_id, 1);
        assert_eq!(back[0], tracks[1]);
        assert_eq!(back[1], tracks[0]);
        let mut again = Vec::new();
        write_trajectories_to(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn empty_trajectory_set_round_trips() {
        let mut buf = Vec::new();
        write_trajectories_to(&[], &mut buf).unwrap();
        assert!(buf.is_empty());
        assert!(read_trajectories_from(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn trajectory_duplicate_frame_rejected() {
        let text = "{\"id\":1,\"frame\":0,\"box\":[0,0,1,1],\"score\":0.5}\n{\"id\":1,\"frame\":0,\"box\":[0,0,1,1],\"score\":0.5}\n";
        assert!(read_trajectories_from(text.as_bytes()).is_err());
    }

    mod roundtrip {
        use super::*;
        use proptest::prelude::*;

        fn record(d_q: usize, frame: u32) -> impl Strategy<Value = DetectionRecord> {
            (
                prop::collection::vec(-1e3f64..1e3, d_q),
                (0f64..500.0, 0f64..500.0, 0.5f64..100.0, 0.5f64..100.0),
                0f64..=1.0,
                any::<bool>(),
                prop::option::of("[a-zA-Z0-9]{1,8}"),
            )
                .prop_map(move |(query, (x, y, w, h), score, poly, text)| {
                    let bbox = BBox { x_min: x, y_min: y, x_max: x + w, y_max: y + h };
                    let polygon = poly.then(|| {
                        vec![[x, y], [x + w, y], [x + w, y + h], [x, y + h]]
                    });
                    DetectionRecord { frame_index: frame, query, bbox, polygon, score, text }
                })
        }

        fn stream() -> impl Strategy<Value = DetectionStream> {
            (1usize..5, prop::collection::vec((0u32..3, 0usize..4), 0..6)).prop_flat_map(|(d_q, gaps)| {
                let mut frame = 0;
                let recs: Vec<_> = gaps
                    .into_iter()
                    .map(|(gap, n)| {
                        frame += gap;
                        prop::collection::vec(record(d_q, frame), n)
                    })
                    .collect();
                recs.prop_map(move |frames| {
                    DetectionStream::from_records(StreamHeader::new("v", d_q), frames.into_iter().flatten().collect())
                })
            })
        }

        proptest! {
            #[test]
            fn parse_inverts_write(s in stream()) {
                let mut buf = Vec::new();
                write_detection_stream_to(&s, &mut buf).unwrap();
                prop_assert_eq!(read_detection_stream(buf.as_slice()).unwrap(), s);
            }
        }
    }
}
