//! Linear rescoring head, max-fusion with the spotter score, and threshold
//! filtering of candidates.

use crate::data_io::{DetectionFrame, DetectionRecord};
use crate::numerics::{dot, sigmoid, Matrix, NumericsError, Parameterized, Result, Tape, Var};

pub const DEFAULT_DETECT_THRESHOLD: f64 = 0.3;

/// Single-logit linear classifier over queries: `σ(w·q + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescoringHead {
    /// `d_q × 1`.
    pub weight: Matrix,
    /// `1 × 1`.
    pub bias: Matrix,
}

impl RescoringHead {
    /// Neutral start: zero weight and bias, so every score is 0.5.
    pub fn new(d_q: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_q, 1),
            bias: Matrix::zeros(1, 1),
        }
    }

    /// Starts from an existing classifier's parameters.
    pub fn from_classifier(weight: &[f64], bias: f64) -> Self {
        Self {
            weight: Matrix::from_vec(weight.len(), 1, weight.to_vec()).expect("column vector"),
            bias: Matrix::scalar(bias),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn logit(&self, query: &[f64]) -> Result<f64> {
        if query.len() != self.dim() {
            return Err(NumericsError::Shape(format!(
                "query has {} entries, head expects {}",
                query.len(),
                self.dim()
            )));
        }
        Ok(dot(self.weight.as_slice(), query) + self.bias.item())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        BoundHead {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }
}

impl Parameterized for RescoringHead {
    fn visit(&self, f: &mut dyn FnMut(&Matrix)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
}

impl BoundHead {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.extend([self.weight, self.bias]);
    }

    /// Logits for an `n × d_q` query matrix, as `n × 1`.
    pub fn logits(&self, tape: &mut Tape, queries: Var) -> Result<Var> {
        let z = tape.matmul(queries, self.weight)?;
        tape.add_row(z, self.bias)
    }
}

/// Recomputed confidence `c_r` of one record.
pub fn rescore(record: &DetectionRecord, head: &RescoringHead) -> Result<f64> {
    Ok(sigmoid(head.logit(&record.query)?))
}

/// `c_f = max(c_o, c_r)`.
pub fn fuse_scores(original: f64, recomputed: f64) -> f64 {
    original.max(recomputed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub record: DetectionRecord,
    pub recomputed_score: f64,
    pub fused_score: f64,
}

impl ScoredInstance {
    pub fn new(record: DetectionRecord, recomputed_score: f64) -> Self {
        let fused_score = fuse_scores(record.score, recomputed_score);
        Self {
            record,
            recomputed_score,
            fused_score,
        }
    }

    pub fn original_score(&self) -> f64 {
        self.record.score
    }
}

/// Scores every record of `frame` and keeps those with `c_f ≥ threshold`,
/// in input order. `head = None` disables rescoring (`c_r = 0`).
pub fn filter_instances(
    frame: &DetectionFrame,
    head: Option<&RescoringHead>,
    threshold: f64,
) -> Result<Vec<ScoredInstance>> {
    let mut kept = Vec::new();
    for record in &frame.records {
        let c_r = match head {
            Some(h) => rescore(record, h)?,
            None => 0.0,
        };
        let inst = ScoredInstance::new(record.clone(), c_r);
        if inst.fused_score >= threshold {
            kept.push(inst);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::BBox;
    use proptest::prelude::*;

    fn record(query: Vec<f64>, score: f64) -> DetectionRecord {
        DetectionRecord {
            frame_index: 0,
            query,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            polygon: None,
            score,
            text: None,
        }
    }

    #[test]
    fn rescore_examples() {
        let head = RescoringHead::new(2);
        assert_eq!(rescore(&record(vec![3.0, -1.0], 0.2), &head).unwrap(), 0.5);
        let mut sat = RescoringHead::new(2);
        sat.bias = Matrix::scalar(10.0);
        assert!(rescore(&record(vec![3.0, -1.0], 0.2), &sat).unwrap() > 0.999);
        let h = RescoringHead::from_classifier(&[1.0, -1.0], 0.0);
        let c = rescore(&record(vec![2.0, 1.0], 0.2), &h).unwrap();
        assert!((c - 0.73105858).abs() < 1e-8);
        assert!(rescore(&record(vec![1.0], 0.2), &h).is_err());
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse_scores(0.3, 0.7), 0.7);
        assert_eq!(fuse_scores(0.5, 0.5), 0.5);
        assert_eq!(fuse_scores(0.9, 0.1), 0.9);
    }

    fn frame(records: Vec<DetectionRecord>) -> DetectionFrame {
        DetectionFrame {
            frame_index: 0,
            records,
        }
    }

    #[test]
    fn filter_examples() {
        let f = frame(vec![record(vec![1.0], 0.1), record(vec![-1.0], 0.2)]);
        assert!(filter_instances(&f, None, 0.3).unwrap().is_empty());
        assert_eq!(filter_instances(&f, None, 0.0).unwrap().len(), 2);

        // weights picked so that c_r = (0.5, 0.2)
        let w = (0.2f64 / 0.8).ln();
        let head = RescoringHead::from_classifier(&[0.0, -w], 0.0);
        let f = frame(vec![record(vec![0.0, 0.0], 0.1), record(vec![0.0, -1.0], 0.6)]);
        let kept = filter_instances(&f, Some(&head), 0.4).unwrap();
        assert_eq!(kept.len(), 2);
        assert!((kept[0].recomputed_score - 0.5).abs() < 1e-12);
        assert!((kept[1].recomputed_score - 0.2).abs() < 1e-12);
        assert_eq!(kept[0].fused_score, 0.5);
        assert_eq!(kept[1].fused_score, 0.6);
    }

    #[test]
    fn classifier_initialization_reproduces_scores() {
        let w = [0.3, -0.7, 1.1];
        let b = -0.4;
        let head = RescoringHead::from_classifier(&w, b);
        for q in [[1.0, 2.0, 3.0], [-0.5, 0.0, 0.25]] {
            let direct = 1.0 / (1.0 + (-(w[0] * q[0] + w[1] * q[1] + w[2] * q[2] + b)).exp());
            let c = rescore(&record(q.to_vec(), 0.5), &head).unwrap();
            assert!((c - direct).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn fusion_never_lowers_and_head_only_adds(
            scores in proptest::collection::vec(0.0f64..=1.0, 0..12),
            weights in proptest::collection::vec(-3.0f64..3.0, 3),
            bias in -3.0f64..3.0,
            threshold in 0.0f64..=1.0,
        ) {
            let head = RescoringHead::from_classifier(&weights, bias);
            let records: Vec<DetectionRecord> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| record(vec![i as f64 * 0.3 - 1.0, 0.5, -(i as f64) * 0.1], s))
                .collect();
            let f = frame(records);
            let with = filter_instances(&f, Some(&head), threshold).unwrap();
            for inst in &with {
                prop_assert!(inst.fused_score >= inst.original_score());
                prop_assert!(inst.fused_score >= inst.recomputed_score);
            }
            let without = filter_instances(&f, None, threshold).unwrap();
            for inst in &without {
                prop_assert!(with.iter().any(|w| w.record == inst.record));
            }
        }
    }
}
