//! Classification and temporal-segmentation metrics: frame accuracy,
//! segmental edit score (Levenshtein over run-length segments), and
//! segmental F1 at an IoU threshold.

use crate::error::{Error, Result};

/// Run-length segmentation of a frame-label sequence: (label, start, end)
/// with half-open spans covering [0, L) and distinct adjacent labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSeq {
    pub segments: Vec<(u16, usize, usize)>,
}

impl SegmentSeq {
    pub fn from_frames(frames: &[u16]) -> Self {
        let mut segments = Vec::new();
        let mut start = 0;
        for i in 1..=frames.len() {
            if i == frames.len() || frames[i] != frames[start] {
                segments.push((frames[start], start, i));
                start = i;
            }
        }
        SegmentSeq { segments }
    }

    /// Expand back to the frame-label sequence.
    pub fn to_frames(&self) -> Vec<u16> {
        let mut out = Vec::new();
        for &(label, start, end) in &self.segments {
            debug_assert_eq!(start, out.len());
            out.resize(end, label);
        }
        out
    }

    pub fn labels(&self) -> Vec<u16> {
        self.segments.iter().map(|&(l, _, _)| l).collect()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// 100 · (matching frames) / L.
pub fn frame_accuracy(pred: &[u16], gt: &[u16]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::contract(format!(
            "frame accuracy needs equal non-empty sequences, got {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Levenshtein distance between two label sequences, O(mn) two-row DP.
fn levenshtein(a: &[u16], b: &[u16]) -> usize {
    let (m, n) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for i in 1..=m {
        cur[0] = i;
        for j in 1..=n {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// 100 · (1 − edit distance between segment label strings / max length).
pub fn segmental_edit_score(pred: &[u16], gt: &[u16]) -> f64 {
    let a = SegmentSeq::from_frames(pred).labels();
    let b = SegmentSeq::from_frames(gt).labels();
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(&a, &b) as f64 / denom as f64)
}

fn span_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Segmental F1: greedy in-order matching of predicted to ground-truth
/// segments with equal label and frame-IoU ≥ threshold, one match per
/// ground-truth segment.
pub fn f1_at(pred: &[u16], gt: &[u16], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!(
            "IoU threshold must lie in (0,1), got {threshold}"
        )));
    }
    let p = SegmentSeq::from_frames(pred);
    let g = SegmentSeq::from_frames(gt);
    let mut matched = vec![false; g.len()];
    let mut tp = 0usize;
    for &(label, s, e) in &p.segments {
        for (i, &(gl, gs, ge)) in g.segments.iter().enumerate() {
            if !matched[i] && gl == label && span_iou((s, e), (gs, ge)) >= threshold {
                matched[i] = true;
                tp += 1;
                break;
            }
        }
    }
    let fp = p.len() - tp;
    let fnn = g.len() - tp;
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * tp as f64 / denom as f64)
}

/// Top-1 accuracy over aligned prediction/label lists, in percent.
pub fn classification_report(preds: &[u16], labels: &[u16]) -> Result<f64> {
    frame_accuracy(preds, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_round_trips_and_merges_adjacent_runs() {
        let frames = vec![3, 3, 3, 1, 1, 7, 7, 7, 7, 1];
        let seq = SegmentSeq::from_frames(&frames);
        assert_eq!(seq.segments, vec![(3, 0, 3), (1, 3, 5), (7, 5, 9), (1, 9, 10)]);
        assert_eq!(seq.to_frames(), frames);
        for w in seq.segments.windows(2) {
            assert_ne!(w[0].0, w[1].0);
            assert_eq!(w[0].2, w[1].1);
        }
    }

    #[test]
    fn frame_accuracy_hand_values() {
        let gt = vec![1, 1, 2, 2, 3, 3, 4, 4, 5, 5];
        assert_eq!(frame_accuracy(&gt, &gt).unwrap(), 100.0);
        let wrong: Vec<u16> = gt.iter().map(|v| v + 1).collect();
        assert_eq!(frame_accuracy(&wrong, &gt).unwrap(), 0.0);
        let mut half = gt.clone();
        for v in half.iter_mut().take(5) {
            *v += 1;
        }
        assert_eq!(frame_accuracy(&half, &gt).unwrap(), 50.0);
        assert!(frame_accuracy(&gt[..4], &gt).is_err());
    }

    #[test]
    fn edit_score_hand_values() {
        let gt = vec![1, 1, 2, 2];
        assert_eq!(segmental_edit_score(&gt, &gt), 100.0);
        // pred = [A], gt = [A, B]: one insertion over max length 2.
        let pred = vec![1, 1, 1, 1];
        assert_eq!(segmental_edit_score(&pred, &gt), 50.0);
        // Fully different single segments.
        assert_eq!(segmental_edit_score(&[5, 5], &[6, 6]), 0.0);
    }

    #[test]
    fn edit_score_is_invariant_under_relabeling() {
        let pred = vec![0, 0, 1, 1, 2, 2, 1];
        let gt = vec![0, 1, 1, 1, 2, 2, 2];
        let map = |v: u16| v * 7 + 3;
        let pred2: Vec<u16> = pred.iter().map(|&v| map(v)).collect();
        let gt2: Vec<u16> = gt.iter().map(|&v| map(v)).collect();
        assert_eq!(segmental_edit_score(&pred, &gt), segmental_edit_score(&pred2, &gt2));
    }

    #[test]
    fn f1_hand_case_iou_04_counts_at_low_thresholds_only() {
        // gt: label 1 over [0,10). pred: label 1 over [0,4) → IoU 0.4.
        let gt = vec![1u16; 10];
        let mut pred = vec![2u16; 10];
        for v in pred.iter_mut().take(4) {
            *v = 1;
        }
        // pred segments: (1,[0,4)), (2,[4,10)); gt: (1,[0,10)).
        // IoU(pred1, gt1) = 4/10 = 0.4.
        let f1_10 = f1_at(&pred, &gt, 0.10).unwrap();
        let f1_25 = f1_at(&pred, &gt, 0.25).unwrap();
        let f1_50 = f1_at(&pred, &gt, 0.50).unwrap();
        // One TP, one FP, zero FN → F1 = 2/(2+1+0) · 100 ≈ 66.67.
        assert!((f1_10 - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(f1_10, f1_25);
        // At 0.5 the match fails: zero TP, 2 FP, 1 FN → 0.
        assert_eq!(f1_50, 0.0);
        assert!(f1_at(&pred, &gt, 0.0).is_err());
        assert!(f1_at(&pred, &gt, 1.0).is_err());
    }

    #[test]
    fn f1_is_perfect_on_equality_and_monotone_in_threshold() {
        let gt = vec![1, 1, 1, 2, 2, 3, 3, 3, 3, 1, 1];
        for t in [0.10, 0.25, 0.50] {
            assert_eq!(f1_at(&gt, &gt, t).unwrap(), 100.0);
        }
        let pred = vec![1, 1, 2, 2, 2, 3, 3, 1, 1, 1, 1];
        let mut last = 101.0;
        for t in [0.10, 0.25, 0.50, 0.75] {
            let v = f1_at(&pred, &gt, t).unwrap();
            assert!(v <= last, "threshold {t}: {v} > {last}");
            assert!((0.0..=100.0).contains(&v));
            last = v;
        }
    }

    #[test]
    fn classification_report_is_top1_accuracy() {
        assert_eq!(classification_report(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 100.0);
        assert_eq!(classification_report(&[1, 2, 3, 4], &[2, 3, 4, 5]).unwrap(), 0.0);
        assert_eq!(classification_report(&[1, 2, 3, 9], &[1, 2, 3, 4]).unwrap(), 75.0);
    }
}
