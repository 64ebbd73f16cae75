//! Raw point cloud video handling: frame sampling, scaling augmentation,
//! farthest point sampling, and spatio-temporal tube construction.
//!
//! A tube gathers, for an anchor point p̂ in an anchor frame, the points p of
//! nearby frames with ‖p − p̂‖ < r_s (strict) and frame distance ≤ (r_t−1)/2.
//! Tubes are the unit of masking and reconstruction downstream.

use rand::Rng;

use crate::error::{Error, Result};

/// A point cloud video: L frames × N points × xyz, stored flat and immutable.
/// Optional per-point features, a video-level label, and per-frame labels
/// (segmentation mode) ride along.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudVideo {
    frames: Vec<f32>, // L·N·3, frame-major
    l: usize,
    n: usize,
    features: Option<Vec<f32>>, // L·N·c_in
    c_in: usize,
    pub label: Option<u16>,
    frame_labels: Option<Vec<u16>>,
}

impl PointCloudVideo {
    pub fn new(frames: Vec<f32>, l: usize, n: usize) -> Result<Self> {
        if l == 0 || n == 0 || frames.len() != l * n * 3 {
            return Err(Error::contract(format!(
                "frame buffer of {} values does not form {l} frames × {n} points",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite coordinate in video"));
        }
        Ok(PointCloudVideo {
            frames,
            l,
            n,
            features: None,
            c_in: 0,
            label: None,
            frame_labels: None,
        })
    }

    pub fn with_features(mut self, features: Vec<f32>, c_in: usize) -> Result<Self> {
        if c_in == 0 || features.len() != self.l * self.n * c_in {
            return Err(Error::contract("feature buffer does not match L·N·C_in"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite feature value"));
        }
        self.features = Some(features);
        self.c_in = c_in;
        Ok(self)
    }

    pub fn with_label(mut self, label: u16) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_frame_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.l {
            return Err(Error::contract(format!(
                "{} frame labels for {} frames",
                labels.len(),
                self.l
            )));
        }
        self.frame_labels = Some(labels);
        Ok(self)
    }

    pub fn num_frames(&self) -> usize {
        self.l
    }

    pub fn points_per_frame(&self) -> usize {
        self.n
    }

    pub fn feature_width(&self) -> usize {
        self.c_in
    }

    /// Flat xyz slice of one frame.
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n * 3..(t + 1) * self.n * 3]
    }

    pub fn point(&self, t: usize, i: usize) -> [f32; 3] {
        let off = (t * self.n + i) * 3;
        [self.frames[off], self.frames[off + 1], self.frames[off + 2]]
    }

    pub fn coords(&self) -> &[f32] {
        &self.frames
    }

    pub fn features(&self) -> Option<&[f32]> {
        self.features.as_deref()
    }

    pub fn feature(&self, t: usize, i: usize) -> Option<&[f32]> {
        self.features
            .as_ref()
            .map(|f| &f[(t * self.n + i) * self.c_in..(t * self.n + i + 1) * self.c_in])
    }

    pub fn frame_labels(&self) -> Option<&[u16]> {
        self.frame_labels.as_deref()
    }
}

/// Tube construction parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeConfig {
    /// r_s: spatial radius (strict upper bound on member distance).
    pub spatial_radius: f64,
    /// r_t: tube frame length; odd, so the window is centred on the anchor frame.
    pub tube_frames: usize,
    /// Max points gathered per anchor per window frame.
    pub n_neighbors: usize,
    /// Anchors per frame = N / spatial_stride.
    pub spatial_stride: usize,
    /// Anchor-frame subsampling: anchor frames are 0, s, 2s, …
    pub temporal_stride: usize,
}

impl TubeConfig {
    pub fn validate(&self, l: usize, n: usize) -> Result<()> {
        if self.spatial_radius <= 0.0 {
            return Err(Error::contract("spatial_radius must be positive"));
        }
        if self.tube_frames == 0 || self.tube_frames % 2 == 0 {
            return Err(Error::contract("tube_frames must be odd and ≥ 1"));
        }
        if self.n_neighbors == 0 {
            return Err(Error::contract("n_neighbors must be ≥ 1"));
        }
        if self.spatial_stride == 0 || n % self.spatial_stride != 0 {
            return Err(Error::contract(format!(
                "spatial_stride {} must divide N={n}",
                self.spatial_stride
            )));
        }
        if self.temporal_stride == 0 || l % self.temporal_stride != 0 {
            return Err(Error::contract(format!(
                "temporal_stride {} must divide L={l}",
                self.temporal_stride
            )));
        }
        if l < self.tube_frames {
            return Err(Error::contract(format!(
                "video of {l} frames shorter than tube window {}",
                self.tube_frames
            )));
        }
        Ok(())
    }

    /// Half-width of the temporal window in frames.
    pub fn half_window(&self) -> usize {
        (self.tube_frames - 1) / 2
    }
}

/// All tubes of one video, rectangular: L′×N′ anchors, each with r_t window
/// slots of exactly n_neighbors members (padded by nearest repetition, or by
/// the anchor itself when a window frame has nothing in radius).
#[derive(Debug, Clone)]
pub struct TubeBatch {
    pub l_out: usize,
    pub n_out: usize,
    pub tube_frames: usize,
    pub n_neighbors: usize,
    /// Source frame index of each anchor row (length l_out).
    pub anchor_frames: Vec<usize>,
    /// (x, y, z, t) per anchor, t in source-frame units; length l_out·n_out.
    pub anchors: Vec<[f64; 4]>,
    /// (frame, point) source index per member; length tubes·r_t·n_neighbors.
    pub members: Vec<(u32, u32)>,
    /// Normalized (δx,δy,δz,δt) per member: spatial by r_s, temporal by the
    /// half window. Length members·4.
    pub displacements: Vec<f64>,
    /// Raw member coordinates, the reconstruction target; length members·3.
    pub ground_truth: Vec<f64>,
}

impl TubeBatch {
    pub fn tube_count(&self) -> usize {
        self.l_out * self.n_out
    }

    pub fn members_per_tube(&self) -> usize {
        self.tube_frames * self.n_neighbors
    }

    /// Flat member offset for (tube, window slot, neighbor).
    pub fn member_index(&self, tube: usize, slot: usize, j: usize) -> usize {
        (tube * self.tube_frames + slot) * self.n_neighbors + j
    }

    /// Ground-truth point set of one window slot of one tube (n_neighbors×3).
    pub fn gt_slot(&self, tube: usize, slot: usize) -> &[f64] {
        let start = self.member_index(tube, slot, 0) * 3;
        &self.ground_truth[start..start + self.n_neighbors * 3]
    }
}

/// Take `count` frames at `stride` from a seeded uniform start. Labels,
/// features, and frame labels follow the selected frames.
pub fn sample_frames(
    video: &PointCloudVideo,
    count: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<PointCloudVideo> {
    if count == 0 || stride == 0 {
        return Err(Error::contract("count and stride must be ≥ 1"));
    }
    let l = video.num_frames();
    let span = (count - 1) * stride + 1;
    if span > l {
        return Err(Error::contract(format!(
            "cannot take {count} frames at stride {stride} from a {l}-frame video"
        )));
    }
    let start = rng.random_range(0..=(l - span));
    let picked: Vec<usize> = (0..count).map(|k| start + k * stride).collect();

    let n = video.points_per_frame();
    let mut frames = Vec::with_capacity(count * n * 3);
    for &t in &picked {
        frames.extend_from_slice(video.frame(t));
    }
    let mut out = PointCloudVideo::new(frames, count, n)?;
    if let Some(feats) = video.features() {
        let c = video.feature_width();
        let mut sub = Vec::with_capacity(count * n * c);
        for &t in &picked {
            sub.extend_from_slice(&feats[t * n * c..(t + 1) * n * c]);
        }
        out = out.with_features(sub, c)?;
    }
    if let Some(label) = video.label {
        out = out.with_label(label);
    }
    if let Some(fl) = video.frame_labels() {
        out = out.with_frame_labels(picked.iter().map(|&t| fl[t]).collect())?;
    }
    Ok(out)
}

/// Multiply all coordinates by one scalar drawn uniformly from [lo, hi].
pub fn augment_scale(
    video: &PointCloudVideo,
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Result<PointCloudVideo> {
    if !(0.0 < lo && lo <= hi) {
        return Err(Error::contract(format!("bad scale range [{lo}, {hi}]")));
    }
    let s = rng.random_range(lo..=hi) as f32;
    let frames = video.coords().iter().map(|&v| v * s).collect();
    let mut out = PointCloudVideo::new(frames, video.num_frames(), video.points_per_frame())?;
    if let Some(feats) = video.features() {
        out = out.with_features(feats.to_vec(), video.feature_width())?;
    }
    if let Some(label) = video.label {
        out = out.with_label(label);
    }
    if let Some(fl) = video.frame_labels() {
        out = out.with_frame_labels(fl.to_vec())?;
    }
    Ok(out)
}

fn sqdist(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling over `coords` (flat n×3). The seed fixes
/// the first index; each following pick maximizes the min squared distance to
/// the selected set, ties broken by the lower index. Returns distinct indices.
pub fn farthest_point_sample(
    coords: &[f32],
    n: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if n == 0 || coords.len() != n * 3 {
        return Err(Error::contract("coords must hold n×3 values"));
    }
    if count == 0 || count > n {
        return Err(Error::contract(format!("count {count} not in 1..={n}")));
    }
    let point = |i: usize| -> [f32; 3] { [coords[i * 3], coords[i * 3 + 1], coords[i * 3 + 2]] };
    let first = rng.random_range(0..n);
    let mut selected = Vec::with_capacity(count);
    selected.push(first);
    let mut min_d2: Vec<f64> = (0..n).map(|i| sqdist(point(i), point(first))).collect();
    while selected.len() < count {
        let mut best = None::<(f64, usize)>;
        for (i, &d2) in min_d2.iter().enumerate() {
            let better = match best {
                None => true,
                Some((bd, _)) => d2 > bd,
            };
            // A selected point has d2 = 0 and never beats an unselected one
            // unless all remaining points coincide with the selected set; the
            // strict `>` plus ascending scan then still yields a fresh index.
            if better && !selected.contains(&i) {
                best = Some((d2, i));
            }
        }
        let (_, next) = best.expect("count ≤ n leaves at least one unselected point");
        selected.push(next);
        for (i, slot) in min_d2.iter_mut().enumerate() {
            let d2 = sqdist(point(i), point(next));
            if d2 < *slot {
                *slot = d2;
            }
        }
    }
    Ok(selected)
}

/// Build all tubes of a video: N′ = N/spatial_stride anchors per anchor frame
/// chosen by FPS, members gathered per window frame by strict spherical query
/// (nearest n_neighbors kept, ties to the lower index), padded to rectangular
/// shape by repeating the nearest member or, for empty window frames, the
/// anchor's own point.
pub fn build_tubes(
    video: &PointCloudVideo,
    cfg: &TubeConfig,
    rng: &mut impl Rng,
) -> Result<TubeBatch> {
    let (l, n) = (video.num_frames(), video.points_per_frame());
    cfg.validate(l, n)?;
    let l_out = l / cfg.temporal_stride;
    let n_out = n / cfg.spatial_stride;
    let half = cfg.half_window();
    let r2 = cfg.spatial_radius * cfg.spatial_radius;
    let temporal_norm = if half == 0 { 1.0 } else { half as f64 };

    let mut batch = TubeBatch {
        l_out,
        n_out,
        tube_frames: cfg.tube_frames,
        n_neighbors: cfg.n_neighbors,
        anchor_frames: Vec::with_capacity(l_out),
        anchors: Vec::with_capacity(l_out * n_out),
        members: Vec::new(),
        displacements: Vec::new(),
        ground_truth: Vec::new(),
    };

    let mut candidates: Vec<(f64, u32)> = Vec::with_capacity(n);
    for k in 0..l_out {
        let t_anchor = k * cfg.temporal_stride;
        batch.anchor_frames.push(t_anchor);
        let anchor_idx = farthest_point_sample(video.frame(t_anchor), n, n_out, rng)?;
        for &ai in &anchor_idx {
            let a = video.point(t_anchor, ai);
            batch
                .anchors
                .push([a[0] as f64, a[1] as f64, a[2] as f64, t_anchor as f64]);
            for slot in 0..cfg.tube_frames {
                // Window frame, clamped at the video bounds; clamping keeps
                // |δt| ≤ half so Eq.-style membership still holds.
                let w = (t_anchor + slot).saturating_sub(half).min(l - 1);
                candidates.clear();
                for i in 0..n {
                    let d2 = sqdist(video.point(w, i), a);
                    if d2 < r2 {
                        candidates.push((d2, i as u32));
                    }
                }
                candidates.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
                candidates.truncate(cfg.n_neighbors);
                let dt = (w as f64 - t_anchor as f64) / temporal_norm;
                for j in 0..cfg.n_neighbors {
                    let (frame, idx, delta_t) = match (candidates.get(j), candidates.first()) {
                        (Some(&(_, i)), _) => (w, i, dt),
                        (None, Some(&(_, nearest))) => (w, nearest, dt),
                        (None, None) => (t_anchor, ai as u32, 0.0),
                    };
                    let p = video.point(frame, idx as usize);
                    batch.members.push((frame as u32, idx));
                    batch.displacements.extend_from_slice(&[
                        (p[0] as f64 - a[0] as f64) / cfg.spatial_radius,
                        (p[1] as f64 - a[1] as f64) / cfg.spatial_radius,
                        (p[2] as f64 - a[2] as f64) / cfg.spatial_radius,
                        delta_t,
                    ]);
                    batch
                        .ground_truth
                        .extend_from_slice(&[p[0] as f64, p[1] as f64, p[2] as f64]);
                }
            }
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    fn line_video(xs: &[f32]) -> PointCloudVideo {
        let frames: Vec<f32> = xs.iter().flat_map(|&x| [x, 0.0, 0.0]).collect();
        PointCloudVideo::new(frames, 1, xs.len()).unwrap()
    }

    #[test]
    fn fps_on_a_line_picks_the_far_end_then_the_middle() {
        // Points at x = 0, 1, 2, 10. Starting from index 0 the farthest is
        // x=10; the next max-min pick must be x=2... no: after {0, 10} the
        // min-distances are 0:(0), 1:(1), 2:(2·2=4 vs 8²)→4, so pick idx 2.
        let v = line_video(&[0.0, 1.0, 2.0, 10.0]);
        let mut forced = ForcedFirst(0);
        let picked = farthest_point_sample(v.frame(0), 4, 2, &mut forced).unwrap();
        assert_eq!(picked, vec![0, 3]);
        let picked3 = farthest_point_sample(v.frame(0), 4, 3, &mut ForcedFirst(0)).unwrap();
        assert_eq!(picked3, vec![0, 3, 2]);
    }

    #[test]
    fn fps_full_count_is_a_permutation_and_covering_radius_shrinks() {
        let mut rng = Streams::new(3).derive("test/fps");
        let coords: Vec<f32> = (0..48).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = 16;
        let all = farthest_point_sample(&coords, n, n, &mut rng).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());

        // Covering radius non-increasing in count (recomputed brute force).
        let point = |i: usize| [coords[i * 3], coords[i * 3 + 1], coords[i * 3 + 2]];
        let covering = |sel: &[usize]| -> f64 {
            (0..n)
                .map(|i| {
                    sel.iter()
                        .map(|&s| sqdist(point(i), point(s)))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        let mut last = f64::INFINITY;
        for count in 1..=n {
            let sel = &all[..count];
            let r = covering(sel);
            assert!(r <= last + 1e-12, "covering radius rose at count {count}");
            last = r;
        }
    }

    #[test]
    fn fps_greedy_max_min_property_holds_step_by_step() {
        let mut rng = Streams::new(9).derive("test/fps-greedy");
        let n = 24;
        let coords: Vec<f32> = (0..n * 3).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let sel = farthest_point_sample(&coords, n, 10, &mut rng).unwrap();
        let point = |i: usize| [coords[i * 3], coords[i * 3 + 1], coords[i * 3 + 2]];
        for step in 1..sel.len() {
            let chosen = sel[step];
            let prior = &sel[..step];
            let dist_to_prior = |i: usize| {
                prior
                    .iter()
                    .map(|&s| sqdist(point(i), point(s)))
                    .fold(f64::INFINITY, f64::min)
            };
            let chosen_d = dist_to_prior(chosen);
            for i in 0..n {
                if prior.contains(&i) {
                    continue;
                }
                let d = dist_to_prior(i);
                assert!(
                    d <= chosen_d,
                    "index {i} with min-dist {d} beats chosen {chosen} at {chosen_d}"
                );
                if d == chosen_d {
                    assert!(chosen <= i, "tie must resolve to the lower index");
                }
            }
        }
    }

    #[test]
    fn sample_frames_is_identity_at_full_length_and_errors_when_short() {
        let mut rng = Streams::new(1).derive("test/sample");
        let frames: Vec<f32> = (0..24 * 2 * 3).map(|i| i as f32).collect();
        let v = PointCloudVideo::new(frames, 24, 2).unwrap().with_label(5);
        let s = sample_frames(&v, 24, 1, &mut rng).unwrap();
        assert_eq!(s.coords(), v.coords());
        assert_eq!(s.label, Some(5));
        assert!(sample_frames(&v, 24, 2, &mut rng).is_err());
    }

    #[test]
    fn sample_frames_takes_an_arithmetic_progression() {
        let mut rng = Streams::new(2).derive("test/sample-stride");
        let l = 48;
        let frames: Vec<f32> = (0..l * 3).map(|i| (i / 3) as f32).collect();
        let v = PointCloudVideo::new(frames, l, 1).unwrap();
        let s = sample_frames(&v, 24, 2, &mut rng).unwrap();
        let start = s.point(0, 0)[0] as usize;
        assert!(start <= 1);
        for t in 0..24 {
            assert_eq!(s.point(t, 0)[0] as usize, start + 2 * t);
        }
    }

    #[test]
    fn augment_scale_scales_centroid_exactly_and_unit_range_is_identity() {
        let mut rng = Streams::new(4).derive("test/aug");
        let frames: Vec<f32> = (0..30).map(|i| (i as f32) * 0.1 - 1.0).collect();
        let v = PointCloudVideo::new(frames, 2, 5).unwrap();
        let same = augment_scale(&v, 1.0, 1.0, &mut rng).unwrap();
        assert_eq!(same.coords(), v.coords());

        let scaled = augment_scale(&v, 0.5, 2.0, &mut rng).unwrap();
        let s = scaled.coords()[0] / v.coords()[0];
        let centroid = |pc: &PointCloudVideo| -> [f64; 3] {
            let mut c = [0.0f64; 3];
            for i in 0..pc.points_per_frame() {
                let p = pc.point(0, i);
                for d in 0..3 {
                    c[d] += p[d] as f64;
                }
            }
            c.map(|x| x / pc.points_per_frame() as f64)
        };
        let (c0, c1) = (centroid(&v), centroid(&scaled));
        for d in 0..3 {
            assert!((c1[d] - c0[d] * s as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn single_point_video_with_huge_radius_fills_every_slot_with_it() {
        let frames: Vec<f32> = (0..9).flat_map(|t| [t as f32 * 0.01, 0.0, 0.0]).collect();
        let v = PointCloudVideo::new(frames, 9, 1).unwrap();
        let cfg = TubeConfig {
            spatial_radius: 100.0,
            tube_frames: 3,
            n_neighbors: 2,
            spatial_stride: 1,
            temporal_stride: 3,
        };
        let mut rng = Streams::new(0).derive("test/tubes");
        let tubes = build_tubes(&v, &cfg, &mut rng).unwrap();
        assert_eq!(tubes.l_out, 3);
        assert_eq!(tubes.n_out, 1);
        // Every member refers to the single point of its window frame.
        for &(_, idx) in &tubes.members {
            assert_eq!(idx, 0);
        }
        assert_eq!(tubes.members.len(), 3 * 1 * 3 * 2);
    }

    #[test]
    fn isolated_points_yield_anchor_only_tubes_with_zero_spatial_displacement() {
        // Four points ~10 apart, radius 0.5: each window frame contributes
        // only the anchor's own (slightly drifting) point, and the second
        // neighbor slot pads by repeating it.
        let mut frames = Vec::new();
        for t in 0..3 {
            for i in 0..4 {
                frames.extend_from_slice(&[i as f32 * 10.0 + t as f32 * 0.001, 0.0, 0.0]);
            }
        }
        let v = PointCloudVideo::new(frames, 3, 4).unwrap();
        let cfg = TubeConfig {
            spatial_radius: 0.5,
            tube_frames: 3,
            n_neighbors: 2,
            spatial_stride: 1,
            temporal_stride: 1,
        };
        let mut rng = Streams::new(0).derive("test/tubes-isolated");
        let tubes = build_tubes(&v, &cfg, &mut rng).unwrap();
        for tube in 0..tubes.tube_count() {
            let anchor = tubes.anchors[tube];
            for slot in 0..cfg.tube_frames {
                for j in 0..cfg.n_neighbors {
                    let m = tubes.member_index(tube, slot, j);
                    let d = &tubes.displacements[m * 4..m * 4 + 4];
                    let gt = &tubes.ground_truth[m * 3..m * 3 + 3];
                    let spatial =
                        (gt[0] - anchor[0]).hypot(gt[1] - anchor[1]).hypot(gt[2] - anchor[2]);
                    assert!(
                        spatial < cfg.spatial_radius,
                        "member outside radius: {spatial}"
                    );
                    // Same-x neighbors only — displacement stays tiny.
                    assert!(d[0].abs() * cfg.spatial_radius < 0.01);
                }
            }
        }
    }

    #[test]
    fn empty_window_frame_falls_back_to_the_anchor_point() {
        // Frame 1 teleports away: window slots that land on it find nothing
        // in radius and must pad with the anchor's own point, δ = 0.
        let frames = vec![0.0, 0.0, 0.0, 100.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let v = PointCloudVideo::new(frames, 3, 1).unwrap();
        let cfg = TubeConfig {
            spatial_radius: 0.5,
            tube_frames: 3,
            n_neighbors: 1,
            spatial_stride: 1,
            temporal_stride: 1,
        };
        let mut rng = Streams::new(0).derive("test/tubes-fallback");
        let tubes = build_tubes(&v, &cfg, &mut rng).unwrap();
        // Anchor frame 0, slot 2 targets frame 1 → fallback to (0, 0).
        let m = tubes.member_index(0, 2, 0);
        assert_eq!(tubes.members[m], (0, 0));
        assert_eq!(&tubes.displacements[m * 4..m * 4 + 4], &[0.0; 4]);
        // Anchor frame 1 sits at x=100; its own slot keeps itself…
        let m_self = tubes.member_index(1, 1, 0);
        assert_eq!(tubes.members[m_self], (1, 0));
        // …but its neighbors in frames 0 and 2 are out of radius.
        assert_eq!(tubes.members[tubes.member_index(1, 0, 0)], (1, 0));
        assert_eq!(tubes.members[tubes.member_index(1, 2, 0)], (1, 0));
    }

    #[test]
    fn anchor_count_per_frame_is_n_over_stride_exactly() {
        let mut rng = Streams::new(7).derive("test/tubes-count");
        let n = 32;
        let mut frames = Vec::new();
        for _ in 0..4 {
            for _ in 0..n {
                frames.extend_from_slice(&[
                    rng.random_range(-1.0f32..1.0),
                    rng.random_range(-1.0f32..1.0),
                    rng.random_range(-1.0f32..1.0),
                ]);
            }
        }
        let v = PointCloudVideo::new(frames, 4, n).unwrap();
        let cfg = TubeConfig {
            spatial_radius: 0.7,
            tube_frames: 3,
            n_neighbors: 4,
            spatial_stride: 8,
            temporal_stride: 2,
        };
        let tubes = build_tubes(&v, &cfg, &mut rng).unwrap();
        assert_eq!(tubes.n_out, 4);
        assert_eq!(tubes.l_out, 2);
        assert_eq!(tubes.anchors.len(), 8);
    }

    /// Rng stub whose first draw lands on a fixed index.
    struct ForcedFirst(u64);
    impl rand::RngCore for ForcedFirst {
        fn next_u32(&mut self) -> u32 {
            self.0 as u32
        }
        fn next_u64(&mut self) -> u64 {
            self.0
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0);
        }
    }
}
