//! Tube → embedding projection: a point 4D convolution over per-member
//! spatio-temporal displacements (plus optional per-point features), and the
//! additive positional encoding of anchor coordinates.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{PointCloudVideo, TubeBatch};

/// How member contributions combine into one embedding per anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Literal sum over members: f′ = Σ (W_d·δ [+ W_f·f]) + bias.
    Sum,
    /// Conventional point-conv variant: per-member bias + GELU, then max.
    MlpMax,
}

/// Standard deviation for all weight initialization in the model stack.
pub const INIT_STD: f64 = 0.02;

/// Draw a small-normal weight vector. Insertion order fixes the stream, so
/// identical seeds build identical models.
pub fn init_normal<T: Real>(rng: &mut impl Rng, n: usize) -> Vec<T> {
    let dist = Normal::new(0.0f64, INIT_STD).expect("valid std");
    (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
}

/// Displacement/feature transform of the point 4D convolution.
#[derive(Debug, Clone)]
pub struct P4dKernel {
    /// [4, C]: maps (δx,δy,δz,δt) to C channels.
    pub w_d: ParamId,
    /// [C_in, C]: maps member features; present iff the data has features.
    pub w_f: Option<ParamId>,
    /// [C].
    pub bias: ParamId,
    pub aggregation: Aggregation,
}

impl P4dKernel {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        feature_width: usize,
        aggregation: Aggregation,
        with_shadow: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_d = store.insert(
            format!("{prefix}.w_d"),
            &[4, channels],
            init_normal(rng, 4 * channels),
            with_shadow,
        )?;
        let w_f = if feature_width > 0 {
            Some(store.insert(
                format!("{prefix}.w_f"),
                &[feature_width, channels],
                init_normal(rng, feature_width * channels),
                with_shadow,
            )?)
        } else {
            None
        };
        let bias = store.insert(
            format!("{prefix}.bias"),
            &[channels],
            vec![T::ZERO; channels],
            with_shadow,
        )?;
        Ok(P4dKernel {
            w_d,
            w_f,
            bias,
            aggregation,
        })
    }
}

/// Learnable linear map from normalized anchor (x,y,z,t) to C channels,
/// added onto embeddings.
#[derive(Debug, Clone)]
pub struct PositionalMap {
    /// [4, C].
    pub w: ParamId,
    /// [C].
    pub b: ParamId,
}

impl PositionalMap {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        with_shadow: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.insert(
            format!("{prefix}.w"),
            &[4, channels],
            init_normal(rng, 4 * channels),
            with_shadow,
        )?;
        let b = store.insert(format!("{prefix}.b"), &[channels], vec![T::ZERO; channels], with_shadow)?;
        Ok(PositionalMap { w, b })
    }
}

/// Token tensor plus the grid metadata that travels with it. `grid_indices`
/// names each token's (frame-row, anchor-slot) position as row·N′+slot; the
/// full batch covers 0..L′·N′ in order, a visible subset keeps its subset.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    /// [token_count, C] in the owning graph.
    pub tokens: Tensor,
    pub l_out: usize,
    pub n_out: usize,
    pub grid_indices: Vec<usize>,
    /// (x,y,z,t) per token, t in source-frame units.
    pub anchors: Vec<[f64; 4]>,
}

impl EmbeddingBatch {
    pub fn token_count(&self) -> usize {
        self.grid_indices.len()
    }

    /// Frame row (0..L′) of one token.
    pub fn frame_row(&self, token: usize) -> usize {
        self.grid_indices[token] / self.n_out
    }
}

/// Anchor coordinates normalized for the positional map: xyz raw (data is
/// unit-sphere scaled), t divided by L−1.
fn normalized_anchor_rows<T: Real>(anchors: &[[f64; 4]], source_frames: usize) -> Vec<T> {
    let t_norm = (source_frames.saturating_sub(1)).max(1) as f64;
    let mut rows = Vec::with_capacity(anchors.len() * 4);
    for a in anchors {
        rows.push(T::from_f64(a[0]));
        rows.push(T::from_f64(a[1]));
        rows.push(T::from_f64(a[2]));
        rows.push(T::from_f64(a[3] / t_norm));
    }
    rows
}

/// Point 4D convolution: per anchor, combine member displacement transforms
/// (and feature transforms when the video has features) into one C-vector.
/// Produces the full L′×N′ token grid in row order.
pub fn p4d_embed<T: Real>(
    g: &mut Graph<T>,
    binding: &Binding,
    kernel: &P4dKernel,
    tubes: &TubeBatch,
    video: &PointCloudVideo,
) -> Result<EmbeddingBatch> {
    if kernel.w_f.is_some() != video.features().is_some() {
        return Err(Error::contract(
            "feature transform present iff the video has features",
        ));
    }
    let anchors_total = tubes.tube_count();
    let per_tube = tubes.members_per_tube();
    let m_total = anchors_total * per_tube;

    let disp: Vec<T> = tubes.displacements.iter().map(|&v| T::from_f64(v)).collect();
    let disp_t = g.constant(disp, &[m_total, 4])?;
    let w_d = binding.tensor(kernel.w_d);
    let mut member_feats = g.matmul(disp_t, w_d)?; // [M, C]

    if let Some(w_f_id) = kernel.w_f {
        let c_in = video.feature_width();
        let mut feat_rows: Vec<T> = Vec::with_capacity(m_total * c_in);
        for &(frame, idx) in &tubes.members {
            let f = video
                .feature(frame as usize, idx as usize)
                .expect("feature presence checked above");
            feat_rows.extend(f.iter().map(|&v| T::from_f64(v as f64)));
        }
        let feats_t = g.constant(feat_rows, &[m_total, c_in])?;
        let w_f = binding.tensor(w_f_id);
        let transformed = g.matmul(feats_t, w_f)?;
        member_feats = g.add(member_feats, transformed)?;
    }

    let channels = g.shape(member_feats)[1];
    let bias = binding.tensor(kernel.bias);
    let tokens = match kernel.aggregation {
        Aggregation::Sum => {
            let grouped = g.reshape(member_feats, &[anchors_total, per_tube, channels])?;
            let summed = g.sum_axis(grouped, 1)?; // [A, C]
            let b_row = g.reshape(bias, &[1, channels])?;
            let b_full = g.repeat_axis(b_row, 0, anchors_total)?;
            g.add(summed, b_full)?
        }
        Aggregation::MlpMax => {
            let b_row = g.reshape(bias, &[1, channels])?;
            let b_full = g.repeat_axis(b_row, 0, m_total)?;
            let biased = g.add(member_feats, b_full)?;
            let activated = g.gelu(biased)?;
            let grouped = g.reshape(activated, &[anchors_total, per_tube, channels])?;
            g.maxpool_axis(grouped, 1)? // [A, C]
        }
    };

    Ok(EmbeddingBatch {
        tokens,
        l_out: tubes.l_out,
        n_out: tubes.n_out,
        grid_indices: (0..anchors_total).collect(),
        anchors: tubes.anchors.clone(),
    })
}

/// Add the positional term: tokens += (normalized anchors)·W + b.
pub fn positional_encode<T: Real>(
    g: &mut Graph<T>,
    binding: &Binding,
    pos: &PositionalMap,
    batch: &EmbeddingBatch,
    source_frames: usize,
) -> Result<EmbeddingBatch> {
    let rows = normalized_anchor_rows::<T>(&batch.anchors, source_frames);
    let coords = g.constant(rows, &[batch.anchors.len(), 4])?;
    let term = g.linear(coords, binding.tensor(pos.w), binding.tensor(pos.b))?;
    let tokens = g.add(batch.tokens, term)?;
    Ok(EmbeddingBatch {
        tokens,
        ..batch.clone()
    })
}

/// Positional term for an arbitrary anchor list (decoder-side geometry
/// tokens at masked positions reuse the same learnable map).
pub fn positional_term<T: Real>(
    g: &mut Graph<T>,
    binding: &Binding,
    pos: &PositionalMap,
    anchors: &[[f64; 4]],
    source_frames: usize,
) -> Result<Tensor> {
    let rows = normalized_anchor_rows::<T>(anchors, source_frames);
    let coords = g.constant(rows, &[anchors.len(), 4])?;
    g.linear(coords, binding.tensor(pos.w), binding.tensor(pos.b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_tubes, TubeConfig};
    use crate::rng::Streams;

    fn tiny_video(seed: u64, l: usize, n: usize) -> PointCloudVideo {
        let mut rng = Streams::new(seed).derive("test/embed-video");
        let coords: Vec<f32> = (0..l * n * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        PointCloudVideo::new(coords, l, n).unwrap()
    }

    fn tiny_tubes(video: &PointCloudVideo) -> TubeBatch {
        let cfg = TubeConfig {
            spatial_radius: 1.5,
            tube_frames: 3,
            n_neighbors: 4,
            spatial_stride: 4,
            temporal_stride: 1,
        };
        let mut rng = Streams::new(5).derive("test/embed-tubes");
        build_tubes(video, &cfg, &mut rng).unwrap()
    }

    /// Plain scalar-loop evaluation of the literal sum, the oracle the graph
    /// version must match.
    fn naive_sum_embed(
        tubes: &TubeBatch,
        w_d: &[f64], // [4, C]
        bias: &[f64],
        channels: usize,
    ) -> Vec<f64> {
        let per_tube = tubes.members_per_tube();
        let mut out = vec![0.0; tubes.tube_count() * channels];
        for a in 0..tubes.tube_count() {
            for m in 0..per_tube {
                let d = &tubes.displacements[(a * per_tube + m) * 4..(a * per_tube + m) * 4 + 4];
                for c in 0..channels {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        acc += d[k] * w_d[k * channels + c];
                    }
                    out[a * channels + c] += acc;
                }
            }
            for c in 0..channels {
                out[a * channels + c] += bias[c];
            }
        }
        out
    }

    #[test]
    fn literal_sum_matches_naive_scalar_loop() {
        let video = tiny_video(1, 4, 8);
        let tubes = tiny_tubes(&video);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = Streams::new(2).derive("test/embed-init");
        let kernel =
            P4dKernel::init(&mut store, "embed", 6, 0, Aggregation::Sum, false, &mut rng).unwrap();
        let mut g = Graph::new();
        let binding = store.bind(&mut g, false).unwrap();
        let batch = p4d_embed(&mut g, &binding, &kernel, &tubes, &video).unwrap();

        let expect = naive_sum_embed(
            &tubes,
            &store.get(kernel.w_d).value,
            &store.get(kernel.bias).value,
            6,
        );
        let got = g.value(batch.tokens);
        assert_eq!(got.len(), expect.len());
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn symmetric_displacements_cancel_in_sum_mode() {
        // Two members with opposite displacements in a single-anchor batch.
        let tubes = TubeBatch {
            l_out: 1,
            n_out: 1,
            tube_frames: 1,
            n_neighbors: 2,
            anchor_frames: vec![0],
            anchors: vec![[0.0, 0.0, 0.0, 0.0]],
            members: vec![(0, 0), (0, 1)],
            displacements: vec![0.3, -0.2, 0.1, 0.0, -0.3, 0.2, -0.1, 0.0],
            ground_truth: vec![0.0; 6],
        };
        let video = tiny_video(3, 1, 2);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = Streams::new(4).derive("test/embed-sym");
        let kernel =
            P4dKernel::init(&mut store, "embed", 5, 0, Aggregation::Sum, false, &mut rng).unwrap();
        let mut g = Graph::new();
        let binding = store.bind(&mut g, false).unwrap();
        let batch = p4d_embed(&mut g, &binding, &kernel, &tubes, &video).unwrap();
        // Bias is zero at init, so cancellation leaves exactly zero.
        for &v in g.value(batch.tokens) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn single_unit_x_displacement_reads_off_first_kernel_row() {
        let tubes = TubeBatch {
            l_out: 1,
            n_out: 1,
            tube_frames: 1,
            n_neighbors: 1,
            anchor_frames: vec![0],
            anchors: vec![[0.0, 0.0, 0.0, 0.0]],
            members: vec![(0, 0)],
            displacements: vec![1.0, 0.0, 0.0, 0.0],
            ground_truth: vec![0.0; 3],
        };
        let video = tiny_video(5, 1, 1);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = Streams::new(6).derive("test/embed-row");
        let kernel =
            P4dKernel::init(&mut store, "embed", 4, 0, Aggregation::Sum, false, &mut rng).unwrap();
        let mut g = Graph::new();
        let binding = store.bind(&mut g, false).unwrap();
        let batch = p4d_embed(&mut g, &binding, &kernel, &tubes, &video).unwrap();
        let w_d_row0 = &store.get(kernel.w_d).value[0..4];
        assert_eq!(g.value(batch.tokens), w_d_row0);
    }

    #[test]
    fn member_order_permutation_leaves_both_aggregations_unchanged() {
        let video = tiny_video(7, 3, 8);
        let tubes = tiny_tubes(&video);
        let mut permuted = tubes.clone();
        // Reverse member order within each tube (slots and neighbors jointly).
        let per_tube = tubes.members_per_tube();
        for a in 0..tubes.tube_count() {
            for m in 0..per_tube {
                let src = a * per_tube + (per_tube - 1 - m);
                let dst = a * per_tube + m;
                permuted.members[dst] = tubes.members[src];
                for k in 0..4 {
                    permuted.displacements[dst * 4 + k] = tubes.displacements[src * 4 + k];
                }
                for k in 0..3 {
                    permuted.ground_truth[dst * 3 + k] = tubes.ground_truth[src * 3 + k];
                }
            }
        }
        for agg in [Aggregation::Sum, Aggregation::MlpMax] {
            let mut store: ParamStore<f64> = ParamStore::new();
            let mut rng = Streams::new(8).derive("test/embed-perm");
            let kernel = P4dKernel::init(&mut store, "embed", 6, 0, agg, false, &mut rng).unwrap();
            let mut g = Graph::new();
            let binding = store.bind(&mut g, false).unwrap();
            let a = p4d_embed(&mut g, &binding, &kernel, &tubes, &video).unwrap();
            let b = p4d_embed(&mut g, &binding, &kernel, &permuted, &video).unwrap();
            let (va, vb) = (g.value(a.tokens).to_vec(), g.value(b.tokens));
            for (x, y) in va.iter().zip(vb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coordinate_only_path_equals_zeroed_feature_transform() {
        let l = 3;
        let n = 8;
        let plain = tiny_video(9, l, n);
        let feats: Vec<f32> = (0..l * n * 2).map(|i| (i as f32) * 0.01).collect();
        let with_feats = PointCloudVideo::new(plain.coords().to_vec(), l, n)
            .unwrap()
            .with_features(feats, 2)
            .unwrap();
        let tubes = tiny_tubes(&plain);

        let mut rng = Streams::new(10).derive("test/embed-eq9");
        let mut store_a: ParamStore<f64> = ParamStore::new();
        let kernel_a =
            P4dKernel::init(&mut store_a, "embed", 6, 0, Aggregation::Sum, false, &mut rng)
                .unwrap();
        // Same w_d values; feature transform explicitly zeroed.
        let mut store_b: ParamStore<f64> = ParamStore::new();
        let w_d_vals = store_a.get(kernel_a.w_d).value.clone();
        let w_d = store_b.insert("embed.w_d", &[4, 6], w_d_vals, false).unwrap();
        let w_f = store_b.insert("embed.w_f", &[2, 6], vec![0.0; 12], false).unwrap();
        let bias = store_b.insert("embed.bias", &[6], vec![0.0; 6], false).unwrap();
        let kernel_b = P4dKernel {
            w_d,
            w_f: Some(w_f),
            bias,
            aggregation: Aggregation::Sum,
        };

        let mut ga = Graph::new();
        let ba = store_a.bind(&mut ga, false).unwrap();
        let ea = p4d_embed(&mut ga, &ba, &kernel_a, &tubes, &plain).unwrap();
        let mut gb = Graph::new();
        let bb = store_b.bind(&mut gb, false).unwrap();
        let eb = p4d_embed(&mut gb, &bb, &kernel_b, &tubes, &with_feats).unwrap();
        assert_eq!(ga.value(ea.tokens), gb.value(eb.tokens));
    }

    #[test]
    fn positional_encoding_is_additive_and_zero_map_is_identity() {
        let video = tiny_video(11, 4, 8);
        let tubes = tiny_tubes(&video);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = Streams::new(12).derive("test/embed-pos");
        let kernel =
            P4dKernel::init(&mut store, "embed", 6, 0, Aggregation::Sum, false, &mut rng).unwrap();
        let pos = PositionalMap::init(&mut store, "pos", 6, false, &mut rng).unwrap();
        let zero_pos_store = {
            let mut s: ParamStore<f64> = ParamStore::new();
            s.insert("pos.w", &[4, 6], vec![0.0; 24], false).unwrap();
            s.insert("pos.b", &[6], vec![0.0; 6], false).unwrap();
            s
        };

        let mut g = Graph::new();
        let binding = store.bind(&mut g, false).unwrap();
        let base = p4d_embed(&mut g, &binding, &kernel, &tubes, &video).unwrap();
        let encoded = positional_encode(&mut g, &binding, &pos, &base, 4).unwrap();

        // Zero map: identity.
        let zb = zero_pos_store.bind(&mut g, false).unwrap();
        let zero_pos = PositionalMap {
            w: zero_pos_store.id("pos.w").unwrap(),
            b: zero_pos_store.id("pos.b").unwrap(),
        };
        let zeroed = positional_encode(&mut g, &zb, &zero_pos, &base, 4).unwrap();
        assert_eq!(g.value(zeroed.tokens), g.value(base.tokens));

        // Tokens at identical (x,y,z,t) receive identical additive terms.
        let term = positional_term(
            &mut g,
            &binding,
            &pos,
            &[[0.1, 0.2, 0.3, 2.0], [0.1, 0.2, 0.3, 2.0]],
            4,
        )
        .unwrap();
        let tv = g.value(term);
        assert_eq!(tv[..6], tv[6..12]);

        // Additive: encoded − base == positional term of the same anchors.
        let direct = positional_term(&mut g, &binding, &pos, &base.anchors, 4).unwrap();
        let dv = g.value(direct).to_vec();
        let (ev, bv) = (g.value(encoded.tokens), g.value(base.tokens));
        for i in 0..dv.len() {
            assert!((ev[i] - bv[i] - dv[i]).abs() < 1e-12);
        }
    }
}
