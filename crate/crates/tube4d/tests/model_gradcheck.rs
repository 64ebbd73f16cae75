//! Finite differences through the full tiny-scale training forward: tube
//! embedding, masking split, online + momentum encoders, both decoder
//! passes, the prediction head, and all four objectives. Every trainable
//! parameter element is probed; the momentum branch stays constant.

use tube4d::autodiff::{check_gradients, Binding, Graph, LeafSpec, ParamStore};
use tube4d::backbone::{decode, encode, predict_points, DecoderPass, ModelConfig, ModelIds};
use tube4d::embedding::{p4d_embed, positional_encode, Aggregation};
use tube4d::geometry::{build_tubes, PointCloudVideo, TubeConfig};
use tube4d::masking::{make_mask, split_embeddings, MaskStrategy};
use tube4d::objectives::{
    chamfer_loss, global_loss, latent_loss, motion_loss, pool_frames, pool_frames_ragged,
    pool_global, total_loss, LossConfig, MotionDenominator, NegativeQueue, ProjectionHeads,
};
use tube4d::rng::Streams;

fn fixture() -> (PointCloudVideo, TubeConfig) {
    let mut rng = Streams::new(40).derive("gradcheck/model-video");
    let l = 3;
    let n = 8;
    let coords: Vec<f32> = (0..l * n * 3)
        .map(|_| rand::Rng::random_range(&mut rng, -1.0f32..1.0))
        .collect();
    let video = PointCloudVideo::new(coords, l, n).unwrap();
    let cfg = TubeConfig {
        spatial_radius: 2.5,
        tube_frames: 1,
        n_neighbors: 2,
        spatial_stride: 4,
        temporal_stride: 1,
    };
    (video, cfg)
}

fn run_full_forward(mode: MotionDenominator) {
    let (video, tube_cfg) = fixture();
    let mut tube_rng = Streams::new(41).derive("gradcheck/model-tubes");
    let tubes = build_tubes(&video, &tube_cfg, &mut tube_rng).unwrap();
    let (l_out, n_out) = (tubes.l_out, tubes.n_out);

    let model_cfg = ModelConfig {
        channels: 4,
        enc_depth: 1,
        dec_depth: 1,
        encoder_heads: 2,
        decoder_heads: 2,
        expansion: 2,
        tube_frames: tube_cfg.tube_frames,
        n_neighbors: tube_cfg.n_neighbors,
        l_out,
        n_out,
        feature_width: 0,
        aggregation: Aggregation::Sum,
    };
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut init_rng = Streams::new(42).derive("gradcheck/model-init");
    let model = ModelIds::init(&mut store, &model_cfg, &mut init_rng).unwrap();
    let heads = ProjectionHeads::init(&mut store, model_cfg.channels, &mut init_rng).unwrap();

    let plan = make_mask(l_out, n_out, MaskStrategy::Frame, 0.5, 7, None).unwrap();
    let mut queue: NegativeQueue<f64> = NegativeQueue::new(4, model_cfg.channels);
    queue.push(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    queue.push(vec![0.0, -0.6, 0.8, 0.0]).unwrap();
    let loss_cfg = LossConfig {
        tau: 0.5,
        queue_size: 4,
        motion_denominator: mode,
    };

    let leaves: Vec<LeafSpec> = store
        .iter()
        .map(|(_, p)| LeafSpec::new(&p.name, &p.shape, p.value.clone()))
        .collect();
    let frames = video.num_frames();

    let build = |g: &mut Graph<f64>, tensors: &[tube4d::autodiff::Tensor]| {
        let binding = Binding::from_slots(tensors.iter().map(|&t| Some(t)).collect());
        let momentum = store.bind_shadows(g)?;

        // Online branch: visible tokens only.
        let emb = p4d_embed(g, &binding, &model.kernel, &tubes, &video)?;
        let emb = positional_encode(g, &binding, &model.pos, &emb, frames)?;
        let (visible, masked) = split_embeddings(g, &emb, &tubes, &plan)?;
        let (z_v, _) = encode(g, &binding, &model, &visible)?;

        // Momentum branch: full grid, shadow parameters.
        let emb_m = p4d_embed(g, &momentum, &model.kernel, &tubes, &video)?;
        let emb_m = positional_encode(g, &momentum, &model.pos, &emb_m, frames)?;
        let (z_full, _) = encode(g, &momentum, &model, &emb_m)?;

        // Decoder passes.
        let (z_geo, _) = decode(
            g,
            &binding,
            &model,
            &z_v,
            DecoderPass::Geometry {
                masked: &masked,
                source_frames: frames,
            },
        )?;
        let (z_lat, _) = decode(g, &binding, &model, &z_v, DecoderPass::Latent)?;

        // Objectives.
        let points = predict_points(g, &binding, &model, z_geo, &masked)?;
        let geo = chamfer_loss(
            g,
            points,
            &masked,
            model_cfg.tube_frames,
            model_cfg.n_neighbors,
        )?;
        let lat = latent_loss(g, &binding, &heads, z_lat, z_full.tokens)?;
        let h_v = pool_frames_ragged(g, &z_v)?;
        let h_m = pool_frames(g, z_full.tokens, l_out, n_out)?;
        let motion = motion_loss(g, &binding, &heads, h_v, h_m, &loss_cfg)?;
        let q_on = pool_global(g, z_v.tokens)?;
        let q_mo = pool_global(g, z_full.tokens)?;
        let global = global_loss(g, &binding, &heads, q_on, q_mo, &queue, &loss_cfg)?;

        let (total, _) = total_loss(g, Some(geo), Some(lat), Some(motion), Some(global))?;
        Ok(total)
    };

    let report = check_gradients(build, &leaves).unwrap();
    assert!(
        report.passes(1e-4),
        "{mode}: max rel err {} at {:?} over {} elements",
        report.max_rel_err,
        report.worst,
        report.elements
    );
}

#[test]
fn full_training_forward_matches_finite_differences_inclusive_mode() {
    run_full_forward(MotionDenominator::Inclusive);
}

#[test]
fn full_training_forward_matches_finite_differences_exclusive_mode() {
    run_full_forward(MotionDenominator::Exclusive);
}
