//! Dual-branch pre-training loop. Each step: per video, build tubes, embed,
//! mask, run the online encoder on visible tokens and the momentum encoder on
//! the full grid, decode both token passes, and score the enabled objectives;
//! then one optimizer step over the accumulated mean gradient, the EMA
//! update, and finally the queue push of this batch's momentum descriptors.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore};
use crate::backbone::{decode, encode, predict_points, DecoderPass, ModelConfig, ModelIds};
use crate::embedding::{p4d_embed, positional_encode};
use crate::error::{Error, Result};
use crate::geometry::{augment_scale, build_tubes, sample_frames, PointCloudVideo, TubeConfig};
use crate::masking::{make_mask, split_embeddings, MaskStrategy};
use crate::objectives::{
    chamfer_loss, global_loss, latent_loss, motion_loss, pool_frames, pool_frames_ragged,
    pool_global, total_loss, LossConfig, LossFlags, LossReport, NegativeQueue, ProjectionHeads,
};
use crate::pipeline::optim::{AdamW, Schedule};
use crate::rng::Streams;

/// Pre-training schedule and per-step knobs.
#[derive(Debug, Clone)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// EMA coefficient for the momentum branch.
    pub ema_momentum: f64,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub loss: LossConfig,
    pub flags: LossFlags,
    /// Frames sampled per video and the sampling stride.
    pub frames: usize,
    pub sample_stride: usize,
    /// Random global rescaling range; lo = hi = 1 disables it.
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub workers: usize,
}

impl PretrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch size must be ≥ 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::contract(format!(
                "warmup epochs {} must be below total epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::contract("learning rate must be positive"));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum <= 1.0) {
            return Err(Error::contract(format!(
                "EMA momentum must lie in (0,1], got {}",
                self.ema_momentum
            )));
        }
        if self.frames == 0 || self.sample_stride == 0 {
            return Err(Error::contract("frame sampling needs count and stride ≥ 1"));
        }
        if !(0.0 < self.scale_lo && self.scale_lo <= self.scale_hi) {
            return Err(Error::contract(format!(
                "bad scale range [{}, {}]",
                self.scale_lo, self.scale_hi
            )));
        }
        if self.workers == 0 {
            return Err(Error::contract("workers must be ≥ 1"));
        }
        if !(self.flags.geo || self.flags.lat || self.flags.motion || self.flags.global) {
            return Err(Error::contract("at least one objective must be enabled"));
        }
        self.loss.validate()
    }
}

/// Per-epoch mean losses plus the learning rate of the epoch's last step.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub report: LossReport,
    pub lr: f64,
}

/// What one video contributed to a step, computed graph-locally so workers
/// can run videos in parallel and the main thread can merge in video order.
struct VideoOutcome {
    grads: Vec<Option<Vec<f32>>>,
    report: LossReport,
    momentum_global: Option<Vec<f32>>,
}

/// The pre-training state: parameters, queue, optimizer, and RNG streams.
pub struct Trainer {
    pub store: ParamStore<f32>,
    pub model: ModelIds,
    pub heads: ProjectionHeads,
    pub queue: NegativeQueue<f32>,
    pub settings: PretrainSettings,
    pub tube: TubeConfig,
    pub step: u64,
    pub(crate) optimizer: AdamW<f32>,
    pub(crate) schedule: Schedule,
    pub(crate) streams: Streams,
    n_videos: usize,
}

/// RNG sub-stream path for one video of one step; exposed so audits can
/// replay a step's sampling exactly.
pub fn video_stream_path(step: u64, index: usize) -> String {
    format!("sampling/step{step}/video{index}")
}

impl Trainer {
    pub fn new(
        model_cfg: ModelConfig,
        tube: TubeConfig,
        settings: PretrainSettings,
        n_videos: usize,
        seed: u64,
    ) -> Result<Self> {
        settings.validate()?;
        if n_videos == 0 {
            return Err(Error::contract("training set is empty"));
        }
        let streams = Streams::new(seed);
        let mut init_rng = streams.derive("init");
        let mut store = ParamStore::new();
        let model = ModelIds::init(&mut store, &model_cfg, &mut init_rng)?;
        let heads = ProjectionHeads::init(&mut store, model_cfg.channels, &mut init_rng)?;
        let queue = NegativeQueue::new(settings.loss.queue_size, model_cfg.channels);
        let steps_per_epoch = n_videos.div_ceil(settings.batch_size) as u64;
        let schedule = Schedule::new(
            settings.lr,
            settings.epochs as u64 * steps_per_epoch,
            settings.warmup_epochs as u64 * steps_per_epoch,
        )?;
        let optimizer = AdamW::new(settings.weight_decay);
        Ok(Trainer {
            store,
            model,
            heads,
            queue,
            settings,
            tube,
            step: 0,
            optimizer,
            schedule,
            streams,
            n_videos,
        })
    }

    /// Video visit order for an epoch, derived from the master seed.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = self.streams.derive(&format!("order/epoch{epoch}"));
        let mut order: Vec<usize> = (0..self.n_videos).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step over a batch. Returns the mean per-video report.
    pub fn pretrain_step(&mut self, videos: &[&PointCloudVideo]) -> Result<LossReport> {
        if videos.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let lr = self.schedule.lr_at(self.step);
        self.store.zero_grads();

        let outcomes = self.run_batch(videos)?;

        let scale = 1.0 / videos.len() as f32;
        let mut mean = LossReport::default();
        for o in &outcomes {
            self.store.accumulate_grad_vecs(&o.grads, scale);
            mean.geo += o.report.geo;
            mean.lat += o.report.lat;
            mean.motion += o.report.motion;
            mean.global += o.report.global;
            mean.total += o.report.total;
        }
        let inv = 1.0 / videos.len() as f64;
        mean.geo *= inv;
        mean.lat *= inv;
        mean.motion *= inv;
        mean.global *= inv;
        mean.total *= inv;

        self.optimizer.step(&mut self.store, lr as f32, self.step + 1);
        self.store.ema_update(self.settings.ema_momentum as f32);
        for o in outcomes {
            if let Some(q) = o.momentum_global {
                self.queue.push(q)?;
            }
        }
        self.step += 1;
        Ok(mean)
    }

    /// Full loop over `videos`; `on_epoch` observes each finished epoch.
    pub fn pretrain(
        &mut self,
        videos: &[PointCloudVideo],
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>> {
        if videos.len() != self.n_videos {
            return Err(Error::contract(format!(
                "trainer was sized for {} videos, got {}",
                self.n_videos,
                videos.len()
            )));
        }
        let mut stats = Vec::with_capacity(self.settings.epochs);
        for epoch in 0..self.settings.epochs {
            let order = self.epoch_order(epoch);
            let mut acc = LossReport::default();
            let mut steps = 0usize;
            let mut last_lr = 0.0;
            for chunk in order.chunks(self.settings.batch_size) {
                last_lr = self.schedule.lr_at(self.step);
                let batch: Vec<&PointCloudVideo> = chunk.iter().map(|&i| &videos[i]).collect();
                let r = self.pretrain_step(&batch)?;
                acc.geo += r.geo;
                acc.lat += r.lat;
                acc.motion += r.motion;
                acc.global += r.global;
                acc.total += r.total;
                steps += 1;
            }
            let inv = 1.0 / steps as f64;
            acc.geo *= inv;
            acc.lat *= inv;
            acc.motion *= inv;
            acc.global *= inv;
            acc.total *= inv;
            let entry = EpochStats {
                epoch,
                report: acc,
                lr: last_lr,
            };
            on_epoch(&entry);
            stats.push(entry);
        }
        Ok(stats)
    }

    fn run_batch(&self, videos: &[&PointCloudVideo]) -> Result<Vec<VideoOutcome>> {
        let workers = self.settings.workers.min(videos.len());
        if workers <= 1 {
            return videos
                .iter()
                .enumerate()
                .map(|(i, v)| self.video_pass(i, v))
                .collect();
        }
        let mut indexed: Vec<(usize, VideoOutcome)> = std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(workers);
            for w in 0..workers {
                let this = &*self;
                let idxs: Vec<usize> = (w..videos.len()).step_by(workers).collect();
                handles.push(scope.spawn(move || {
                    idxs.into_iter()
                        .map(|i| this.video_pass(i, videos[i]).map(|o| (i, o)))
                        .collect::<Result<Vec<_>>>()
                }));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect::<Result<Vec<_>>>()
                .map(|vs| vs.into_iter().flatten().collect())
        })?;
        indexed.sort_by_key(|(i, _)| *i);
        Ok(indexed.into_iter().map(|(_, o)| o).collect())
    }

    /// Forward + backward for one video; pure per batch apart from RNG
    /// derivation, so safe to run on any worker.
    fn video_pass(&self, index: usize, video: &PointCloudVideo) -> Result<VideoOutcome> {
        self.video_pass_inner(index, video).map_err(|e| {
            Error::contract(format!("step {}, video {index}: {e}", self.step))
        })
    }

    fn video_pass_inner(&self, index: usize, video: &PointCloudVideo) -> Result<VideoOutcome> {
        let s = &self.settings;
        let mut rng = self.streams.derive(&video_stream_path(self.step, index));
        let sampled = sample_frames(video, s.frames, s.sample_stride, &mut rng)?;
        let sampled = if s.scale_lo == 1.0 && s.scale_hi == 1.0 {
            sampled
        } else {
            augment_scale(&sampled, s.scale_lo, s.scale_hi, &mut rng)?
        };
        let tubes = build_tubes(&sampled, &self.tube, &mut rng)?;
        if tubes.l_out != self.model.cfg.l_out || tubes.n_out != self.model.cfg.n_out {
            return Err(Error::contract(format!(
                "tube grid {}×{} does not match the model's {}×{}",
                tubes.l_out, tubes.n_out, self.model.cfg.l_out, self.model.cfg.n_out
            )));
        }
        let mask_seed = rng.random::<u64>();
        let plan = make_mask(
            tubes.l_out,
            tubes.n_out,
            s.mask_strategy,
            s.mask_ratio,
            mask_seed,
            Some(&tubes.anchors),
        )?;

        let mut g = Graph::<f32>::new();
        let online = self.store.bind(&mut g, true)?;
        let emb = p4d_embed(&mut g, &online, &self.model.kernel, &tubes, &sampled)?;
        let emb = positional_encode(&mut g, &online, &self.model.pos, &emb, sampled.num_frames())?;
        let (visible, masked) = split_embeddings(&mut g, &emb, &tubes, &plan)?;
        let (enc_v, _) = encode(&mut g, &online, &self.model, &visible)?;

        let need_momentum = s.flags.lat || s.flags.motion || s.flags.global;
        let momentum = if need_momentum {
            let shadows = self.store.bind_shadows(&mut g)?;
            let m_emb = p4d_embed(&mut g, &shadows, &self.model.kernel, &tubes, &sampled)?;
            let m_emb =
                positional_encode(&mut g, &shadows, &self.model.pos, &m_emb, sampled.num_frames())?;
            let (m_enc, _) = encode(&mut g, &shadows, &self.model, &m_emb)?;
            Some(m_enc)
        } else {
            None
        };

        let geo = if s.flags.geo {
            let (z_geo, _) = decode(
                &mut g,
                &online,
                &self.model,
                &enc_v,
                DecoderPass::Geometry {
                    masked: &masked,
                    source_frames: sampled.num_frames(),
                },
            )?;
            let rec = predict_points(&mut g, &online, &self.model, z_geo, &masked)?;
            Some(chamfer_loss(
                &mut g,
                rec,
                &masked,
                self.model.cfg.tube_frames,
                self.model.cfg.n_neighbors,
            )?)
        } else {
            None
        };
        let lat = if s.flags.lat {
            let (z_lat, _) = decode(&mut g, &online, &self.model, &enc_v, DecoderPass::Latent)?;
            let m = momentum.as_ref().expect("momentum branch present");
            Some(latent_loss(&mut g, &online, &self.heads, z_lat, m.tokens)?)
        } else {
            None
        };
        let motion = if s.flags.motion {
            let m = momentum.as_ref().expect("momentum branch present");
            let h_on = pool_frames_ragged(&mut g, &enc_v)?;
            let h_mom = pool_frames(&mut g, m.tokens, tubes.l_out, tubes.n_out)?;
            Some(motion_loss(&mut g, &online, &self.heads, h_on, h_mom, &s.loss)?)
        } else {
            None
        };
        let (global, momentum_global) = if s.flags.global {
            let m = momentum.as_ref().expect("momentum branch present");
            let q_on = pool_global(&mut g, enc_v.tokens)?;
            let q_mom = pool_global(&mut g, m.tokens)?;
            let loss = global_loss(
                &mut g,
                &online,
                &self.heads,
                q_on,
                q_mom,
                &self.queue,
                &s.loss,
            )?;
            (Some(loss), Some(g.value(q_mom).to_vec()))
        } else {
            (None, None)
        };

        let (total, report) = total_loss(&mut g, geo, lat, motion, global)?;
        g.backward(total)?;
        Ok(VideoOutcome {
            grads: online.grads(&g),
            report,
            momentum_global,
        })
    }
}
