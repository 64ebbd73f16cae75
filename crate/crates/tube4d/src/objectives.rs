//! Training objectives: masked-geometry Chamfer reconstruction, positionwise
//! latent alignment, bidirectional per-frame motion InfoNCE, queue-based
//! global InfoNCE, and their unweighted combination. Alignment targets are
//! always gradient-stopped; projection heads act on the online branch only.

use std::collections::VecDeque;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Real, Tensor};
use crate::embedding::{init_normal, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::masking::MaskedSet;

/// Residual two-layer projection head: x + W₂·gelu(W₁·x + b₁) + b₂.
/// Zero weights make it the exact identity, which alignment losses use as
/// their neutral configuration.
#[derive(Debug, Clone)]
pub struct MlpHeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpHeadIds {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = channels;
        Ok(MlpHeadIds {
            w1: store.insert(format!("{prefix}.w1"), &[c, c], init_normal(rng, c * c), false)?,
            b1: store.insert(format!("{prefix}.b1"), &[c], vec![T::ZERO; c], false)?,
            w2: store.insert(format!("{prefix}.w2"), &[c, c], init_normal(rng, c * c), false)?,
            b2: store.insert(format!("{prefix}.b2"), &[c], vec![T::ZERO; c], false)?,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, binding: &Binding, x: Tensor) -> Result<Tensor> {
        let h = g.linear(x, binding.tensor(self.w1), binding.tensor(self.b1))?;
        let h = g.gelu(h)?;
        let h = g.linear(h, binding.tensor(self.w2), binding.tensor(self.b2))?;
        g.add(x, h)
    }
}

/// The four online-branch projection heads, independent parameter sets.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    pub latent: MlpHeadIds,
    pub motion_fwd: MlpHeadIds,
    pub motion_bwd: MlpHeadIds,
    pub global: MlpHeadIds,
}

impl ProjectionHeads {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ProjectionHeads {
            latent: MlpHeadIds::init(store, "head_lat", channels, rng)?,
            motion_fwd: MlpHeadIds::init(store, "head_fwd", channels, rng)?,
            motion_bwd: MlpHeadIds::init(store, "head_bwd", channels, rng)?,
            global: MlpHeadIds::init(store, "head_glob", channels, rng)?,
        })
    }
}

/// Which frames the motion InfoNCE denominator sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionDenominator {
    /// Positive candidate included (bounded cross-entropy). Default.
    Inclusive,
    /// Positive excluded from the denominator.
    Exclusive,
}

impl FromStr for MotionDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inclusive" => Ok(MotionDenominator::Inclusive),
            "exclusive" => Ok(MotionDenominator::Exclusive),
            other => Err(Error::Config(format!(
                "unknown motion denominator {other:?}; expected inclusive|exclusive"
            ))),
        }
    }
}

impl std::fmt::Display for MotionDenominator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MotionDenominator::Inclusive => "inclusive",
            MotionDenominator::Exclusive => "exclusive",
        })
    }
}

/// Contrastive-loss knobs shared by the motion and global objectives.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub tau: f64,
    pub queue_size: usize,
    pub motion_denominator: MotionDenominator,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::contract(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Which objectives contribute to the total (ablation switches).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub geo: bool,
    pub lat: bool,
    pub motion: bool,
    pub global: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            geo: true,
            lat: true,
            motion: true,
            global: true,
        }
    }
}

/// Scalar values of one training step's objectives; disabled terms read 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossReport {
    pub geo: f64,
    pub lat: f64,
    pub motion: f64,
    pub global: f64,
    pub total: f64,
}

/// FIFO queue of unit-normalized feature vectors serving as negatives.
#[derive(Debug, Clone)]
pub struct NegativeQueue<T: Real> {
    entries: VecDeque<Vec<T>>,
    capacity: usize,
    width: usize,
}

impl<T: Real> NegativeQueue<T> {
    pub fn new(capacity: usize, width: usize) -> Self {
        NegativeQueue {
            entries: VecDeque::new(),
            capacity,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Enqueue one unit-norm vector, evicting the oldest beyond capacity.
    pub fn push(&mut self, v: Vec<T>) -> Result<()> {
        if v.len() != self.width {
            return Err(Error::contract(format!(
                "queue entry width {} does not match {}",
                v.len(),
                self.width
            )));
        }
        let norm: f64 = v.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::contract(format!(
                "queue entries must be unit-normalized, got norm {norm}"
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(v);
        Ok(())
    }

    /// Oldest-first concatenation, [len·width].
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.entries.len() * self.width);
        for e in &self.entries {
            out.extend_from_slice(e);
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.entries.iter().map(|v| v.as_slice())
    }
}

/// Symmetric squared-distance Chamfer between two point sets, each row-major
/// xyz: mean over a of min over b, plus mean over b of min over a.
pub fn chamfer_pair(a: &[f64], b: &[f64]) -> f64 {
    let na = a.len() / 3;
    let nb = b.len() / 3;
    assert!(na > 0 && nb > 0, "chamfer over empty set");
    let min_to = |p: &[f64], set: &[f64], m: usize| -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..m {
            let q = &set[i * 3..i * 3 + 3];
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if d < best {
                best = d;
            }
        }
        best
    };
    let fwd: f64 = (0..na).map(|i| min_to(&a[i * 3..i * 3 + 3], b, nb)).sum::<f64>() / na as f64;
    let bwd: f64 = (0..nb).map(|i| min_to(&b[i * 3..i * 3 + 3], a, na)).sum::<f64>() / nb as f64;
    fwd + bwd
}

/// Plain-loop reconstruction loss over tube-major [m·r_t·n, 3] layouts: mean
/// over every (tube, frame slot) of the symmetric Chamfer between predicted
/// and target slot sets. Oracle for the graph version and the CLI checker.
pub fn chamfer_reference(
    rec: &[f64],
    gt: &[f64],
    tube_frames: usize,
    n_neighbors: usize,
) -> f64 {
    let slot = n_neighbors * 3;
    let tubes = rec.len() / (tube_frames * slot);
    assert_eq!(rec.len(), gt.len());
    let mut acc = 0.0;
    for m in 0..tubes {
        for s in 0..tube_frames {
            let off = (m * tube_frames + s) * slot;
            acc += chamfer_pair(&rec[off..off + slot], &gt[off..off + slot]);
        }
    }
    acc / (tubes * tube_frames) as f64
}

/// Graph reconstruction loss: `p_rec` is the predicted [m·r_t·n, 3] block
/// (tube-major) and the targets come from the masked set, same layout. Mean
/// over slots of symmetric squared Chamfer.
pub fn chamfer_loss<T: Real>(
    g: &mut Graph<T>,
    p_rec: Tensor,
    masked: &MaskedSet,
    tube_frames: usize,
    n_neighbors: usize,
) -> Result<Tensor> {
    let m = masked.len();
    if m == 0 || tube_frames == 0 || n_neighbors == 0 {
        return Err(Error::contract("chamfer over an empty masked set"));
    }
    let rows = m * tube_frames * n_neighbors;
    if g.shape(p_rec) != [rows, 3] {
        return Err(Error::Shape {
            op: "chamfer_loss",
            detail: format!("expected [{rows}, 3] predictions, got {:?}", g.shape(p_rec)),
        });
    }
    let gt_vals: Vec<T> = masked.ground_truth.iter().map(|&v| T::from_f64(v)).collect();
    let gt_all = g.constant(gt_vals, &[rows, 3])?;

    let mut fwd_parts = Vec::with_capacity(m * tube_frames);
    let mut bwd_parts = Vec::with_capacity(m * tube_frames);
    for tube in 0..m {
        for s in 0..tube_frames {
            let start = (tube * tube_frames + s) * n_neighbors;
            let idx: Vec<usize> = (start..start + n_neighbors).collect();
            let rec_slot = g.gather_rows(p_rec, &idx)?;
            let gt_slot = g.gather_rows(gt_all, &idx)?;
            fwd_parts.push(g.nearest_sqdist(rec_slot, gt_slot)?);
            bwd_parts.push(g.nearest_sqdist(gt_slot, rec_slot)?);
        }
    }
    // Equal slot sizes make the mean over all members equal the mean over
    // per-slot means.
    let fwd = g.concat(&fwd_parts, 0)?;
    let bwd = g.concat(&bwd_parts, 0)?;
    let fwd = g.mean(fwd)?;
    let bwd = g.mean(bwd)?;
    g.add(fwd, bwd)
}

/// Positionwise latent alignment: 1 − mean cosine between the projected
/// decoder latents and the gradient-stopped momentum grid.
pub fn latent_loss<T: Real>(
    g: &mut Graph<T>,
    binding: &Binding,
    heads: &ProjectionHeads,
    z_lat: Tensor,
    z_momentum: Tensor,
) -> Result<Tensor> {
    if g.shape(z_lat) != g.shape(z_momentum) {
        return Err(Error::contract(format!(
            "latent alignment needs matching grids, got {:?} vs {:?}",
            g.shape(z_lat),
            g.shape(z_momentum)
        )));
    }
    let projected = heads.latent.apply(g, binding, z_lat)?;
    let target = g.stop_gradient(z_momentum)?;
    let cos = g.cosine_rows(projected, target)?;
    let mean = g.mean(cos)?;
    let neg = g.neg(mean)?;
    g.add_scalar(neg, T::ONE)
}

/// Max over the spatial axis of a full [L′·N′, C] grid → [L′, C].
pub fn pool_frames<T: Real>(
    g: &mut Graph<T>,
    grid: Tensor,
    l_out: usize,
    n_out: usize,
) -> Result<Tensor> {
    let shape = g.shape(grid).to_vec();
    if shape.len() != 2 || shape[0] != l_out * n_out {
        return Err(Error::contract(format!(
            "pool_frames expects [{}·{}, C], got {shape:?}",
            l_out, n_out
        )));
    }
    let c = shape[1];
    let grouped = g.reshape(grid, &[l_out, n_out, c])?;
    g.maxpool_axis(grouped, 1)
}

/// Per-frame max over a visible (possibly ragged) token batch → [L′, C].
/// Every frame must keep at least one token.
pub fn pool_frames_ragged<T: Real>(g: &mut Graph<T>, batch: &EmbeddingBatch) -> Result<Tensor> {
    let c = g.shape(batch.tokens)[1];
    let mut per_frame: Vec<Vec<usize>> = vec![Vec::new(); batch.l_out];
    for (row, _) in batch.grid_indices.iter().enumerate() {
        per_frame[batch.frame_row(row)].push(row);
    }
    let mut pooled = Vec::with_capacity(batch.l_out);
    for (frame, rows) in per_frame.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::contract(format!(
                "frame {frame} has no visible tokens to pool"
            )));
        }
        let sub = g.gather_rows(batch.tokens, rows)?;
        let grouped = g.reshape(sub, &[1, rows.len(), c])?;
        pooled.push(g.maxpool_axis(grouped, 1)?);
    }
    g.concat(&pooled, 0)
}

/// One direction of the motion InfoNCE over a [B, L′] logit block whose
/// positives sit at `positive_cols[r]` for row r.
fn info_nce_rows<T: Real>(
    g: &mut Graph<T>,
    logits: Tensor,
    positive_cols: &[usize],
    mode: MotionDenominator,
) -> Result<Tensor> {
    let shape = g.shape(logits).to_vec();
    let (b, l) = (shape[0], shape[1]);
    let mut sel = vec![T::ZERO; b * l];
    for (r, &c) in positive_cols.iter().enumerate() {
        sel[r * l + c] = T::ONE;
    }
    let sel = g.constant(sel, &[b, l])?;
    match mode {
        MotionDenominator::Inclusive => {
            let probs = g.softmax(logits)?;
            let logp = g.ln(probs)?;
            let picked = g.mul(logp, sel)?;
            let total = g.sum(picked)?;
            let neg = g.neg(total)?;
            g.scale(neg, T::from_f64(1.0 / b as f64))
        }
        MotionDenominator::Exclusive => {
            let ex = g.exp(logits)?;
            let all = g.sum_axis(ex, 1)?; // [B]
            let pos_ex = g.mul(ex, sel)?;
            let pos_ex = g.sum_axis(pos_ex, 1)?;
            let denom = g.sub(all, pos_ex)?;
            let log_denom = g.ln(denom)?;
            let pos_logit = g.mul(logits, sel)?;
            let pos_logit = g.sum_axis(pos_logit, 1)?;
            let per_pair = g.sub(log_denom, pos_logit)?;
            g.mean(per_pair)
        }
    }
}

/// Bidirectional frame-motion alignment: forward rows align each online
/// frame feature with the previous momentum frame, backward rows with the
/// next; candidates are all frames of the same video; directions averaged.
pub fn motion_loss<T: Real>(
    g: &mut Graph<T>,
    binding: &Binding,
    heads: &ProjectionHeads,
    h_online: Tensor,
    h_momentum: Tensor,
    cfg: &LossConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let shape = g.shape(h_online).to_vec();
    if shape != g.shape(h_momentum) {
        return Err(Error::contract("motion alignment needs matching frame grids"));
    }
    let l = shape[0];
    if l < 2 {
        return Err(Error::contract(format!(
            "motion alignment needs at least two frames, got {l}"
        )));
    }
    let target = g.stop_gradient(h_momentum)?;
    let target = g.normalize_rows(target)?;
    let inv_tau = T::from_f64(1.0 / cfg.tau);
    let tt = g.transpose(target, &[1, 0])?;

    let direction = |g: &mut Graph<T>,
                     head: &MlpHeadIds,
                     rows: Vec<usize>,
                     cols: Vec<usize>|
     -> Result<Tensor> {
        let projected = head.apply(g, binding, h_online)?;
        let projected = g.normalize_rows(projected)?;
        let sims = g.matmul(projected, tt)?; // [L′, L′]
        let logits = g.scale(sims, inv_tau)?;
        let picked = g.gather_rows(logits, &rows)?;
        info_nce_rows(g, picked, &cols, cfg.motion_denominator)
    };

    // Forward: frame i aligns with i−1 (rows 1..L′). Backward: i with i+1.
    let fwd_rows: Vec<usize> = (1..l).collect();
    let fwd_cols: Vec<usize> = (0..l - 1).collect();
    let bwd_rows: Vec<usize> = (0..l - 1).collect();
    let bwd_cols: Vec<usize> = (1..l).collect();
    let fwd = direction(g, &heads.motion_fwd, fwd_rows, fwd_cols)?;
    let bwd = direction(g, &heads.motion_bwd, bwd_rows, bwd_cols)?;
    let sum = g.add(fwd, bwd)?;
    g.scale(sum, T::from_f64(0.5))
}

/// Max over all token rows, unit-normalized → [1, C].
pub fn pool_global<T: Real>(g: &mut Graph<T>, tokens: Tensor) -> Result<Tensor> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::contract("global pooling needs a non-empty [rows, C] tensor"));
    }
    let grouped = g.reshape(tokens, &[1, shape[0], shape[1]])?;
    let pooled = g.maxpool_axis(grouped, 1)?; // [1, C]
    g.normalize_rows(pooled)
}

/// Video-level InfoNCE: positive is the momentum global feature, negatives
/// are the queue contents; empty queue → 0 (lone positive).
pub fn global_loss<T: Real>(
    g: &mut Graph<T>,
    binding: &Binding,
    heads: &ProjectionHeads,
    q_online: Tensor,
    q_momentum: Tensor,
    queue: &NegativeQueue<T>,
    cfg: &LossConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let c = g.shape(q_online)[1];
    if queue.width() != c {
        return Err(Error::contract("queue width does not match feature width"));
    }
    let projected = heads.global.apply(g, binding, q_online)?;
    let projected = g.normalize_rows(projected)?;
    let positive = g.stop_gradient(q_momentum)?;
    let candidates = if queue.is_empty() {
        positive
    } else {
        let negs = g.constant(queue.flat(), &[queue.len(), c])?;
        g.concat(&[positive, negs], 0)?
    };
    let ct = g.transpose(candidates, &[1, 0])?;
    let sims = g.matmul(projected, ct)?; // [1, K+1]
    let logits = g.scale(sims, T::from_f64(1.0 / cfg.tau))?;
    info_nce_rows(g, logits, &[0], MotionDenominator::Inclusive)
}

/// Unweighted sum of the enabled objectives plus a scalar report.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    geo: Option<Tensor>,
    lat: Option<Tensor>,
    motion: Option<Tensor>,
    global: Option<Tensor>,
) -> Result<(Tensor, LossReport)> {
    let mut report = LossReport::default();
    let mut acc: Option<Tensor> = None;
    let mut take = |g: &mut Graph<T>, t: Option<Tensor>, slot: &mut f64| -> Result<()> {
        if let Some(t) = t {
            *slot = g.item(t)?.to_f64();
            acc = Some(match acc {
                None => t,
                Some(a) => g.add(a, t)?,
            });
        }
        Ok(())
    };
    take(g, geo, &mut report.geo)?;
    take(g, lat, &mut report.lat)?;
    take(g, motion, &mut report.motion)?;
    take(g, global, &mut report.global)?;
    let total = acc.ok_or_else(|| Error::contract("no objectives enabled"))?;
    report.total = g.item(total)?.to_f64();
    Ok((total, report))
}

/// Mean absolute positionwise cosine between decoded geometry features and
/// the latent grid restricted to the same masked positions. Diagnostic only.
pub fn disentanglement_probe<T: Real>(
    g: &Graph<T>,
    z_geo: Tensor,
    z_lat: Tensor,
    masked_indices: &[usize],
) -> Result<f64> {
    let gs = g.shape(z_geo).to_vec();
    let ls = g.shape(z_lat).to_vec();
    if gs.len() != 2 || ls.len() != 2 || gs[1] != ls[1] || gs[0] != masked_indices.len() {
        return Err(Error::contract("probe needs [m, C] geometry rows matching the index list"));
    }
    let c = gs[1];
    let geo = g.value(z_geo);
    let lat = g.value(z_lat);
    let mut acc = 0.0;
    for (r, &idx) in masked_indices.iter().enumerate() {
        let a = &geo[r * c..(r + 1) * c];
        let b = &lat[idx * c..(idx + 1) * c];
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..c {
            let (x, y) = (a[i].to_f64(), b[i].to_f64());
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        acc += (dot / (na.sqrt() * nb.sqrt()).max(1e-8)).abs();
    }
    Ok(acc / masked_indices.len() as f64)
}
