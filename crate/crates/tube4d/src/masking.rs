//! Visible/masked tube partitions over the L′×N′ anchor grid: per-frame
//! masking at an exact ratio, grid-wide random masking, and spatially
//! clustered block masking.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Graph, Real};
use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::geometry::TubeBatch;

/// How masked positions are chosen over the anchor grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Every frame row keeps exactly round((1−ratio)·N′) visible anchors.
    Frame,
    /// round((1−ratio)·L′·N′) visible anchors anywhere on the grid.
    Video,
    /// Per-frame quota like `Frame`, but masked anchors form one contiguous
    /// cluster grown from a random seed anchor by spatial proximity.
    Block,
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(MaskStrategy::Frame),
            "video" => Ok(MaskStrategy::Video),
            "block" => Ok(MaskStrategy::Block),
            other => Err(Error::Config(format!(
                "unknown mask strategy {other:?}; expected frame|video|block"
            ))),
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskStrategy::Frame => "frame",
            MaskStrategy::Video => "video",
            MaskStrategy::Block => "block",
        })
    }
}

/// A concrete visible/masked partition of the anchor grid.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub l_out: usize,
    pub n_out: usize,
    pub seed: u64,
    /// Row-major L′×N′: true = visible.
    pub visible: Vec<bool>,
}

impl MaskPlan {
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.visible.len()).filter(|&i| self.visible[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.visible.len()).filter(|&i| !self.visible[i]).collect()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Visible count of one frame row.
    pub fn visible_in_frame(&self, row: usize) -> usize {
        self.visible[row * self.n_out..(row + 1) * self.n_out]
            .iter()
            .filter(|&&v| v)
            .count()
    }
}

/// Round to nearest, ties away from zero — the rounding every quota uses.
fn round_count(x: f64) -> usize {
    x.round() as usize
}

/// Build a mask plan. Deterministic in `seed`. Block strategy needs the
/// anchor coordinates (`tube count` long, grid order) to grow spatial
/// clusters; the other strategies ignore them.
pub fn make_mask(
    l_out: usize,
    n_out: usize,
    strategy: MaskStrategy,
    ratio: f64,
    seed: u64,
    anchors: Option<&[[f64; 4]]>,
) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::contract(format!(
            "mask ratio must lie in (0,1), got {ratio}"
        )));
    }
    if l_out == 0 || n_out == 0 {
        return Err(Error::contract("mask grid must be non-empty"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let total = l_out * n_out;
    let mut visible = vec![false; total];

    match strategy {
        MaskStrategy::Frame => {
            let v = round_count((1.0 - ratio) * n_out as f64);
            if v == 0 {
                return Err(Error::contract(format!(
                    "ratio {ratio} leaves zero visible anchors per frame of {n_out}"
                )));
            }
            if v == n_out {
                return Err(Error::contract(format!(
                    "ratio {ratio} masks nothing in frames of {n_out}"
                )));
            }
            for row in 0..l_out {
                for idx in sample(&mut rng, n_out, v) {
                    visible[row * n_out + idx] = true;
                }
            }
        }
        MaskStrategy::Video => {
            let v = round_count((1.0 - ratio) * total as f64).max(1);
            if v == total {
                return Err(Error::contract(format!(
                    "ratio {ratio} masks nothing on a {l_out}x{n_out} grid"
                )));
            }
            for idx in sample(&mut rng, total, v) {
                visible[idx] = true;
            }
        }
        MaskStrategy::Block => {
            let anchors = anchors.ok_or_else(|| {
                Error::contract("block masking needs anchor coordinates to cluster")
            })?;
            if anchors.len() != total {
                return Err(Error::contract(format!(
                    "anchor list length {} does not match grid {l_out}x{n_out}",
                    anchors.len()
                )));
            }
            let v = round_count((1.0 - ratio) * n_out as f64);
            if v == 0 {
                return Err(Error::contract(format!(
                    "ratio {ratio} leaves zero visible anchors per frame of {n_out}"
                )));
            }
            if v == n_out {
                return Err(Error::contract(format!(
                    "ratio {ratio} masks nothing in frames of {n_out}"
                )));
            }
            let quota = n_out - v; // masked per frame
            for row in 0..l_out {
                let base = row * n_out;
                let seed_slot = rng.random_range(0..n_out);
                let s = &anchors[base + seed_slot];
                // Seed plus its nearest anchors by spatial distance, exactly
                // `quota` masked; ties resolve to the lower slot.
                let mut order: Vec<(f64, usize)> = (0..n_out)
                    .map(|slot| {
                        let a = &anchors[base + slot];
                        let d2 = (a[0] - s[0]).powi(2)
                            + (a[1] - s[1]).powi(2)
                            + (a[2] - s[2]).powi(2);
                        (d2, slot)
                    })
                    .collect();
                order.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
                for slot in visible.iter_mut().skip(base).take(n_out) {
                    *slot = true;
                }
                for &(_, slot) in order.iter().take(quota) {
                    visible[base + slot] = false;
                }
            }
        }
    }

    Ok(MaskPlan {
        strategy,
        ratio,
        l_out,
        n_out,
        seed,
        visible,
    })
}

/// Masked half of a partition: grid positions, their anchor coordinates, and
/// the raw member coordinates reconstruction must reproduce.
#[derive(Debug, Clone)]
pub struct MaskedSet {
    pub grid_indices: Vec<usize>,
    pub anchors: Vec<[f64; 4]>,
    /// members·3 per masked tube, tube-major, same member order as the batch.
    pub ground_truth: Vec<f64>,
}

impl MaskedSet {
    pub fn len(&self) -> usize {
        self.grid_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid_indices.is_empty()
    }
}

/// Partition a full-grid embedding batch into the visible sub-batch and the
/// masked positions with their reconstruction targets.
pub fn split_embeddings<T: Real>(
    g: &mut Graph<T>,
    batch: &EmbeddingBatch,
    tubes: &TubeBatch,
    plan: &MaskPlan,
) -> Result<(EmbeddingBatch, MaskedSet)> {
    if plan.l_out != batch.l_out || plan.n_out != batch.n_out {
        return Err(Error::contract("mask plan shape does not match batch"));
    }
    let total = batch.l_out * batch.n_out;
    if batch.token_count() != total || batch.grid_indices.iter().enumerate().any(|(i, &v)| i != v) {
        return Err(Error::contract(
            "split_embeddings needs the full grid batch in row order",
        ));
    }
    if tubes.tube_count() != total {
        return Err(Error::contract("tube batch does not match mask grid"));
    }

    let vis = plan.visible_indices();
    let tokens = g.gather_rows(batch.tokens, &vis)?;
    let visible = EmbeddingBatch {
        tokens,
        l_out: batch.l_out,
        n_out: batch.n_out,
        grid_indices: vis.clone(),
        anchors: vis.iter().map(|&i| batch.anchors[i]).collect(),
    };

    let masked_idx = plan.masked_indices();
    let per_tube = tubes.members_per_tube() * 3;
    let mut gt = Vec::with_capacity(masked_idx.len() * per_tube);
    for &i in &masked_idx {
        gt.extend_from_slice(&tubes.ground_truth[i * per_tube..(i + 1) * per_tube]);
    }
    let masked = MaskedSet {
        anchors: masked_idx.iter().map(|&i| batch.anchors[i]).collect(),
        grid_indices: masked_idx,
        ground_truth: gt,
    };
    Ok((visible, masked))
}
