use rayon::prelude::*;

use super::partition::{PixelPartition, ShardMap};
use crate::camera::Camera;
use crate::gaussian_model::GaussianCloud;
use crate::image::Image;
use crate::rasterizer::{
    backward_tile, bin_splats, composite_tile, project_backward, project_indexed, sort_order, CameraParams,
    ProjectedSplat, RenderOptions, SplatGrad, TileRender,
};
use crate::{Error, Real, Result};

/// Splat lists per pixel-worker. A splat goes to every worker owning a tile
/// it overlaps; each list keeps global `(depth, gaussian_index)` order.
pub fn route_splats<T: Real>(splats: &[ProjectedSplat<T>], part: &PixelPartition) -> Vec<Vec<ProjectedSplat<T>>> {
    let mut out = vec![Vec::new(); part.workers];
    let mut seen = vec![usize::MAX; part.workers];
    for (n, k) in sort_order(splats).into_iter().enumerate() {
        let s = &splats[k];
        for tile in s.tile_span.tiles(&part.grid) {
            let w = part.owner(tile);
            if seen[w] != n {
                seen[w] = n;
                out[w].push(*s);
            }
        }
    }
    out
}

/// Merges lists received from several owners back into global order.
pub fn merge_routed<T: Real>(lists: impl IntoIterator<Item = Vec<ProjectedSplat<T>>>) -> Vec<ProjectedSplat<T>> {
    let all: Vec<ProjectedSplat<T>> = lists.into_iter().flatten().collect();
    sort_order(&all).into_iter().map(|k| all[k]).collect()
}

/// Screen-space gradients one pixel-worker sends to one owner.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMessage<T: Real> {
    pub from: usize,
    pub to: usize,
    /// `(tile_id, gaussian_index, gradient)`, tiles ascending.
    pub entries: Vec<(usize, usize, SplatGrad<T>)>,
}

impl<T: Real> GradMessage<T> {
    pub fn new(from: usize, to: usize) -> Self {
        Self {
            from,
            to,
            entries: Vec::new(),
        }
    }
}

/// Dense gradients of `owner`'s shard, in shard row order, from the messages
/// addressed to it. Entries are summed in ascending tile order regardless of
/// message arrival order, matching the single-worker accumulation.
pub fn reduce_for_owner<T: Real>(
    owner: usize,
    messages: &[&GradMessage<T>],
    map: &ShardMap,
) -> Result<Vec<SplatGrad<T>>> {
    let mut entries = Vec::new();
    for m in messages {
        if m.to != owner {
            return Err(Error::Protocol(format!(
                "message from worker {} for worker {} delivered to {owner}",
                m.from, m.to
            )));
        }
        for (tile, gi, g) in &m.entries {
            if *gi >= map.len() || map.owner(*gi) != owner {
                return Err(Error::Protocol(format!(
                    "worker {} sent gradient of Gaussian {gi} to worker {owner}, which does not own it",
                    m.from
                )));
            }
            entries.push((*tile, m.from, *gi, g));
        }
    }
    entries.sort_by_key(|e| (e.0, e.1));
    let mut out = vec![SplatGrad::default(); map.shard(owner).len()];
    for (_, _, gi, g) in entries {
        out[map.local_index(gi)].accumulate(g);
    }
    Ok(out)
}

/// Routes every message to its destination owner and reduces there. Returns
/// one dense gradient list per owner.
pub fn reduce_gradients_fused<T: Real>(messages: &[GradMessage<T>], map: &ShardMap) -> Result<Vec<Vec<SplatGrad<T>>>> {
    let w = map.worker_count();
    let mut inbox: Vec<Vec<&GradMessage<T>>> = vec![Vec::new(); w];
    for m in messages {
        inbox
            .get_mut(m.to)
            .ok_or_else(|| Error::Protocol(format!("message addressed to unknown worker {}", m.to)))?
            .push(m);
    }
    inbox
        .iter()
        .enumerate()
        .map(|(o, ms)| reduce_for_owner(o, ms, map))
        .collect()
}

/// Composites the tiles of `worker` and produces its outgoing gradient
/// messages, one per owner. `dl` yields the loss gradient of a pixel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_messages<T: Real>(
    worker: usize,
    splats: &[ProjectedSplat<T>],
    bins: &[Vec<u32>],
    tiles: &[TileRender<T>],
    part: &PixelPartition,
    map: &ShardMap,
    dl: impl Fn(usize, usize, usize) -> [T; 3] + Sync,
    background: [T; 3],
    parallel: bool,
) -> Vec<GradMessage<T>> {
    let run = |tr: &TileRender<T>| {
        let t = tr.tile_id;
        backward_tile(splats, &bins[t], &part.grid, tr, |x, y| dl(t, x, y), background)
    };
    let per_tile: Vec<_> = if parallel {
        tiles.par_iter().map(run).collect()
    } else {
        tiles.iter().map(run).collect()
    };
    let mut out: Vec<GradMessage<T>> = (0..map.worker_count()).map(|d| GradMessage::new(worker, d)).collect();
    for tg in per_tile {
        for (gi, g) in tg.entries {
            out[map.owner(gi)].entries.push((tg.tile_id, gi, g));
        }
    }
    out
}

/// Splats binned into the tiles of one pixel-worker and composited there.
pub(crate) fn composite_worker<T: Real>(
    worker: usize,
    splats: &[ProjectedSplat<T>],
    part: &PixelPartition,
    background: [T; 3],
    parallel: bool,
) -> (Vec<Vec<u32>>, Vec<TileRender<T>>) {
    let order: Vec<usize> = (0..splats.len()).collect();
    let bins = bin_splats(splats, &order, &part.grid, |t| part.owner(t) == worker);
    let mine = part.tiles_of(worker);
    let run = |&t: &usize| composite_tile(splats, &bins[t], &part.grid, t, background);
    let tiles = if parallel {
        mine.par_iter().map(run).collect()
    } else {
        mine.iter().map(run).collect()
    };
    (bins, tiles)
}

/// Result of [`sharded_backward`].
#[derive(Debug, Clone)]
pub struct ShardedGrads<T: Real> {
    pub image: Image<T>,
    /// Parameter gradients per owner, rows in shard order.
    pub owner_grads: Vec<GaussianCloud<T>>,
    pub messages: Vec<GradMessage<T>>,
}

impl<T: Real> ShardedGrads<T> {
    /// Owner gradients placed back at their global rows.
    pub fn concatenated(&self, map: &ShardMap) -> GaussianCloud<T> {
        let mut out = GaussianCloud::empty(self.owner_grads[0].degree());
        for i in 0..map.len() {
            out.push_row_from(&self.owner_grads[map.owner(i)], map.local_index(i));
        }
        out
    }
}

/// One forward/backward pass carried out shard by shard, without threads:
/// owners project their rows, splats are routed to pixel-workers, each
/// pixel-worker composites and differentiates its tiles, and the gradient
/// messages are reduced at the owners.
pub fn sharded_backward<T: Real>(
    cloud: &GaussianCloud<T>,
    cam: &Camera,
    dl_dimage: &Image<T>,
    map: &ShardMap,
    part: &PixelPartition,
    opts: &RenderOptions,
) -> Result<ShardedGrads<T>> {
    let grid = part.grid;
    if map.len() != cloud.len() || map.worker_count() != part.workers {
        return Err(Error::Dimension(
            "shard map does not match the cloud or pixel partition".into(),
        ));
    }
    if dl_dimage.width() != grid.width || dl_dimage.height() != grid.height {
        return Err(Error::Dimension("loss gradient does not match the partition".into()));
    }
    let w = map.worker_count();
    let bg = opts.background_t::<T>();
    let shards: Vec<GaussianCloud<T>> = (0..w).map(|o| cloud.gather(map.shard(o))).collect();
    let mut inbound: Vec<Vec<Vec<ProjectedSplat<T>>>> = vec![Vec::new(); w];
    for (o, shard) in shards.iter().enumerate() {
        let splats = project_indexed(shard, Some(map.shard(o)), cam, &grid);
        for (p, list) in route_splats(&splats, part).into_iter().enumerate() {
            inbound[p].push(list);
        }
    }

    let mut image = Image::new(grid.width, grid.height);
    let mut messages = Vec::new();
    for (p, lists) in inbound.into_iter().enumerate() {
        let splats = merge_routed(lists);
        let (bins, tiles) = composite_worker(p, &splats, part, bg, opts.parallel);
        for tr in &tiles {
            let (x0, y0, x1, _) = grid.tile_rect(tr.tile_id);
            for (l, c) in tr.color.iter().enumerate() {
                image.set_pixel(x0 + l % (x1 - x0), y0 + l / (x1 - x0), *c);
            }
        }
        let dl = |_, x, y| dl_dimage.pixel(x, y);
        messages.extend(backward_messages(
            p,
            &splats,
            &bins,
            &tiles,
            part,
            map,
            dl,
            bg,
            opts.parallel,
        ));
    }

    let params = CameraParams::new(cam);
    let reduced = reduce_gradients_fused(&messages, map)?;
    let owner_grads = shards
        .iter()
        .zip(&reduced)
        .map(|(shard, g2d)| {
            let mut grads = shard.zeros_like();
            for (r, g) in g2d.iter().enumerate() {
                if g.touched > 0 {
                    project_backward(shard, r, &params, g, &mut grads, r);
                }
            }
            grads
        })
        .collect();
    Ok(ShardedGrads {
        image,
        owner_grads,
        messages,
    })
}
