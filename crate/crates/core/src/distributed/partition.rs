use crate::rasterizer::TileGrid;
use crate::{Error, Result};

/// Ownership of Gaussian rows by workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardMap {
    owner: Vec<usize>,
    /// Position of each row inside its owner's shard.
    local: Vec<usize>,
    shards: Vec<Vec<usize>>,
}

impl ShardMap {
    /// Builds a map from per-worker index lists, which must partition `0..n`.
    pub fn from_shards(n: usize, mut shards: Vec<Vec<usize>>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::InvalidArgument("need at least one worker".into()));
        }
        let mut owner = vec![usize::MAX; n];
        let mut local = vec![0; n];
        for (w, shard) in shards.iter_mut().enumerate() {
            shard.sort_unstable();
            for (r, &i) in shard.iter().enumerate() {
                if i >= n {
                    return Err(Error::Protocol(format!("row {i} out of range for {n} Gaussians")));
                }
                if owner[i] != usize::MAX {
                    return Err(Error::Protocol(format!(
                        "row {i} owned by workers {} and {w}",
                        owner[i]
                    )));
                }
                owner[i] = w;
                local[i] = r;
            }
        }
        if let Some(i) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::Protocol(format!("row {i} has no owner")));
        }
        Ok(Self { owner, local, shards })
    }

    pub fn worker_count(&self) -> usize {
        self.shards.len()
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn owner(&self, index: usize) -> usize {
        self.owner[index]
    }

    pub fn owners(&self) -> &[usize] {
        &self.owner
    }

    /// Row of `index` within its owner's shard.
    pub fn local_index(&self, index: usize) -> usize {
        self.local[index]
    }

    pub fn shard(&self, worker: usize) -> &[usize] {
        &self.shards[worker]
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionStrategy {
    /// Contiguous index ranges whose sizes differ by at most one.
    #[default]
    ContiguousBalanced,
}

pub fn partition_gaussians(n: usize, workers: usize, strategy: PartitionStrategy) -> Result<ShardMap> {
    if workers < 1 {
        return Err(Error::InvalidArgument("worker count must be at least 1".into()));
    }
    match strategy {
        PartitionStrategy::ContiguousBalanced => {
            let (base, extra) = (n / workers, n % workers);
            let mut start = 0;
            let shards = (0..workers)
                .map(|w| {
                    let len = base + usize::from(w < extra);
                    let s: Vec<usize> = (start..start + len).collect();
                    start += len;
                    s
                })
                .collect();
            ShardMap::from_shards(n, shards)
        }
    }
}

/// Round-robin assignment of image tiles to workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelPartition {
    pub grid: TileGrid,
    pub workers: usize,
    pub assignment: Vec<usize>,
}

impl PixelPartition {
    pub fn owner(&self, tile: usize) -> usize {
        self.assignment[tile]
    }

    /// Tiles of `worker` in ascending order.
    pub fn tiles_of(&self, worker: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&t| self.assignment[t] == worker)
            .collect()
    }
}

pub fn partition_pixels(width: usize, height: usize, tile_size: usize, workers: usize) -> Result<PixelPartition> {
    if workers < 1 {
        return Err(Error::InvalidArgument("worker count must be at least 1".into()));
    }
    if tile_size == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    let grid = TileGrid::new(width, height, tile_size);
    Ok(PixelPartition {
        grid,
        workers,
        assignment: (0..grid.tile_count()).map(|t| t % workers).collect(),
    })
}

/// One row moving between shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Migration {
    pub index: usize,
    pub from: usize,
    pub to: usize,
}

/// Moves rows from over-full to under-full shards until sizes differ by at
/// most one. Shards that must grow are filled in worker order from the
/// pooled surplus, lowest indices first; the extra rows of an uneven split
/// stay with the largest shards.
pub fn rebalance(map: &ShardMap) -> Result<(Vec<Migration>, ShardMap)> {
    let sizes = map.sizes();
    let (lo, hi) = (
        sizes.iter().copied().min().unwrap_or(0),
        sizes.iter().copied().max().unwrap_or(0),
    );
    if hi - lo <= 1 {
        return Ok((Vec::new(), map.clone()));
    }
    let w = sizes.len();
    let (base, extra) = (map.len() / w, map.len() % w);
    let mut by_size: Vec<usize> = (0..w).collect();
    by_size.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut target = vec![base; w];
    for &k in by_size.iter().take(extra) {
        target[k] += 1;
    }

    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (k, shard) in map.shards().iter().enumerate() {
        if sizes[k] > target[k] {
            pool.extend(shard[..sizes[k] - target[k]].iter().map(|&i| (i, k)));
        }
    }
    pool.sort_unstable();
    let mut moves = Vec::with_capacity(pool.len());
    let mut it = pool.into_iter();
    for k in 0..w {
        for _ in sizes[k]..target[k].max(sizes[k]) {
            let (index, from) = it.next().expect("surplus equals deficit");
            moves.push(Migration { index, from, to: k });
        }
    }
    let mut shards = map.shards().to_vec();
    for m in &moves {
        shards[m.from].retain(|&i| i != m.index);
        shards[m.to].push(m.index);
    }
    Ok((moves, ShardMap::from_shards(map.len(), shards)?))
}

/// Fewest workers holding `n_gaussians` at `per_worker_capacity` each.
pub fn estimate_min_workers(n_gaussians: u64, per_worker_capacity: i64) -> Result<u64> {
    if per_worker_capacity <= 0 {
        return Err(Error::InvalidArgument(format!(
            "per-worker capacity must be positive, got {per_worker_capacity}"
        )));
    }
    Ok(n_gaussians.div_ceil(per_worker_capacity as u64).max(1))
}
