//! Training sharded over cooperating workers.
//!
//! Each worker owns a contiguous slice of Gaussian rows (parameters plus
//! optimizer state) and a round-robin set of image tiles. Per iteration
//! owners project their rows, route splats to the tile owners, tile owners
//! composite and differentiate, and the screen-space gradients travel back
//! to the owners in one fused exchange. Every floating-point sum happens in
//! the same order as in [`crate::training::train_single`], so the result is
//! bitwise identical for any worker count.

mod exchange;
mod partition;
mod runtime;

pub use exchange::{
    merge_routed, reduce_for_owner, reduce_gradients_fused, route_splats, sharded_backward, GradMessage, ShardedGrads,
};
pub use partition::{
    estimate_min_workers, partition_gaussians, partition_pixels, rebalance, Migration, PartitionStrategy,
    PixelPartition, ShardMap,
};
pub use runtime::{train_distributed, DistributedOptions, DistributedRun, PhaseTrace, PHASES, TRACE_HEADER};
