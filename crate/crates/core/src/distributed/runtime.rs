use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use crossbeam_channel::{unbounded, Receiver, Sender};
use rayon::prelude::*;

use super::exchange::{backward_messages, composite_worker, merge_routed, reduce_for_owner, route_splats, GradMessage};
use super::partition::{partition_gaussians, partition_pixels, rebalance, Migration, PixelPartition, ShardMap};
use crate::gaussian_model::GaussianCloud;
use crate::image::Image;
use crate::rasterizer::{project_backward, project_indexed, CameraParams, ProjectedSplat, TileRender, TILE_SIZE};
use crate::training::{
    adam_step, apply_plan, cap_growth, combine_loss, eval_record, loss_grad_region, row_fate, tile_loss_partials,
    AdamState, DensifyPlan, DensifyStats, LossPartials, RowFate, TrainConfig, TrainReport, TrainingData, ViewSchedule,
    LOSS_HALO,
};
use crate::{Error, Result};

pub const PHASES: [&str; 6] = ["project", "route", "composite", "backward", "reduce", "step"];
pub const TRACE_HEADER: &str = "iteration,project,route,composite,backward,reduce,step";

type Rect = (usize, usize, usize, usize);

#[derive(Debug, Clone, Default)]
pub struct DistributedOptions {
    pub workers: usize,
    /// Fault injection for tests: `(worker, iteration)` at which that worker
    /// reports an error.
    pub fail_at: Option<(usize, u32)>,
}

impl DistributedOptions {
    pub fn new(workers: usize) -> Self {
        Self { workers, fail_at: None }
    }
}

/// Slowest worker's time per phase, per iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseTrace {
    pub rows: Vec<(u32, [f64; 6])>,
}

impl PhaseTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for (it, t) in &self.rows {
            let _ = writeln!(s, "{it},{},{},{},{},{},{}", t[0], t[1], t[2], t[3], t[4], t[5]);
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Summed time per phase.
    pub fn totals(&self) -> [f64; 6] {
        let mut t = [0.0; 6];
        for (_, r) in &self.rows {
            for (a, b) in t.iter_mut().zip(r) {
                *a += b;
            }
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct DistributedRun {
    pub cloud: GaussianCloud<f32>,
    pub report: TrainReport,
    pub trace: PhaseTrace,
    /// Largest number of parameter rows each worker held at an iteration
    /// boundary.
    pub max_resident_rows: Vec<usize>,
    /// Gradient messages sent per iteration, all workers together.
    pub grad_messages: Vec<usize>,
    pub migrations: usize,
}

#[allow(clippy::large_enum_variant)]
enum Msg {
    Splats {
        it: u32,
        splats: Vec<ProjectedSplat<f32>>,
    },
    Halo {
        it: u32,
        blocks: Vec<(Rect, Vec<[f32; 3]>)>,
    },
    Grads {
        it: u32,
        msg: GradMessage<f32>,
    },
    Loss {
        it: u32,
        partials: Vec<(usize, LossPartials)>,
    },
    Done {
        from: usize,
        it: u32,
        times: [f64; 6],
        rows: usize,
        sent: usize,
    },
    Fates {
        fates: Vec<(usize, RowFate, f64)>,
    },
    Plan(Arc<DensifyPlan>),
    Rebalance(Arc<ShardMap>, Arc<Vec<Migration>>),
    Migrate {
        rows: Vec<usize>,
        cloud: GaussianCloud<f32>,
        state: AdamState<f32>,
        stats: DensifyStats,
    },
    Shard {
        from: usize,
        rows: Vec<usize>,
        cloud: GaussianCloud<f32>,
    },
    Resume,
    Abort {
        from: Option<usize>,
        reason: String,
    },
}

/// Inbox that sets aside messages belonging to a later phase.
struct Mailbox {
    rx: Receiver<Msg>,
    stash: VecDeque<Msg>,
}

impl Mailbox {
    fn take(&mut self, want: impl Fn(&Msg) -> bool) -> Result<Msg> {
        if let Some(k) = self.stash.iter().position(&want) {
            return Ok(self.stash.remove(k).expect("position is valid"));
        }
        loop {
            let m = self
                .rx
                .recv()
                .map_err(|_| Error::Protocol("all senders disconnected".into()))?;
            if let Msg::Abort { from, reason } = m {
                return Err(match from {
                    Some(worker) => Error::WorkerFailed { worker, reason },
                    None => Error::Protocol(format!("run aborted: {reason}")),
                });
            }
            if want(&m) {
                return Ok(m);
            }
            self.stash.push_back(m);
        }
    }
}

/// Barrier that can be torn down so a failed worker does not hang the rest.
struct PhaseBarrier {
    n: usize,
    state: Mutex<(usize, u64, bool)>,
    cv: Condvar,
}

impl PhaseBarrier {
    fn new(n: usize) -> Self {
        Self {
            n,
            state: Mutex::new((0, 0, false)),
            cv: Condvar::new(),
        }
    }

    fn wait(&self) -> Result<()> {
        let aborted = || Error::Protocol("barrier aborted".into());
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if s.2 {
            return Err(aborted());
        }
        let gen = s.1;
        s.0 += 1;
        if s.0 == self.n {
            s.0 = 0;
            s.1 += 1;
            self.cv.notify_all();
            return Ok(());
        }
        while s.1 == gen && !s.2 {
            s = self.cv.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        if s.1 == gen {
            Err(aborted())
        } else {
            Ok(())
        }
    }

    fn abort(&self) {
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        s.2 = true;
        self.cv.notify_all();
    }
}

/// Read-only context shared by all threads.
struct Shared<'a> {
    data: &'a TrainingData,
    cfg: &'a TrainConfig,
    part: PixelPartition,
    /// `halo[s]`: pixel blocks worker `s` sends, per destination.
    halo: Vec<Vec<(usize, Vec<Rect>)>>,
    /// Number of workers sending halo blocks to each worker.
    halo_sources: Vec<usize>,
    extent: f64,
    resolution: u32,
    background: [f32; 3],
    barrier: PhaseBarrier,
    fail_at: Option<(usize, u32)>,
}

fn intersect(a: Rect, b: Rect) -> Option<Rect> {
    let r = (a.0.max(b.0), a.1.max(b.1), a.2.min(b.2), a.3.min(b.3));
    (r.0 < r.2 && r.1 < r.3).then_some(r)
}

fn grow(r: Rect, by: usize, w: usize, h: usize) -> Rect {
    (
        r.0.saturating_sub(by),
        r.1.saturating_sub(by),
        (r.2 + by).min(w),
        (r.3 + by).min(h),
    )
}

/// For every source worker, the parts of its tiles that other workers read
/// within their loss halo.
fn halo_plan(part: &PixelPartition) -> Vec<Vec<(usize, Vec<Rect>)>> {
    let g = part.grid;
    let reach = LOSS_HALO.div_ceil(g.tile_size) as isize;
    let mut plan = vec![Vec::new(); part.workers];
    for (src, out) in plan.iter_mut().enumerate() {
        let mut per_dest: BTreeMap<usize, Vec<Rect>> = BTreeMap::new();
        for t in part.tiles_of(src) {
            let rect = g.tile_rect(t);
            let (tx, ty) = ((t % g.tiles_x) as isize, (t / g.tiles_x) as isize);
            let mut need: BTreeMap<usize, Rect> = BTreeMap::new();
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (ux, uy) = (tx + dx, ty + dy);
                    if ux < 0 || uy < 0 || ux >= g.tiles_x as isize || uy >= g.tiles_y as isize {
                        continue;
                    }
                    let u = uy as usize * g.tiles_x + ux as usize;
                    let d = part.owner(u);
                    if d == src {
                        continue;
                    }
                    if let Some(r) = intersect(rect, grow(g.tile_rect(u), LOSS_HALO, g.width, g.height)) {
                        need.entry(d)
                            .and_modify(|b| *b = (b.0.min(r.0), b.1.min(r.1), b.2.max(r.2), b.3.max(r.3)))
                            .or_insert(r);
                    }
                }
            }
            for (d, r) in need {
                per_dest.entry(d).or_default().push(r);
            }
        }
        *out = per_dest.into_iter().collect();
    }
    plan
}

struct Worker<'a> {
    id: usize,
    ctx: &'a Shared<'a>,
    peers: Vec<Sender<Msg>>,
    coord: Sender<Msg>,
    mail: Mailbox,
    map: Arc<ShardMap>,
    rows: Vec<usize>,
    cloud: GaussianCloud<f32>,
    state: AdamState<f32>,
    stats: DensifyStats,
    tiles: Vec<usize>,
}

impl Worker<'_> {
    fn send(&self, to: usize, m: Msg) -> Result<()> {
        self.peers[to]
            .send(m)
            .map_err(|_| Error::Protocol(format!("worker {to} hung up")))
    }

    fn to_coord(&self, m: Msg) -> Result<()> {
        self.coord
            .send(m)
            .map_err(|_| Error::Protocol("coordinator hung up".into()))
    }

    fn run(&mut self) -> Result<()> {
        let cfg = self.ctx.cfg;
        let mut schedule = ViewSchedule::new(cfg.seed, self.ctx.data.len());
        for it in 0..cfg.iterations {
            if self.ctx.fail_at == Some((self.id, it)) {
                return Err(Error::Protocol(format!("injected failure at iteration {it}")));
            }
            let view = schedule.view(it);
            self.iterate(it, view)?;
            let step = it + 1;
            if cfg.densify.due(step, cfg.iterations) {
                self.densify(step)?;
            }
            if cfg.eval_due(step) {
                self.to_coord(Msg::Shard {
                    from: self.id,
                    rows: self.rows.clone(),
                    cloud: self.cloud.clone(),
                })?;
                self.mail.take(|m| matches!(m, Msg::Resume))?;
            }
        }
        Ok(())
    }

    fn iterate(&mut self, it: u32, view: usize) -> Result<()> {
        let ctx = self.ctx;
        let cfg = ctx.cfg;
        let w = self.peers.len();
        let grid = ctx.part.grid;
        let cam = &ctx.data.cameras[view];
        let target = &ctx.data.targets[view];
        let mut times = [0.0; 6];
        let mut clock = Instant::now();
        let mut lap = |times: &mut [f64; 6], k: usize| {
            times[k] = clock.elapsed().as_secs_f64();
            clock = Instant::now();
        };

        let splats = project_indexed(&self.cloud, Some(&self.rows), cam, &grid);
        lap(&mut times, 0);

        for (d, list) in route_splats(&splats, &ctx.part).into_iter().enumerate() {
            self.send(d, Msg::Splats { it, splats: list })?;
        }
        ctx.barrier.wait()?;
        let mut lists = Vec::with_capacity(w);
        for _ in 0..w {
            if let Msg::Splats { splats, .. } =
                self.mail.take(|m| matches!(m, Msg::Splats { it: i, .. } if *i == it))?
            {
                lists.push(splats);
            }
        }
        let splats = merge_routed(lists);
        lap(&mut times, 1);

        let (bins, tiles) = composite_worker(self.id, &splats, &ctx.part, ctx.background, cfg.parallel);
        let mut canvas = Image::filled(grid.width, grid.height, [f32::NAN; 3]);
        for tr in &tiles {
            paint(&mut canvas, grid.tile_rect(tr.tile_id), &tr.color);
        }
        for (d, rects) in &ctx.halo[self.id] {
            let blocks = rects.iter().map(|&r| (r, cut(&canvas, r))).collect();
            self.send(*d, Msg::Halo { it, blocks })?;
        }
        ctx.barrier.wait()?;
        for _ in 0..ctx.halo_sources[self.id] {
            if let Msg::Halo { blocks, .. } = self.mail.take(|m| matches!(m, Msg::Halo { it: i, .. } if *i == it))? {
                for (r, px) in blocks {
                    paint(&mut canvas, r, &px);
                }
            }
        }
        lap(&mut times, 2);

        let lambda = cfg.lambda_dssim;
        let partials = self
            .tiles
            .iter()
            .map(|&t| (t, tile_loss_partials(&canvas, target, &grid, t)))
            .collect();
        self.to_coord(Msg::Loss { it, partials })?;
        let dl = tile_grads(&tiles, &canvas, target, &ctx.part, lambda, cfg.parallel);
        let lookup = |t: usize, x: usize, y: usize| {
            let (r, g) = &dl[t];
            g[(y - r.1) * (r.2 - r.0) + (x - r.0)]
        };
        let out = backward_messages(
            self.id,
            &splats,
            &bins,
            &tiles,
            &ctx.part,
            &self.map,
            lookup,
            ctx.background,
            cfg.parallel,
        );
        let sent = out.len();
        for msg in out {
            self.send(msg.to, Msg::Grads { it, msg })?;
        }
        ctx.barrier.wait()?;
        lap(&mut times, 3);

        let mut inbound = Vec::with_capacity(w);
        for _ in 0..w {
            if let Msg::Grads { msg, .. } = self.mail.take(|m| matches!(m, Msg::Grads { it: i, .. } if *i == it))? {
                inbound.push(msg);
            }
        }
        let g2d = reduce_for_owner(self.id, &inbound.iter().collect::<Vec<_>>(), &self.map)?;
        lap(&mut times, 4);

        let params = CameraParams::new(cam);
        let mut grads = self.cloud.zeros_like();
        for (r, g) in g2d.iter().enumerate() {
            if g.touched > 0 {
                project_backward(&self.cloud, r, &params, g, &mut grads, r);
                self.stats.record(r, g, grid.width, grid.height);
            }
        }
        let rates = cfg.lr.at(it, cfg.iterations, ctx.extent);
        adam_step(&mut self.cloud, &grads, &mut self.state, it as u64 + 1, &rates)?;
        lap(&mut times, 5);

        self.to_coord(Msg::Done {
            from: self.id,
            it,
            times,
            rows: self.cloud.len(),
            sent,
        })
    }

    fn densify(&mut self, step: u32) -> Result<()> {
        let cfg = self.ctx.cfg;
        let th = cfg.densify.thresholds(self.ctx.resolution, self.ctx.extent);
        let fates = self
            .rows
            .iter()
            .enumerate()
            .map(|(r, &g)| (g, row_fate(&self.cloud, r, &self.stats, &th), self.stats.score(r)))
            .collect();
        self.to_coord(Msg::Fates { fates })?;
        let Msg::Plan(plan) = self.mail.take(|m| matches!(m, Msg::Plan(_)))? else {
            unreachable!()
        };
        let (cloud, state, rows) = apply_plan(&self.cloud, &self.state, &self.rows, &plan, cfg.seed, step);
        self.stats = DensifyStats::new(cloud.len());
        (self.cloud, self.state, self.rows) = (cloud, state, rows);

        let Msg::Rebalance(map, moves) = self.mail.take(|m| matches!(m, Msg::Rebalance(..)))? else {
            unreachable!()
        };
        let mut leaving: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut senders = std::collections::BTreeSet::new();
        for m in moves.iter() {
            if m.from == self.id {
                leaving.entry(m.to).or_default().push(m.index);
            }
            if m.to == self.id {
                senders.insert(m.from);
            }
        }
        let local: BTreeMap<usize, usize> = self.rows.iter().enumerate().map(|(r, &g)| (g, r)).collect();
        let mut gone = vec![false; self.rows.len()];
        for (to, idx) in &leaving {
            let mut lr = Vec::with_capacity(idx.len());
            for g in idx {
                let r = *local.get(g).ok_or_else(|| {
                    Error::Protocol(format!("worker {} asked to move row {g} it does not hold", self.id))
                })?;
                gone[r] = true;
                lr.push(r);
            }
            self.send(
                *to,
                Msg::Migrate {
                    rows: idx.clone(),
                    cloud: self.cloud.gather(&lr),
                    state: self.state.gather(&lr),
                    stats: self.stats.gather(&lr),
                },
            )?;
        }
        let keep: Vec<usize> = (0..self.rows.len()).filter(|&r| !gone[r]).collect();
        let mut rows: Vec<usize> = keep.iter().map(|&r| self.rows[r]).collect();
        let mut cloud = self.cloud.gather(&keep);
        let mut state = self.state.gather(&keep);
        let mut stats = self.stats.gather(&keep);
        for _ in 0..senders.len() {
            if let Msg::Migrate {
                rows: r,
                cloud: c,
                state: s,
                stats: st,
            } = self.mail.take(|m| matches!(m, Msg::Migrate { .. }))?
            {
                for k in 0..r.len() {
                    rows.push(r[k]);
                    cloud.push_row_from(&c, k);
                    state.push_row_from(&s, k);
                    stats.push(st.grad_sum[k], st.count[k]);
                }
            }
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_unstable_by_key(|&k| rows[k]);
        self.rows = order.iter().map(|&k| rows[k]).collect();
        self.cloud = cloud.gather(&order);
        self.state = state.gather(&order);
        self.stats = stats.gather(&order);
        if self.rows != map.shard(self.id) {
            return Err(Error::Protocol(format!(
                "worker {} holds rows that disagree with the shard map",
                self.id
            )));
        }
        self.map = map;
        self.ctx.barrier.wait()
    }
}

fn paint(img: &mut Image<f32>, r: Rect, px: &[[f32; 3]]) {
    let w = r.2 - r.0;
    for (l, c) in px.iter().enumerate() {
        img.set_pixel(r.0 + l % w, r.1 + l / w, *c);
    }
}

fn cut(img: &Image<f32>, r: Rect) -> Vec<[f32; 3]> {
    (r.1..r.3)
        .flat_map(|y| (r.0..r.2).map(move |x| img.pixel(x, y)))
        .collect()
}

fn tile_grads(
    tiles: &[TileRender<f32>],
    canvas: &Image<f32>,
    target: &Image<f32>,
    part: &PixelPartition,
    lambda: f64,
    parallel: bool,
) -> Vec<(Rect, Vec<[f32; 3]>)> {
    let one = |tr: &TileRender<f32>| {
        let r = part.grid.tile_rect(tr.tile_id);
        (tr.tile_id, r, loss_grad_region(canvas, target, r, lambda))
    };
    let computed: Vec<_> = if parallel {
        tiles.par_iter().map(one).collect()
    } else {
        tiles.iter().map(one).collect()
    };
    // indexed by tile id; other workers' tiles stay empty
    let mut out = vec![((0, 0, 0, 0), Vec::new()); part.grid.tile_count()];
    for (t, r, g) in computed {
        out[t] = (r, g);
    }
    out
}

/// Tears the run down when a worker fails or panics, so nobody waits forever.
struct AbortGuard<'a> {
    id: usize,
    shared: &'a Shared<'a>,
    everyone: Vec<Sender<Msg>>,
    armed: bool,
}

impl AbortGuard<'_> {
    fn fire(&mut self, reason: String) {
        self.armed = false;
        self.shared.barrier.abort();
        for s in &self.everyone {
            let _ = s.send(Msg::Abort {
                from: Some(self.id),
                reason: reason.clone(),
            });
        }
    }
}

impl Drop for AbortGuard<'_> {
    fn drop(&mut self) {
        if self.armed && std::thread::panicking() {
            self.fire("panicked".into());
        }
    }
}

struct Coordinator<'a> {
    ctx: &'a Shared<'a>,
    workers: usize,
    mail: Mailbox,
    peers: Vec<Sender<Msg>>,
    map: ShardMap,
}

impl Coordinator<'_> {
    fn broadcast(&self, make: impl Fn() -> Msg) -> Result<()> {
        for p in &self.peers {
            p.send(make()).map_err(|_| Error::Protocol("a worker hung up".into()))?;
        }
        Ok(())
    }

    fn run(&mut self, init: &GaussianCloud<f32>) -> Result<DistributedRun> {
        let ctx = self.ctx;
        let cfg = ctx.cfg;
        let grid = ctx.part.grid;
        let w = self.workers;
        let mut report = TrainReport::new(w, ctx.resolution);
        report.records.push(eval_record(init, ctx.data, cfg, 0, 0.0)?);
        let mut trace = PhaseTrace::default();
        let mut max_rows = self.map.sizes();
        let mut grad_messages = Vec::new();
        let mut migrations = 0;
        let mut cloud = init.clone();
        let mut wall = 0.0;
        let mut clock = Instant::now();

        for it in 0..cfg.iterations {
            let step = it + 1;
            let mut partials = vec![LossPartials::default(); grid.tile_count()];
            for _ in 0..w {
                if let Msg::Loss { partials: p, .. } =
                    self.mail.take(|m| matches!(m, Msg::Loss { it: i, .. } if *i == it))?
                {
                    for (t, lp) in p {
                        partials[t] = lp;
                    }
                }
            }
            report
                .losses
                .push(combine_loss(&partials, grid.width, grid.height, cfg.lambda_dssim));

            let mut slowest = [0.0f64; 6];
            let mut sent_total = 0;
            for _ in 0..w {
                if let Msg::Done {
                    from,
                    times,
                    rows,
                    sent,
                    ..
                } = self.mail.take(|m| matches!(m, Msg::Done { it: i, .. } if *i == it))?
                {
                    for (a, b) in slowest.iter_mut().zip(times) {
                        *a = a.max(b);
                    }
                    max_rows[from] = max_rows[from].max(rows);
                    sent_total += sent;
                }
            }
            trace.rows.push((it, slowest));
            grad_messages.push(sent_total);

            if cfg.densify.due(step, cfg.iterations) {
                let mut fates = vec![None; self.map.len()];
                let mut scores = vec![0.0; self.map.len()];
                for _ in 0..w {
                    if let Msg::Fates { fates: f } = self.mail.take(|m| matches!(m, Msg::Fates { .. }))? {
                        for (g, fate, score) in f {
                            fates[g] = Some(fate);
                            scores[g] = score;
                        }
                    }
                }
                let mut fates: Vec<RowFate> = fates
                    .into_iter()
                    .enumerate()
                    .map(|(g, f)| f.ok_or_else(|| Error::Protocol(format!("no fate reported for row {g}"))))
                    .collect::<Result<_>>()?;
                cap_growth(&mut fates, &scores, cfg.densify.max_gaussians);
                let plan = Arc::new(DensifyPlan::from_fates(fates));
                self.broadcast(|| Msg::Plan(plan.clone()))?;
                let mut shards = vec![Vec::new(); w];
                for (g, n) in plan.new_index.iter().enumerate() {
                    if let Some(n) = n {
                        shards[self.map.owner(g)].push(*n);
                    }
                }
                for c in &plan.children {
                    shards[self.map.owner(c.parent)].push(c.index);
                }
                let grown = ShardMap::from_shards(plan.new_len, shards)?;
                let (moves, map) = rebalance(&grown)?;
                migrations += moves.len();
                let (map_a, moves) = (Arc::new(map.clone()), Arc::new(moves));
                self.broadcast(|| Msg::Rebalance(map_a.clone(), moves.clone()))?;
                self.map = map;
            }

            if cfg.eval_due(step) {
                let mut parts: Vec<Option<(Vec<usize>, GaussianCloud<f32>)>> = vec![None; w];
                for _ in 0..w {
                    if let Msg::Shard { from, rows, cloud } = self.mail.take(|m| matches!(m, Msg::Shard { .. }))? {
                        parts[from] = Some((rows, cloud));
                    }
                }
                wall += clock.elapsed().as_secs_f64();
                cloud = assemble(parts, &self.map)?;
                report.records.push(eval_record(&cloud, ctx.data, cfg, step, wall)?);
                clock = Instant::now();
                self.broadcast(|| Msg::Resume)?;
            }
        }
        Ok(DistributedRun {
            cloud,
            report,
            trace,
            max_resident_rows: max_rows,
            grad_messages,
            migrations,
        })
    }
}

fn assemble(parts: Vec<Option<(Vec<usize>, GaussianCloud<f32>)>>, map: &ShardMap) -> Result<GaussianCloud<f32>> {
    let parts: Vec<(Vec<usize>, GaussianCloud<f32>)> = parts
        .into_iter()
        .map(|p| p.ok_or_else(|| Error::Protocol("missing shard at gather".into())))
        .collect::<Result<_>>()?;
    let degree = parts.first().map_or(0, |p| p.1.degree());
    let mut out = GaussianCloud::empty(degree);
    for i in 0..map.len() {
        let o = map.owner(i);
        let r = map.local_index(i);
        if parts[o].0.get(r) != Some(&i) {
            return Err(Error::Protocol(format!("worker {o} did not return row {i}")));
        }
        out.push_row_from(&parts[o].1, r);
    }
    Ok(out)
}

/// Trains on `opts.workers` threads that exchange only messages. Produces
/// the same checkpoint and trajectory as the single-worker loop.
pub fn train_distributed(
    init: &GaussianCloud<f32>,
    data: &TrainingData,
    cfg: &TrainConfig,
    opts: &DistributedOptions,
) -> Result<DistributedRun> {
    cfg.validate()?;
    let w = opts.workers;
    if w < 1 {
        return Err(Error::InvalidArgument("worker count must be at least 1".into()));
    }
    let resolution = data.resolution(cfg.resolution)?;
    let (width, height) = (data.cameras[0].width, data.cameras[0].height);
    if data.cameras.iter().any(|c| c.width != width || c.height != height) {
        return Err(Error::Dimension("distributed training needs views of one size".into()));
    }
    let render = cfg.render_options();
    if render.tile_size != TILE_SIZE || LOSS_HALO > TILE_SIZE {
        return Err(Error::InvalidArgument(format!("tiles must be {TILE_SIZE} pixels")));
    }
    let part = partition_pixels(width as usize, height as usize, TILE_SIZE, w)?;
    let halo = halo_plan(&part);
    let mut halo_sources = vec![0; w];
    for plan in &halo {
        for (d, _) in plan {
            halo_sources[*d] += 1;
        }
    }
    let shared = Shared {
        data,
        cfg,
        halo,
        halo_sources,
        extent: init.extent(),
        resolution,
        background: render.background_t::<f32>(),
        barrier: PhaseBarrier::new(w),
        fail_at: opts.fail_at,
        part,
    };
    let map = partition_gaussians(init.len(), w, Default::default())?;

    let (coord_tx, coord_rx) = unbounded();
    let (txs, rxs): (Vec<Sender<Msg>>, Vec<Receiver<Msg>>) = (0..w).map(|_| unbounded()).unzip();
    let mut everyone = txs.clone();
    everyone.push(coord_tx.clone());

    std::thread::scope(|scope| {
        let shared = &shared;
        let map = Arc::new(map.clone());
        let mut handles = Vec::with_capacity(w);
        for (id, rx) in rxs.into_iter().enumerate() {
            let rows = map.shard(id).to_vec();
            let cloud = init.gather(&rows);
            let mut worker = Worker {
                id,
                ctx: shared,
                peers: txs.clone(),
                coord: coord_tx.clone(),
                mail: Mailbox {
                    rx,
                    stash: VecDeque::new(),
                },
                map: map.clone(),
                state: AdamState::zeros_like(&cloud),
                stats: DensifyStats::new(cloud.len()),
                tiles: shared.part.tiles_of(id),
                rows,
                cloud,
            };
            let everyone = everyone.clone();
            handles.push(scope.spawn(move || {
                let mut guard = AbortGuard {
                    id,
                    shared,
                    everyone,
                    armed: true,
                };
                let r = worker.run();
                if let Err(e) = &r {
                    if !matches!(e, Error::WorkerFailed { .. }) && !e.to_string().contains("aborted") {
                        guard.fire(e.to_string());
                    }
                }
                guard.armed = false;
                r
            }));
        }

        let mut coord = Coordinator {
            ctx: shared,
            workers: w,
            mail: Mailbox {
                rx: coord_rx,
                stash: VecDeque::new(),
            },
            peers: txs.clone(),
            map: map.as_ref().clone(),
        };
        let result = coord.run(init);
        if let Err(e) = &result {
            shared.barrier.abort();
            for p in &txs {
                let _ = p.send(Msg::Abort {
                    from: None,
                    reason: e.to_string(),
                });
            }
        }
        let mut first_failure = None;
        for (id, h) in handles.into_iter().enumerate() {
            let failure = match h.join() {
                Ok(Ok(())) => None,
                Ok(Err(e)) => Some(e),
                Err(panic) => Some(Error::WorkerFailed {
                    worker: id,
                    reason: panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panicked".into()),
                }),
            };
            if first_failure.is_none() {
                first_failure = failure.map(|e| match e {
                    e @ Error::WorkerFailed { .. } => e,
                    e => Error::WorkerFailed {
                        worker: id,
                        reason: e.to_string(),
                    },
                });
            }
        }
        match (result, first_failure) {
            (Err(e @ Error::WorkerFailed { .. }), _) => Err(e),
            (_, Some(e)) => Err(e),
            (r, None) => r,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halo_plan_covers_every_neighbourhood() {
        for w in [1, 2, 3, 5] {
            let part = partition_pixels(70, 50, 16, w).unwrap();
            let plan = halo_plan(&part);
            let g = part.grid;
            for d in 0..w {
                let mut have = vec![false; g.width * g.height];
                for t in part.tiles_of(d) {
                    let r = g.tile_rect(t);
                    for y in r.1..r.3 {
                        for x in r.0..r.2 {
                            have[y * g.width + x] = true;
                        }
                    }
                }
                for (s, p) in plan.iter().enumerate() {
                    for (to, rects) in p {
                        assert_ne!(*to, s);
                        if *to == d {
                            for r in rects {
                                for y in r.1..r.3 {
                                    for x in r.0..r.2 {
                                        have[y * g.width + x] = true;
                                    }
                                }
                            }
                        }
                    }
                }
                for t in part.tiles_of(d) {
                    let r = grow(g.tile_rect(t), LOSS_HALO, g.width, g.height);
                    for y in r.1..r.3 {
                        for x in r.0..r.2 {
                            assert!(have[y * g.width + x], "W={w} worker {d} lacks ({x},{y})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn barrier_abort_releases_waiters() {
        let b = PhaseBarrier::new(2);
        std::thread::scope(|s| {
            let h = s.spawn(|| b.wait());
            std::thread::sleep(std::time::Duration::from_millis(20));
            b.abort();
            assert!(h.join().unwrap().is_err());
        });
    }
}
