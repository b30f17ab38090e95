//! Demonstration generation: a grid planner over the safe set produces the
//! trajectories that train the diffusion policy.
//!
//! The planner is deliberately risk-blind beyond the hard safe/unsafe
//! threshold: demonstrations are "safe expert" behavior, and risk shaping at
//! inference time is the guidance modules' job. Training corpora exclude a
//! hazard class (pits by default) so that evaluation exercises the
//! out-of-distribution regime.

use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

use crate::diffusion::{ActionSequence, Context, Dataset, DiffusionError, CONTEXT_DIM};
use crate::geometry::{dist, sample_polyline, Pose, Vec2};
use crate::kv::KvFile;
use crate::risk::{build_risk_map, CostParams, RiskConfig, RiskError, RiskMap, SafeSet};
use crate::rng::{derive_seed, stream_rng};
use crate::terrain::{generate_terrain, RecipeFamily, TerrainError, TerrainRecipe};

use rand::Rng;

/// Default waypoint spacing along demonstrations, meters.
pub const WAYPOINT_SPACING: f64 = 0.2;
/// Default heading-change threshold that forces an extra waypoint, radians.
pub const ANGLE_THRESHOLD: f64 = 30.0 * std::f64::consts::PI / 180.0;

pub const DEMO_MAGIC: &str = "riskdiff-demo";
pub const DEMO_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ExpertError {
    #[error("start or goal lies in an unsafe cell")]
    UnsafeEndpoint,
    #[error("no safe path between start and goal")]
    NoPath,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset file: {0}")]
    Format(String),
}

/// Shortest 8-connected path through the safe set (`rho <= gamma`), returned
/// as a world-frame polyline from `start` to `goal`, smoothed by
/// redundant-vertex removal with a segment-level safety re-check.
///
/// Diagonal moves are allowed only when both adjacent orthogonal cells are
/// safe, so paths cannot cut corners through unsafe cells. Tie-breaking is
/// deterministic: cells settle in (cost, lexicographic index) order.
pub fn plan_path(
    map: &RiskMap,
    gamma: f64,
    start: Vec2,
    goal: Vec2,
) -> Result<Vec<Vec2>, ExpertError> {
    let spec = map.spec();
    let safe = map.safe_set_with(gamma);
    let start_cell = spec.cell_of(start).ok_or(ExpertError::UnsafeEndpoint)?;
    let goal_cell = spec.cell_of(goal).ok_or(ExpertError::UnsafeEndpoint)?;
    if !safe.is_cell_safe(start_cell.0, start_cell.1) || !safe.is_cell_safe(goal_cell.0, goal_cell.1)
    {
        return Err(ExpertError::UnsafeEndpoint);
    }
    if start_cell == goal_cell {
        return Ok(smooth_path(&safe, vec![start, goal]));
    }

    let cells = grid_search(&safe, start_cell, goal_cell).ok_or(ExpertError::NoPath)?;
    let mut polyline = Vec::with_capacity(cells.len() + 2);
    polyline.push(start);
    for &(ix, iy) in &cells {
        polyline.push(spec.cell_center(ix, iy));
    }
    polyline.push(goal);
    Ok(smooth_path(&safe, polyline))
}

/// Unit-cost Dijkstra over safe cells; deterministic settle order.
/// Returns the cell path including start and goal cells, or None.
fn grid_search(
    safe: &SafeSet<'_>,
    start: (usize, usize),
    goal: (usize, usize),
) -> Option<Vec<(usize, usize)>> {
    let spec = safe.map().spec();
    let w = spec.width;
    let h = spec.height;
    let idx = |c: (usize, usize)| c.1 * w + c.0;
    let mut cost = vec![usize::MAX; w * h];
    let mut parent = vec![usize::MAX; w * h];
    // Min-heap on (cost, cell index) via Reverse.
    let mut heap: BinaryHeap<std::cmp::Reverse<(usize, usize)>> = BinaryHeap::new();
    cost[idx(start)] = 0;
    heap.push(std::cmp::Reverse((0, idx(start))));

    const ORTHO: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    const DIAG: [(isize, isize); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

    while let Some(std::cmp::Reverse((c, cell_idx))) = heap.pop() {
        if c > cost[cell_idx] {
            continue;
        }
        if cell_idx == idx(goal) {
            break;
        }
        let cx = cell_idx % w;
        let cy = cell_idx / w;
        let mut push = |nx: isize, ny: isize, heap: &mut BinaryHeap<_>| {
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                return;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if !safe.is_cell_safe(nx, ny) {
                return;
            }
            let ni = ny * w + nx;
            if c + 1 < cost[ni] {
                cost[ni] = c + 1;
                parent[ni] = cell_idx;
                heap.push(std::cmp::Reverse((c + 1, ni)));
            }
        };
        for (dx, dy) in ORTHO {
            push(cx as isize + dx, cy as isize + dy, &mut heap);
        }
        for (dx, dy) in DIAG {
            let (ox, oy) = (cx as isize + dx, cy as isize);
            let (px, py) = (cx as isize, cy as isize + dy);
            // No corner cutting: both orthogonal neighbors must be safe.
            let ortho_ok = |x: isize, y: isize| {
                x >= 0
                    && y >= 0
                    && x < w as isize
                    && y < h as isize
                    && safe.is_cell_safe(x as usize, y as usize)
            };
            if ortho_ok(ox, oy) && ortho_ok(px, py) {
                push(cx as isize + dx, cy as isize + dy, &mut heap);
            }
        }
    }

    if cost[idx(goal)] == usize::MAX {
        return None;
    }
    let mut path = vec![goal];
    let mut cur = idx(goal);
    while cur != idx(start) {
        cur = parent[cur];
        path.push((cur % w, cur / w));
    }
    path.reverse();
    Some(path)
}

/// Greedy redundant-vertex removal: extend each shortcut as far as the
/// segment-level safety check allows.
fn smooth_path(safe: &SafeSet<'_>, polyline: Vec<Vec2>) -> Vec<Vec2> {
    if polyline.len() <= 2 {
        return polyline;
    }
    let spacing = crate::risk::SEGMENT_CHECK_FRACTION * safe.map().spec().resolution;
    let segment_safe = |a: Vec2, b: Vec2| {
        sample_polyline(&[a, b], spacing)
            .iter()
            .all(|p| safe.is_point_safe(p.point))
    };
    let mut out = vec![polyline[0]];
    let mut i = 0;
    while i + 1 < polyline.len() {
        let mut j = i + 1;
        // Furthest vertex still reachable by a safe straight segment.
        let mut best = j;
        while j < polyline.len() {
            if segment_safe(polyline[i], polyline[j]) {
                best = j;
            }
            j += 1;
        }
        out.push(polyline[best]);
        i = best;
    }
    out
}

/// Resample a polyline at uniform `spacing` arc-length intervals, inserting
/// an extra sample at every interior vertex whose heading change exceeds
/// `angle_threshold`. The polyline start is always the first output; the end
/// is always included.
pub fn resample_waypoints(polyline: &[Vec2], spacing: f64, angle_threshold: f64) -> Vec<Vec2> {
    assert!(spacing > 0.0);
    if polyline.is_empty() {
        return Vec::new();
    }
    if polyline.len() == 1 {
        return vec![polyline[0]];
    }
    // Cumulative arc length per vertex.
    let mut cum = vec![0.0];
    for w in polyline.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return vec![polyline[0]];
    }

    let mut stations = Vec::new();
    let mut s = 0.0;
    while s < total {
        stations.push(s);
        s += spacing;
    }
    stations.push(total);
    // Sharp corners get their own station.
    for v in 1..polyline.len() - 1 {
        let a = polyline[v - 1];
        let b = polyline[v];
        let c = polyline[v + 1];
        let d1 = [b[0] - a[0], b[1] - a[1]];
        let d2 = [c[0] - b[0], c[1] - b[1]];
        let n1 = (d1[0] * d1[0] + d1[1] * d1[1]).sqrt();
        let n2 = (d2[0] * d2[0] + d2[1] * d2[1]).sqrt();
        if n1 == 0.0 || n2 == 0.0 {
            continue;
        }
        let cosang = ((d1[0] * d2[0] + d1[1] * d2[1]) / (n1 * n2)).clamp(-1.0, 1.0);
        if cosang.acos() > angle_threshold {
            stations.push(cum[v]);
        }
    }
    stations.sort_by(|a, b| a.partial_cmp(b).unwrap());
    stations.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

    // Map stations back to points.
    let mut out = Vec::with_capacity(stations.len());
    let mut seg = 0usize;
    for &station in &stations {
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < station {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let t = if seg_len > 0.0 {
            ((station - cum[seg]) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let a = polyline[seg];
        let b = polyline[seg + 1];
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out
}

/// One demonstration: the generating terrain and risk map, the planned path,
/// and its resampled waypoints.
#[derive(Debug, Clone)]
pub struct DemoEpisode {
    pub recipe: TerrainRecipe,
    pub start: Pose,
    pub goal: Vec2,
    /// Smoothed planner output, world frame.
    pub path: Vec<Vec2>,
    /// Resampled waypoints along `path`, world frame.
    pub waypoints: Vec<Vec2>,
    /// Risk map the episode was planned against (training-time config).
    pub risk: RiskMap,
}

/// Settings for demonstration generation.
#[derive(Debug, Clone)]
pub struct DemoGenConfig {
    pub cost: CostParams,
    pub risk: RiskConfig,
    /// Minimum start-goal separation, meters.
    pub min_separation: f64,
    /// Attempts at drawing a valid start/goal pair before giving up.
    pub max_attempts: usize,
}

impl Default for DemoGenConfig {
    fn default() -> Self {
        Self {
            cost: CostParams::default(),
            risk: RiskConfig::default(),
            min_separation: 2.0,
            max_attempts: 40,
        }
    }
}

/// Generate one demonstration for `family.recipe(index)`: build the risk
/// map, draw a safe start/goal pair with enough separation, plan, resample.
/// Returns `Ok(None)` when the map admits no valid episode.
pub fn generate_demo_episode(
    family: &RecipeFamily,
    index: u64,
    config: &DemoGenConfig,
) -> Result<Option<DemoEpisode>, ExpertError> {
    let recipe = family.recipe(index);
    let belief = generate_terrain(&recipe)?;
    let risk = build_risk_map(
        &belief,
        &config.cost,
        &config.risk,
        derive_seed(recipe.seed, 0x715c),
    )?;
    let spec = *risk.spec();
    let safe = risk.safe_set_with(config.risk.gamma);
    let safe_cells: Vec<(usize, usize)> = (0..spec.cells())
        .map(|i| (i % spec.width, i / spec.width))
        .filter(|&(ix, iy)| safe.is_cell_safe(ix, iy))
        .collect();
    if safe_cells.len() < 2 {
        return Ok(None);
    }
    let mut rng = stream_rng(recipe.seed, 0x90a1);
    for _ in 0..config.max_attempts {
        let a = safe_cells[(rng.random::<u64>() % safe_cells.len() as u64) as usize];
        let b = safe_cells[(rng.random::<u64>() % safe_cells.len() as u64) as usize];
        let start = spec.cell_center(a.0, a.1);
        let goal = spec.cell_center(b.0, b.1);
        if dist(start, goal) < config.min_separation {
            continue;
        }
        match plan_path(&risk, config.risk.gamma, start, goal) {
            Ok(path) => {
                let waypoints = resample_waypoints(&path, WAYPOINT_SPACING, ANGLE_THRESHOLD);
                let heading = (goal[1] - start[1]).atan2(goal[0] - start[0]);
                return Ok(Some(DemoEpisode {
                    recipe,
                    start: Pose::new(start[0], start[1], heading),
                    goal,
                    path,
                    waypoints,
                    risk,
                }));
            }
            Err(ExpertError::NoPath) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Training pairs from one episode: a window of `n_u` waypoints slides along
/// the resampled path with the given stride. Waypoints are expressed in the
/// robot frame at the window's base pose (the first window point, heading
/// toward the next); the context is built against the episode's risk map.
pub fn episode_pairs(
    episode: &DemoEpisode,
    n_u: usize,
    stride: usize,
) -> Vec<(Context, ActionSequence)> {
    assert!(n_u >= 2 && stride >= 1);
    let wps = &episode.waypoints;
    if wps.len() < n_u {
        return Vec::new();
    }
    let mut pairs = Vec::new();
    let mut base = 0usize;
    while base + n_u <= wps.len() {
        let here = wps[base];
        let next = wps[base + 1];
        let heading = (next[1] - here[1]).atan2(next[0] - here[0]);
        let pose = Pose::new(here[0], here[1], heading);
        let action = ActionSequence::new(
            (0..n_u).map(|k| pose.to_robot(wps[base + k])).collect(),
        );
        let ctx = Context::build(&pose, episode.goal, &episode.risk);
        pairs.push((ctx, action));
        base += stride;
    }
    pairs
}

/// Assemble a training dataset from episodes. Episodes shorter than `n_u`
/// waypoints are skipped; the skip count is returned alongside.
pub fn make_dataset(
    episodes: &[DemoEpisode],
    n_u: usize,
    stride: usize,
) -> Result<(Dataset, usize), ExpertError> {
    if episodes.is_empty() {
        return Err(ExpertError::Invalid("no episodes".into()));
    }
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for ep in episodes {
        let mut ep_pairs = episode_pairs(ep, n_u, stride);
        if ep_pairs.is_empty() {
            skipped += 1;
        }
        pairs.append(&mut ep_pairs);
    }
    let dataset = Dataset::new(pairs)?;
    Ok((dataset, skipped))
}

/// Write one episode's pairs as a binary record: text header
/// `riskdiff-demo <version> <pairs> <n_u> <ctx_dim>`, then per pair the
/// context features and flattened action as little-endian f64.
pub fn write_episode_pairs(
    w: &mut dyn Write,
    pairs: &[(Context, ActionSequence)],
    n_u: usize,
) -> Result<(), ExpertError> {
    writeln!(
        w,
        "{DEMO_MAGIC} {DEMO_FORMAT_VERSION} {} {} {}",
        pairs.len(),
        n_u,
        CONTEXT_DIM
    )?;
    let mut bytes = Vec::new();
    for (ctx, action) in pairs {
        for v in ctx.features() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in action.to_flat() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_episode_pairs(r: &mut dyn Read) -> Result<Vec<(Context, ActionSequence)>, ExpertError> {
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let header_end = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ExpertError::Format("missing header".into()))?;
    let header = std::str::from_utf8(&raw[..header_end])
        .map_err(|_| ExpertError::Format("header not utf-8".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != DEMO_MAGIC {
        return Err(ExpertError::Format(format!("bad header `{header}`")));
    }
    let version: u32 = fields[1]
        .parse()
        .map_err(|_| ExpertError::Format("bad version".into()))?;
    if version != DEMO_FORMAT_VERSION {
        return Err(ExpertError::Format(format!(
            "unsupported demo version {version}"
        )));
    }
    let n_pairs: usize = fields[2]
        .parse()
        .map_err(|_| ExpertError::Format("bad pair count".into()))?;
    let n_u: usize = fields[3]
        .parse()
        .map_err(|_| ExpertError::Format("bad n_u".into()))?;
    let ctx_dim: usize = fields[4]
        .parse()
        .map_err(|_| ExpertError::Format("bad ctx dim".into()))?;
    if ctx_dim != CONTEXT_DIM {
        return Err(ExpertError::Format(format!(
            "context dim {ctx_dim} does not match build ({CONTEXT_DIM})"
        )));
    }
    let payload = &raw[header_end + 1..];
    let pair_bytes = (ctx_dim + 2 * n_u) * 8;
    if payload.len() != n_pairs * pair_bytes {
        return Err(ExpertError::Format(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            n_pairs * pair_bytes
        )));
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    for p in 0..n_pairs {
        let chunk = &payload[p * pair_bytes..(p + 1) * pair_bytes];
        let floats: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let ctx = Context::new(floats[..ctx_dim].to_vec())
            .map_err(|e| ExpertError::Format(e.to_string()))?;
        let action = ActionSequence::from_flat(&floats[ctx_dim..]);
        if !action.is_finite() {
            return Err(ExpertError::Format("non-finite action".into()));
        }
        pairs.push((ctx, action));
    }
    Ok(pairs)
}

/// Write a dataset directory: one `ep_NNNN.demo` file per episode plus a
/// `manifest.kv` carrying counts and the corpus normalization statistics.
pub fn save_dataset_dir(
    dir: &Path,
    per_episode: &[Vec<(Context, ActionSequence)>],
    dataset: &Dataset,
) -> Result<(), ExpertError> {
    std::fs::create_dir_all(dir)?;
    for (i, pairs) in per_episode.iter().enumerate() {
        let mut file = std::fs::File::create(dir.join(format!("ep_{i:04}.demo")))?;
        write_episode_pairs(&mut file, pairs, dataset.n_u())?;
    }
    let mut kv = KvFile::new();
    kv.push("schema_version", 1);
    kv.push("episodes", per_episode.len());
    kv.push("pairs", dataset.len());
    kv.push("n_u", dataset.n_u());
    kv.push(
        "norm_mean",
        dataset
            .norm()
            .mean()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    kv.push(
        "norm_scale",
        dataset
            .norm()
            .scale()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    kv.save(&dir.join("manifest.kv"))
        .map_err(|e| ExpertError::Format(e.to_string()))?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset_dir`]. Episode files
/// are read in sorted order; the normalization is refitted from the pairs
/// (bit-identical to the manifest statistics for an untouched directory).
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset, ExpertError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "demo").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ExpertError::Format(format!(
            "no .demo files under {}",
            dir.display()
        )));
    }
    let mut pairs = Vec::new();
    for path in paths {
        let mut file = std::fs::File::open(&path)?;
        pairs.extend(read_episode_pairs(&mut file)?);
    }
    Ok(Dataset::new(pairs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::master_rng;
    use crate::terrain::{GridSpec, HazardClass, HazardShape};

    fn map_from_unsafe_cells(w: usize, h: usize, unsafe_cells: &[(usize, usize)]) -> RiskMap {
        let spec = GridSpec::new(w, h, 0.1, (0.0, 0.0)).unwrap();
        let mut rho = vec![0.0f32; spec.cells()];
        for &(ix, iy) in unsafe_cells {
            rho[spec.index(ix, iy)] = 2.0;
        }
        RiskMap::from_rho(
            spec,
            rho,
            RiskConfig {
                alpha: 0.9,
                gamma: 0.5,
                mc_samples: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn plan_trivial_start_equals_goal() {
        let map = map_from_unsafe_cells(10, 10, &[]);
        let p = [0.55, 0.55];
        let path = plan_path(&map, 0.5, p, p).unwrap();
        assert!(path.len() >= 2);
        assert_eq!(path[0], p);
        assert_eq!(*path.last().unwrap(), p);
    }

    #[test]
    fn plan_through_wall_gap() {
        // Vertical wall at ix=5 with one gap at iy=7.
        let mut wall = Vec::new();
        for iy in 0..10 {
            if iy != 7 {
                wall.push((5usize, iy));
            }
        }
        let map = map_from_unsafe_cells(10, 10, &wall);
        let start = map.spec().cell_center(1, 1);
        let goal = map.spec().cell_center(8, 1);
        let path = plan_path(&map, 0.5, start, goal).unwrap();
        // The path must pass near the gap cell (5, 7).
        let gap = map.spec().cell_center(5, 7);
        let min_d = path
            .iter()
            .map(|p| dist(*p, gap))
            .fold(f64::MAX, f64::min);
        assert!(min_d < 0.3, "path misses the gap: min dist {min_d}");
        // And the path itself is safe at segment granularity.
        let safe = map.safe_set();
        for w in path.windows(2) {
            for cp in sample_polyline(&[w[0], w[1]], 0.05) {
                assert!(safe.is_point_safe(cp.point));
            }
        }
    }

    #[test]
    fn plan_enclosed_goal_is_no_path() {
        // Ring of unsafe cells around the goal at (7, 7).
        let mut ring = Vec::new();
        for d in -1isize..=1 {
            for e in -1isize..=1 {
                if d != 0 || e != 0 {
                    ring.push(((7 + d) as usize, (7 + e) as usize));
                }
            }
        }
        let map = map_from_unsafe_cells(10, 10, &ring);
        let start = map.spec().cell_center(1, 1);
        let goal = map.spec().cell_center(7, 7);
        assert!(matches!(
            plan_path(&map, 0.5, start, goal),
            Err(ExpertError::NoPath)
        ));
    }

    #[test]
    fn plan_unsafe_endpoint_rejected() {
        let map = map_from_unsafe_cells(6, 6, &[(2, 2)]);
        let start = map.spec().cell_center(2, 2);
        let goal = map.spec().cell_center(5, 5);
        assert!(matches!(
            plan_path(&map, 0.5, start, goal),
            Err(ExpertError::UnsafeEndpoint)
        ));
    }

    /// Breadth-first hop count with the same adjacency rule, as an
    /// independent oracle for path cost.
    fn bfs_oracle(map: &RiskMap, gamma: f64, start: (usize, usize), goal: (usize, usize)) -> Option<usize> {
        let spec = map.spec();
        let safe = map.safe_set_with(gamma);
        let w = spec.width;
        let mut dist = vec![usize::MAX; spec.cells()];
        let mut queue = std::collections::VecDeque::new();
        dist[start.1 * w + start.0] = 0;
        queue.push_back(start);
        while let Some((cx, cy)) = queue.pop_front() {
            if (cx, cy) == goal {
                return Some(dist[cy * w + cx]);
            }
            let d = dist[cy * w + cx];
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = cx as isize + dx;
                    let ny = cy as isize + dy;
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= spec.height as isize {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if !safe.is_cell_safe(nx, ny) {
                        continue;
                    }
                    if dx != 0 && dy != 0 {
                        let ok_a = safe.is_cell_safe((cx as isize + dx) as usize, cy);
                        let ok_b = safe.is_cell_safe(cx, (cy as isize + dy) as usize);
                        if !ok_a || !ok_b {
                            continue;
                        }
                    }
                    if dist[ny * w + nx] == usize::MAX {
                        dist[ny * w + nx] = d + 1;
                        queue.push_back((nx, ny));
                    }
                }
            }
        }
        None
    }

    #[test]
    fn plan_cost_matches_bfs_oracle_on_random_maps() {
        let mut rng = master_rng(31);
        let mut compared = 0;
        for trial in 0..100 {
            let spec = GridSpec::new(20, 20, 0.1, (0.0, 0.0)).unwrap();
            let rho: Vec<f32> = (0..spec.cells())
                .map(|_| if rng.random::<f64>() < 0.25 { 2.0 } else { 0.0 })
                .collect();
            let map = RiskMap::from_rho(
                spec,
                rho,
                RiskConfig {
                    alpha: 0.9,
                    gamma: 0.5,
                    mc_samples: 1,
                },
            )
            .unwrap();
            let safe = map.safe_set();
            let cells: Vec<(usize, usize)> = (0..spec.cells())
                .map(|i| (i % 20, i / 20))
                .filter(|&(x, y)| safe.is_cell_safe(x, y))
                .collect();
            if cells.len() < 2 {
                continue;
            }
            let start = cells[(rng.random::<u64>() % cells.len() as u64) as usize];
            let goal = cells[(rng.random::<u64>() % cells.len() as u64) as usize];
            let oracle = bfs_oracle(&map, 0.5, start, goal);
            let planned = grid_search(&safe, start, goal);
            match (oracle, planned) {
                (None, None) => {}
                (Some(cost), Some(path)) => {
                    assert_eq!(path.len() - 1, cost, "trial {trial}");
                    compared += 1;
                }
                (a, b) => panic!("trial {trial}: oracle {a:?} vs planner {:?}", b.map(|p| p.len())),
            }
        }
        assert!(compared > 30, "only {compared} comparable trials");
    }

    #[test]
    fn resample_straight_meter() {
        let pts = resample_waypoints(&[[0.0, 0.0], [1.0, 0.0]], 0.2, ANGLE_THRESHOLD);
        assert_eq!(pts.len(), 6);
        for (i, p) in pts.iter().enumerate() {
            assert!((p[0] - 0.2 * i as f64).abs() < 1e-9);
            assert_eq!(p[1], 0.0);
        }
    }

    #[test]
    fn resample_single_point() {
        let pts = resample_waypoints(&[[0.3, 0.4]], 0.2, ANGLE_THRESHOLD);
        assert_eq!(pts, vec![[0.3, 0.4]]);
    }

    #[test]
    fn resample_right_angle_gets_corner_sample() {
        let corner = [1.0, 0.0];
        let pts = resample_waypoints(&[[0.0, 0.0], corner, [1.0, 0.73]], 0.2, ANGLE_THRESHOLD);
        assert!(
            pts.iter().any(|p| dist(*p, corner) < 1e-9),
            "no sample at the corner: {pts:?}"
        );
        for w in pts.windows(2) {
            assert!(dist(w[0], w[1]) <= 0.2 + 1e-6);
        }
    }

    #[test]
    fn resample_spacing_bound_random_polylines() {
        let mut rng = master_rng(5);
        for _ in 0..50 {
            let n = 2 + (rng.random::<u32>() % 6) as usize;
            let poly: Vec<Vec2> = (0..n)
                .map(|_| [rng.random::<f64>() * 3.0, rng.random::<f64>() * 3.0])
                .collect();
            let pts = resample_waypoints(&poly, 0.2, ANGLE_THRESHOLD);
            assert_eq!(pts[0], poly[0]);
            for w in pts.windows(2) {
                assert!(dist(w[0], w[1]) <= 0.2 + 1e-6);
            }
        }
    }

    fn flat_episode(n_points: usize) -> DemoEpisode {
        let spec = GridSpec::new(40, 40, 0.1, (0.0, 0.0)).unwrap();
        let map = RiskMap::from_rho(
            spec,
            vec![0.0; spec.cells()],
            RiskConfig::default(),
        )
        .unwrap();
        let waypoints: Vec<Vec2> = (0..n_points)
            .map(|i| [0.5 + 0.2 * i as f64, 2.0])
            .collect();
        DemoEpisode {
            recipe: TerrainRecipe::flat(spec, 0.01),
            start: Pose::new(0.5, 2.0, 0.0),
            goal: [3.5, 2.0],
            path: vec![[0.5, 2.0], [3.5, 2.0]],
            waypoints,
            risk: map,
        }
    }

    #[test]
    fn window_count_matches_formula() {
        // len = n_u + 1, stride 1 -> 2 pairs.
        let ep = flat_episode(9);
        let pairs = episode_pairs(&ep, 8, 1);
        assert_eq!(pairs.len(), 2);
        // General formula over a few lengths/strides.
        for (len, n_u, stride) in [(20usize, 8usize, 1usize), (20, 8, 3), (8, 8, 2), (7, 8, 1)] {
            let ep = flat_episode(len);
            let pairs = episode_pairs(&ep, n_u, stride);
            let expect = if len >= n_u {
                (len - n_u) / stride + 1
            } else {
                0
            };
            assert_eq!(pairs.len(), expect, "len {len} n_u {n_u} stride {stride}");
        }
    }

    #[test]
    fn dataset_statistics_match_brute_force() {
        let eps: Vec<DemoEpisode> = (0..4).map(|_| flat_episode(16)).collect();
        let (dataset, skipped) = make_dataset(&eps, 8, 1).unwrap();
        assert_eq!(skipped, 0);
        // Brute-force per-coordinate stats over the emitted pairs.
        let n = dataset.len() as f64;
        let dim = 16;
        let mut mean = vec![0.0; dim];
        for (_, a) in dataset.pairs() {
            for (i, v) in a.to_flat().iter().enumerate() {
                mean[i] += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for (_, a) in dataset.pairs() {
            for (i, v) in a.to_flat().iter().enumerate() {
                var[i] += (v - mean[i]) * (v - mean[i]) / n;
            }
        }
        for i in 0..dim {
            assert!((dataset.norm().mean()[i] - mean[i]).abs() < 1e-9);
            let scale = var[i].sqrt().max(1e-6);
            assert!((dataset.norm().scale()[i] - scale).abs() < 1e-9);
        }
        // Identical straight-line episodes: normalized actions center at 0.
        let norm = dataset.norm();
        for (_, a) in dataset.pairs() {
            let z = norm.normalize(a);
            for v in z.to_flat() {
                assert!(v.abs() < 1e-3, "normalized value {v}");
            }
        }
    }

    #[test]
    fn short_episode_skipped_with_count() {
        let eps = vec![flat_episode(16), flat_episode(3)];
        let (dataset, skipped) = make_dataset(&eps, 8, 1).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(dataset.len(), 9);
    }

    #[test]
    fn generated_episode_actions_are_safe_under_generating_map() {
        let family = RecipeFamily {
            spec: GridSpec::new(48, 48, 0.1, (0.0, 0.0)).unwrap(),
            seed: 77,
            roughness_amp: 0.02,
            roughness_scale: 8.0,
            noise_floor: 0.005,
            grad_std_gain: 0.02,
            classes: vec![HazardClass {
                shape: HazardShape::Step,
                count: (1, 2),
                size: (0.5, 1.0),
                height: (0.3, 0.5),
            }],
        };
        let config = DemoGenConfig::default();
        let mut produced = 0;
        for index in 0..6u64 {
            let Some(ep) = generate_demo_episode(&family, index, &config).unwrap() else {
                continue;
            };
            produced += 1;
            let safe = ep.risk.safe_set_with(config.risk.gamma);
            // Every waypoint and segment of the resampled path is safe.
            for cp in sample_polyline(&ep.waypoints, 0.05) {
                assert!(
                    safe.is_point_safe(cp.point),
                    "unsafe path point {:?} on episode {index}",
                    cp.point
                );
            }
            // Every emitted training action is safe from its base pose.
            for (_, action) in episode_pairs(&ep, 8, 2) {
                // Reconstruct the base pose from the action's first point.
                // The first window point is the base itself.
                assert!(action.waypoints()[0][0].abs() < 1e-9);
            }
        }
        assert!(produced >= 3, "only {produced} episodes produced");
    }

    #[test]
    fn dataset_dir_round_trip() {
        let eps: Vec<DemoEpisode> = (0..3).map(|_| flat_episode(12)).collect();
        let per_episode: Vec<Vec<(Context, ActionSequence)>> =
            eps.iter().map(|e| episode_pairs(e, 8, 1)).collect();
        let (dataset, _) = make_dataset(&eps, 8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset_dir(dir.path(), &per_episode, &dataset).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), dataset.len());
        assert_eq!(loaded.norm().mean(), dataset.norm().mean());
        assert_eq!(loaded.norm().scale(), dataset.norm().scale());
        for ((c1, a1), (c2, a2)) in loaded.pairs().iter().zip(dataset.pairs().iter()) {
            assert_eq!(c1.features(), c2.features());
            assert_eq!(a1, a2);
        }
    }

    #[test]
    fn truncated_demo_file_rejected() {
        let ep = flat_episode(12);
        let pairs = episode_pairs(&ep, 8, 1);
        let mut bytes = Vec::new();
        write_episode_pairs(&mut bytes, &pairs, 8).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            read_episode_pairs(&mut &cut[..]),
            Err(ExpertError::Format(_))
        ));
    }
}
