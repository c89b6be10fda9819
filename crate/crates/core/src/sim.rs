//! Synthetic trajectories, range generation, baseline initialization
//! strategies and the Monte Carlo comparison harness.
//!
//! The harness reproduces the tunnel-style evaluation: random trajectories
//! with configurable noise and outlier rates, multiple anchors, and a set
//! of strategies run on *identical* per-run measurement streams (fairness
//! is checksummed). Reported metrics per strategy: average and median
//! position error, number of initializations, number of errors above 1 m,
//! and the bad-initialization ratio.

use crate::filter::{FilterConfig, FilterState};
use crate::geometry::{SyncedSample, Vec3};
use crate::initializer::{AnchorSession, IngestEvent, Phase, PipelineConfig, PoseBuffer};
use crate::solver::{
    condition_seed, refine, solve_ls_any_rank, AnchorEstimate, KernelMode, SolverConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// Additive range-noise model: `d = ‖p_U − p_A‖ + γ + η`, η ~ N(0, σ_d²),
/// plus occasional gross outliers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma_d: f64,
    /// Constant range bias γ, meters.
    pub bias: f64,
    /// Per-measurement probability of an injected outlier.
    pub outlier_prob: f64,
    /// Outlier magnitude range (low, high), meters; sign is random.
    pub outlier_magnitude: (f64, f64),
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_d: 0.15,
            bias: 0.2,
            outlier_prob: 0.05,
            outlier_magnitude: (0.5, 5.0),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    /// Corridor along +x with sinusoidal lateral sway and mild vertical
    /// variation; coverage fraction randomizes per seed so distant anchors
    /// may only ever be seen from a receding, near-collinear segment.
    Tunnel,
    /// Smooth waypoint-to-waypoint flight inside a box.
    WaypointBox,
    /// Planar ground-vehicle path at a fixed tag height.
    PlanarAmr,
    /// Exact straight line — the adversarial degenerate case.
    Collinear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Workspace extents, meters. For `PlanarAmr` the z component is the
    /// fixed tag height.
    pub extents: Vec3,
    pub duration: f64,
    pub rate: f64,
    pub waypoint_count: usize,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Tunnel,
            extents: Vec3::new(100.0, 6.0, 3.0),
            duration: 120.0,
            rate: 10.0,
            waypoint_count: 8,
        }
    }
}

/// splitmix64 step; decorrelates per-run and per-anchor substreams.
fn mix_seed(base: u64, k: u64) -> u64 {
    let mut z = base.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample a smooth trajectory at `spec.rate`; identical seeds give
/// identical buffers.
pub fn gen_trajectory(spec: &TrajectorySpec, seed: u64) -> PoseBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xB00F));
    let n = (spec.duration * spec.rate).round() as usize + 1;
    let dt = 1.0 / spec.rate;
    let ex = spec.extents;
    let mut poses = PoseBuffer::new();

    match spec.kind {
        TrajectoryKind::Tunnel => {
            // Coverage fraction < 1 leaves the far end of the tunnel unseen.
            let coverage: f64 = rng.random_range(0.35..1.0);
            let speed = ex.x * coverage / spec.duration;
            let sway_amp = 0.45 * ex.y * rng.random_range(0.5..1.0);
            let sway_f = rng.random_range(0.02..0.08);
            let sway_phase = rng.random_range(0.0..std::f64::consts::TAU);
            let z_mid = 0.5 * ex.z;
            let z_amp = 0.45 * ex.z * rng.random_range(0.6..1.0);
            let z_f = rng.random_range(0.01..0.05);
            let z_phase = rng.random_range(0.0..std::f64::consts::TAU);
            for k in 0..n {
                let t = k as f64 * dt;
                let p = Vec3::new(
                    speed * t,
                    sway_amp * (std::f64::consts::TAU * sway_f * t + sway_phase).sin(),
                    z_mid + z_amp * (std::f64::consts::TAU * z_f * t + z_phase).sin(),
                );
                poses.push(t, p).expect("strictly increasing by construction");
            }
        }
        TrajectoryKind::WaypointBox | TrajectoryKind::PlanarAmr => {
            let planar = spec.kind == TrajectoryKind::PlanarAmr;
            let m = spec.waypoint_count.max(2);
            let mut wps = Vec::with_capacity(m);
            for _ in 0..m {
                wps.push(Vec3::new(
                    rng.random_range(0.0..ex.x),
                    rng.random_range(0.0..ex.y),
                    if planar { ex.z } else { rng.random_range(0.0..ex.z) },
                ));
            }
            // Smoothstep easing between waypoints; convexity keeps every
            // interpolated point inside the box.
            let seg_t = spec.duration / (m - 1) as f64;
            for k in 0..n {
                let t = k as f64 * dt;
                let s = (t / seg_t).min((m - 1) as f64 - 1e-12);
                let i = s.floor() as usize;
                let u = s - i as f64;
                let w = u * u * (3.0 - 2.0 * u);
                let p = wps[i] + (wps[i + 1] - wps[i]) * w;
                poses.push(t, p).expect("strictly increasing by construction");
            }
        }
        TrajectoryKind::Collinear => {
            let p0 = Vec3::new(
                rng.random_range(0.0..ex.x * 0.2),
                rng.random_range(0.0..ex.y),
                rng.random_range(0.0..ex.z),
            );
            let mut v = Vec3::new(
                rng.random_range(0.5..1.0),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.1..0.1),
            );
            v /= v.norm();
            let speed = 0.8 * ex.x / spec.duration;
            for k in 0..n {
                let t = k as f64 * dt;
                poses.push(t, p0 + v * (speed * t)).expect("increasing");
            }
        }
    }
    poses
}

/// Generate ranges with per-sample outlier labels (true = injected).
pub fn gen_ranges_labeled(
    poses: &PoseBuffer,
    anchor: &Vec3,
    noise: &NoiseModel,
    seed: u64,
) -> Vec<(f64, f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.sigma_d.max(0.0)).ok();
    poses
        .entries()
        .iter()
        .map(|&(t, p)| {
            let mut d = (p - anchor).norm() + noise.bias;
            if let Some(n) = &normal {
                if noise.sigma_d > 0.0 {
                    d += n.sample(&mut rng);
                }
            }
            let is_outlier = noise.outlier_prob > 0.0 && rng.random::<f64>() < noise.outlier_prob;
            if is_outlier {
                let (lo, hi) = noise.outlier_magnitude;
                let mag = rng.random_range(lo..=hi);
                let signed = if rng.random::<bool>() { mag } else { -mag };
                // Ranges must stay positive; flip the sign when an offset
                // would cross zero.
                d = if d + signed > 0.0 { d + signed } else { d + mag };
            }
            (t, d.max(1e-3), is_outlier)
        })
        .collect()
}

/// Ranges only, labels dropped.
pub fn gen_ranges(
    poses: &PoseBuffer,
    anchor: &Vec3,
    noise: &NoiseModel,
    seed: u64,
) -> Vec<(f64, f64)> {
    gen_ranges_labeled(poses, anchor, noise, seed)
        .into_iter()
        .map(|(t, d, _)| (t, d))
        .collect()
}

/// Fixed-window baseline outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedWindowOutcome {
    pub estimate: AnchorEstimate,
    /// Accepted samples actually used.
    pub used: usize,
    /// The window exceeded the available data and was truncated.
    pub truncated: bool,
}

/// Fixed-window baseline: filter the stream, take the first `window`
/// accepted samples (or all of them when fewer) and solve regardless of
/// geometry. On rank-deficient data the minimum-norm solution is returned
/// with `converged = false` — exactly the failure mode the comparison
/// counts.
pub fn run_fixed_window(
    data: &[SyncedSample],
    window: usize,
    filter_cfg: &FilterConfig,
    solver_cfg: &SolverConfig,
    kernel_scale: f64,
) -> Option<FixedWindowOutcome> {
    let mut st = FilterState::new();
    let mut accepted = Vec::new();
    for s in data {
        if st.ingest(s, filter_cfg).unwrap_or(false) {
            accepted.push(*s);
            if accepted.len() >= window {
                break;
            }
        }
    }
    let truncated = accepted.len() < window;
    let used = accepted.len();
    let (ls, rank) = solve_ls_any_rank(&accepted, None).ok()?;
    let seed = condition_seed(&accepted, &ls);
    let mut estimate = refine(
        &accepted,
        &seed,
        KernelMode::Adaptive(kernel_scale),
        solver_cfg,
    )
    .unwrap_or(seed);
    if rank < 4 {
        estimate.converged = false;
    }
    Some(FixedWindowOutcome { estimate, used, truncated })
}

/// Number of RANSAC rounds needed to draw at least one all-inlier sample of
/// size `s` with confidence `p` at outlier ratio `e`:
/// `ceil(ln(1−p) / ln(1−(1−e)^s))`.
pub fn ransac_iterations(p: f64, s: usize, e: f64) -> usize {
    assert!((0.0..1.0).contains(&e) && p > 0.0 && p < 1.0 && s >= 1);
    let inlier_all = (1.0 - e).powi(s as i32);
    if inlier_all >= 1.0 {
        return 1;
    }
    let n = (1.0 - p).ln() / (1.0 - inlier_all).ln();
    n.ceil().max(1.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    /// Desired probability of sampling at least one outlier-free subset.
    pub p: f64,
    /// Subset size per round.
    pub s: usize,
    /// Assumed outlier ratio.
    pub e: f64,
    /// Absolute range-residual bound for consensus membership, meters.
    pub inlier_threshold: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { p: 0.95, s: 60, e: 0.10, inlier_threshold: 0.45 }
    }
}

/// RANSAC outcome; `consensus` is the final inlier index set.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub estimate: AnchorEstimate,
    pub consensus: Vec<usize>,
    pub rounds: usize,
}

/// RANSAC baseline: repeatedly solve LS + plain NLS on random subsets of
/// size `s`, score by consensus over the full data, then refit on the best
/// consensus set. No consensus of at least `s` members flags the estimate
/// as not converged.
pub fn run_ransac(
    data: &[SyncedSample],
    params: &RansacParams,
    solver_cfg: &SolverConfig,
    seed: u64,
) -> Option<RansacOutcome> {
    if data.len() < params.s.max(5) {
        return None;
    }
    let rounds = ransac_iterations(params.p, params.s, params.e);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Bounded inner refinement; RANSAC's robustness comes from sampling,
    // not from a long polish of every candidate.
    let inner_cfg = SolverConfig { max_iterations: 25, ..*solver_cfg };

    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut best_consensus: Vec<usize> = Vec::new();
    for _ in 0..rounds {
        // Partial Fisher-Yates: first `s` entries become the subset.
        for i in 0..params.s {
            let j = rng.random_range(i..indices.len());
            indices.swap(i, j);
        }
        let subset: Vec<SyncedSample> = indices[..params.s].iter().map(|&i| data[i]).collect();
        let Ok((ls, rank)) = solve_ls_any_rank(&subset, None) else {
            continue;
        };
        if rank < 4 {
            continue;
        }
        let seed = condition_seed(&subset, &ls);
        let Ok(cand) = refine(&subset, &seed, KernelMode::None, &inner_cfg) else {
            continue;
        };
        let consensus: Vec<usize> = data
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                let r = (s.tag_pos - cand.position).norm() + cand.bias - s.range;
                r.abs() < params.inlier_threshold
            })
            .map(|(i, _)| i)
            .collect();
        if consensus.len() > best_consensus.len() {
            best_consensus = consensus;
        }
    }

    if best_consensus.len() >= params.s.max(5) {
        let inliers: Vec<SyncedSample> = best_consensus.iter().map(|&i| data[i]).collect();
        let (ls, rank) = solve_ls_any_rank(&inliers, None).ok()?;
        let seed = condition_seed(&inliers, &ls);
        let mut estimate = refine(&inliers, &seed, KernelMode::None, &inner_cfg).unwrap_or(seed);
        if rank < 4 {
            estimate.converged = false;
        }
        Some(RansacOutcome { estimate, consensus: best_consensus, rounds })
    } else {
        // No usable consensus: best-effort full-data solve, flagged.
        let (ls, _) = solve_ls_any_rank(data, None).ok()?;
        let seed = condition_seed(data, &ls);
        let mut estimate = refine(data, &seed, KernelMode::None, &inner_cfg).unwrap_or(seed);
        estimate.converged = false;
        Some(RansacOutcome { estimate, consensus: best_consensus, rounds })
    }
}

/// Initialization strategy under comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// The PDOP-triggered online pipeline; may decline to initialize.
    PdopTriggered,
    /// Initialize after a fixed amount of accepted data regardless of
    /// geometry; `usize::MAX` means the whole trajectory.
    FixedWindow(usize),
    Ransac(RansacParams),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::PdopTriggered => "Our",
            Strategy::FixedWindow(_) => "Fixed",
            Strategy::Ransac(_) => "Ransac",
        }
    }
}

/// Monte Carlo configuration: strategies compared on identical streams.
#[derive(Debug, Clone, PartialEq)]
pub struct MCConfig {
    pub runs: usize,
    pub strategies: Vec<Strategy>,
    pub noise: NoiseModel,
    pub anchors: Vec<Vec3>,
    pub trajectory: TrajectorySpec,
    pub pipeline: PipelineConfig,
}

impl Default for MCConfig {
    fn default() -> Self {
        let noise = NoiseModel::default();
        let trajectory = TrajectorySpec::default();
        Self {
            runs: 100,
            strategies: vec![Strategy::FixedWindow(usize::MAX), Strategy::PdopTriggered],
            anchors: default_tunnel_anchors(&trajectory, 30, noise.seed),
            pipeline: PipelineConfig::from_sigma(noise.sigma_d),
            noise,
            trajectory,
        }
    }
}

/// Anchors along the tunnel walls: alternating sides, slight stand-off,
/// heights spread over 0.9–2.9 m.
pub fn default_tunnel_anchors(spec: &TrajectorySpec, count: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA2C4));
    let ex = spec.extents;
    (0..count)
        .map(|i| {
            let x = ex.x * (0.5 + i as f64) / count as f64;
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            let y = side * (0.5 * ex.y + rng.random_range(0.2..0.8));
            let z = rng.random_range(0.9..2.9);
            Vec3::new(x, y, z)
        })
        .collect()
}

/// Per-strategy aggregate over all (run, anchor) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyStats {
    pub name: String,
    /// Mean position error over initialized pairs, meters.
    pub avg_m: f64,
    /// Median position error over initialized pairs, meters.
    pub med_m: f64,
    /// Initialized (run, anchor) pairs.
    pub init: usize,
    /// Initialized pairs with error above 1 m.
    pub gt1m: usize,
    /// `100·gt1m/init`.
    pub ratio_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MCReport {
    pub strategies: Vec<StrategyStats>,
    pub runs: usize,
    pub anchor_count: usize,
    /// FNV-1a over every generated (t, range) stream, in run/anchor order;
    /// all strategies consumed exactly these bytes.
    pub stream_checksum: u64,
}

fn fnv1a(init: u64, bytes: &[u8]) -> u64 {
    let mut h = if init == 0 { 0xcbf2_9ce4_8422_2325 } else { init };
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn checksum_stream(init: u64, stream: &[(f64, f64)]) -> u64 {
    let mut h = init;
    for &(t, d) in stream {
        h = fnv1a(h, &t.to_bits().to_le_bytes());
        h = fnv1a(h, &d.to_bits().to_le_bytes());
    }
    h
}

fn median(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// One (run, anchor) outcome per strategy: position error if initialized.
type PairOutcomes = Vec<Option<f64>>;

fn run_one(cfg: &MCConfig, run_idx: usize) -> (Vec<PairOutcomes>, u64) {
    let run_seed = mix_seed(cfg.noise.seed, run_idx as u64 + 1);
    let poses = gen_trajectory(&cfg.trajectory, run_seed);
    let mut checksum = 0;
    let mut outcomes: Vec<PairOutcomes> = vec![Vec::new(); cfg.strategies.len()];

    for (a_idx, anchor) in cfg.anchors.iter().enumerate() {
        let stream = gen_ranges(&poses, anchor, &cfg.noise, mix_seed(run_seed, a_idx as u64));
        checksum = checksum_stream(checksum, &stream);
        let samples: Vec<SyncedSample> = stream
            .iter()
            .zip(poses.entries())
            .map(|(&(t, d), &(pt, p))| {
                debug_assert_eq!(t, pt);
                SyncedSample::new(t, p, d)
            })
            .collect();

        for (s_idx, strategy) in cfg.strategies.iter().enumerate() {
            let error = match strategy {
                Strategy::PdopTriggered => {
                    let mut session = AnchorSession::new("mc");
                    let mut initialized = false;
                    for &(t, d) in &stream {
                        if let IngestEvent::Initialized =
                            session.ingest_range(&poses, t, d, &cfg.pipeline)
                        {
                            initialized = true;
                        }
                    }
                    if initialized && session.phase() == Phase::Initialized {
                        session.estimate().map(|e| (e.position - anchor).norm())
                    } else {
                        None
                    }
                }
                Strategy::FixedWindow(window) => run_fixed_window(
                    &samples,
                    *window,
                    &cfg.pipeline.filter,
                    &cfg.pipeline.solver,
                    cfg.pipeline.kernel_scale,
                )
                .map(|o| (o.estimate.position - anchor).norm()),
                Strategy::Ransac(params) => run_ransac(
                    &samples,
                    params,
                    &cfg.pipeline.solver,
                    mix_seed(run_seed, 0x5AC ^ a_idx as u64),
                )
                .map(|o| (o.estimate.position - anchor).norm()),
            };
            outcomes[s_idx].push(error);
        }
    }
    (outcomes, checksum)
}

/// Run the full Monte Carlo comparison. Identical configs produce
/// byte-identical reports: every run owns a seed derived from
/// `noise.seed + run index` and the reduction is order-independent.
pub fn run_mc(cfg: &MCConfig) -> MCReport {
    let per_run: Vec<(Vec<PairOutcomes>, u64)> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| run_one(cfg, r))
        .collect();

    let mut checksum = 0u64;
    for (_, c) in &per_run {
        checksum = fnv1a(checksum, &c.to_le_bytes());
    }

    let strategies = cfg
        .strategies
        .iter()
        .enumerate()
        .map(|(s_idx, strategy)| {
            let mut errors: Vec<f64> = per_run
                .iter()
                .flat_map(|(outcomes, _)| outcomes[s_idx].iter().flatten().copied())
                .collect();
            errors.sort_by(|a, b| a.total_cmp(b));
            let init = errors.len();
            let gt1m = errors.iter().filter(|&&e| e > 1.0).count();
            StrategyStats {
                name: strategy.name().to_string(),
                avg_m: if init == 0 {
                    0.0
                } else {
                    errors.iter().sum::<f64>() / init as f64
                },
                med_m: median(&errors),
                init,
                gt1m,
                ratio_pct: if init == 0 { 0.0 } else { 100.0 * gt1m as f64 / init as f64 },
            }
        })
        .collect();

    MCReport {
        strategies,
        runs: cfg.runs,
        anchor_count: cfg.anchors.len(),
        stream_checksum: checksum,
    }
}
