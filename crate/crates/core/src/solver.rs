//! Anchor position estimation: linear initialization, generalized robust
//! loss, adaptive kernel-shape fitting, and Levenberg-Marquardt refinement.

use crate::geometry::{closest_index, SyncedSample, Vec3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("degenerate geometry: design matrix rank {rank} < 4")]
    DegenerateGeometry { rank: usize },
    #[error("invalid pivot index {pivot} for {len} samples")]
    InvalidPivot { pivot: usize, len: usize },
    #[error("diverged: non-finite values during refinement")]
    Diverged,
    #[error("insufficient residuals for kernel adaptation: need {need}, got {got}")]
    InsufficientResiduals { need: usize, got: usize },
}

/// Anchor position and range bias with fit diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorEstimate {
    pub position: Vec3,
    /// Constant range bias γ, meters.
    pub bias: f64,
    /// RMS of the unweighted range residuals, meters.
    pub residual_rms: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final kernel shape; present only when the adaptive kernel was used.
    pub alpha_final: Option<f64>,
}

/// Generalized robust loss shape (α) and scale (c) parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustKernel {
    pub alpha: f64,
    pub c: f64,
}

/// Kernel handling during refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelMode {
    /// Plain least squares.
    None,
    /// Fixed shape and scale.
    Fixed(RobustKernel),
    /// Shape re-fit to the residual distribution during the iteration;
    /// the value is the fixed scale c.
    Adaptive(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub lm_lambda_init: f64,
    pub lm_lambda_factor: f64,
    /// Lower bound of the kernel-shape search; stands in for α → −∞.
    pub alpha_min: f64,
    /// Re-fit α every this many LM iterations in adaptive mode.
    pub alpha_update_period: usize,
    /// Truncation bound of the partition-function integral, units of c.
    pub trunc_bound: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-8,
            lm_lambda_init: 1e-3,
            lm_lambda_factor: 10.0,
            alpha_min: -10.0,
            alpha_update_period: 1,
            trunc_bound: 10.0,
        }
    }
}

/// Generalized robust loss ρ(r, α, c).
///
/// The family interpolates L2 (α = 2), Cauchy-like (α = 0) and Welsch
/// (α → −∞) kernels; the removable singularities at α ∈ {0, 2} and the
/// −∞ limit (represented by α ≤ alpha_min, default −10) are evaluated with
/// their closed-form branches.
pub fn barron_loss(r: f64, kernel: &RobustKernel) -> f64 {
    barron_loss_raw(r, kernel.alpha, kernel.c)
}

pub(crate) fn barron_loss_raw(r: f64, alpha: f64, c: f64) -> f64 {
    let x2 = (r / c) * (r / c);
    if alpha <= ALPHA_NEG_INF {
        1.0 - (-0.5 * x2).exp()
    } else if alpha == 2.0 {
        0.5 * x2
    } else if alpha == 0.0 {
        (0.5 * x2 + 1.0).ln()
    } else {
        let am2 = (alpha - 2.0).abs();
        (am2 / alpha) * ((x2 / am2 + 1.0).powf(0.5 * alpha) - 1.0)
    }
}

/// IRLS weight ψ(r)/r of the generalized loss, with ψ = ∂ρ/∂r.
pub fn barron_weight(r: f64, kernel: &RobustKernel) -> f64 {
    barron_weight_raw(r, kernel.alpha, kernel.c)
}

pub(crate) fn barron_weight_raw(r: f64, alpha: f64, c: f64) -> f64 {
    let c2 = c * c;
    if alpha <= ALPHA_NEG_INF {
        (-0.5 * (r / c) * (r / c)).exp() / c2
    } else if alpha == 2.0 {
        1.0 / c2
    } else if alpha == 0.0 {
        2.0 / (r * r + 2.0 * c2)
    } else {
        let x2 = (r / c) * (r / c);
        let am2 = (alpha - 2.0).abs();
        (x2 / am2 + 1.0).powf(0.5 * alpha - 1.0) / c2
    }
}

/// α at or below this value is treated as the −∞ (Welsch) limit.
const ALPHA_NEG_INF: f64 = -10.0;

/// Truncated partition function Z̃(α) = ∫_{−B}^{B} exp(−ρ(u, α, 1)) du.
/// Truncation keeps the integral finite for α ≤ 0.
///
/// The integrand is even in u, so the two-sided composite-Simpson rule with
/// 2001 points is evaluated as twice the 1001-point rule on [0, B]. Values
/// are memoized per (α, B): the α-fit grid revisits the same shapes
/// constantly and the integral does not depend on the data.
pub(crate) fn log_partition(alpha: f64, trunc_bound: f64) -> f64 {
    use std::collections::HashMap;
    use std::sync::RwLock;
    static CACHE: RwLock<Option<HashMap<(u64, u64), f64>>> = RwLock::new(None);

    let key = (alpha.to_bits(), trunc_bound.to_bits());
    if let Some(cache) = CACHE.read().unwrap().as_ref() {
        if let Some(&v) = cache.get(&key) {
            return v;
        }
    }

    const POINTS: usize = 1001;
    let b = trunc_bound;
    let h = b / (POINTS - 1) as f64;
    let f = |u: f64| (-barron_loss_raw(u, alpha, 1.0)).exp();
    let mut sum = f(0.0) + f(b);
    for i in 1..POINTS - 1 {
        let u = h * i as f64;
        sum += f(u) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let value = (2.0 * sum * h / 3.0).ln();

    let mut guard = CACHE.write().unwrap();
    let cache = guard.get_or_insert_with(HashMap::new);
    // Unbounded α probes could in principle grow this without limit.
    if cache.len() > 1 << 20 {
        cache.clear();
    }
    cache.insert(key, value);
    value
}

/// Fit the kernel shape to a residual sample by minimizing the truncated
/// negative log-likelihood `Σ ρ(r_k, α, c) + n·log Z̃(α)` over
/// α ∈ [alpha_min, 2]: coarse grid at step 0.1, then golden-section
/// refinement on the best cell.
pub fn adapt_alpha(residuals: &[f64], c: f64, cfg: &SolverConfig) -> Result<f64, SolverError> {
    adapt_alpha_warm(residuals, c, cfg, None)
}

/// Same minimization; a previous shape, when given, narrows the coarse
/// grid scan to ±5 cells around it. The window expands back to the full
/// grid whenever its edge wins, so the warm start only skips cells that a
/// slowly-moving α cannot reach between refinement iterations.
pub(crate) fn adapt_alpha_warm(
    residuals: &[f64],
    c: f64,
    cfg: &SolverConfig,
    prev: Option<f64>,
) -> Result<f64, SolverError> {
    if residuals.len() < 10 {
        return Err(SolverError::InsufficientResiduals { need: 10, got: residuals.len() });
    }
    let n = residuals.len() as f64;
    // NLL with a bail-out bound: the ρ sum only grows, so a scan can stop
    // as soon as it exceeds the best value seen.
    let nll_capped = |alpha: f64, cap: f64| -> f64 {
        let mut acc = n * log_partition(alpha, cfg.trunc_bound);
        if acc >= cap {
            return f64::INFINITY;
        }
        for &r in residuals {
            acc += barron_loss_raw(r, alpha, c);
            if acc >= cap {
                return f64::INFINITY;
            }
        }
        acc
    };
    let nll = |alpha: f64| nll_capped(alpha, f64::INFINITY);

    let lo = cfg.alpha_min;
    let hi = 2.0;
    let steps = ((hi - lo) / 0.1).round() as usize;
    let grid = |i: usize| lo + (hi - lo) * i as f64 / steps as f64;

    let scan = |from: usize, to: usize| -> (usize, f64) {
        let mut best_i = from;
        let mut best_f = f64::INFINITY;
        for i in from..=to {
            let f = nll_capped(grid(i), best_f);
            if f < best_f {
                best_f = f;
                best_i = i;
            }
        }
        (best_i, best_f)
    };

    let (mut best_i, mut best_f) = match prev {
        Some(p) if p.is_finite() => {
            let center = (((p - lo) / 0.1).round() as isize).clamp(0, steps as isize) as usize;
            let from = center.saturating_sub(5);
            let to = (center + 5).min(steps);
            let (i, f) = scan(from, to);
            if (i == from && from > 0) || (i == to && to < steps) {
                scan(0, steps)
            } else {
                (i, f)
            }
        }
        _ => scan(0, steps),
    };
    let _ = &mut best_f;

    // Golden-section search on [best−1, best+1] grid cells.
    let mut a = grid(best_i.saturating_sub(1));
    let mut b = grid((best_i + 1).min(steps));
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = b - INVPHI * (b - a);
    let mut x2 = a + INVPHI * (b - a);
    let mut f1 = nll(x1);
    let mut f2 = nll(x2);
    for _ in 0..30 {
        if b - a < 1e-6 {
            break;
        }
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INVPHI * (b - a);
            f1 = nll(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INVPHI * (b - a);
            f2 = nll(x2);
        }
    }
    let refined = 0.5 * (a + b);
    // Pick the best among the refined point, the grid winner and the domain
    // boundaries so exact-boundary optima are returned exactly.
    let mut best = (nll(refined), refined);
    for cand in [grid(best_i), lo, hi] {
        let f = nll(cand);
        if f < best.0 {
            best = (f, cand);
        }
    }
    Ok(best.1)
}

fn range_residuals(samples: &[SyncedSample], position: &Vec3, bias: f64) -> Vec<f64> {
    samples
        .iter()
        .map(|s| (s.tag_pos - position).norm() + bias - s.range)
        .collect()
}

fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Internal linear solve shared by [`solve_ls`] and the baselines: builds
/// the pivot-differenced system and returns the minimum-norm least-squares
/// solution together with the rank of the design matrix.
pub(crate) fn solve_ls_any_rank(
    samples: &[SyncedSample],
    pivot: Option<usize>,
) -> Result<(AnchorEstimate, usize), SolverError> {
    if samples.len() < 5 {
        return Err(SolverError::InsufficientSamples { need: 5, got: samples.len() });
    }
    let j = match pivot {
        Some(p) if p >= samples.len() => {
            return Err(SolverError::InvalidPivot { pivot: p, len: samples.len() })
        }
        Some(p) => p,
        None => closest_index(samples).expect("non-empty"),
    };
    let pj = samples[j].tag_pos;
    let dj = samples[j].range;

    let n = samples.len() - 1;
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, 4);
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    let mut row = 0;
    for (k, s) in samples.iter().enumerate() {
        if k == j {
            continue;
        }
        let dp = s.tag_pos - pj;
        a[(row, 0)] = -dp.x;
        a[(row, 1)] = -dp.y;
        a[(row, 2)] = -dp.z;
        a[(row, 3)] = s.range - dj;
        b[row] = 0.5
            * ((s.range * s.range - dj * dj)
                - (s.tag_pos.norm_squared() - pj.norm_squared()));
        row += 1;
    }

    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * 1e-10;
    let rank = svd.singular_values.iter().filter(|&&sv| sv > tol).count();
    let x = svd.solve(&b, tol).map_err(|_| SolverError::DegenerateGeometry { rank })?;

    let position = Vec3::new(x[0], x[1], x[2]);
    let bias = x[3];
    let residuals = range_residuals(samples, &position, bias);
    Ok((
        AnchorEstimate {
            position,
            bias,
            residual_rms: rms(&residuals),
            iterations: 0,
            converged: rank == 4,
            alpha_final: None,
        },
        rank,
    ))
}

/// Slack for the range-consistency check: the anchor can sit at most
/// `d_min + max(2, 0.3·d_min)` from the closest-range sample before the
/// estimate contradicts its own measurements.
pub fn consistency_slack(d_min: f64) -> f64 {
    d_min + (0.3 * d_min).max(2.0)
}

/// The smallest measured range bounds how far the anchor can be from the
/// closest sample, up to bias and noise. Squared-range differencing
/// amplifies high noise into seeds hundreds of meters out along weakly
/// observed axes; such a seed is pulled back onto the d_min sphere around
/// the closest point (keeping its direction) and the bias is re-fit.
pub fn condition_seed(samples: &[SyncedSample], estimate: &AnchorEstimate) -> AnchorEstimate {
    let Some(j) = closest_index(samples) else {
        return *estimate;
    };
    let p_c = samples[j].tag_pos;
    let d_min = samples[j].range;
    let offset = estimate.position - p_c;
    let dist = offset.norm();
    if dist <= consistency_slack(d_min) {
        return *estimate;
    }
    let dir = if dist > 0.0 { offset / dist } else { Vec3::new(1.0, 0.0, 0.0) };
    let position = p_c + dir * d_min;
    let bias = samples
        .iter()
        .map(|s| s.range - (s.tag_pos - position).norm())
        .sum::<f64>()
        / samples.len() as f64;
    let residuals = range_residuals(samples, &position, bias);
    AnchorEstimate {
        position,
        bias,
        residual_rms: rms(&residuals),
        ..*estimate
    }
}

/// Coarse linear initialization by pivot differencing.
///
/// Differencing the squared range equations against pivot sample `j` turns
/// the ranging model with constant bias into the linear system
/// `A [p_A, γ]ᵀ = b` with rows `A_k = [−(p_k − p_j)ᵀ, d_k − d_j]` and
/// `b_k = ½((d_k² − d_j²) − (‖p_k‖² − ‖p_j‖²))`. The pivot defaults to the
/// closest-point sample, but any index yields the same solution on
/// non-degenerate data.
pub fn solve_ls(
    samples: &[SyncedSample],
    pivot: Option<usize>,
) -> Result<AnchorEstimate, SolverError> {
    let (estimate, rank) = solve_ls_any_rank(samples, pivot)?;
    if rank < 4 {
        return Err(SolverError::DegenerateGeometry { rank });
    }
    Ok(estimate)
}

/// Levenberg-Marquardt refinement of θ = (p_A, γ) over the residuals
/// `r_k = ‖p_k − p_A‖ + γ − d_k`, optionally reweighted by a robust kernel.
///
/// In adaptive mode the kernel shape α is re-fit to the current residuals
/// every `alpha_update_period` iterations (kept when fewer than 10 samples
/// are available). Steps are accepted when the (robust) objective
/// decreases; λ shrinks on acceptance and grows on rejection.
pub fn refine(
    samples: &[SyncedSample],
    initial: &AnchorEstimate,
    kernel_mode: KernelMode,
    cfg: &SolverConfig,
) -> Result<AnchorEstimate, SolverError> {
    if samples.len() < 5 {
        return Err(SolverError::InsufficientSamples { need: 5, got: samples.len() });
    }
    if !initial.position.iter().all(|v| v.is_finite()) || !initial.bias.is_finite() {
        return Err(SolverError::Diverged);
    }

    let mut position = initial.position;
    let mut bias = initial.bias;
    let mut alpha = match kernel_mode {
        KernelMode::Fixed(k) => k.alpha,
        _ => 2.0,
    };
    let kernel_c = match kernel_mode {
        KernelMode::None => 1.0,
        KernelMode::Fixed(k) => k.c,
        KernelMode::Adaptive(c) => c,
    };

    let objective = |residuals: &[f64], alpha: f64| -> f64 {
        match kernel_mode {
            KernelMode::None => residuals.iter().map(|r| r * r).sum(),
            _ => residuals.iter().map(|&r| barron_loss_raw(r, alpha, kernel_c)).sum(),
        }
    };
    let weight = |r: f64, alpha: f64| -> f64 {
        match kernel_mode {
            KernelMode::None => 1.0,
            _ => barron_weight_raw(r, alpha, kernel_c),
        }
    };

    let mut lambda = cfg.lm_lambda_init;
    let mut iterations = 0;
    let mut converged = false;
    // Fallback direction for a Jacobian row whose predicted distance is
    // (numerically) zero: the unit direction from the previous iterate.
    let mut last_dirs: Vec<Vec3> = samples
        .iter()
        .map(|s| {
            let v = s.tag_pos - position;
            let n = v.norm();
            if n > 1e-6 {
                v / n
            } else {
                Vec3::new(1.0, 0.0, 0.0)
            }
        })
        .collect();

    let mut residuals = range_residuals(samples, &position, bias);
    let mut cost = objective(&residuals, alpha);
    if !cost.is_finite() {
        return Err(SolverError::Diverged);
    }

    let mut alpha_fitted = false;
    let mut alpha_settled = !matches!(kernel_mode, KernelMode::Adaptive(_));
    while iterations < cfg.max_iterations {
        if let KernelMode::Adaptive(_) = kernel_mode {
            if iterations % cfg.alpha_update_period.max(1) == 0 && residuals.len() >= 10 {
                let prev = alpha_fitted.then_some(alpha);
                let fit = adapt_alpha_warm(&residuals, kernel_c, cfg, prev)?;
                // Anneal the shape downward: a hard kernel fitted to the
                // residuals of a bad iterate zeroes every weight and stalls
                // the descent at the seed, so α may drop by at most 0.5 per
                // refit from its quadratic start.
                let new_alpha = fit.min(2.0).max(alpha - 0.5);
                alpha_settled = (new_alpha - alpha).abs() < 1e-3;
                alpha = new_alpha;
                alpha_fitted = true;
                cost = objective(&residuals, alpha);
            }
        }
        iterations += 1;

        // Weighted normal equations JᵀWJ δ = −JᵀWr on the 4-dim state.
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jtr = nalgebra::Vector4::<f64>::zeros();
        for (k, s) in samples.iter().enumerate() {
            let v = s.tag_pos - position;
            let dist = v.norm();
            let dir = if dist < 1e-6 {
                last_dirs[k]
            } else {
                let u = v / dist;
                last_dirs[k] = u;
                u
            };
            // ∂r/∂p_A = −(p_k − p_A)ᵀ/d̂ = (p_A − p_k)ᵀ/d̂, ∂r/∂γ = 1.
            let row = nalgebra::Vector4::new(-dir.x, -dir.y, -dir.z, 1.0);
            let w = weight(residuals[k], alpha);
            jtj += row * row.transpose() * w;
            jtr += row * (w * residuals[k]);
        }

        if jtr.amax() < cfg.gradient_tolerance && alpha_settled {
            converged = true;
            break;
        }

        let mut accepted = false;
        while lambda < 1e12 {
            let damped = jtj + nalgebra::Matrix4::identity() * lambda;
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&(-jtr)),
                None => damped.lu().solve(&(-jtr)).ok_or(SolverError::Diverged)?,
            };
            let cand_pos = position + Vec3::new(step[0], step[1], step[2]);
            let cand_bias = bias + step[3];
            if !cand_pos.iter().all(|v| v.is_finite()) || !cand_bias.is_finite() {
                return Err(SolverError::Diverged);
            }
            let cand_res = range_residuals(samples, &cand_pos, cand_bias);
            let cand_cost = objective(&cand_res, alpha);
            if !cand_cost.is_finite() {
                return Err(SolverError::Diverged);
            }
            if cand_cost < cost {
                position = cand_pos;
                bias = cand_bias;
                residuals = cand_res;
                cost = cand_cost;
                lambda = (lambda / cfg.lm_lambda_factor).max(1e-12);
                if step.norm() < cfg.step_tolerance && alpha_settled {
                    converged = true;
                }
                accepted = true;
                break;
            }
            lambda *= cfg.lm_lambda_factor;
        }
        if !accepted {
            if alpha_settled {
                // Damping exhausted: no descent direction left at this scale.
                converged = true;
                break;
            }
            // The kernel is still annealing; the objective changes on the
            // next refit, so keep going with fresh damping.
            lambda = cfg.lm_lambda_init;
        }
        if converged {
            break;
        }
    }

    Ok(AnchorEstimate {
        position,
        bias,
        residual_rms: rms(&residuals),
        iterations,
        converged,
        alpha_final: match kernel_mode {
            KernelMode::Adaptive(_) => Some(alpha),
            _ => None,
        },
    })
}
