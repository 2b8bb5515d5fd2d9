//! Fits a voxel grid (density + grayscale radiance) to posed observations.
//!
//! The data term is either the photometric mean-squared error of composited
//! ray colors or, as a fast path for producing test fields, the absolute
//! error of terminal-weighted depth against per-pixel ground truth. Both are
//! regularized by the annealed weight-consolidation loss, which penalizes the
//! spread of each ray's visibility-weight distribution and is ramped in
//! linearly over training so early geometry can stay soft.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{DensityField, VoxelGrid};
use crate::optim::{lr_log_decay, Adam};
use crate::render::{
    backprop_weights_to_sigma, depth_terminal, depth_terminal_sigma_gradient, deltas,
    hierarchical_resample, make_pixel_ray, sample_logspace, weights, Camera,
};
use crate::{derive_seed, Error, Result};

/// A posed grayscale view of the scene, optionally with per-pixel depth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub camera: Camera,
    /// Per-pixel radiance in [0, 1], row-major.
    pub image: Vec<f64>,
    /// Optional per-pixel ground-truth depth in meters (no-hit pixels carry
    /// the far bound).
    pub depth: Option<Vec<f64>>,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.image.len() != self.camera.pixel_count() {
            return Err(Error::invalid("image size does not match camera"));
        }
        if let Some(d) = &self.depth {
            if d.len() != self.camera.pixel_count() {
                return Err(Error::invalid("depth size does not match camera"));
            }
        }
        Ok(())
    }
}

/// Which data term drives the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Mean-squared error on composited grayscale colors.
    Photometric,
    /// Mean absolute error on terminal-weighted depth (requires observation
    /// depth channels).
    DepthSupervised,
}

/// Fit hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub rays_per_iter: usize,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    /// Learning rate schedule for raw density values (log decay).
    pub lr_start: f64,
    pub lr_end: f64,
    /// Learning rate schedule for radiance values.
    pub lr_radiance_start: f64,
    pub lr_radiance_end: f64,
    /// Weight-consolidation annealing constants; the effective weight at
    /// iteration i of N is `lambda1 * lambda2 * i / N`.
    pub lambda1: f64,
    pub lambda2: f64,
    /// Use the geometric alternative schedule `lambda1 * lambda2^(i/N)`
    /// instead of the linear ramp.
    pub geometric_lambda: bool,
    pub mode: FitMode,
    pub seed: u64,
    /// Grid resolution (vertices per axis).
    pub resolution: (usize, usize, usize),
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    /// Every pixel whose hash is 0 mod this is held out of training and used
    /// for evaluation; values 0 and 1 disable the holdout.
    pub holdout_modulus: u32,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 800,
            rays_per_iter: 512,
            coarse_samples: 64,
            fine_samples: 32,
            lr_start: 30.0,
            lr_end: 3.0,
            lr_radiance_start: 0.05,
            lr_radiance_end: 0.005,
            lambda1: 0.01,
            lambda2: 10.0,
            geometric_lambda: false,
            mode: FitMode::Photometric,
            seed: 0,
            resolution: (64, 64, 64),
            bbox_min: [-0.3, -0.3, -0.3],
            bbox_max: [0.3, 0.3, 0.3],
            holdout_modulus: 10,
        }
    }
}

/// Raw grid values are floored here after each update so that a vertex
/// pushed negative keeps a path back to positive density.
pub const RAW_VALUE_FLOOR: f64 = -10.0;

/// Weight-consolidation (distortion) loss `Σ_{i,j} w_i w_j |t_i − t_j|` over
/// all ordered pairs.
///
/// Zero iff all weight mass sits at a single distance. Accepts unsorted
/// input; sorted distances take an O(N) path.
pub fn l_dist(w: &[f64], t: &[f64]) -> f64 {
    assert_eq!(w.len(), t.len());
    if t.windows(2).all(|p| p[0] <= p[1]) {
        return l_dist_sorted(w, t);
    }
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.sort_by(|&a, &b| t[a].partial_cmp(&t[b]).unwrap());
    let ws: Vec<f64> = order.iter().map(|&i| w[i]).collect();
    let ts: Vec<f64> = order.iter().map(|&i| t[i]).collect();
    l_dist_sorted(&ws, &ts)
}

fn l_dist_sorted(w: &[f64], t: &[f64]) -> f64 {
    // Σ_{i,j} w_i w_j |t_i − t_j| = 2 Σ_j w_j (t_j P_{j−1} − Q_{j−1})
    let mut p = 0.0; // running Σ w
    let mut q = 0.0; // running Σ w t
    let mut acc = 0.0;
    for j in 0..w.len() {
        acc += w[j] * (t[j] * p - q);
        p += w[j];
        q += w[j] * t[j];
    }
    2.0 * acc
}

/// Gradient of [`l_dist`] with respect to the weights (sorted distances):
/// `∂L/∂w_k = 2 Σ_j w_j |t_k − t_j|`.
pub fn l_dist_weight_gradient(w: &[f64], t: &[f64]) -> Vec<f64> {
    debug_assert!(t.windows(2).all(|p| p[0] <= p[1]));
    let n = w.len();
    let mut p = vec![0.0; n + 1];
    let mut q = vec![0.0; n + 1];
    for i in 0..n {
        p[i + 1] = p[i] + w[i];
        q[i + 1] = q[i] + w[i] * t[i];
    }
    let (ptot, qtot) = (p[n], q[n]);
    (0..n)
        .map(|k| {
            let below = t[k] * p[k + 1] - q[k + 1];
            let above = (qtot - q[k + 1]) - t[k] * (ptot - p[k + 1]);
            2.0 * (below + above)
        })
        .collect()
}

/// Annealing weight at iteration `i` of `n`: `λ1 · λ2 · i / n`, the closed
/// form of the log-sum schedule (0 at i = 0).
pub fn lambda_schedule(i: usize, n: usize, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * lambda2 * i as f64 / n as f64
}

/// Geometric alternative schedule `λ1 · λ2^(i/n)`.
pub fn lambda_schedule_geometric(i: usize, n: usize, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * lambda2.powf(i as f64 / n as f64)
}

/// Mean squared error over a ray batch.
pub fn photometric_loss(rendered: &[f64], target: &[f64]) -> f64 {
    assert_eq!(rendered.len(), target.len());
    if rendered.is_empty() {
        return 0.0;
    }
    rendered
        .iter()
        .zip(target)
        .map(|(r, t)| (r - t) * (r - t))
        .sum::<f64>()
        / rendered.len() as f64
}

/// One line of the per-iteration fit log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitLogRow {
    pub iteration: usize,
    pub lambda: f64,
    /// Data term (photometric MSE or depth MAE depending on mode).
    pub photometric_loss: f64,
    pub dist_loss: f64,
    pub total_loss: f64,
}

/// Writes fit log rows as CSV.
pub fn write_fit_log_csv(rows: &[FitLogRow], w: &mut impl std::io::Write) -> Result<()> {
    writeln!(w, "iteration,lambda,photometric_loss,dist_loss,total_loss")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.iteration, r.lambda, r.photometric_loss, r.dist_loss, r.total_loss
        )?;
    }
    Ok(())
}

/// Held-out evaluation of a fitted grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub pixels: usize,
    pub photometric_mse: f64,
    /// Mean absolute depth error against observation depth, when available.
    pub depth_mae: Option<f64>,
    /// Mean weight-consolidation loss on held-out rays.
    pub mean_l_dist: f64,
}

/// Output of [`fit_grid`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub grid: VoxelGrid,
    pub log: Vec<FitLogRow>,
    pub holdout: HoldoutReport,
}

fn is_holdout(cfg: &FitConfig, obs_idx: usize, pixel_idx: usize) -> bool {
    if cfg.holdout_modulus <= 1 {
        return false;
    }
    derive_seed(cfg.seed ^ 0x484f_4c44, obs_idx as u64, pixel_idx as u64)
        % cfg.holdout_modulus as u64
        == 0
}

struct RayWork {
    obs_idx: usize,
    px: u32,
    py: u32,
    seed: u64,
}

struct RayGrads {
    data_loss: f64,
    dist_loss: f64,
    sigma_grads: Vec<(u32, f64)>,
    radiance_grads: Vec<(u32, f64)>,
}

fn fit_ray(
    grid: &VoxelGrid,
    obs: &[Observation],
    work: &RayWork,
    coarse_t: &[f64],
    cfg: &FitConfig,
    lambda: f64,
) -> RayGrads {
    let ob = &obs[work.obs_idx];
    let cam = &ob.camera;
    let ray = make_pixel_ray(cam, work.px, work.py).expect("pixel in range");
    let pix = (work.py * cam.width + work.px) as usize;

    // coarse pass for importance sampling
    let coarse_sigma: Vec<f64> = coarse_t
        .iter()
        .map(|&ti| grid.density(&ray.at(ti)))
        .collect();
    let coarse_delta = deltas(coarse_t);
    let w_coarse = weights(&coarse_sigma, &coarse_delta);
    let t = if cfg.fine_samples > 0 {
        hierarchical_resample(coarse_t, &w_coarse, cfg.fine_samples, work.seed)
    } else {
        coarse_t.to_vec()
    };
    let delta = deltas(&t);

    let n = t.len();
    let mut sigma = vec![0.0; n];
    let mut color = vec![0.0; n];
    let mut interp = Vec::with_capacity(n);
    for i in 0..n {
        let p = ray.at(t[i]);
        let ci = grid.cell_interp(&p);
        if let Some(ci) = &ci {
            let mut s = 0.0;
            let mut c = 0.0;
            for (corner, wgt) in ci.corners.iter().zip(ci.weights) {
                s += grid.values[*corner].max(0.0) * wgt;
                if let Some(rad) = &grid.radiance {
                    c += rad[*corner].clamp(0.0, 1.0) * wgt;
                }
            }
            sigma[i] = s;
            color[i] = c;
        }
        interp.push(ci);
    }

    let w = weights(&sigma, &delta);
    let dist = l_dist(&w, &t);

    // dL/dw collects the consolidation term plus, in photometric mode, the
    // color term
    let mut dldw = l_dist_weight_gradient(&w, &t);
    for v in &mut dldw {
        *v *= lambda;
    }

    let data_loss;
    let mut dlds: Vec<f64>;
    let mut dldc = vec![0.0; n];
    match cfg.mode {
        FitMode::Photometric => {
            let rendered: f64 = w.iter().zip(&color).map(|(wi, ci)| wi * ci).sum();
            let target = ob.image[pix];
            let r = rendered - target;
            data_loss = r * r;
            for i in 0..n {
                dldw[i] += 2.0 * r * color[i];
                dldc[i] = 2.0 * r * w[i];
            }
            dlds = backprop_weights_to_sigma(&sigma, &delta, &dldw);
        }
        FitMode::DepthSupervised => {
            let d = depth_terminal(&sigma, &delta, &t);
            let target = ob
                .depth
                .as_ref()
                .map(|dd| dd[pix])
                .unwrap_or(cam.t_far);
            let r = d - target;
            data_loss = r.abs();
            let sign = if r >= 0.0 { 1.0 } else { -1.0 };
            dlds = depth_terminal_sigma_gradient(&sigma, &delta, &t);
            for v in &mut dlds {
                *v *= sign;
            }
            let from_dist = backprop_weights_to_sigma(&sigma, &delta, &dldw);
            for (a, b) in dlds.iter_mut().zip(from_dist) {
                *a += b;
            }
        }
    }

    // scatter per-sample gradients onto live grid vertices
    let mut sigma_grads = Vec::new();
    let mut radiance_grads = Vec::new();
    for i in 0..n {
        let Some(ci) = &interp[i] else { continue };
        if dlds[i] != 0.0 {
            for (corner, wgt) in ci.corners.iter().zip(ci.weights) {
                if grid.values[*corner] >= 0.0 && wgt != 0.0 {
                    sigma_grads.push((*corner as u32, dlds[i] * wgt));
                }
            }
        }
        if dldc[i] != 0.0 {
            for (corner, wgt) in ci.corners.iter().zip(ci.weights) {
                if wgt != 0.0 {
                    radiance_grads.push((*corner as u32, dldc[i] * wgt));
                }
            }
        }
    }

    RayGrads {
        data_loss,
        dist_loss: dist,
        sigma_grads,
        radiance_grads,
    }
}

/// Fits a voxel grid to the observations by Adam on the raw vertex values.
///
/// Deterministic for a fixed config. Works best with eight or more views
/// spread over the visible hemisphere and a bounding box that encloses the
/// scene.
pub fn fit_grid(observations: &[Observation], cfg: &FitConfig) -> Result<FitResult> {
    if observations.is_empty() {
        return Err(Error::invalid("fit requires at least one observation"));
    }
    for ob in observations {
        ob.validate()?;
    }
    if cfg.mode == FitMode::DepthSupervised && observations.iter().any(|o| o.depth.is_none()) {
        return Err(Error::invalid(
            "depth-supervised fit requires depth channels on all observations",
        ));
    }
    if cfg.iterations == 0 {
        return Err(Error::invalid("fit requires at least one iteration"));
    }
    if cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0 {
        return Err(Error::invalid("lambda constants must be nonnegative"));
    }

    let bbox_min = nalgebra::Vector3::from(cfg.bbox_min);
    let bbox_max = nalgebra::Vector3::from(cfg.bbox_max);
    let mut grid = VoxelGrid::new(cfg.resolution, bbox_min, bbox_max)?;
    let param_count = grid.values.len();
    grid.radiance = Some(vec![0.5; param_count]);

    let cam0 = &observations[0].camera;
    let coarse_t = sample_logspace(cam0.t_near, cam0.t_far, cfg.coarse_samples.max(2))?;

    let mut adam_sigma = Adam::new(param_count);
    let mut adam_rad = Adam::new(param_count);
    let mut grad_sigma = vec![0.0; param_count];
    let mut grad_rad = vec![0.0; param_count];
    let mut log = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let lambda = if cfg.geometric_lambda {
            lambda_schedule_geometric(iter + 1, cfg.iterations, cfg.lambda1, cfg.lambda2)
        } else {
            lambda_schedule(iter + 1, cfg.iterations, cfg.lambda1, cfg.lambda2)
        };

        // draw the training batch, skipping held-out pixels
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1000 + iter as u64, 0));
        let mut batch = Vec::with_capacity(cfg.rays_per_iter);
        let mut guard = 0usize;
        while batch.len() < cfg.rays_per_iter {
            let obs_idx = rng.gen_range(0..observations.len());
            let cam = &observations[obs_idx].camera;
            let px = rng.gen_range(0..cam.width);
            let py = rng.gen_range(0..cam.height);
            let pix = (py * cam.width + px) as usize;
            guard += 1;
            if is_holdout(cfg, obs_idx, pix) && guard < cfg.rays_per_iter * 20 {
                continue;
            }
            let seed = derive_seed(cfg.seed, iter as u64, batch.len() as u64);
            batch.push(RayWork {
                obs_idx,
                px,
                py,
                seed,
            });
        }

        let results: Vec<RayGrads> = batch
            .par_iter()
            .map(|wk| fit_ray(&grid, observations, wk, &coarse_t, cfg, lambda))
            .collect();

        let inv_n = 1.0 / cfg.rays_per_iter as f64;
        grad_sigma.iter_mut().for_each(|v| *v = 0.0);
        grad_rad.iter_mut().for_each(|v| *v = 0.0);
        let mut data_sum = 0.0;
        let mut dist_sum = 0.0;
        for r in &results {
            data_sum += r.data_loss;
            dist_sum += r.dist_loss;
            for (idx, g) in &r.sigma_grads {
                grad_sigma[*idx as usize] += g * inv_n;
            }
            for (idx, g) in &r.radiance_grads {
                grad_rad[*idx as usize] += g * inv_n;
            }
        }
        let data_mean = data_sum * inv_n;
        let dist_mean = dist_sum * inv_n;
        let total = data_mean + lambda * dist_mean;
        if !total.is_finite() {
            return Err(Error::FitFailure { iteration: iter });
        }

        let lr = lr_log_decay(iter, cfg.iterations, cfg.lr_start, cfg.lr_end);
        let lr_rad = lr_log_decay(
            iter,
            cfg.iterations,
            cfg.lr_radiance_start,
            cfg.lr_radiance_end,
        );
        adam_sigma.step(&mut grid.values, &grad_sigma, lr);
        for v in &mut grid.values {
            if *v < RAW_VALUE_FLOOR {
                *v = RAW_VALUE_FLOOR;
            }
        }
        if let Some(rad) = &mut grid.radiance {
            adam_rad.step(rad, &grad_rad, lr_rad);
            for v in rad.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }

        log.push(FitLogRow {
            iteration: iter + 1,
            lambda,
            photometric_loss: data_mean,
            dist_loss: dist_mean,
            total_loss: total,
        });
    }

    let holdout = evaluate_holdout(&grid, observations, cfg, &coarse_t);
    Ok(FitResult {
        grid,
        log,
        holdout,
    })
}

/// Evaluates photometric error, depth error, and weight spread on the
/// held-out pixels (all pixels when the holdout is disabled).
pub fn evaluate_holdout(
    grid: &VoxelGrid,
    observations: &[Observation],
    cfg: &FitConfig,
    coarse_t: &[f64],
) -> HoldoutReport {
    let mut jobs = Vec::new();
    for (obs_idx, ob) in observations.iter().enumerate() {
        for pix in 0..ob.camera.pixel_count() {
            if cfg.holdout_modulus <= 1 || is_holdout(cfg, obs_idx, pix) {
                jobs.push((obs_idx, pix));
            }
        }
    }
    let stats: Vec<(f64, Option<f64>, f64)> = jobs
        .par_iter()
        .map(|(obs_idx, pix)| {
            let ob = &observations[*obs_idx];
            let cam = &ob.camera;
            let px = (*pix % cam.width as usize) as u32;
            let py = (*pix / cam.width as usize) as u32;
            let ray = make_pixel_ray(cam, px, py).expect("pixel in range");
            let seed = derive_seed(cfg.seed ^ 0x4556_414c, *obs_idx as u64, *pix as u64);
            let s = crate::render::sample_field_ray(grid, &ray, coarse_t, cfg.fine_samples, seed);
            let w = s.weights();
            let color: f64 = w
                .iter()
                .enumerate()
                .map(|(i, wi)| wi * grid.sample_radiance(&ray.at(s.t[i])))
                .sum();
            let sq = (color - ob.image[*pix]).powi(2);
            let dep = ob
                .depth
                .as_ref()
                .map(|dd| (s.depth_terminal() - dd[*pix]).abs());
            let ld = l_dist(&w, &s.t);
            (sq, dep, ld)
        })
        .collect();
    let n = stats.len().max(1) as f64;
    let photometric_mse = stats.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_l_dist = stats.iter().map(|s| s.2).sum::<f64>() / n;
    let depth_count = stats.iter().filter(|s| s.1.is_some()).count();
    let depth_mae = if depth_count > 0 {
        Some(stats.iter().filter_map(|s| s.1).sum::<f64>() / depth_count as f64)
    } else {
        None
    };
    HoldoutReport {
        pixels: stats.len(),
        photometric_mse,
        depth_mae,
        mean_l_dist,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn l_dist_single_weight_is_zero() {
        let w = [0.0, 0.7, 0.0];
        let t = [0.1, 0.5, 0.9];
        assert_eq!(l_dist(&w, &t), 0.0);
    }

    #[test]
    fn l_dist_hand_value() {
        assert_relative_eq!(l_dist(&[0.5, 0.5], &[0.0, 1.0]), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn l_dist_homogeneous_in_t() {
        let w = [0.2, 0.3, 0.5];
        let t = [0.1, 0.4, 0.9];
        let base = l_dist(&w, &t);
        let scaled: Vec<f64> = t.iter().map(|v| v * 3.5).collect();
        assert_relative_eq!(l_dist(&w, &scaled), 3.5 * base, epsilon = 1e-12);
    }

    #[test]
    fn l_dist_permutation_invariant() {
        let w = [0.2, 0.3, 0.5, 0.1];
        let t = [0.1, 0.4, 0.9, 0.2];
        let wp = [0.1, 0.5, 0.2, 0.3];
        let tp = [0.2, 0.9, 0.1, 0.4];
        assert_relative_eq!(l_dist(&w, &t), l_dist(&wp, &tp), epsilon = 1e-12);
    }

    #[test]
    fn l_dist_merging_mass_decreases_loss() {
        let w = [0.3, 0.3, 0.4];
        let t = [0.2, 0.6, 0.8];
        let spread = l_dist(&w, &t);
        let merged_w = [0.6, 0.0, 0.4];
        let merged = l_dist(&merged_w, &t);
        assert!(merged < spread);
    }

    #[test]
    fn l_dist_weight_gradient_matches_fd() {
        let w = [0.2, 0.1, 0.4, 0.3];
        let t = [0.1, 0.3, 0.55, 0.8];
        let g = l_dist_weight_gradient(&w, &t);
        let h = 1e-7;
        for k in 0..4 {
            let mut hi = w;
            let mut lo = w;
            hi[k] += h;
            lo[k] -= h;
            let fd = (l_dist(&hi, &t) - l_dist(&lo, &t)) / (2.0 * h);
            assert_relative_eq!(g[k], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn lambda_schedule_endpoints() {
        assert_eq!(lambda_schedule(0, 100, 0.01, 10.0), 0.0);
        assert_relative_eq!(lambda_schedule(100, 100, 0.01, 10.0), 0.1, epsilon = 1e-15);
        assert_relative_eq!(lambda_schedule(50, 100, 0.01, 10.0), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn lambda_schedule_monotone_linear() {
        let n = 37;
        let mut prev = -1.0;
        for i in 0..=n {
            let v = lambda_schedule(i, n, 0.02, 5.0);
            assert!(v >= prev);
            // exact linearity
            assert_relative_eq!(v, 0.1 * i as f64 / n as f64, epsilon = 1e-15);
            prev = v;
        }
    }

    #[test]
    fn photometric_loss_examples() {
        let a = [0.1, 0.5, 0.9];
        assert_eq!(photometric_loss(&a, &a), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert_relative_eq!(photometric_loss(&b, &a), 0.01, epsilon = 1e-12);
        assert_relative_eq!(
            photometric_loss(&a, &b),
            photometric_loss(&b, &a),
            epsilon = 1e-15
        );
    }

    proptest! {
        #[test]
        fn l_dist_nonnegative(
            w in proptest::collection::vec(0.0..1.0f64, 2..12),
            t0 in 0.05..0.5f64,
        ) {
            let t: Vec<f64> = (0..w.len()).map(|i| t0 + i as f64 * 0.07).collect();
            prop_assert!(l_dist(&w, &t) >= 0.0);
        }
    }
}
