//! Ray discretization and differentiable volume compositing.
//!
//! A ray is discretized at increasing distances `t_i` with intervals `δ_i`;
//! densities `σ_i` turn into alphas `α_i = 1 − exp(−σ_i δ_i)`, transmittances
//! `T_i = exp(−Σ_{j<i} σ_j δ_j)` and visibility weights `w_i = T_i α_i`.
//!
//! Two depth estimators are provided. `depth` is the plain weighted distance
//! `Σ w_i t_i`, which degenerates to 0 on transparent rays. `depth_terminal`
//! assigns all residual transmittance to the last sample so the implied
//! weights sum to one and a no-hit ray reports the far bound; this is the
//! estimator the registration loss is built on.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::field::DensityField;
use crate::geometry::{Ray, RigidTransform};
use crate::{derive_seed, Error, Result};

/// Pinhole perspective camera.
///
/// `pose` is camera-to-world; the camera looks down its local +z axis with
/// x right and y down. Pixel `(px, py)` is sampled at its center
/// `(px + 0.5, py + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: RigidTransform,
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point in pixels.
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Near/far sampling bounds along rays, in meters.
    pub t_near: f64,
    pub t_far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_near > 0.0 && self.t_far > self.t_near) {
            return Err(Error::invalid("camera requires 0 < t_near < t_far"));
        }
        if !(self.focal > 0.0) {
            return Err(Error::invalid("camera focal length must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image must be non-empty"));
        }
        Ok(())
    }

    /// Builds a camera at `eye` looking toward `target` with the world +y
    /// axis as the approximate up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
        t_near: f64,
        t_far: f64,
    ) -> Result<Camera> {
        let fwd = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera eye and target coincide"))?;
        let world_up = Vector3::new(0.0, 1.0, 0.0);
        let mut right = fwd.cross(&world_up);
        if right.norm() < 1e-9 {
            right = fwd.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let right = right.normalize();
        // y axis points down in image space
        let down = fwd.cross(&right).normalize();
        let rot = nalgebra::Matrix3::from_columns(&[right, down, fwd]);
        let cam = Camera {
            pose: RigidTransform::new(rot, eye),
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            t_near,
            t_far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// World-space ray through the center of pixel `(px, py)`.
pub fn make_pixel_ray(cam: &Camera, px: u32, py: u32) -> Result<Ray> {
    if px >= cam.width || py >= cam.height {
        return Err(Error::invalid(format!(
            "pixel ({px}, {py}) outside {}x{} image",
            cam.width, cam.height
        )));
    }
    let dir_cam = Vector3::new(
        (px as f64 + 0.5 - cam.cx) / cam.focal,
        (py as f64 + 0.5 - cam.cy) / cam.focal,
        1.0,
    );
    Ray::new(cam.pose.translation, cam.pose.rotation * dir_cam)
}

/// `n` distances with equal logarithmic spacing from `t_near` to `t_far`
/// inclusive.
pub fn sample_logspace(t_near: f64, t_far: f64, n: usize) -> Result<Vec<f64>> {
    if !(t_near > 0.0 && t_far > t_near) {
        return Err(Error::invalid("need 0 < t_near < t_far"));
    }
    if n < 2 {
        return Err(Error::invalid("need at least 2 samples"));
    }
    let (ln0, ln1) = (t_near.ln(), t_far.ln());
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let s = i as f64 / (n - 1) as f64;
        t.push((ln0 + (ln1 - ln0) * s).exp());
    }
    // pin the endpoints exactly
    t[0] = t_near;
    t[n - 1] = t_far;
    Ok(t)
}

/// Intervals δ_i between consecutive distances; the last interval repeats the
/// previous one (the terminal-weighted depth never consumes it).
pub fn deltas(t: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut d = Vec::with_capacity(n);
    for i in 0..n.saturating_sub(1) {
        d.push(t[i + 1] - t[i]);
    }
    if n >= 2 {
        d.push(t[n - 1] - t[n - 2]);
    } else if n == 1 {
        d.push(1.0);
    }
    d
}

fn next_strictly_above(v: f64) -> f64 {
    if v == f64::INFINITY {
        return v;
    }
    let bits = v.to_bits();
    if v >= 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

/// Draws `m` new distances by stratified inverse-CDF sampling of the
/// piecewise-constant PDF proportional to `w` over the bins of `t`, then
/// merges them with the input distances.
///
/// Bin `i` spans `[t_i, t_{i+1})` with mass `w_i`; the final weight has no
/// bin and is ignored. All-zero masses fall back to a uniform PDF. The
/// merged output is sorted and strictly increasing (exact duplicates are
/// nudged up by one ulp).
pub fn hierarchical_resample(t: &[f64], w: &[f64], m: usize, seed: u64) -> Vec<f64> {
    assert_eq!(t.len(), w.len(), "distances and weights must match");
    assert!(t.len() >= 2, "need at least one bin");
    let nbins = t.len() - 1;
    let mut cdf = Vec::with_capacity(nbins + 1);
    cdf.push(0.0);
    let mut total = 0.0;
    for wi in &w[..nbins] {
        debug_assert!(*wi >= 0.0, "weights must be nonnegative");
        total += wi.max(0.0);
        cdf.push(total);
    }
    let uniform = total <= 0.0;
    if uniform {
        for (i, c) in cdf.iter_mut().enumerate() {
            *c = i as f64;
        }
        total = nbins as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fine = Vec::with_capacity(m);
    for j in 0..m {
        let u = (j as f64 + rng.gen::<f64>()) / m as f64 * total;
        // first bin whose upper cdf exceeds u
        let mut idx = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(k) => k,
            Err(k) => k.saturating_sub(1),
        };
        idx = idx.min(nbins - 1);
        // skip zero-mass bins the search may have landed on
        while cdf[idx + 1] - cdf[idx] <= 0.0 && idx + 1 < nbins {
            idx += 1;
        }
        let span = cdf[idx + 1] - cdf[idx];
        let frac = if span > 0.0 {
            ((u - cdf[idx]) / span).clamp(0.0, 1.0)
        } else {
            0.5
        };
        fine.push(t[idx] + frac * (t[idx + 1] - t[idx]));
    }
    let mut merged = Vec::with_capacity(t.len() + m);
    merged.extend_from_slice(t);
    merged.extend_from_slice(&fine);
    merged.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for i in 1..merged.len() {
        if merged[i] <= merged[i - 1] {
            merged[i] = next_strictly_above(merged[i - 1]);
        }
    }
    merged
}

/// Per-sample transmittance `T_i = exp(−Σ_{j<i} σ_j δ_j)`; `T_1 = 1`.
pub fn transmittance(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sigma.len());
    let mut tau = 0.0;
    for i in 0..sigma.len() {
        out.push((-tau).exp());
        tau += sigma[i] * delta[i];
    }
    out
}

/// Visibility weights `w_i = T_i (1 − exp(−σ_i δ_i))`.
pub fn weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sigma.len());
    let mut tau = 0.0;
    for i in 0..sigma.len() {
        let t = (-tau).exp();
        let a = 1.0 - (-sigma[i] * delta[i]).exp();
        out.push(t * a);
        tau += sigma[i] * delta[i];
    }
    out
}

/// Composited value `Σ w_i c_i`.
pub fn composite(w: &[f64], c: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), c.len());
    w.iter().zip(c).map(|(wi, ci)| wi * ci).sum()
}

/// Expected termination depth `Σ w_i t_i` (0 on a fully transparent ray).
pub fn depth(w: &[f64], t: &[f64]) -> f64 {
    composite(w, t)
}

/// Terminal-weighted depth: `Σ_{i<N} w_i t_i + T_N t_N`.
///
/// The residual transmittance after sample N−1 is assigned to the final
/// distance, so the implied weights sum to one and a transparent ray reports
/// `t_N`. The final sample's own density never enters.
pub fn depth_terminal(sigma: &[f64], delta: &[f64], t: &[f64]) -> f64 {
    let n = t.len();
    assert!(n >= 1);
    let mut tau = 0.0;
    let mut acc = 0.0;
    for i in 0..n - 1 {
        let tr = (-tau).exp();
        let a = 1.0 - (-sigma[i] * delta[i]).exp();
        acc += tr * a * t[i];
        tau += sigma[i] * delta[i];
    }
    acc + (-tau).exp() * t[n - 1]
}

/// Gradient of [`depth_terminal`] with respect to each density sample.
///
/// Uses the telescoped form `D' = t_1 + Σ_{i≥2} T_i (t_i − t_{i−1})`, giving
/// `∂D'/∂σ_k = −δ_k Σ_{i>k} T_i (t_i − t_{i−1})`; the last sample has zero
/// gradient.
pub fn depth_terminal_sigma_gradient(sigma: &[f64], delta: &[f64], t: &[f64]) -> Vec<f64> {
    let n = t.len();
    let tr = transmittance(sigma, delta);
    // suffix[k] = Σ_{i≥k} T_i (t_i − t_{i−1}) over i ≥ 1 (0-based)
    let mut suffix = vec![0.0; n + 1];
    for i in (1..n).rev() {
        suffix[i] = suffix[i + 1] + tr[i] * (t[i] - t[i - 1]);
    }
    (0..n).map(|k| -delta[k] * suffix[k + 1]).collect()
}

/// Pulls a loss gradient on the visibility weights back to the densities.
///
/// Given `dL/dw_i`, returns `dL/dσ_k = δ_k (dL/dw_k · T_k e^{−σ_k δ_k} −
/// Σ_{i>k} dL/dw_i · w_i)`.
pub fn backprop_weights_to_sigma(sigma: &[f64], delta: &[f64], dldw: &[f64]) -> Vec<f64> {
    let n = sigma.len();
    let tr = transmittance(sigma, delta);
    let w = weights(sigma, delta);
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + dldw[i] * w[i];
    }
    (0..n)
        .map(|k| delta[k] * (dldw[k] * tr[k] * (-sigma[k] * delta[k]).exp() - suffix[k + 1]))
        .collect()
}

/// Per-ray discretization: distances, intervals, and sampled densities.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl RaySamples {
    pub fn from_distances(t: Vec<f64>, sigma: Vec<f64>) -> Self {
        assert_eq!(t.len(), sigma.len());
        let delta = deltas(&t);
        RaySamples { t, delta, sigma }
    }

    pub fn transmittance(&self) -> Vec<f64> {
        transmittance(&self.sigma, &self.delta)
    }

    pub fn weights(&self) -> Vec<f64> {
        weights(&self.sigma, &self.delta)
    }

    pub fn depth(&self) -> f64 {
        depth(&self.weights(), &self.t)
    }

    pub fn depth_terminal(&self) -> f64 {
        depth_terminal(&self.sigma, &self.delta, &self.t)
    }
}

/// Samples a field along a ray: log-spaced coarse samples, importance
/// resampling on the coarse visibility weights, then density evaluation on
/// the merged set.
pub fn sample_field_ray<F: DensityField + ?Sized>(
    field: &F,
    ray: &Ray,
    coarse_t: &[f64],
    fine_m: usize,
    seed: u64,
) -> RaySamples {
    let coarse_sigma: Vec<f64> = coarse_t
        .iter()
        .map(|&ti| field.density(&ray.at(ti)))
        .collect();
    let t = if fine_m > 0 {
        let coarse_delta = deltas(coarse_t);
        let w = weights(&coarse_sigma, &coarse_delta);
        hierarchical_resample(coarse_t, &w, fine_m, seed)
    } else {
        coarse_t.to_vec()
    };
    let sigma: Vec<f64> = t.iter().map(|&ti| field.density(&ray.at(ti))).collect();
    RaySamples::from_distances(t, sigma)
}

/// A rendered depth image with per-pixel confidence.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    /// Terminal-weighted depth per pixel, row-major.
    pub depth: Vec<f64>,
    /// Maximum visibility weight along each pixel ray (surface confidence).
    pub max_weight: Vec<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

/// Renders the terminal-weighted depth of a field from a camera.
///
/// Deterministic for a fixed seed regardless of worker count: every pixel
/// derives its own sampling stream and rows are reduced in index order.
pub fn render_depth_map<F: DensityField + ?Sized>(
    field: &F,
    cam: &Camera,
    coarse_n: usize,
    fine_m: usize,
    seed: u64,
) -> Result<DepthMap> {
    cam.validate()?;
    let coarse_t = sample_logspace(cam.t_near, cam.t_far, coarse_n.max(2))?;
    let w = cam.width as usize;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..cam.height)
        .into_par_iter()
        .map(|py| {
            let mut drow = Vec::with_capacity(w);
            let mut mrow = Vec::with_capacity(w);
            for px in 0..cam.width {
                let ray = make_pixel_ray(cam, px, py).expect("pixel in range");
                let pixel_idx = py as u64 * cam.width as u64 + px as u64;
                let s = sample_field_ray(field, &ray, &coarse_t, fine_m, derive_seed(seed, pixel_idx, 0));
                drow.push(s.depth_terminal());
                let mw = s.weights().into_iter().fold(0.0f64, f64::max);
                mrow.push(mw);
            }
            (drow, mrow)
        })
        .collect();
    let mut depth = Vec::with_capacity(cam.pixel_count());
    let mut max_weight = Vec::with_capacity(cam.pixel_count());
    for (d, m) in rows {
        depth.extend(d);
        max_weight.extend(m);
    }
    Ok(DepthMap {
        width: cam.width,
        height: cam.height,
        depth,
        max_weight,
        t_near: cam.t_near,
        t_far: cam.t_far,
    })
}

impl DepthMap {
    /// Writes a grayscale little-endian PFM (scale −1.0, rows bottom-to-top).
    pub fn write_pfm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "Pf\n{} {}\n-1.0\n", self.width, self.height)?;
        for row in (0..self.height as usize).rev() {
            for col in 0..self.width as usize {
                let v = self.depth[row * self.width as usize + col] as f32;
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_pfm(&mut f)
    }

    /// Writes a 16-bit binary PGM with depth mapped linearly from
    /// `[t_near, t_far]` to `[0, 65535]`.
    pub fn write_pgm16(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let span = self.t_far - self.t_near;
        for v in &self.depth {
            let s = ((v - self.t_near) / span).clamp(0.0, 1.0);
            let q = (s * 65535.0).round() as u16;
            // PGM stores the most significant byte first
            w.write_all(&q.to_be_bytes())?;
        }
        Ok(())
    }

    pub fn save_pgm16(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_pgm16(&mut f)
    }

    /// Reads back a grayscale PFM written by [`DepthMap::write_pfm`].
    pub fn read_pfm(r: &mut impl BufRead) -> Result<DepthMap> {
        let mut header = String::new();
        for _ in 0..3 {
            let mut line = String::new();
            r.read_line(&mut line)?;
            header.push_str(&line);
        }
        let mut parts = header.split_ascii_whitespace();
        let kind = parts.next().ok_or_else(|| Error::format("pfm", "empty header"))?;
        if kind != "Pf" {
            return Err(Error::format("pfm", "expected grayscale 'Pf'"));
        }
        let width: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("pfm", "bad width"))?;
        let height: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("pfm", "bad height"))?;
        let scale: f64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("pfm", "bad scale"))?;
        if scale >= 0.0 {
            return Err(Error::format("pfm", "expected little-endian (negative scale)"));
        }
        let count = width as usize * height as usize;
        let mut data = vec![0f64; count];
        let mut buf = [0u8; 4];
        for row in (0..height as usize).rev() {
            for col in 0..width as usize {
                r.read_exact(&mut buf)?;
                data[row * width as usize + col] = f32::from_le_bytes(buf) as f64;
            }
        }
        Ok(DepthMap {
            width,
            height,
            depth: data,
            max_weight: vec![0.0; count],
            t_near: 0.0,
            t_far: 0.0,
        })
    }
}
