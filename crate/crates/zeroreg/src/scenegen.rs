//! Procedural front/back benchmark scenes with ground-truth transforms.
//!
//! A scene is a vine-like union of thin capsules viewed by two camera rigs on
//! opposite sides. Each rig's partial field keeps density only near surface
//! points whose first analytic hit is visible from that rig (visibility
//! carving), which is what produces the near-zero overlap between the two
//! partial reconstructions. The source field and its rig are re-expressed in
//! a displaced frame so that the sampled rigid transform is the ground truth
//! the registration must recover.
//!
//! Rig cameras are clustered tightly (a few centimeters of baseline): the
//! mutually visible surface is then limited to thin silhouette rims. Wide
//! arcs would see far around thin structures and defeat the zero-overlap
//! construction.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::field::{AnalyticField, DensityField, Primitive, TransformedField};
use crate::fit::Observation;
use crate::geometry::{
    matrix_to_pose, pose_error, pose_to_matrix, EulerPose, Ray, RigidTransform,
};
use crate::render::Camera;
use crate::{derive_seed, Error, Result};

/// Exact first-intersection distance of a ray with a sphere surface.
fn ray_sphere(origin: &Vector3<f64>, dir: &Vector3<f64>, center: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t0 = -b - s;
    if t0 >= 0.0 {
        return Some(t0);
    }
    let t1 = -b + s;
    if t1 >= 0.0 {
        return Some(t1);
    }
    None
}

/// Exact first-intersection distance of a ray with a capsule surface.
fn ray_capsule(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    r: f64,
) -> Option<f64> {
    let ba = b - a;
    let oa = origin - a;
    let baba = ba.norm_squared();
    let bard = ba.dot(dir);
    let baoa = ba.dot(&oa);
    let rdoa = dir.dot(&oa);
    let oaoa = oa.norm_squared();
    let qa = baba - bard * bard;
    let qb = baba * rdoa - baoa * bard;
    let qc = baba * oaoa - baoa * baoa - r * r * baba;
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t >= 0.0 && best.map_or(true, |bt| t < bt) {
            best = Some(t);
        }
    };
    if qa.abs() > 1e-15 * baba {
        let h = qb * qb - qa * qc;
        if h >= 0.0 {
            let s = h.sqrt();
            for t in [(-qb - s) / qa, (-qb + s) / qa] {
                let y = baoa + t * bard;
                if y >= 0.0 && y <= baba {
                    consider(t);
                }
            }
        }
    }
    if let Some(t) = ray_sphere(origin, dir, a, r) {
        consider(t);
    }
    if let Some(t) = ray_sphere(origin, dir, b, r) {
        consider(t);
    }
    best
}

/// A first surface hit: distance and the primitive that was struck.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceHit {
    pub t: f64,
    pub primitive: usize,
}

/// First intersection of a ray with the union surface, or `None` on a miss.
pub fn analytic_hit(field: &AnalyticField, ray: &Ray) -> Option<SurfaceHit> {
    let mut best: Option<SurfaceHit> = None;
    for (i, p) in field.primitives.iter().enumerate() {
        let t = match p {
            Primitive::Sphere { center, radius } => {
                ray_sphere(&ray.origin, &ray.direction, &Vector3::from(*center), *radius)
            }
            Primitive::Capsule { a, b, radius } => ray_capsule(
                &ray.origin,
                &ray.direction,
                &Vector3::from(*a),
                &Vector3::from(*b),
                *radius,
            ),
        };
        if let Some(t) = t {
            if best.map_or(true, |h| t < h.t) {
                best = Some(SurfaceHit { t, primitive: i });
            }
        }
    }
    best
}

/// Distance to the first surface intersection along the ray, or `None` when
/// the ray misses every primitive (callers map a miss to the far bound).
pub fn analytic_depth(field: &AnalyticField, ray: &Ray) -> Option<f64> {
    analytic_hit(field, ray).map(|h| h.t)
}

/// Boolean cell grid marking scene regions near rig-visible surface.
#[derive(Debug, Clone)]
pub struct VisibilityMask {
    pub n: usize,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    pub cells: Vec<bool>,
}

impl VisibilityMask {
    fn new(n: usize, bbox_min: Vector3<f64>, bbox_max: Vector3<f64>) -> Self {
        VisibilityMask {
            n,
            bbox_min,
            bbox_max,
            cells: vec![false; n * n * n],
        }
    }

    fn cell_edge(&self) -> f64 {
        let d = self.bbox_max - self.bbox_min;
        (d.x + d.y + d.z) / (3.0 * self.n as f64)
    }

    fn cell_of(&self, p: &Vector3<f64>) -> Option<(usize, usize, usize)> {
        let d = self.bbox_max - self.bbox_min;
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let u = (p[k] - self.bbox_min[k]) / d[k];
            if !(0.0..=1.0).contains(&u) {
                return None;
            }
            idx[k] = ((u * self.n as f64) as usize).min(self.n - 1);
        }
        Some((idx[0], idx[1], idx[2]))
    }

    #[inline]
    fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.n * (iy + self.n * iz)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match self.cell_of(p) {
            Some((ix, iy, iz)) => self.cells[self.index(ix, iy, iz)],
            None => false,
        }
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    fn mark(&mut self, p: &Vector3<f64>) {
        if let Some((ix, iy, iz)) = self.cell_of(p) {
            let i = self.index(ix, iy, iz);
            self.cells[i] = true;
        }
    }

    /// Morphological dilation by `steps` passes of the 26-neighborhood.
    fn dilate(&mut self, steps: usize) {
        let n = self.n as isize;
        for _ in 0..steps {
            let src = self.cells.clone();
            for iz in 0..n {
                for iy in 0..n {
                    for ix in 0..n {
                        let i = self.index(ix as usize, iy as usize, iz as usize);
                        if src[i] {
                            continue;
                        }
                        'probe: for dz in -1..=1isize {
                            for dy in -1..=1isize {
                                for dx in -1..=1isize {
                                    let (jx, jy, jz) = (ix + dx, iy + dy, iz + dz);
                                    if jx < 0 || jy < 0 || jz < 0 || jx >= n || jy >= n || jz >= n {
                                        continue;
                                    }
                                    if src[self.index(jx as usize, jy as usize, jz as usize)] {
                                        self.cells[i] = true;
                                        break 'probe;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// A partial reconstruction: the full analytic field gated by a visibility
/// mask. Density is zero outside the mask shell.
#[derive(Debug, Clone)]
pub struct CarvedField {
    pub field: AnalyticField,
    pub mask: VisibilityMask,
}

impl DensityField for CarvedField {
    fn density(&self, x: &Vector3<f64>) -> f64 {
        if self.mask.contains(x) {
            self.field.density(x)
        } else {
            0.0
        }
    }

    fn density_with_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        if self.mask.contains(x) {
            self.field.density_with_gradient(x)
        } else {
            (0.0, Vector3::zeros())
        }
    }
}

/// Scene construction parameters. All dimensions in meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneParams {
    pub n_primitives: usize,
    /// Capsule radius range (min, max).
    pub thickness_range: (f64, f64),
    pub interior_density: f64,
    pub edge_falloff: f64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub cams_per_rig: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    /// Distance of each rig from the scene center.
    pub rig_distance: f64,
    /// Lateral half-extent of the camera cluster; kept small so the two
    /// rigs share almost no visible surface.
    pub rig_spread: f64,
    pub t_near: f64,
    pub t_far: f64,
    /// Visibility-mask resolution (cells per axis).
    pub carve_resolution: usize,
    /// Dilation of the visible-hit mask, in cells.
    pub carve_dilation: usize,
    /// Ray grid per camera used to splat visible hits.
    pub carve_rays: u32,
    /// Maximum ground-truth rotation magnitude (degrees) and translation
    /// magnitude (millimeters) to sample.
    pub max_gt_rot_deg: f64,
    pub max_gt_trans_mm: f64,
    /// Debug flag: force the ground-truth transform to identity.
    pub force_identity_gt: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            n_primitives: 7,
            thickness_range: (0.0025, 0.006),
            interior_density: 2000.0,
            edge_falloff: 0.0015,
            bbox_min: [-0.28, -0.28, -0.28],
            bbox_max: [0.28, 0.28, 0.28],
            cams_per_rig: 8,
            image_width: 64,
            image_height: 64,
            focal: 44.0,
            rig_distance: 0.42,
            rig_spread: 0.02,
            t_near: 0.1,
            t_far: 1.0,
            carve_resolution: 96,
            carve_dilation: 2,
            carve_rays: 160,
            max_gt_rot_deg: 8.0,
            max_gt_trans_mm: 80.0,
            force_identity_gt: false,
        }
    }
}

/// Scene summary statistics stored alongside the case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeta {
    pub primitive_count: usize,
    pub overlap_fraction: f64,
}

/// A complete benchmark case: full ground-truth field, the two carved
/// partial fields, camera rigs, and the transform the registration must
/// recover.
pub struct SceneCase {
    pub seed: u64,
    pub params: SceneParams,
    /// Full analytic scene in the target (world) frame.
    pub full: AnalyticField,
    /// Partial field visible from the target rig, in the target frame.
    pub target_field: CarvedField,
    /// Partial field visible from the source rig, expressed in the source
    /// frame (query points are pushed through `gt` into the world).
    pub source_field: TransformedField<CarvedField>,
    /// Ground truth: maps source-frame points into the target frame.
    pub gt: EulerPose,
    pub target_cameras: Vec<Camera>,
    /// Source rig in the world frame (used for visibility and evaluation).
    pub source_cameras_world: Vec<Camera>,
    /// Source rig re-expressed in the source frame.
    pub source_cameras: Vec<Camera>,
    pub meta: SceneMeta,
}

/// Initialization perturbation bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub max_rot_deg: f64,
    pub max_trans_mm: f64,
    pub seed: u64,
}

fn uniform_unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm_squared();
        if n > 1e-4 && n <= 1.0 {
            return v / n.sqrt();
        }
    }
}

/// Composes `gt` with a random right-side perturbation whose rotation and
/// translation magnitudes respect the caps exactly (so
/// `pose_error(output, gt)` stays within `(max_rot_deg, max_trans_mm)`).
pub fn perturb_pose(gt: &EulerPose, spec: &PerturbSpec) -> EulerPose {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let axis = uniform_unit_vector(&mut rng);
    let angle = rng.gen_range(0.0..=1.0) * spec.max_rot_deg.to_radians();
    let tdir = uniform_unit_vector(&mut rng);
    let tmag = rng.gen_range(0.0..=1.0) * spec.max_trans_mm / 1000.0;
    let delta = RigidTransform::new(
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner(),
        tdir * tmag,
    );
    let base = pose_to_matrix(gt).expect("finite pose");
    matrix_to_pose(&base.compose(&delta))
}

/// Projects a world point into a camera; returns pixel coordinates and the
/// forward distance when the point lies inside the frustum.
fn project(cam: &Camera, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let local = cam.pose.rotation.transpose() * (p - cam.pose.translation);
    if local.z <= 1e-9 {
        return None;
    }
    let px = cam.focal * local.x / local.z + cam.cx;
    let py = cam.focal * local.y / local.z + cam.cy;
    if px < 0.0 || py < 0.0 || px > cam.width as f64 || py > cam.height as f64 {
        return None;
    }
    Some((px, py, local.z))
}

/// Whether a surface point is visible from at least one rig camera: it must
/// project into the frustum and be the first surface hit along the view ray.
pub fn visible_from_rig(field: &AnalyticField, cams: &[Camera], p: &Vector3<f64>) -> bool {
    for cam in cams {
        if project(cam, p).is_none() {
            continue;
        }
        let eye = cam.pose.translation;
        let dist = (p - eye).norm();
        if dist < 1e-9 {
            return true;
        }
        let ray = Ray::new(eye, p - eye).expect("valid view ray");
        if let Some(t) = analytic_depth(field, &ray) {
            if t >= dist - 1e-6 {
                return true;
            }
        }
    }
    false
}

fn carve_mask(field: &AnalyticField, cams: &[Camera], params: &SceneParams) -> VisibilityMask {
    let mut mask = VisibilityMask::new(
        params.carve_resolution,
        Vector3::from(params.bbox_min),
        Vector3::from(params.bbox_max),
    );
    let hits: Vec<Vec<Vector3<f64>>> = cams
        .par_iter()
        .map(|cam| {
            // denser virtual sensor with identical optics
            let scale = params.carve_rays as f64 / cam.width as f64;
            let dense = Camera {
                focal: cam.focal * scale,
                cx: cam.cx * scale,
                cy: cam.cy * scale,
                width: params.carve_rays,
                height: params.carve_rays,
                ..*cam
            };
            let mut pts = Vec::new();
            for py in 0..dense.height {
                for px in 0..dense.width {
                    let ray = crate::render::make_pixel_ray(&dense, px, py).expect("pixel");
                    if let Some(t) = analytic_depth(field, &ray) {
                        pts.push(ray.at(t));
                    }
                }
            }
            pts
        })
        .collect();
    for pts in hits {
        for p in pts {
            mask.mark(&p);
        }
    }
    mask.dilate(params.carve_dilation);
    mask
}

fn build_vine(rng: &mut impl Rng, params: &SceneParams) -> Vec<Primitive> {
    let (rmin, rmax) = params.thickness_range;
    let bmin = Vector3::from(params.bbox_min) * 0.92;
    let bmax = Vector3::from(params.bbox_max) * 0.92;
    let clamp_box = |p: Vector3<f64>| {
        Vector3::new(
            p.x.clamp(bmin.x, bmax.x),
            p.y.clamp(bmin.y, bmax.y),
            p.z.clamp(bmin.z, bmax.z),
        )
    };
    let mut prims = Vec::with_capacity(params.n_primitives);
    let base_y = -0.16;
    let half_x = 0.20;
    // horizontal cane along x
    let cane_a = Vector3::new(-half_x, base_y, rng.gen_range(-0.02..0.02));
    let cane_b = Vector3::new(half_x, base_y, rng.gen_range(-0.02..0.02));
    prims.push(Primitive::Capsule {
        a: cane_a.into(),
        b: cane_b.into(),
        radius: rmax,
    });
    // shoots growing upward from the cane
    while prims.len() < params.n_primitives {
        let s = rng.gen_range(0.08..0.92);
        let mut cur = cane_a + (cane_b - cane_a) * s;
        let mut dir = Vector3::new(
            rng.gen_range(-0.30..0.30),
            1.0,
            rng.gen_range(-0.45..0.45),
        )
        .normalize();
        let segments = rng.gen_range(1..=3usize).min(params.n_primitives - prims.len());
        for _ in 0..segments {
            let len = rng.gen_range(0.10..0.18);
            let end = clamp_box(cur + dir * len);
            prims.push(Primitive::Capsule {
                a: cur.into(),
                b: end.into(),
                radius: rng.gen_range(rmin..rmax),
            });
            cur = end;
            dir = (dir
                + Vector3::new(
                    rng.gen_range(-0.35..0.35),
                    rng.gen_range(-0.15..0.15),
                    rng.gen_range(-0.45..0.45),
                ))
            .normalize();
        }
    }
    prims
}

fn build_rig(
    rng: &mut impl Rng,
    params: &SceneParams,
    side: f64, // +1 front, −1 back
) -> Result<Vec<Camera>> {
    let mut cams = Vec::with_capacity(params.cams_per_rig);
    for i in 0..params.cams_per_rig {
        let frac = if params.cams_per_rig > 1 {
            i as f64 / (params.cams_per_rig - 1) as f64
        } else {
            0.5
        };
        let spread = params.rig_spread;
        let eye = Vector3::new(
            (frac * 2.0 - 1.0) * spread + rng.gen_range(-0.2..0.2) * spread,
            rng.gen_range(-1.0..1.0) * spread,
            side * (params.rig_distance + rng.gen_range(-0.01..0.01)),
        );
        let target = Vector3::new(
            rng.gen_range(-0.015..0.015),
            rng.gen_range(-0.015..0.015),
            rng.gen_range(-0.015..0.015),
        );
        cams.push(Camera::look_at(
            eye,
            target,
            params.focal,
            params.image_width,
            params.image_height,
            params.t_near,
            params.t_far,
        )?);
    }
    Ok(cams)
}

fn sample_gt(rng: &mut impl Rng, params: &SceneParams) -> RigidTransform {
    if params.force_identity_gt {
        return RigidTransform::identity();
    }
    let axis = uniform_unit_vector(rng);
    let angle = rng.gen_range(0.0..=1.0) * params.max_gt_rot_deg.to_radians();
    let tdir = uniform_unit_vector(rng);
    let tmag = rng.gen_range(0.0..=1.0) * params.max_gt_trans_mm / 1000.0;
    RigidTransform::new(
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner(),
        tdir * tmag,
    )
}

/// Generates a scene case from a seed and parameters.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SceneCase> {
    if params.n_primitives < 1 {
        return Err(Error::invalid("need at least one primitive"));
    }
    if params.thickness_range.0 <= 0.0 || params.thickness_range.1 < params.thickness_range.0 {
        return Err(Error::invalid("invalid thickness range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5343_454e, 0));
    let primitives = build_vine(&mut rng, params);
    let full = AnalyticField::new(
        primitives,
        params.interior_density,
        params.edge_falloff,
    )?;
    let target_cameras = build_rig(&mut rng, params, 1.0)?;
    let source_cameras_world = build_rig(&mut rng, params, -1.0)?;
    let gt_matrix = sample_gt(&mut rng, params);
    let gt = matrix_to_pose(&gt_matrix);

    let target_mask = carve_mask(&full, &target_cameras, params);
    let source_mask = carve_mask(&full, &source_cameras_world, params);
    if target_mask.occupied_cells() == 0 || source_mask.occupied_cells() == 0 {
        return Err(Error::GenerationFailure {
            seed,
            reason: "no visible surface from a rig".into(),
        });
    }

    let target_field = CarvedField {
        field: full.clone(),
        mask: target_mask,
    };
    let source_world = CarvedField {
        field: full.clone(),
        mask: source_mask,
    };
    // pull the source field and its rig back into the source frame
    let source_field = TransformedField::new(source_world, gt_matrix);
    let gt_inv = gt_matrix.inverse();
    let source_cameras: Vec<Camera> = source_cameras_world
        .iter()
        .map(|c| Camera {
            pose: gt_inv.compose(&c.pose),
            ..*c
        })
        .collect();

    let mut case = SceneCase {
        seed,
        params: params.clone(),
        full,
        target_field,
        source_field,
        gt,
        target_cameras,
        source_cameras_world,
        source_cameras,
        meta: SceneMeta {
            primitive_count: params.n_primitives,
            overlap_fraction: 0.0,
        },
    };
    case.meta.overlap_fraction = overlap_fraction(&case, 20_000);
    Ok(case)
}

/// Retries [`generate_scene`] over consecutive seeds when a draw degenerates.
pub fn generate_scene_retrying(seed: u64, params: &SceneParams, attempts: usize) -> Result<SceneCase> {
    let mut last = None;
    for k in 0..attempts.max(1) {
        match generate_scene(seed + k as u64, params) {
            Ok(case) => return Ok(case),
            Err(e @ Error::GenerationFailure { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::GenerationFailure {
        seed,
        reason: "exhausted attempts".into(),
    }))
}

fn primitive_surface_area(p: &Primitive) -> f64 {
    match p {
        Primitive::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        Primitive::Capsule { a, b, radius } => {
            let len = (Vector3::from(*b) - Vector3::from(*a)).norm();
            2.0 * std::f64::consts::PI * radius * len
                + 4.0 * std::f64::consts::PI * radius * radius
        }
    }
}

fn sample_surface_point(p: &Primitive, rng: &mut impl Rng) -> (Vector3<f64>, Vector3<f64>) {
    match p {
        Primitive::Sphere { center, radius } => {
            let n = uniform_unit_vector(rng);
            (Vector3::from(*center) + n * *radius, n)
        }
        Primitive::Capsule { a, b, radius } => {
            let a = Vector3::from(*a);
            let b = Vector3::from(*b);
            let len = (b - a).norm();
            let cyl_area = 2.0 * std::f64::consts::PI * radius * len;
            let cap_area = 4.0 * std::f64::consts::PI * radius * radius;
            if rng.gen_range(0.0..cyl_area + cap_area) < cyl_area {
                // lateral surface
                let axis = (b - a) / len;
                let s = rng.gen_range(0.0..1.0);
                let mut u = uniform_unit_vector(rng);
                u -= axis * u.dot(&axis);
                let un = u.norm();
                if un < 1e-9 {
                    return sample_surface_point(p, rng);
                }
                let n = u / un;
                (a + (b - a) * s + n * *radius, n)
            } else {
                let n = uniform_unit_vector(rng);
                let center = if n.dot(&(b - a)) >= 0.0 { b } else { a };
                (center + n * *radius, n)
            }
        }
    }
}

/// Monte Carlo estimate of the fraction of union-surface points visible from
/// both rigs.
pub fn overlap_fraction(case: &SceneCase, samples: usize) -> f64 {
    let field = &case.full;
    let areas: Vec<f64> = field.primitives.iter().map(primitive_surface_area).collect();
    let total_area: f64 = areas.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(case.seed, 0x4f56_4c50, 0));
    // draw candidate points up front so visibility checks can run in parallel
    let mut points = Vec::with_capacity(samples);
    let mut guard = 0usize;
    while points.len() < samples && guard < samples * 20 {
        guard += 1;
        let mut pick = rng.gen_range(0.0..total_area);
        let mut idx = 0;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                idx = i;
                break;
            }
            pick -= a;
        }
        let (p, _n) = sample_surface_point(&field.primitives[idx], &mut rng);
        // keep only points on the union surface (not buried in a neighbor)
        let buried = field
            .primitives
            .iter()
            .enumerate()
            .any(|(j, q)| j != idx && q.signed_distance(&p) < -1e-9);
        if !buried {
            points.push(p);
        }
    }
    if points.is_empty() {
        return 0.0;
    }
    let both: usize = points
        .par_iter()
        .map(|p| {
            let t = visible_from_rig(field, &case.target_cameras, p);
            let s = visible_from_rig(field, &case.source_cameras_world, p);
            usize::from(t && s)
        })
        .sum();
    both as f64 / points.len() as f64
}

/// Renders grayscale + exact-depth observations of an analytic field.
///
/// Shading is a headlight model on the surface normal; misses are black with
/// depth at the far bound.
pub fn make_observations(field: &AnalyticField, cams: &[Camera]) -> Vec<Observation> {
    cams.par_iter()
        .map(|cam| {
            let mut image = vec![0.0; cam.pixel_count()];
            let mut depth = vec![cam.t_far; cam.pixel_count()];
            for py in 0..cam.height {
                for px in 0..cam.width {
                    let ray = crate::render::make_pixel_ray(cam, px, py).expect("pixel");
                    if let Some(hit) = analytic_hit(field, &ray) {
                        let p = ray.at(hit.t);
                        let n = field.primitives[hit.primitive].signed_distance_gradient(&p);
                        let lambert = (-n.dot(&ray.direction)).max(0.0);
                        let idx = (py * cam.width + px) as usize;
                        image[idx] = 0.15 + 0.8 * lambert;
                        depth[idx] = hit.t.clamp(cam.t_near, cam.t_far);
                    }
                }
            }
            Observation {
                camera: *cam,
                image,
                depth: Some(depth),
            }
        })
        .collect()
}

impl SceneCase {
    /// Observations of the scene from the target rig (world frame).
    pub fn target_observations(&self) -> Vec<Observation> {
        make_observations(&self.full, &self.target_cameras)
    }

    /// Observations from the source rig with cameras re-expressed in the
    /// source frame; the images depict the world scene, so a field fitted
    /// against them lives in the source frame.
    pub fn source_observations(&self) -> Vec<Observation> {
        let world = make_observations(&self.full, &self.source_cameras_world);
        world
            .into_iter()
            .zip(&self.source_cameras)
            .map(|(mut ob, cam)| {
                ob.camera = *cam;
                ob
            })
            .collect()
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let file = SceneFile {
            format: "zeroreg-scene".into(),
            version: 1,
            seed: self.seed,
            params: self.params.clone(),
            primitives: self.full.primitives.clone(),
            gt: self.gt,
            target_cameras: self.target_cameras.clone(),
            source_cameras_world: self.source_cameras_world.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(dir.join("scene.json"), json)?;
        let readme = format!(
            "Synthetic front/back registration case (seed {}).\n\
             {} primitives; overlap fraction {:.4}.\n\
             Regenerate with: zeroreg gen-scene --seed {} --out <dir>\n\
             Files: scene.json (geometry, rigs, ground truth); optional\n\
             tgt.zngrid / src.zngrid written by `zeroreg fit`.\n",
            self.seed, self.meta.primitive_count, self.meta.overlap_fraction, self.seed
        );
        std::fs::write(dir.join("README.txt"), readme)?;
        Ok(())
    }

    /// Loads a scene directory, re-deriving the carved fields from the
    /// stored geometry (carving is deterministic).
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<SceneCase> {
        let dir = dir.as_ref();
        let json = std::fs::read_to_string(dir.join("scene.json"))?;
        let file: SceneFile = serde_json::from_str(&json)?;
        if file.format != "zeroreg-scene" {
            return Err(Error::format("scene", "not a scene file"));
        }
        let full = AnalyticField::new(
            file.primitives,
            file.params.interior_density,
            file.params.edge_falloff,
        )?;
        let gt_matrix = pose_to_matrix(&file.gt)?;
        let target_mask = carve_mask(&full, &file.target_cameras, &file.params);
        let source_mask = carve_mask(&full, &file.source_cameras_world, &file.params);
        let target_field = CarvedField {
            field: full.clone(),
            mask: target_mask,
        };
        let source_world = CarvedField {
            field: full.clone(),
            mask: source_mask,
        };
        let gt_inv = gt_matrix.inverse();
        let source_cameras = file
            .source_cameras_world
            .iter()
            .map(|c| Camera {
                pose: gt_inv.compose(&c.pose),
                ..*c
            })
            .collect();
        Ok(SceneCase {
            seed: file.seed,
            params: file.params,
            full,
            target_field,
            source_field: TransformedField::new(source_world, gt_matrix),
            gt: file.gt,
            target_cameras: file.target_cameras,
            source_cameras_world: file.source_cameras_world,
            source_cameras,
            meta: file.meta,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    format: String,
    version: u32,
    seed: u64,
    params: SceneParams,
    primitives: Vec<Primitive>,
    gt: EulerPose,
    target_cameras: Vec<Camera>,
    source_cameras_world: Vec<Camera>,
    meta: SceneMeta,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_params() -> SceneParams {
        SceneParams {
            carve_resolution: 64,
            carve_rays: 96,
            ..SceneParams::default()
        }
    }

    #[test]
    fn ray_through_sphere_center() {
        let f = AnalyticField::new(
            vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.1,
            }],
            1.0,
            0.01,
        )
        .unwrap();
        let ray = Ray::new(Vector3::new(0.0, 0.0, -0.5), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(analytic_depth(&f, &ray).unwrap(), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn missing_ray_returns_none() {
        let f = AnalyticField::new(
            vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.1,
            }],
            1.0,
            0.01,
        )
        .unwrap();
        let ray = Ray::new(Vector3::new(0.0, 0.5, -0.5), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(analytic_depth(&f, &ray).is_none());
    }

    #[test]
    fn tangent_ray_hits_capsule() {
        let f = AnalyticField::new(
            vec![Primitive::Capsule {
                a: [-0.1, 0.0, 0.0],
                b: [0.1, 0.0, 0.0],
                radius: 0.05,
            }],
            1.0,
            0.01,
        )
        .unwrap();
        // ray grazing the cylinder at y = 0.05 exactly
        let ray = Ray::new(Vector3::new(0.0, 0.05, -1.0), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let t = analytic_depth(&f, &ray).expect("tangent counts as a hit");
        assert_relative_eq!(t, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn capsule_hit_matches_ramp_onset() {
        // marching along the ray, density must start exactly at the hit
        let f = AnalyticField::new(
            vec![Primitive::Capsule {
                a: [-0.08, -0.03, 0.0],
                b: [0.1, 0.05, 0.02],
                radius: 0.03,
            }],
            100.0,
            0.005,
        )
        .unwrap();
        let ray = Ray::new(
            Vector3::new(0.02, 0.01, -0.4),
            Vector3::new(-0.05, 0.02, 1.0),
        )
        .unwrap();
        let t = analytic_depth(&f, &ray).unwrap();
        assert!(f.density(&ray.at(t - 1e-6)) == 0.0);
        assert!(f.density(&ray.at(t + 1e-4)) > 0.0);
    }

    #[test]
    fn ray_starting_inside_sphere_hits_exit() {
        let f = AnalyticField::new(
            vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.1,
            }],
            1.0,
            0.01,
        )
        .unwrap();
        let ray = Ray::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(analytic_depth(&f, &ray).unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn perturb_zero_spec_is_identity() {
        let gt = EulerPose::new(0.05, -0.02, 0.1, 0.03, -0.01, 0.02);
        let p = perturb_pose(
            &gt,
            &PerturbSpec {
                max_rot_deg: 0.0,
                max_trans_mm: 0.0,
                seed: 3,
            },
        );
        let e = pose_error(&p, &gt);
        assert!(e.rot_deg < 1e-9 && e.trans_mm < 1e-9);
    }

    #[test]
    fn perturb_respects_caps() {
        let gt = EulerPose::new(0.1, 0.05, -0.08, 0.04, 0.02, -0.06);
        for seed in 0..50 {
            let p = perturb_pose(
                &gt,
                &PerturbSpec {
                    max_rot_deg: 3.0,
                    max_trans_mm: 30.0,
                    seed,
                },
            );
            let e = pose_error(&p, &gt);
            assert!(e.rot_deg <= 3.0 + 1e-9, "rot {e:?}");
            assert!(e.trans_mm <= 30.0 + 1e-9, "trans {e:?}");
        }
    }

    #[test]
    fn perturb_deterministic() {
        let gt = EulerPose::ZERO;
        let spec = PerturbSpec {
            max_rot_deg: 3.0,
            max_trans_mm: 30.0,
            seed: 9,
        };
        assert_eq!(perturb_pose(&gt, &spec), perturb_pose(&gt, &spec));
    }

    #[test]
    fn scene_generation_deterministic() {
        let params = SceneParams {
            carve_resolution: 32,
            carve_rays: 48,
            ..SceneParams::default()
        };
        let a = generate_scene(7, &params).unwrap();
        let b = generate_scene(7, &params).unwrap();
        assert_eq!(
            serde_json::to_string(&a.full.primitives).unwrap(),
            serde_json::to_string(&b.full.primitives).unwrap()
        );
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.meta.overlap_fraction, b.meta.overlap_fraction);
        assert_eq!(a.target_field.mask.cells, b.target_field.mask.cells);
    }

    #[test]
    fn identity_gt_flag_keeps_source_in_place() {
        let params = SceneParams {
            force_identity_gt: true,
            carve_resolution: 32,
            carve_rays: 48,
            ..SceneParams::default()
        };
        let case = generate_scene(3, &params).unwrap();
        assert_eq!(case.gt, EulerPose::ZERO);
        // source field queried in its own frame equals the carved world field
        let p = Vector3::new(0.0, -0.16, 0.0);
        assert_relative_eq!(
            case.source_field.density(&p),
            case.source_field.inner.density(&p),
            epsilon = 1e-12
        );
    }

    #[test]
    fn single_capsule_scene_splits_front_back() {
        let params = SceneParams {
            n_primitives: 1,
            carve_resolution: 64,
            carve_rays: 128,
            ..small_params()
        };
        let case = generate_scene(11, &params).unwrap();
        // the cane is the single primitive; probe its front and back surface
        let Primitive::Capsule { a, b, radius } = case.full.primitives[0].clone() else {
            panic!("expected capsule");
        };
        let mid = (Vector3::from(a) + Vector3::from(b)) / 2.0;
        let front = mid + Vector3::new(0.0, 0.0, radius * 0.7);
        let back = mid - Vector3::new(0.0, 0.0, radius * 0.7);
        assert!(case.target_field.density(&front) > 0.0, "front visible to target rig");
        assert!(case.source_field.inner.density(&back) > 0.0, "back visible to source rig");
        // rims only: overlap stays small
        assert!(case.meta.overlap_fraction < 0.1, "{}", case.meta.overlap_fraction);
    }

    #[test]
    fn acceptance_scale_scene_has_low_overlap() {
        let case = generate_scene(1, &small_params()).unwrap();
        assert!(
            case.meta.overlap_fraction <= 0.05,
            "overlap {}",
            case.meta.overlap_fraction
        );
    }

    #[test]
    fn duplicate_rigs_see_everything_in_common() {
        let params = SceneParams {
            carve_resolution: 32,
            carve_rays: 48,
            ..SceneParams::default()
        };
        let mut case = generate_scene(5, &params).unwrap();
        // replace the source rig with the target rig: overlap becomes ~1
        case.source_cameras_world = case.target_cameras.clone();
        let f = overlap_fraction(&case, 4000);
        assert!(f > 0.9, "overlap {f}");
    }

    #[test]
    fn partial_fields_stay_within_full_support() {
        let params = SceneParams {
            carve_resolution: 48,
            carve_rays: 64,
            ..SceneParams::default()
        };
        let case = generate_scene(13, &params).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        use rand::Rng as _;
        for _ in 0..2000 {
            let x = Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            );
            // target partial never exceeds the full field
            assert!(case.target_field.density(&x) <= case.full.density(&x) + 1e-12);
            // source partial (in source frame) never exceeds the full field
            // at the corresponding world point
            let gt = pose_to_matrix(&case.gt).unwrap();
            let xw = gt.apply(&x);
            assert!(case.source_field.density(&x) <= case.full.density(&xw) + 1e-12);
        }
    }

    #[test]
    fn scene_roundtrip_through_dir() {
        let params = SceneParams {
            carve_resolution: 32,
            carve_rays: 48,
            ..SceneParams::default()
        };
        let case = generate_scene(21, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        case.save_dir(dir.path()).unwrap();
        let back = SceneCase::load_dir(dir.path()).unwrap();
        assert_eq!(back.gt, case.gt);
        assert_eq!(back.seed, case.seed);
        assert_eq!(back.target_field.mask.cells, case.target_field.mask.cells);
        assert_eq!(
            back.source_field.inner.mask.cells,
            case.source_field.inner.mask.cells
        );
    }

    #[test]
    fn observations_have_depth_oracle() {
        let params = SceneParams {
            carve_resolution: 32,
            carve_rays: 48,
            image_width: 24,
            image_height: 24,
            ..SceneParams::default()
        };
        let case = generate_scene(2, &params).unwrap();
        let obs = case.target_observations();
        assert_eq!(obs.len(), params.cams_per_rig);
        let with_hits = obs
            .iter()
            .flat_map(|o| o.depth.as_ref().unwrap())
            .filter(|d| **d < params.t_far)
            .count();
        assert!(with_hits > 0, "scene invisible from target rig");
        for o in &obs {
            o.validate().unwrap();
            assert!(o.image.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}
