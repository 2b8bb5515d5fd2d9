//! Density field representations: nonnegative σ(x) with analytic spatial
//! gradients.
//!
//! Two concrete families are provided. [`AnalyticField`] is a union of
//! sphere/capsule primitives with a thin linear density ramp at the surface,
//! used as ground truth for synthetic scenes. [`VoxelGrid`] stores raw values
//! at grid vertices and interpolates `max(v, 0)` trilinearly, standing in for
//! a learned reconstruction.
//!
//! Wrappers compose fields: [`TransformedField`] queries an inner field
//! through a fixed rigid transform, [`SumField`] merges two fields with a
//! query transform applied to the second, and [`ContractedField`] applies the
//! unbounded-scene contraction before lookup.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::RigidTransform;
use crate::{Error, Result};

/// A queryable nonnegative density σ(x) with spatial gradient.
///
/// `density_with_gradient` must return exactly the same σ as `density`; the
/// gradient is the one-sided value at kinks of piecewise definitions.
pub trait DensityField: Send + Sync {
    fn density(&self, x: &Vector3<f64>) -> f64;

    fn density_with_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>);

    /// Whether queries pass through the scene contraction before lookup.
    fn contracted(&self) -> bool {
        false
    }
}

impl<F: DensityField + ?Sized> DensityField for &F {
    fn density(&self, x: &Vector3<f64>) -> f64 {
        (**self).density(x)
    }
    fn density_with_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        (**self).density_with_gradient(x)
    }
    fn contracted(&self) -> bool {
        (**self).contracted()
    }
}

impl<F: DensityField + ?Sized> DensityField for Arc<F> {
    fn density(&self, x: &Vector3<f64>) -> f64 {
        (**self).density(x)
    }
    fn density_with_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        (**self).density_with_gradient(x)
    }
    fn contracted(&self) -> bool {
        (**self).contracted()
    }
}

/// The all-transparent field: σ = 0 everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptyField;

impl DensityField for EmptyField {
    fn density(&self, _x: &Vector3<f64>) -> f64 {
        0.0
    }
    fn density_with_gradient(&self, _x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        (0.0, Vector3::zeros())
    }
}

/// Geometric primitive of an [`AnalyticField`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Capsule {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
    },
}

impl Primitive {
    /// Signed distance to the primitive surface (negative inside).
    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => {
                (x - Vector3::from(*center)).norm() - radius
            }
            Primitive::Capsule { a, b, radius } => {
                let a = Vector3::from(*a);
                let b = Vector3::from(*b);
                let ab = b - a;
                let len2 = ab.norm_squared();
                let s = if len2 > 0.0 {
                    ((x - a).dot(&ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (x - (a + ab * s)).norm() - radius
            }
        }
    }

    /// Gradient of the signed distance (unit outward direction).
    pub fn signed_distance_gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let axis_point = match self {
            Primitive::Sphere { center, .. } => Vector3::from(*center),
            Primitive::Capsule { a, b, .. } => {
                let a = Vector3::from(*a);
                let b = Vector3::from(*b);
                let ab = b - a;
                let len2 = ab.norm_squared();
                let s = if len2 > 0.0 {
                    ((x - a).dot(&ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                a + ab * s
            }
        };
        let d = x - axis_point;
        let n = d.norm();
        if n > 1e-15 {
            d / n
        } else {
            Vector3::zeros()
        }
    }
}

/// Union of analytic primitives with uniform interior density `k` and a
/// linear surface ramp of width `edge_falloff`.
///
/// The union takes the maximum density over primitives (equivalently the
/// minimum signed distance), so overlaps never exceed `k`. Density is 0 at
/// and outside the exact surface and reaches `k` at depth `edge_falloff`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyticField {
    pub primitives: Vec<Primitive>,
    /// Interior density k (1/meter).
    pub interior_density: f64,
    /// Ramp width ε (meters) over which density rises from 0 to k.
    pub edge_falloff: f64,
}

impl AnalyticField {
    pub fn new(primitives: Vec<Primitive>, interior_density: f64, edge_falloff: f64) -> Result<Self> {
        if !(interior_density > 0.0) || !(edge_falloff > 0.0) {
            return Err(Error::invalid(
                "interior_density and edge_falloff must be positive",
            ));
        }
        for p in &primitives {
            let r = match p {
                Primitive::Sphere { radius, .. } => *radius,
                Primitive::Capsule { radius, .. } => *radius,
            };
            if !(r > 0.0) {
                return Err(Error::invalid("primitive radius must be positive"));
            }
        }
        Ok(AnalyticField {
            primitives,
            interior_density,
            edge_falloff,
        })
    }

    /// Minimum signed distance over the union and the index of the closest
    /// primitive. `None` when the field has no primitives.
    pub fn signed_distance(&self, x: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            let d = p.signed_distance(x);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best
    }
}

impl DensityField for AnalyticField {
    fn density(&self, x: &Vector3<f64>) -> f64 {
        match self.signed_distance(x) {
            Some((sd, _)) => self.interior_density * (-sd / self.edge_falloff).clamp(0.0, 1.0),
            None => 0.0,
        }
    }

    fn density_with_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match self.signed_distance(x) {
            Some((sd, idx)) => {
                let u = -sd / self.edge_falloff;
                if u <= 0.0 || u >= 1.0 {
                    (self.interior_density * u.clamp(0.0, 1.0), Vector3::zeros())
                } else {
                    let g = self.primitives[idx].signed_distance_gradient(x)
                        * (-self.interior_density / self.edge_falloff);
                    (self.interior_density * u, g)
                }
            }
            None => (0.0, Vector3::zeros()),
        }
    }
}

/// Maps unbounded coordinates into the open ball of radius 2: identity inside
/// the unit ball, `(2 − 1/‖x‖)·x/‖x‖` outside.
pub fn contract(x: &Vector3<f64>) -> Vector3<f64> {
    let n = x.norm();
    if n <= 1.0 {
        *x
    } else {
        x * ((2.0 - 1.0 / n) / n)
    }
}

/// Jacobian of [`contract`]; identity inside the unit ball.
pub fn contract_jacobian(x: &Vector3<f64>) -> Matrix3<f64> {
    let n = x.norm();
    if n <= 1.0 {
        Matrix3::identity()
    } else {
        // c(x) = g(n) x with g(n) = 2/n − 1/n², so J = g I + (g'/n) x xᵀ
        let g = 2.0 / n - 1.0 / (n * n);
        let gp = -2.0 / (n * n) + 2.0 / (n * n * n);
        Matrix3::identity() * g + (x * x.transpose()) * (gp / n)
    }
}

/// Applies the scene contraction to queries of an inner field.
#[derive(Debug, Clone)]
pub struct ContractedField<F> {
    pub inner: F,
}

impl<F: DensityField> ContractedField<F> {
    pub fn new(inner: F) -> Self {
        ContractedField { inner }
    }
}

impl<F: DensityField> DensityField for ContractedField<F> {
    fn density(&self, x: &Vector3<f64>) -> f64 {
        self.inner.density(&contract(x))
    }

    fn density_with_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let c = contract(x);
        let (s, g) = self.inner.density_with_gradient(&c);
        (s, contract_jacobian(x).transpose() * g)
    }

    fn contracted(&self) -> bool {
        true
    }
}

/// Queries an inner field through a fixed rigid transform:
/// `σ(x) = inner(T·x)`.
#[derive(Clone)]
pub struct TransformedField<F> {
    pub inner: F,
    pub transform: RigidTransform,
}

impl<F: DensityField> TransformedField<F> {
    pub fn new(inner: F, transform: RigidTransform) -> Self {
        TransformedField { inner, transform }
    }
}

impl<F: DensityField> DensityField for TransformedField<F> {
    fn density(&self, x: &Vector3<f64>) -> f64 {
        self.inner.density(&self.transform.apply(x))
    }

    fn density_with_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let (s, g) = self.inner.density_with_gradient(&self.transform.apply(x));
        (s, self.transform.rotation.transpose() * g)
    }
}

/// Sum of two fields with a rigid query transform applied to the second:
/// `σ(x) = a(x) + b(Z·x)`.
pub struct SumField<A, B> {
    pub a: A,
    pub b: B,
    pub transform: RigidTransform,
}

/// Merges two density fields; the transform maps query points into `b`'s
/// frame before lookup.
pub fn sum_fields<A: DensityField, B: DensityField>(
    a: A,
    b: B,
    transform: RigidTransform,
) -> SumField<A, B> {
    SumField { a, b, transform }
}

impl<A: DensityField, B: DensityField> DensityField for SumField<A, B> {
    fn density(&self, x: &Vector3<f64>) -> f64 {
        self.a.density(x) + self.b.density(&self.transform.apply(x))
    }

    fn density_with_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let (sa, ga) = self.a.density_with_gradient(x);
        let (sb, gb) = self
            .b
            .density_with_gradient(&self.transform.apply(x));
        (sa + sb, ga + self.transform.rotation.transpose() * gb)
    }
}

/// Interpolation footprint of a grid query: the eight cell corners and their
/// trilinear weights.
#[derive(Debug, Clone, Copy)]
pub struct CellInterp {
    pub corners: [usize; 8],
    pub weights: [f64; 8],
}

/// Dense vertex-stored scalar grid over an axis-aligned bounding box.
///
/// Raw values may be negative; density reads clamp each vertex through
/// `max(v, 0)` before trilinear interpolation, so the interpolant stays
/// piecewise-trilinear and exact at vertices. Queries outside the box return
/// zero density and gradient.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    /// Raw vertex values, x-fastest order.
    pub values: Vec<f64>,
    /// Optional per-vertex grayscale radiance in [0, 1].
    pub radiance: Option<Vec<f64>>,
}

/// Magic string of the grid file format.
pub const GRID_MAGIC: &[u8; 8] = b"ZNGRID1\n";

impl VoxelGrid {
    pub fn new(
        resolution: (usize, usize, usize),
        bbox_min: Vector3<f64>,
        bbox_max: Vector3<f64>,
    ) -> Result<Self> {
        let (nx, ny, nz) = resolution;
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::invalid("grid needs at least 2 vertices per axis"));
        }
        if !(bbox_min.x < bbox_max.x && bbox_min.y < bbox_max.y && bbox_min.z < bbox_max.z) {
            return Err(Error::invalid("bbox must have positive extent"));
        }
        Ok(VoxelGrid {
            nx,
            ny,
            nz,
            bbox_min,
            bbox_max,
            values: vec![0.0; nx * ny * nz],
            radiance: None,
        })
    }

    /// Bakes an existing field into a grid by sampling vertex positions.
    pub fn from_field<F: DensityField>(
        field: &F,
        resolution: (usize, usize, usize),
        bbox_min: Vector3<f64>,
        bbox_max: Vector3<f64>,
    ) -> Result<Self> {
        let mut grid = VoxelGrid::new(resolution, bbox_min, bbox_max)?;
        for iz in 0..grid.nz {
            for iy in 0..grid.ny {
                for ix in 0..grid.nx {
                    let p = grid.vertex_position(ix, iy, iz);
                    let idx = grid.vertex_index(ix, iy, iz);
                    grid.values[idx] = field.density(&p);
                }
            }
        }
        Ok(grid)
    }

    #[inline]
    pub fn vertex_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.nx * (iy + self.ny * iz)
    }

    pub fn vertex_position(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let e = self.cell_extent();
        self.bbox_min + Vector3::new(ix as f64 * e.x, iy as f64 * e.y, iz as f64 * e.z)
    }

    /// Size of one grid cell along each axis.
    pub fn cell_extent(&self) -> Vector3<f64> {
        let d = self.bbox_max - self.bbox_min;
        Vector3::new(
            d.x / (self.nx - 1) as f64,
            d.y / (self.ny - 1) as f64,
            d.z / (self.nz - 1) as f64,
        )
    }

    /// Mean cell edge length, the "voxel edge" used in extraction and
    /// fidelity thresholds.
    pub fn voxel_edge(&self) -> f64 {
        let e = self.cell_extent();
        (e.x + e.y + e.z) / 3.0
    }

    /// Locates the cell containing `x` and its trilinear weights, or `None`
    /// outside the bounding box.
    pub fn cell_interp(&self, x: &Vector3<f64>) -> Option<CellInterp> {
        for k in 0..3 {
            if x[k] < self.bbox_min[k] || x[k] > self.bbox_max[k] {
                return None;
            }
        }
        let e = self.cell_extent();
        let u = Vector3::new(
            (x.x - self.bbox_min.x) / e.x,
            (x.y - self.bbox_min.y) / e.y,
            (x.z - self.bbox_min.z) / e.z,
        );
        let ix = (u.x as usize).min(self.nx - 2);
        let iy = (u.y as usize).min(self.ny - 2);
        let iz = (u.z as usize).min(self.nz - 2);
        let fx = u.x - ix as f64;
        let fy = u.y - iy as f64;
        let fz = u.z - iz as f64;
        let mut corners = [0usize; 8];
        let mut weights = [0f64; 8];
        for (c, (dz, dy, dx)) in cell_corner_offsets().iter().enumerate() {
            corners[c] = self.vertex_index(ix + dx, iy + dy, iz + dz);
            let wx = if *dx == 1 { fx } else { 1.0 - fx };
            let wy = if *dy == 1 { fy } else { 1.0 - fy };
            let wz = if *dz == 1 { fz } else { 1.0 - fz };
            weights[c] = wx * wy * wz;
        }
        Some(CellInterp { corners, weights })
    }

    fn interp_gradient(
        &self,
        x: &Vector3<f64>,
        vals: impl Fn(usize) -> f64,
    ) -> (f64, Vector3<f64>) {
        for k in 0..3 {
            if x[k] < self.bbox_min[k] || x[k] > self.bbox_max[k] {
                return (0.0, Vector3::zeros());
            }
        }
        let e = self.cell_extent();
        let u = Vector3::new(
            (x.x - self.bbox_min.x) / e.x,
            (x.y - self.bbox_min.y) / e.y,
            (x.z - self.bbox_min.z) / e.z,
        );
        let ix = (u.x as usize).min(self.nx - 2);
        let iy = (u.y as usize).min(self.ny - 2);
        let iz = (u.z as usize).min(self.nz - 2);
        let fx = u.x - ix as f64;
        let fy = u.y - iy as f64;
        let fz = u.z - iz as f64;
        // gather the 8 clamped corner values
        let mut c = [0f64; 8];
        for (i, (dz, dy, dx)) in cell_corner_offsets().iter().enumerate() {
            c[i] = vals(self.vertex_index(ix + dx, iy + dy, iz + dz));
        }
        // interpolate down the z, then y, then x axes
        let c00 = c[0] * (1.0 - fz) + c[4] * fz;
        let c01 = c[1] * (1.0 - fz) + c[5] * fz;
        let c10 = c[2] * (1.0 - fz) + c[6] * fz;
        let c11 = c[3] * (1.0 - fz) + c[7] * fz;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        let value = c0 * (1.0 - fx) + c1 * fx;
        // partials in normalized cell coordinates
        let dvx = c1 - c0;
        let dvy = (c10 - c00) * (1.0 - fx) + (c11 - c01) * fx;
        let dvz = ((c[4] - c[0]) * (1.0 - fy) + (c[6] - c[2]) * fy) * (1.0 - fx)
            + ((c[5] - c[1]) * (1.0 - fy) + (c[7] - c[3]) * fy) * fx;
        (value, Vector3::new(dvx / e.x, dvy / e.y, dvz / e.z))
    }

    /// Density at a vertex (raw value clamped at zero).
    pub fn vertex_density(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[self.vertex_index(ix, iy, iz)].max(0.0)
    }

    /// Interpolated radiance in [0, 1]; 0.0 outside the box or when the grid
    /// carries no radiance channel.
    pub fn sample_radiance(&self, x: &Vector3<f64>) -> f64 {
        match (&self.radiance, self.cell_interp(x)) {
            (Some(rad), Some(ci)) => {
                let mut v = 0.0;
                for (c, w) in ci.corners.iter().zip(ci.weights) {
                    v += rad[*c].clamp(0.0, 1.0) * w;
                }
                v
            }
            _ => 0.0,
        }
    }

    /// Writes the binary grid format: magic, u32 LE resolution triple, six
    /// f64 LE bbox bounds, then f32 LE raw values (x-fastest), then the
    /// radiance values when present.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        for n in [self.nx, self.ny, self.nz] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for v in [
            self.bbox_min.x,
            self.bbox_min.y,
            self.bbox_min.z,
            self.bbox_max.x,
            self.bbox_max.y,
            self.bbox_max.z,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        if let Some(rad) = &self.radiance {
            for v in rad {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::format("zngrid", "bad magic"));
        }
        let mut u32buf = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut u32buf)?;
            *d = u32::from_le_bytes(u32buf) as usize;
        }
        let mut f64buf = [0u8; 8];
        let mut bounds = [0f64; 6];
        for b in &mut bounds {
            r.read_exact(&mut f64buf)?;
            *b = f64::from_le_bytes(f64buf);
        }
        let count = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::format("zngrid", "resolution overflow"))?;
        let mut grid = VoxelGrid::new(
            (dims[0], dims[1], dims[2]),
            Vector3::new(bounds[0], bounds[1], bounds[2]),
            Vector3::new(bounds[3], bounds[4], bounds[5]),
        )?;
        let mut f32buf = [0u8; 4];
        for v in &mut grid.values {
            r.read_exact(&mut f32buf)?;
            *v = f32::from_le_bytes(f32buf) as f64;
        }
        // radiance channel is present iff more data follows
        let mut probe = [0u8; 1];
        match r.read(&mut probe)? {
            0 => Ok(grid),
            _ => {
                let mut rad = vec![0f64; count];
                let mut first = [0u8; 4];
                first[0] = probe[0];
                r.read_exact(&mut first[1..])?;
                rad[0] = f32::from_le_bytes(first) as f64;
                for v in rad.iter_mut().skip(1) {
                    r.read_exact(&mut f32buf)?;
                    *v = f32::from_le_bytes(f32buf) as f64;
                }
                grid.radiance = Some(rad);
                Ok(grid)
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        VoxelGrid::read_from(&mut f)
    }
}

impl DensityField for VoxelGrid {
    fn density(&self, x: &Vector3<f64>) -> f64 {
        self.interp_gradient(x, |i| self.values[i].max(0.0)).0
    }

    fn density_with_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        self.interp_gradient(x, |i| self.values[i].max(0.0))
    }
}

/// Corner offsets (dz, dy, dx) in the fixed order used for interpolation:
/// index bit 0 = x, bit 1 = y, bit 2 = z.
fn cell_corner_offsets() -> [(usize, usize, usize); 8] {
    [
        (0, 0, 0),
        (0, 0, 1),
        (0, 1, 0),
        (0, 1, 1),
        (1, 0, 0),
        (1, 0, 1),
        (1, 1, 0),
        (1, 1, 1),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v3(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn unit_sphere_field() -> AnalyticField {
        AnalyticField::new(
            vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.1,
            }],
            50.0,
            0.01,
        )
        .unwrap()
    }

    #[test]
    fn sphere_interior_density_is_k() {
        let f = unit_sphere_field();
        assert_eq!(f.density(&Vector3::zeros()), 50.0);
    }

    #[test]
    fn sphere_exterior_density_is_zero() {
        let f = unit_sphere_field();
        assert_eq!(f.density(&v3(0.5, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn ramp_gradient_points_inward_with_magnitude_k_over_eps() {
        let f = unit_sphere_field();
        // halfway down the ramp: sd = -0.005
        let x = v3(0.095, 0.0, 0.0);
        let (s, g) = f.density_with_gradient(&x);
        assert_relative_eq!(s, 25.0, epsilon = 1e-9);
        assert_relative_eq!(g.norm(), 50.0 / 0.01, epsilon = 1e-6);
        assert!(g.x < 0.0, "gradient must point inward");
    }

    #[test]
    fn constant_interior_has_zero_gradient() {
        let f = unit_sphere_field();
        let (_, g) = f.density_with_gradient(&v3(0.01, 0.0, 0.0));
        assert_eq!(g, Vector3::zeros());
    }

    #[test]
    fn capsule_distance_matches_sphere_at_endpoints() {
        let c = Primitive::Capsule {
            a: [0.0, 0.0, 0.0],
            b: [1.0, 0.0, 0.0],
            radius: 0.1,
        };
        assert_relative_eq!(c.signed_distance(&v3(-0.2, 0.0, 0.0)), 0.1, epsilon = 1e-12);
        assert_relative_eq!(c.signed_distance(&v3(0.5, 0.2, 0.0)), 0.1, epsilon = 1e-12);
        assert_relative_eq!(c.signed_distance(&v3(0.5, 0.0, 0.0)), -0.1, epsilon = 1e-12);
    }

    fn fd_gradient<F: DensityField>(f: &F, x: &Vector3<f64>, h: f64) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for k in 0..3 {
            let mut hi = *x;
            let mut lo = *x;
            hi[k] += h;
            lo[k] -= h;
            g[k] = (f.density(&hi) - f.density(&lo)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let f = AnalyticField::new(
            vec![
                Primitive::Sphere {
                    center: [0.05, 0.0, -0.02],
                    radius: 0.08,
                },
                Primitive::Capsule {
                    a: [-0.1, -0.1, 0.0],
                    b: [0.1, 0.12, 0.05],
                    radius: 0.03,
                },
            ],
            40.0,
            0.02,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 100 {
            let x = v3(
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
            );
            let (sd, idx) = f.signed_distance(&x).unwrap();
            // keep clear of ramp kinks and of primitive-switch ties
            let u = -sd / f.edge_falloff;
            if !(0.05..=0.95).contains(&u) {
                continue;
            }
            let others_far = f
                .primitives
                .iter()
                .enumerate()
                .all(|(i, p)| i == idx || p.signed_distance(&x) > sd + 1e-3);
            if !others_far {
                continue;
            }
            let (_, g) = f.density_with_gradient(&x);
            let fd = fd_gradient(&f, &x, h);
            let scale = g.norm().max(1.0);
            assert!((g - fd).norm() / scale < 1e-3, "x={x:?}");
            checked += 1;
        }
    }

    #[test]
    fn trilinear_cell_centroid_average() {
        let mut g = VoxelGrid::new((2, 2, 2), v3(0.0, 0.0, 0.0), v3(1.0, 1.0, 1.0)).unwrap();
        g.values = vec![3.0; 8];
        g.values[7] = 7.0;
        let c = g.density(&v3(0.5, 0.5, 0.5));
        assert_relative_eq!(c, (7.0 * 3.0 + 7.0) / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_exact_at_vertices_and_clamped() {
        let mut g = VoxelGrid::new((3, 3, 3), v3(-1.0, -1.0, -1.0), v3(1.0, 1.0, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for v in &mut g.values {
            *v = rng.gen_range(-2.0..2.0);
        }
        for iz in 0..3 {
            for iy in 0..3 {
                for ix in 0..3 {
                    let p = g.vertex_position(ix, iy, iz);
                    let expect = g.values[g.vertex_index(ix, iy, iz)].max(0.0);
                    assert_relative_eq!(g.density(&p), expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn grid_linear_field_has_constant_gradient() {
        let mut g = VoxelGrid::new((4, 3, 3), v3(0.0, 0.0, 0.0), v3(3.0, 2.0, 2.0)).unwrap();
        let slope = 2.5;
        for iz in 0..3 {
            for iy in 0..3 {
                for ix in 0..4 {
                    let p = g.vertex_position(ix, iy, iz);
                    let idx = g.vertex_index(ix, iy, iz);
                    g.values[idx] = 1.0 + slope * p.x;
                }
            }
        }
        let (s, grad) = g.density_with_gradient(&v3(1.3, 0.7, 1.1));
        assert_relative_eq!(s, 1.0 + slope * 1.3, epsilon = 1e-10);
        assert_relative_eq!(grad.x, slope, epsilon = 1e-10);
        assert_relative_eq!(grad.y, 0.0, epsilon = 1e-10);
        assert_relative_eq!(grad.z, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn grid_outside_bbox_is_zero() {
        let mut g = VoxelGrid::new((2, 2, 2), v3(0.0, 0.0, 0.0), v3(1.0, 1.0, 1.0)).unwrap();
        g.values = vec![5.0; 8];
        let (s, grad) = g.density_with_gradient(&v3(1.5, 0.5, 0.5));
        assert_eq!(s, 0.0);
        assert_eq!(grad, Vector3::zeros());
    }

    #[test]
    fn grid_gradient_matches_finite_differences() {
        let mut g = VoxelGrid::new((5, 5, 5), v3(0.0, 0.0, 0.0), v3(1.0, 1.0, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for v in &mut g.values {
            *v = rng.gen_range(0.0..5.0);
        }
        for _ in 0..50 {
            // stay inside one cell so the piecewise gradient is smooth
            let x = v3(
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            );
            let frac = |v: f64| (v * 4.0).fract();
            if [x.x, x.y, x.z]
                .iter()
                .any(|&v| frac(v) < 0.05 || frac(v) > 0.95)
            {
                continue;
            }
            let (_, grad) = g.density_with_gradient(&x);
            let fd = fd_gradient(&g, &x, 1e-6);
            assert!((grad - fd).norm() / grad.norm().max(1.0) < 1e-3);
        }
    }

    #[test]
    fn grid_reproduces_multilinear_polynomial() {
        // density on one cell with positive corner values is exactly the
        // multilinear interpolant of those values
        let mut g = VoxelGrid::new((2, 2, 2), v3(0.0, 0.0, 0.0), v3(1.0, 1.0, 1.0)).unwrap();
        let corner_vals = [0.5, 1.5, 2.5, 0.25, 1.0, 3.0, 0.75, 2.0];
        g.values = corner_vals.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (x, y, z) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let mut expect = 0.0;
            for (i, v) in corner_vals.iter().enumerate() {
                let wx = if i & 1 == 1 { x } else { 1.0 - x };
                let wy = if i & 2 == 2 { y } else { 1.0 - y };
                let wz = if i & 4 == 4 { z } else { 1.0 - z };
                expect += v * wx * wy * wz;
            }
            assert_relative_eq!(g.density(&v3(x, y, z)), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn contract_identity_inside_unit_ball() {
        let x = v3(0.5, 0.0, 0.0);
        assert_eq!(contract(&x), x);
    }

    #[test]
    fn contract_hand_values() {
        assert_relative_eq!(contract(&v3(2.0, 0.0, 0.0)), v3(1.5, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(contract(&v3(0.0, 10.0, 0.0)), v3(0.0, 1.9, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn contract_continuous_at_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..1000 {
            let u = v3(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            for s in [1.0 - 1e-6, 1.0 + 1e-6] {
                assert!((contract(&(u * s)) - u).norm() <= 1e-5);
            }
        }
    }

    #[test]
    fn contract_norm_bounded_up_to_huge_inputs() {
        for exp in 0..13 {
            let x = v3(10f64.powi(exp), 3.0, -2.0);
            assert!(contract(&x).norm() < 2.0);
        }
    }

    #[test]
    fn contracted_field_gradient_matches_fd() {
        let inner = AnalyticField::new(
            vec![Primitive::Sphere {
                center: [1.2, 0.0, 0.0],
                radius: 0.3,
            }],
            10.0,
            0.2,
        )
        .unwrap();
        let f = ContractedField::new(inner);
        assert!(f.contracted());
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        while checked < 40 {
            let x = v3(
                rng.gen_range(1.1..3.0),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let (s, g) = f.density_with_gradient(&x);
            if s < 0.5 || s > 9.5 || g.norm() < 1e-6 {
                continue;
            }
            let fd = fd_gradient(&f, &x, 1e-6);
            assert!((g - fd).norm() / g.norm().max(1.0) < 1e-3, "x={x:?}");
            checked += 1;
        }
    }

    #[test]
    fn sum_with_empty_field_is_identity() {
        let a = unit_sphere_field();
        let s = sum_fields(&a, EmptyField, RigidTransform::identity());
        let x = v3(0.05, 0.02, 0.0);
        assert_eq!(s.density(&x), a.density(&x));
    }

    #[test]
    fn sum_of_identical_spheres_doubles_density() {
        let a = unit_sphere_field();
        let s = sum_fields(&a, &a, RigidTransform::identity());
        assert_relative_eq!(s.density(&Vector3::zeros()), 100.0, epsilon = 1e-12);
    }

    #[test]
    fn sum_gradient_matches_finite_differences() {
        let a = unit_sphere_field();
        let b = AnalyticField::new(
            vec![Primitive::Capsule {
                a: [-0.1, 0.0, 0.0],
                b: [0.1, 0.0, 0.1],
                radius: 0.05,
            }],
            30.0,
            0.02,
        )
        .unwrap();
        let z = crate::geometry::pose_to_matrix(&crate::geometry::EulerPose::new(
            0.1, -0.05, 0.2, 0.01, -0.02, 0.03,
        ))
        .unwrap();
        // a point is safe when both component fields are differentiable there
        let ramp_interior = |f: &AnalyticField, x: &Vector3<f64>| {
            let (sd, _) = f.signed_distance(x).unwrap();
            let u = -sd / f.edge_falloff;
            (0.1..=0.9).contains(&u)
        };
        let s = sum_fields(&a, &b, z);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        for _ in 0..100_000 {
            if checked >= 100 {
                break;
            }
            let x = v3(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            );
            let in_a = ramp_interior(&a, &x);
            let in_b = ramp_interior(&b, &z.apply(&x));
            if !in_a && !in_b {
                continue;
            }
            // skip points where the other component sits near its own kink
            if !in_a && a.density(&x) > 1e-9 || !in_b && b.density(&z.apply(&x)) > 1e-9 {
                continue;
            }
            let (v, g) = s.density_with_gradient(&x);
            let fd = fd_gradient(&s, &x, 1e-6);
            assert!(v >= 0.0);
            assert!(
                (g - fd).norm() / g.norm().max(1.0) < 1e-3,
                "x={x:?} g={g:?} fd={fd:?}"
            );
            checked += 1;
        }
        assert!(checked == 100, "only found {checked} differentiable points");
    }

    #[test]
    fn grid_roundtrip_through_file() {
        let mut g = VoxelGrid::new((4, 3, 2), v3(-0.5, 0.0, 0.25), v3(0.5, 1.0, 0.75)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for v in &mut g.values {
            *v = f32::from(rng.gen_range(-100i16..100)) as f64 / 16.0;
        }
        g.radiance = Some((0..g.values.len()).map(|i| (i % 5) as f64 / 4.0).collect());
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], GRID_MAGIC);
        let back = VoxelGrid::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.nx, 4);
        assert_eq!(back.values, g.values);
        assert_eq!(back.radiance, g.radiance);
        assert_eq!(back.bbox_min, g.bbox_min);
    }

    #[test]
    fn grid_without_radiance_roundtrips() {
        let g = VoxelGrid::new((2, 2, 2), v3(0.0, 0.0, 0.0), v3(1.0, 1.0, 1.0)).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let back = VoxelGrid::read_from(&mut buf.as_slice()).unwrap();
        assert!(back.radiance.is_none());
    }

    #[test]
    fn truncated_grid_file_rejected() {
        let g = VoxelGrid::new((2, 2, 2), v3(0.0, 0.0, 0.0), v3(1.0, 1.0, 1.0)).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(VoxelGrid::read_from(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn density_never_negative(
            x in -0.3..0.3f64, y in -0.3..0.3f64, z in -0.3..0.3f64,
        ) {
            let f = unit_sphere_field();
            prop_assert!(f.density(&v3(x, y, z)) >= 0.0);
        }

        #[test]
        fn contract_norm_monotone_along_direction(
            ux in -1.0..1.0f64, uy in -1.0..1.0f64, uz in -1.0..1.0f64,
            s1 in 0.0..50.0f64, s2 in 0.0..50.0f64,
        ) {
            let n = v3(ux, uy, uz).norm();
            prop_assume!(n > 1e-3);
            let u = v3(ux, uy, uz) / n;
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(contract(&(u * lo)).norm() <= contract(&(u * hi)).norm() + 1e-12);
        }
    }
}
