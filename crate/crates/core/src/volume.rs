//! Grid geometry, scalar volumes, 4D sequences and displacement fields.
//!
//! All voxel data is stored x-fastest: the linear index of voxel
//! `(x, y, z)` is `x + nx * (y + ny * z)`. Displacements are expressed in
//! voxel units of the grid they live on, never in millimetres.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Voxel counts and spacing (mm) of a regular 3D grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct Grid3 {
    dims: [usize; 3],
    spacing: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
}

impl TryFrom<GridRepr> for Grid3 {
    type Error = Error;
    fn try_from(r: GridRepr) -> Result<Self> {
        Grid3::new(r.dims, r.spacing_mm)
    }
}

impl From<Grid3> for GridRepr {
    fn from(g: Grid3) -> Self {
        GridRepr {
            dims: g.dims,
            spacing_mm: g.spacing,
        }
    }
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidGrid(format!(
                "all dims must be >= 2, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "spacings must be positive, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn nx(&self) -> usize {
        self.dims[0]
    }

    pub fn ny(&self) -> usize {
        self.dims[1]
    }

    pub fn nz(&self) -> usize {
        self.dims[2]
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Tensor shape `[1, channels, nz, ny, nx]` for data on this grid.
    pub fn tensor_shape(&self, channels: usize) -> Vec<usize> {
        vec![1, channels, self.dims[2], self.dims[1], self.dims[0]]
    }

    /// Grid with in-plane dims scaled by `factor` and in-plane spacing divided by it.
    pub fn refined_in_plane(&self, factor: usize) -> Grid3 {
        Grid3 {
            dims: [self.dims[0] * factor, self.dims[1] * factor, self.dims[2]],
            spacing: [
                self.spacing[0] / factor as f64,
                self.spacing[1] / factor as f64,
                self.spacing[2],
            ],
        }
    }

    pub(crate) fn ensure_same(&self, other: &Grid3, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::GridMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// A scalar intensity field on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid3,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid3, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "volume data has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims(),
                grid.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid3) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn filled(grid: Grid3, value: f32) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = grid.dims();
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Shape `[1, 1, nz, ny, nx]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.grid.tensor_shape(1), self.data.clone())
    }

    /// Inverse of [`Volume::to_tensor`]; accepts any tensor holding one channel.
    pub fn from_tensor(grid: Grid3, t: &Tensor) -> Result<Self> {
        if t.len() != grid.len() {
            return Err(Error::Shape(format!(
                "tensor {:?} does not fit grid {:?}",
                t.shape(),
                grid.dims()
            )));
        }
        Self::new(grid, t.data().to_vec())
    }

    /// Copy of the transversal slice `z` as row-major `ny x nx` values.
    pub fn slice_z(&self, z: usize) -> &[f32] {
        let n = self.grid.nx() * self.grid.ny();
        &self.data[z * n..(z + 1) * n]
    }
}

/// Per-volume min-max rescaling to `[0, 1]`.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(Error::ZeroDynamicRange);
    }
    let (lo, range) = (lo as f64, (hi as f64) - (lo as f64));
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 - lo) / range) as f32)
        .collect();
    Volume::new(v.grid, data)
}

/// K respiratory phases sharing one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence4D {
    phases: Vec<Volume>,
}

impl Sequence4D {
    pub fn new(phases: Vec<Volume>) -> Result<Self> {
        if phases.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a sequence needs at least 2 phases, got {}",
                phases.len()
            )));
        }
        let grid = *phases[0].grid();
        for (k, p) in phases.iter().enumerate().skip(1) {
            grid.ensure_same(p.grid(), &format!("phase {k} vs phase 0"))?;
        }
        Ok(Self { phases })
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn grid(&self) -> &Grid3 {
        self.phases[0].grid()
    }

    pub fn phase(&self, k: usize) -> &Volume {
        &self.phases[k]
    }

    pub fn phases(&self) -> &[Volume] {
        &self.phases
    }
}

/// Per-voxel 3-vectors `(dx, dy, dz)` in voxel units, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    grid: Grid3,
    data: Vec<f32>,
}

impl DisplacementField {
    pub fn new(grid: Grid3, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * grid.len() {
            return Err(Error::Shape(format!(
                "field data has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims(),
                3 * grid.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid3) -> Self {
        Self {
            grid,
            data: vec![0.0; 3 * grid.len()],
        }
    }

    pub fn constant(grid: Grid3, v: [f32; 3]) -> Self {
        let data = (0..grid.len()).flat_map(|_| v).collect();
        Self { grid, data }
    }

    pub fn from_fn(
        grid: Grid3,
        mut f: impl FnMut(usize, usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let [nx, ny, nz] = grid.dims();
        let mut data = Vec::with_capacity(3 * grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.extend_from_slice(&f(x, y, z));
                }
            }
        }
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    /// Interleaved components, `3 * nvox` values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let i = 3 * self.grid.index(x, y, z);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn vectors(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Channel-first tensor `[1, 3, nz, ny, nx]`.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.grid.len();
        let mut out = vec![0.0f32; 3 * n];
        for (i, v) in self.data.chunks_exact(3).enumerate() {
            out[i] = v[0];
            out[n + i] = v[1];
            out[2 * n + i] = v[2];
        }
        Tensor::from_vec(self.grid.tensor_shape(3), out)
    }

    pub fn from_tensor(grid: Grid3, t: &Tensor) -> Result<Self> {
        let n = grid.len();
        if t.len() != 3 * n {
            return Err(Error::Shape(format!(
                "tensor {:?} does not hold a 3-channel field on {:?}",
                t.shape(),
                grid.dims()
            )));
        }
        let src = t.data();
        let mut data = Vec::with_capacity(3 * n);
        for i in 0..n {
            data.extend_from_slice(&[src[i], src[n + i], src[2 * n + i]]);
        }
        Self::new(grid, data)
    }
}

/// Bidirectional field pair produced by the registration networks.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiPair {
    pub m2f: DisplacementField,
    pub f2m: DisplacementField,
}

impl PhiPair {
    pub fn new(m2f: DisplacementField, f2m: DisplacementField) -> Result<Self> {
        m2f.grid().ensure_same(f2m.grid(), "phi pair")?;
        Ok(Self { m2f, f2m })
    }

    pub fn zeros(grid: Grid3) -> Self {
        Self {
            m2f: DisplacementField::zeros(grid),
            f2m: DisplacementField::zeros(grid),
        }
    }

    pub fn grid(&self) -> &Grid3 {
        self.m2f.grid()
    }
}

/// A moving/fixed phase pair with its phase-range grade.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationPair {
    pub moving: Volume,
    pub fixed: Volume,
    pub phase_i: usize,
    pub phase_j: usize,
    pub grade: u8,
    /// Counter-clockwise in-plane quarter turns applied to both members.
    pub quarter_turns: u8,
}

/// In-plane counter-clockwise rotation by `quarter_turns * 90` degrees.
///
/// One quarter turn maps voxel `(x, y, z)` to `(n - 1 - y, x, z)`; requires `nx == ny`.
pub fn rotate_volume(v: &Volume, quarter_turns: u8) -> Result<Volume> {
    let n = square_side(v.grid())?;
    let mut data = v.data.clone();
    for _ in 0..quarter_turns % 4 {
        data = rotate_plane_data(&data, n, v.grid().nz(), 1, |c| c);
    }
    Volume::new(*v.grid(), data)
}

/// Rotates a field's support and its in-plane vector components together.
pub fn rotate_field(f: &DisplacementField, quarter_turns: u8) -> Result<DisplacementField> {
    let n = square_side(f.grid())?;
    let mut data = f.data.clone();
    for _ in 0..quarter_turns % 4 {
        data = rotate_plane_data(&data, n, f.grid().nz(), 3, |c| [-c[1], c[0], c[2]]);
    }
    DisplacementField::new(*f.grid(), data)
}

fn square_side(g: &Grid3) -> Result<usize> {
    if g.nx() != g.ny() {
        return Err(Error::InvalidArgument(format!(
            "exact 90 degree rotation needs nx == ny, got {}x{}",
            g.nx(),
            g.ny()
        )));
    }
    Ok(g.nx())
}

fn rotate_plane_data<T: Copy + Default, V>(
    data: &[T],
    n: usize,
    nz: usize,
    stride: usize,
    map: impl Fn([T; 3]) -> V,
) -> Vec<T>
where
    V: AsRef<[T]>,
{
    let mut out = vec![T::default(); data.len()];
    for z in 0..nz {
        for y in 0..n {
            for x in 0..n {
                let src = stride * (x + n * (y + n * z));
                let (xr, yr) = (n - 1 - y, x);
                let dst = stride * (xr + n * (yr + n * z));
                if stride == 1 {
                    out[dst] = data[src];
                } else {
                    let v = map([data[src], data[src + 1], data[src + 2]]);
                    out[dst..dst + 3].copy_from_slice(v.as_ref());
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: [usize; 3]) -> Grid3 {
        Grid3::new(n, [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn grid_rejects_degenerate() {
        assert!(Grid3::new([1, 4, 4], [1.0; 3]).is_err());
        assert!(Grid3::new([4, 4, 4], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let g = grid([3, 2, 2]);
        let v = Volume::new(
            g,
            vec![0.0, 0.5, 1.0, 0.0, 0.5, 1.0, 0.0, 0.5, 1.0, 0.0, 0.5, 1.0],
        )
        .unwrap();
        assert_eq!(normalize_intensity(&v).unwrap(), v);

        let g = grid([2, 2, 2]);
        let v = Volume::new(g, vec![2.0, 4.0, 2.0, 4.0, 2.0, 4.0, 2.0, 4.0]).unwrap();
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);

        assert!(matches!(
            normalize_intensity(&Volume::filled(g, 3.0)),
            Err(Error::ZeroDynamicRange)
        ));
    }

    fn argsort(d: &[f32]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap().then(a.cmp(&b)));
        idx
    }

    #[test]
    fn normalize_random_preserves_rank_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = grid([8, 8, 8]);
        let v = Volume::from_fn(g, |_, _, _| rng.random_range(-3.0f32..5.0)).unwrap();
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.min_max(), (0.0, 1.0));
        assert_eq!(argsort(v.data()), argsort(n.data()));
        assert_eq!(normalize_intensity(&n).unwrap(), n);
    }

    #[test]
    fn sequence_rejects_mixed_grids() {
        let a = Volume::zeros(grid([4, 4, 4]));
        let b = Volume::zeros(grid([4, 4, 5]));
        assert!(matches!(
            Sequence4D::new(vec![a.clone(), b]),
            Err(Error::GridMismatch(_))
        ));
        assert!(Sequence4D::new(vec![a.clone()]).is_err());
        assert_eq!(Sequence4D::new(vec![a.clone(), a]).unwrap().len(), 2);
    }

    #[test]
    fn rejects_non_finite() {
        let g = grid([2, 2, 2]);
        let mut d = vec![0.0; 8];
        d[3] = f32::NAN;
        assert!(matches!(Volume::new(g, d), Err(Error::NonFinite(3))));
    }

    #[test]
    fn quarter_turn_index_convention() {
        let g = grid([6, 6, 3]);
        let v =
            Volume::from_fn(g, |x, y, z| if (x, y, z) == (1, 0, 2) { 1.0 } else { 0.0 }).unwrap();
        let r = rotate_volume(&v, 1).unwrap();
        assert_eq!(r.at(5, 1, 2), 1.0);
        assert_eq!(r.data().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn rotations_form_a_cyclic_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid([5, 5, 2]);
        let v = Volume::from_fn(g, |_, _, _| rng.random()).unwrap();
        let twice = rotate_volume(&rotate_volume(&v, 2).unwrap(), 2).unwrap();
        assert_eq!(twice, v);
        let mut four = v.clone();
        for _ in 0..4 {
            four = rotate_volume(&four, 1).unwrap();
        }
        assert_eq!(four, v);
        assert!(rotate_volume(&Volume::zeros(grid([4, 5, 2])), 1).is_err());
    }

    #[test]
    fn field_rotation_turns_vectors() {
        let g = grid([4, 4, 2]);
        let f = DisplacementField::constant(g, [1.0, 0.0, 0.5]);
        let r = rotate_field(&f, 1).unwrap();
        assert!(r.vectors().all(|v| v == [0.0, 1.0, 0.5]));
    }

    #[test]
    fn tensor_roundtrip_for_fields() {
        let g = grid([3, 2, 2]);
        let f =
            DisplacementField::from_fn(g, |x, y, z| [x as f32, y as f32 + 10.0, z as f32 + 20.0])
                .unwrap();
        let t = f.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 2, 2, 3]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[12], 10.0);
        assert_eq!(DisplacementField::from_tensor(g, &t).unwrap(), f);
    }
}
