//! Volume container, intensity windowing, orthogonal-view slicing and cropping.
//!
//! A [`Volume`] is a 3D scalar grid with per-axis spacing in millimetres. The
//! memory layout is x-fastest: `index = x + nx * (y + ny * z)`. The same
//! container carries CT intensities (`i16`, Hounsfield units), probabilities
//! (`f32` in `[0, 1]`) and label masks (`u8`).
//!
//! Slicing conventions are fixed once here and used by every other module:
//!
//! * [`ViewPlane::Axial`] slices are `(x, y)` planes indexed by `z`,
//! * [`ViewPlane::Coronal`] slices are `(x, z)` planes indexed by `y`,
//! * [`ViewPlane::Sagittal`] slices are `(y, z)` planes indexed by `x`.
//!
//! In-plane pixel order is row-major: axial pixel `(u, v)` maps to voxel
//! `(x=u, y=v)`, coronal `(u, v)` to `(x=u, z=v)`, sagittal `(u, v)` to
//! `(y=u, z=v)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar element kinds a [`Volume`] can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "i16")]
    I16,
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "u8")]
    U8,
}

impl Dtype {
    pub fn byte_size(self) -> usize {
        match self {
            Dtype::I16 => 2,
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// Element types storable in a [`Volume`].
pub trait Element: Copy + Default + PartialEq + Send + Sync + 'static {
    const DTYPE: Dtype;

    /// Per-element invariant (probabilities must be finite and in `[0, 1]`).
    fn check(self) -> bool {
        true
    }
}

impl Element for i16 {
    const DTYPE: Dtype = Dtype::I16;
}

impl Element for u8 {
    const DTYPE: Dtype = Dtype::U8;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn check(self) -> bool {
        self.is_finite() && (0.0..=1.0).contains(&self)
    }
}

/// A 3D scalar grid with voxel spacing in mm. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    data: Vec<T>,
}

pub type HuVolume = Volume<i16>;
pub type ProbVolume = Volume<f32>;
pub type LabelVolume = Volume<u8>;

impl<T: Element> Volume<T> {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64), data: Vec<T>) -> Result<Self> {
        if dims.0 < 1 || dims.1 < 1 || dims.2 < 1 {
            return Err(Error::invalid(format!("dims must be >= 1, got {dims:?}")));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0)
            || !(spacing.0.is_finite() && spacing.1.is_finite() && spacing.2.is_finite())
        {
            return Err(Error::invalid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        let n = dims.0 * dims.1 * dims.2;
        if data.len() != n {
            return Err(Error::invalid(format!(
                "data length {} does not match dims product {}",
                data.len(),
                n
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.check()) {
            return Err(Error::invalid(format!(
                "element at linear index {i} violates the value invariant"
            )));
        }
        Ok(Volume { dims, spacing, data })
    }

    /// Constant-filled volume.
    pub fn filled(dims: (usize, usize, usize), spacing: (f64, f64, f64), value: T) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        Self::new(dims, spacing, vec![value; n])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    /// Linear index back to `(x, y, z)`.
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let (nx, ny, _) = self.dims;
        (idx % nx, (idx / nx) % ny, idx / (nx * ny))
    }

    /// Map every element through `f`, keeping geometry. The closure must
    /// uphold the target element invariant.
    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Result<Volume<U>> {
        Volume::new(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }
}

impl Volume<u8> {
    /// Number of non-zero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// The three orthogonal slicing planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewPlane {
    Axial,
    Coronal,
    Sagittal,
}

impl ViewPlane {
    pub const ALL: [ViewPlane; 3] = [ViewPlane::Axial, ViewPlane::Coronal, ViewPlane::Sagittal];

    /// Slice count for a volume of the given dims (extent along the normal axis).
    pub fn slice_count(self, dims: (usize, usize, usize)) -> usize {
        match self {
            ViewPlane::Axial => dims.2,
            ViewPlane::Coronal => dims.1,
            ViewPlane::Sagittal => dims.0,
        }
    }

    /// (width, height) of a slice for a volume of the given dims.
    pub fn slice_dims(self, dims: (usize, usize, usize)) -> (usize, usize) {
        match self {
            ViewPlane::Axial => (dims.0, dims.1),
            ViewPlane::Coronal => (dims.0, dims.2),
            ViewPlane::Sagittal => (dims.1, dims.2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewPlane::Axial => "axial",
            ViewPlane::Coronal => "coronal",
            ViewPlane::Sagittal => "sagittal",
        }
    }
}

impl std::str::FromStr for ViewPlane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" | "ax" => Ok(ViewPlane::Axial),
            "coronal" | "co" => Ok(ViewPlane::Coronal),
            "sagittal" | "sa" => Ok(ViewPlane::Sagittal),
            other => Err(Error::invalid(format!("unknown view plane '{other}'"))),
        }
    }
}

/// Where a bounding box came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxSource {
    /// Thresholded multi-view probability candidate pipeline.
    Candidate,
    /// Regression-forest localizer.
    RegForest,
    /// Whole-volume fallback.
    FullVolume,
    /// Tight box of a ground-truth mask.
    GroundTruth,
}

/// Integer voxel bounding box: inclusive lower corner, exclusive upper corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox3 {
    pub lo: (usize, usize, usize),
    pub hi: (usize, usize, usize),
    pub source: BoxSource,
}

impl BBox3 {
    pub fn new(lo: (usize, usize, usize), hi: (usize, usize, usize), source: BoxSource) -> Result<Self> {
        if !(lo.0 < hi.0 && lo.1 < hi.1 && lo.2 < hi.2) {
            return Err(Error::invalid(format!(
                "bounding box corners must satisfy lo < hi componentwise, got lo {lo:?} hi {hi:?}"
            )));
        }
        Ok(BBox3 { lo, hi, source })
    }

    pub fn full(dims: (usize, usize, usize)) -> Self {
        BBox3 {
            lo: (0, 0, 0),
            hi: dims,
            source: BoxSource::FullVolume,
        }
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        (self.hi.0 - self.lo.0, self.hi.1 - self.lo.1, self.hi.2 - self.lo.2)
    }

    pub fn volume(&self) -> usize {
        let e = self.extents();
        e.0 * e.1 * e.2
    }

    pub fn fits(&self, dims: (usize, usize, usize)) -> bool {
        self.hi.0 <= dims.0 && self.hi.1 <= dims.1 && self.hi.2 <= dims.2
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        x >= self.lo.0 && x < self.hi.0 && y >= self.lo.1 && y < self.hi.1 && z >= self.lo.2 && z < self.hi.2
    }

    /// Grow by `pad` voxels per side, clamped to `dims`.
    pub fn padded(&self, pad: usize, dims: (usize, usize, usize)) -> BBox3 {
        BBox3 {
            lo: (
                self.lo.0.saturating_sub(pad),
                self.lo.1.saturating_sub(pad),
                self.lo.2.saturating_sub(pad),
            ),
            hi: (
                (self.hi.0 + pad).min(dims.0),
                (self.hi.1 + pad).min(dims.1),
                (self.hi.2 + pad).min(dims.2),
            ),
            source: self.source,
        }
    }
}

/// A 2D image in row-major order: `index = u + width * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Image2<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image2 { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image2 {
            width,
            height,
            data: vec![T::default(); width * height],
        }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> T {
        self.data[u + self.width * v]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[u + self.width * v] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Rescale Hounsfield units into `[0, 255]` over the given window.
///
/// `out = round(255 * clamp((v - lo) / (hi - lo), 0, 1))` with round-half-up,
/// so the window endpoints map exactly to 0 and 255.
pub fn window_rescale(vol: &HuVolume, window: (i16, i16)) -> Result<Volume<u8>> {
    let (lo, hi) = window;
    if lo >= hi {
        return Err(Error::invalid(format!(
            "degenerate intensity window [{lo}, {hi}]"
        )));
    }
    let lo = lo as f64;
    let span = hi as f64 - lo;
    vol.map(|v| {
        let t = ((v as f64 - lo) / span).clamp(0.0, 1.0);
        (t * 255.0 + 0.5).floor() as u8
    })
}

/// Extract the ordered slice stack of a volume in the given plane.
pub fn extract_slices<T: Element>(vol: &Volume<T>, plane: ViewPlane) -> Vec<Image2<T>> {
    let dims = vol.dims();
    let (w, h) = plane.slice_dims(dims);
    let count = plane.slice_count(dims);
    let mut slices = Vec::with_capacity(count);
    for k in 0..count {
        let mut data = Vec::with_capacity(w * h);
        match plane {
            ViewPlane::Axial => {
                for v in 0..h {
                    for u in 0..w {
                        data.push(vol.at(u, v, k));
                    }
                }
            }
            ViewPlane::Coronal => {
                for v in 0..h {
                    for u in 0..w {
                        data.push(vol.at(u, k, v));
                    }
                }
            }
            ViewPlane::Sagittal => {
                for v in 0..h {
                    for u in 0..w {
                        data.push(vol.at(k, u, v));
                    }
                }
            }
        }
        slices.push(Image2 { width: w, height: h, data });
    }
    slices
}

/// Re-stack per-slice maps into a volume; exact inverse of [`extract_slices`].
pub fn assemble_volume<T: Element>(
    slices: &[Image2<T>],
    plane: ViewPlane,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Result<Volume<T>> {
    let (w, h) = plane.slice_dims(dims);
    let count = plane.slice_count(dims);
    if slices.len() != count {
        return Err(Error::invalid(format!(
            "expected {count} slices for {} assembly of dims {dims:?}, got {}",
            plane.name(),
            slices.len()
        )));
    }
    for (k, s) in slices.iter().enumerate() {
        if s.width != w || s.height != h {
            return Err(Error::invalid(format!(
                "slice {k} is {}x{}, expected {w}x{h}",
                s.width, s.height
            )));
        }
    }
    let mut data = vec![T::default(); dims.0 * dims.1 * dims.2];
    let nx = dims.0;
    let ny = dims.1;
    for (k, s) in slices.iter().enumerate() {
        for v in 0..h {
            for u in 0..w {
                let (x, y, z) = match plane {
                    ViewPlane::Axial => (u, v, k),
                    ViewPlane::Coronal => (u, k, v),
                    ViewPlane::Sagittal => (k, u, v),
                };
                data[x + nx * (y + ny * z)] = s.at(u, v);
            }
        }
    }
    Volume::new(dims, spacing, data)
}

/// Extract the sub-volume under `bbox`; spacing is preserved.
pub fn crop<T: Element>(vol: &Volume<T>, bbox: &BBox3) -> Result<Volume<T>> {
    if !bbox.fits(vol.dims()) {
        return Err(Error::invalid(format!(
            "box hi {:?} exceeds volume dims {:?}",
            bbox.hi,
            vol.dims()
        )));
    }
    let (ex, ey, ez) = bbox.extents();
    let mut data = Vec::with_capacity(ex * ey * ez);
    for z in bbox.lo.2..bbox.hi.2 {
        for y in bbox.lo.1..bbox.hi.1 {
            let row = vol.index(bbox.lo.0, y, z);
            data.extend_from_slice(&vol.data()[row..row + ex]);
        }
    }
    Volume::new((ex, ey, ez), vol.spacing(), data)
}

/// Write the voxels of `sub` into a full-frame volume of `dims` at `bbox.lo`;
/// everything outside the box is zero.
pub fn embed(sub: &LabelVolume, bbox: &BBox3, dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<LabelVolume> {
    if bbox.extents() != sub.dims() {
        return Err(Error::invalid(format!(
            "sub-volume dims {:?} do not match box extents {:?}",
            sub.dims(),
            bbox.extents()
        )));
    }
    if !bbox.fits(dims) {
        return Err(Error::invalid(format!("box hi {:?} exceeds frame dims {dims:?}", bbox.hi)));
    }
    let mut data = vec![0u8; dims.0 * dims.1 * dims.2];
    let (ex, ey, ez) = sub.dims();
    for z in 0..ez {
        for y in 0..ey {
            for x in 0..ex {
                data[(x + bbox.lo.0) + dims.0 * ((y + bbox.lo.1) + dims.1 * (z + bbox.lo.2))] =
                    sub.at(x, y, z);
            }
        }
    }
    Volume::new(dims, spacing, data)
}
