//! Volumes, masks and probability maps, plus three-axis slicing, reassembly,
//! the Dice-Sørensen coefficient and three-view fusion.
//!
//! Storage is x-fastest: voxel `(x, y, z)` of a `W x H x L` grid lives at
//! `x + W * (y + H * z)`.

pub mod rvol;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensorcore::Tensor;

/// Slicing axis, one per viewpoint.
///
/// Coronal slices are indexed by `x` and span `(y, z)`, sagittal slices by `y`
/// spanning `(x, z)`, axial slices by `z` spanning `(x, y)`. In-slice rows
/// follow the first spanned axis, columns the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Coronal,
    Sagittal,
    Axial,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Coronal, Axis::Sagittal, Axis::Axial];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
            Axis::Axial => "axial",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Axis::Coronal => 0,
            Axis::Sagittal => 1,
            Axis::Axial => 2,
        }
    }

    /// Number of slices along this axis.
    pub fn extent(self, e: [usize; 3]) -> usize {
        e[self.dim()]
    }

    /// `(rows, cols)` of one slice.
    pub fn slice_dims(self, e: [usize; 3]) -> (usize, usize) {
        match self {
            Axis::Coronal => (e[1], e[2]),
            Axis::Sagittal => (e[0], e[2]),
            Axis::Axial => (e[0], e[1]),
        }
    }

    /// Flat voxel index of `(row, col)` on slice `index`.
    #[inline]
    pub fn voxel(self, e: [usize; 3], index: usize, row: usize, col: usize) -> usize {
        let (x, y, z) = match self {
            Axis::Coronal => (index, row, col),
            Axis::Sagittal => (row, index, col),
            Axis::Axial => (row, col, index),
        };
        x + e[0] * (y + e[1] * z)
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Axis {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coronal" => Ok(Axis::Coronal),
            "sagittal" => Ok(Axis::Sagittal),
            "axial" => Ok(Axis::Axial),
            _ => Err(invalid!("unknown axis {s:?}")),
        }
    }
}

fn voxel_count(e: [usize; 3]) -> usize {
    e[0] * e[1] * e[2]
}

fn gather<T: Copy>(data: &[T], e: [usize; 3], axis: Axis, index: usize) -> Vec<T> {
    let (rows, cols) = axis.slice_dims(e);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(data[axis.voxel(e, index, r, c)]);
        }
    }
    out
}

fn check_index(e: [usize; 3], axis: Axis, index: usize) -> Result<()> {
    if index >= axis.extent(e) {
        return Err(invalid!(
            "slice index {index} out of range for {axis} axis of extent {}",
            axis.extent(e)
        ));
    }
    Ok(())
}

/// Scalar intensity grid normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if extents.iter().any(|&d| d < 3) {
            return Err(invalid!(
                "volume extents {extents:?} must be at least 3 on every axis"
            ));
        }
        if data.len() != voxel_count(extents) {
            return Err(shape_err!(
                "volume {extents:?} needs {} voxels, got {}",
                voxel_count(extents),
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("intensity {v} outside [0,1]"));
        }
        Ok(Self {
            extents,
            spacing,
            data,
        })
    }

    /// Map raw intensities affinely so that `window.0 -> 0` and `window.1 -> 1`,
    /// then clamp to [0, 1].
    pub fn from_window(
        extents: [usize; 3],
        spacing: [f64; 3],
        raw: &[f64],
        window: (f64, f64),
    ) -> Result<Self> {
        let (lo, hi) = window;
        if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
            return Err(invalid!("intensity window ({lo}, {hi}) is empty"));
        }
        let data = raw
            .iter()
            .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0)) as f32)
            .collect();
        Self::new(extents, spacing, data)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[x + self.extents[0] * (y + self.extents[1] * z)]
    }

    /// One 2D slice as `f64` values, row-major.
    pub fn slice(&self, axis: Axis, index: usize) -> Result<Vec<f64>> {
        check_index(self.extents, axis, index)?;
        Ok(gather(&self.data, self.extents, axis, index)
            .into_iter()
            .map(f64::from)
            .collect())
    }
}

/// Binary voxel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    extents: [usize; 3],
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(extents: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != voxel_count(extents) {
            return Err(shape_err!(
                "mask {extents:?} needs {} voxels, got {}",
                voxel_count(extents),
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(invalid!("mask value {v} is not binary"));
        }
        Ok(Self { extents, data })
    }

    pub fn empty(extents: [usize; 3]) -> Self {
        Self {
            extents,
            data: vec![0; voxel_count(extents)],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn slice(&self, axis: Axis, index: usize) -> Result<Vec<u8>> {
        check_index(self.extents, axis, index)?;
        Ok(gather(&self.data, self.extents, axis, index))
    }

    /// The slice as a `[1, rows, cols]` tensor of zeros and ones.
    pub fn slice_tensor(&self, axis: Axis, index: usize) -> Result<Tensor> {
        let (rows, cols) = axis.slice_dims(self.extents);
        let data = self
            .slice(axis, index)?
            .into_iter()
            .map(f64::from)
            .collect();
        Tensor::new(vec![1, rows, cols], data)
    }

    /// Slice indices along `axis` that contain at least one foreground voxel.
    pub fn occupied_slices(&self, axis: Axis) -> Vec<usize> {
        let mut hit = vec![false; axis.extent(self.extents)];
        let [w, h, _] = self.extents;
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0 {
                let (x, y, z) = (i % w, (i / w) % h, i / (w * h));
                hit[[x, y, z][axis.dim()]] = true;
            }
        }
        hit.iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Per-voxel probabilities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    extents: [usize; 3],
    data: Vec<f64>,
}

impl ProbVolume {
    pub fn new(extents: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != voxel_count(extents) {
            return Err(shape_err!(
                "probability volume {extents:?} needs {} voxels, got {}",
                voxel_count(extents),
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("probability {v} outside [0,1]"));
        }
        Ok(Self { extents, data })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn slice(&self, axis: Axis, index: usize) -> Result<Vec<f64>> {
        check_index(self.extents, axis, index)?;
        Ok(gather(&self.data, self.extents, axis, index))
    }

    pub fn slice_tensor(&self, axis: Axis, index: usize) -> Result<Tensor> {
        let (rows, cols) = axis.slice_dims(self.extents);
        Tensor::new(vec![1, rows, cols], self.slice(axis, index)?)
    }

    /// `1` exactly where the probability is at least 0.5.
    pub fn binarize(&self) -> LabelMask {
        LabelMask {
            extents: self.extents,
            data: self.data.iter().map(|&p| u8::from(p >= 0.5)).collect(),
        }
    }
}

/// Three neighbouring slices stacked as channels `(index-1, index, index+1)`,
/// with the edge slice repeated at the borders.
/// Intensity mapped to zero in network inputs.
pub const INPUT_CENTER: f64 = 0.45;
/// Gain applied after centering.
pub const INPUT_SCALE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub axis: Axis,
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl SliceStack {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[c * n..(c + 1) * n]
    }

    /// Network input: intensities mapped through `(v - INPUT_CENTER) * INPUT_SCALE`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|v| (v - INPUT_CENTER) * INPUT_SCALE)
            .collect();
        Tensor::new(vec![3, self.rows, self.cols], data).expect("stack shape")
    }
}

pub fn slice_stack(v: &Volume, axis: Axis, index: usize) -> Result<SliceStack> {
    let e = v.extents();
    check_index(e, axis, index)?;
    let last = axis.extent(e) - 1;
    let (rows, cols) = axis.slice_dims(e);
    let mut data = Vec::with_capacity(3 * rows * cols);
    for i in [index.saturating_sub(1), index, (index + 1).min(last)] {
        data.extend(v.slice(axis, i)?);
    }
    Ok(SliceStack {
        axis,
        index,
        rows,
        cols,
        data,
    })
}

/// Place per-slice maps (`[rows, cols]` or `[1, rows, cols]`, one per index
/// along `axis`) back into a volume of the given extents.
pub fn reassemble(maps: &[Tensor], axis: Axis, extents: [usize; 3]) -> Result<ProbVolume> {
    let n = axis.extent(extents);
    if maps.len() != n {
        return Err(invalid!(
            "{axis} reassembly needs {n} slice maps, got {}",
            maps.len()
        ));
    }
    let (rows, cols) = axis.slice_dims(extents);
    let mut data = vec![0.0; voxel_count(extents)];
    for (index, m) in maps.iter().enumerate() {
        let ok = matches!(m.shape(), [r, c] | [1, r, c] if *r == rows && *c == cols);
        if !ok {
            return Err(shape_err!(
                "slice {index} map has shape {:?}, expected {rows}x{cols}",
                m.shape()
            ));
        }
        let md = m.data();
        for r in 0..rows {
            for c in 0..cols {
                data[axis.voxel(extents, index, r, c)] = md[r * cols + c];
            }
        }
    }
    ProbVolume::new(extents, data)
}

/// Dice-Sørensen coefficient `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dsc(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    if a.extents != b.extents {
        return Err(shape_err!(
            "dsc of masks with extents {:?} and {:?}",
            a.extents,
            b.extents
        ));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Voxelwise mean of the three view maps, binarized at `>= 0.5`.
pub fn fuse_and_binarize(
    coronal: &ProbVolume,
    sagittal: &ProbVolume,
    axial: &ProbVolume,
) -> Result<(ProbVolume, LabelMask)> {
    if coronal.extents != sagittal.extents || coronal.extents != axial.extents {
        return Err(shape_err!(
            "fusion of maps with extents {:?}, {:?}, {:?}",
            coronal.extents,
            sagittal.extents,
            axial.extents
        ));
    }
    let data: Vec<f64> = coronal
        .data
        .iter()
        .zip(&sagittal.data)
        .zip(&axial.data)
        .map(|((a, b), c)| (a + b + c) / 3.0)
        .collect();
    let fused = ProbVolume::new(coronal.extents, data)?;
    let mask = fused.binarize();
    Ok((fused, mask))
}

#[cfg(test)]
mod tests;
