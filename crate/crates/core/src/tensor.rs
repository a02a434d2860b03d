//! Dense tensors and the patch-matrix (im2col) machinery.
//!
//! An `M×N` image unfolds into a `(M·N)×(m·n)` patch matrix whose row `i`
//! is the vectorized `m×n` window centered on output pixel `i`. Alongside
//! the values we keep an index map back to source pixels, so the backward
//! pass can scatter patch-space gradients into image space (the adjoint of
//! the unfold). Everything is row-major and `f64`.

use crate::{Error, Result};

/// Index-map entry marking a zero-pad position (no source pixel).
pub const PAD: u32 = u32::MAX;

/// Dense real tensor with an explicit shape, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::EmptyInput("tensor extent of zero"));
        }
        if count != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{count} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; count] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let count: usize = shape.iter().product();
        Tensor { shape, data: vec![value; count] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise map with a stateful closure (e.g. one driving an RNG).
    pub fn map_with(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major flattening of a tensor into a 1-D tensor.
pub fn vec_flat(t: &Tensor) -> Tensor {
    Tensor { shape: vec![t.len()], data: t.data.clone() }
}

/// Inverse of [`vec_flat`]: reshape a flat tensor to the given shape.
pub fn vec_inverse(v: &Tensor, shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), v.data.clone())
}

/// Precomputed unfold geometry for one (image shape, kernel shape) pair.
///
/// `index_map[r * cols + c]` is the flat source-pixel index feeding entry
/// `(r, c)` of the patch matrix, or [`PAD`] for zero-pad positions.
#[derive(Debug, Clone)]
pub struct PatchPlan {
    pub image_shape: (usize, usize),
    pub kernel: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    pub index_map: Vec<u32>,
}

impl PatchPlan {
    pub fn new(image_shape: (usize, usize), kernel: (usize, usize)) -> Result<Self> {
        let (rows_img, cols_img) = image_shape;
        let (m, n) = kernel;
        if rows_img == 0 || cols_img == 0 {
            return Err(Error::EmptyInput("image for im2col"));
        }
        if m == 0 || n == 0 || m % 2 == 0 || n % 2 == 0 {
            return Err(Error::InvalidKernel { rows: m, cols: n });
        }
        let rows = rows_img * cols_img;
        let cols = m * n;
        let pad_r = (m - 1) / 2;
        let pad_c = (n - 1) / 2;
        let mut index_map = vec![PAD; rows * cols];
        for i in 0..rows_img {
            for j in 0..cols_img {
                let row = i * cols_img + j;
                for u in 0..m {
                    for v in 0..n {
                        let si = i as isize + u as isize - pad_r as isize;
                        let sj = j as isize + v as isize - pad_c as isize;
                        if si >= 0 && si < rows_img as isize && sj >= 0 && sj < cols_img as isize {
                            index_map[row * cols + u * n + v] =
                                (si as usize * cols_img + sj as usize) as u32;
                        }
                    }
                }
            }
        }
        Ok(PatchPlan { image_shape, kernel, rows, cols, index_map })
    }

    /// Gather image values into a preallocated patch buffer.
    pub fn gather(&self, image: &[f64], out: &mut [f64]) {
        debug_assert_eq!(image.len(), self.image_shape.0 * self.image_shape.1);
        debug_assert_eq!(out.len(), self.index_map.len());
        for (dst, &idx) in out.iter_mut().zip(&self.index_map) {
            *dst = if idx == PAD { 0.0 } else { image[idx as usize] };
        }
    }

    /// Adjoint of [`PatchPlan::gather`]: scatter-add patch-space values
    /// into image space, dropping pad positions. Row-major traversal keeps
    /// the accumulation order fixed.
    pub fn scatter_add(&self, patch: &[f64], image_acc: &mut [f64]) {
        debug_assert_eq!(patch.len(), self.index_map.len());
        for (&g, &idx) in patch.iter().zip(&self.index_map) {
            if idx != PAD {
                image_acc[idx as usize] += g;
            }
        }
    }
}

/// Patch matrix: unfolded windows plus the source-index map.
#[derive(Debug, Clone)]
pub struct PatchMatrix {
    pub values: Tensor,
    pub index_map: Vec<u32>,
    pub source_shape: (usize, usize),
}

impl PatchMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }
}

/// Unfold an image into its patch matrix with symmetric zero padding, unit
/// stride and dilation. Kernel extents must be odd so spatial dimensions
/// are preserved.
pub fn im2col(image: &Tensor, kernel: (usize, usize)) -> Result<PatchMatrix> {
    if image.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            expected: "2-D image".into(),
            got: format!("{:?}", image.shape()),
        });
    }
    let plan = PatchPlan::new((image.rows(), image.cols()), kernel)?;
    let mut values = vec![0.0; plan.rows * plan.cols];
    plan.gather(image.data(), &mut values);
    Ok(PatchMatrix {
        values: Tensor::matrix(plan.rows, plan.cols, values)?,
        index_map: plan.index_map,
        source_shape: plan.image_shape,
    })
}

/// Scatter-add a patch-space gradient back to image space (adjoint of
/// [`im2col`]); pad-sentinel entries are discarded.
pub fn col2im_accumulate(
    grad: &Tensor,
    index_map: &[u32],
    target_shape: (usize, usize),
) -> Result<Tensor> {
    if grad.len() != index_map.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} index-map entries", grad.len()),
            got: format!("{}", index_map.len()),
        });
    }
    let mut out = Tensor::zeros(vec![target_shape.0, target_shape.1]);
    let n_pixels = out.len() as u32;
    for (&g, &idx) in grad.data().iter().zip(index_map) {
        if idx == PAD {
            continue;
        }
        if idx >= n_pixels {
            return Err(Error::ShapeMismatch {
                expected: format!("indices < {n_pixels}"),
                got: format!("{idx}"),
            });
        }
        out.data_mut()[idx as usize] += g;
    }
    Ok(out)
}

/// Matrix whose every row is `vec(w)`.
pub fn broadcast_weights(w: &Tensor, rows: usize) -> Result<Tensor> {
    if rows == 0 {
        return Err(Error::EmptyInput("broadcast row count"));
    }
    let flat = w.data();
    let mut data = Vec::with_capacity(rows * flat.len());
    for _ in 0..rows {
        data.extend_from_slice(flat);
    }
    Tensor::matrix(rows, flat.len(), data)
}
