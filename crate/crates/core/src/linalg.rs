//! Dense matrix kernels and the lowering of 2-D convolution to a doubly
//! blocked Toeplitz matrix, so that convolutional layers can be handled by
//! exactly the same code paths as fully connected ones.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Row-major dense matrix of finite `f64` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite matrix entry at flat index {pos}"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Panics if `value` is not finite.
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        assert!(value.is_finite(), "non-finite matrix entry");
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place parameter updates. Callers are
    /// responsible for keeping entries finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Keeps only the listed rows and columns, in the given order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            let row = self.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: rows.len(),
            cols: cols.len(),
            data,
        }
    }

    /// `self^T · v`, summing each output entry over rows in ascending order.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return invalid(format!(
                "transposed matvec: vector length {} != rows {}",
                v.len(),
                self.rows
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += m * vr;
            }
        }
        Ok(out)
    }
}

/// Dot product summed left to right. Every forward-style product in the
/// crate goes through here so that interval bounds at zero width reproduce
/// forward activations bit for bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Matrix-vector product with a fixed left-to-right summation order per row.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.cols {
        return invalid(format!(
            "matvec: vector length {} != cols {}",
            v.len(),
            m.cols
        ));
    }
    Ok((0..m.rows).map(|r| dot(m.row(r), v)).collect())
}

/// Toeplitz matrix with `sequence` as its first column and each following
/// column shifted down by one entry. The result has
/// `sequence.len() + n_cols - 1` rows, so `T · x` is the full 1-D
/// convolution of `sequence` with `x`.
pub fn toeplitz_1d(sequence: &[f64], n_cols: usize) -> Result<Matrix> {
    if sequence.is_empty() {
        return invalid("toeplitz_1d: empty sequence");
    }
    if n_cols == 0 {
        return invalid("toeplitz_1d: n_cols must be >= 1");
    }
    let rows = sequence.len() + n_cols - 1;
    let mut m = Matrix::zeros(rows, n_cols);
    for c in 0..n_cols {
        for (k, &a) in sequence.iter().enumerate() {
            if !a.is_finite() {
                return invalid("toeplitz_1d: non-finite sequence entry");
            }
            m.data[(c + k) * n_cols + c] = a;
        }
    }
    Ok(m)
}

/// Geometry of a stride-1 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 {
            return Err(Error::Unsupported(format!(
                "convolution stride {} (only stride 1 is supported)",
                self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return invalid("convolution needs at least one input and output channel");
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.input_h == 0 || self.input_w == 0 {
            return invalid("convolution dimensions must be positive");
        }
        if self.kernel_h > self.input_h + 2 * self.padding
            || self.kernel_w > self.input_w + 2 * self.padding
        {
            return invalid("kernel larger than padded input");
        }
        Ok(())
    }

    pub fn output_h(&self) -> usize {
        self.input_h + 2 * self.padding + 1 - self.kernel_h
    }

    pub fn output_w(&self) -> usize {
        self.input_w + 2 * self.padding + 1 - self.kernel_w
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input_h * self.input_w
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.output_h() * self.output_w()
    }

    /// Output pixels per feature map.
    pub fn map_len(&self) -> usize {
        self.output_h() * self.output_w()
    }
}

/// Lowers a convolution to a dense matrix `M` with
/// `M · vec(input) = vec(output)`, where inputs and outputs are laid out as
/// `(channel, row, col)`.
///
/// `kernels[o * in_channels + c]` is the `kernel_h x kernel_w` kernel that
/// maps input channel `c` to output map `o`. The kernel is applied as a true
/// (flipped) convolution: the full convolution is assembled from one
/// Toeplitz block per kernel row, arranged block-Toeplitz over input rows,
/// and the rows belonging to the padded output window are kept.
pub fn conv_to_matrix(kernels: &[Matrix], spec: &ConvSpec) -> Result<Matrix> {
    spec.validate()?;
    if kernels.len() != spec.out_channels * spec.in_channels {
        return invalid(format!(
            "expected {} kernels, got {}",
            spec.out_channels * spec.in_channels,
            kernels.len()
        ));
    }
    if let Some(k) = kernels
        .iter()
        .find(|k| k.rows() != spec.kernel_h || k.cols() != spec.kernel_w)
    {
        return invalid(format!(
            "kernel is {}x{}, expected {}x{}",
            k.rows(),
            k.cols(),
            spec.kernel_h,
            spec.kernel_w
        ));
    }

    let (h, w) = (spec.input_h, spec.input_w);
    let (oh, ow) = (spec.output_h(), spec.output_w());
    let full_w = w + spec.kernel_w - 1;
    // Offset of the padded output window inside the full convolution.
    let row_off = spec.kernel_h as isize - 1 - spec.padding as isize;
    let col_off = spec.kernel_w as isize - 1 - spec.padding as isize;

    let mut m = Matrix::zeros(spec.output_len(), spec.input_len());
    for o in 0..spec.out_channels {
        for c in 0..spec.in_channels {
            let kernel = &kernels[o * spec.in_channels + c];
            for a in 0..spec.kernel_h {
                let block = toeplitz_1d(kernel.row(a), w)?;
                for r in 0..h {
                    let out_i = (r + a) as isize - row_off;
                    if out_i < 0 || out_i >= oh as isize {
                        continue;
                    }
                    for jj in 0..full_w {
                        let out_j = jj as isize - col_off;
                        if out_j < 0 || out_j >= ow as isize {
                            continue;
                        }
                        let out_row = o * oh * ow + out_i as usize * ow + out_j as usize;
                        let in_base = c * h * w + r * w;
                        for q in 0..w {
                            let v = block.get(jj, q);
                            if v != 0.0 {
                                m.data[out_row * m.cols + in_base + q] = v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

/// For every entry of the lowered matrix, the flat kernel parameter index
/// (`(o * in_channels + c) * kh * kw + a * kw + b`) it was copied from, or
/// `None` for structural zeros. Used to pull gradients back to kernels.
pub fn conv_source_map(spec: &ConvSpec) -> Result<Vec<Option<u32>>> {
    let per = spec.kernel_h * spec.kernel_w;
    let kernels = (0..spec.out_channels * spec.in_channels)
        .map(|k| {
            let data = (0..per).map(|e| (k * per + e + 1) as f64).collect();
            Matrix::new(spec.kernel_h, spec.kernel_w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = conv_to_matrix(&kernels, spec)?;
    Ok(m.data
        .iter()
        .map(|&v| (v != 0.0).then(|| v as u32 - 1))
        .collect())
}
