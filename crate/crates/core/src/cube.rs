//! Dense image-cube storage and the primitive linear operators (band-wise
//! 2-D convolution, decimation, spectral projection) that every degradation
//! in this crate is composed from.
//!
//! Layout is band-sequential: the value at (row h, col w, band k) lives at
//! `k*height*width + h*width + w`. All arithmetic is f64 with a fixed
//! summation order, so repeated calls on identical inputs are bit-identical.

use crate::error::{Error, Result};

// --- containers -------------------------------------------------------------

/// Dense height x width x bands tensor of finite f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HyperCube {
    /// Wraps a band-sequential buffer. Rejects zero dims, length mismatch,
    /// and non-finite entries.
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Invalid(format!(
                "cube dims must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expect = height * width * bands;
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "cube data length {} does not match {height}x{width}x{bands} = {expect}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cube data index {pos}")));
        }
        Ok(Self { height, width, bands, data })
    }

    /// All-zero cube.
    pub fn zeros(height: usize, width: usize, bands: usize) -> Result<Self> {
        Self::new(height, width, bands, vec![0.0; height * width * bands])
    }

    /// Builds a cube by evaluating `f(h, w, k)` at every index.
    pub fn from_fn<F: FnMut(usize, usize, usize) -> f64>(
        height: usize,
        width: usize,
        bands: usize,
        mut f: F,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * bands);
        for k in 0..bands {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(h, w, k));
                }
            }
        }
        Self::new(height, width, bands, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index_of(&self, h: usize, w: usize, k: usize) -> usize {
        k * self.height * self.width + h * self.width + w
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, k: usize) -> f64 {
        self.data[self.index_of(h, w, k)]
    }

    /// Contiguous slice holding one band, row-major.
    pub fn band(&self, k: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[k * plane..(k + 1) * plane]
    }

    /// Spectrum at one pixel (strided gather across bands).
    pub fn spectrum(&self, h: usize, w: usize) -> Vec<f64> {
        (0..self.bands).map(|k| self.get(h, w, k)).collect()
    }
}

/// Dense row-major matrix of finite f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid(format!(
                "matrix dims must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix data index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_fn<F: FnMut(usize, usize) -> f64>(rows: usize, cols: usize, mut f: F) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// In-place access for optimizer updates; finiteness is re-checked when
    /// the values next flow through a constructor.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Row `i` as a contiguous slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transposed(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data }
    }

    /// `self * other`; inner summation runs in increasing index order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = &mut out[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(self.rows, other.cols, out)
    }
}

/// Square spatial blur kernel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size == 0 {
            return Err(Error::Invalid("kernel size must be positive".into()));
        }
        if weights.len() != size * size {
            return Err(Error::Shape(format!(
                "kernel weight count {} does not match {size}x{size}",
                weights.len()
            )));
        }
        if let Some(pos) = weights.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("kernel weight index {pos}")));
        }
        Ok(Self { size, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Uniform kernel with every entry 1/(size*size).
    pub fn uniform(size: usize) -> Result<Self> {
        let n = size * size;
        Self::new(size, vec![1.0 / n as f64; n])
    }
}

/// Spectral response matrix: row = source band, column = target band.
/// Column j is the response curve of target band j over all source bands.
#[derive(Debug, Clone, PartialEq)]
pub struct SrfMatrix {
    weights: Matrix,
}

impl SrfMatrix {
    pub fn new(weights: Matrix) -> Result<Self> {
        Ok(Self { weights })
    }

    pub fn input_bands(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_bands(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    #[inline]
    pub fn get(&self, input_band: usize, output_band: usize) -> f64 {
        self.weights.get(input_band, output_band)
    }
}

/// Out-of-range handling for spatial convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryMode {
    /// Mirror about the edge; index -1 maps to 0, index n maps to n-1.
    #[default]
    SymmetricReflect,
    /// Clamp to the nearest edge sample.
    ReplicateEdge,
    /// Treat everything outside the image as zero.
    ZeroPad,
}

impl BoundaryMode {
    pub fn name(&self) -> &'static str {
        match self {
            BoundaryMode::SymmetricReflect => "symmetric-reflect",
            BoundaryMode::ReplicateEdge => "replicate-edge",
            BoundaryMode::ZeroPad => "zero-pad",
        }
    }
}

impl std::str::FromStr for BoundaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric-reflect" => Ok(BoundaryMode::SymmetricReflect),
            "replicate-edge" => Ok(BoundaryMode::ReplicateEdge),
            "zero-pad" => Ok(BoundaryMode::ZeroPad),
            other => Err(Error::Invalid(format!(
                "unknown boundary mode '{other}' (expected symmetric-reflect, replicate-edge, or zero-pad)"
            ))),
        }
    }
}

/// Maps a possibly out-of-range axis index into [0, n) per the boundary rule.
/// `None` means the sample reads as zero. Shared by the convolution forward
/// pass and the kernel-gradient accumulation so both see the same extension.
pub(crate) fn ext_index(i: i64, n: usize, boundary: BoundaryMode) -> Option<usize> {
    let n = n as i64;
    match boundary {
        BoundaryMode::ZeroPad => {
            if i < 0 || i >= n {
                None
            } else {
                Some(i as usize)
            }
        }
        BoundaryMode::ReplicateEdge => Some(i.clamp(0, n - 1) as usize),
        BoundaryMode::SymmetricReflect => {
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i - 1;
                } else if i >= n {
                    i = 2 * n - 1 - i;
                } else {
                    return Some(i as usize);
                }
            }
        }
    }
}

/// Anchor row/col of a kernel: the kernel tap that lands on the output pixel.
#[inline]
pub(crate) fn kernel_anchor(size: usize) -> usize {
    (size - 1) / 2
}

// --- primitive operators ----------------------------------------------------

/// Applies `matrix` to the spectrum of every pixel: out(h,w,j) = sum_k
/// matrix[j][k] * cube(h,w,k). `matrix` is J x bands.
pub fn mode3_product(cube: &HyperCube, matrix: &Matrix) -> Result<HyperCube> {
    if matrix.cols() != cube.bands() {
        return Err(Error::Shape(format!(
            "spectral matrix has {} columns but cube has {} bands",
            matrix.cols(),
            cube.bands()
        )));
    }
    let (height, width, bands) = cube.dims();
    let out_bands = matrix.rows();
    let mut data = Vec::with_capacity(height * width * out_bands);
    for j in 0..out_bands {
        let mrow = matrix.row(j);
        for h in 0..height {
            for w in 0..width {
                let mut acc = 0.0;
                for (k, m) in mrow.iter().enumerate().take(bands) {
                    acc += m * cube.get(h, w, k);
                }
                data.push(acc);
            }
        }
    }
    HyperCube::new(height, width, out_bands, data)
}

/// Convolves every band with the kernel (cross-correlation orientation: the
/// kernel is not flipped). Output has the input's size; the kernel anchor is
/// floor((size-1)/2), and out-of-range reads follow `boundary`.
pub fn conv2d_bandwise(cube: &HyperCube, kernel: &Kernel, boundary: BoundaryMode) -> Result<HyperCube> {
    let (height, width, bands) = cube.dims();
    if kernel.size() > height.min(width) {
        return Err(Error::Shape(format!(
            "kernel size {} exceeds image extent {}x{}",
            kernel.size(),
            height,
            width
        )));
    }
    let ks = kernel.size();
    let a = kernel_anchor(ks) as i64;
    let mut data = Vec::with_capacity(height * width * bands);
    for k in 0..bands {
        let plane = cube.band(k);
        for h in 0..height {
            for w in 0..width {
                let mut acc = 0.0;
                for i in 0..ks {
                    let src_h = ext_index(h as i64 + i as i64 - a, height, boundary);
                    for j in 0..ks {
                        let src_w = ext_index(w as i64 + j as i64 - a, width, boundary);
                        let v = match (src_h, src_w) {
                            (Some(sh), Some(sw)) => plane[sh * width + sw],
                            _ => 0.0,
                        };
                        acc += kernel.get(i, j) * v;
                    }
                }
                data.push(acc);
            }
        }
    }
    HyperCube::new(height, width, bands, data)
}

/// Keeps every ratio-th sample per axis starting at `offset`:
/// out(h',w',k) = in(offset + ratio*h', offset + ratio*w', k).
pub fn downsample(cube: &HyperCube, ratio: usize, offset: usize) -> Result<HyperCube> {
    if ratio == 0 {
        return Err(Error::Invalid("downsample ratio must be positive".into()));
    }
    let (height, width, bands) = cube.dims();
    if height % ratio != 0 || width % ratio != 0 {
        return Err(Error::Shape(format!(
            "dims {height}x{width} not divisible by ratio {ratio}"
        )));
    }
    if offset >= ratio {
        return Err(Error::Invalid(format!(
            "downsample offset {offset} must lie in [0, {ratio})"
        )));
    }
    let (oh, ow) = (height / ratio, width / ratio);
    let mut data = Vec::with_capacity(oh * ow * bands);
    for k in 0..bands {
        for h in 0..oh {
            for w in 0..ow {
                data.push(cube.get(offset + ratio * h, offset + ratio * w, k));
            }
        }
    }
    HyperCube::new(oh, ow, bands, data)
}

/// Compensated (Neumaier) running sum. Loss values feed finite-difference
/// quotients, where plain summation roundoff is already visible at step 1e-6.
pub(crate) struct Accumulator {
    sum: f64,
    compensation: f64,
}

impl Accumulator {
    pub(crate) fn new() -> Self {
        Accumulator {
            sum: 0.0,
            compensation: 0.0,
        }
    }

    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Mean squared difference over all entries: sum((a-b)^2) / (H*W*B).
pub fn frobenius_mse(a: &HyperCube, b: &HyperCube) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "mse over {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut acc = Accumulator::new();
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        acc.add(d * d);
    }
    Ok(acc.total() / a.data().len() as f64)
}
