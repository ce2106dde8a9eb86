//! Joint estimator for the spatial blur kernel and the spectral response
//! matrix linking an observed hyperspectral/multispectral pair.
//!
//! The kernel lives on the open probability simplex through a stick-breaking
//! construction driven by Beta(1, alpha) inverse-CDF variables; the response
//! matrix stays positive through a softplus activation. Both are trained
//! jointly with Adam on a data-consistency MSE plus a total-variation
//! smoothness term, using hand-derived reverse-mode gradients.
//!
//! All forward maps and gradients are deterministic with a fixed summation
//! order, so a training run is reproducible bit for bit.

use crate::cube::{
    downsample, ext_index, kernel_anchor, Accumulator, HyperCube, Kernel, Matrix, SrfMatrix,
};
use crate::degrade::{spectral_degrade, Geometry, ObservedPair};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

// --- activations ----------------------------------------------------------------

/// ln(1 + e^x), computed without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// 1 / (1 + e^-x).
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of softplus on positive reals: ln(e^y - 1).
fn inv_softplus(y: f64) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Invalid(format!(
            "softplus preimage requires a positive finite value, got {y}"
        )));
    }
    Ok(y + (-(-y).exp()).ln_1p())
}

/// Inverse of sigmoid on (0, 1): ln(y / (1 - y)).
fn logit(y: f64) -> Result<f64> {
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::Invalid(format!(
            "sigmoid preimage requires a value in (0,1), got {y}"
        )));
    }
    Ok((y / (1.0 - y)).ln())
}

// --- parameter containers ----------------------------------------------------------

/// Raw learnable parameters. The maps to the constrained quantities are
/// build_srf (softplus, optional mask) and build_psf (sigmoid, Beta inverse
/// CDF, stick-breaking, normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    /// Pre-softplus response weights, input_bands x output_bands.
    pub(crate) w_raw: Matrix,
    /// Pre-sigmoid stick variables, one per kernel cell (row-major).
    pub(crate) u_raw: Vec<f64>,
    /// Pre-softplus Beta concentration scalar.
    pub(crate) alpha_raw: f64,
    pub(crate) kernel_size: usize,
}

impl EstimatorParams {
    /// Symmetric starting point: flat positive response (softplus(0) = ln 2
    /// everywhere), stick variables at 1/2, concentration alpha = 1.
    pub fn init(input_bands: usize, output_bands: usize, kernel_size: usize) -> Result<Self> {
        if kernel_size == 0 {
            return Err(Error::Invalid("kernel size must be positive".into()));
        }
        Ok(Self {
            w_raw: Matrix::zeros(input_bands, output_bands)?,
            u_raw: vec![0.0; kernel_size * kernel_size],
            alpha_raw: (std::f64::consts::E - 1.0).ln(),
            kernel_size,
        })
    }

    /// Raw parameters that reproduce a given positive response matrix and a
    /// given kernel with entries in (0,1) summing to 1, at alpha = 1.
    pub fn encode(srf: &SrfMatrix, psf: &Kernel) -> Result<Self> {
        let mut w_raw = Matrix::zeros(srf.input_bands(), srf.output_bands())?;
        for i in 0..srf.input_bands() {
            for j in 0..srf.output_bands() {
                w_raw.set(i, j, inv_softplus(srf.get(i, j))?);
            }
        }

        let phi = psf.weights();
        let total: f64 = phi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "kernel must sum to 1 to be encoded, sum is {total}"
            )));
        }
        // Down-scaled sticks s = phi/2 leave slack after every break, so each
        // v_i = s_i / (1 - sum of earlier sticks) stays inside (0,1); the
        // final normalization cancels the 1/2.
        let mut u_raw = Vec::with_capacity(phi.len());
        let mut remaining = 1.0;
        for &p in phi {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Invalid(format!(
                    "kernel entries must lie in (0,1) to be encoded, got {p}"
                )));
            }
            let s = 0.5 * p;
            let v = s / remaining;
            u_raw.push(logit(1.0 - v)?);
            remaining -= s;
        }
        Ok(Self {
            w_raw,
            u_raw,
            alpha_raw: (std::f64::consts::E - 1.0).ln(),
            kernel_size: psf.size(),
        })
    }

    pub fn input_bands(&self) -> usize {
        self.w_raw.rows()
    }

    pub fn output_bands(&self) -> usize {
        self.w_raw.cols()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
}

/// Restricts each output band's response to a declared set of input bands;
/// entries outside the support are clamped to exactly 0 after activation.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMask {
    supports: Vec<Vec<usize>>,
}

impl BandMask {
    pub fn new(supports: Vec<Vec<usize>>) -> Result<Self> {
        if supports.is_empty() {
            return Err(Error::Invalid("band mask needs at least one band".into()));
        }
        for (j, s) in supports.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Invalid(format!("band mask support {j} is empty")));
            }
        }
        Ok(Self { supports })
    }

    /// One inclusive input-band range per output band.
    pub fn from_ranges(ranges: &[(usize, usize)]) -> Result<Self> {
        let supports = ranges
            .iter()
            .map(|&(start, end)| {
                if start > end {
                    return Err(Error::Invalid(format!(
                        "band mask range {start}..={end} is reversed"
                    )));
                }
                Ok((start..=end).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(supports)
    }

    pub fn output_bands(&self) -> usize {
        self.supports.len()
    }

    pub fn supports(&self) -> &[Vec<usize>] {
        &self.supports
    }

    pub fn allows(&self, input_band: usize, output_band: usize) -> bool {
        self.supports[output_band].contains(&input_band)
    }

    pub fn validate_for(&self, input_bands: usize, output_bands: usize) -> Result<()> {
        if self.supports.len() != output_bands {
            return Err(Error::Shape(format!(
                "band mask covers {} bands, expected {output_bands}",
                self.supports.len()
            )));
        }
        for (j, s) in self.supports.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&k| k >= input_bands) {
                return Err(Error::Invalid(format!(
                    "band mask support {j} references input band {bad} >= {input_bands}"
                )));
            }
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperConfig {
    /// Weight of the total-variation smoothness term.
    pub lambda: f64,
    pub iterations: usize,
    pub pretrain_iterations: usize,
    pub lr0: f64,
    pub decay_step: usize,
    pub decay_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-7,
            iterations: 500,
            pretrain_iterations: 1000,
            lr0: 1e-1,
            decay_step: 250,
            decay_rate: 0.99,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Invalid("lambda must be nonnegative".into()));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Invalid("lr0 must be positive".into()));
        }
        if self.decay_step == 0 {
            return Err(Error::Invalid("decay step must be positive".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Invalid("decay rate must lie in (0, 1]".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Invalid("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Gradient (or moment) storage with the same shapes as EstimatorParams.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub w_raw: Matrix,
    pub u_raw: Vec<f64>,
    pub alpha_raw: f64,
}

impl GradBundle {
    fn zeros_like(params: &EstimatorParams) -> Result<Self> {
        Ok(Self {
            w_raw: Matrix::zeros(params.input_bands(), params.output_bands())?,
            u_raw: vec![0.0; params.u_raw.len()],
            alpha_raw: 0.0,
        })
    }
}

/// Adam moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub(crate) first: GradBundle,
    pub(crate) second: GradBundle,
    pub(crate) step_count: usize,
}

impl AdamState {
    pub fn new(params: &EstimatorParams) -> Result<Self> {
        Ok(Self {
            first: GradBundle::zeros_like(params)?,
            second: GradBundle::zeros_like(params)?,
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }
}

// --- constrained maps ---------------------------------------------------------------

/// Sequential stick-breaking: s_0 = v_0, s_i = v_i * prod_{k<i} (1 - v_k).
/// Every v_i must lie strictly inside (0, 1).
pub fn stick_breaking(v: &[f64]) -> Result<Vec<f64>> {
    let mut s = Vec::with_capacity(v.len());
    let mut remaining = 1.0;
    for (i, &vi) in v.iter().enumerate() {
        if !(vi > 0.0 && vi < 1.0) {
            return Err(Error::Invalid(format!(
                "stick variable {i} = {vi} lies outside (0,1)"
            )));
        }
        s.push(vi * remaining);
        remaining *= 1.0 - vi;
    }
    Ok(s)
}

/// Intermediate values of the kernel construction, kept for the backward pass.
struct PsfForward {
    alpha: f64,
    /// 1 / alpha.
    t: f64,
    /// sigmoid(u_raw).
    u: Vec<f64>,
    /// -ln u = softplus(-u_raw).
    q: Vec<f64>,
    /// u^t = exp(-t q).
    p: Vec<f64>,
    /// Beta inverse-CDF variables 1 - u^t.
    v: Vec<f64>,
    sum_s: f64,
    phi: Vec<f64>,
}

fn psf_forward(params: &EstimatorParams) -> Result<PsfForward> {
    let alpha = softplus(params.alpha_raw);
    let t = 1.0 / alpha;
    let n = params.u_raw.len();
    let mut u = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for &raw in &params.u_raw {
        let qi = softplus(-raw);
        u.push(sigmoid(raw));
        q.push(qi);
        p.push((-t * qi).exp());
        // 1 - u^t through expm1 keeps v strictly inside (0,1) even where
        // u^t itself rounds to 1.
        v.push(-(-t * qi).exp_m1());
    }
    let s = stick_breaking(&v)?;
    let sum_s: f64 = s.iter().sum();
    let phi: Vec<f64> = s.iter().map(|si| si / sum_s).collect();
    Ok(PsfForward {
        alpha,
        t,
        u,
        q,
        p,
        v,
        sum_s,
        phi,
    })
}

/// Kernel from raw parameters: sigmoid, Beta(1, alpha) inverse CDF,
/// stick-breaking, then normalization to exact sum 1. `size` must satisfy
/// size^2 = stick count; sticks map to cells in row-major order.
pub fn build_psf(params: &EstimatorParams, size: usize) -> Result<Kernel> {
    if size * size != params.u_raw.len() {
        return Err(Error::Shape(format!(
            "kernel size {size} needs {} stick variables, params hold {}",
            size * size,
            params.u_raw.len()
        )));
    }
    let fwd = psf_forward(params)?;
    Kernel::new(size, fwd.phi)
}

/// Response matrix from raw parameters: softplus elementwise, then masked
/// entries (if any) clamped to exactly 0.
pub fn build_srf(params: &EstimatorParams, mask: Option<&BandMask>) -> Result<SrfMatrix> {
    if let Some(m) = mask {
        m.validate_for(params.input_bands(), params.output_bands())?;
    }
    let weights = Matrix::from_fn(params.input_bands(), params.output_bands(), |k, j| {
        match mask {
            Some(m) if !m.allows(k, j) => 0.0,
            _ => softplus(params.w_raw.get(k, j)),
        }
    })?;
    SrfMatrix::new(weights)
}

// --- losses ----------------------------------------------------------------------

/// Anisotropic total variation: sum of |horizontal| plus |vertical| forward
/// differences inside the kernel grid (no wrap-around).
pub fn tv_loss(kernel: &Kernel) -> f64 {
    let r = kernel.size();
    let mut acc = 0.0;
    for i in 0..r {
        for j in 0..r.saturating_sub(1) {
            acc += (kernel.get(i, j + 1) - kernel.get(i, j)).abs();
        }
    }
    for i in 0..r.saturating_sub(1) {
        for j in 0..r {
            acc += (kernel.get(i + 1, j) - kernel.get(i, j)).abs();
        }
    }
    acc
}

/// Minimal-norm subgradient convention: sign(0) = 0.
fn sign0(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn tv_subgradient(phi: &[f64], size: usize) -> Vec<f64> {
    let mut g = vec![0.0; phi.len()];
    for i in 0..size {
        for j in 0..size.saturating_sub(1) {
            let s = sign0(phi[i * size + j + 1] - phi[i * size + j]);
            g[i * size + j + 1] += s;
            g[i * size + j] -= s;
        }
    }
    for i in 0..size.saturating_sub(1) {
        for j in 0..size {
            let s = sign0(phi[(i + 1) * size + j] - phi[i * size + j]);
            g[(i + 1) * size + j] += s;
            g[i * size + j] -= s;
        }
    }
    g
}

/// Blur-then-decimate evaluated only at the surviving sample sites. Matches
/// downsample(conv2d_bandwise(..)) bit for bit because each output pixel
/// accumulates the same taps in the same order.
fn decimated_blur(msi: &HyperCube, kernel: &Kernel, geometry: &Geometry) -> Result<HyperCube> {
    let (height, width, bands) = msi.dims();
    if kernel.size() > height.min(width) {
        return Err(Error::Shape(format!(
            "kernel size {} exceeds image extent {height}x{width}",
            kernel.size()
        )));
    }
    if height % geometry.ratio != 0 || width % geometry.ratio != 0 {
        return Err(Error::Shape(format!(
            "dims {height}x{width} not divisible by ratio {}",
            geometry.ratio
        )));
    }
    let (oh, ow) = (height / geometry.ratio, width / geometry.ratio);
    let ks = kernel.size();
    let a = kernel_anchor(ks) as i64;
    let mut data = Vec::with_capacity(oh * ow * bands);
    for k in 0..bands {
        let plane = msi.band(k);
        for h in 0..oh {
            let base_h = (geometry.offset + geometry.ratio * h) as i64;
            for w in 0..ow {
                let base_w = (geometry.offset + geometry.ratio * w) as i64;
                let mut acc = 0.0;
                for i in 0..ks {
                    let src_h = ext_index(base_h + i as i64 - a, height, geometry.boundary);
                    for j in 0..ks {
                        let src_w = ext_index(base_w + j as i64 - a, width, geometry.boundary);
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
    HyperCube::new(oh, ow, bands, data)
}

fn validate_inputs(
    pair: &ObservedPair,
    params: &EstimatorParams,
    geometry: &Geometry,
    mask: Option<&BandMask>,
) -> Result<()> {
    geometry.validate()?;
    if geometry.ratio != pair.ratio() {
        return Err(Error::Invalid(format!(
            "geometry ratio {} does not match the pair's ratio {}",
            geometry.ratio,
            pair.ratio()
        )));
    }
    if params.input_bands() != pair.hsi().bands() || params.output_bands() != pair.msi().bands() {
        return Err(Error::Shape(format!(
            "params are {}x{} bands, pair is {}x{}",
            params.input_bands(),
            params.output_bands(),
            pair.hsi().bands(),
            pair.msi().bands()
        )));
    }
    if let Some(m) = mask {
        m.validate_for(pair.hsi().bands(), pair.msi().bands())?;
    }
    Ok(())
}

/// Data-consistency term: spectrally degrade the hyperspectral image with
/// the current response, spatially degrade the multispectral image with the
/// current kernel, and take the mean squared difference. Returns the loss
/// together with both degraded cubes.
pub fn data_loss(
    pair: &ObservedPair,
    params: &EstimatorParams,
    geometry: &Geometry,
    mask: Option<&BandMask>,
) -> Result<(f64, HyperCube, HyperCube)> {
    validate_inputs(pair, params, geometry, mask)?;
    let srf = build_srf(params, mask)?;
    let psf = build_psf(params, params.kernel_size)?;
    let x_d = spectral_degrade(pair.hsi(), &srf)?;
    let y_d = decimated_blur(pair.msi(), &psf, geometry)?;
    let mut acc = Accumulator::new();
    for (a, b) in x_d.data().iter().zip(y_d.data()) {
        let d = a - b;
        acc.add(d * d);
    }
    let l = acc.total() / x_d.data().len() as f64;
    if !l.is_finite() {
        return Err(Error::NonFinite("data term".into()));
    }
    Ok((l, x_d, y_d))
}

/// The three loss values of one forward evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Mean squared data-consistency error.
    pub data_mse: f64,
    /// Total variation of the kernel.
    pub tv: f64,
    /// data_mse + lambda * tv.
    pub total: f64,
}

/// Forward-only evaluation of all loss terms.
pub fn loss_terms(
    pair: &ObservedPair,
    params: &EstimatorParams,
    config: &HyperConfig,
    geometry: &Geometry,
    mask: Option<&BandMask>,
) -> Result<LossTerms> {
    let (data_mse, _, _) = data_loss(pair, params, geometry, mask)?;
    let psf = build_psf(params, params.kernel_size)?;
    let tv = tv_loss(&psf);
    let total = data_mse + config.lambda * tv;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(LossTerms { data_mse, tv, total })
}

/// Composite training objective.
pub fn total_loss(
    pair: &ObservedPair,
    params: &EstimatorParams,
    config: &HyperConfig,
    geometry: &Geometry,
    mask: Option<&BandMask>,
) -> Result<f64> {
    Ok(loss_terms(pair, params, config, geometry, mask)?.total)
}

/// One forward plus one reverse sweep: loss terms and exact analytic
/// gradients for every raw parameter.
pub fn loss_and_gradients(
    pair: &ObservedPair,
    params: &EstimatorParams,
    config: &HyperConfig,
    geometry: &Geometry,
    mask: Option<&BandMask>,
) -> Result<(LossTerms, GradBundle)> {
    validate_inputs(pair, params, geometry, mask)?;
    let size = params.kernel_size;
    let fwd = psf_forward(params)?;
    let psf = Kernel::new(size, fwd.phi.clone())?;
    let srf = build_srf(params, mask)?;

    let x_d = spectral_degrade(pair.hsi(), &srf)?;
    let y_d = decimated_blur(pair.msi(), &psf, geometry)?;
    let (m, n, b) = x_d.dims();
    let count = (m * n * b) as f64;

    // diff = x_d - y_d drives both the loss and every gradient. The sum is
    // compensated exactly as in data_loss so both report bit-equal values.
    let mut acc = Accumulator::new();
    let diff: Vec<f64> = x_d
        .data()
        .iter()
        .zip(y_d.data())
        .map(|(a, bb)| {
            let d = a - bb;
            acc.add(d * d);
            d
        })
        .collect();
    let data_mse = acc.total() / count;
    if !data_mse.is_finite() {
        return Err(Error::NonFinite("data term".into()));
    }
    let tv = tv_loss(&psf);
    let total = data_mse + config.lambda * tv;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let scale = 2.0 / count;

    // Response gradient: d(data)/dR[k][j] = scale * <diff band j, hsi band k>,
    // then softplus' = sigmoid; masked entries carry no gradient.
    let plane = m * n;
    let mut grad_w = Matrix::zeros(params.input_bands(), params.output_bands())?;
    for j in 0..b {
        let dband = &diff[j * plane..(j + 1) * plane];
        for k in 0..params.input_bands() {
            if let Some(msk) = mask {
                if !msk.allows(k, j) {
                    continue;
                }
            }
            let xband = pair.hsi().band(k);
            let mut dot = 0.0;
            for (d, x) in dband.iter().zip(xband) {
                dot += d * x;
            }
            grad_w.set(k, j, scale * dot * sigmoid(params.w_raw.get(k, j)));
        }
    }

    // Kernel gradient via the blur adjoint: each kernel tap saw the extended
    // multispectral image at a fixed shift of the surviving sample sites.
    let (mh, mw, _) = pair.msi().dims();
    let a = kernel_anchor(size) as i64;
    let mut grad_phi = vec![0.0; size * size];
    for band in 0..b {
        let dband = &diff[band * plane..(band + 1) * plane];
        let yplane = pair.msi().band(band);
        for h in 0..m {
            let base_h = (geometry.offset + geometry.ratio * h) as i64;
            for w in 0..n {
                let base_w = (geometry.offset + geometry.ratio * w) as i64;
                let g = -scale * dband[h * n + w];
                if g == 0.0 {
                    continue;
                }
                for i in 0..size {
                    let src_h = ext_index(base_h + i as i64 - a, mh, geometry.boundary);
                    for jj in 0..size {
                        let src_w = ext_index(base_w + jj as i64 - a, mw, geometry.boundary);
                        if let (Some(sh), Some(sw)) = (src_h, src_w) {
                            grad_phi[i * size + jj] += g * yplane[sh * mw + sw];
                        }
                    }
                }
            }
        }
    }
    if config.lambda != 0.0 {
        for (gp, tg) in grad_phi.iter_mut().zip(tv_subgradient(&fwd.phi, size)) {
            *gp += config.lambda * tg;
        }
    }

    // Normalization adjoint: phi = s / sum(s).
    let dot_gphi: f64 = grad_phi.iter().zip(&fwd.phi).map(|(g, p)| g * p).sum();
    let grad_s: Vec<f64> = grad_phi
        .iter()
        .map(|g| (g - dot_gphi) / fwd.sum_s)
        .collect();

    // Stick-breaking adjoint, division-free: with prefix products
    // P_i = prod_{k<=i} (1 - v_k) and the tail recursion
    // R_i = gs_{i+1} v_{i+1} + (1 - v_{i+1}) R_{i+1},
    // grad_v_i = P_{i-1} (gs_i - R_i).
    let nst = fwd.v.len();
    let mut prefix = vec![1.0; nst];
    for i in 1..nst {
        prefix[i] = prefix[i - 1] * (1.0 - fwd.v[i - 1]);
    }
    let mut grad_v = vec![0.0; nst];
    let mut tail = 0.0;
    for i in (0..nst).rev() {
        grad_v[i] = prefix[i] * (grad_s[i] - tail);
        tail = grad_s[i] * fwd.v[i] + (1.0 - fwd.v[i]) * tail;
    }

    // Fused Beta-inverse-CDF and sigmoid adjoint:
    //   v = 1 - u^t, u = sigmoid(u_raw), t = 1/alpha
    //   d v / d u_raw = -t u^t (1 - u)      (using u' = u(1-u))
    //   d v / d alpha =  u^t ln(u) / alpha^2, ln(u) = -q
    let mut grad_u_raw = vec![0.0; nst];
    let mut grad_alpha_acc = 0.0;
    for i in 0..nst {
        grad_u_raw[i] = -grad_v[i] * fwd.t * fwd.p[i] * (1.0 - fwd.u[i]);
        grad_alpha_acc += grad_v[i] * fwd.p[i] * (-fwd.q[i]);
    }
    let grad_alpha = grad_alpha_acc / (fwd.alpha * fwd.alpha);
    let grad_alpha_raw = grad_alpha * sigmoid(params.alpha_raw);

    for (node, ok) in [
        ("gradient w_raw", grad_w.data().iter().all(|g| g.is_finite())),
        ("gradient u_raw", grad_u_raw.iter().all(|g| g.is_finite())),
        ("gradient alpha_raw", grad_alpha_raw.is_finite()),
    ] {
        if !ok {
            return Err(Error::NonFinite(node.into()));
        }
    }

    Ok((
        LossTerms { data_mse, tv, total },
        GradBundle {
            w_raw: grad_w,
            u_raw: grad_u_raw,
            alpha_raw: grad_alpha_raw,
        },
    ))
}

/// Analytic gradients of the composite objective.
pub fn gradients(
    pair: &ObservedPair,
    params: &EstimatorParams,
    config: &HyperConfig,
    geometry: &Geometry,
    mask: Option<&BandMask>,
) -> Result<GradBundle> {
    Ok(loss_and_gradients(pair, params, config, geometry, mask)?.1)
}

// --- optimization -------------------------------------------------------------------

/// Exponentially damped learning rate with a continuous exponent.
pub fn lr_schedule(t: usize, config: &HyperConfig) -> f64 {
    config.lr0 * config.decay_rate.powf(t as f64 / config.decay_step as f64)
}

#[allow(clippy::too_many_arguments)]
fn adam_update_slice(
    theta: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    lr: f64,
    config: &HyperConfig,
    bc1: f64,
    bc2: f64,
) {
    let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        theta[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
    }
}

/// One bias-corrected Adam update over all raw parameters.
pub fn adam_step(
    params: &EstimatorParams,
    state: &AdamState,
    grads: &GradBundle,
    lr: f64,
    config: &HyperConfig,
) -> Result<(EstimatorParams, AdamState)> {
    if grads.w_raw.rows() != params.w_raw.rows()
        || grads.w_raw.cols() != params.w_raw.cols()
        || grads.u_raw.len() != params.u_raw.len()
        || state.first.u_raw.len() != params.u_raw.len()
    {
        return Err(Error::Shape("gradient/state shapes do not match params".into()));
    }
    let mut p = params.clone();
    let mut s = state.clone();
    let step = s.step_count + 1;
    let bc1 = 1.0 - config.adam_beta1.powi(step as i32);
    let bc2 = 1.0 - config.adam_beta2.powi(step as i32);
    adam_update_slice(
        p.w_raw.data_mut(),
        s.first.w_raw.data_mut(),
        s.second.w_raw.data_mut(),
        grads.w_raw.data(),
        lr,
        config,
        bc1,
        bc2,
    );
    adam_update_slice(
        &mut p.u_raw,
        &mut s.first.u_raw,
        &mut s.second.u_raw,
        &grads.u_raw,
        lr,
        config,
        bc1,
        bc2,
    );
    let mut alpha = [p.alpha_raw];
    let mut ma = [s.first.alpha_raw];
    let mut va = [s.second.alpha_raw];
    adam_update_slice(&mut alpha, &mut ma, &mut va, &[grads.alpha_raw], lr, config, bc1, bc2);
    p.alpha_raw = alpha[0];
    s.first.alpha_raw = ma[0];
    s.second.alpha_raw = va[0];
    s.step_count = step;
    Ok((p, s))
}

// --- pretraining and training ----------------------------------------------------------

/// Objective of the response pretraining phase: the blur is deleted from the
/// spatial path, so the spectrally degraded hyperspectral image is matched
/// against the plainly decimated multispectral image.
pub fn pretrain_loss(
    pair: &ObservedPair,
    params: &EstimatorParams,
    geometry: &Geometry,
    mask: Option<&BandMask>,
) -> Result<f64> {
    validate_inputs(pair, params, geometry, mask)?;
    let srf = build_srf(params, mask)?;
    let x_d = spectral_degrade(pair.hsi(), &srf)?;
    let target = downsample(pair.msi(), geometry.ratio, geometry.offset)?;
    crate::cube::frobenius_mse(&x_d, &target)
}

/// Adam on the response weights only, against the decimated multispectral
/// image; stick variables and the concentration scalar are untouched.
pub fn pretrain_srf(
    pair: &ObservedPair,
    mut params: EstimatorParams,
    config: &HyperConfig,
    geometry: &Geometry,
    mask: Option<&BandMask>,
) -> Result<EstimatorParams> {
    validate_inputs(pair, &params, geometry, mask)?;
    config.validate()?;
    let target = downsample(pair.msi(), geometry.ratio, geometry.offset)?;
    let (m, n, b) = target.dims();
    let plane = m * n;
    let count = (m * n * b) as f64;
    let rows = params.input_bands();
    let cols = params.output_bands();

    let mut moment1 = vec![0.0; rows * cols];
    let mut moment2 = vec![0.0; rows * cols];
    for step in 0..config.pretrain_iterations {
        let srf = build_srf(&params, mask)?;
        let x_d = spectral_degrade(pair.hsi(), &srf)?;
        let scale = 2.0 / count;
        let mut grad = vec![0.0; rows * cols];
        let mut loss_acc = 0.0;
        for j in 0..b {
            let mut dband = Vec::with_capacity(plane);
            for idx in 0..plane {
                let d = x_d.data()[j * plane + idx] - target.data()[j * plane + idx];
                loss_acc += d * d;
                dband.push(d);
            }
            for k in 0..rows {
                if let Some(msk) = mask {
                    if !msk.allows(k, j) {
                        continue;
                    }
                }
                let xband = pair.hsi().band(k);
                let mut dot = 0.0;
                for (d, x) in dband.iter().zip(xband) {
                    dot += d * x;
                }
                grad[k * cols + j] = scale * dot * sigmoid(params.w_raw.get(k, j));
            }
        }
        if !(loss_acc / count).is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("pretraining loss or gradient at step {step}")));
        }
        let lr = lr_schedule(step, config);
        let bc1 = 1.0 - config.adam_beta1.powi(step as i32 + 1);
        let bc2 = 1.0 - config.adam_beta2.powi(step as i32 + 1);
        adam_update_slice(
            params.w_raw.data_mut(),
            &mut moment1,
            &mut moment2,
            &grad,
            lr,
            config,
            bc1,
            bc2,
        );
    }
    Ok(params)
}

/// One row of the loss trace: the losses after `iteration` full updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub data_mse: f64,
    pub tv: f64,
    pub total: f64,
}

/// Converged response and kernel, the full loss trace, and the exact
/// hyperparameters that produced them.
#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub srf: SrfMatrix,
    pub psf: Kernel,
    pub loss_trace: Vec<TraceEntry>,
    pub config: HyperConfig,
}

fn diverged(iteration: usize, err: Error, last: Option<&TraceEntry>) -> Error {
    let detail = match last {
        Some(t) => format!(
            "{err}; last finite loss {:.6e} was at iteration {}",
            t.total, t.iteration
        ),
        None => err.to_string(),
    };
    Error::Diverged { iteration, detail }
}

/// Full estimation run that also hands every intermediate parameter state to
/// `observer` (called with the number of completed updates, starting at 0
/// right after pretraining).
pub fn train_observed<F: FnMut(usize, &EstimatorParams)>(
    pair: &ObservedPair,
    config: &HyperConfig,
    geometry: &Geometry,
    mask: Option<&BandMask>,
    mut observer: F,
) -> Result<EstimationResult> {
    config.validate()?;
    let kernel_size = geometry.ratio;
    let params = EstimatorParams::init(pair.hsi().bands(), pair.msi().bands(), kernel_size)?;
    validate_inputs(pair, &params, geometry, mask)?;

    let mut params = pretrain_srf(pair, params, config, geometry, mask).map_err(|e| {
        Error::Diverged {
            iteration: 0,
            detail: format!("during pretraining: {e}"),
        }
    })?;
    observer(0, &params);
    let mut state = AdamState::new(&params)?;
    let mut trace: Vec<TraceEntry> = Vec::with_capacity(config.iterations + 1);

    for iter in 0..config.iterations {
        let (terms, grads) = loss_and_gradients(pair, &params, config, geometry, mask)
            .map_err(|e| diverged(iter, e, trace.last()))?;
        trace.push(TraceEntry {
            iteration: iter,
            data_mse: terms.data_mse,
            tv: terms.tv,
            total: terms.total,
        });
        let lr = lr_schedule(iter, config);
        let (next_params, next_state) = adam_step(&params, &state, &grads, lr, config)?;
        params = next_params;
        state = next_state;
        observer(iter + 1, &params);
    }

    let final_terms = loss_terms(pair, &params, config, geometry, mask)
        .map_err(|e| diverged(config.iterations, e, trace.last()))?;
    trace.push(TraceEntry {
        iteration: config.iterations,
        data_mse: final_terms.data_mse,
        tv: final_terms.tv,
        total: final_terms.total,
    });

    Ok(EstimationResult {
        srf: build_srf(&params, mask)?,
        psf: build_psf(&params, kernel_size)?,
        loss_trace: trace,
        config: config.clone(),
    })
}

/// Full estimation run: response pretraining, then `config.iterations` joint
/// Adam updates under the damped learning-rate schedule. The learned kernel
/// is geometry.ratio x geometry.ratio. Deterministic in (pair, config).
pub fn train(
    pair: &ObservedPair,
    config: &HyperConfig,
    geometry: &Geometry,
    mask: Option<&BandMask>,
) -> Result<EstimationResult> {
    train_observed(pair, config, geometry, mask, |_, _| {})
}

// --- gradient verification --------------------------------------------------------------

/// Worst-case deviation between analytic and central-finite-difference
/// gradients, over every raw parameter.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// max over parameters of |analytic - fd| / max(|analytic|, |fd|, 1e-5);
    /// the 1e-5 floor makes an absolute error below 1e-10 pass for
    /// near-zero gradients.
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub checked: usize,
}

/// Compares every analytic gradient component against a central finite
/// difference of the composite loss with the given step.
pub fn finite_difference_check(
    pair: &ObservedPair,
    params: &EstimatorParams,
    config: &HyperConfig,
    geometry: &Geometry,
    mask: Option<&BandMask>,
    step: f64,
) -> Result<GradCheck> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let (_, analytic) = loss_and_gradients(pair, params, config, geometry, mask)?;

    let mut max_rel = 0.0;
    let mut worst = String::from("none");
    let mut checked = 0;
    let consider = |name: String, a: f64, fd: f64, max_rel: &mut f64, worst: &mut String| {
        let err = (a - fd).abs();
        let rel = err / a.abs().max(fd.abs()).max(1e-5);
        if rel > *max_rel {
            *max_rel = rel;
            *worst = name;
        }
    };

    let rows = params.input_bands();
    let cols = params.output_bands();
    for k in 0..rows {
        for j in 0..cols {
            let mut plus = params.clone();
            plus.w_raw.set(k, j, params.w_raw.get(k, j) + step);
            let mut minus = params.clone();
            minus.w_raw.set(k, j, params.w_raw.get(k, j) - step);
            let fd = (total_loss(pair, &plus, config, geometry, mask)?
                - total_loss(pair, &minus, config, geometry, mask)?)
                / (2.0 * step);
            consider(
                format!("w_raw[{k}][{j}]"),
                analytic.w_raw.get(k, j),
                fd,
                &mut max_rel,
                &mut worst,
            );
            checked += 1;
        }
    }
    for i in 0..params.u_raw.len() {
        let mut plus = params.clone();
        plus.u_raw[i] += step;
        let mut minus = params.clone();
        minus.u_raw[i] -= step;
        let fd = (total_loss(pair, &plus, config, geometry, mask)?
            - total_loss(pair, &minus, config, geometry, mask)?)
            / (2.0 * step);
        consider(format!("u_raw[{i}]"), analytic.u_raw[i], fd, &mut max_rel, &mut worst);
        checked += 1;
    }
    {
        let mut plus = params.clone();
        plus.alpha_raw += step;
        let mut minus = params.clone();
        minus.alpha_raw -= step;
        let fd = (total_loss(pair, &plus, config, geometry, mask)?
            - total_loss(pair, &minus, config, geometry, mask)?)
            / (2.0 * step);
        consider("alpha_raw".into(), analytic.alpha_raw, fd, &mut max_rel, &mut worst);
        checked += 1;
    }

    Ok(GradCheck {
        max_rel_error: max_rel,
        worst_parameter: worst,
        checked,
    })
}

/// Randomized observed pair plus raw parameters suitable for finite
/// difference verification: the induced kernel is resampled until all
/// adjacent cell differences clear a margin, so the total-variation term is
/// locally smooth around the check point.
pub fn gradcheck_instance(
    hsi_height: usize,
    hsi_width: usize,
    hsi_bands: usize,
    msi_bands: usize,
    ratio: usize,
    seed: u64,
) -> Result<(ObservedPair, EstimatorParams, Geometry)> {
    use crate::rng::Xoshiro256;
    if msi_bands == 0 || msi_bands >= hsi_bands {
        return Err(Error::Invalid(format!(
            "need 1 <= msi bands < hsi bands, got {msi_bands} vs {hsi_bands}"
        )));
    }
    let geometry = Geometry::centered(ratio);
    geometry.validate()?;
    let mut rng = Xoshiro256::seed_from(seed);

    // A forward-model pair from a random scene keeps the loss at the scale
    // training actually sees; two unrelated cubes would inflate it ~20x and
    // with it the finite-difference rounding noise.
    let scene = HyperCube::from_fn(
        ratio * hsi_height,
        ratio * hsi_width,
        hsi_bands,
        |_, _, _| rng.next_f64(),
    )?;
    let taps: Vec<f64> = (0..ratio * ratio)
        .map(|_| rng.next_range(0.2, 1.0))
        .collect();
    let tap_sum: f64 = taps.iter().sum();
    let kernel = Kernel::new(ratio, taps.iter().map(|t| t / tap_sum).collect())?;
    let srf = SrfMatrix::new(Matrix::from_fn(hsi_bands, msi_bands, |_, _| {
        rng.next_range(0.1, 1.1)
    })?)?;
    let pair = crate::degrade::degrade_scene(&scene, &kernel, &srf, &geometry)?;

    for _attempt in 0..64 {
        let mut params = EstimatorParams::init(hsi_bands, msi_bands, ratio)?;
        for v in params.w_raw.data_mut() {
            *v = rng.next_range(-1.0, 1.0);
        }
        // alpha is kept high enough that late sticks retain real mass: with
        // alpha near 1 their gradients fall under the finite-difference noise
        // floor at step 1e-6 and the check would compare noise to noise.
        for v in &mut params.u_raw {
            *v = rng.next_range(-1.0, 1.0);
        }
        params.alpha_raw = rng.next_range(1.5, 3.0);

        let kernel = build_psf(&params, ratio)?;
        let phi = kernel.weights();
        let mut margin = f64::INFINITY;
        for i in 0..ratio {
            for j in 0..ratio - 1 {
                margin = margin.min((phi[i * ratio + j + 1] - phi[i * ratio + j]).abs());
            }
        }
        for i in 0..ratio.saturating_sub(1) {
            for j in 0..ratio {
                margin = margin.min((phi[(i + 1) * ratio + j] - phi[i * ratio + j]).abs());
            }
        }
        if ratio == 1 || margin >= 1e-4 {
            return Ok((pair, params, geometry));
        }
    }
    Err(Error::Invalid(
        "could not sample a kernel clear of total-variation kinks".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::{conv2d_bandwise, BoundaryMode};
    use crate::degrade::{
        degrade_scene, gaussian_kernel, synth_scene, synth_srf, Overlap, SceneSpec, SrfKind,
        SrfProfile,
    };
    use crate::rng::Xoshiro256;

    fn scene(height: usize, width: usize, bands: usize, seed: u64) -> HyperCube {
        synth_scene(&SceneSpec {
            height,
            width,
            bands,
            endmember_count: 4,
            smoothness: 3.0,
            seed,
        })
        .expect("scene generation must succeed")
    }

    /// Noiseless pair with known response and kernel; kernel size = ratio so
    /// the pair matches what train() would estimate.
    fn true_pair(
        scene_extent: usize,
        bands: usize,
        msi_bands: usize,
        ratio: usize,
        seed: u64,
    ) -> (ObservedPair, SrfMatrix, Kernel, Geometry) {
        let z = scene(scene_extent, scene_extent, bands, seed);
        let profile = SrfProfile::evenly_spaced(
            SrfKind::GaussianBumps,
            bands,
            msi_bands,
            Overlap::Full,
            1e-3,
        )
        .expect("profile");
        let srf = synth_srf(bands, msi_bands, &profile, seed ^ 0x5ca1ab1e).expect("srf");
        let psf = gaussian_kernel(ratio, 0.8).expect("kernel");
        let geometry = Geometry::centered(ratio);
        let pair = degrade_scene(&z, &psf, &srf, &geometry).expect("pair");
        (pair, srf, psf, geometry)
    }

    #[test]
    fn activation_values_and_tails() {
        assert_eq!(softplus(0.0), 2f64.ln(), "softplus(0) must be ln 2");
        assert_eq!(sigmoid(0.0), 0.5, "sigmoid(0) must be one half");
        assert!(
            (softplus(50.0) - 50.0).abs() < 1e-12,
            "softplus must be asymptotically linear"
        );
        let tail = softplus(-50.0);
        assert!(
            tail > 0.0 && tail < 1e-20,
            "softplus(-50) must be tiny but positive, got {tail}"
        );
        assert!(sigmoid(-1000.0) == 0.0 && sigmoid(1000.0) == 1.0);
    }

    #[test]
    fn activation_inverses_roundtrip() {
        for y in [1e-6, 0.3, 2f64.ln(), 5.0, 40.0] {
            let x = inv_softplus(y).expect("positive input");
            assert!(
                (softplus(x) - y).abs() <= 1e-12 * y.max(1.0),
                "softplus inverse failed at {y}"
            );
        }
        for y in [1e-9, 0.25, 0.5, 0.999] {
            let x = logit(y).expect("open-interval input");
            assert!((sigmoid(x) - y).abs() <= 1e-12, "sigmoid inverse failed at {y}");
        }
        assert!(inv_softplus(0.0).is_err(), "softplus preimage of 0 must be rejected");
        assert!(logit(1.0).is_err(), "sigmoid preimage of 1 must be rejected");
    }

    #[test]
    fn stick_breaking_halves_example() {
        let s = stick_breaking(&[0.5, 0.5, 0.5, 0.5]).expect("valid sticks");
        assert_eq!(s, vec![0.5, 0.25, 0.125, 0.0625], "repeated halving must be exact");
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn stick_breaking_matches_product_oracle() {
        let mut rng = Xoshiro256::seed_from(41);
        for _ in 0..20 {
            let v: Vec<f64> = (0..16).map(|_| rng.next_range(1e-3, 1.0 - 1e-3)).collect();
            let s = stick_breaking(&v).expect("valid sticks");
            for i in 0..v.len() {
                let mut expected = v[i];
                for k in 0..i {
                    expected *= 1.0 - v[k];
                }
                assert!(
                    (s[i] - expected).abs() <= 1e-15,
                    "stick {i} disagrees with the direct product"
                );
            }
        }
    }

    #[test]
    fn stick_breaking_rejects_out_of_range() {
        assert!(stick_breaking(&[0.5, 1.0]).is_err(), "v = 1 must be rejected");
        assert!(stick_breaking(&[0.0]).is_err(), "v = 0 must be rejected");
        assert!(stick_breaking(&[0.5, -0.1]).is_err(), "negative v must be rejected");
        assert!(stick_breaking(&[f64::NAN]).is_err(), "NaN must be rejected");
    }

    #[test]
    fn default_params_give_dirichlet_mean_kernel() {
        let params = EstimatorParams::init(6, 3, 2).expect("init");
        let kernel = build_psf(&params, 2).expect("kernel");
        let expected = [8.0 / 15.0, 4.0 / 15.0, 2.0 / 15.0, 1.0 / 15.0];
        for (got, want) in kernel.weights().iter().zip(expected) {
            assert!(
                (got - want).abs() <= 1e-15,
                "default kernel cell {got} should be {want}"
            );
        }
        let sum: f64 = kernel.weights().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "kernel must sum to 1, got {sum}");
    }

    #[test]
    fn saturated_stick_pins_first_cell_near_zero() {
        let mut params = EstimatorParams::init(4, 2, 2).expect("init");
        params.u_raw = vec![30.0, -30.0, -30.0, -30.0];
        let kernel = build_psf(&params, 2).expect("kernel");
        let phi = kernel.weights();
        assert!(
            phi[0] > 0.0 && phi[0] < 1e-10,
            "saturated u must push the first cell toward zero, got {}",
            phi[0]
        );
        let sum: f64 = phi.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "kernel must stay on the simplex");
        assert!(phi.iter().all(|&p| p > 0.0 && p < 1.0), "cells must stay inside (0,1)");
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn kernel_matches_direct_power_oracle() {
        let mut rng = Xoshiro256::seed_from(97);
        for _ in 0..10 {
            let mut params = EstimatorParams::init(4, 2, 3).expect("init");
            for v in &mut params.u_raw {
                *v = rng.next_range(-2.0, 2.0);
            }
            params.alpha_raw = rng.next_range(-0.5, 1.5);
            let kernel = build_psf(&params, 3).expect("kernel");

            // Textbook chain evaluated the naive way: the implementation uses
            // exp/expm1 identities instead of powf, so agreement is evidence.
            let alpha = (1.0 + params.alpha_raw.exp()).ln();
            let v: Vec<f64> = params
                .u_raw
                .iter()
                .map(|&x| 1.0 - (1.0 / (1.0 + (-x).exp())).powf(1.0 / alpha))
                .collect();
            let mut s = Vec::new();
            for i in 0..v.len() {
                let mut si = v[i];
                for k in 0..i {
                    si *= 1.0 - v[k];
                }
                s.push(si);
            }
            let total: f64 = s.iter().sum();
            for (i, (&got, want)) in kernel.weights().iter().zip(s.iter().map(|x| x / total)).enumerate() {
                assert!(
                    (got - want).abs() <= 1e-13,
                    "kernel cell {i}: {got} vs oracle {want}"
                );
            }
        }
    }

    #[test]
    fn response_starts_flat_and_respects_mask() {
        let params = EstimatorParams::init(6, 2, 2).expect("init");
        let flat = build_srf(&params, None).expect("srf");
        for k in 0..6 {
            for j in 0..2 {
                assert_eq!(flat.get(k, j), 2f64.ln(), "initial response must be ln 2");
            }
        }
        let mask = BandMask::from_ranges(&[(0, 2), (3, 5)]).expect("mask");
        let masked = build_srf(&params, Some(&mask)).expect("masked srf");
        for k in 0..6 {
            assert_eq!(
                masked.get(k, 0),
                if k <= 2 { 2f64.ln() } else { 0.0 },
                "band 0 support is rows 0..=2"
            );
            assert_eq!(
                masked.get(k, 1),
                if k >= 3 { 2f64.ln() } else { 0.0 },
                "band 1 support is rows 3..=5"
            );
        }
    }

    #[test]
    fn response_matches_softplus_oracle() {
        let mut rng = Xoshiro256::seed_from(11);
        let mut params = EstimatorParams::init(5, 3, 2).expect("init");
        for v in params.w_raw.data_mut() {
            *v = rng.next_range(-3.0, 3.0);
        }
        let srf = build_srf(&params, None).expect("srf");
        for k in 0..5 {
            for j in 0..3 {
                let x = params.w_raw.get(k, j);
                let want = (1.0 + x.exp()).ln();
                assert!(
                    (srf.get(k, j) - want).abs() <= 1e-15,
                    "response entry ({k},{j}) disagrees with softplus"
                );
            }
        }
    }

    #[test]
    fn tv_loss_examples() {
        assert_eq!(tv_loss(&Kernel::uniform(4).unwrap()), 0.0, "flat kernel has zero variation");
        let k = Kernel::new(2, vec![0.4, 0.1, 0.4, 0.1]).unwrap();
        assert!(
            (tv_loss(&k) - 0.6).abs() <= 1e-15,
            "two 0.3 jumps plus zero vertical diffs must give 0.6"
        );
    }

    #[test]
    fn tv_loss_matches_loop_oracle() {
        let mut rng = Xoshiro256::seed_from(23);
        for _ in 0..20 {
            let w: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
            let k = Kernel::new(4, w.clone()).unwrap();
            let mut want = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    if j + 1 < 4 {
                        want += (w[i * 4 + j + 1] - w[i * 4 + j]).abs();
                    }
                    if i + 1 < 4 {
                        want += (w[(i + 1) * 4 + j] - w[i * 4 + j]).abs();
                    }
                }
            }
            assert!((tv_loss(&k) - want).abs() <= 1e-14, "variation disagrees with oracle");
        }
    }

    #[test]
    fn tv_subgradient_hand_cases() {
        let g = tv_subgradient(&[0.4, 0.1, 0.4, 0.1], 2);
        assert_eq!(g, vec![1.0, -1.0, 1.0, -1.0], "descending rows push mass right to left");
        let flat = tv_subgradient(&[0.25; 4], 2);
        assert_eq!(flat, vec![0.0; 4], "ties must contribute nothing (sign(0) = 0)");
    }

    #[test]
    fn decimated_blur_matches_composed_path_bitwise() {
        let mut rng = Xoshiro256::seed_from(3);
        let cube = HyperCube::from_fn(16, 16, 3, |_, _, _| rng.next_f64()).unwrap();
        let kernel = gaussian_kernel(4, 1.1).unwrap();
        for boundary in [
            BoundaryMode::SymmetricReflect,
            BoundaryMode::ReplicateEdge,
            BoundaryMode::ZeroPad,
        ] {
            for offset in [0, 2] {
                let geometry = Geometry { ratio: 4, boundary, offset };
                let fast = decimated_blur(&cube, &kernel, &geometry).expect("fast path");
                let full = downsample(
                    &conv2d_bandwise(&cube, &kernel, boundary).expect("conv"),
                    4,
                    offset,
                )
                .expect("decimate");
                assert_eq!(fast.dims(), full.dims());
                for (a, b) in fast.data().iter().zip(full.data()) {
                    assert_eq!(
                        a.to_bits(),
                        b.to_bits(),
                        "fast path must be bit-identical to blur-then-decimate"
                    );
                }
            }
        }
    }

    #[test]
    fn encoded_truth_reaches_data_floor() {
        let (pair, srf, psf, geometry) = true_pair(16, 8, 3, 4, 5);
        let params = EstimatorParams::encode(&srf, &psf).expect("encode");
        let (l, x_d, y_d) = data_loss(&pair, &params, &geometry, None).expect("loss");
        assert_eq!(x_d.dims(), (4, 4, 3), "degraded cubes live at low resolution");
        assert_eq!(y_d.dims(), (4, 4, 3));
        assert!(
            l <= 1e-20,
            "true response and kernel must explain the pair, got {l:.3e}"
        );
    }

    #[test]
    fn total_loss_zero_lambda_is_data_term_exactly() {
        let (pair, _, _, geometry) = true_pair(16, 6, 2, 2, 9);
        let params = EstimatorParams::init(6, 2, 2).unwrap();
        let config = HyperConfig { lambda: 0.0, ..HyperConfig::default() };
        let terms = loss_terms(&pair, &params, &config, &geometry, None).unwrap();
        assert_eq!(terms.total, terms.data_mse, "lambda 0 must leave the data term untouched");
    }

    #[test]
    fn total_loss_adds_scaled_smoothness() {
        let (pair, srf, _, geometry) = true_pair(16, 6, 2, 2, 9);
        let stepped = Kernel::new(2, vec![0.4, 0.1, 0.4, 0.1]).unwrap();
        let params = EstimatorParams::encode(&srf, &stepped).expect("encode");
        let config = HyperConfig { lambda: 1e-7, ..HyperConfig::default() };
        let terms = loss_terms(&pair, &params, &config, &geometry, None).unwrap();
        assert!(
            ((terms.total - terms.data_mse) - 6e-8).abs() <= 1e-15,
            "smoothness contribution should be lambda times 0.6"
        );
    }

    #[test]
    fn gradients_vanish_at_encoded_optimum() {
        let (pair, srf, psf, geometry) = true_pair(16, 8, 3, 4, 13);
        let params = EstimatorParams::encode(&srf, &psf).expect("encode");
        let config = HyperConfig { lambda: 0.0, ..HyperConfig::default() };
        let (terms, grads) = loss_and_gradients(&pair, &params, &config, &geometry, None).unwrap();
        assert!(terms.data_mse <= 1e-20);
        for g in grads.w_raw.data() {
            assert!(g.abs() <= 1e-12, "response gradient {g} should vanish at the optimum");
        }
        for g in &grads.u_raw {
            assert!(g.abs() <= 1e-12, "stick gradient {g} should vanish at the optimum");
        }
        assert!(grads.alpha_raw.abs() <= 1e-12, "concentration gradient should vanish");
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (pair, params, geometry) = gradcheck_instance(12, 12, 6, 3, 4, 7).expect("instance");
        let config = HyperConfig { lambda: 1e-3, ..HyperConfig::default() };
        let check =
            finite_difference_check(&pair, &params, &config, &geometry, None, 1e-6).expect("check");
        assert_eq!(check.checked, 6 * 3 + 16 + 1, "every raw parameter must be checked");
        assert!(
            check.max_rel_error <= 1e-5,
            "worst deviation {} at {}",
            check.max_rel_error,
            check.worst_parameter
        );
    }

    #[test]
    fn masked_gradients_match_finite_differences() {
        let (pair, params, geometry) = gradcheck_instance(12, 12, 6, 3, 4, 19).expect("instance");
        let mask = BandMask::from_ranges(&[(0, 2), (2, 4), (3, 5)]).expect("mask");
        let config = HyperConfig { lambda: 1e-3, ..HyperConfig::default() };
        let (_, grads) =
            loss_and_gradients(&pair, &params, &config, &geometry, Some(&mask)).unwrap();
        for k in 0..6 {
            for j in 0..3 {
                if !mask.allows(k, j) {
                    assert_eq!(grads.w_raw.get(k, j), 0.0, "masked entries carry no gradient");
                }
            }
        }
        let check = finite_difference_check(&pair, &params, &config, &geometry, Some(&mask), 1e-6)
            .expect("check");
        assert!(
            check.max_rel_error <= 1e-5,
            "worst masked deviation {} at {}",
            check.max_rel_error,
            check.worst_parameter
        );
    }

    #[test]
    fn lr_schedule_examples() {
        let config = HyperConfig::default();
        assert_eq!(lr_schedule(0, &config), 0.1, "schedule starts at lr0");
        assert!(
            (lr_schedule(250, &config) - 0.099).abs() <= 1e-15,
            "one decay period multiplies by 0.99"
        );
        assert!(
            (lr_schedule(500, &config) - 0.1 * 0.9801).abs() <= 1e-15,
            "two decay periods multiply by 0.99^2"
        );
        let half = lr_schedule(125, &config);
        assert!(
            (half - 0.1 * 0.99f64.sqrt()).abs() <= 1e-12,
            "fractional periods decay continuously"
        );
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point_from_rest() {
        let params = EstimatorParams::init(3, 2, 2).unwrap();
        let state = AdamState::new(&params).unwrap();
        let zeros = GradBundle::zeros_like(&params).unwrap();
        let config = HyperConfig::default();
        let (next, next_state) = adam_step(&params, &state, &zeros, 0.1, &config).unwrap();
        assert_eq!(next, params, "zero gradient from zero moments must not move");
        assert_eq!(next_state.step_count, 1);

        // From nonzero moments a zero gradient decays them geometrically.
        let mut seeded = AdamState::new(&params).unwrap();
        seeded.first.alpha_raw = 1.0;
        seeded.second.alpha_raw = 4.0;
        let (_, decayed) = adam_step(&params, &seeded, &zeros, 0.1, &config).unwrap();
        assert_eq!(decayed.first.alpha_raw, 0.9, "first moment decays by beta1");
        assert_eq!(decayed.second.alpha_raw, 4.0 * 0.999, "second moment decays by beta2");
    }

    #[test]
    fn adam_first_step_moves_by_signed_learning_rate() {
        let params = EstimatorParams::init(2, 1, 2).unwrap();
        let state = AdamState::new(&params).unwrap();
        let mut grads = GradBundle::zeros_like(&params).unwrap();
        grads.u_raw = vec![0.7, -3.0, 0.2, -0.01];
        let config = HyperConfig::default();
        let (next, _) = adam_step(&params, &state, &grads, 0.05, &config).unwrap();
        for i in 0..4 {
            let delta = next.u_raw[i] - params.u_raw[i];
            let want = -0.05 * grads.u_raw[i].signum();
            assert!(
                (delta - want).abs() <= 0.05 * 1e-5,
                "first update must be close to lr in the gradient's direction"
            );
        }
    }

    #[test]
    fn adam_matches_scalar_reference_trace() {
        // Minimize f(theta) = theta^2 from theta = 1 with lr 0.1; grads are
        // fed through the w slot. Reference is an independent scalar loop.
        let config = HyperConfig::default();
        let mut params = EstimatorParams::init(1, 1, 1).unwrap();
        params.w_raw.set(0, 0, 1.0);
        let mut state = AdamState::new(&params).unwrap();

        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for step in 1..=5 {
            let g = 2.0 * theta;
            let mut grads = GradBundle::zeros_like(&params).unwrap();
            grads.w_raw.set(0, 0, 2.0 * params.w_raw.get(0, 0));
            let (p, s) = adam_step(&params, &state, &grads, 0.1, &config).unwrap();
            params = p;
            state = s;

            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(step));
            let vhat = v / (1.0 - 0.999f64.powi(step));
            theta -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
            assert!(
                (params.w_raw.get(0, 0) - theta).abs() <= 1e-12,
                "step {step}: {} vs reference {theta}",
                params.w_raw.get(0, 0)
            );
        }
    }

    #[test]
    fn pretrain_zero_iterations_is_identity() {
        let (pair, _, _, geometry) = true_pair(16, 6, 2, 2, 21);
        let params = EstimatorParams::init(6, 2, 2).unwrap();
        let config = HyperConfig { pretrain_iterations: 0, ..HyperConfig::default() };
        let out = pretrain_srf(&pair, params.clone(), &config, &geometry, None).unwrap();
        assert_eq!(out, params, "zero pretraining steps must change nothing");
    }

    #[test]
    fn pretrain_fits_response_through_identity_blur() {
        // A delta kernel at the anchor makes the spatial path a plain
        // decimation, so a perfectly consistent response exists. The scene is
        // unfiltered noise: decimated samples then form a well-conditioned
        // regression that 1000 steps fit to working precision.
        let mut rng = Xoshiro256::seed_from(29);
        let z = HyperCube::from_fn(32, 32, 6, |_, _, _| rng.next_f64()).unwrap();
        // Floor 0.3 keeps every true response entry away from the flat tail of
        // softplus, where fitting slows to a crawl.
        let profile =
            SrfProfile::evenly_spaced(SrfKind::GaussianBumps, 6, 2, Overlap::Full, 0.3).unwrap();
        let srf = synth_srf(6, 2, &profile, 31).unwrap();
        let mut taps = vec![0.0; 16];
        taps[kernel_anchor(4) * 4 + kernel_anchor(4)] = 1.0;
        let delta = Kernel::new(4, taps).unwrap();
        let geometry = Geometry::centered(4);
        let pair = degrade_scene(&z, &delta, &srf, &geometry).unwrap();

        let params = EstimatorParams::init(6, 2, 4).unwrap();
        let before = pretrain_loss(&pair, &params, &geometry, None).unwrap();
        let config = HyperConfig::default();
        let fitted = pretrain_srf(&pair, params.clone(), &config, &geometry, None).unwrap();
        let after = pretrain_loss(&pair, &fitted, &geometry, None).unwrap();
        assert!(
            after < 1e-8,
            "pretraining must fit a consistent response, got {after:.3e} from {before:.3e}"
        );
        assert_eq!(fitted.u_raw, params.u_raw, "pretraining must not touch stick variables");
        assert_eq!(
            fitted.alpha_raw.to_bits(),
            params.alpha_raw.to_bits(),
            "pretraining must not touch the concentration"
        );
    }

    #[test]
    fn train_zero_iterations_returns_pretrained_state() {
        let (pair, _, _, geometry) = true_pair(16, 6, 2, 2, 33);
        let config = HyperConfig {
            iterations: 0,
            pretrain_iterations: 0,
            ..HyperConfig::default()
        };
        let result = train(&pair, &config, &geometry, None).unwrap();
        assert_eq!(result.loss_trace.len(), 1, "trace holds the single final evaluation");
        assert_eq!(result.loss_trace[0].iteration, 0);

        let init = EstimatorParams::init(6, 2, 2).unwrap();
        assert_eq!(
            result.psf,
            build_psf(&init, 2).unwrap(),
            "no updates means the initial kernel"
        );
        assert_eq!(
            result.srf,
            build_srf(&init, None).unwrap(),
            "no updates means the initial response"
        );
        let (l, _, _) = data_loss(&pair, &init, &geometry, None).unwrap();
        assert_eq!(result.loss_trace[0].data_mse.to_bits(), l.to_bits());
    }

    #[test]
    fn trace_first_entry_matches_pretrained_loss() {
        let (pair, _, _, geometry) = true_pair(16, 6, 2, 2, 37);
        let config = HyperConfig {
            iterations: 2,
            pretrain_iterations: 40,
            ..HyperConfig::default()
        };
        let result = train(&pair, &config, &geometry, None).unwrap();
        assert_eq!(result.loss_trace.len(), 3, "two updates plus the final evaluation");

        let init = EstimatorParams::init(6, 2, 2).unwrap();
        let pre = pretrain_srf(&pair, init, &config, &geometry, None).unwrap();
        let terms = loss_terms(&pair, &pre, &config, &geometry, None).unwrap();
        assert_eq!(
            result.loss_trace[0].total.to_bits(),
            terms.total.to_bits(),
            "entry 0 is the loss right after pretraining, before any joint update"
        );
    }

    #[test]
    fn training_run_is_deterministic() {
        let (pair, _, _, geometry) = true_pair(16, 6, 2, 2, 43);
        let config = HyperConfig {
            iterations: 30,
            pretrain_iterations: 50,
            ..HyperConfig::default()
        };
        let a = train(&pair, &config, &geometry, None).unwrap();
        let b = train(&pair, &config, &geometry, None).unwrap();
        for (x, y) in a.psf.weights().iter().zip(b.psf.weights()) {
            assert_eq!(x.to_bits(), y.to_bits(), "kernel must be bit-reproducible");
        }
        for (x, y) in a.srf.weights().data().iter().zip(b.srf.weights().data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "response must be bit-reproducible");
        }
        for (x, y) in a.loss_trace.iter().zip(&b.loss_trace) {
            assert_eq!(x.total.to_bits(), y.total.to_bits(), "trace must be bit-reproducible");
        }
    }

    #[test]
    fn training_reduces_data_term_and_keeps_invariants() {
        let (pair, _, _, geometry) = true_pair(32, 6, 2, 2, 47);
        let config = HyperConfig::default();
        let result = train_observed(&pair, &config, &geometry, None, |updates, params| {
            if updates % 25 != 0 {
                return;
            }
            let kernel = build_psf(params, 2).expect("kernel stays valid");
            let sum: f64 = kernel.weights().iter().sum();
            assert!(
                (sum - 1.0).abs() <= 1e-12,
                "kernel left the simplex at update {updates}: sum {sum}"
            );
            assert!(
                kernel.weights().iter().all(|&p| p > 0.0 && p < 1.0),
                "kernel cell left (0,1) at update {updates}"
            );
            let srf = build_srf(params, None).expect("response stays valid");
            assert!(
                srf.weights().data().iter().all(|&w| w > 0.0),
                "response entry left the positive cone at update {updates}"
            );
        })
        .unwrap();

        assert_eq!(result.loss_trace.len(), 501);
        let first = result.loss_trace[0].data_mse;
        let last = result.loss_trace.last().unwrap().data_mse;
        assert!(
            last <= first / 1e3,
            "joint training should cut the data term by three orders: {first:.3e} -> {last:.3e}"
        );
    }

    #[test]
    fn train_divergence_reports_iteration_and_last_loss() {
        let (pair, _, _, geometry) = true_pair(16, 6, 2, 2, 53);
        let config = HyperConfig {
            iterations: 10,
            pretrain_iterations: 0,
            lr0: 1e300,
            ..HyperConfig::default()
        };
        match train(&pair, &config, &geometry, None) {
            Err(Error::Diverged { iteration, detail }) => {
                assert!(iteration >= 1, "the first loss evaluation itself is finite");
                assert!(
                    detail.contains("last finite loss"),
                    "divergence must report the last finite loss, got: {detail}"
                );
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn pretrain_divergence_wraps_with_iteration_zero() {
        // Entries near 1e200 overflow the squared residual to infinity on the
        // very first pretraining evaluation.
        let hsi = HyperCube::from_fn(4, 4, 3, |_, _, _| 1e200).unwrap();
        let msi = HyperCube::from_fn(8, 8, 2, |h, w, _| (h + w) as f64).unwrap();
        let pair = ObservedPair::new(hsi, msi, 2).unwrap();
        let geometry = Geometry::centered(2);
        let config = HyperConfig {
            iterations: 5,
            pretrain_iterations: 50,
            ..HyperConfig::default()
        };
        match train(&pair, &config, &geometry, None) {
            Err(Error::Diverged { iteration, detail }) => {
                assert_eq!(iteration, 0, "pretraining failures map to iteration 0");
                assert!(detail.contains("pretraining"), "detail should name the phase: {detail}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn encode_roundtrips_response_and_kernel() {
        let profile =
            SrfProfile::evenly_spaced(SrfKind::GaussianBumps, 6, 3, Overlap::Full, 1e-3).unwrap();
        let srf = synth_srf(6, 3, &profile, 61).unwrap();
        let psf = gaussian_kernel(4, 1.2).unwrap();
        let params = EstimatorParams::encode(&srf, &psf).expect("encode");
        let back_psf = build_psf(&params, 4).unwrap();
        for (got, want) in back_psf.weights().iter().zip(psf.weights()) {
            assert!((got - want).abs() <= 1e-12, "kernel roundtrip drifted: {got} vs {want}");
        }
        let back_srf = build_srf(&params, None).unwrap();
        for (got, want) in back_srf.weights().data().iter().zip(srf.weights().data()) {
            assert!(
                (got - want).abs() <= 1e-12 * want.max(1.0),
                "response roundtrip drifted: {got} vs {want}"
            );
        }
        assert!(
            EstimatorParams::encode(&srf, &Kernel::new(2, vec![0.5, 0.5, 0.25, 0.25]).unwrap())
                .is_err(),
            "kernels off the simplex must be rejected"
        );
    }

    #[test]
    fn band_mask_validation() {
        let mask = BandMask::from_ranges(&[(0, 3), (4, 7)]).unwrap();
        assert_eq!(mask.output_bands(), 2);
        assert!(mask.allows(3, 0) && !mask.allows(4, 0) && mask.allows(4, 1));
        assert!(mask.validate_for(8, 2).is_ok());
        assert!(mask.validate_for(7, 2).is_err(), "support beyond the input bands");
        assert!(mask.validate_for(8, 3).is_err(), "band count mismatch");
        assert!(BandMask::from_ranges(&[(3, 2)]).is_err(), "reversed range");
        assert!(BandMask::new(vec![vec![0], vec![]]).is_err(), "empty support");
        assert!(BandMask::new(vec![]).is_err(), "no bands");
    }

    #[test]
    fn gradcheck_instances_are_seeded() {
        let (pair_a, params_a, _) = gradcheck_instance(6, 6, 5, 2, 3, 71).unwrap();
        let (pair_b, params_b, _) = gradcheck_instance(6, 6, 5, 2, 3, 71).unwrap();
        let (_, params_c, _) = gradcheck_instance(6, 6, 5, 2, 3, 72).unwrap();
        assert_eq!(pair_a.hsi().data(), pair_b.hsi().data(), "same seed, same pair");
        assert_eq!(params_a, params_b, "same seed, same params");
        assert_ne!(params_a, params_c, "different seeds must differ");
        assert_eq!(pair_a.hsi().dims(), (6, 6, 5));
        assert_eq!(pair_a.msi().dims(), (18, 18, 2));
    }

    #[test]
    fn hyperconfig_validation_and_serde() {
        assert!(HyperConfig::default().validate().is_ok());
        assert!(HyperConfig { lr0: 0.0, ..HyperConfig::default() }.validate().is_err());
        assert!(HyperConfig { lambda: -1.0, ..HyperConfig::default() }.validate().is_err());
        assert!(HyperConfig { decay_rate: 0.0, ..HyperConfig::default() }.validate().is_err());
        assert!(HyperConfig { decay_step: 0, ..HyperConfig::default() }.validate().is_err());
        assert!(HyperConfig { adam_beta1: 1.0, ..HyperConfig::default() }.validate().is_err());

        let json = serde_json::to_string(&HyperConfig::default()).unwrap();
        let back: HyperConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, HyperConfig::default(), "config must roundtrip through JSON");
        let partial: HyperConfig = serde_json::from_str(r#"{"iterations": 7}"#).unwrap();
        assert_eq!(partial.iterations, 7);
        assert_eq!(partial.lr0, 0.1, "missing fields fall back to defaults");
    }
}

