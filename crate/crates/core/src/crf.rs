//! Fully-connected CRF with Potts compatibility and Gaussian spatial +
//! bilateral pairwise kernels, solved by mean-field iteration.
//!
//! Pairwise messages are exact O((HW)²) sums over a precomputed kernel
//! matrix, so the grid size is capped at [`MAX_PIXELS`].

use crate::error::{Error, Result};
use crate::losses::PROB_EPS;
use crate::tensor::Tensor;

/// Largest grid (64×64) accepted by the brute-force message passing.
pub const MAX_PIXELS: usize = 64 * 64;

/// Image width for which the reference spatial-appearance bandwidth applies.
pub const REFERENCE_WIDTH: f64 = 500.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UpdateMode {
    /// All pixels updated from the previous iterate.
    #[default]
    Parallel,
    /// Pixels updated one at a time in row-major order, each seeing the
    /// latest values; the free energy never increases.
    Sequential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrfConfig {
    pub w_bilateral: f64,
    pub w_spatial: f64,
    /// Spatial bandwidth of the bilateral kernel, in pixels of a
    /// [`REFERENCE_WIDTH`]-wide image when `scale_sigma_alpha` is set.
    pub sigma_alpha: f64,
    /// Color bandwidth of the bilateral kernel (colors in 0..=255).
    pub sigma_beta: f64,
    /// Bandwidth of the spatial smoothness kernel, in pixels.
    pub sigma_gamma: f64,
    pub iterations: usize,
    pub update_mode: UpdateMode,
    /// Rescale `sigma_alpha` by `image_width / 500`.
    pub scale_sigma_alpha: bool,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            w_bilateral: 10.0,
            w_spatial: 3.0,
            sigma_alpha: 80.0,
            sigma_beta: 13.0,
            sigma_gamma: 3.0,
            iterations: 10,
            update_mode: UpdateMode::Parallel,
            scale_sigma_alpha: true,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_bilateral >= 0.0 && self.w_spatial >= 0.0) {
            return Err(Error::Config("CRF kernel weights must be nonnegative".into()));
        }
        if !(self.sigma_alpha > 0.0 && self.sigma_beta > 0.0 && self.sigma_gamma > 0.0) {
            return Err(Error::Config("CRF bandwidths must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("CRF needs at least one iteration".into()));
        }
        Ok(())
    }

    pub fn effective_sigma_alpha(&self, width: usize) -> f64 {
        if self.scale_sigma_alpha {
            self.sigma_alpha * width as f64 / REFERENCE_WIDTH
        } else {
            self.sigma_alpha
        }
    }

    fn has_pairwise(&self) -> bool {
        self.w_bilateral != 0.0 || self.w_spatial != 0.0
    }
}

/// Pixel positions (implicit grid coordinates) and RGB colors in 0..=255.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    pub height: usize,
    pub width: usize,
    pub colors: Vec<[f64; 3]>,
}

impl PixelFeatures {
    pub fn new(height: usize, width: usize, colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.len() != height * width {
            return Err(Error::shape(format!("{} colors for a {height}×{width} grid", colors.len())));
        }
        Ok(PixelFeatures { height, width, colors })
    }

    /// From a 3×H×W (or 1×3×H×W) image with values in [0, 1].
    pub fn from_image(image: &Tensor) -> Result<Self> {
        let (n, c, h, w) = image.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::shape(format!("expected one RGB image, got {:?}", image.shape())));
        }
        let d = image.data();
        let colors = (0..h * w).map(|p| [d[p] * 255.0, d[h * w + p] * 255.0, d[2 * h * w + p] * 255.0]).collect();
        Ok(PixelFeatures { height: h, width: w, colors })
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    fn position(&self, i: usize) -> (f64, f64) {
        ((i % self.width) as f64, (i / self.width) as f64)
    }
}

/// κ(f_i, f_j) for every pixel pair, with a zero diagonal.
#[derive(Clone, Debug)]
pub struct DenseKernel {
    n: usize,
    values: Vec<f64>,
}

impl DenseKernel {
    pub fn new(features: &PixelFeatures, cfg: &CrfConfig) -> Result<Self> {
        cfg.validate()?;
        let n = features.len();
        if n > MAX_PIXELS {
            return Err(Error::invalid(format!("{n} pixels exceed the dense CRF limit of {MAX_PIXELS}")));
        }
        let sa = cfg.effective_sigma_alpha(features.width);
        let (inv_a, inv_b, inv_g) =
            (0.5 / (sa * sa), 0.5 / (cfg.sigma_beta * cfg.sigma_beta), 0.5 / (cfg.sigma_gamma * cfg.sigma_gamma));
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            let (xi, yi) = features.position(i);
            let ci = features.colors[i];
            for j in (i + 1)..n {
                let (xj, yj) = features.position(j);
                let cj = features.colors[j];
                let dp = (xi - xj).powi(2) + (yi - yj).powi(2);
                let dc = (ci[0] - cj[0]).powi(2) + (ci[1] - cj[1]).powi(2) + (ci[2] - cj[2]).powi(2);
                let k = cfg.w_bilateral * (-dp * inv_a - dc * inv_b).exp() + cfg.w_spatial * (-dp * inv_g).exp();
                values[i * n + j] = k;
                values[j * n + i] = k;
            }
        }
        Ok(DenseKernel { n, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..][..self.n]
    }
}

fn check_distribution(probs: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let (n, k, h, w) = probs.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!("{what}: expected a single frame, got batch {n}")));
    }
    let hw = h * w;
    let d = probs.data();
    for p in 0..hw {
        let mut total = 0.0;
        for c in 0..k {
            let v = d[c * hw + p];
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{what}: invalid probability {v} at pixel {p}")));
            }
            total += v;
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("{what}: pixel {p} sums to {total}")));
        }
    }
    Ok((k, h, w))
}

/// Mean-field solver bound to one image's kernel.
#[derive(Clone, Debug)]
pub struct DenseCrf {
    kernel: Option<DenseKernel>,
    cfg: CrfConfig,
    height: usize,
    width: usize,
}

impl DenseCrf {
    pub fn new(features: &PixelFeatures, cfg: &CrfConfig) -> Result<Self> {
        cfg.validate()?;
        if features.len() > MAX_PIXELS {
            return Err(Error::invalid(format!(
                "{} pixels exceed the dense CRF limit of {MAX_PIXELS}",
                features.len()
            )));
        }
        let kernel = if cfg.has_pairwise() { Some(DenseKernel::new(features, cfg)?) } else { None };
        Ok(DenseCrf { kernel, cfg: cfg.clone(), height: features.height, width: features.width })
    }

    pub fn config(&self) -> &CrfConfig {
        &self.cfg
    }

    /// Refines per-pixel class distributions. Unaries are `-ln(clamped p)`
    /// and the iteration starts from the input distribution itself.
    pub fn infer(&self, unary_probs: &Tensor) -> Result<Tensor> {
        let (k, h, w) = check_distribution(unary_probs, "mean_field unaries")?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(format!("unaries are {h}×{w}, features {}×{}", self.height, self.width)));
        }
        // Without pairwise terms the unary distribution is already the fixed point.
        let Some(kernel) = &self.kernel else {
            return Ok(unary_probs.clone());
        };
        let n = h * w;
        let log_unary: Vec<f64> = unary_probs.data().iter().map(|&p| p.max(PROB_EPS).ln()).collect();
        // Channel-major like the tensor: q[c * n + i].
        let mut q = unary_probs.data().to_vec();
        let mut totals: Vec<f64> = (0..n).map(|i| (0..k).map(|c| q[c * n + i]).sum()).collect();
        let mut next = q.clone();
        let mut message = vec![0.0; k];
        let mut updated = vec![0.0; k];
        for _ in 0..self.cfg.iterations {
            match self.cfg.update_mode {
                UpdateMode::Parallel => {
                    for i in 0..n {
                        pairwise_message(kernel.row(i), &q, &totals, &mut message);
                        update_pixel(&log_unary, n, i, &message, &mut updated);
                        for c in 0..k {
                            next[c * n + i] = updated[c];
                        }
                    }
                    std::mem::swap(&mut q, &mut next);
                    for (i, t) in totals.iter_mut().enumerate() {
                        *t = (0..k).map(|c| q[c * n + i]).sum();
                    }
                }
                UpdateMode::Sequential => {
                    for i in 0..n {
                        pairwise_message(kernel.row(i), &q, &totals, &mut message);
                        update_pixel(&log_unary, n, i, &message, &mut updated);
                        for c in 0..k {
                            q[c * n + i] = updated[c];
                        }
                        totals[i] = updated.iter().sum();
                    }
                }
            }
        }
        Tensor::new(unary_probs.shape(), q)
    }
}

/// Σ a·b with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// message[c] = Σ_j κ_ij Σ_{c'≠c} Q_j(c') = κ_i·totals − κ_i·Q(c). The
/// diagonal of κ is zero.
fn pairwise_message(row: &[f64], q: &[f64], totals: &[f64], message: &mut [f64]) {
    let n = row.len();
    let all = dot(row, totals);
    for (c, m) in message.iter_mut().enumerate() {
        *m = all - dot(row, &q[c * n..][..n]);
    }
}

fn update_pixel(log_unary: &[f64], n: usize, i: usize, message: &[f64], out: &mut [f64]) {
    let k = out.len();
    let mut peak = f64::NEG_INFINITY;
    for c in 0..k {
        out[c] = log_unary[c * n + i] - message[c];
        peak = peak.max(out[c]);
    }
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - peak).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

pub fn mean_field(unary_probs: &Tensor, features: &PixelFeatures, cfg: &CrfConfig) -> Result<Tensor> {
    let (_, h, w) = check_distribution(unary_probs, "mean_field unaries")?;
    if (h, w) != (features.height, features.width) {
        return Err(Error::shape(format!("unaries are {h}×{w}, features {}×{}", features.height, features.width)));
    }
    DenseCrf::new(features, cfg)?.infer(unary_probs)
}

/// Mean-field objective (KL(Q‖P) up to a constant):
/// `Σ Q·ψ_u + Σ_{i<j} κ_ij Σ_{c≠c'} Q_i(c) Q_j(c') + Σ Q ln Q`.
pub fn free_energy(q: &Tensor, unary_probs: &Tensor, features: &PixelFeatures, cfg: &CrfConfig) -> Result<f64> {
    if q.shape() != unary_probs.shape() {
        return Err(Error::shape(format!("Q {:?} vs unaries {:?}", q.shape(), unary_probs.shape())));
    }
    let (k, h, w) = check_distribution(q, "free_energy Q")?;
    if (h, w) != (features.height, features.width) {
        return Err(Error::shape(format!("Q is {h}×{w}, features {}×{}", features.height, features.width)));
    }
    let n = h * w;
    let (qd, ud) = (q.data(), unary_probs.data());
    let mut unary = 0.0;
    let mut entropy = 0.0;
    for (&qv, &pv) in qd.iter().zip(ud) {
        unary -= qv * pv.max(PROB_EPS).ln();
        if qv > 0.0 {
            entropy += qv * qv.ln();
        }
    }
    let mut pairwise = 0.0;
    if cfg.has_pairwise() {
        let kernel = DenseKernel::new(features, cfg)?;
        let sums: Vec<f64> = (0..n).map(|i| (0..k).map(|c| qd[c * n + i]).sum()).collect();
        for i in 0..n {
            for j in (i + 1)..n {
                let same: f64 = (0..k).map(|c| qd[c * n + i] * qd[c * n + j]).sum();
                pairwise += kernel.get(i, j) * (sums[i] * sums[j] - same);
            }
        }
    }
    Ok(unary + pairwise + entropy)
}
