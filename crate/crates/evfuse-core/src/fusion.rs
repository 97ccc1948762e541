//! Minimum-variance fusion of image and event features.
//!
//! Two noisy observations of a shared latent feature, with per-location
//! variances, are optimally combined by the inverse-variance weights
//! `alpha* = var_evt / (var_img + var_evt)`; the fused estimator achieves
//! the harmonic variance `var_img * var_evt / (var_img + var_evt)`. The
//! attention network realizes these weights computationally: concatenate the
//! feature pair, 1x1 convolve down to C channels, ReLU, 3x3 convolve, and
//! squash through a sigmoid so the map lies strictly inside (0, 1).
//!
//! The module also carries the channel-averaged initialization that adapts a
//! 3-input-channel pretrained convolution to an 8-channel event tensor, a
//! sample-based estimator of the optimal weights, and a seeded Monte-Carlo
//! simulation used to check the variance claims end to end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

/// Dense `(C, H, W)` feature tensor with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("feature map: zero dimension"));
        }
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "feature map: data length {} does not match shape ({channels}, {height}, {width})",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("feature map: entries must be finite"));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Attention map with every entry strictly inside `(0, 1)`, shaped like the
/// feature pair it weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(FeatureMap);

impl AttentionMap {
    pub fn new(map: FeatureMap) -> Result<Self> {
        if !map.data.iter().all(|&v| v > 0.0 && v < 1.0) {
            return Err(Error::invalid("attention map: entries must lie strictly in (0, 1)"));
        }
        Ok(AttentionMap(map))
    }

    pub fn uniform(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(FeatureMap::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )?)
    }

    pub fn as_map(&self) -> &FeatureMap {
        &self.0
    }
}

/// Per-location noise variances of the two observations.
///
/// Both fields are non-negative and at every location at least one is
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceField {
    height: usize,
    width: usize,
    sigma2_img: Vec<f64>,
    sigma2_evt: Vec<f64>,
}

impl VarianceField {
    pub fn new(height: usize, width: usize, sigma2_img: Vec<f64>, sigma2_evt: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("variance field: zero dimension"));
        }
        if sigma2_img.len() != height * width || sigma2_evt.len() != height * width {
            return Err(Error::invalid("variance field: data length mismatch"));
        }
        for (i, (&a, &b)) in sigma2_img.iter().zip(&sigma2_evt).enumerate() {
            if !a.is_finite() || !b.is_finite() || a < 0.0 || b < 0.0 {
                return Err(Error::invalid(format!("variance field: negative or non-finite entry at {i}")));
            }
            if a == 0.0 && b == 0.0 {
                return Err(Error::invalid(format!("variance field: both variances zero at {i}")));
            }
        }
        Ok(VarianceField {
            height,
            width,
            sigma2_img,
            sigma2_evt,
        })
    }

    /// Single-location field, convenient for the scalar identities.
    pub fn scalar(sigma2_img: f64, sigma2_evt: f64) -> Result<Self> {
        Self::new(1, 1, vec![sigma2_img], vec![sigma2_evt])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sigma2_img(&self) -> &[f64] {
        &self.sigma2_img
    }

    pub fn sigma2_evt(&self) -> &[f64] {
        &self.sigma2_evt
    }
}

/// Optimal fusion weight per location: `var_evt / (var_img + var_evt)`.
///
/// Computed via the smaller variance and its complement so that swapping the
/// two modalities yields weights that sum to exactly 1.
pub fn optimal_alpha(vars: &VarianceField) -> Vec<f64> {
    vars.sigma2_img
        .iter()
        .zip(&vars.sigma2_evt)
        .map(|(&img, &evt)| alpha_star(img, evt))
        .collect()
}

fn alpha_star(sigma2_img: f64, sigma2_evt: f64) -> f64 {
    let sum = sigma2_img + sigma2_evt;
    if sigma2_evt <= sigma2_img {
        sigma2_evt / sum
    } else {
        1.0 - sigma2_img / sum
    }
}

/// Variance achieved by fusing at the optimal weight:
/// `var_img * var_evt / (var_img + var_evt)`, never above either input.
pub fn fused_variance(vars: &VarianceField) -> Vec<f64> {
    vars.sigma2_img
        .iter()
        .zip(&vars.sigma2_evt)
        .map(|(&img, &evt)| img * evt / (img + evt))
        .collect()
}

/// Analytic variance of the fused estimator at an arbitrary weight:
/// `alpha^2 * var_img + (1 - alpha)^2 * var_evt`.
pub fn fusion_variance_at(alpha: f64, sigma2_img: f64, sigma2_evt: f64) -> f64 {
    alpha * alpha * sigma2_img + (1.0 - alpha) * (1.0 - alpha) * sigma2_evt
}

/// Weighted fusion `alpha .* f_img + (1 - alpha) .* f_evt`.
///
/// Evaluated as `f_evt + alpha * (f_img - f_evt)`, which is algebraically
/// identical and makes the indifference identity exact: equal inputs return
/// the shared value unchanged for every alpha.
pub fn weighted_fuse(f_img: &FeatureMap, f_evt: &FeatureMap, alpha: &AttentionMap) -> Result<FeatureMap> {
    let shape = f_img.shape();
    if shape != f_evt.shape() || shape != alpha.as_map().shape() {
        return Err(Error::invalid(format!(
            "weighted_fuse: shape mismatch {:?} / {:?} / {:?}",
            shape,
            f_evt.shape(),
            alpha.as_map().shape()
        )));
    }
    let data = f_img
        .data
        .iter()
        .zip(&f_evt.data)
        .zip(&alpha.as_map().data)
        .map(|((&img, &evt), &a)| evt + a * (img - evt))
        .collect();
    FeatureMap::new(shape.0, shape.1, shape.2, data)
}

/// Convolution weights of shape `(out, in, kh, kw)` plus a per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::invalid("conv weights: zero dimension"));
        }
        if weights.len() != out_channels * in_channels * kernel_h * kernel_w {
            return Err(Error::invalid(format!(
                "conv weights: weight length {} does not match shape ({out_channels}, {in_channels}, {kernel_h}, {kernel_w})",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::invalid(format!(
                "conv weights: bias length {} does not match {out_channels} output channels",
                bias.len()
            )));
        }
        Ok(ConvWeights {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights,
            bias,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((oc * self.in_channels + ic) * self.kernel_h + ky) * self.kernel_w + kx]
    }
}

/// Direct 2D convolution with zero padding and stride 1.
pub fn conv2d(input: &FeatureMap, w: &ConvWeights, pad: usize) -> Result<FeatureMap> {
    if input.channels != w.in_channels {
        return Err(Error::invalid(format!(
            "conv2d: input has {} channels, weights expect {}",
            input.channels, w.in_channels
        )));
    }
    if input.height + 2 * pad < w.kernel_h || input.width + 2 * pad < w.kernel_w {
        return Err(Error::invalid("conv2d: kernel larger than padded input"));
    }
    let out_h = input.height + 2 * pad + 1 - w.kernel_h;
    let out_w = input.width + 2 * pad + 1 - w.kernel_w;
    let mut out = vec![0.0; w.out_channels * out_h * out_w];
    for oc in 0..w.out_channels {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = w.bias[oc];
                for ic in 0..w.in_channels {
                    for ky in 0..w.kernel_h {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= input.height {
                            continue;
                        }
                        for kx in 0..w.kernel_w {
                            let ix = ox + kx;
                            if ix < pad || ix - pad >= input.width {
                                continue;
                            }
                            acc += input.get(ic, iy - pad, ix - pad) * w.weight(oc, ic, ky, kx);
                        }
                    }
                }
                out[(oc * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    FeatureMap::new(w.out_channels, out_h, out_w, out)
}

/// Channel-concatenate two same-shape feature maps, image first.
pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::invalid("concat: spatial shape mismatch"));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap::new(a.channels + b.channels, a.height, a.width, data)
}

// Largest sigmoid output strictly below 1 and its mirror above 0: a plain
// sigmoid saturates to exactly 0.0 or 1.0 in floating point for |z| > ~37,
// which would break the open-interval attention invariant.
const ALPHA_MIN: f64 = f64::EPSILON / 2.0;
const ALPHA_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

fn sigmoid_open(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(ALPHA_MIN, ALPHA_MAX)
}

/// Attention forward pass: sigmoid(conv3x3(relu(conv1x1([f_img; f_evt])))).
///
/// `w1` is a 1x1 convolution taking the concatenated `2C` channels down to
/// `C`; `w2` is a 3x3 convolution with unit zero padding, so the output has
/// the same shape as the inputs. The result is strictly inside `(0, 1)`.
pub fn acmf_attention(
    f_img: &FeatureMap,
    f_evt: &FeatureMap,
    w1: &ConvWeights,
    w2: &ConvWeights,
) -> Result<AttentionMap> {
    if f_img.shape() != f_evt.shape() {
        return Err(Error::invalid("acmf_attention: feature shape mismatch"));
    }
    let c = f_img.channels;
    if w1.kernel_h != 1 || w1.kernel_w != 1 || w1.in_channels != 2 * c || w1.out_channels != c {
        return Err(Error::invalid(format!(
            "acmf_attention: w1 must be 1x1 ({} -> {}), got {}x{} ({} -> {})",
            2 * c,
            c,
            w1.kernel_h,
            w1.kernel_w,
            w1.in_channels,
            w1.out_channels
        )));
    }
    if w2.kernel_h != 3 || w2.kernel_w != 3 || w2.in_channels != c || w2.out_channels != c {
        return Err(Error::invalid(format!(
            "acmf_attention: w2 must be 3x3 ({c} -> {c}), got {}x{} ({} -> {})",
            w2.kernel_h, w2.kernel_w, w2.in_channels, w2.out_channels
        )));
    }
    let stacked = concat_channels(f_img, f_evt)?;
    let mut hidden = conv2d(&stacked, w1, 0)?;
    for v in &mut hidden.data {
        *v = v.max(0.0);
    }
    let mut logits = conv2d(&hidden, w2, 1)?;
    for v in &mut logits.data {
        *v = sigmoid_open(*v);
    }
    AttentionMap::new(logits)
}

/// Default weight for [`alpha_regularizer`]: small enough not to constrain
/// attention in informative regions, nonzero so uninformative locations have
/// a well-defined fixed point at 0.5.
pub const DEFAULT_REGULARIZER_LAMBDA: f64 = 1e-3;

/// L2 penalty pulling attention toward the uninformative fixed point:
/// `lambda * sum((alpha - 0.5)^2)`.
pub fn alpha_regularizer(alpha: &AttentionMap, lambda: f64) -> Result<f64> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::invalid("alpha_regularizer: lambda must be >= 0"));
    }
    Ok(lambda
        * alpha
            .as_map()
            .data
            .iter()
            .map(|&a| (a - 0.5) * (a - 0.5))
            .sum::<f64>())
}

/// Gradient of [`alpha_regularizer`] with respect to each attention entry:
/// `2 * lambda * (alpha - 0.5)`.
pub fn alpha_regularizer_grad(alpha: &AttentionMap, lambda: f64) -> Result<Vec<f64>> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::invalid("alpha_regularizer: lambda must be >= 0"));
    }
    Ok(alpha
        .as_map()
        .data
        .iter()
        .map(|&a| 2.0 * lambda * (a - 0.5))
        .collect())
}

/// Adapt pretrained 3-input-channel convolution weights to `target_in`
/// input channels by replicating the mean of the three slices. Spatial
/// dimensions, output channels, and bias are preserved.
pub fn channel_avg_init(w_rgb: &ConvWeights, target_in: usize) -> Result<ConvWeights> {
    if w_rgb.in_channels != 3 {
        return Err(Error::invalid(format!(
            "channel_avg_init: expected 3 input channels, got {}",
            w_rgb.in_channels
        )));
    }
    if target_in == 0 {
        return Err(Error::invalid("channel_avg_init: target_in must be positive"));
    }
    let k = w_rgb.kernel_h * w_rgb.kernel_w;
    let mut weights = Vec::with_capacity(w_rgb.out_channels * target_in * k);
    for oc in 0..w_rgb.out_channels {
        let mut mean_slice = vec![0.0; k];
        for ic in 0..3 {
            for (i, m) in mean_slice.iter_mut().enumerate() {
                *m += w_rgb.weights[(oc * 3 + ic) * k + i];
            }
        }
        for m in &mut mean_slice {
            *m /= 3.0;
        }
        for _ in 0..target_in {
            weights.extend_from_slice(&mean_slice);
        }
    }
    ConvWeights::new(
        w_rgb.out_channels,
        target_in,
        w_rgb.kernel_h,
        w_rgb.kernel_w,
        weights,
        w_rgb.bias.clone(),
    )
}

/// Estimate the optimal fusion weights from paired noisy samples.
///
/// Each modality's per-location unbiased sample variance (its own sample
/// mean as the latent proxy, `n*C - 1` denominator with channels pooled as
/// replicates) is plugged into the optimal-weight formula. Consistent: the
/// estimate converges to the true weights as the sample count grows.
pub fn estimate_alpha_from_samples(
    samples_img: &[FeatureMap],
    samples_evt: &[FeatureMap],
) -> Result<Vec<f64>> {
    if samples_img.len() < 2 || samples_evt.len() < 2 {
        return Err(Error::invalid("estimate_alpha_from_samples: need at least 2 samples per modality"));
    }
    let shape = samples_img[0].shape();
    for s in samples_img.iter().chain(samples_evt) {
        if s.shape() != shape {
            return Err(Error::invalid("estimate_alpha_from_samples: sample shape mismatch"));
        }
    }
    let var_img = per_location_variance(samples_img);
    let var_evt = per_location_variance(samples_evt);
    Ok(var_img
        .iter()
        .zip(&var_evt)
        .map(|(&vi, &ve)| alpha_star(vi, ve))
        .collect())
}

fn per_location_variance(samples: &[FeatureMap]) -> Vec<f64> {
    let (channels, height, width) = samples[0].shape();
    let plane = height * width;
    let n = (samples.len() * channels) as f64;
    let mut mean = vec![0.0; plane];
    for s in samples {
        for c in 0..channels {
            for (i, m) in mean.iter_mut().enumerate() {
                *m += s.data[c * plane + i];
            }
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; plane];
    for s in samples {
        for c in 0..channels {
            for (i, v) in var.iter_mut().enumerate() {
                let d = s.data[c * plane + i] - mean[i];
                *v += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= n - 1.0;
    }
    var
}

/// One row of the Monte-Carlo weight sweep.
#[derive(Debug, Clone, Serialize)]
pub struct AlphaGridPoint {
    pub alpha: f64,
    pub analytic_variance: f64,
    pub empirical_variance: f64,
}

/// Result of the seeded fusion simulation, serialized by `evfuse fuse-sim`.
#[derive(Debug, Clone, Serialize)]
pub struct FusionSimReport {
    pub sigma2_img: f64,
    pub sigma2_evt: f64,
    pub samples: usize,
    pub seed: u64,
    pub alpha_star: f64,
    pub analytic_variance_at_star: f64,
    pub empirical_variance_at_star: f64,
    /// Weight sweep over 21 grid points including `alpha_star`.
    pub grid: Vec<AlphaGridPoint>,
    /// Grid alpha with the smallest empirical variance.
    pub empirical_argmin_alpha: f64,
}

/// Draw paired noisy observations of a shared latent and measure the fused
/// estimator's error variance across a weight grid. The grid is 20 evenly
/// spaced weights plus `alpha_star`, all evaluated on the same draws so
/// comparisons between weights are tightly coupled.
pub fn simulate_fusion(
    sigma2_img: f64,
    sigma2_evt: f64,
    samples: usize,
    seed: u64,
) -> Result<FusionSimReport> {
    if !sigma2_img.is_finite()
        || !sigma2_evt.is_finite()
        || sigma2_img < 0.0
        || sigma2_evt < 0.0
        || sigma2_img + sigma2_evt <= 0.0
    {
        return Err(Error::invalid(
            "simulate_fusion: variances must be non-negative and not both zero",
        ));
    }
    if samples < 2 {
        return Err(Error::invalid("simulate_fusion: need at least 2 samples"));
    }
    let a_star = alpha_star(sigma2_img, sigma2_evt);
    let mut alphas: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
    alphas.push(a_star);
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();

    let draws = noise_draws(sigma2_img, sigma2_evt, samples, seed);

    let grid: Vec<AlphaGridPoint> = alphas
        .iter()
        .map(|&alpha| {
            let errors = draws.iter().map(|&(ei, ee)| ee + alpha * (ei - ee));
            AlphaGridPoint {
                alpha,
                analytic_variance: fusion_variance_at(alpha, sigma2_img, sigma2_evt),
                empirical_variance: sample_variance(errors, samples),
            }
        })
        .collect();

    let at_star = grid
        .iter()
        .find(|p| p.alpha == a_star)
        .expect("alpha_star is on the grid");
    let empirical_variance_at_star = at_star.empirical_variance;
    let argmin = grid
        .iter()
        .min_by(|a, b| a.empirical_variance.total_cmp(&b.empirical_variance))
        .expect("grid is non-empty");

    Ok(FusionSimReport {
        sigma2_img,
        sigma2_evt,
        samples,
        seed,
        alpha_star: a_star,
        // The closed harmonic form, not the grid polynomial: at alpha_star
        // the two agree analytically and this one is the sharper constant.
        analytic_variance_at_star: sigma2_img * sigma2_evt / (sigma2_img + sigma2_evt),
        empirical_variance_at_star,
        empirical_argmin_alpha: argmin.alpha,
        grid,
    })
}

/// Empirical error variance of the fused estimator at each requested weight.
/// All weights share one set of seeded draws, so comparisons between weights
/// see the same noise realizations.
pub fn empirical_fusion_variances(
    sigma2_img: f64,
    sigma2_evt: f64,
    alphas: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if !sigma2_img.is_finite()
        || !sigma2_evt.is_finite()
        || sigma2_img < 0.0
        || sigma2_evt < 0.0
        || sigma2_img + sigma2_evt <= 0.0
    {
        return Err(Error::invalid(
            "empirical_fusion_variances: variances must be non-negative and not both zero",
        ));
    }
    if samples < 2 {
        return Err(Error::invalid("empirical_fusion_variances: need at least 2 samples"));
    }
    let draws = noise_draws(sigma2_img, sigma2_evt, samples, seed);
    Ok(alphas
        .iter()
        .map(|&alpha| {
            let errors = draws.iter().map(|&(ei, ee)| ee + alpha * (ei - ee));
            sample_variance(errors, samples)
        })
        .collect())
}

// The latent is 0 WLOG: the estimator is unbiased, so only the noise terms
// enter the error variance.
fn noise_draws(sigma2_img: f64, sigma2_evt: f64, samples: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_img = Normal::new(0.0, sigma2_img.sqrt()).expect("validated");
    let noise_evt = Normal::new(0.0, sigma2_evt.sqrt()).expect("validated");
    (0..samples)
        .map(|_| (noise_img.sample(&mut rng), noise_evt.sample(&mut rng)))
        .collect()
}

fn sample_variance(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for v in values {
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n as f64;
    (sumsq - n as f64 * mean * mean) / (n as f64 - 1.0)
}

const EVWT_MAGIC: &[u8; 4] = b"EVWT";
const EVWT_VERSION: u32 = 1;

/// Encode convolution weights in the `EVWT` binary format: magic, version,
/// four little-endian u32 dims (out, in, kh, kw), f32 weights, f32 biases.
pub fn write_conv_weights(w: &ConvWeights) -> Vec<u8> {
    let mut out = Writer::new(EVWT_MAGIC, EVWT_VERSION);
    out.u32(w.out_channels as u32);
    out.u32(w.in_channels as u32);
    out.u32(w.kernel_h as u32);
    out.u32(w.kernel_w as u32);
    out.f32_block(&w.weights);
    out.f32_block(&w.bias);
    out.into_bytes()
}

/// Decode an `EVWT` file; all values must be finite and the payload length
/// must match the declared shape exactly.
pub fn read_conv_weights(bytes: &[u8]) -> Result<ConvWeights> {
    let mut r = Reader::new(bytes);
    r.magic(EVWT_MAGIC)?;
    r.version(EVWT_VERSION)?;
    let out_channels = r.u32()? as usize;
    let in_channels = r.u32()? as usize;
    let kernel_h = r.u32()? as usize;
    let kernel_w = r.u32()? as usize;
    if out_channels == 0 || in_channels == 0 || kernel_h == 0 || kernel_w == 0 {
        return Err(Error::parse_byte(8, "zero dimension"));
    }
    let count = out_channels
        .checked_mul(in_channels)
        .and_then(|v| v.checked_mul(kernel_h))
        .and_then(|v| v.checked_mul(kernel_w))
        .ok_or_else(|| Error::parse_byte(8, "shape overflows"))?;
    let weights = r.f32_block(count, "weights")?;
    let bias = r.f32_block(out_channels, "bias")?;
    r.finish()?;
    if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
        return Err(Error::parse_byte(24, "weights must be finite"));
    }
    ConvWeights::new(out_channels, in_channels, kernel_h, kernel_w, weights, bias)
        .map_err(|e| Error::parse_byte(8, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn map(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> FeatureMap {
        FeatureMap::new(c, h, w, (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn optimal_alpha_direct_substitution() {
        let v = VarianceField::scalar(4.0, 1.0).unwrap();
        assert_eq!(optimal_alpha(&v), vec![0.2]);
    }

    #[test]
    fn optimal_alpha_symmetry_at_equal_variance() {
        let v = VarianceField::scalar(3.7, 3.7).unwrap();
        assert_eq!(optimal_alpha(&v), vec![0.5]);
    }

    #[test]
    fn optimal_alpha_swap_sums_to_one_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let a: f64 = rng.gen_range(1e-6..1e6);
            let b: f64 = rng.gen_range(1e-6..1e6);
            let fwd = optimal_alpha(&VarianceField::scalar(a, b).unwrap())[0];
            let rev = optimal_alpha(&VarianceField::scalar(b, a).unwrap())[0];
            assert_eq!(fwd + rev, 1.0, "a={a} b={b}");
        }
    }

    #[test]
    fn alpha_limits_under_extreme_variance_ratios() {
        let v = VarianceField::scalar(100.0, 0.01).unwrap();
        let a = optimal_alpha(&v)[0];
        assert!((a - 9.999e-5).abs() < 1e-8);
        let v = VarianceField::scalar(0.01, 100.0).unwrap();
        assert!(optimal_alpha(&v)[0] > 1.0 - 1e-3);
    }

    #[test]
    fn fused_variance_values() {
        let v = VarianceField::scalar(4.0, 1.0).unwrap();
        assert_eq!(fused_variance(&v), vec![0.8]);
        let v = VarianceField::scalar(3.0, 3.0).unwrap();
        assert_eq!(fused_variance(&v), vec![1.5]);
    }

    #[test]
    fn fused_variance_below_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a: f64 = rng.gen_range(1e-3..1e3);
            let b: f64 = rng.gen_range(1e-3..1e3);
            let f = fused_variance(&VarianceField::scalar(a, b).unwrap())[0];
            assert!(f < a.min(b) + 1e-12);
        }
        // Equality when one variance is zero.
        let f = fused_variance(&VarianceField::scalar(0.0, 2.0).unwrap())[0];
        assert_eq!(f, 0.0);
    }

    #[test]
    fn weighted_fuse_saturated_and_average() {
        let f_img = map(2, 3, 4, |i| i as f64 * 0.3 - 2.0);
        let f_evt = map(2, 3, 4, |i| (i as f64).sin());
        let near_one = AttentionMap::uniform(2, 3, 4, 1.0 - 1e-9).unwrap();
        let fused = weighted_fuse(&f_img, &f_evt, &near_one).unwrap();
        for (a, b) in fused.data().iter().zip(f_img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let half = AttentionMap::uniform(2, 3, 4, 0.5).unwrap();
        let fused = weighted_fuse(&f_img, &f_evt, &half).unwrap();
        for ((f, a), b) in fused.data().iter().zip(f_img.data()).zip(f_evt.data()) {
            assert!((f - (a + b) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_fuse_indifference_identity_exact() {
        let f = map(3, 4, 5, |i| (i as f64 * 1.7).cos() * 11.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let alpha = AttentionMap::new(
            FeatureMap::new(3, 4, 5, (0..60).map(|_| rng.gen_range(1e-12..1.0)).collect()).unwrap(),
        )
        .unwrap();
        let fused = weighted_fuse(&f, &f, &alpha).unwrap();
        assert_eq!(fused, f);
    }

    #[test]
    fn weighted_fuse_rejects_shape_mismatch() {
        let a = map(1, 2, 2, |_| 0.0);
        let b = map(1, 2, 3, |_| 0.0);
        let alpha = AttentionMap::uniform(1, 2, 2, 0.5).unwrap();
        assert!(weighted_fuse(&a, &b, &alpha).is_err());
    }

    #[test]
    fn attention_zero_weights_is_half() {
        let f_img = map(2, 3, 3, |i| i as f64);
        let f_evt = map(2, 3, 3, |i| -(i as f64));
        let w1 = ConvWeights::new(2, 4, 1, 1, vec![0.0; 8], vec![0.0; 2]).unwrap();
        let w2 = ConvWeights::new(2, 2, 3, 3, vec![0.0; 36], vec![0.0; 2]).unwrap();
        let alpha = acmf_attention(&f_img, &f_evt, &w1, &w2).unwrap();
        assert!(alpha.as_map().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn attention_large_bias_saturates_toward_one() {
        let f_img = map(1, 4, 4, |i| i as f64 * 0.1);
        let f_evt = map(1, 4, 4, |i| 1.0 - i as f64 * 0.05);
        let w1 = ConvWeights::new(1, 2, 1, 1, vec![0.0; 2], vec![0.0]).unwrap();
        let w2 = ConvWeights::new(1, 1, 3, 3, vec![0.0; 9], vec![50.0]).unwrap();
        let alpha = acmf_attention(&f_img, &f_evt, &w1, &w2).unwrap();
        for &v in alpha.as_map().data() {
            assert!(v > 1.0 - 1e-6);
            assert!(v < 1.0);
        }
    }

    #[test]
    fn attention_stays_open_for_huge_weights() {
        let f_img = map(1, 2, 2, |_| 1e6);
        let f_evt = map(1, 2, 2, |_| -1e6);
        let w1 = ConvWeights::new(1, 2, 1, 1, vec![1e3, -1e3], vec![0.0]).unwrap();
        let w2 = ConvWeights::new(1, 1, 3, 3, vec![1e3; 9], vec![-1e5]).unwrap();
        let alpha = acmf_attention(&f_img, &f_evt, &w1, &w2).unwrap();
        for &v in alpha.as_map().data() {
            assert!(v > 0.0 && v < 1.0, "alpha {v} escaped (0, 1)");
        }
    }

    #[test]
    fn attention_rejects_wrong_kernel_shapes() {
        let f = map(2, 3, 3, |_| 0.0);
        let w1_bad = ConvWeights::new(2, 4, 3, 3, vec![0.0; 72], vec![0.0; 2]).unwrap();
        let w2 = ConvWeights::new(2, 2, 3, 3, vec![0.0; 36], vec![0.0; 2]).unwrap();
        assert!(acmf_attention(&f, &f, &w1_bad, &w2).is_err());
        let w1 = ConvWeights::new(2, 4, 1, 1, vec![0.0; 8], vec![0.0; 2]).unwrap();
        let w2_bad = ConvWeights::new(2, 2, 1, 1, vec![0.0; 4], vec![0.0; 2]).unwrap();
        assert!(acmf_attention(&f, &f, &w1, &w2_bad).is_err());
    }

    #[test]
    fn regularizer_fixed_point_and_direct_sum() {
        let alpha = AttentionMap::uniform(1, 2, 2, 0.5).unwrap();
        assert_eq!(alpha_regularizer(&alpha, 1.0).unwrap(), 0.0);
        assert_eq!(alpha_regularizer(&alpha, DEFAULT_REGULARIZER_LAMBDA).unwrap(), 0.0);

        let eps = 1e-3;
        let n = 4.0;
        let alpha = AttentionMap::uniform(1, 2, 2, 1.0 - eps).unwrap();
        let expected = n * (0.5 - eps) * (0.5 - eps);
        assert!((alpha_regularizer(&alpha, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn regularizer_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(0.01..0.99)).collect();
        let alpha = AttentionMap::new(FeatureMap::new(1, 3, 4, data.clone()).unwrap()).unwrap();
        let lambda = 0.7;
        let grad = alpha_regularizer_grad(&alpha, lambda).unwrap();
        let h = 1e-5;
        for i in 0..data.len() {
            let mut plus = data.clone();
            plus[i] += h;
            let mut minus = data.clone();
            minus[i] -= h;
            let ap = AttentionMap::new(FeatureMap::new(1, 3, 4, plus).unwrap()).unwrap();
            let am = AttentionMap::new(FeatureMap::new(1, 3, 4, minus).unwrap()).unwrap();
            let fd = (alpha_regularizer(&ap, lambda).unwrap()
                - alpha_regularizer(&am, lambda).unwrap())
                / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(1e-12);
            assert!(rel < 1e-6, "entry {i}: grad {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn channel_avg_mean_replication() {
        // RGB slices (3, 6, 9) at the single kernel position: every event
        // slice becomes their mean, 6.
        let w = ConvWeights::new(1, 3, 1, 1, vec![3.0, 6.0, 9.0], vec![0.25]).unwrap();
        let out = channel_avg_init(&w, 8).unwrap();
        assert_eq!(out.in_channels(), 8);
        assert!(out.weights().iter().all(|&v| v == 6.0));
        assert_eq!(out.bias(), &[0.25]);
    }

    #[test]
    fn channel_avg_identical_slices_unchanged() {
        let slice = [0.5, -1.0, 2.0, 0.0];
        let mut weights = Vec::new();
        for _ in 0..3 {
            weights.extend_from_slice(&slice);
        }
        let w = ConvWeights::new(1, 3, 2, 2, weights, vec![0.0]).unwrap();
        let out = channel_avg_init(&w, 8).unwrap();
        for ic in 0..8 {
            assert_eq!(&out.weights()[ic * 4..ic * 4 + 4], &slice);
        }
    }

    #[test]
    fn channel_avg_rejects_non_rgb() {
        let w = ConvWeights::new(1, 4, 1, 1, vec![0.0; 4], vec![0.0]).unwrap();
        assert!(channel_avg_init(&w, 8).is_err());
    }

    #[test]
    fn estimate_alpha_noiseless_event_modality() {
        let base = map(1, 2, 2, |i| i as f64);
        let samples_evt = vec![base.clone(), base.clone(), base.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples_img: Vec<FeatureMap> = (0..3)
            .map(|_| {
                FeatureMap::new(1, 2, 2, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let alpha = estimate_alpha_from_samples(&samples_img, &samples_evt).unwrap();
        assert!(alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn estimate_alpha_swap_is_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gen = |rng: &mut ChaCha8Rng, spread: f64| -> Vec<FeatureMap> {
            (0..6)
                .map(|_| {
                    FeatureMap::new(
                        1,
                        2,
                        2,
                        (0..4).map(|_| rng.gen_range(-spread..spread)).collect(),
                    )
                    .unwrap()
                })
                .collect()
        };
        let img = gen(&mut rng, 2.0);
        let evt = gen(&mut rng, 1.0);
        let fwd = estimate_alpha_from_samples(&img, &evt).unwrap();
        let rev = estimate_alpha_from_samples(&evt, &img).unwrap();
        for (a, b) in fwd.iter().zip(&rev) {
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn estimate_alpha_requires_two_samples() {
        let s = vec![map(1, 1, 1, |_| 0.0)];
        assert!(estimate_alpha_from_samples(&s, &s).is_err());
    }

    #[test]
    fn simulate_fusion_report_shape() {
        let report = simulate_fusion(4.0, 1.0, 1000, 7).unwrap();
        assert_eq!(report.alpha_star, 0.2);
        assert_eq!(report.analytic_variance_at_star, 0.8);
        assert_eq!(report.grid.len(), 21);
        assert!(report.grid.iter().any(|p| p.alpha == 0.2));
        assert!(report.empirical_variance_at_star > 0.0);
    }

    #[test]
    fn evwt_roundtrip_and_rejects() {
        let w = ConvWeights::new(2, 3, 1, 1, (0..6).map(|v| v as f64 * 0.5).collect(), vec![1.0, -1.0]).unwrap();
        let bytes = write_conv_weights(&w);
        let back = read_conv_weights(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(write_conv_weights(&back), bytes);

        assert!(read_conv_weights(b"EVWT\x01\x00\x00\x00").is_err());
        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(read_conv_weights(&truncated).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(read_conv_weights(&trailing).is_err());
    }

    #[test]
    fn conv2d_known_values() {
        // 1x1 input channel, 3x3 kernel of ones, pad 1: each output is the
        // sum of the 3x3 neighborhood.
        let input = map(1, 3, 3, |i| i as f64);
        let w = ConvWeights::new(1, 1, 3, 3, vec![1.0; 9], vec![0.0]).unwrap();
        let out = conv2d(&input, &w, 1).unwrap();
        assert_eq!(out.shape(), (1, 3, 3));
        // Center = sum of 0..9.
        assert_eq!(out.get(0, 1, 1), 36.0);
        // Top-left corner sees only the 2x2 block {0, 1, 3, 4}.
        assert_eq!(out.get(0, 0, 0), 8.0);
    }
}
