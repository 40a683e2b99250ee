//! Multi-target adversarial protection with a randomized differentiable
//! distortion layer.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cryptor::{CryptorPair, Password};
use crate::encoders::{sample_row_indices, EncoderId, EncoderModel};
use crate::error::{Error, Result};
use crate::evalkit::psnr;
use crate::image::Image;
use crate::numgrad::{cos_sim_clamped, Graph, Tensor, Var};

/// Standard deviation of the additive pixel noise.
pub const NOISE_STD: f64 = 0.01;
/// Standard deviation of the 3×3 Gaussian blur.
pub const BLUR_SIGMA: f64 = 0.4;
/// JPEG quality used for evaluation.
pub const JPEG_QUALITY: u8 = 90;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    SignGradient,
    RawGradient,
}

impl FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign" | "sign_gradient" => Ok(Self::SignGradient),
            "raw" | "raw_gradient" => Ok(Self::RawGradient),
            other => Err(Error::Config(format!("unknown update rule `{other}` (expected sign or raw)"))),
        }
    }
}

/// Members of the differentiable distortion layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    Identity,
    GaussianNoise,
    GaussianBlur,
}

/// Post-processing applied when evaluating robustness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDistortion {
    Noise,
    Blur,
    Jpeg,
}

impl EvalDistortion {
    pub const ALL: [EvalDistortion; 3] = [EvalDistortion::Noise, EvalDistortion::Blur, EvalDistortion::Jpeg];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalDistortion::Noise => "noise",
            EvalDistortion::Blur => "blur",
            EvalDistortion::Jpeg => "jpeg",
        }
    }
}

impl fmt::Display for EvalDistortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub ths: f64,
    pub max_iters: usize,
    pub update_rule: UpdateRule,
    pub distortions: Vec<Distortion>,
    /// Rows sampled per iteration from token-matrix encodings.
    pub hidden_rows: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::face()
    }
}

impl AttackConfig {
    /// Face-style defaults: budget 11/255, threshold 0.75.
    pub fn face() -> Self {
        Self {
            epsilon: 11.0 / 255.0,
            step_size: 1.0 / 255.0,
            ths: 0.75,
            max_iters: 2000,
            update_rule: UpdateRule::SignGradient,
            distortions: vec![Distortion::Identity, Distortion::GaussianNoise, Distortion::GaussianBlur],
            hidden_rows: 8,
            seed: 0,
        }
    }

    /// Artwork-style defaults: budget 21/255, threshold 0.65.
    pub fn artwork() -> Self {
        Self {
            epsilon: 21.0 / 255.0,
            ths: 0.65,
            ..Self::face()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} must lie in [0, 1)", self.epsilon)));
        }
        if !(self.step_size > 0.0 && (self.step_size <= self.epsilon || self.epsilon == 0.0)) {
            return Err(Error::Config(format!(
                "step size {} must satisfy 0 < step <= epsilon {}",
                self.step_size, self.epsilon
            )));
        }
        if !(self.ths > 0.0 && self.ths < 1.0) {
            return Err(Error::Config(format!("ths {} must lie in (0, 1)", self.ths)));
        }
        if self.distortions.is_empty() {
            return Err(Error::Config("distortion set is empty".into()));
        }
        if self.hidden_rows == 0 {
            return Err(Error::Config("hidden_rows must be positive".into()));
        }
        Ok(())
    }
}

/// Encrypted embedding an encoder should be steered towards.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub encoder_id: EncoderId,
    /// `[D]` for vector encoders, `[R, D]` for the token-matrix encoder.
    pub embedding: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSimilarity {
    pub encoder: EncoderId,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub iterations: usize,
    /// Clamped cosine between each encoder's output on the protected image
    /// and its target.
    pub target_similarity: Vec<EncoderSimilarity>,
    pub success: bool,
    pub psnr: f64,
    pub linf: f64,
}

impl AttackReport {
    pub fn min_similarity(&self) -> f64 {
        self.target_similarity.iter().map(|s| s.value).fold(f64::INFINITY, f64::min)
    }
}

/// `E_tar_i = Enc_i(encode_i(image), password_i)` for every encoder.
pub fn make_targets(
    image: &Image,
    encoders: &[&EncoderModel],
    pairs: &[&CryptorPair],
    passwords: &[&Password],
) -> Result<Vec<Target>> {
    if encoders.is_empty() {
        return Err(Error::Config("at least one encoder is required".into()));
    }
    if pairs.len() != encoders.len() || passwords.len() != encoders.len() {
        return Err(Error::Config(format!(
            "{} encoders need as many cryptor pairs ({}) and passwords ({})",
            encoders.len(),
            pairs.len(),
            passwords.len()
        )));
    }
    encoders
        .iter()
        .zip(pairs)
        .zip(passwords)
        .map(|((enc, pair), pw)| {
            if pair.encoder_id != enc.id() {
                return Err(Error::Config(format!("cryptor pair for {} given for encoder {}", pair.encoder_id, enc.id())));
            }
            if pair.embed_dim() != enc.embed_dim() {
                return Err(Error::Config(format!(
                    "cryptor pair dim {} does not match encoder {} dim {}",
                    pair.embed_dim(),
                    enc.id(),
                    enc.embed_dim()
                )));
            }
            let encoding = enc.encode(image)?;
            Ok(Target {
                encoder_id: enc.id(),
                embedding: pair.encrypt_encoding(&encoding, pw)?,
            })
        })
        .collect()
}

/// Normalized 3×3 Gaussian kernel.
pub fn blur_kernel() -> [[f64; 3]; 3] {
    let w = |d: f64| (-d * d / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
    let mut k = [[0.0; 3]; 3];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = w(i as f64 - 1.0) * w(j as f64 - 1.0);
            total += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    k
}

fn blur_conv_kernel() -> Tensor {
    let k = blur_kernel();
    let mut data = vec![0.0; 3 * 3 * 3 * 3];
    for (i, row) in k.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            for c in 0..3 {
                data[((i * 3 + j) * 3 + c) * 3 + c] = *v;
            }
        }
    }
    Tensor::new(vec![3, 3, 3, 3], data).expect("consistent shape")
}

fn noise_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, NOISE_STD).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("consistent shape")
}

fn apply_kind(g: &mut Graph, x: Var, kind: Distortion, rng: &mut impl Rng) -> Result<Var> {
    match kind {
        Distortion::Identity => Ok(x),
        Distortion::GaussianNoise => {
            let noise = g.constant(noise_tensor(g.shape(x), rng));
            let y = g.add(x, noise)?;
            g.clamp(y, 0.0, 1.0)
        }
        Distortion::GaussianBlur => {
            let padded = g.pad_reflect(x, 1)?;
            let k = g.constant(blur_conv_kernel());
            g.conv2d(padded, k, 1, 0)
        }
    }
}

/// Picks one member of `set` uniformly and applies it to the `[H, W, 3]`
/// image `x` on the graph. Noise is a constant offset for the backward pass.
pub fn diff_distortion<R: Rng + ?Sized>(g: &mut Graph, x: Var, rng: &mut R, set: &[Distortion]) -> Result<Var> {
    if set.is_empty() {
        return Err(Error::arg("distortion set is empty"));
    }
    let kind = set[rng.random_range(0..set.len())];
    let mut rng = ChaCha8Rng::seed_from_u64(rng.random());
    apply_kind(g, x, kind, &mut rng)
}

/// Applies one specific distortion outside any gradient computation.
pub fn distort(image: &Image, kind: Distortion, seed: u64) -> Result<Image> {
    let mut g = Graph::new();
    let x = g.constant(image.tensor().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = apply_kind(&mut g, x, kind, &mut rng)?;
    Image::from_clamped(g.value(y).clone())
}

/// Round trip through a baseline JPEG at quality 90 with 4:2:0 chroma
/// subsampling.
pub fn jpeg_round_trip(image: &Image, quality: u8) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    let (w16, h16) = (
        u16::try_from(w).map_err(|_| Error::Codec(format!("width {w} too large for JPEG")))?,
        u16::try_from(h).map_err(|_| Error::Codec(format!("height {h} too large for JPEG")))?,
    );
    let mut buf = Vec::new();
    let mut encoder = jpeg_encoder::Encoder::new(&mut buf, quality);
    encoder.set_sampling_factor(jpeg_encoder::SamplingFactor::F_2_2);
    encoder
        .encode(&image.to_rgb8(), w16, h16, jpeg_encoder::ColorType::Rgb)
        .map_err(|e| Error::Codec(format!("JPEG encode: {e}")))?;
    let decoded = ::image::load_from_memory_with_format(&buf, ::image::ImageFormat::Jpeg)
        .map_err(|e| Error::Codec(format!("JPEG decode: {e}")))?
        .to_rgb8();
    Image::from_rgb8(w, h, decoded.as_raw())
}

/// Evaluation-only post-processing.
pub fn eval_distortions(image: &Image, kind: EvalDistortion, seed: u64) -> Result<Image> {
    match kind {
        EvalDistortion::Noise => distort(image, Distortion::GaussianNoise, seed),
        EvalDistortion::Blur => distort(image, Distortion::GaussianBlur, seed),
        EvalDistortion::Jpeg => jpeg_round_trip(image, JPEG_QUALITY),
    }
}

/// Clamped cosine between an encoder output and its target; mean row
/// similarity for token matrices.
pub fn target_similarity(output: &Tensor, target: &Tensor) -> Result<f64> {
    if output.shape() != target.shape() {
        return Err(Error::shape(
            "target_similarity",
            format!("output {:?} vs target {:?}", output.shape(), target.shape()),
        ));
    }
    if output.rank() == 1 {
        return cos_sim_clamped(output.data(), target.data());
    }
    let n = output.rows();
    let mut total = 0.0;
    for i in 0..n {
        total += cos_sim_clamped(output.row(i), target.row(i))?;
    }
    Ok(total / n as f64)
}

fn check_inputs(image: &Image, encoders: &[&EncoderModel], targets: &[Target]) -> Result<()> {
    if encoders.is_empty() || encoders.len() != targets.len() {
        return Err(Error::Config(format!(
            "{} encoders given for {} targets",
            encoders.len(),
            targets.len()
        )));
    }
    for (enc, t) in encoders.iter().zip(targets) {
        if enc.id() != t.encoder_id || t.embedding.shape() != enc.output_shape().as_slice() {
            return Err(Error::Config(format!(
                "target for {} {:?} does not fit encoder {} {:?}",
                t.encoder_id,
                t.embedding.shape(),
                enc.id(),
                enc.output_shape()
            )));
        }
        let r = enc.dims().resolution;
        if image.tensor().shape() != [r, r, 3] {
            return Err(Error::shape("protect_image", format!("image {:?}, encoder wants {r}x{r}", image.tensor().shape())));
        }
    }
    Ok(())
}

/// Per-encoder target similarity of an undistorted image.
pub fn similarities(image: &Image, encoders: &[&EncoderModel], targets: &[Target]) -> Result<Vec<EncoderSimilarity>> {
    encoders
        .iter()
        .zip(targets)
        .map(|(enc, t)| {
            let out = enc.encode(image)?;
            Ok(EncoderSimilarity {
                encoder: enc.id(),
                value: target_similarity(out.as_tensor(), &t.embedding)?,
            })
        })
        .collect()
}

fn min_value(s: &[EncoderSimilarity]) -> f64 {
    s.iter().map(|x| x.value).fold(f64::INFINITY, f64::min)
}

/// Multi-target objective `Σ_i (1 − cos(E_i, T_i))` on a randomly
/// distorted copy of `image`, with `hidden_rows` rows resampled for token
/// matrices.
///
/// The cosine is unclamped: with a clamp, a target that starts on the far
/// side of the original embedding gives a zero gradient and the attack could
/// never begin. Wherever the similarity is positive the two objectives and
/// their gradients coincide.
pub fn mt_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    image: Var,
    encoders: &[&EncoderModel],
    targets: &[Target],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Var> {
    if encoders.is_empty() || encoders.len() != targets.len() {
        return Err(Error::Config(format!("{} encoders given for {} targets", encoders.len(), targets.len())));
    }
    let x = diff_distortion(g, image, rng, &cfg.distortions)?;
    let mut total: Option<Var> = None;
    for (enc, t) in encoders.iter().zip(targets) {
        let out = enc.forward(g, x)?;
        let term = if enc.id().is_matrix() {
            let rows = sample_row_indices(t.embedding.rows(), cfg.hidden_rows.min(t.embedding.rows()), rng)?;
            let out = g.select_rows(out, &rows)?;
            let tar = g.constant(t.embedding.clone());
            let tar = g.select_rows(tar, &rows)?;
            let c = g.cos_rows(out, tar, false)?;
            let s = g.sum(c);
            g.scale(s, -1.0 / rows.len() as f64)
        } else {
            let n = t.embedding.len();
            let out = g.reshape(out, &[1, n])?;
            let tar = g.constant(t.embedding.clone().reshape(&[1, n])?);
            let c = g.cos_rows(out, tar, false)?;
            let s = g.sum(c);
            g.scale(s, -1.0)
        };
        let term = g.add_scalar(term, 1.0);
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one encoder"))
}

/// Gradient of [`mt_loss`] with respect to the protected image itself, so
/// that the pixel clamp applied before it does not mask saturated pixels.
fn objective_gradient(
    pixels: &Tensor,
    encoders: &[&EncoderModel],
    targets: &[Target],
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let leaf = g.param(pixels.clone());
    let total = mt_loss(&mut g, leaf, encoders, targets, cfg, rng)?;
    Ok(g.backward(total)?.get_or_zeros(leaf, pixels.shape()))
}

fn protected(original: &Tensor, delta: &[f64]) -> Result<Image> {
    let data = original.data().iter().zip(delta).map(|(o, d)| (o + d).clamp(0.0, 1.0)).collect();
    Image::new(Tensor::new(original.shape().to_vec(), data)?)
}

/// Runs the sign-gradient (or raw-gradient) attack until every encoder's
/// similarity to its target on the undistorted protected image reaches
/// `ths`, or `max_iters` updates have been made. On failure the iterate
/// with the best minimum similarity is returned.
pub fn protect_image(
    image: &Image,
    encoders: &[&EncoderModel],
    targets: &[Target],
    cfg: &AttackConfig,
) -> Result<(Image, AttackReport)> {
    cfg.validate()?;
    check_inputs(image, encoders, targets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(71);
    let original = image.tensor();
    let mut delta = vec![0.0; original.len()];

    let mut current = image.clone();
    let mut sims = similarities(&current, encoders, targets)?;
    let mut best = (min_value(&sims), current.clone(), sims.clone(), 0usize);
    let mut iterations = 0;
    while min_value(&sims) < cfg.ths && iterations < cfg.max_iters {
        let grad = objective_gradient(current.tensor(), encoders, targets, cfg, &mut rng)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                context: format!("attack gradient at iteration {iterations}"),
            });
        }
        for (d, g) in delta.iter_mut().zip(grad.data()) {
            let step = match cfg.update_rule {
                UpdateRule::SignGradient => cfg.step_size * sign(*g),
                UpdateRule::RawGradient => cfg.step_size * g,
            };
            *d = (*d - step).clamp(-cfg.epsilon, cfg.epsilon);
        }
        iterations += 1;
        current = protected(original, &delta)?;
        sims = similarities(&current, encoders, targets)?;
        let m = min_value(&sims);
        if m > best.0 {
            best = (m, current.clone(), sims.clone(), iterations);
        }
    }
    let success = min_value(&sims) >= cfg.ths;
    let (out, final_sims) = if success { (current, sims) } else { (best.1, best.2) };
    let report = AttackReport {
        iterations,
        target_similarity: final_sims,
        success,
        psnr: psnr(image, &out)?,
        linf: image.linf_distance(&out),
    };
    Ok((out, report))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cryptor::{generate_password, DEFAULT_TOKENS};
    use crate::dataset::gen_toy_dataset;

    fn image(seed: u64) -> Image {
        gen_toy_dataset(seed, 1, 64).unwrap().remove(0)
    }

    fn solid(v: f64) -> Image {
        Image::new(Tensor::full(&[64, 64, 3], v)).unwrap()
    }

    #[test]
    fn identity_distortion_is_exact() {
        let im = image(1);
        assert_eq!(distort(&im, Distortion::Identity, 3).unwrap(), im);
    }

    #[test]
    fn blur_kernel_is_normalized_and_fixes_constants() {
        let k = blur_kernel();
        let total: f64 = k.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for row in k {
            let row_sum: f64 = row.iter().sum();
            let center_row: f64 = k[1].iter().sum();
            assert!(row_sum > 0.0 && row_sum <= center_row + 1e-15);
        }
        let flat = solid(0.37);
        let out = distort(&flat, Distortion::GaussianBlur, 0).unwrap();
        for (a, b) in out.tensor().data().iter().zip(flat.tensor().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_matches_direct_convolution() {
        let im = image(2);
        let out = distort(&im, Distortion::GaussianBlur, 0).unwrap();
        let k = blur_kernel();
        let t = im.tensor();
        let reflect = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * n - 2 - i as usize
            } else {
                i as usize
            }
        };
        for &(y, x) in &[(0usize, 0usize), (0, 63), (31, 17), (63, 63), (10, 0)] {
            for c in 0..3 {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let yy = reflect(y as isize + dy as isize - 1, 64);
                        let xx = reflect(x as isize + dx as isize - 1, 64);
                        acc += k[dy][dx] * t.data()[(yy * 64 + xx) * 3 + c];
                    }
                }
                let got = out.tensor().data()[(y * 64 + x) * 3 + c];
                assert!((got - acc).abs() < 1e-12, "({y},{x},{c}): {got} vs {acc}");
            }
        }
    }

    #[test]
    fn noise_has_requested_variance() {
        let flat = solid(0.5);
        let out = distort(&flat, Distortion::GaussianNoise, 11).unwrap();
        let d: Vec<f64> = out.tensor().data().iter().map(|v| v - 0.5).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want = NOISE_STD * NOISE_STD;
        assert!((var - want).abs() <= 0.15 * want, "variance {var}");
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn noise_output_stays_in_range() {
        let out = distort(&solid(0.999), Distortion::GaussianNoise, 4).unwrap();
        assert!(out.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn jpeg_of_solid_color_is_near_lossless() {
        let flat = solid(100.0 / 255.0);
        let out = jpeg_round_trip(&flat, JPEG_QUALITY).unwrap();
        assert!(psnr(&flat, &out).unwrap() >= 40.0);
        let im = image(3);
        let out = eval_distortions(&im, EvalDistortion::Jpeg, 0).unwrap();
        assert!(psnr(&im, &out).unwrap() > 25.0);
    }

    #[test]
    fn diff_distortion_picks_every_member() {
        let set = [Distortion::Identity, Distortion::GaussianNoise, Distortion::GaussianBlur];
        let im = image(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut same, mut changed) = (0, 0);
        for _ in 0..60 {
            let mut g = Graph::new();
            let x = g.constant(im.tensor().clone());
            let y = diff_distortion(&mut g, x, &mut rng, &set).unwrap();
            if g.value(y) == im.tensor() {
                same += 1;
            } else {
                changed += 1;
            }
        }
        assert!(same > 5 && changed > 20, "{same} unchanged, {changed} changed");
        let mut g = Graph::new();
        let x = g.constant(im.tensor().clone());
        assert!(diff_distortion(&mut g, x, &mut rng, &[]).is_err());
    }

    #[test]
    fn update_rule_parses() {
        assert_eq!("sign".parse::<UpdateRule>().unwrap(), UpdateRule::SignGradient);
        assert_eq!("raw".parse::<UpdateRule>().unwrap(), UpdateRule::RawGradient);
        assert!("adam".parse::<UpdateRule>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::face().validate().is_ok());
        assert!(AttackConfig::artwork().validate().is_ok());
        assert!(AttackConfig { ths: 1.0, ..AttackConfig::face() }.validate().is_err());
        assert!(AttackConfig { step_size: 0.1, ..AttackConfig::face() }.validate().is_err());
        assert!(AttackConfig { distortions: vec![], ..AttackConfig::face() }.validate().is_err());
    }

    fn setup() -> (EncoderModel, CryptorPair, Password) {
        let enc = EncoderModel::new(EncoderId::FaceA, 7);
        let pair = CryptorPair::new(EncoderId::FaceA, enc.embed_dim(), DEFAULT_TOKENS, 1).unwrap();
        let pw = generate_password(5, enc.embed_dim()).unwrap();
        (enc, pair, pw)
    }

    #[test]
    fn zero_budget_returns_the_original() {
        let (enc, pair, pw) = setup();
        let im = image(5);
        let targets = make_targets(&im, &[&enc], &[&pair], &[&pw]).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.0,
            max_iters: 5,
            ..AttackConfig::face()
        };
        let (out, report) = protect_image(&im, &[&enc], &targets, &cfg).unwrap();
        assert_eq!(out, im);
        assert_eq!(report.linf, 0.0);
    }

    #[test]
    fn perturbation_stays_within_budget() {
        let (enc, pair, pw) = setup();
        let im = image(6);
        let targets = make_targets(&im, &[&enc], &[&pair], &[&pw]).unwrap();
        for rule in [UpdateRule::SignGradient, UpdateRule::RawGradient] {
            let cfg = AttackConfig {
                max_iters: 15,
                update_rule: rule,
                ..AttackConfig::face()
            };
            let (out, report) = protect_image(&im, &[&enc], &targets, &cfg).unwrap();
            assert!(report.linf <= cfg.epsilon + 1e-9);
            assert!(im.linf_distance(&out) <= cfg.epsilon + 1e-9);
            assert!(report.iterations <= cfg.max_iters);
        }
    }

    #[test]
    fn attack_moves_towards_the_target() {
        let (enc, pair, pw) = setup();
        let im = image(7);
        let targets = make_targets(&im, &[&enc], &[&pair], &[&pw]).unwrap();
        let start = similarities(&im, &[&enc], &targets).unwrap()[0].value;
        let cfg = AttackConfig {
            max_iters: 20,
            ths: 0.99,
            ..AttackConfig::face()
        };
        let (_, report) = protect_image(&im, &[&enc], &targets, &cfg).unwrap();
        assert!(report.min_similarity() > start, "{} -> {}", start, report.min_similarity());
    }

    #[test]
    fn already_satisfied_target_stops_immediately() {
        let enc = EncoderModel::new(EncoderId::FaceA, 7);
        let im = image(8);
        let targets = vec![Target {
            encoder_id: EncoderId::FaceA,
            embedding: enc.encode(&im).unwrap().as_tensor().clone(),
        }];
        let (out, report) = protect_image(&im, &[&enc], &targets, &AttackConfig::face()).unwrap();
        assert_eq!(report.iterations, 0);
        assert!(report.success);
        assert_eq!(out, im);
    }

    #[test]
    fn mismatched_targets_are_rejected() {
        let (enc, pair, pw) = setup();
        let im = image(9);
        let targets = make_targets(&im, &[&enc], &[&pair], &[&pw]).unwrap();
        let other = EncoderModel::new(EncoderId::FaceB, 7);
        assert!(protect_image(&im, &[&other], &targets, &AttackConfig::face()).is_err());
        assert!(protect_image(&im, &[&enc, &other], &targets, &AttackConfig::face()).is_err());
    }

    #[test]
    fn attack_is_deterministic() {
        let (enc, pair, pw) = setup();
        let im = image(10);
        let targets = make_targets(&im, &[&enc], &[&pair], &[&pw]).unwrap();
        let cfg = AttackConfig {
            max_iters: 5,
            ..AttackConfig::face()
        };
        let a = protect_image(&im, &[&enc], &targets, &cfg).unwrap();
        let b = protect_image(&im, &[&enc], &targets, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
