//! Frozen toy image encoders.
//!
//! Four roles are modelled:
//!
//! * `face_a` / `face_b`: identical architecture, different weights (two
//!   checkpoints of one identity encoder). 8×8 patch embedding, GELU,
//!   mean pool, linear head to a 64-d vector.
//! * `clip_pooled`: 16×16 patch trunk with a token mixer, mean pooled and
//!   projected to a 96-d vector.
//! * `clip_hidden`: the same trunk's token matrix (16 × 48).
//!
//! `clip_pooled` and `clip_hidden` built from the same seed share their
//! trunk weights exactly.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numgrad::{Graph, Tensor, Var};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderId {
    FaceA,
    FaceB,
    ClipPooled,
    ClipHidden,
}

impl EncoderId {
    pub const ALL: [EncoderId; 4] = [
        EncoderId::FaceA,
        EncoderId::FaceB,
        EncoderId::ClipPooled,
        EncoderId::ClipHidden,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderId::FaceA => "face_a",
            EncoderId::FaceB => "face_b",
            EncoderId::ClipPooled => "clip_pooled",
            EncoderId::ClipHidden => "clip_hidden",
        }
    }

    pub fn is_matrix(self) -> bool {
        self == EncoderId::ClipHidden
    }
}

impl fmt::Display for EncoderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown encoder `{s}`")))
    }
}

/// Architecture sizes shared by all encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderDims {
    pub resolution: usize,
    pub face_patch: usize,
    pub face_width: usize,
    pub face_dim: usize,
    pub clip_patch: usize,
    pub token_dim: usize,
    pub pooled_dim: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            resolution: 64,
            face_patch: 8,
            face_width: 128,
            face_dim: 64,
            clip_patch: 16,
            token_dim: 48,
            pooled_dim: 96,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        let ok = self.resolution > 0
            && self.face_patch > 0
            && self.clip_patch > 0
            && self.resolution % self.face_patch == 0
            && self.resolution % self.clip_patch == 0
            && self.face_width > 0
            && self.face_dim > 0
            && self.token_dim > 0
            && self.pooled_dim > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent encoder dims {self:?}")))
        }
    }

    /// Number of rows `R` in the `clip_hidden` token matrix.
    pub fn token_count(&self) -> usize {
        let g = self.resolution / self.clip_patch;
        g * g
    }

    /// Width of the vectors the cryptor sees for `id` (row width for
    /// `clip_hidden`).
    pub fn embed_dim(&self, id: EncoderId) -> usize {
        match id {
            EncoderId::FaceA | EncoderId::FaceB => self.face_dim,
            EncoderId::ClipPooled => self.pooled_dim,
            EncoderId::ClipHidden => self.token_dim,
        }
    }
}

/// Output of [`EncoderModel::encode`].
#[derive(Clone, Debug, PartialEq)]
pub enum Encoding {
    Vector(Embedding),
    Matrix(EmbeddingMatrix),
}

impl Encoding {
    /// The embedding rows (a single row for vector encoders).
    pub fn rows(&self) -> Vec<Vec<f64>> {
        match self {
            Encoding::Vector(e) => vec![e.vector.clone()],
            Encoding::Matrix(m) => (0..m.rows.rows()).map(|i| m.rows.row(i).to_vec()).collect(),
        }
    }

    /// Width of one embedding row.
    pub fn dim(&self) -> usize {
        match self {
            Encoding::Vector(e) => e.vector.len(),
            Encoding::Matrix(m) => m.rows.row_len(),
        }
    }

    pub fn as_tensor(&self) -> &Tensor {
        match self {
            Encoding::Vector(e) => &e.tensor,
            Encoding::Matrix(m) => &m.rows,
        }
    }

    pub fn encoder_id(&self) -> EncoderId {
        match self {
            Encoding::Vector(e) => e.encoder_id,
            Encoding::Matrix(_) => EncoderId::ClipHidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub encoder_id: EncoderId,
    pub vector: Vec<f64>,
    tensor: Tensor,
}

impl Embedding {
    pub fn new(encoder_id: EncoderId, vector: Vec<f64>) -> Self {
        let tensor = Tensor::vector(vector.clone());
        Self {
            encoder_id,
            vector,
            tensor,
        }
    }
}

/// `R × token_dim` hidden-state matrix of `clip_hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Tensor,
}

/// A frozen encoder. Parameters are fixed at construction.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    id: EncoderId,
    seed: u64,
    dims: EncoderDims,
    params: ParamSet,
}

fn face_stream(id: EncoderId) -> u64 {
    match id {
        EncoderId::FaceA => 11,
        _ => 12,
    }
}

const TRUNK_STREAM: u64 = 21;
const POOLED_HEAD_STREAM: u64 = 22;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `[p, p, 3, out]` patch-embedding kernel with each filter's per-channel
/// spatial mean removed, so flat color regions embed to zero.
fn patch_kernel(p: usize, out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut k = init(&[p, p, 3, out], p * p * 3, rng);
    let area = p * p;
    let d = k.data_mut();
    for c in 0..3 {
        for o in 0..out {
            let at = |s: usize| (s * 3 + c) * out + o;
            let mean = (0..area).map(|s| d[at(s)]).sum::<f64>() / area as f64;
            for s in 0..area {
                d[at(s)] -= mean;
            }
        }
    }
    k
}

/// `N(0, 1/fan_in)` weight initialization; biases start at zero.
fn init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl EncoderModel {
    pub fn new(id: EncoderId, seed: u64) -> Self {
        Self::with_dims(id, seed, EncoderDims::default()).expect("default dims are valid")
    }

    pub fn with_dims(id: EncoderId, seed: u64, dims: EncoderDims) -> Result<Self> {
        dims.validate()?;
        let mut params = ParamSet::new();
        match id {
            EncoderId::FaceA | EncoderId::FaceB => {
                let mut rng = rng_for(seed, face_stream(id));
                let p = dims.face_patch;
                params.push("patch_kernel", patch_kernel(p, dims.face_width, &mut rng));
                params.push("head_w", init(&[dims.face_width, dims.face_dim], dims.face_width, &mut rng));
                params.push("head_b", Tensor::zeros(&[dims.face_dim]));
            }
            EncoderId::ClipPooled | EncoderId::ClipHidden => {
                let mut rng = rng_for(seed, TRUNK_STREAM);
                let p = dims.clip_patch;
                let t = dims.token_dim;
                params.push("patch_kernel", patch_kernel(p, t, &mut rng));
                params.push("mix_w", init(&[t, t], t, &mut rng));
                params.push("mix_b", Tensor::zeros(&[t]));
                if id == EncoderId::ClipPooled {
                    let mut rng = rng_for(seed, POOLED_HEAD_STREAM);
                    params.push("head_w", init(&[t, dims.pooled_dim], t, &mut rng));
                    params.push("head_b", Tensor::zeros(&[dims.pooled_dim]));
                }
            }
        }
        Ok(Self {
            id,
            seed,
            dims,
            params,
        })
    }

    pub fn id(&self) -> EncoderId {
        self.id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dims(&self) -> &EncoderDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Dimension of a single embedding vector (row width for `clip_hidden`).
    pub fn embed_dim(&self) -> usize {
        self.dims.embed_dim(self.id)
    }

    /// Shape of the encoder output.
    pub fn output_shape(&self) -> Vec<usize> {
        if self.id.is_matrix() {
            vec![self.dims.token_count(), self.dims.token_dim]
        } else {
            vec![self.embed_dim()]
        }
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let r = self.dims.resolution;
        if shape != [r, r, 3] {
            return Err(Error::shape(
                "encode",
                format!("{} expects a [{r}, {r}, 3] image, got {shape:?}", self.id),
            ));
        }
        Ok(())
    }

    /// Differentiable forward pass on a graph node holding an `[H, W, 3]`
    /// image. Returns `[D]` for vector encoders and `[R, d]` for
    /// `clip_hidden`.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        self.check_image(g.shape(image))?;
        let c = |g: &mut Graph, name: &str| -> Result<Var> { Ok(g.constant(self.params.get(name)?.clone())) };
        // map [0, 1] pixels to [-1, 1]
        let x = g.scale(image, 2.0);
        let x = g.add_scalar(x, -1.0);
        match self.id {
            EncoderId::FaceA | EncoderId::FaceB => {
                let k = c(g, "patch_kernel")?;
                let p = self.dims.face_patch;
                let grid = self.dims.resolution / p;
                let t = g.conv2d(x, k, p, 0)?;
                let t = g.reshape(t, &[grid * grid, self.dims.face_width])?;
                let t = g.gelu(t);
                let pooled = g.mean_rows(t)?;
                let pooled = g.reshape(pooled, &[1, self.dims.face_width])?;
                let w = c(g, "head_w")?;
                let y = g.matmul(pooled, w)?;
                let y = g.reshape(y, &[self.dims.face_dim])?;
                let b = c(g, "head_b")?;
                g.add_row_bias(y, b)
            }
            EncoderId::ClipPooled | EncoderId::ClipHidden => {
                let hidden = self.trunk(g, x)?;
                if self.id == EncoderId::ClipHidden {
                    return Ok(hidden);
                }
                let pooled = g.mean_rows(hidden)?;
                let pooled = g.reshape(pooled, &[1, self.dims.token_dim])?;
                let w = c(g, "head_w")?;
                let y = g.matmul(pooled, w)?;
                let y = g.reshape(y, &[self.dims.pooled_dim])?;
                let b = c(g, "head_b")?;
                g.add_row_bias(y, b)
            }
        }
    }

    fn trunk(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.dims.clip_patch;
        let r = self.dims.token_count();
        let d = self.dims.token_dim;
        let k = g.constant(self.params.get("patch_kernel")?.clone());
        let t = g.conv2d(x, k, p, 0)?;
        let t = g.reshape(t, &[r, d])?;
        let t = g.gelu(t);
        let w = g.constant(self.params.get("mix_w")?.clone());
        let t = g.matmul(t, w)?;
        let b = g.constant(self.params.get("mix_b")?.clone());
        g.add_row_bias(t, b)
    }

    /// Encodes `image` without tracking gradients.
    pub fn encode(&self, image: &Image) -> Result<Encoding> {
        let t = self.encode_tensor(image.tensor())?;
        Ok(if self.id.is_matrix() {
            Encoding::Matrix(EmbeddingMatrix { rows: t })
        } else {
            Encoding::Vector(Embedding::new(self.id, t.into_data()))
        })
    }

    pub(crate) fn encode_tensor(&self, pixels: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(pixels.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// Picks `b` distinct rows uniformly without replacement. Returns
/// `(row index, row)` pairs in generator order.
pub fn sample_rows(matrix: &EmbeddingMatrix, b: usize, rng_seed: u64) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_rows_with(matrix, b, &mut rng)
}

pub(crate) fn sample_row_indices<R: rand::Rng + ?Sized>(r: usize, b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if b == 0 || b > r {
        return Err(Error::arg(format!("cannot sample {b} rows from {r}")));
    }
    Ok(sample(rng, r, b).into_vec())
}

pub fn sample_rows_with<R: rand::Rng + ?Sized>(
    matrix: &EmbeddingMatrix,
    b: usize,
    rng: &mut R,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let idx = sample_row_indices(matrix.rows.rows(), b, rng)?;
    Ok(idx.into_iter().map(|i| (i, matrix.rows.row(i).to_vec())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::cos_sim_raw;

    fn random_image(seed: u64, res: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&[res, res, 3], 0.25, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
        Image::new(t).unwrap()
    }

    #[test]
    fn same_id_and_seed_gives_identical_params() {
        let a = EncoderModel::new(EncoderId::FaceA, 7);
        let b = EncoderModel::new(EncoderId::FaceA, 7);
        assert_eq!(a.params(), b.params());
        let c = EncoderModel::new(EncoderId::FaceA, 8);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn clip_hidden_shape() {
        let m = EncoderModel::new(EncoderId::ClipHidden, 3);
        let img = random_image(1, 64);
        match m.encode(&img).unwrap() {
            Encoding::Matrix(mat) => assert_eq!(mat.rows.shape(), &[16, 48]),
            other => panic!("expected matrix, got {other:?}"),
        }
    }

    #[test]
    fn clip_variants_share_trunk() {
        let pooled = EncoderModel::new(EncoderId::ClipPooled, 5);
        let hidden = EncoderModel::new(EncoderId::ClipHidden, 5);
        for name in ["patch_kernel", "mix_w", "mix_b"] {
            assert_eq!(pooled.params().get(name).unwrap(), hidden.params().get(name).unwrap());
        }
    }

    #[test]
    fn zero_image_is_finite_and_repeatable() {
        for id in EncoderId::ALL {
            let m = EncoderModel::new(id, 2);
            let img = Image::new(Tensor::zeros(&[64, 64, 3])).unwrap();
            let a = m.encode(&img).unwrap();
            let b = m.encode(&img).unwrap();
            assert!(a.as_tensor().is_finite());
            assert_eq!(a.as_tensor().shape(), m.output_shape().as_slice());
            let bits = |e: &Encoding| e.as_tensor().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn wrong_resolution_is_a_shape_error() {
        let m = EncoderModel::new(EncoderId::FaceA, 2);
        let img = Image::new(Tensor::full(&[32, 32, 3], 0.5)).unwrap();
        assert!(matches!(m.encode(&img), Err(Error::Shape { .. })));
    }

    #[test]
    fn face_checkpoints_are_distinct() {
        let a = EncoderModel::new(EncoderId::FaceA, 7);
        let b = EncoderModel::new(EncoderId::FaceB, 8);
        let mut small = 0;
        for s in 0..100 {
            let img = random_image(1000 + s, 64);
            let ea = a.encode(&img).unwrap().rows().remove(0);
            let eb = b.encode(&img).unwrap().rows().remove(0);
            if cos_sim_raw(&ea, &eb).unwrap().abs() < 0.9 {
                small += 1;
            }
        }
        assert!(small >= 95, "{small}/100 below 0.9");
    }

    #[test]
    fn sample_rows_contract() {
        let m = EncoderModel::new(EncoderId::ClipHidden, 3);
        let Encoding::Matrix(mat) = m.encode(&random_image(4, 64)).unwrap() else {
            unreachable!()
        };
        let all = sample_rows(&mat, 16, 9).unwrap();
        let mut idx: Vec<usize> = all.iter().map(|(i, _)| *i).collect();
        idx.sort_unstable();
        assert_eq!(idx, (0..16).collect::<Vec<_>>());

        let a = sample_rows(&mat, 8, 42).unwrap();
        let b = sample_rows(&mat, 8, 42).unwrap();
        assert_eq!(a, b);
        for (i, row) in &a {
            assert_eq!(row.as_slice(), mat.rows.row(*i));
        }
        assert!(sample_rows(&mat, 17, 1).is_err());
        assert!(sample_rows(&mat, 0, 1).is_err());
    }

    #[test]
    fn sample_rows_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 10_000;
        let mut counts = [0usize; 16];
        for _ in 0..draws {
            counts[sample_row_indices(16, 1, &mut rng).unwrap()[0]] += 1;
        }
        let p = 1.0 / 16.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }
}
