//! Joint encryptor/decryptor optimization over cached embeddings.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cryptor::{CryptorPair, DEFAULT_TOKENS};
use crate::encoders::{sample_rows_with, EncoderId, EncoderModel, Encoding};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{build_losses, BatchInputs, LossBreakdown, LossWeights};
use crate::numgrad::{Graph, Tensor};

/// Total loss above which training is declared divergent. The un-normalized
/// diversity term of an untrained pair can already exceed this at large
/// pools, so the effective limit is the larger of this and twice the first
/// step's total.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

/// Training weights at desk scale. The diversity sums are not normalized by
/// their pair counts, so their weights shrink with the pool size.
pub const DESK_WEIGHTS: LossWeights = LossWeights {
    enc: 1.0,
    dec: 20.0,
    wrg: 5.0,
    div: 0.02,
    div_s: 0.05,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder_id: EncoderId,
    /// Embeddings per step; rows per step for matrix encoders.
    pub batch: usize,
    pub n_wrong: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub adam: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    pub tokens: usize,
    /// Record a breakdown every this many steps (the last step is always
    /// recorded).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_encoder(EncoderId::FaceA)
    }
}

impl TrainConfig {
    /// Defaults for `id`: batch 32 for vector encoders, 8 rows for the
    /// token-matrix encoder.
    pub fn for_encoder(id: EncoderId) -> Self {
        Self {
            encoder_id: id,
            batch: if id.is_matrix() { 8 } else { 32 },
            n_wrong: 4,
            weights: DESK_WEIGHTS,
            lr: 3e-3,
            adam: AdamConfig::default(),
            steps: 3000,
            seed: 0,
            tokens: DEFAULT_TOKENS,
            log_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("batch must be >= 2, got {}", self.batch)));
        }
        if self.n_wrong < 1 {
            return Err(Error::Config("n_wrong must be >= 1".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if self.log_every < 1 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        self.weights.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub wall_seconds: f64,
    pub final_params_fingerprint: String,
}

impl TrainLog {
    /// One JSON object per step record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

/// Adam state for both nets of a pair.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(pair: &CryptorPair, lr: f64, cfg: AdamConfig) -> Self {
        let sizes: Vec<usize> = pair
            .enc
            .params
            .iter()
            .chain(pair.dec.params.iter())
            .map(|(_, t)| t.len())
            .collect();
        Self {
            cfg,
            lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let step = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.eps);
                *w -= step;
            }
        }
    }
}

fn normal_rows<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    let data: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, dim], data).expect("consistent shape")
}

/// Draws one correct and `n_wrong` wrong passwords per batch row plus the
/// fixed same-password pair.
pub fn draw_passwords<R: Rng + ?Sized>(originals: Tensor, n_wrong: usize, rng: &mut R) -> BatchInputs {
    let (b, d) = (originals.rows(), originals.row_len());
    let correct = normal_rows(b, d, rng);
    let wrong = (0..n_wrong).map(|_| normal_rows(b, d, rng)).collect();
    let p_enc = normal_rows(1, d, rng).into_data();
    let p_dec = normal_rows(1, d, rng).into_data();
    BatchInputs {
        originals,
        correct,
        wrong,
        p_enc,
        p_dec,
    }
}

/// Loss breakdown of `pair` on fixed inputs, without updating anything.
pub fn evaluate_batch(pair: &CryptorPair, inputs: &BatchInputs, weights: &LossWeights) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let enc = pair.enc.bind(&mut g, false);
    let dec = pair.dec.bind(&mut g, false);
    let vars = build_losses(&mut g, &enc, &dec, inputs, weights)?;
    Ok(vars.breakdown(&g, weights))
}

/// One joint optimizer update of both nets on fixed inputs. Returns the
/// breakdown evaluated before the update.
pub fn apply_step(
    pair: &mut CryptorPair,
    adam: &mut Adam,
    inputs: &BatchInputs,
    weights: &LossWeights,
    step: usize,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let enc = pair.enc.bind(&mut g, true);
    let dec = pair.dec.bind(&mut g, true);
    let vars = build_losses(&mut g, &enc, &dec, inputs, weights)?;
    let loss = vars.breakdown(&g, weights);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("training step {step}: {loss:?}"),
        });
    }
    let grads = g.backward(vars.total)?;
    let grads: Vec<Tensor> = enc
        .vars()
        .iter()
        .zip(pair.enc.params.iter())
        .chain(dec.vars().iter().zip(pair.dec.params.iter()))
        .map(|(&v, (_, t))| grads.get_or_zeros(v, t.shape()))
        .collect();
    if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("training step {step}: gradient of parameter tensor {i}"),
        });
    }
    let params: Vec<&mut Tensor> = pair.enc.params.tensors_mut().chain(pair.dec.params.tensors_mut()).collect();
    adam.update(params, &grads);
    Ok(loss)
}

/// Draws passwords from `rng` and applies one update on `batch` (`[b, D]`).
pub fn train_step<R: Rng + ?Sized>(
    pair: &mut CryptorPair,
    adam: &mut Adam,
    batch: &Tensor,
    cfg: &TrainConfig,
    rng: &mut R,
    step: usize,
) -> Result<LossBreakdown> {
    if batch.rank() != 2 || batch.rows() != cfg.batch {
        return Err(Error::arg(format!(
            "training batch has shape {:?}, expected {} rows",
            batch.shape(),
            cfg.batch
        )));
    }
    let inputs = draw_passwords(batch.clone(), cfg.n_wrong, rng);
    apply_step(pair, adam, &inputs, &cfg.weights, step)
}

/// Cache of encoder outputs keyed by encoder id, encoder seed and image
/// content hash.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingCache {
    entries: HashMap<(EncoderId, u64, [u8; 32]), Encoding>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_encode(&mut self, encoder: &EncoderModel, image: &Image) -> Result<Encoding> {
        let key = (encoder.id(), encoder.seed(), image.hash());
        if let Some(e) = self.entries.get(&key) {
            return Ok(e.clone());
        }
        let e = encoder.encode(image)?;
        self.entries.insert(key, e.clone());
        Ok(e)
    }
}

/// Encodes every image, reusing cached results.
pub fn precompute_embeddings(encoder: &EncoderModel, images: &[Image], cache: &mut EmbeddingCache) -> Result<Vec<Encoding>> {
    images.iter().map(|im| cache.get_or_encode(encoder, im)).collect()
}

fn sample_batch(encodings: &[Encoding], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let first = &encodings[0];
    let d = first.dim();
    let mut data = Vec::with_capacity(cfg.batch * d);
    match first {
        Encoding::Vector(_) => {
            for i in rand::seq::index::sample(rng, encodings.len(), cfg.batch) {
                data.extend_from_slice(encodings[i].as_tensor().data());
            }
        }
        Encoding::Matrix(_) => {
            let i = rng.random_range(0..encodings.len());
            let m = match &encodings[i] {
                Encoding::Matrix(m) => m,
                Encoding::Vector(_) => return Err(Error::arg("mixed vector and matrix encodings")),
            };
            for (_, row) in sample_rows_with(m, cfg.batch, rng)? {
                data.extend_from_slice(&row);
            }
        }
    }
    Tensor::new(vec![cfg.batch, d], data)
}

/// Trains a pair on precomputed encodings.
///
/// Vector encoders draw `batch` distinct embeddings per step; the matrix
/// encoder draws one image per step and samples `batch` of its rows.
pub fn train_on_embeddings(encodings: &[Encoding], cfg: &TrainConfig) -> Result<(CryptorPair, TrainLog)> {
    cfg.validate()?;
    let first = encodings.first().ok_or_else(|| Error::arg("no training embeddings"))?;
    if first.encoder_id() != cfg.encoder_id || encodings.iter().any(|e| e.encoder_id() != cfg.encoder_id) {
        return Err(Error::arg(format!("training embeddings do not all come from {}", cfg.encoder_id)));
    }
    if !first.encoder_id().is_matrix() && encodings.len() < cfg.batch {
        return Err(Error::arg(format!(
            "dataset of {} embeddings is smaller than the batch {}",
            encodings.len(),
            cfg.batch
        )));
    }
    let dim = first.dim();
    let mut pair = CryptorPair::new(cfg.encoder_id, dim, cfg.tokens, cfg.seed)?;
    let mut adam = Adam::new(&pair, cfg.lr, cfg.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(51);
    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut limit = DIVERGENCE_LIMIT;
    for step in 0..cfg.steps {
        let batch = sample_batch(encodings, cfg, &mut rng)?;
        let loss = train_step(&mut pair, &mut adam, &batch, cfg, &mut rng, step)?;
        if step == 0 {
            limit = limit.max(2.0 * loss.total);
        } else if loss.total > limit {
            return Err(Error::NonFinite {
                context: format!("training diverged at step {step}: total {} > {limit}: {loss:?}", loss.total),
            });
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.records.push(StepRecord { step, loss });
        }
    }
    pair.train_fingerprint = cfg.fingerprint();
    log.wall_seconds = start.elapsed().as_secs_f64();
    log.final_params_fingerprint = combined_fingerprint(&pair);
    Ok((pair, log))
}

/// Encodes `images` (through `cache`) and trains a pair for `encoder`.
pub fn train_cryptor(
    encoder: &EncoderModel,
    images: &[Image],
    cfg: &TrainConfig,
    cache: &mut EmbeddingCache,
) -> Result<(CryptorPair, TrainLog)> {
    if cfg.encoder_id != encoder.id() {
        return Err(Error::Config(format!(
            "train config is for {} but the encoder is {}",
            cfg.encoder_id,
            encoder.id()
        )));
    }
    if !encoder.id().is_matrix() && images.len() < cfg.batch {
        return Err(Error::arg(format!("dataset of {} images is smaller than the batch {}", images.len(), cfg.batch)));
    }
    let encodings = precompute_embeddings(encoder, images, cache)?;
    train_on_embeddings(&encodings, cfg)
}

/// Fingerprint covering both nets' parameters.
pub fn combined_fingerprint(pair: &CryptorPair) -> String {
    let mut h = Sha256::new();
    h.update(pair.enc.params.fingerprint().as_bytes());
    h.update(pair.dec.params.fingerprint().as_bytes());
    hex::encode(h.finalize())
}
