//! Password-conditioned encryptor / decryptor networks.
//!
//! Both roles share one architecture: the input vector is split into
//! `T` tokens of width `d`, passed through single-head self-attention
//! (residual + layer norm), then single-head cross-attention whose keys and
//! values come from the password split the same way (residual + layer
//! norm), flattened, and mapped through a fully connected layer.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderId, Encoding};
use crate::error::{Error, Result};
use crate::numgrad::{Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::params::ParamSet;

/// Default number of tokens a flat embedding is split into.
pub const DEFAULT_TOKENS: usize = 8;

/// Guards the input normalization against all-zero embeddings.
const INPUT_RMS_EPS: f64 = 1e-12;

const PASSWORD_STREAM: u64 = 31;

/// Secret conditioning vector with the embedding's dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Password {
    pub seed: u64,
    pub vector: Vec<f64>,
}

impl Password {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Seeded standard-normal password of length `dim`.
pub fn generate_password(seed: u64, dim: usize) -> Result<Password> {
    if dim == 0 {
        return Err(Error::arg("password dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PASSWORD_STREAM);
    let vector: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Password { seed, vector })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Encryptor,
    Decryptor,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Encryptor => "encryptor",
            Role::Decryptor => "decryptor",
        })
    }
}

/// Parameter names in canonical order.
pub const PARAM_NAMES: [&str; 14] = [
    "sa_wq", "sa_wk", "sa_wv", "sa_wo", "ln1_gain", "ln1_bias", "ca_wq", "ca_wk", "ca_wv", "ca_wo",
    "ln2_gain", "ln2_bias", "fc_w", "fc_b",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CryptorNet {
    pub role: Role,
    pub encoder_id: EncoderId,
    pub tokens: usize,
    pub token_dim: usize,
    pub params: ParamSet,
}

impl CryptorNet {
    /// Fresh network for vectors of length `embed_dim`, split into `tokens`
    /// tokens.
    pub fn new(role: Role, encoder_id: EncoderId, embed_dim: usize, tokens: usize, seed: u64) -> Result<Self> {
        if tokens == 0 || embed_dim % tokens != 0 {
            return Err(Error::Config(format!(
                "embedding dim {embed_dim} is not divisible into {tokens} tokens"
            )));
        }
        let d = embed_dim / tokens;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(match role {
            Role::Encryptor => 41,
            Role::Decryptor => 42,
        });
        let std_d = 1.0 / (d as f64).sqrt();
        let mut params = ParamSet::new();
        for name in PARAM_NAMES {
            let t = match name {
                "ln1_gain" | "ln2_gain" => Tensor::full(&[d], 1.0),
                "ln1_bias" | "ln2_bias" => Tensor::zeros(&[d]),
                "fc_w" => Tensor::randn(&[embed_dim, embed_dim], 1.0 / (embed_dim as f64).sqrt(), &mut rng),
                "fc_b" => Tensor::zeros(&[embed_dim]),
                _ => Tensor::randn(&[d, d], std_d, &mut rng),
            };
            params.push(name, t);
        }
        Ok(Self {
            role,
            encoder_id,
            tokens,
            token_dim: d,
            params,
        })
    }

    /// Rebuilds a network around existing parameters, validating shapes.
    pub fn from_params(role: Role, encoder_id: EncoderId, tokens: usize, params: ParamSet) -> Result<Self> {
        let fc = params.get("fc_w")?;
        let embed_dim = fc.shape().first().copied().unwrap_or(0);
        let net = Self::new(role, encoder_id, embed_dim, tokens, 0)?;
        if params.len() != PARAM_NAMES.len() {
            return Err(Error::Config(format!("expected {} parameters, got {}", PARAM_NAMES.len(), params.len())));
        }
        for ((name, t), (want_name, want)) in params.iter().zip(net.params.iter()) {
            if name != want_name || t.shape() != want.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` {:?} does not match `{want_name}` {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self { params, ..net })
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens * self.token_dim
    }

    /// Puts the parameters on `g`, tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundCryptor {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundCryptor {
            vars,
            tokens: self.tokens,
            token_dim: self.token_dim,
        }
    }

    /// Applies the network to each row of `inputs` with the matching row
    /// of `passwords`. Both are `[n, D]`.
    pub fn forward_rows(&self, inputs: &Tensor, passwords: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let net = self.bind(&mut g, false);
        let e = g.constant(inputs.clone());
        let p = g.constant(passwords.clone());
        let y = net.forward(&mut g, e, p)?;
        Ok(g.value(y).clone())
    }

    /// Single-vector forward pass.
    pub fn forward(&self, e: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        let dim = self.embed_dim();
        if e.len() != dim {
            return Err(Error::arg(format!("{} input e has dim {}, expected {dim}", self.role, e.len())));
        }
        if p.len() != dim {
            return Err(Error::arg(format!("{} password p has dim {}, expected {dim}", self.role, p.len())));
        }
        let e = Tensor::new(vec![1, dim], e.to_vec())?;
        let p = Tensor::new(vec![1, dim], p.to_vec())?;
        Ok(self.forward_rows(&e, &p)?.into_data())
    }
}

/// A [`CryptorNet`] whose parameters live on a particular [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundCryptor {
    vars: Vec<Var>,
    tokens: usize,
    token_dim: usize,
}

impl BoundCryptor {
    /// Parameter handles in [`PARAM_NAMES`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Swaps the handle of parameter `name` for `var`, e.g. to probe the
    /// gradient with respect to a single tensor.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let i = PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown cryptor parameter `{name}`")))?;
        self.vars[i] = var;
        Ok(())
    }

    fn p(&self, name: &str) -> Var {
        let i = PARAM_NAMES.iter().position(|n| *n == name).expect("known parameter");
        self.vars[i]
    }

    fn attention(&self, g: &mut Graph, queries: Var, context: Var, n: usize, prefix: &str) -> Result<Var> {
        let (t, d) = (self.tokens, self.token_dim);
        let wq = self.p(&format!("{prefix}_wq"));
        let wk = self.p(&format!("{prefix}_wk"));
        let wv = self.p(&format!("{prefix}_wv"));
        let wo = self.p(&format!("{prefix}_wo"));
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(context, wk)?;
        let v = g.matmul(context, wv)?;
        let q = g.reshape(q, &[n, t, d])?;
        let k = g.reshape(k, &[n, t, d])?;
        let v = g.reshape(v, &[n, t, d])?;
        let kt = g.transpose(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores)?;
        let h = g.bmm(attn, v)?;
        let h = g.reshape(h, &[n * t, d])?;
        g.matmul(h, wo)
    }

    /// `inputs` and `passwords` are `[n, D]`; returns `[n, D]`.
    pub fn forward(&self, g: &mut Graph, inputs: Var, passwords: Var) -> Result<Var> {
        let dim = self.tokens * self.token_dim;
        let (si, sp) = (g.shape(inputs).to_vec(), g.shape(passwords).to_vec());
        if si.len() != 2 || si[1] != dim {
            return Err(Error::arg(format!("cryptor input e has shape {si:?}, expected [n, {dim}]")));
        }
        if sp != si {
            return Err(Error::arg(format!("cryptor password p has shape {sp:?}, expected {si:?}")));
        }
        let n = si[0];
        let (t, d) = (self.tokens, self.token_dim);

        // unit-RMS input, so the password does not drown small embeddings
        let x = g.rms_norm(inputs, INPUT_RMS_EPS)?;
        let x = g.reshape(x, &[n * t, d])?;
        let sa = self.attention(g, x, x, n, "sa")?;
        let x = g.add(x, sa)?;
        let x = g.layer_norm(x, self.p("ln1_gain"), self.p("ln1_bias"), LAYER_NORM_EPS)?;

        let pw = g.reshape(passwords, &[n * t, d])?;
        let ca = self.attention(g, x, pw, n, "ca")?;
        let x = g.add(x, ca)?;
        let x = g.layer_norm(x, self.p("ln2_gain"), self.p("ln2_bias"), LAYER_NORM_EPS)?;

        let flat = g.reshape(x, &[n, dim])?;
        let y = g.matmul(flat, self.p("fc_w"))?;
        g.add_row_bias(y, self.p("fc_b"))
    }
}

/// Password-keyed mapping of single embedding vectors, implemented by
/// [`CryptorPair`] and usable by metrics with any stand-in.
pub trait EmbeddingCipher {
    fn encrypt(&self, e: &[f64], p: &Password) -> Result<Vec<f64>>;
    fn decrypt(&self, e_enc: &[f64], p: &Password) -> Result<Vec<f64>>;
}

impl EmbeddingCipher for CryptorPair {
    fn encrypt(&self, e: &[f64], p: &Password) -> Result<Vec<f64>> {
        CryptorPair::encrypt(self, e, p)
    }

    fn decrypt(&self, e_enc: &[f64], p: &Password) -> Result<Vec<f64>> {
        CryptorPair::decrypt(self, e_enc, p)
    }
}

/// One trained encryptor/decryptor pair for a single encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CryptorPair {
    pub encoder_id: EncoderId,
    pub enc: CryptorNet,
    pub dec: CryptorNet,
    /// Fingerprint of the training configuration that produced the pair.
    pub train_fingerprint: String,
}

impl CryptorPair {
    /// Untrained pair with distinct encryptor and decryptor weights.
    pub fn new(encoder_id: EncoderId, embed_dim: usize, tokens: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder_id,
            enc: CryptorNet::new(Role::Encryptor, encoder_id, embed_dim, tokens, seed)?,
            dec: CryptorNet::new(Role::Decryptor, encoder_id, embed_dim, tokens, seed)?,
            train_fingerprint: String::from("untrained"),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.enc.embed_dim()
    }

    pub fn encrypt(&self, e: &[f64], p: &Password) -> Result<Vec<f64>> {
        self.enc.forward(e, &p.vector)
    }

    pub fn decrypt(&self, e_enc: &[f64], p: &Password) -> Result<Vec<f64>> {
        self.dec.forward(e_enc, &p.vector)
    }

    /// Encrypts every row of an encoding with the same password.
    pub fn encrypt_encoding(&self, e: &Encoding, p: &Password) -> Result<Tensor> {
        apply_rows(&self.enc, e.as_tensor(), p)
    }

    /// Decrypts every row of `rows` (`[n, D]` or `[D]`) with the same password.
    pub fn decrypt_rows(&self, rows: &Tensor, p: &Password) -> Result<Tensor> {
        apply_rows(&self.dec, rows, p)
    }

    pub fn encrypt_rows(&self, rows: &Tensor, p: &Password) -> Result<Tensor> {
        apply_rows(&self.enc, rows, p)
    }
}

fn apply_rows(net: &CryptorNet, rows: &Tensor, p: &Password) -> Result<Tensor> {
    let dim = net.embed_dim();
    if p.dim() != dim {
        return Err(Error::arg(format!("password p has dim {}, expected {dim}", p.dim())));
    }
    let shape = rows.shape().to_vec();
    let n = match shape.as_slice() {
        [w] if *w == dim => 1,
        [n, w] if *w == dim => *n,
        _ => return Err(Error::arg(format!("input e has shape {shape:?}, expected rows of width {dim}"))),
    };
    let inputs = rows.clone().reshape(&[n, dim])?;
    let mut pw = Vec::with_capacity(n * dim);
    for _ in 0..n {
        pw.extend_from_slice(&p.vector);
    }
    let out = net.forward_rows(&inputs, &Tensor::new(vec![n, dim], pw)?)?;
    out.reshape(&shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{cos_sim_raw, finite_diff_check, GradCheckConfig};

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn passwords_are_deterministic_and_independent() {
        let a = generate_password(42, 64).unwrap();
        assert_eq!(a, generate_password(42, 64).unwrap());
        let b = generate_password(43, 64).unwrap();
        assert!(cos_sim_raw(&a.vector, &b.vector).unwrap().abs() < 0.5);
        assert!(generate_password(1, 0).is_err());
    }

    #[test]
    fn password_mean_is_near_zero() {
        let p = generate_password(9, 4096).unwrap();
        let mean = p.vector.iter().sum::<f64>() / 4096.0;
        assert!(mean.abs() < 0.1, "{mean}");
    }

    #[test]
    fn untrained_forward_is_finite_and_deterministic() {
        let pair = CryptorPair::new(EncoderId::FaceA, 64, DEFAULT_TOKENS, 3).unwrap();
        let e = rand_vec(1, 64);
        let p = generate_password(5, 64).unwrap();
        let a = pair.encrypt(&e, &p).unwrap();
        let b = pair.encrypt(&e, &p).unwrap();
        assert_eq!(a.len(), 64);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
        assert_ne!(pair.enc.params, pair.dec.params);
    }

    #[test]
    fn output_depends_on_password() {
        let pair = CryptorPair::new(EncoderId::FaceA, 64, DEFAULT_TOKENS, 3).unwrap();
        let e = rand_vec(1, 64);
        let a = pair.encrypt(&e, &generate_password(5, 64).unwrap()).unwrap();
        let b = pair.encrypt(&e, &generate_password(6, 64).unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn dim_mismatch_names_argument() {
        let pair = CryptorPair::new(EncoderId::FaceA, 64, DEFAULT_TOKENS, 3).unwrap();
        let p = generate_password(5, 64).unwrap();
        let err = pair.enc.forward(&rand_vec(1, 63), &p.vector).unwrap_err().to_string();
        assert!(err.contains("input e"), "{err}");
        let err = pair.enc.forward(&rand_vec(1, 64), &rand_vec(2, 32)).unwrap_err().to_string();
        assert!(err.contains("password p"), "{err}");
        assert!(CryptorNet::new(Role::Encryptor, EncoderId::FaceA, 63, 8, 0).is_err());
    }

    #[test]
    fn row_wise_equals_per_row() {
        let pair = CryptorPair::new(EncoderId::ClipHidden, 48, DEFAULT_TOKENS, 3).unwrap();
        let rows = Tensor::new(vec![16, 48], rand_vec(4, 16 * 48)).unwrap();
        let p = generate_password(5, 48).unwrap();
        let all = pair.encrypt_rows(&rows, &p).unwrap();
        for i in 0..16 {
            let single = pair.encrypt(rows.row(i), &p).unwrap();
            assert_eq!(single.as_slice(), all.row(i), "row {i}");
        }
    }

    #[test]
    fn clamped_cos_gradient_matches_finite_differences() {
        let pair = CryptorPair::new(EncoderId::FaceA, 64, DEFAULT_TOKENS, 3).unwrap();
        let p = generate_password(5, 64).unwrap();
        // pick a point where the clamp is inactive
        let e = (0..50)
            .map(|s| rand_vec(100 + s, 64))
            .find(|e| cos_sim_raw(&pair.encrypt(e, &p).unwrap(), e).unwrap() > 0.05)
            .expect("a point with positive similarity");
        let enc = pair.enc.clone();
        let pw = Tensor::new(vec![1, 64], p.vector.clone()).unwrap();
        let f = move |g: &mut Graph, x: Var| {
            let net = enc.bind(g, false);
            let row = g.reshape(x, &[1, 64])?;
            let pv = g.constant(pw.clone());
            let y = net.forward(g, row, pv)?;
            g.cos_rows(y, row, true).and_then(|c| Ok(g.sum(c)))
        };
        let report = finite_diff_check("cryptor", f, &Tensor::vector(e), &GradCheckConfig::default()).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
