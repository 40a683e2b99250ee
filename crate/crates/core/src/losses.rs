//! Cryptor training objectives.
//!
//! Every cosine term here is clamped to `[0, 1]`, so each loss is
//! non-negative. Per-item terms (`enc`, `dec`, `wrg`) are summed over the
//! batch; the diversity terms are `½ Σ_{k≠j}` over their pools with no
//! pair-count normalization.

use serde::{Deserialize, Serialize};

use crate::cryptor::{BoundCryptor, CryptorPair, Password};
use crate::error::{Error, Result};
use crate::numgrad::{cos_sim_clamped, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub enc: f64,
    pub dec: f64,
    pub wrg: f64,
    pub div: f64,
    pub div_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            enc: 1.0,
            dec: 5.0,
            wrg: 1.0,
            div: 1.0,
            div_s: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.enc, self.dec, self.wrg, self.div, self.div_s];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_enc: f64,
    pub l_dec: f64,
    pub l_wrg: f64,
    pub l_div: f64,
    pub l_div_s: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of the five terms.
    pub fn from_terms(l_enc: f64, l_dec: f64, l_wrg: f64, l_div: f64, l_div_s: f64, w: &LossWeights) -> Self {
        let total = w.enc * l_enc + w.dec * l_dec + w.wrg * l_wrg + w.div * l_div + w.div_s * l_div_s;
        Self {
            l_enc,
            l_dec,
            l_wrg,
            l_div,
            l_div_s,
            total,
        }
    }

    pub fn terms(&self) -> [f64; 5] {
        [self.l_enc, self.l_dec, self.l_wrg, self.l_div, self.l_div_s]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|t| t.is_finite()) && self.total.is_finite()
    }
}

/// One training batch: `b` originals, one correct and `n` wrong passwords
/// per original, and the fixed pair used for same-password diversity.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    /// `[b, D]`
    pub originals: Tensor,
    /// `[b, D]`, row `k` is the correct password of original `k`.
    pub correct: Tensor,
    /// `n` tensors of `[b, D]`; `wrong[i]` row `k` is the `i`-th wrong
    /// password of original `k`.
    pub wrong: Vec<Tensor>,
    pub p_enc: Vec<f64>,
    pub p_dec: Vec<f64>,
}

impl BatchInputs {
    pub fn batch_size(&self) -> usize {
        self.originals.rows()
    }

    fn validate(&self) -> Result<(usize, usize)> {
        let s = self.originals.shape();
        if s.len() != 2 {
            return Err(Error::arg(format!("originals must be [b, D], got {s:?}")));
        }
        let (b, d) = (s[0], s[1]);
        if self.wrong.is_empty() {
            return Err(Error::arg("at least one wrong password per original is required"));
        }
        if self.correct.shape() != s || self.wrong.iter().any(|w| w.shape() != s) {
            return Err(Error::arg("password tensors must match the originals' shape"));
        }
        if self.p_enc.len() != d || self.p_dec.len() != d {
            return Err(Error::arg("fixed passwords must match the embedding dimension"));
        }
        Ok((b, d))
    }
}

/// Graph handles for each term and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_enc: Var,
    pub l_dec: Var,
    pub l_wrg: Var,
    pub l_div: Var,
    pub l_div_s: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, w: &LossWeights) -> LossBreakdown {
        let v = |x: Var| g.value(x).item();
        let mut out = LossBreakdown::from_terms(v(self.l_enc), v(self.l_dec), v(self.l_wrg), v(self.l_div), v(self.l_div_s), w);
        out.total = v(self.total);
        out
    }
}

fn repeat_rows(t: &Tensor, n: usize) -> Tensor {
    let d = t.len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![n, d], data).expect("consistent shape")
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let d = parts[0].row_len();
    let rows: usize = parts.iter().map(|p| p.rows()).sum();
    let mut data = Vec::with_capacity(rows * d);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, d], data).expect("consistent shape")
}

/// Builds all five losses for a batch on `g`.
///
/// Encryptions are computed for the correct password, each wrong password
/// and `p_enc`; decryptions of the correct-password encryption use the
/// correct and each wrong password, and the `p_enc` encryption is decrypted
/// with `p_dec`.
pub fn build_losses(
    g: &mut Graph,
    enc: &BoundCryptor,
    dec: &BoundCryptor,
    inputs: &BatchInputs,
    w: &LossWeights,
) -> Result<LossVars> {
    let (b, _) = inputs.validate()?;
    let n = inputs.wrong.len();
    let blocks = n + 2;
    let range = |blk: usize| -> Vec<usize> { (blk * b..(blk + 1) * b).collect() };

    let originals = g.constant(inputs.originals.clone());
    let tiled = g.constant(repeat_rows(&inputs.originals, blocks).reshape(&[blocks * b, inputs.originals.row_len()])?);
    let p_enc = repeat_rows(&Tensor::vector(inputs.p_enc.clone()), b);
    let p_dec = repeat_rows(&Tensor::vector(inputs.p_dec.clone()), b);

    let mut enc_pw: Vec<&Tensor> = vec![&inputs.correct];
    enc_pw.extend(inputs.wrong.iter());
    enc_pw.push(&p_enc);
    let enc_pw = g.constant(stack(&enc_pw));
    let encrypted = enc.forward(g, tiled, enc_pw)?;

    let enc_crt = g.select_rows(encrypted, &range(0))?;
    let enc_fixed = g.select_rows(encrypted, &range(n + 1))?;
    let mut dec_in: Vec<Var> = vec![enc_crt; n + 1];
    dec_in.push(enc_fixed);
    let dec_in = g.concat_rows(&dec_in)?;
    let mut dec_pw: Vec<&Tensor> = vec![&inputs.correct];
    dec_pw.extend(inputs.wrong.iter());
    dec_pw.push(&p_dec);
    let dec_pw = g.constant(stack(&dec_pw));
    let decrypted = dec.forward(g, dec_in, dec_pw)?;

    // enc: correct + wrong encryptions vs originals
    let enc_rows: Vec<usize> = (0..(n + 1) * b).collect();
    let enc_all = g.select_rows(encrypted, &enc_rows)?;
    let orig_tiled = g.select_rows(originals, &(0..(n + 1) * b).map(|i| i % b).collect::<Vec<_>>())?;
    let c = g.cos_rows(enc_all, orig_tiled, true)?;
    let l_enc = g.sum(c);

    let dec_crt = g.select_rows(decrypted, &range(0))?;
    let c = g.cos_rows(dec_crt, originals, true)?;
    let s = g.sum(c);
    let s = g.scale(s, -1.0);
    let l_dec = g.add_scalar(s, b as f64);

    let wrg_rows: Vec<usize> = (b..(n + 1) * b).collect();
    let dec_wrg = g.select_rows(decrypted, &wrg_rows)?;
    let orig_n = g.select_rows(originals, &(0..n * b).map(|i| i % b).collect::<Vec<_>>())?;
    let c = g.cos_rows(dec_wrg, orig_n, true)?;
    let l_wrg = g.sum(c);

    let pool = g.concat_rows(&[enc_all, dec_wrg])?;
    let l_div = g.pairwise_cos_sum(pool, true)?;

    let dec_fixed = g.select_rows(decrypted, &range(n + 1))?;
    let s1 = if b >= 2 { g.pairwise_cos_sum(enc_fixed, true)? } else { g.constant(Tensor::scalar(0.0)) };
    let s2 = if b >= 2 { g.pairwise_cos_sum(dec_fixed, true)? } else { g.constant(Tensor::scalar(0.0)) };
    let l_div_s = g.add(s1, s2)?;

    let terms = [(l_enc, w.enc), (l_dec, w.dec), (l_wrg, w.wrg), (l_div, w.div), (l_div_s, w.div_s)];
    let mut total: Option<Var> = None;
    for (t, wt) in terms {
        let scaled = g.scale(t, wt);
        total = Some(match total {
            None => scaled,
            Some(acc) => g.add(acc, scaled)?,
        });
    }
    Ok(LossVars {
        l_enc,
        l_dec,
        l_wrg,
        l_div,
        l_div_s,
        total: total.expect("five terms"),
    })
}

// ---- single-item forms, evaluated without gradients ----

fn check_wrong(wrong: &[Password]) -> Result<()> {
    if wrong.is_empty() {
        return Err(Error::arg("wrong-password list is empty"));
    }
    Ok(())
}

/// `Σ_{p ∈ {p_crt} ∪ wrong} cos⁺(Enc(e, p), e)`.
pub fn loss_enc(pair: &CryptorPair, e_ori: &[f64], p_crt: &Password, wrong: &[Password]) -> Result<f64> {
    check_wrong(wrong)?;
    let mut total = 0.0;
    for p in std::iter::once(p_crt).chain(wrong) {
        total += cos_sim_clamped(&pair.encrypt(e_ori, p)?, e_ori)?;
    }
    Ok(total)
}

/// `1 − cos⁺(Dec(Enc(e, p), p), e)`.
pub fn loss_dec(pair: &CryptorPair, e_ori: &[f64], p_crt: &Password) -> Result<f64> {
    let dec = pair.decrypt(&pair.encrypt(e_ori, p_crt)?, p_crt)?;
    Ok(1.0 - cos_sim_clamped(&dec, e_ori)?)
}

/// `Σ_i cos⁺(Dec(Enc(e, p_crt), p_wrg_i), e)`.
pub fn loss_wrg(pair: &CryptorPair, e_ori: &[f64], p_crt: &Password, wrong: &[Password]) -> Result<f64> {
    check_wrong(wrong)?;
    let enc = pair.encrypt(e_ori, p_crt)?;
    let mut total = 0.0;
    for p in wrong {
        total += cos_sim_clamped(&pair.decrypt(&enc, p)?, e_ori)?;
    }
    Ok(total)
}

/// `½ Σ_{k≠j} cos⁺(E_k, E_j)` over a pooled list of embeddings.
pub fn pairwise_clamped_sum(pool: &[Vec<f64>]) -> Result<f64> {
    if pool.len() < 2 {
        return Err(Error::arg(format!("diversity needs at least 2 embeddings, got {}", pool.len())));
    }
    let d = pool[0].len();
    if pool.iter().any(|e| e.len() != d) {
        return Err(Error::arg("pooled embeddings differ in dimension"));
    }
    let data: Vec<f64> = pool.iter().flatten().copied().collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![pool.len(), d], data)?);
    let s = g.pairwise_cos_sum(x, true)?;
    Ok(g.value(s).item())
}

/// Builds the `b·(2n+1)` pool (every encryption plus every wrong
/// decryption) for a batch and returns its pairwise diversity loss.
/// `wrong[k]` holds the wrong passwords of original `k`.
pub fn loss_div(pair: &CryptorPair, originals: &[Vec<f64>], correct: &[Password], wrong: &[Vec<Password>]) -> Result<f64> {
    if originals.len() != correct.len() || originals.len() != wrong.len() {
        return Err(Error::arg("originals, correct and wrong passwords must have equal length"));
    }
    let mut pool = Vec::new();
    for ((e, pc), pw) in originals.iter().zip(correct).zip(wrong) {
        check_wrong(pw)?;
        let enc = pair.encrypt(e, pc)?;
        pool.push(enc.clone());
        for p in pw {
            pool.push(pair.encrypt(e, p)?);
        }
        for p in pw {
            pool.push(pair.decrypt(&enc, p)?);
        }
    }
    pairwise_clamped_sum(&pool)
}

/// Same-password diversity over a batch: encryptions with `p_enc` and the
/// `p_dec` decryptions of those encryptions.
pub fn loss_div_s(pair: &CryptorPair, originals: &[Vec<f64>], p_enc: &Password, p_dec: &Password) -> Result<f64> {
    if originals.len() < 2 {
        return Err(Error::arg(format!("batch of {} is too small for same-password diversity", originals.len())));
    }
    let encs = originals.iter().map(|e| pair.encrypt(e, p_enc)).collect::<Result<Vec<_>>>()?;
    let decs = encs.iter().map(|e| pair.decrypt(e, p_dec)).collect::<Result<Vec<_>>>()?;
    Ok(pairwise_clamped_sum(&encs)? + pairwise_clamped_sum(&decs)?)
}

/// Weighted total from already-computed terms.
pub fn loss_total(terms: [f64; 5], w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    if let Some(t) = terms.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(Error::arg(format!("loss term {t} is not a finite non-negative value")));
    }
    Ok(LossBreakdown::from_terms(terms[0], terms[1], terms[2], terms[3], terms[4], w))
}
