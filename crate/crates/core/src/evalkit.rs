//! Evaluation metrics. Every similarity reported here is the raw
//! (unclamped) cosine.

use serde::{Deserialize, Serialize};

use crate::cryptor::{generate_password, CryptorPair, EmbeddingCipher, Password};
use crate::encoders::{EncoderId, EncoderModel, Encoding};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numgrad::cos_sim_raw;
use crate::shield::{eval_distortions, make_targets, protect_image, AttackConfig, AttackReport, EvalDistortion};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", a.tensor().shape(), b.tensor().shape()),
        ));
    }
    let (x, y) = (a.tensor().data(), b.tensor().data());
    let mse = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((20.0 * (1.0 / mse.sqrt()).log10()).min(PSNR_CAP))
}

/// Raw cosine between two encodings; mean row cosine for token matrices.
pub fn encoding_similarity(a: &Encoding, b: &Encoding) -> Result<f64> {
    let (ra, rb) = (a.rows(), b.rows());
    if ra.len() != rb.len() {
        return Err(Error::shape("encoding_similarity", format!("{} vs {} rows", ra.len(), rb.len())));
    }
    let mut total = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        total += cos_sim_raw(x, y)?;
    }
    Ok(total / ra.len() as f64)
}

/// Per-pair similarities between originals and (optionally distorted)
/// protected images.
pub fn protection_similarities(
    originals: &[Image],
    protected: &[Image],
    encoder: &EncoderModel,
    distortion: Option<EvalDistortion>,
    seed: u64,
) -> Result<Vec<f64>> {
    if originals.len() != protected.len() {
        return Err(Error::arg(format!(
            "{} originals paired with {} protected images",
            originals.len(),
            protected.len()
        )));
    }
    originals
        .iter()
        .zip(protected)
        .enumerate()
        .map(|(i, (o, p))| {
            let p = match distortion {
                Some(kind) => eval_distortions(p, kind, seed.wrapping_add(i as u64))?,
                None => p.clone(),
            };
            encoding_similarity(&encoder.encode(o)?, &encoder.encode(&p)?)
        })
        .collect()
}

/// Mean of [`protection_similarities`].
pub fn protection_similarity(
    originals: &[Image],
    protected: &[Image],
    encoder: &EncoderModel,
    distortion: Option<EvalDistortion>,
    seed: u64,
) -> Result<f64> {
    if originals.is_empty() {
        return Err(Error::arg("no images to compare"));
    }
    Ok(mean(&protection_similarities(originals, protected, encoder, distortion, seed)?))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CryptorEffects {
    /// Mean `cos(Enc(e, p), e)`.
    pub encrypt_effect: f64,
    /// Mean `cos(Dec(Enc(e, p), p), e)`.
    pub decrypt_effect: f64,
    /// Mean pairwise cosine among encryptions of one embedding under
    /// different passwords.
    pub encrypt_diversity: f64,
    /// Mean pairwise cosine among wrong-password decryptions of one
    /// encryption.
    pub decrypt_diversity: f64,
}

/// Password `i` of embedding `k` in an evaluation run keyed by `seed`.
pub fn eval_password(seed: u64, k: usize, i: usize, dim: usize) -> Result<Password> {
    let key = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((k as u64) << 20)
        .wrapping_add(i as u64);
    generate_password(key, dim)
}

fn mean_pairwise(vs: &[Vec<f64>]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            total += cos_sim_raw(&vs[i], &vs[j])?;
            count += 1;
        }
    }
    Ok((total, count))
}

/// Effect and diversity metrics over `embeddings`, drawing
/// `n_passwords ≥ 3` passwords per embedding. Password 0 is the correct
/// one; every password produces an encryption (for the encryption effects
/// and diversity), and passwords `1..` decrypt the password-0 encryption
/// (for decryption diversity).
pub fn cryptor_effect_metrics<C: EmbeddingCipher + ?Sized>(
    cipher: &C,
    embeddings: &[Vec<f64>],
    n_passwords: usize,
    seed: u64,
) -> Result<CryptorEffects> {
    if embeddings.is_empty() {
        return Err(Error::arg("no embeddings to evaluate"));
    }
    if n_passwords < 3 {
        return Err(Error::arg(format!("need at least 3 passwords per embedding, got {n_passwords}")));
    }
    let (mut enc_eff, mut dec_eff, mut n_eff) = (0.0, 0.0, 0usize);
    let (mut enc_div, mut n_enc_div, mut dec_div, mut n_dec_div) = (0.0, 0usize, 0.0, 0usize);
    for (k, e) in embeddings.iter().enumerate() {
        let passwords = (0..n_passwords)
            .map(|i| eval_password(seed, k, i, e.len()))
            .collect::<Result<Vec<_>>>()?;
        let mut encs = Vec::with_capacity(n_passwords);
        for p in &passwords {
            let c = cipher.encrypt(e, p)?;
            enc_eff += cos_sim_raw(&c, e)?;
            dec_eff += cos_sim_raw(&cipher.decrypt(&c, p)?, e)?;
            n_eff += 1;
            encs.push(c);
        }
        let (s, c) = mean_pairwise(&encs)?;
        enc_div += s;
        n_enc_div += c;
        let wrong = passwords[1..]
            .iter()
            .map(|p| cipher.decrypt(&encs[0], p))
            .collect::<Result<Vec<_>>>()?;
        let (s, c) = mean_pairwise(&wrong)?;
        dec_div += s;
        n_dec_div += c;
    }
    Ok(CryptorEffects {
        encrypt_effect: enc_eff / n_eff as f64,
        decrypt_effect: dec_eff / n_eff as f64,
        encrypt_diversity: enc_div / n_enc_div as f64,
        decrypt_diversity: dec_div / n_dec_div as f64,
    })
}

/// Mean `|cos(Enc(e, p), e)|` over the same passwords as
/// [`cryptor_effect_metrics`].
pub fn mean_abs_encrypt_effect<C: EmbeddingCipher + ?Sized>(
    cipher: &C,
    embeddings: &[Vec<f64>],
    n_passwords: usize,
    seed: u64,
) -> Result<f64> {
    if embeddings.is_empty() || n_passwords == 0 {
        return Err(Error::arg("no embeddings or passwords to evaluate"));
    }
    let mut total = 0.0;
    for (k, e) in embeddings.iter().enumerate() {
        for i in 0..n_passwords {
            let p = eval_password(seed, k, i, e.len())?;
            total += cos_sim_raw(&cipher.encrypt(e, &p)?, e)?.abs();
        }
    }
    Ok(total / (embeddings.len() * n_passwords) as f64)
}

/// Mean pairwise cosine, over unordered pairs, of encryptions of different
/// embeddings under one password.
pub fn diversity_same_pwd<C: EmbeddingCipher + ?Sized>(cipher: &C, embeddings: &[Vec<f64>], password: &Password) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::arg(format!("need at least 2 embeddings, got {}", embeddings.len())));
    }
    let encs = embeddings
        .iter()
        .map(|e| cipher.encrypt(e, password))
        .collect::<Result<Vec<_>>>()?;
    let (s, c) = mean_pairwise(&encs)?;
    Ok(s / c as f64)
}

/// Fraction of trials in which a random wrong password still recovers the
/// original (`cos ≥ threshold`). Trial `t` uses embedding `t mod len`.
pub fn wrong_dec_rate<C: EmbeddingCipher + ?Sized>(
    cipher: &C,
    embeddings: &[Vec<f64>],
    trials: usize,
    threshold: f64,
    seed: u64,
) -> Result<f64> {
    if trials == 0 || embeddings.is_empty() {
        return Err(Error::arg("wrong_dec_rate needs at least one trial and one embedding"));
    }
    let mut hits = 0usize;
    for t in 0..trials {
        let e = &embeddings[t % embeddings.len()];
        let correct = eval_password(seed, t, 0, e.len())?;
        let wrong = eval_password(seed, t, 1, e.len())?;
        let dec = cipher.decrypt(&cipher.encrypt(e, &correct)?, &wrong)?;
        if cos_sim_raw(&dec, e)? >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMode {
    /// Mean protected-vs-original similarity on the encoders attacked.
    pub specific: f64,
    /// Mean protected-vs-original similarity on the held-out encoder.
    pub unseen: f64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtAblation {
    /// Attacking only the single target encoder.
    pub single: AblationMode,
    /// Attacking every encoder jointly; the held-out encoder is then among
    /// the attacked ones.
    pub multi: AblationMode,
    pub images: usize,
}

/// Runs the attack once against `single_target` alone and once against all
/// `encoders`, and measures how much protection transfers to the encoder
/// `unseen` that the single-target run did not attack.
pub fn mt_ablation(
    images: &[Image],
    encoders: &[&EncoderModel],
    pairs: &[&CryptorPair],
    passwords: &[&Password],
    single_target: EncoderId,
    unseen: EncoderId,
    cfg: &AttackConfig,
) -> Result<MtAblation> {
    if encoders.len() < 2 {
        return Err(Error::Config("the ablation needs at least two encoders".into()));
    }
    if single_target == unseen {
        return Err(Error::Config("the unseen encoder must differ from the single target".into()));
    }
    if images.is_empty() {
        return Err(Error::arg("no images for the ablation"));
    }
    let find = |id: EncoderId| {
        encoders
            .iter()
            .position(|e| e.id() == id)
            .ok_or_else(|| Error::Config(format!("encoder {id} is not available")))
    };
    let (si, ui) = (find(single_target)?, find(unseen)?);

    let mut single = (0.0, 0.0, 0usize);
    let mut multi = (0.0, 0.0, 0usize);
    for (n, image) in images.iter().enumerate() {
        let cfg = AttackConfig {
            seed: cfg.seed.wrapping_add(n as u64),
            ..cfg.clone()
        };
        let targets = make_targets(image, &[encoders[si]], &[pairs[si]], &[passwords[si]])?;
        let (prot, report) = protect_image(image, &[encoders[si]], &targets, &cfg)?;
        single.0 += image_similarity(image, &prot, encoders[si])?;
        single.1 += image_similarity(image, &prot, encoders[ui])?;
        single.2 += usize::from(report.success);

        let targets = make_targets(image, encoders, pairs, passwords)?;
        let (prot, report) = protect_image(image, encoders, &targets, &cfg)?;
        let mut attacked = 0.0;
        for enc in encoders {
            attacked += image_similarity(image, &prot, enc)?;
        }
        multi.0 += attacked / encoders.len() as f64;
        multi.1 += image_similarity(image, &prot, encoders[ui])?;
        multi.2 += usize::from(report.success);
    }
    let n = images.len() as f64;
    let mode = |t: (f64, f64, usize)| AblationMode {
        specific: t.0 / n,
        unseen: t.1 / n,
        success_rate: t.2 as f64 / n,
    };
    Ok(MtAblation {
        single: mode(single),
        multi: mode(multi),
        images: images.len(),
    })
}

/// Raw similarity between the encodings of two images.
pub fn image_similarity(a: &Image, b: &Image, encoder: &EncoderModel) -> Result<f64> {
    encoding_similarity(&encoder.encode(a)?, &encoder.encode(b)?)
}

/// One table cell of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub encoder: Option<EncoderId>,
    pub distortion: Option<String>,
    pub value: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub records: Vec<MetricRecord>,
}

impl EvalSummary {
    pub fn push(&mut self, metric: &str, encoder: Option<EncoderId>, distortion: Option<&str>, value: f64, n: usize) {
        self.records.push(MetricRecord {
            metric: metric.to_string(),
            encoder,
            distortion: distortion.map(str::to_string),
            value,
            n,
        });
    }

    pub fn get(&self, metric: &str, encoder: Option<EncoderId>, distortion: Option<&str>) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.metric == metric && r.encoder == encoder && r.distortion.as_deref() == distortion)
            .map(|r| r.value)
    }

    pub fn extend(&mut self, other: EvalSummary) {
        self.records.extend(other.records);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Malformed {
                path: "<summary>".into(),
                detail: e.to_string(),
            }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }
}

/// Cryptor metrics for one encoder as summary records.
pub fn cryptor_summary<C: EmbeddingCipher + ?Sized>(
    cipher: &C,
    encoder: EncoderId,
    embeddings: &[Vec<f64>],
    seed: u64,
) -> Result<EvalSummary> {
    const PASSWORDS: usize = 4;
    const TRIALS: usize = 200;
    let fx = cryptor_effect_metrics(cipher, embeddings, PASSWORDS, seed)?;
    let n = embeddings.len();
    let mut s = EvalSummary::default();
    let id = Some(encoder);
    s.push("encrypt_effect", id, None, fx.encrypt_effect, n * PASSWORDS);
    s.push("encrypt_effect_abs", id, None, mean_abs_encrypt_effect(cipher, embeddings, PASSWORDS, seed)?, n * PASSWORDS);
    s.push("decrypt_effect", id, None, fx.decrypt_effect, n * PASSWORDS);
    s.push("encrypt_diversity", id, None, fx.encrypt_diversity, n * PASSWORDS * (PASSWORDS - 1) / 2);
    s.push("decrypt_diversity", id, None, fx.decrypt_diversity, n * (PASSWORDS - 1) * (PASSWORDS - 2) / 2);
    let fixed = eval_password(seed, usize::MAX, 0, embeddings[0].len())?;
    s.push("diversity_same_pwd", id, None, diversity_same_pwd(cipher, embeddings, &fixed)?, n * (n - 1) / 2);
    s.push("wrong_dec_rate", id, None, wrong_dec_rate(cipher, embeddings, TRIALS, 0.8, seed)?, TRIALS);
    Ok(s)
}

/// Attack outcome records for one protected set.
pub fn protection_summary(
    originals: &[Image],
    protected: &[Image],
    reports: &[AttackReport],
    encoders: &[&EncoderModel],
    seed: u64,
) -> Result<EvalSummary> {
    let mut s = EvalSummary::default();
    let n = originals.len();
    let psnrs = originals
        .iter()
        .zip(protected)
        .map(|(a, b)| psnr(a, b))
        .collect::<Result<Vec<_>>>()?;
    s.push("psnr_mean", None, None, mean(&psnrs), n);
    let succ = reports.iter().filter(|r| r.success).count();
    s.push("success_rate", None, None, succ as f64 / reports.len().max(1) as f64, reports.len());
    for enc in encoders {
        let id = Some(enc.id());
        s.push("protection_similarity", id, Some("clean"), protection_similarity(originals, protected, enc, None, seed)?, n);
        for kind in EvalDistortion::ALL {
            let v = protection_similarity(originals, protected, enc, Some(kind), seed)?;
            s.push("protection_similarity", id, Some(kind.as_str()), v, n);
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cryptor::DEFAULT_TOKENS;
    use crate::dataset::gen_toy_dataset;
    use crate::numgrad::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Identity;

    impl EmbeddingCipher for Identity {
        fn encrypt(&self, e: &[f64], _p: &Password) -> Result<Vec<f64>> {
            Ok(e.to_vec())
        }
        fn decrypt(&self, e: &[f64], _p: &Password) -> Result<Vec<f64>> {
            Ok(e.to_vec())
        }
    }

    fn dot_cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn random_embeddings(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Tensor::randn(&[d], 1.0, &mut rng).into_data()).collect()
    }

    fn image(v: f64) -> Image {
        Image::new(Tensor::full(&[8, 8, 3], v)).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = image(0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = image(0.5 + 1.0 / 255.0);
        assert!((psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-3);
        let c = image(0.5 + 11.0 / 255.0);
        assert!((psnr(&a, &c).unwrap() - 20.0 * (255.0f64 / 11.0).log10()).abs() < 1e-9);
        assert!((psnr(&a, &c).unwrap() - 27.30).abs() < 5e-3);
        assert!(psnr(&a, &Image::new(Tensor::full(&[4, 8, 3], 0.5)).unwrap()).is_err());
    }

    #[test]
    fn identity_cipher_is_degenerate() {
        let es = random_embeddings(6, 16, 1);
        let fx = cryptor_effect_metrics(&Identity, &es, 4, 0).unwrap();
        for v in [fx.encrypt_effect, fx.decrypt_effect, fx.encrypt_diversity, fx.decrypt_diversity] {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert_eq!(wrong_dec_rate(&Identity, &es, 20, 0.8, 0).unwrap(), 1.0);
        assert_eq!(wrong_dec_rate(&Identity, &es, 20, 0.0, 0).unwrap(), 1.0);
        let same = vec![es[0].clone(); 5];
        assert!((diversity_same_pwd(&Identity, &same, &eval_password(0, 0, 0, 16).unwrap()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn effect_metrics_match_brute_force() {
        let pair = CryptorPair::new(EncoderId::FaceA, 16, DEFAULT_TOKENS, 4).unwrap();
        let es = random_embeddings(5, 16, 2);
        let (n_pw, seed) = (4, 9);
        let fx = cryptor_effect_metrics(&pair, &es, n_pw, seed).unwrap();
        let abs = mean_abs_encrypt_effect(&pair, &es, n_pw, seed).unwrap();

        let (mut ee, mut ea, mut de, mut ediv, mut ddiv) = (vec![], vec![], vec![], vec![], vec![]);
        for (k, e) in es.iter().enumerate() {
            let pws: Vec<Password> = (0..n_pw).map(|i| eval_password(seed, k, i, 16).unwrap()).collect();
            let encs: Vec<Vec<f64>> = pws.iter().map(|p| pair.enc.forward(e, &p.vector).unwrap()).collect();
            for (c, p) in encs.iter().zip(&pws) {
                ee.push(dot_cos(c, e));
                ea.push(dot_cos(c, e).abs());
                de.push(dot_cos(&pair.dec.forward(c, &p.vector).unwrap(), e));
            }
            for i in 0..n_pw {
                for j in 0..n_pw {
                    if i < j {
                        ediv.push(dot_cos(&encs[i], &encs[j]));
                    }
                }
            }
            let wrong: Vec<Vec<f64>> = pws[1..].iter().map(|p| pair.dec.forward(&encs[0], &p.vector).unwrap()).collect();
            for i in 0..wrong.len() {
                for j in 0..i {
                    ddiv.push(dot_cos(&wrong[i], &wrong[j]));
                }
            }
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((fx.encrypt_effect - avg(&ee)).abs() < 1e-9);
        assert!((abs - avg(&ea)).abs() < 1e-9);
        assert!((fx.decrypt_effect - avg(&de)).abs() < 1e-9);
        assert!((fx.encrypt_diversity - avg(&ediv)).abs() < 1e-9);
        assert!((fx.decrypt_diversity - avg(&ddiv)).abs() < 1e-9);
    }

    #[test]
    fn same_password_diversity_matches_brute_force() {
        let pair = CryptorPair::new(EncoderId::FaceA, 16, DEFAULT_TOKENS, 5).unwrap();
        let es = random_embeddings(7, 16, 3);
        let p = eval_password(1, 2, 3, 16).unwrap();
        let encs: Vec<Vec<f64>> = es.iter().map(|e| pair.enc.forward(e, &p.vector).unwrap()).collect();
        let (mut total, mut count) = (0.0, 0);
        for i in 0..encs.len() {
            for j in 0..encs.len() {
                if i != j {
                    total += dot_cos(&encs[i], &encs[j]);
                    count += 1;
                }
            }
        }
        assert!((diversity_same_pwd(&pair, &es, &p).unwrap() - total / count as f64).abs() < 1e-9);
        assert!(diversity_same_pwd(&pair, &es[..1], &p).is_err());
    }

    #[test]
    fn wrong_dec_rate_matches_counting() {
        let pair = CryptorPair::new(EncoderId::FaceA, 16, DEFAULT_TOKENS, 6).unwrap();
        let es = random_embeddings(4, 16, 4);
        let (trials, seed) = (30, 12);
        for threshold in [-1.0, 0.0, 0.2, 0.8] {
            let mut hits = 0;
            for t in 0..trials {
                let e = &es[t % es.len()];
                let c = pair.enc.forward(e, &eval_password(seed, t, 0, 16).unwrap().vector).unwrap();
                let d = pair.dec.forward(&c, &eval_password(seed, t, 1, 16).unwrap().vector).unwrap();
                if dot_cos(&d, e) >= threshold {
                    hits += 1;
                }
            }
            let rate = wrong_dec_rate(&pair, &es, trials, threshold, seed).unwrap();
            assert!((rate - hits as f64 / trials as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn protection_similarity_matches_direct_encoding() {
        let enc = EncoderModel::new(EncoderId::ClipHidden, 7);
        let a = gen_toy_dataset(3, 3, 64).unwrap();
        let b = gen_toy_dataset(4, 3, 64).unwrap();
        let got = protection_similarities(&a, &b, &enc, None, 0).unwrap();
        for ((x, y), v) in a.iter().zip(&b).zip(&got) {
            let (ex, ey) = (enc.encode(x).unwrap().rows(), enc.encode(y).unwrap().rows());
            let want = ex.iter().zip(&ey).map(|(r, s)| dot_cos(r, s)).sum::<f64>() / ex.len() as f64;
            assert!((v - want).abs() < 1e-9);
        }
        let same = protection_similarity(&a, &a, &enc, None, 0).unwrap();
        assert!((same - 1.0).abs() < 1e-12);
        assert!(protection_similarity(&a, &b[..2], &enc, None, 0).is_err());
    }

    #[test]
    fn unrelated_images_are_dissimilar_on_average() {
        let imgs = gen_toy_dataset(11, 20, 64).unwrap();
        for id in [EncoderId::FaceA, EncoderId::FaceB, EncoderId::ClipPooled] {
            let enc = EncoderModel::new(id, 7);
            let sims = protection_similarities(&imgs[..10], &imgs[10..], &enc, None, 0).unwrap();
            let m = sims.iter().map(|s| s.abs()).sum::<f64>() / sims.len() as f64;
            assert!(m < 0.5, "{id}: mean |cos| {m}");
        }
    }

    #[test]
    fn summary_round_trips_through_jsonl() {
        let mut s = EvalSummary::default();
        s.push("psnr_mean", None, None, 31.5, 10);
        s.push("protection_similarity", Some(EncoderId::FaceB), Some("jpeg"), 0.25, 10);
        let back = EvalSummary::from_jsonl(&s.to_jsonl()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.get("protection_similarity", Some(EncoderId::FaceB), Some("jpeg")), Some(0.25));
        assert_eq!(back.get("protection_similarity", Some(EncoderId::FaceA), Some("jpeg")), None);
        assert!(EvalSummary::from_jsonl("{not json").is_err());
    }

    #[test]
    fn cryptor_summary_is_deterministic() {
        let pair = CryptorPair::new(EncoderId::FaceA, 16, DEFAULT_TOKENS, 7).unwrap();
        let es = random_embeddings(4, 16, 5);
        let a = cryptor_summary(&pair, EncoderId::FaceA, &es, 1).unwrap();
        let b = cryptor_summary(&pair, EncoderId::FaceA, &es, 1).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(a.records.len(), 7);
    }
}
