//! Persistence: checkpoints, password files, PNG images and project
//! configuration.
//!
//! Checkpoint layout: the 8-byte magic `SHKCKPT\0`, a little-endian `u32`
//! format version, a little-endian `u64` header length, the JSON header,
//! then every parameter of the encryptor followed by every parameter of the
//! decryptor as little-endian `f64`, in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cryptor::{CryptorNet, CryptorPair, Password, Role};
use crate::encoders::EncoderId;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numgrad::Tensor;
use crate::params::ParamSet;
use crate::shield::AttackConfig;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SHKCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub encoder_id: EncoderId,
    pub tokens: usize,
    pub encryptor: Vec<TensorEntry>,
    pub decryptor: Vec<TensorEntry>,
    pub train_seed: u64,
    pub config_fingerprint: String,
}

impl CheckpointHeader {
    fn payload_len(&self) -> usize {
        self.encryptor
            .iter()
            .chain(&self.decryptor)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }
}

fn entries(params: &ParamSet) -> Vec<TensorEntry> {
    params
        .iter()
        .map(|(n, t)| TensorEntry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

/// Serializes a pair into checkpoint bytes.
pub fn encode_checkpoint(pair: &CryptorPair, train_seed: u64) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        encoder_id: pair.encoder_id,
        tokens: pair.enc.tokens,
        encryptor: entries(&pair.enc.params),
        decryptor: entries(&pair.dec.params),
        train_seed,
        config_fingerprint: pair.train_fingerprint.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * header.payload_len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in pair.enc.params.iter().chain(pair.dec.params.iter()) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(CryptorPair, CheckpointHeader)> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    let malformed = |detail: String| Error::Malformed {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        if bytes.len() < 8 && CHECKPOINT_MAGIC.starts_with(bytes) {
            return Err(truncated(format!("{} bytes, shorter than the magic", bytes.len())));
        }
        return Err(malformed("missing checkpoint magic".into()));
    }
    if bytes.len() < 20 {
        return Err(truncated(format!("{} bytes, shorter than the fixed preamble", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(truncated(format!("header needs {header_len} bytes, {} present", body.len())));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..header_len]).map_err(|e| malformed(format!("header: {e}")))?;
    if header.format_version != version {
        return Err(malformed(format!(
            "header version {} disagrees with preamble version {version}",
            header.format_version
        )));
    }
    let payload = &body[header_len..];
    let want = header.payload_len() * 8;
    if payload.len() < want {
        return Err(truncated(format!("payload needs {want} bytes, {} present", payload.len())));
    }
    if payload.len() > want {
        return Err(malformed(format!("{} trailing bytes after the payload", payload.len() - want)));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read = |list: &[TensorEntry]| -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        for e in list {
            let n: usize = e.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            ps.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(ps)
    };
    let enc = read(&header.encryptor)?;
    let dec = read(&header.decryptor)?;
    let wrap = |e: Error| malformed(e.to_string());
    let pair = CryptorPair {
        encoder_id: header.encoder_id,
        enc: CryptorNet::from_params(Role::Encryptor, header.encoder_id, header.tokens, enc).map_err(wrap)?,
        dec: CryptorNet::from_params(Role::Decryptor, header.encoder_id, header.tokens, dec).map_err(wrap)?,
        train_fingerprint: header.config_fingerprint.clone(),
    };
    Ok((pair, header))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, pair: &CryptorPair, train_seed: u64) -> Result<()> {
    write_bytes(path, &encode_checkpoint(pair, train_seed))
}

pub fn load_checkpoint(path: &Path) -> Result<(CryptorPair, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[derive(Serialize, Deserialize)]
struct PasswordRecord {
    seed: u64,
    dim: usize,
    /// Little-endian `f64` values, hex encoded.
    vector: String,
}

pub fn encode_password(p: &Password) -> String {
    let bytes: Vec<u8> = p.vector.iter().flat_map(|v| v.to_le_bytes()).collect();
    let rec = PasswordRecord {
        seed: p.seed,
        dim: p.dim(),
        vector: hex::encode(bytes),
    };
    toml::to_string(&rec).expect("password record serializes")
}

pub fn decode_password(text: &str, path: &Path) -> Result<Password> {
    let malformed = |detail: String| Error::Malformed {
        path: path.to_path_buf(),
        detail,
    };
    let rec: PasswordRecord = toml::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let bytes = hex::decode(&rec.vector).map_err(|e| malformed(format!("vector: {e}")))?;
    if bytes.len() != rec.dim * 8 {
        return Err(malformed(format!("vector has {} bytes, dim {} needs {}", bytes.len(), rec.dim, rec.dim * 8)));
    }
    let vector = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Password { seed: rec.seed, vector })
}

pub fn save_password(path: &Path, p: &Password) -> Result<()> {
    write_bytes(path, encode_password(p).as_bytes())
}

pub fn load_password(path: &Path) -> Result<Password> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_password(&text, path)
}

/// Writes an 8-bit RGB PNG of the quantized image.
pub fn save_png(path: &Path, image: &Image) -> Result<()> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let buf = ::image::RgbImage::from_raw(w, h, image.to_rgb8()).expect("buffer matches dimensions");
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), ::image::ImageFormat::Png)
        .map_err(|e| Error::Codec(format!("PNG encode {}: {e}", path.display())))?;
    write_bytes(path, &bytes)
}

pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = ::image::load_from_memory(&bytes)
        .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
}

/// Loads every `.png` in `dir`, sorted by file name, requiring
/// `resolution × resolution` pixels.
pub fn load_image_dir(dir: &Path, resolution: usize) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let im = load_png(p)?;
            if im.width() != resolution || im.height() != resolution {
                return Err(Error::Config(format!(
                    "{} is {}x{}, expected {resolution}x{resolution}",
                    p.display(),
                    im.width(),
                    im.height()
                )));
            }
            Ok(im)
        })
        .collect()
}

/// Writes text, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub count: usize,
    pub test_seed: u64,
    pub test_count: usize,
    pub resolution: usize,
    /// Train from PNG files in this directory instead of synthetic images.
    pub image_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            count: 500,
            test_seed: 2,
            test_count: 50,
            resolution: 64,
            image_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    /// Seed of every frozen encoder.
    pub encoder_seed: u64,
    /// Encoders protected by default.
    pub encoders: Vec<EncoderId>,
    pub password_seed: u64,
    pub dataset: DatasetConfig,
    /// Per-encoder overrides; missing encoders use their defaults.
    pub train: BTreeMap<EncoderId, TrainConfig>,
    pub attack: AttackConfig,
    pub out_dir: PathBuf,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            encoder_seed: 7,
            encoders: vec![EncoderId::FaceA, EncoderId::FaceB],
            password_seed: 42,
            dataset: DatasetConfig::default(),
            train: BTreeMap::new(),
            attack: AttackConfig::face(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ProjectConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::Config("at least one encoder must be listed".into()));
        }
        if self.dataset.count == 0 || self.dataset.test_count == 0 {
            return Err(Error::Config("dataset counts must be positive".into()));
        }
        for (id, t) in &self.train {
            if t.encoder_id != *id {
                return Err(Error::Config(format!("train.{id} has encoder_id {}", t.encoder_id)));
            }
            t.validate()?;
        }
        self.attack.validate()
    }

    /// Training configuration for `id`, seeded from the project.
    pub fn train_config(&self, id: EncoderId) -> TrainConfig {
        self.train.get(&id).cloned().unwrap_or_else(|| TrainConfig::for_encoder(id))
    }

    pub fn checkpoint_path(&self, id: EncoderId) -> PathBuf {
        self.out_dir.join("checkpoints").join(format!("{id}.ckpt"))
    }

    /// Password file for `id`; every encoder's password derives from
    /// `password_seed` at that encoder's dimension.
    pub fn password_path(&self, id: EncoderId) -> PathBuf {
        self.out_dir.join("passwords").join(format!("{id}.toml"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cryptor::{generate_password, DEFAULT_TOKENS};
    use crate::dataset::gen_toy_dataset;

    fn pair() -> CryptorPair {
        let mut p = CryptorPair::new(EncoderId::FaceB, 64, DEFAULT_TOKENS, 3).unwrap();
        p.train_fingerprint = "abc123".into();
        p
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/face_b.ckpt");
        let p = pair();
        save_checkpoint(&path, &p, 17).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(header.train_seed, 17);
        assert_eq!(header.encoder_id, EncoderId::FaceB);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes, encode_checkpoint(&back, 17));
        let e = vec![0.25; 64];
        let pw = generate_password(1, 64).unwrap();
        assert_eq!(back.encrypt(&e, &pw).unwrap(), p.encrypt(&e, &pw).unwrap());
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let bytes = encode_checkpoint(&pair(), 0);
        let path = Path::new("x.ckpt");
        let mut bad_version = bytes.clone();
        bad_version[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bad_version, path), Err(Error::Version { found: 7, .. })));
        for cut in [3, 15, 40, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut], path), Err(Error::Truncated { .. })),
                "cut at {cut}"
            );
        }
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad_magic, path), Err(Error::Malformed { .. })));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(decode_checkpoint(&trailing, path), Err(Error::Malformed { .. })));
        let mut corrupt_header = bytes;
        corrupt_header[21] = b'!';
        assert!(matches!(decode_checkpoint(&corrupt_header, path), Err(Error::Malformed { .. })));
        assert!(matches!(load_checkpoint(Path::new("/nonexistent/x.ckpt")), Err(Error::Io { .. })));
    }

    #[test]
    fn password_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pw.toml");
        let p = generate_password(42, 96).unwrap();
        save_password(&path, &p).unwrap();
        assert_eq!(load_password(&path).unwrap(), p);
        let text = fs::read_to_string(&path).unwrap().replace("dim = 96", "dim = 95");
        assert!(matches!(decode_password(&text, &path), Err(Error::Malformed { .. })));
        assert!(decode_password("seed = 1", &path).is_err());
    }

    #[test]
    fn png_round_trip_equals_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let im = gen_toy_dataset(4, 1, 64).unwrap().remove(0);
        let noisy = Image::from_clamped(im.tensor().map(|v| v + 0.0013)).unwrap();
        save_png(&path, &noisy).unwrap();
        assert_eq!(load_png(&path).unwrap(), noisy.quantized());
        assert!(matches!(load_png(&dir.path().join("missing.png")), Err(Error::Io { .. })));
        fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
        assert!(matches!(load_png(&dir.path().join("junk.png")), Err(Error::Codec(_))));
    }

    #[test]
    fn image_dir_loads_sorted_and_checks_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let ims = gen_toy_dataset(5, 3, 64).unwrap();
        for (i, im) in ims.iter().enumerate().rev() {
            save_png(&dir.path().join(format!("{i:02}.png")), im).unwrap();
        }
        assert_eq!(load_image_dir(dir.path(), 64).unwrap(), ims);
        assert!(load_image_dir(dir.path(), 32).is_err());
    }

    #[test]
    fn project_config_round_trips_through_toml() {
        let mut cfg = ProjectConfig::default();
        cfg.train.insert(EncoderId::FaceA, TrainConfig {
            steps: 10,
            ..TrainConfig::for_encoder(EncoderId::FaceA)
        });
        let text = cfg.to_toml();
        assert_eq!(ProjectConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(ProjectConfig::from_toml("").unwrap(), ProjectConfig::default());
        assert!(ProjectConfig::from_toml("bogus = 1").is_err());
        assert!(ProjectConfig::from_toml("encoders = []").is_err());
        assert_eq!(cfg.train_config(EncoderId::FaceA).steps, 10);
        assert_eq!(cfg.train_config(EncoderId::FaceB).steps, 3000);
    }
}
