//! Single-file checkpoints and the preset registry.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic "DCLP" | version u32 | config_len u64 | config JSON
//! | vocab_len u64 | vocab JSON | sha256(vocab JSON)
//! | tensor_count u64
//! |   per tensor: name_len u64, name, ndim u64, dims u64…, byte offset u64
//! | payload_len u64 | payload (f32 LE)
//! | sha256(everything above)
//! ```
//!
//! The embedded config alone rebuilds the model skeleton; the embedded
//! vocab makes the file self-contained for text encoding. Values are
//! stored as raw f32 bits, so a save/load roundtrip reproduces forward
//! outputs bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoders::{tiny_config, DualEncoder, ImageTowerConfig, ModelConfig, TextTowerConfig};
use crate::error::{Error, Result};
use crate::nn::{Visit, VisitMut};
use crate::tokenizer::Vocab;
use crate::vision::ImageSpec;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCLP";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Collect {
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Visit<f32> for Collect {
    fn leaf(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.tensors
            .push((name.to_string(), shape.to_vec(), data.to_vec()));
    }
}

/// Serializes the model and its vocabulary into one self-describing file.
pub fn save_checkpoint(model: &DualEncoder<f32>, vocab: &Vocab, path: &Path) -> Result<()> {
    let mut collect = Collect {
        tensors: Vec::new(),
    };
    model.visit(&mut collect);

    let config_json = serde_json::to_vec(&model.config)?;
    let vocab_json = vocab.to_json().into_bytes();
    let vocab_sha: [u8; 32] = Sha256::digest(&vocab_json).into();

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(vocab_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&vocab_json);
    out.extend_from_slice(&vocab_sha);

    out.extend_from_slice(&(collect.tensors.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, data) in &collect.tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (data.len() * 4) as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, _, data) in &collect.tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    fs::write(path, out)?;
    Ok(())
}

/// A loaded model plus the vocabulary it was saved with.
pub struct LoadedCheckpoint {
    pub model: DualEncoder<f32>,
    pub vocab: Vocab,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedCheckpoint(format!(
                "file ends inside {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Fill {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    error: Option<Error>,
}

impl VisitMut<f32> for Fill {
    fn leaf(&mut self, name: &str, shape: &[usize], data: &mut [f32]) {
        if self.error.is_some() {
            return;
        }
        match self.tensors.remove(name) {
            None => {
                self.error = Some(Error::BadTensor {
                    name: name.to_string(),
                    reason: "missing from checkpoint".into(),
                });
            }
            Some((file_shape, values)) => {
                if file_shape != shape {
                    self.error = Some(Error::BadTensor {
                        name: name.to_string(),
                        reason: format!("shape {file_shape:?} does not match model {shape:?}"),
                    });
                    return;
                }
                data.copy_from_slice(&values);
            }
        }
    }
}

/// Reads and validates a checkpoint, rebuilding the model from its
/// embedded config and filling every tensor from the payload.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let buf = fs::read(path)?;
    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
    };

    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnknownVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }

    let config_len = cur.u64("config length")? as usize;
    let config_json = cur.take(config_len, "config")?;
    let vocab_len = cur.u64("vocab length")? as usize;
    let vocab_json = cur.take(vocab_len, "vocab")?;
    let vocab_sha = cur.take(32, "vocab hash")?;

    let tensor_count = cur.u64("tensor count")? as usize;
    let mut index: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name_len = cur.u64("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| Error::TruncatedCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u64("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64("tensor dim")? as usize);
        }
        let offset = cur.u64("tensor offset")?;
        index.push((name, shape, offset));
    }
    let payload_len = cur.u64("payload length")? as usize;
    let payload = cur.take(payload_len, "payload")?;
    let checksum = cur.take(32, "checksum")?;
    if cur.pos != buf.len() {
        return Err(Error::TruncatedCheckpoint(format!(
            "{} unexpected trailing bytes",
            buf.len() - cur.pos
        )));
    }

    let digest: [u8; 32] = Sha256::digest(&buf[..buf.len() - 32]).into();
    if digest != checksum {
        return Err(Error::ChecksumMismatch);
    }
    let vdigest: [u8; 32] = Sha256::digest(vocab_json).into();
    if vdigest != vocab_sha {
        return Err(Error::MalformedVocab(
            "embedded vocabulary does not match its stored hash".into(),
        ));
    }

    let config: ModelConfig = serde_json::from_slice(config_json)?;
    let vocab = Vocab::from_json(std::str::from_utf8(vocab_json).map_err(|_| {
        Error::MalformedVocab("embedded vocabulary is not UTF-8".into())
    })?)?;

    // Slice the payload by the index, checking extents exactly.
    let mut tensors = BTreeMap::new();
    for (name, shape, offset) in index {
        let count: usize = shape.iter().product();
        let bytes = count * 4;
        let start = offset as usize;
        if start + bytes > payload.len() {
            return Err(Error::BadTensor {
                name,
                reason: format!(
                    "extent [{start}, {}) exceeds payload of {} bytes",
                    start + bytes,
                    payload.len()
                ),
            });
        }
        let values: Vec<f32> = payload[start..start + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (shape, values)).is_some() {
            return Err(Error::BadTensor {
                name,
                reason: "duplicate tensor entry".into(),
            });
        }
    }

    let mut model = DualEncoder::<f32>::zeroed(config)?;
    let mut fill = Fill {
        tensors,
        error: None,
    };
    model.visit_mut(&mut fill);
    if let Some(e) = fill.error {
        return Err(e);
    }
    if let Some((name, _)) = fill.tensors.into_iter().next() {
        return Err(Error::BadTensor {
            name,
            reason: "not part of this model architecture".into(),
        });
    }

    Ok(LoadedCheckpoint { model, vocab })
}

/// The named model configurations this build knows how to construct.
#[derive(Debug, Clone)]
pub struct PresetRegistry {
    entries: Vec<(&'static str, ModelConfig)>,
}

fn preset(
    name: &str,
    text_width: usize,
    text_heads: usize,
    image_layers: usize,
    image_width: usize,
    image_heads: usize,
    resolution: usize,
    patch: usize,
) -> ModelConfig {
    ModelConfig {
        text: TextTowerConfig {
            context_length: 77,
            layers: 12,
            width: text_width,
            heads: text_heads,
            vocab_size: 49408,
        },
        image: ImageTowerConfig {
            spec: ImageSpec::new(resolution, patch).expect("divisible preset geometry"),
            layers: image_layers,
            width: image_width,
            heads: image_heads,
        },
        joint_dim: text_width,
        preset_name: name.to_string(),
        adapter: false,
    }
}

impl PresetRegistry {
    /// The tiny test preset plus the six published model names.
    pub fn standard() -> Self {
        let base = |name: &'static str, res: usize, patch: usize| {
            (name, preset(name, 512, 8, 12, 768, 12, res, patch))
        };
        let large = |name: &'static str, res: usize, patch: usize| {
            (name, preset(name, 768, 12, 24, 1024, 16, res, patch))
        };
        PresetRegistry {
            entries: vec![
                ("tiny", tiny_config()),
                base("vit-base-patch16-224", 224, 16),
                base("vit-base-patch32-224", 224, 32),
                base("vit-base-patch32-384", 384, 32),
                base("vit-base-patch16-384", 384, 16),
                large("vit-large-patch14-224", 224, 14),
                large("vit-large-patch14-336", 336, 14),
            ],
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn resolve(&self, name: &str) -> Result<ModelConfig> {
        if let Some((_, cfg)) = self.entries.iter().find(|(n, _)| *n == name) {
            return Ok(cfg.clone());
        }
        let mut ranked: Vec<(usize, &'static str)> = self
            .entries
            .iter()
            .map(|(n, _)| (edit_distance(name, n), *n))
            .collect();
        ranked.sort();
        Err(Error::UnknownPreset {
            name: name.to_string(),
            suggestions: ranked.iter().take(3).map(|(_, n)| n.to_string()).collect(),
        })
    }
}

pub fn resolve_preset(name: &str) -> Result<ModelConfig> {
    PresetRegistry::standard().resolve(name)
}

pub fn preset_names() -> Vec<&'static str> {
    PresetRegistry::standard().names()
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{build_vocab, TokenBatch};
    use crate::vision::{patch_grid, ImageBatch};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use tempfile::TempDir;

    fn fixture() -> (DualEncoder<f32>, Vocab) {
        let model = DualEncoder::<f32>::init(tiny_config(), 21).unwrap();
        let vocab = build_vocab(&["кот спит", "пёс бежит", "дом на горе"], 270).unwrap();
        (model, vocab)
    }

    fn patch_and_rehash(bytes: &mut Vec<u8>, at: usize, value: u8) {
        bytes[at] = value;
        let n = bytes.len();
        let digest: [u8; 32] = Sha256::digest(&bytes[..n - 32]).into();
        bytes[n - 32..].copy_from_slice(&digest);
    }

    #[test]
    fn roundtrip_reproduces_embeddings_bitwise() {
        let (model, vocab) = fixture();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.dclp");
        save_checkpoint(&model, &vocab, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let tokens = TokenBatch::encode(&["кот спит", "дом"], &vocab, 16).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let spec = model.config.image.spec.clone();
        let px = Array4::from_shape_simple_fn((2, 3, 32, 32), || rng.gen_range(-1.0f32..1.0));
        let images = ImageBatch::from_pixels(px, spec);

        let t1 = model.encode_text(&tokens).unwrap();
        let t2 = loaded.model.encode_text(&tokens).unwrap();
        assert_eq!(t1.vectors, t2.vectors);
        let i1 = model.encode_image(&images).unwrap();
        let i2 = loaded.model.encode_image(&images).unwrap();
        assert_eq!(i1.vectors, i2.vectors);
        assert_eq!(loaded.vocab.to_json(), vocab.to_json());
        assert_eq!(loaded.model.log_scale, model.log_scale);
    }

    #[test]
    fn roundtrip_keeps_adapter_weights() {
        let (mut model, vocab) = fixture();
        model.attach_adapter();
        // Make the adapter non-trivial so the roundtrip actually checks it.
        if let Some(a) = model.adapter.as_mut() {
            a.fc1.weight[[0, 1]] = 0.25;
        }
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.dclp");
        save_checkpoint(&model, &vocab, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.model.config.adapter);
        assert_eq!(
            loaded.model.adapter.as_ref().unwrap().fc1.weight[[0, 1]],
            0.25
        );
    }

    #[test]
    fn payload_corruption_is_detected() {
        let (model, vocab) = fixture();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.dclp");
        save_checkpoint(&model, &vocab, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let at = bytes.len() - 40; // inside the payload, before the checksum
        bytes[at] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::ChecksumMismatch)
        ));
    }

    #[test]
    fn wrong_magic_and_future_version_are_distinct() {
        let (model, vocab) = fixture();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.dclp");
        save_checkpoint(&model, &vocab, &path).unwrap();
        let original = std::fs::read(&path).unwrap();

        let mut bad_magic = original.clone();
        patch_and_rehash(&mut bad_magic, 0, b'X');
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic)));

        let mut future = original.clone();
        patch_and_rehash(&mut future, 4, (CHECKPOINT_VERSION + 1) as u8);
        std::fs::write(&path, &future).unwrap();
        match load_checkpoint(&path) {
            Err(Error::UnknownVersion { found, supported }) => {
                assert_eq!(found, CHECKPOINT_VERSION + 1);
                assert_eq!(supported, CHECKPOINT_VERSION);
            }
            Ok(_) => panic!("expected UnknownVersion, load succeeded"),
            Err(other) => panic!("expected UnknownVersion, got {other}"),
        }
    }

    #[test]
    fn truncation_is_reported_as_truncation() {
        let (model, vocab) = fixture();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.dclp");
        save_checkpoint(&model, &vocab, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::TruncatedCheckpoint(_))
        ));
    }

    #[test]
    fn presets_resolve_with_published_dimensions() {
        let base = resolve_preset("vit-base-patch16-224").unwrap();
        assert_eq!(
            (
                base.text.context_length,
                base.text.layers,
                base.text.width,
                base.text.heads
            ),
            (77, 12, 512, 8)
        );
        assert_eq!(base.image.spec.resolution, 224);
        assert_eq!(base.image.spec.patch_size, 16);
        assert_eq!(base.joint_dim, 512);

        let large = resolve_preset("vit-large-patch14-336").unwrap();
        assert_eq!(
            (
                large.text.context_length,
                large.text.layers,
                large.text.width,
                large.text.heads
            ),
            (77, 12, 768, 12)
        );
        assert_eq!((large.image.layers, large.image.width, large.image.heads), (24, 1024, 16));
        assert_eq!(large.image.spec.resolution, 336);
        assert_eq!(large.image.spec.patch_size, 14);

        for name in preset_names() {
            assert!(PresetRegistry::standard().resolve(name).is_ok());
        }
        assert_eq!(preset_names().len(), 7);
    }

    #[test]
    fn preset_grid_arithmetic_matches() {
        let cfg = resolve_preset("vit-base-patch32-384").unwrap();
        let grid = patch_grid(&cfg.image.spec).unwrap();
        assert_eq!(grid.patches_per_side, 12);
        assert_eq!(grid.patches_per_side * grid.patches_per_side, 144);
        assert_eq!(grid.sequence_length, 145);
    }

    #[test]
    fn unknown_preset_suggests_neighbors() {
        match resolve_preset("vit-huge") {
            Err(Error::UnknownPreset { name, suggestions }) => {
                assert_eq!(name, "vit-huge");
                assert_eq!(suggestions.len(), 3);
                assert!(suggestions.iter().all(|s| s.starts_with("vit-") || s == "tiny"));
            }
            Ok(_) => panic!("expected UnknownPreset, resolve succeeded"),
            Err(other) => panic!("expected UnknownPreset, got {other}"),
        }
    }

    #[test]
    fn edit_distance_oracle() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("same", "same"), 0);
    }
}
