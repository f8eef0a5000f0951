//! The `IRVULN01` model container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "IRVULN01"
//! version          u32
//! config           embed_dim, hidden_dim, blstm_layers, classifier_hidden,
//!                  line_hidden (u64 each), lstm_bias (u8), learning_rate (f64),
//!                  stage1_epochs, stage2_epochs, seed (u64 each),
//!                  decision_threshold, grad_clip, forget_bias (f64 each)
//! vocabulary       token count (u64), then per token: byte length (u32), UTF-8 bytes
//! vocab digest     u64, FNV-1a of the vocabulary file bytes
//! tensors          count (u32), then per tensor: rows (u64), cols (u64),
//!                  rows·cols f64 in row-major order
//! file digest      u64, FNV-1a of every preceding byte
//! ```
//!
//! Tensor order: W0, W1, per BLSTM layer (forward weight, forward bias,
//! backward weight, backward bias), W2, W3, W4, W5. Biases are `4M × 1`.

use std::path::Path;

use super::config::ModelConfig;
use super::model::{Stage1Model, Stage2Model};
use super::predict::Detector;
use crate::digest::{fnv1a64, to_hex};
use crate::error::{Error, Result};
use crate::nn::linalg::Matrix;
use crate::nn::lstm::{Blstm, BlstmLayer, LstmParams, GATE_BLOCKS};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"IRVULN01";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, rows: usize, cols: usize, data: &[f64]) {
        self.usize(rows);
        self.usize(cols);
        for &v in data {
            self.f64(v);
        }
    }
    fn matrix(&mut self, m: &Matrix) {
        self.tensor(m.rows(), m.cols(), m.as_slice());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Corrupted(format!("unexpected end of data at byte {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::Corrupted("size does not fit in memory".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| {
                n.checked_mul(8)
                    .is_some_and(|b| b <= self.buf.len() - self.pos)
            })
            .ok_or_else(|| {
                Error::Corrupted(format!("tensor header {rows}x{cols} exceeds file size"))
            })?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data)
    }
}

/// Serializes a detector into the model container.
pub fn encode_model(detector: &Detector) -> Vec<u8> {
    let Detector {
        config,
        vocab,
        stage1,
        stage2,
    } = detector;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);

    w.usize(config.embed_dim);
    w.usize(config.hidden_dim);
    w.usize(config.blstm_layers);
    w.usize(config.classifier_hidden);
    w.usize(config.line_hidden);
    w.u8(u8::from(config.lstm_bias));
    w.f64(config.learning_rate);
    w.usize(config.stage1_epochs);
    w.usize(config.stage2_epochs);
    w.u64(config.seed);
    w.f64(config.decision_threshold);
    w.f64(config.grad_clip);
    w.f64(config.forget_bias);

    w.usize(vocab.len());
    for t in vocab.tokens() {
        w.u32(t.len() as u32);
        w.0.extend_from_slice(t.as_bytes());
    }
    w.u64(vocab.digest());

    let tensor_count = 2 + 4 * stage1.blstm.layers.len() + 4;
    w.u32(tensor_count as u32);
    w.matrix(&stage1.encoder_in);
    w.matrix(&stage1.encoder_out);
    for layer in &stage1.blstm.layers {
        for cell in [&layer.forward, &layer.backward] {
            w.matrix(&cell.weight);
            w.tensor(cell.bias.len(), 1, &cell.bias);
        }
    }
    w.matrix(&stage1.classifier_hidden);
    w.matrix(&stage1.classifier_out);
    w.matrix(&stage2.hidden);
    w.matrix(&stage2.output);

    let digest = fnv1a64(&w.0);
    w.u64(digest);
    w.0
}

fn expect_shape(m: &Matrix, rows: usize, cols: usize, name: &str) -> Result<()> {
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::Dimension(format!(
            "{name} is {}x{}, configuration implies {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

/// Parses and validates a model container.
pub fn decode_model(bytes: &[u8]) -> Result<Detector> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupted("missing IRVULN01 magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < 12 + 8 {
        return Err(Error::Corrupted("file truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if fnv1a64(body) != stored {
        return Err(Error::Corrupted("digest check failed".into()));
    }

    let mut r = Reader { buf: body, pos: 12 };
    let config = ModelConfig {
        embed_dim: r.usize()?,
        hidden_dim: r.usize()?,
        blstm_layers: r.usize()?,
        classifier_hidden: r.usize()?,
        line_hidden: r.usize()?,
        lstm_bias: r.u8()? != 0,
        learning_rate: r.f64()?,
        stage1_epochs: r.usize()?,
        stage2_epochs: r.usize()?,
        seed: r.u64()?,
        decision_threshold: r.f64()?,
        grad_clip: r.f64()?,
        forget_bias: r.f64()?,
    };
    config.validate()?;

    let n_tokens = r.usize()?;
    let mut tokens = Vec::with_capacity(n_tokens.min(body.len()));
    for _ in 0..n_tokens {
        let len = r.u32()? as usize;
        let raw = r.take(len)?;
        let tok =
            std::str::from_utf8(raw).map_err(|_| Error::Corrupted("token is not UTF-8".into()))?;
        tokens.push(tok.to_owned());
    }
    let vocab = Vocabulary::from_tokens(tokens)?;
    let vocab_digest = r.u64()?;
    if vocab_digest != vocab.digest() {
        return Err(Error::Corrupted(format!(
            "stored vocabulary digest {} does not match its tokens ({})",
            to_hex(vocab_digest),
            vocab.digest_hex()
        )));
    }

    let (n, k, m) = (vocab.len(), config.embed_dim, config.hidden_dim);
    let expected_tensors = 2 + 4 * config.blstm_layers + 4;
    let count = r.u32()? as usize;
    if count != expected_tensors {
        return Err(Error::Dimension(format!(
            "{count} tensors stored, configuration implies {expected_tensors}"
        )));
    }
    let encoder_in = r.matrix()?;
    expect_shape(&encoder_in, k, n, "W0")?;
    let encoder_out = r.matrix()?;
    expect_shape(&encoder_out, k, k, "W1")?;
    let mut layers = Vec::with_capacity(config.blstm_layers);
    for l in 0..config.blstm_layers {
        let in_dim = if l == 0 { k } else { 2 * m };
        let mut cell = || -> Result<LstmParams> {
            let weight = r.matrix()?;
            let bias = r.matrix()?;
            expect_shape(&bias, GATE_BLOCKS * m, 1, "LSTM bias")?;
            LstmParams::from_parts(in_dim, m, weight, bias.as_slice().to_vec())
        };
        let forward = cell()?;
        let backward = cell()?;
        layers.push(BlstmLayer { forward, backward });
    }
    let classifier_hidden = r.matrix()?;
    expect_shape(&classifier_hidden, config.classifier_hidden, 2 * m, "W2")?;
    let classifier_out = r.matrix()?;
    expect_shape(&classifier_out, 2, config.classifier_hidden, "W3")?;
    let hidden = r.matrix()?;
    expect_shape(&hidden, config.line_hidden, 2 * m + n, "W4")?;
    let output = r.matrix()?;
    expect_shape(&output, 2, config.line_hidden, "W5")?;
    if r.pos != body.len() {
        return Err(Error::Corrupted(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }

    let digest = vocab.digest();
    let stage1 = Stage1Model {
        encoder_in,
        encoder_out,
        blstm: Blstm { layers },
        classifier_hidden,
        classifier_out,
        vocab_digest: digest,
    };
    stage1.check_shapes()?;
    let stage2 = Stage2Model::from_parts(hidden, output, 2 * m, digest)?;
    Ok(Detector {
        config,
        vocab,
        stage1,
        stage2,
    })
}

/// Writes the model container. Both stages must belong to `vocab`.
pub fn save_model(
    stage1: &Stage1Model,
    stage2: &Stage2Model,
    vocab: &Vocabulary,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let digest = vocab.digest();
    for d in [stage1.vocab_digest, stage2.vocab_digest] {
        if d != digest {
            return Err(Error::DigestMismatch {
                expected: to_hex(d),
                actual: to_hex(digest),
            });
        }
    }
    stage2.check_compatible(stage1)?;
    let detector = Detector {
        config: config.clone(),
        vocab: vocab.clone(),
        stage1: stage1.clone(),
        stage2: stage2.clone(),
    };
    let path = path.as_ref();
    std::fs::write(path, encode_model(&detector)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Detector> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

impl Detector {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_model(&self.stage1, &self.stage2, &self.vocab, &self.config, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_model(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn detector(layers: usize) -> Detector {
        let vocab = Vocabulary::from_tokens(
            ["load", "%1", "store", "i32", "ret"]
                .map(String::from)
                .to_vec(),
        )
        .unwrap();
        let config = ModelConfig {
            embed_dim: 4,
            hidden_dim: 3,
            blstm_layers: layers,
            classifier_hidden: 5,
            line_hidden: 2,
            seed: 77,
            ..Default::default()
        };
        let mut rng = stream(3, Stream::Stage1Init);
        let stage1 = Stage1Model::init(vocab.len(), vocab.digest(), &config, &mut rng);
        let stage2 = Stage2Model::init(6, vocab.len(), vocab.digest(), &config, &mut rng);
        Detector {
            config,
            vocab,
            stage1,
            stage2,
        }
    }

    fn bits(d: &Detector) -> Vec<u64> {
        use crate::nn::params::Parameters;
        d.stage1
            .tensors()
            .into_iter()
            .chain(d.stage2.tensors())
            .flat_map(|t| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for layers in [1, 2] {
            let d = detector(layers);
            let bytes = encode_model(&d);
            assert_eq!(&bytes[..8], b"IRVULN01");
            let back = decode_model(&bytes).unwrap();
            assert_eq!(bits(&back), bits(&d));
            assert_eq!(back, d);
            assert_eq!(encode_model(&back), bytes);
        }
    }

    #[test]
    fn truncated_file_is_corrupted() {
        let bytes = encode_model(&detector(1));
        for cut in [bytes.len() - 1, bytes.len() / 2, 30, 13] {
            let err = decode_model(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupted(_)), "cut {cut}: {err}");
            assert!(err.to_string().contains("corrupted"));
        }
    }

    #[test]
    fn flipped_byte_is_corrupted() {
        let mut bytes = encode_model(&detector(1));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_model(&bytes), Err(Error::Corrupted(_))));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = encode_model(&detector(1));
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        let err = decode_model(&bytes).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion(99)));
        assert!(err.to_string().contains("unsupported version"));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_model(&detector(1));
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(Error::Corrupted(_))));
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let mut d = detector(1);
        d.config.embed_dim = 5;
        let bytes = encode_model(&d);
        assert!(matches!(decode_model(&bytes), Err(Error::Dimension(_))));
    }

    #[test]
    fn save_rejects_foreign_vocabulary() {
        let d = detector(1);
        let other = Vocabulary::from_tokens(vec!["x".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = save_model(
            &d.stage1,
            &d.stage2,
            &other,
            &d.config,
            dir.path().join("m.bin"),
        );
        assert!(matches!(err, Err(Error::DigestMismatch { .. })));
        d.save(dir.path().join("m.bin")).unwrap();
        assert_eq!(load_model(dir.path().join("m.bin")).unwrap(), d);
    }
}
