//! Data model for embeddings, trials, and scores, with bit-exact file formats.
//!
//! Formats (all multi-byte integers little-endian):
//! - EVF1 binary: magic `EVF1`, u32 dim, u64 count, then per record
//!   u16 id length + UTF-8 id, u16 speaker length + UTF-8 speaker, dim f64.
//! - CSV: `utterance_id,speaker_id,v1,...,vd`, header optional, `.` decimals,
//!   empty speaker field = unlabeled; floats written with 17 significant digits.
//! - Trials: whitespace-separated `enroll test target|nontarget`, label optional.
//! - Scores: `enroll test score`, 17-significant-digit decimal.
//! - Model container: magic `XVNM`, u32 format version, kind tag string, then
//!   the model payload; vectors are u32 length + f64 entries, matrices u32
//!   rows + u32 cols + row-major f64 entries.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linear_norm::{LdaModel, PcaModel};
use crate::normalizer::Normalizer;
use crate::numstats::Matrix;
use crate::plda::PldaModel;
use crate::vae_norm::{Activation, AdaptMode, Layer, MlpNetwork, VaeModel};

/// One labeled (or unlabeled, empty speaker) embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub vector: Vec<f64>,
}

/// Embedding collection with a uniform dimension and unique utterance ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

fn validate_id(id: &str, what: &str, allow_empty: bool) -> Result<()> {
    if id.is_empty() {
        if allow_empty {
            return Ok(());
        }
        return Err(Error::invalid(format!("{what} must be nonempty")));
    }
    if id.chars().any(|c| c.is_whitespace() || c == ',') {
        return Err(Error::invalid(format!(
            "{what} {id:?} contains whitespace or comma"
        )));
    }
    Ok(())
}

impl EmbeddingSet {
    pub fn empty(dim: usize) -> EmbeddingSet {
        EmbeddingSet {
            dim,
            records: Vec::new(),
        }
    }

    /// Validated constructor: uniform dimension, finite entries, id rules,
    /// unique utterance ids.
    pub fn from_records(dim: usize, records: Vec<EmbeddingRecord>) -> Result<EmbeddingSet> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            validate_id(&r.utterance_id, "utterance_id", false)?;
            validate_id(&r.speaker_id, "speaker_id", true)?;
            if r.vector.len() != dim {
                return Err(Error::invalid(format!(
                    "record {} has dimension {} (set dimension {dim})",
                    r.utterance_id,
                    r.vector.len()
                )));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "record {} has a non-finite entry",
                    r.utterance_id
                )));
            }
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate utterance_id {}",
                    r.utterance_id
                )));
            }
        }
        Ok(EmbeddingSet { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    /// Cloned vectors, in record order (moment statistics input).
    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.vector.clone()).collect()
    }

    /// True when every record carries a speaker label.
    pub fn is_labeled(&self) -> bool {
        self.records.iter().all(|r| !r.speaker_id.is_empty())
    }

    /// Distinct speaker ids in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if !r.speaker_id.is_empty() && seen.insert(r.speaker_id.as_str()) {
                out.push(r.speaker_id.clone());
            }
        }
        out
    }

    /// Same ids and labels, new vectors of dimension `dim` (normalizer output).
    pub fn with_vectors(&self, dim: usize, vectors: Vec<Vec<f64>>) -> Result<EmbeddingSet> {
        if vectors.len() != self.records.len() {
            return Err(Error::invalid("with_vectors length mismatch"));
        }
        let records = self
            .records
            .iter()
            .zip(vectors)
            .map(|(r, vector)| EmbeddingRecord {
                utterance_id: r.utterance_id.clone(),
                speaker_id: r.speaker_id.clone(),
                vector,
            })
            .collect();
        EmbeddingSet::from_records(dim, records)
    }

    /// Copy with all speaker labels removed (unsupervised adaptation input).
    pub fn unlabeled(&self) -> EmbeddingSet {
        let records = self
            .records
            .iter()
            .map(|r| EmbeddingRecord {
                utterance_id: r.utterance_id.clone(),
                speaker_id: String::new(),
                vector: r.vector.clone(),
            })
            .collect();
        EmbeddingSet {
            dim: self.dim,
            records,
        }
    }

    /// Subset of records whose speaker id satisfies the predicate.
    pub fn filter_speakers(&self, keep: impl Fn(&str) -> bool) -> EmbeddingSet {
        let records = self
            .records
            .iter()
            .filter(|r| keep(&r.speaker_id))
            .cloned()
            .collect();
        EmbeddingSet {
            dim: self.dim,
            records,
        }
    }
}

/// One verification trial; `is_target` is None for unlabeled scoring lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll_utterance_id: String,
    pub test_utterance_id: String,
    pub is_target: Option<bool>,
}

/// One scored trial line.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreLine {
    pub enroll_utterance_id: String,
    pub test_utterance_id: String,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Binary,
    Csv,
}

// --- EVF1 binary ---

const EVF1_MAGIC: &[u8; 4] = b"EVF1";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse_offset(
                self.pos,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let at = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::parse_offset(at, format!("{what} is not valid UTF-8")))
    }
}

/// Parses EVF1 bytes; errors carry the offending byte offset.
pub fn parse_evf1(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != EVF1_MAGIC {
        return Err(Error::parse_offset(0, "bad magic, expected EVF1"));
    }
    let dim = cur.u32("dim")? as usize;
    let count = cur.u64("count")?;
    // Each record is at least 4 bytes of lengths plus the vector payload;
    // bounds the count before allocating.
    let min_record = 4 + 8 * dim as u64;
    if min_record > 0 && count > (bytes.len() as u64) / min_record.max(1) + 1 {
        return Err(Error::parse_offset(4, "record count exceeds file size"));
    }
    let mut records = Vec::with_capacity(count as usize);
    for i in 0..count {
        let utterance_id = cur.string(&format!("utterance id of record {i}"))?;
        let speaker_id = cur.string(&format!("speaker id of record {i}"))?;
        let at = cur.pos;
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(cur.f64(&format!("vector of record {i}"))?);
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse_offset(
                at,
                format!("non-finite value in record {i}"),
            ));
        }
        records.push(EmbeddingRecord {
            utterance_id,
            speaker_id,
            vector,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::parse_offset(cur.pos, "trailing bytes after records"));
    }
    EmbeddingSet::from_records(dim, records)
}

/// Serializes to EVF1 bytes (inverse of `parse_evf1`, bit-exact round trip).
pub fn encode_evf1(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(EVF1_MAGIC);
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for r in set.records() {
        for s in [&r.utterance_id, &r.speaker_id] {
            let b = s.as_bytes();
            if b.len() > u16::MAX as usize {
                return Err(Error::invalid(format!("id too long: {s:?}")));
            }
            out.extend_from_slice(&(b.len() as u16).to_le_bytes());
            out.extend_from_slice(b);
        }
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

// --- CSV ---

/// 17 significant digits: round-trips every finite f64 exactly.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parses CSV text; a header line is recognized when the first field is
/// exactly `utterance_id`. Dimension is fixed by the first data row.
pub fn parse_embeddings_csv(text: &str) -> Result<EmbeddingSet> {
    let mut dim: Option<usize> = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if i == 0 && fields[0] == "utterance_id" {
            continue;
        }
        if fields.len() < 3 {
            return Err(Error::parse_line(
                lineno,
                "expected utterance_id,speaker_id,v1,...",
            ));
        }
        let vals = &fields[2..];
        match dim {
            None => dim = Some(vals.len()),
            Some(d) if d != vals.len() => {
                return Err(Error::parse_line(
                    lineno,
                    format!("expected {d} values, found {}", vals.len()),
                ));
            }
            _ => {}
        }
        let mut vector = Vec::with_capacity(vals.len());
        for v in vals {
            let x: f64 = v.trim().parse().map_err(|_| {
                Error::parse_line(lineno, format!("bad numeric value {v:?}"))
            })?;
            vector.push(x);
        }
        records.push(EmbeddingRecord {
            utterance_id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            vector,
        });
    }
    EmbeddingSet::from_records(dim.unwrap_or(0), records).map_err(|e| match e {
        Error::InvalidInput(m) => Error::parse_line(0, m),
        other => other,
    })
}

pub fn encode_embeddings_csv(set: &EmbeddingSet) -> String {
    let mut out = String::from("utterance_id,speaker_id");
    for j in 0..set.dim() {
        out.push_str(&format!(",v{}", j + 1));
    }
    out.push('\n');
    for r in set.records() {
        out.push_str(&r.utterance_id);
        out.push(',');
        out.push_str(&r.speaker_id);
        for v in &r.vector {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn read_embeddings(path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        EmbeddingFormat::Binary => parse_evf1(&bytes),
        EmbeddingFormat::Csv => {
            let text = String::from_utf8(bytes)
                .map_err(|e| Error::parse_offset(e.utf8_error().valid_up_to(), "not UTF-8"))?;
            parse_embeddings_csv(&text)
        }
    }
}

pub fn write_embeddings(
    set: &EmbeddingSet,
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        EmbeddingFormat::Binary => encode_evf1(set)?,
        EmbeddingFormat::Csv => encode_embeddings_csv(set).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// --- Trials ---

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        let is_target = match tok.len() {
            2 => None,
            3 => match tok[2] {
                "target" => Some(true),
                "nontarget" => Some(false),
                other => {
                    return Err(Error::parse_line(
                        lineno,
                        format!("bad label {other:?}, expected target|nontarget"),
                    ));
                }
            },
            n => {
                return Err(Error::parse_line(
                    lineno,
                    format!("expected 2 or 3 tokens, found {n}"),
                ));
            }
        };
        out.push(Trial {
            enroll_utterance_id: tok[0].to_string(),
            test_utterance_id: tok[1].to_string(),
            is_target,
        });
    }
    Ok(out)
}

pub fn encode_trials(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        out.push_str(&t.enroll_utterance_id);
        out.push(' ');
        out.push_str(&t.test_utterance_id);
        match t.is_target {
            Some(true) => out.push_str(" target"),
            Some(false) => out.push_str(" nontarget"),
            None => {}
        }
        out.push('\n');
    }
    out
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text)
}

pub fn write_trials(trials: &[Trial], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_trials(trials)).map_err(|e| Error::io(path, e))
}

// --- Scores ---

pub fn parse_scores(text: &str) -> Result<Vec<ScoreLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 3 {
            return Err(Error::parse_line(
                lineno,
                format!("expected `enroll test score`, found {} tokens", tok.len()),
            ));
        }
        let score: f64 = tok[2]
            .parse()
            .map_err(|_| Error::parse_line(lineno, format!("bad score {:?}", tok[2])))?;
        if !score.is_finite() {
            return Err(Error::parse_line(lineno, "non-finite score"));
        }
        out.push(ScoreLine {
            enroll_utterance_id: tok[0].to_string(),
            test_utterance_id: tok[1].to_string(),
            score,
        });
    }
    Ok(out)
}

pub fn encode_scores(scores: &[ScoreLine]) -> String {
    let mut out = String::new();
    for s in scores {
        out.push_str(&format!(
            "{} {} {}\n",
            s.enroll_utterance_id,
            s.test_utterance_id,
            fmt_f64(s.score)
        ));
    }
    out
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreLine>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text)
}

pub fn write_scores(scores: &[ScoreLine], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_scores(scores)).map_err(|e| Error::io(path, e))
}

// --- Model container ---

const MODEL_MAGIC: &[u8; 4] = b"XVNM";
const MODEL_VERSION: u32 = 1;

/// Any savable model artifact: a fitted normalizer or a PLDA back-end.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Norm(Normalizer),
    Plda(PldaModel),
}

impl Model {
    /// Kind tag written to the container (`none|pca|lda|vae|cvae|plda`).
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Norm(n) => n.kind(),
            Model::Plda(_) => "plda",
        }
    }

    pub fn into_normalizer(self) -> Result<Normalizer> {
        match self {
            Model::Norm(n) => Ok(n),
            Model::Plda(_) => Err(Error::invalid(
                "model file holds a PLDA model, not a normalizer",
            )),
        }
    }

    pub fn into_plda(self) -> Result<PldaModel> {
        match self {
            Model::Plda(m) => Ok(m),
            Model::Norm(n) => Err(Error::invalid(format!(
                "model file holds a {} normalizer, not a PLDA model",
                n.kind()
            ))),
        }
    }
}

impl From<Normalizer> for Model {
    fn from(n: Normalizer) -> Model {
        Model::Norm(n)
    }
}

impl From<PldaModel> for Model {
    fn from(m: PldaModel) -> Model {
        Model::Plda(m)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// u16-length-prefixed UTF-8, same shape as EVF1 ids; tags are short statics.
fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_vec(out: &mut Vec<u8>, v: &[f64]) {
    put_u32(out, v.len() as u32);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    put_u32(out, m.rows() as u32);
    put_u32(out, m.cols() as u32);
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_net(out: &mut Vec<u8>, net: &MlpNetwork) {
    put_u32(out, net.layers.len() as u32);
    for l in &net.layers {
        out.push(match l.activation {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Linear => 2,
        });
        put_matrix(out, &l.weights);
        put_vec(out, &l.bias);
    }
}

/// Reads an element count and bounds it by the remaining payload before any
/// allocation (same guard as the EVF1 record count).
fn get_count(cur: &mut Cursor, unit_bytes: u64, what: &str) -> Result<usize> {
    let n = cur.u32(what)? as usize;
    let remaining = (cur.bytes.len() - cur.pos) as u64;
    if n as u64 * unit_bytes > remaining {
        return Err(Error::parse_offset(
            cur.pos - 4,
            format!("{what} count {n} exceeds file size"),
        ));
    }
    Ok(n)
}

fn get_vec(cur: &mut Cursor, what: &str) -> Result<Vec<f64>> {
    let n = get_count(cur, 8, what)?;
    let at = cur.pos;
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        v.push(cur.f64(what)?);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::parse_offset(
            at,
            format!("non-finite value in {what}"),
        ));
    }
    Ok(v)
}

fn get_matrix(cur: &mut Cursor, what: &str) -> Result<Matrix> {
    let rows = cur.u32(what)? as usize;
    let cols = get_count(cur, 8 * rows as u64, what)?;
    let at = cur.pos;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(cur.f64(what)?);
    }
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::parse_offset(at, format!("{what}: {e}")))
}

fn get_net(cur: &mut Cursor, what: &str) -> Result<MlpNetwork> {
    // A layer occupies at least the activation byte plus the two shape headers.
    let n_layers = get_count(cur, 13, what)?;
    if n_layers == 0 {
        return Err(Error::parse_offset(
            cur.pos - 4,
            format!("{what} has no layers"),
        ));
    }
    let mut layers: Vec<Layer> = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let what = format!("{what} layer {i}");
        let at = cur.pos;
        let activation = match cur.take(1, &what)?[0] {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            2 => Activation::Linear,
            code => {
                return Err(Error::parse_offset(
                    at,
                    format!("{what}: unknown activation code {code}"),
                ));
            }
        };
        let weights = get_matrix(cur, &what)?;
        let bias = get_vec(cur, &what)?;
        if bias.len() != weights.rows() {
            return Err(Error::parse_offset(
                at,
                format!(
                    "{what}: bias length {} != output dimension {}",
                    bias.len(),
                    weights.rows()
                ),
            ));
        }
        if let Some(prev) = layers.last() {
            if weights.cols() != prev.weights.rows() {
                return Err(Error::parse_offset(
                    at,
                    format!(
                        "{what}: input dimension {} != previous output {}",
                        weights.cols(),
                        prev.weights.rows()
                    ),
                ));
            }
        }
        layers.push(Layer {
            weights,
            bias,
            activation,
        });
    }
    Ok(MlpNetwork { layers })
}

/// Serializes a model container (inverse of `parse_model`, bit-exact round
/// trip including hyperparameters and the training seed).
pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, MODEL_VERSION);
    put_string(&mut out, model.kind());
    match model {
        Model::Norm(Normalizer::None) => {}
        Model::Norm(Normalizer::Pca(m)) => {
            put_vec(&mut out, &m.mean);
            put_matrix(&mut out, &m.projection);
            put_u32(&mut out, m.k as u32);
        }
        Model::Norm(Normalizer::Lda(m)) => {
            put_vec(&mut out, &m.mean);
            put_matrix(&mut out, &m.projection);
            put_u32(&mut out, m.k as u32);
            put_vec(&mut out, &m.eigenvalues);
            out.push(m.degenerate as u8);
        }
        Model::Norm(Normalizer::Vae(m)) => {
            put_net(&mut out, &m.encoder);
            put_net(&mut out, &m.decoder);
            put_u32(&mut out, m.latent_dim as u32);
            out.extend_from_slice(&m.cohesive_weight.to_le_bytes());
            out.extend_from_slice(&m.train_seed.to_le_bytes());
            put_vec(&mut out, &m.input_mean);
            put_vec(&mut out, &m.input_std);
            out.push(match m.adapt_mode {
                None => 0,
                Some(AdaptMode::Retrain) => 1,
                Some(AdaptMode::Finetune) => 2,
            });
        }
        Model::Plda(m) => {
            put_vec(&mut out, &m.mean);
            put_matrix(&mut out, &m.between_cov);
            put_matrix(&mut out, &m.within_cov);
            put_u32(&mut out, m.dim as u32);
        }
    }
    out
}

/// Parses a model container; errors carry the offending byte offset, and a
/// future format version maps to the unsupported-version error.
pub fn parse_model(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::parse_offset(0, "bad magic, expected XVNM"));
    }
    let version = cur.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let kind_at = cur.pos;
    let kind = cur.string("model kind")?;
    let payload_at = cur.pos;
    let model = match kind.as_str() {
        "none" => Model::Norm(Normalizer::None),
        "pca" => {
            let mean = get_vec(&mut cur, "pca mean")?;
            let projection = get_matrix(&mut cur, "pca projection")?;
            let k = cur.u32("pca k")? as usize;
            if k != projection.rows() || mean.len() != projection.cols() {
                return Err(Error::parse_offset(payload_at, "inconsistent pca shapes"));
            }
            Model::Norm(Normalizer::Pca(PcaModel { mean, projection, k }))
        }
        "lda" => {
            let mean = get_vec(&mut cur, "lda mean")?;
            let projection = get_matrix(&mut cur, "lda projection")?;
            let k = cur.u32("lda k")? as usize;
            let eigenvalues = get_vec(&mut cur, "lda eigenvalues")?;
            let at = cur.pos;
            let degenerate = match cur.take(1, "lda degenerate flag")?[0] {
                0 => false,
                1 => true,
                code => {
                    return Err(Error::parse_offset(
                        at,
                        format!("bad degenerate flag {code}"),
                    ));
                }
            };
            if k != projection.rows() || mean.len() != projection.cols() || eigenvalues.len() != k
            {
                return Err(Error::parse_offset(payload_at, "inconsistent lda shapes"));
            }
            Model::Norm(Normalizer::Lda(LdaModel {
                mean,
                projection,
                k,
                eigenvalues,
                degenerate,
            }))
        }
        "vae" | "cvae" => {
            let encoder = get_net(&mut cur, "encoder")?;
            let decoder = get_net(&mut cur, "decoder")?;
            let latent_dim = cur.u32("latent dim")? as usize;
            let cohesive_weight = cur.f64("cohesive weight")?;
            let train_seed = cur.u64("train seed")?;
            let input_mean = get_vec(&mut cur, "input mean")?;
            let input_std = get_vec(&mut cur, "input std")?;
            let at = cur.pos;
            let adapt_mode = match cur.take(1, "adapt mode")?[0] {
                0 => None,
                1 => Some(AdaptMode::Retrain),
                2 => Some(AdaptMode::Finetune),
                code => {
                    return Err(Error::parse_offset(at, format!("bad adapt mode {code}")));
                }
            };
            let d = input_mean.len();
            let enc_out = encoder.layers.last().unwrap().weights.rows();
            let dec_in = decoder.layers[0].weights.cols();
            let dec_out = decoder.layers.last().unwrap().weights.rows();
            if encoder.layers[0].weights.cols() != d
                || enc_out != 2 * latent_dim
                || dec_in != latent_dim
                || dec_out != d
                || input_std.len() != d
            {
                return Err(Error::parse_offset(payload_at, "inconsistent vae shapes"));
            }
            if !cohesive_weight.is_finite()
                || cohesive_weight < 0.0
                || (cohesive_weight > 0.0) != (kind == "cvae")
            {
                return Err(Error::parse_offset(
                    payload_at,
                    format!("kind tag {kind:?} disagrees with cohesive weight {cohesive_weight}"),
                ));
            }
            if input_std.iter().any(|s| *s <= 0.0) {
                return Err(Error::parse_offset(payload_at, "non-positive input std"));
            }
            Model::Norm(Normalizer::Vae(VaeModel {
                encoder,
                decoder,
                latent_dim,
                cohesive_weight,
                train_seed,
                input_mean,
                input_std,
                adapt_mode,
            }))
        }
        "plda" => {
            let mean = get_vec(&mut cur, "plda mean")?;
            let between_cov = get_matrix(&mut cur, "plda between covariance")?;
            let within_cov = get_matrix(&mut cur, "plda within covariance")?;
            let dim = cur.u32("plda dim")? as usize;
            if mean.len() != dim
                || between_cov.rows() != dim
                || between_cov.cols() != dim
                || within_cov.rows() != dim
                || within_cov.cols() != dim
            {
                return Err(Error::parse_offset(payload_at, "inconsistent plda shapes"));
            }
            Model::Plda(PldaModel {
                mean,
                between_cov,
                within_cov,
                dim,
            })
        }
        other => {
            return Err(Error::parse_offset(
                kind_at,
                format!("unknown model kind {other:?}"),
            ));
        }
    };
    if cur.pos != bytes.len() {
        return Err(Error::parse_offset(cur.pos, "trailing bytes after model"));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_model(&bytes)
}
