//! SBTD teacher dumps: token ids, embedding outputs, per-block hidden states
//! and (for task dumps) logits and labels, stored as little-endian binary.
//!
//! Header (44 bytes):
//!
//! | field        | type    |
//! |--------------|---------|
//! | magic        | `SBTD`  |
//! | version      | u32 = 1 |
//! | flags        | u32, bit 0 logits, bit 1 labels |
//! | layers       | u32     |
//! | dim          | u32     |
//! | max_len      | u32     |
//! | num_classes  | u32     |
//! | sample_count | u32     |
//! | vocab_hash   | u64     |
//! | pad_id       | i32     |
//!
//! Each sample then holds `max_len` i32 token ids, `max_len * dim` f32
//! embedding values, `layers * max_len * dim` f32 feature values, and when
//! flagged `num_classes` f32 logits and one i32 label.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Sample, Vocab};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SBTD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 44;

const FLAG_LOGITS: u32 = 1;
const FLAG_LABELS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpKind {
    /// Embeddings and features only.
    Features,
    /// Also logits and labels from a task-tuned teacher.
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub kind: DumpKind,
    pub layers: usize,
    pub dim: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub vocab_hash: u64,
    pub pad_id: i32,
}

impl DumpHeader {
    pub fn sample_bytes(&self) -> usize {
        let n = self.max_len;
        let mut b = 4 * n + 4 * n * self.dim * (1 + self.layers);
        if self.kind == DumpKind::Task {
            b += 4 * self.num_classes + 4;
        }
        b
    }

    fn flags(&self) -> u32 {
        match self.kind {
            DumpKind::Features => 0,
            DumpKind::Task => FLAG_LOGITS | FLAG_LABELS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRecord {
    pub token_ids: Vec<i32>,
    /// `max_len x dim`, row major.
    pub embedding: Vec<f32>,
    /// `layers x max_len x dim`, row major.
    pub features: Vec<f32>,
    pub logits: Option<Vec<f32>>,
    pub label: Option<i32>,
}

/// Alignment targets for one sample. Carries no logits or labels.
#[derive(Debug, Clone, Copy)]
pub struct FeatureTarget<'a> {
    pub token_ids: &'a [i32],
    pub embedding: &'a [f32],
    pub features: &'a [f32],
    pub layers: usize,
    pub dim: usize,
}

impl<'a> FeatureTarget<'a> {
    pub fn max_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Hidden state after teacher block `layer` (1-based).
    pub fn layer(&self, layer: usize) -> Result<&'a [f32]> {
        if layer == 0 || layer > self.layers {
            return Err(Error::Data(format!(
                "teacher layer {layer} requested but the dump holds layers 1..={}",
                self.layers
            )));
        }
        let len = self.max_len() * self.dim;
        Ok(&self.features[(layer - 1) * len..layer * len])
    }
}

/// Alignment targets plus teacher logits and the gold label.
#[derive(Debug, Clone, Copy)]
pub struct TaskTarget<'a> {
    pub features: FeatureTarget<'a>,
    pub logits: &'a [f32],
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherDump {
    pub header: DumpHeader,
    pub records: Vec<TeacherRecord>,
}

impl TeacherDump {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.layers == 0 || h.dim == 0 || h.max_len == 0 {
            return Err(Error::contract("dump dimensions must be positive"));
        }
        if h.kind == DumpKind::Task && h.num_classes == 0 {
            return Err(Error::contract("task dump needs num_classes > 0"));
        }
        let n = h.max_len;
        for (i, r) in self.records.iter().enumerate() {
            let bad = |what: &str| Err(Error::contract(format!("record {i}: {what}")));
            if r.token_ids.len() != n {
                return bad("token_ids length differs from max_len");
            }
            if r.embedding.len() != n * h.dim {
                return bad("embedding size differs from max_len x dim");
            }
            if r.features.len() != h.layers * n * h.dim {
                return bad("features size differs from layers x max_len x dim");
            }
            match (h.kind, &r.logits, r.label) {
                (DumpKind::Features, None, None) => {}
                (DumpKind::Features, _, _) => return bad("feature dump carries logits or labels"),
                (DumpKind::Task, Some(l), Some(y)) => {
                    if l.len() != h.num_classes {
                        return bad("logits length differs from num_classes");
                    }
                    if y < 0 || y as usize >= h.num_classes {
                        return bad("label out of range");
                    }
                }
                (DumpKind::Task, _, _) => return bad("task dump record lacks logits or label"),
            }
        }
        Ok(())
    }

    /// Hard error unless the dump was produced with `vocab`.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let ours = vocab.hash();
        if self.header.vocab_hash != ours {
            return Err(Error::Data(format!(
                "dump vocabulary hash {:016x} does not match student vocabulary {ours:016x}",
                self.header.vocab_hash
            )));
        }
        if self.header.pad_id != vocab.pad_id() as i32 {
            return Err(Error::Data("dump pad id differs from vocabulary [PAD]".into()));
        }
        Ok(())
    }

    pub fn feature_target(&self, i: usize) -> FeatureTarget<'_> {
        let r = &self.records[i];
        FeatureTarget {
            token_ids: &r.token_ids,
            embedding: &r.embedding,
            features: &r.features,
            layers: self.header.layers,
            dim: self.header.dim,
        }
    }

    pub fn task_target(&self, i: usize) -> Result<TaskTarget<'_>> {
        let r = &self.records[i];
        match (&r.logits, r.label) {
            (Some(logits), Some(label)) if label >= 0 => Ok(TaskTarget {
                features: self.feature_target(i),
                logits,
                label: label as u32,
            }),
            _ => Err(Error::Data(format!("dump record {i} has no teacher logits or label"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let h = &self.header;
        let u32_of = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::contract(format!("{what} does not fit in u32")))
        };
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * h.sample_bytes());
        out.extend_from_slice(&MAGIC);
        for v in [
            VERSION,
            h.flags(),
            u32_of(h.layers, "layers")?,
            u32_of(h.dim, "dim")?,
            u32_of(h.max_len, "max_len")?,
            u32_of(h.num_classes, "num_classes")?,
            u32_of(self.records.len(), "sample count")?,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.vocab_hash.to_le_bytes());
        out.extend_from_slice(&h.pad_id.to_le_bytes());
        for r in &self.records {
            r.token_ids.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            r.embedding.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            r.features.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            if let (Some(l), Some(y)) = (&r.logits, r.label) {
                l.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected SBTD"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let flags = r.u32()?;
        let kind = match flags {
            0 => DumpKind::Features,
            f if f == FLAG_LOGITS | FLAG_LABELS => DumpKind::Task,
            f => return Err(Error::format(8, format!("unsupported flags {f:#x}"))),
        };
        let layers = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let max_len = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let count = r.u32()? as usize;
        let vocab_hash = r.u64()?;
        let pad_id = r.i32()?;
        let header = DumpHeader {
            kind,
            layers,
            dim,
            max_len,
            num_classes,
            vocab_hash,
            pad_id,
        };
        if layers == 0 || dim == 0 || max_len == 0 {
            return Err(Error::format(12, "zero layer count, dim or max_len"));
        }
        if kind == DumpKind::Task && num_classes == 0 {
            return Err(Error::format(24, "task dump declares zero classes"));
        }
        let expected = (count as u128) * (header.sample_bytes() as u128) + HEADER_LEN as u128;
        if expected != bytes.len() as u128 {
            return Err(Error::format(
                bytes.len().min(expected.min(u64::MAX as u128) as usize) as u64,
                format!("file is {} bytes, header declares {expected}", bytes.len()),
            ));
        }

        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let token_ids = r.i32s(max_len)?;
            let embedding = r.f32s(max_len * dim)?;
            let features = r.f32s(layers * max_len * dim)?;
            let (logits, label) = if kind == DumpKind::Task {
                let l = r.f32s(num_classes)?;
                let at = r.pos as u64;
                let y = r.i32()?;
                if y < 0 || y as usize >= num_classes {
                    return Err(Error::format(at, format!("label {y} out of range")));
                }
                (Some(l), Some(y))
            } else {
                (None, None)
            };
            records.push(TeacherRecord {
                token_ids,
                embedding,
                features,
                logits,
                label,
            });
        }
        Ok(Self { header, records })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos as u64, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn arr4(&mut self) -> Result<[u8; 4]> {
        Ok(self.take(4)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr4()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.arr4()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        let b = self.take(4 * n)?;
        Ok(b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(4 * n)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn write_dump(dump: &TeacherDump, path: &Path) -> Result<()> {
    fs::write(path, dump.to_bytes()?)?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<TeacherDump> {
    TeacherDump::from_bytes(&fs::read(path)?)
}

/// Deterministic stand-in for a fine-tuned teacher.
///
/// Token `id` embeds to a fixed Gaussian vector drawn from its own random
/// stream, plus a small per-position vector. Block `l` maps the previous
/// hidden state `H` to `norm(tanh((H + mean(H)) R_l))` where `mean` runs
/// over real tokens, `R_l` is a fixed Gaussian matrix and `norm` centres
/// and scales each row. Padding rows are zero. Task logits are 4 on the
/// gold class and 0 elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTeacher {
    pub layers: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

pub const SYNTH_LOGIT_MARGIN: f32 = 4.0;

impl SyntheticTeacher {
    fn normals(&self, stream: u64, n: usize, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    pub fn generate(&self, samples: &[Sample], vocab: &Vocab, kind: DumpKind) -> Result<TeacherDump> {
        if samples.is_empty() {
            return Err(Error::input("cannot build a teacher dump from an empty dataset"));
        }
        if self.layers == 0 || self.dim == 0 {
            return Err(Error::input("teacher layers and dim must be positive"));
        }
        let max_len = samples[0].token_ids.len();
        if max_len == 0 || samples.iter().any(|s| s.token_ids.len() != max_len) {
            return Err(Error::input("samples must be encoded to one common max_len"));
        }
        if kind == DumpKind::Task && self.num_classes == 0 {
            return Err(Error::input("task dump needs num_classes > 0"));
        }
        let d = self.dim;
        let pad = vocab.pad_id();
        let rot: Vec<Vec<f64>> = (0..self.layers)
            .map(|l| self.normals(1 << 40 | l as u64, d * d, 1.5 / (d as f64).sqrt()))
            .collect();
        let pos: Vec<Vec<f64>> = (0..max_len).map(|p| self.normals(1 << 41 | p as u64, d, 0.1)).collect();
        let mut table: std::collections::HashMap<u32, Vec<f64>> = Default::default();

        let mut records = Vec::with_capacity(samples.len());
        for s in samples {
            let valid: Vec<bool> = s.token_ids.iter().map(|&t| t != pad).collect();
            let mut h = vec![0.0f64; max_len * d];
            for (p, &id) in s.token_ids.iter().enumerate() {
                if !valid[p] {
                    continue;
                }
                let e = table.entry(id).or_insert_with(|| self.normals(id as u64, d, 1.0));
                for k in 0..d {
                    h[p * d + k] = e[k] + pos[p][k];
                }
            }
            let embedding: Vec<f32> = h.iter().map(|&v| v as f32).collect();
            let n_valid = valid.iter().filter(|&&v| v).count().max(1) as f64;
            let mut features = Vec::with_capacity(self.layers * max_len * d);
            for r in &rot {
                let mut mean = vec![0.0; d];
                for p in (0..max_len).filter(|&p| valid[p]) {
                    for k in 0..d {
                        mean[k] += h[p * d + k] / n_valid;
                    }
                }
                let mut next = vec![0.0; max_len * d];
                for p in (0..max_len).filter(|&p| valid[p]) {
                    let row = &mut next[p * d..(p + 1) * d];
                    for i in 0..d {
                        let x = h[p * d + i] + mean[i];
                        for j in 0..d {
                            row[j] += x * r[i * d + j];
                        }
                    }
                    row.iter_mut().for_each(|v| *v = v.tanh());
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + 1e-5).sqrt();
                    row.iter_mut().for_each(|v| *v = (*v - mu) * inv);
                }
                features.extend(next.iter().map(|&v| v as f32));
                h = next;
            }
            let (logits, label) = match kind {
                DumpKind::Features => (None, None),
                DumpKind::Task => {
                    let y = s
                        .label
                        .ok_or_else(|| Error::input("task dump requires labelled samples"))?;
                    if y as usize >= self.num_classes {
                        return Err(Error::input(format!("label {y} >= num_classes {}", self.num_classes)));
                    }
                    let mut l = vec![0.0f32; self.num_classes];
                    l[y as usize] = SYNTH_LOGIT_MARGIN;
                    (Some(l), Some(y as i32))
                }
            };
            records.push(TeacherRecord {
                token_ids: s.token_ids.iter().map(|&t| t as i32).collect(),
                embedding,
                features,
                logits,
                label,
            });
        }
        Ok(TeacherDump {
            header: DumpHeader {
                kind,
                layers: self.layers,
                dim: d,
                max_len,
                num_classes: self.num_classes,
                vocab_hash: vocab.hash(),
                pad_id: pad as i32,
            },
            records,
        })
    }
}

pub fn gen_synthetic_dump(
    samples: &[Sample],
    vocab: &Vocab,
    teacher: &SyntheticTeacher,
    kind: DumpKind,
) -> Result<TeacherDump> {
    teacher.generate(samples, vocab, kind)
}
