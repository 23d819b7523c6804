//! Binary artifact formats.
//!
//! Tensor container (`APERTNS1`): magic, u32 entry count, then one table row
//! per entry (u32 name length, name bytes, u32 rank, u32 dims, u8 dtype tag;
//! tag 0 = f32), followed by the payloads in entry order as little-endian
//! f32. Values are widened to f64 in memory.
//!
//! Checkpoint (`APERCKP1`): magic, u32 header length, a TOML header naming
//! the backbone kind, embedding width, input spec, and adaptation, followed
//! by an embedded tensor container with one entry per named parameter.
//!
//! Embedding cache (`APEREMB1`): magic, u32 version, u32 n, u32 dim, then
//! n x dim f32 row-major little-endian; labels go to a `<path>.labels` text
//! sidecar, one integer per line.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbone::{Adaptation, Arch, Backbone};
use crate::data::{LabeledExample, Tensor};
use crate::error::{Error, Result};
use crate::learner::{LearnerState, RunEmbedder, SeqHead};
use crate::params::ParamStore;
use crate::peft::LinearHead;
use crate::projection::Projector;
use crate::prototype::PrototypeBank;

pub const TENSOR_MAGIC: &[u8; 8] = b"APERTNS1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"APERCKP1";
pub const EMBEDDING_MAGIC: &[u8; 8] = b"APEREMB1";
pub const EMBEDDING_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;

// ---------------------------------------------------------------------------
// Tensor container
// ---------------------------------------------------------------------------

pub fn write_tensors_to(w: &mut impl Write, entries: &[(String, ArrayD<f64>)]) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, value) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.ndim() as u32).to_le_bytes())?;
        for d in value.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        w.write_all(&[DTYPE_F32])?;
    }
    for (_, value) in entries {
        for v in value.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors_from(r: &mut impl Read) -> Result<Vec<(String, ArrayD<f64>)>> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "container magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Corrupt("bad tensor container magic".into()));
    }
    let count = read_u32(r, "entry count")? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r, "name length")? as usize;
        if name_len > 4096 {
            return Err(Error::Corrupt("unreasonable tensor name length".into()));
        }
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Corrupt("non-utf8 tensor name".into()))?;
        let rank = read_u32(r, "rank")? as usize;
        if rank > 8 {
            return Err(Error::Corrupt("unreasonable tensor rank".into()));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r, "dimension")? as usize);
        }
        let mut tag = [0u8; 1];
        read_exact(r, &mut tag, "dtype tag")?;
        if tag[0] != DTYPE_F32 {
            return Err(Error::Corrupt(format!("unsupported dtype tag {}", tag[0])));
        }
        table.push((name, dims));
    }
    let mut out = Vec::with_capacity(count);
    for (name, dims) in table {
        let len: usize = dims.iter().product();
        let mut buf = vec![0u8; len * 4];
        read_exact(r, &mut buf, "tensor payload")?;
        let values: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|_| Error::Corrupt(format!("shape mismatch in tensor '{name}'")))?;
        out.push((name, arr));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, entries: &[(String, ArrayD<f64>)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write_tensors_to(&mut f, entries)
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
    let mut f = fs::File::open(path)?;
    let out = read_tensors_from(&mut f)?;
    let mut rest = [0u8; 1];
    if f.read(&mut rest)? != 0 {
        return Err(Error::Corrupt("trailing bytes after tensor container".into()));
    }
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Corrupt(format!("truncated file while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    embed_dim: usize,
    input: Option<Vec<usize>>,
    arch: Arch,
    adaptation: Option<Adaptation>,
}

pub fn save_checkpoint(backbone: &Backbone, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        kind: backbone.kind().to_string(),
        embed_dim: backbone.embed_dim(),
        input: backbone.input_shape(),
        arch: backbone.arch().clone(),
        adaptation: backbone.adaptation().copied(),
    };
    let header_text =
        toml::to_string(&header).map_err(|e| Error::config(format!("checkpoint header: {e}")))?;
    let mut f = fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(header_text.len() as u32).to_le_bytes())?;
    f.write_all(header_text.as_bytes())?;
    let entries: Vec<(String, ArrayD<f64>)> = backbone
        .params()
        .iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    write_tensors_to(&mut f, &entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Backbone> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    read_exact(&mut f, &mut magic, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("bad checkpoint magic".into()));
    }
    let header_len = read_u32(&mut f, "header length")? as usize;
    let mut header = vec![0u8; header_len];
    read_exact(&mut f, &mut header, "checkpoint header")?;
    let header: CheckpointHeader = toml::from_str(
        std::str::from_utf8(&header).map_err(|_| Error::Corrupt("non-utf8 header".into()))?,
    )
    .map_err(|e| Error::Corrupt(format!("bad checkpoint header: {e}")))?;
    let tensors = read_tensors_from(&mut f)?;
    let mut params = ParamStore::new();
    for (name, value) in tensors {
        params.insert(name, value);
    }
    let backbone = Backbone::from_parts(header.arch, params, header.adaptation)?;
    if backbone.embed_dim() != header.embed_dim {
        return Err(Error::Corrupt("checkpoint header embed_dim mismatch".into()));
    }
    Ok(backbone)
}

// ---------------------------------------------------------------------------
// Embedding cache
// ---------------------------------------------------------------------------

pub fn labels_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

pub fn write_embedding_cache(path: &Path, features: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if features.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "cache rows {} != labels {}",
            features.shape()[0],
            labels.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(EMBEDDING_MAGIC)?;
    f.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    f.write_all(&(features.shape()[0] as u32).to_le_bytes())?;
    f.write_all(&(features.shape()[1] as u32).to_le_bytes())?;
    for v in features.iter() {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(labels_sidecar(path), text)?;
    Ok(())
}

pub fn read_embedding_cache(path: &Path) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    read_exact(&mut f, &mut magic, "cache magic")?;
    if &magic != EMBEDDING_MAGIC {
        return Err(Error::Corrupt("bad embedding cache magic".into()));
    }
    let version = read_u32(&mut f, "cache version")?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Corrupt(format!("unsupported cache version {version}")));
    }
    let n = read_u32(&mut f, "cache row count")? as usize;
    let dim = read_u32(&mut f, "cache dim")? as usize;
    let mut buf = vec![0u8; n * dim * 4];
    read_exact(&mut f, &mut buf, "cache payload")?;
    let mut rest = [0u8; 1];
    if f.read(&mut rest)? != 0 {
        return Err(Error::Corrupt("trailing bytes after cache payload".into()));
    }
    let values: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let features = Array2::from_shape_vec((n, dim), values)
        .map_err(|_| Error::Corrupt("cache payload shape mismatch".into()))?;

    let labels_text = fs::read_to_string(labels_sidecar(path))?;
    let labels: Vec<usize> = labels_text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.trim().parse().map_err(|_| Error::Corrupt(format!("bad label line '{l}'"))))
        .collect::<Result<_>>()?;
    if labels.len() != n {
        return Err(Error::Corrupt(format!(
            "labels sidecar has {} entries, cache has {n} rows",
            labels.len()
        )));
    }
    Ok((features, labels))
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

/// Layout: `<split>_labels.txt` (one integer per line) plus `<split>_data.bin`
/// (a tensor container holding one entry named `data` of shape `[n, ...]`).
pub fn save_dataset_dir(dir: &Path, train: &[LabeledExample], test: &[LabeledExample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (split, examples) in [("train", train), ("test", test)] {
        let labels: String = examples.iter().map(|e| format!("{}\n", e.label)).collect();
        fs::write(dir.join(format!("{split}_labels.txt")), labels)?;
        let shape = examples
            .first()
            .map(|e| e.input.shape().to_vec())
            .ok_or_else(|| Error::data(format!("empty {split} split")))?;
        let mut dims = vec![examples.len()];
        dims.extend(&shape);
        let mut stacked = ArrayD::<f64>::zeros(IxDyn(&dims));
        for (i, e) in examples.iter().enumerate() {
            if e.input.shape() != shape.as_slice() {
                return Err(Error::shape("dataset examples have mixed shapes"));
            }
            stacked.index_axis_mut(ndarray::Axis(0), i).assign(&e.input);
        }
        write_tensors(&dir.join(format!("{split}_data.bin")), &[("data".to_string(), stacked)])?;
    }
    Ok(())
}

pub fn load_dataset_dir(dir: &Path) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let mut splits = Vec::with_capacity(2);
    for split in ["train", "test"] {
        let labels_text = fs::read_to_string(dir.join(format!("{split}_labels.txt")))?;
        let labels: Vec<usize> = labels_text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.trim().parse().map_err(|_| Error::Corrupt(format!("bad label '{l}'"))))
            .collect::<Result<_>>()?;
        let tensors = read_tensors(&dir.join(format!("{split}_data.bin")))?;
        let (name, data) = tensors
            .into_iter()
            .next()
            .ok_or_else(|| Error::Corrupt("dataset container is empty".into()))?;
        if name != "data" {
            return Err(Error::Corrupt(format!("expected entry 'data', found '{name}'")));
        }
        if data.shape()[0] != labels.len() {
            return Err(Error::Corrupt(format!(
                "{split}: {} tensors vs {} labels",
                data.shape()[0],
                labels.len()
            )));
        }
        let examples: Vec<LabeledExample> = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| LabeledExample {
                input: data.index_axis(ndarray::Axis(0), i).to_owned(),
                label,
            })
            .collect();
        splits.push(examples);
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok((train, test))
}

/// Loader for the classic 32x32 RGB 100-class binary layout: records of
/// 2 label bytes (coarse, fine) + 3072 pixel bytes, files `train.bin` and
/// `test.bin`. Pixels are scaled to `[0, 1]`; the fine label is used.
pub fn load_cifar100_dir(dir: &Path) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let mut out = Vec::with_capacity(2);
    for split in ["train", "test"] {
        let bytes = fs::read(dir.join(format!("{split}.bin")))?;
        const REC: usize = 2 + 3072;
        if bytes.is_empty() || bytes.len() % REC != 0 {
            return Err(Error::Corrupt(format!(
                "{split}.bin length {} is not a multiple of {REC}",
                bytes.len()
            )));
        }
        let mut examples = Vec::with_capacity(bytes.len() / REC);
        for rec in bytes.chunks_exact(REC) {
            let label = rec[1] as usize;
            let pixels: Vec<f64> = rec[2..].iter().map(|&b| b as f64 / 255.0).collect();
            let input = ArrayD::from_shape_vec(IxDyn(&[3, 32, 32]), pixels)
                .expect("3072 bytes reshape to [3, 32, 32]");
            examples.push(LabeledExample { input, label });
        }
        out.push(examples);
    }
    let test = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Learner state persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    embedder: EmbedderMeta,
    feature_dim: usize,
    stage: usize,
    frozen_after: usize,
    head_classes: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum EmbedderMeta {
    Single,
    Merged,
    ProjectedSingle,
    ProjectedMerged,
}

/// Persist checkpoints, bank, optional projector and head into a directory.
pub fn save_state(state: &LearnerState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (meta_kind, projector) = flatten_embedder(&state.embedder, dir)?;
    write_tensors(&dir.join("bank.tns"), &state.bank.to_tensors())?;
    if let Some(p) = projector {
        write_tensors(&dir.join("projector.tns"), &p.to_tensors())?;
    }
    if let Some(seq) = &state.head {
        let entries = vec![
            ("head.w".to_string(), seq.head.w.clone().into_dyn()),
            ("head.b".to_string(), seq.head.b.clone().into_dyn()),
        ];
        write_tensors(&dir.join("head.tns"), &entries)?;
    }
    let meta = StateMeta {
        embedder: meta_kind,
        feature_dim: state.bank.feature_dim(),
        stage: state.stage,
        frozen_after: state.frozen_after,
        head_classes: state.head.as_ref().map(|h| h.col_classes.clone()),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::config(format!("state meta: {e}")))?;
    fs::write(dir.join("state.toml"), text)?;
    Ok(())
}

fn flatten_embedder<'a>(
    embedder: &'a RunEmbedder,
    dir: &Path,
) -> Result<(EmbedderMeta, Option<&'a Projector>)> {
    match embedder {
        RunEmbedder::Single(b) => {
            save_checkpoint(b, &dir.join("embedder.ckpt"))?;
            Ok((EmbedderMeta::Single, None))
        }
        RunEmbedder::Merged(m) => {
            save_checkpoint(m.adapted(), &dir.join("adapted.ckpt"))?;
            save_checkpoint(m.pretrained(), &dir.join("pretrained.ckpt"))?;
            Ok((EmbedderMeta::Merged, None))
        }
        RunEmbedder::Projected { inner, projector } => {
            let (inner_kind, _) = flatten_embedder(inner, dir)?;
            let kind = match inner_kind {
                EmbedderMeta::Single => EmbedderMeta::ProjectedSingle,
                EmbedderMeta::Merged => EmbedderMeta::ProjectedMerged,
                _ => return Err(Error::config("nested projected embedders are not persisted")),
            };
            Ok((kind, Some(projector)))
        }
    }
}

pub fn load_state(dir: &Path) -> Result<LearnerState> {
    let meta: StateMeta = toml::from_str(&fs::read_to_string(dir.join("state.toml"))?)
        .map_err(|e| Error::Corrupt(format!("bad state meta: {e}")))?;
    let load_frozen = |name: &str| -> Result<Backbone> {
        let mut b = load_checkpoint(&dir.join(name))?;
        b.freeze();
        Ok(b)
    };
    let base = match meta.embedder {
        EmbedderMeta::Single | EmbedderMeta::ProjectedSingle => {
            RunEmbedder::Single(load_frozen("embedder.ckpt")?)
        }
        EmbedderMeta::Merged | EmbedderMeta::ProjectedMerged => RunEmbedder::Merged(
            crate::embedder::MergedEmbedder::new(load_frozen("adapted.ckpt")?, load_frozen("pretrained.ckpt")?)?,
        ),
    };
    let embedder = match meta.embedder {
        EmbedderMeta::ProjectedSingle | EmbedderMeta::ProjectedMerged => {
            let projector = Projector::from_tensors(read_tensors(&dir.join("projector.tns"))?)?;
            RunEmbedder::Projected { inner: Box::new(base), projector }
        }
        _ => base,
    };
    let bank = PrototypeBank::from_tensors(meta.feature_dim, read_tensors(&dir.join("bank.tns"))?)?;
    let head = match meta.head_classes {
        None => None,
        Some(col_classes) => {
            let tensors: std::collections::HashMap<String, ArrayD<f64>> =
                read_tensors(&dir.join("head.tns"))?.into_iter().collect();
            let w = tensors
                .get("head.w")
                .ok_or_else(|| Error::Corrupt("head container missing head.w".into()))?
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| Error::Corrupt("head.w must be rank 2".into()))?;
            let b = tensors
                .get("head.b")
                .ok_or_else(|| Error::Corrupt("head container missing head.b".into()))?
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| Error::Corrupt("head.b must be rank 1".into()))?;
            Some(SeqHead { head: LinearHead { w, b }, col_classes })
        }
    };
    Ok(LearnerState { embedder, bank, head, stage: meta.stage, frozen_after: meta.frozen_after })
}

/// Convenience: embed a whole dataset and persist the cache (rows in dataset
/// order) plus the labels sidecar.
pub fn embed_dataset_to_cache<E: crate::embedder::Embedder + ?Sized>(
    embedder: &E,
    data: &[LabeledExample],
    path: &Path,
) -> Result<()> {
    let inputs: Vec<&Tensor> = data.iter().map(|e| &e.input).collect();
    let features = crate::embedder::embed_batch(embedder, &inputs)?;
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    write_embedding_cache(path, &features, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn random_tensor(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::named_rng(seed, "io/test");
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            // Values exactly representable in f32 keep round trips bitwise.
            (rng.gen_range(-1000i32..1000) as f64) / 64.0
        })
    }

    #[test]
    fn container_round_trip_and_corruption() {
        let dir = tmp();
        let path = dir.path().join("t.tns");
        let entries = vec![
            ("a".to_string(), random_tensor(&[2, 3], 1)),
            ("b.weight".to_string(), random_tensor(&[4], 2)),
        ];
        write_tensors(&path, &entries).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, v0), (n1, v1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(v0, v1);
        }

        // Truncation is detected.
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Corrupt(_))));

        // Bad magic is detected.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn checkpoint_round_trip_preserves_weights_funcionally() {
        let dir = tmp();
        let spec = crate::backbone::CnnSpec {
            image: [1, 8, 8],
            channels: vec![4],
            kernel: 3,
            strides: vec![2],
            bn_eps: 1e-5,
        };
        let b = Backbone::new_toy_cnn(spec, 3).unwrap();
        let path = dir.path().join("b.ckpt");
        save_checkpoint(&b, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.kind(), b.kind());
        assert_eq!(loaded.embed_dim(), b.embed_dim());
        // Weights pass through f32; a second round trip is exact.
        save_checkpoint(&loaded, &path).unwrap();
        let again = load_checkpoint(&path).unwrap();
        assert_eq!(again.param_hash(), loaded.param_hash());
    }

    #[test]
    fn embedding_cache_layout_and_round_trip() {
        let dir = tmp();
        let path = dir.path().join("e.emb");
        let feats = {
            let mut rng = crate::rng::named_rng(0, "cache");
            Array2::from_shape_fn((10, 64), |_| (rng.gen_range(-512i32..512) as f64) / 256.0)
        };
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        write_embedding_cache(&path, &feats, &labels).unwrap();

        // magic 8 + version 4 + n 4 + dim 4 + payload n*dim*4
        let size = fs::metadata(&path).unwrap().len();
        assert_eq!(size, 20 + 10 * 64 * 4);

        let (back, back_labels) = read_embedding_cache(&path).unwrap();
        assert_eq!(back_labels, labels);
        for (a, b) in feats.iter().zip(back.iter()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*a, *b); // values chosen exactly representable
        }

        // Truncated payload is a corrupt-cache error.
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_embedding_cache(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tmp();
        let make = |n: usize, seed: u64| -> Vec<LabeledExample> {
            (0..n)
                .map(|i| LabeledExample { input: random_tensor(&[2, 3], seed + i as u64), label: i % 4 })
                .collect()
        };
        let train = make(8, 100);
        let test = make(5, 200);
        save_dataset_dir(dir.path(), &train, &test).unwrap();
        let (t2, s2) = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(t2.len(), 8);
        assert_eq!(s2.len(), 5);
        for (a, b) in train.iter().zip(&t2) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.input, b.input);
        }
    }

    #[test]
    fn cifar_layout_parses() {
        let dir = tmp();
        let mut bytes = Vec::new();
        for i in 0..3u8 {
            bytes.push(0); // coarse
            bytes.push(i); // fine
            bytes.extend(std::iter::repeat(128u8).take(3072));
        }
        fs::write(dir.path().join("train.bin"), &bytes).unwrap();
        fs::write(dir.path().join("test.bin"), &bytes).unwrap();
        let (train, test) = load_cifar100_dir(dir.path()).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.len(), 3);
        assert_eq!(train[2].label, 2);
        assert_eq!(train[0].input.shape(), &[3, 32, 32]);
        assert!((train[0].input[[0, 0, 0]] - 128.0 / 255.0).abs() < 1e-12);

        fs::write(dir.path().join("train.bin"), &bytes[..100]).unwrap();
        assert!(matches!(load_cifar100_dir(dir.path()), Err(Error::Corrupt(_))));
    }
}
