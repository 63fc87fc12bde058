use crate::error::{Error, Result};
use crate::models::{DiffModel, ModelSpec, TextModel, Vocabulary};
use crate::util::atomic_write;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Checkpoint layout: the magic bytes, a little-endian u32 header length,
/// a JSON header, then the flat little-endian f64 parameter block in the
/// header's declared order.
const MAGIC: &[u8; 5] = b"KGAC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: ModelSpec,
    vocab_hash: String,
    seed: u64,
    params: Vec<(String, Vec<usize>)>,
}

pub fn save_model(model: &TextModel, path: &Path) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        arch: model.spec(),
        vocab_hash: format!("{:016x}", model.vocab().content_hash()),
        seed: model.seed(),
        params: model.params().iter().map(|(n, a)| (n.clone(), a.shape().to_vec())).collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(5 + 4 + header_json.len() + model.params().value_count() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, arr) in model.params().iter() {
        for v in arr.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn load_model(path: &Path, vocab: Arc<Vocabulary>) -> Result<TextModel> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header_end = 9 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Checkpoint("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[9..header_end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", header.format_version)));
    }
    let want_hash = format!("{:016x}", vocab.content_hash());
    if header.vocab_hash != want_hash {
        return Err(Error::Checkpoint(format!(
            "vocabulary hash mismatch: checkpoint {} vs supplied {want_hash}",
            header.vocab_hash
        )));
    }

    let mut model = TextModel::init(&header.arch, vocab, header.seed)?;
    let mut offset = header_end;
    for (name, shape) in &header.params {
        let slot = model
            .params_mut()
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint parameter {name} not in architecture")))?;
        if slot.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?} in checkpoint, {:?} in architecture",
                shape,
                slot.shape()
            )));
        }
        let n = slot.len();
        if bytes.len() < offset + n * 8 {
            return Err(Error::Checkpoint("truncated parameter block".into()));
        }
        for (i, v) in slot.data_mut().iter_mut().enumerate() {
            *v = f64::from_le_bytes(bytes[offset + i * 8..offset + (i + 1) * 8].try_into().unwrap());
        }
        offset += n * 8;
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter block".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Corpus, CorpusKind, Instance};
    use crate::models::{OutputModel, Seq2SeqFamily, Seq2SeqModel};

    fn vocab() -> Arc<Vocabulary> {
        let corpus = Corpus::new(
            CorpusKind::Seq2Seq,
            vec![Instance::pair("a", "s1 s2 s3", "t1 t2 t3")],
            "t",
        )
        .unwrap();
        Arc::new(Vocabulary::from_corpora(&[&corpus], 1))
    }

    #[test]
    fn save_load_forward_is_bit_identical() {
        let v = vocab();
        let model = TextModel::Seq2Seq(Seq2SeqModel::init(Seq2SeqFamily::Recurrent, 5, 7, Arc::clone(&v), 21).unwrap());
        let inst = Instance::pair("x", "s2 s1", "t3 t1");
        let before = model.distributions(&inst).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.kgac");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path, v).unwrap();
        let after = loaded.distributions(&inst).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!(a.probs().iter().zip(b.probs()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn wrong_vocabulary_is_rejected() {
        let v = vocab();
        let model = TextModel::Seq2Seq(Seq2SeqModel::init(Seq2SeqFamily::Recurrent, 5, 7, Arc::clone(&v), 21).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.kgac");
        save_model(&model, &path).unwrap();

        let other = Corpus::new(CorpusKind::Seq2Seq, vec![Instance::pair("a", "different tokens", "here now")], "t").unwrap();
        let wrong = Arc::new(Vocabulary::from_corpora(&[&other], 1));
        assert!(load_model(&path, wrong).is_err());
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.kgac");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_model(&path, vocab()).is_err());
    }
}
