use crate::data::{Corpus, CorpusKind, Instance, Payload};
use crate::error::{Error, Result};
use crate::util::atomic_write;
use serde::Deserialize;
use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Deserialize)]
struct ClassLine {
    id: Option<String>,
    text: String,
    label: String,
}

#[derive(Deserialize)]
struct PairLine {
    id: Option<String>,
    source: String,
    target: String,
}

/// Loads a JSONL corpus. Classification lines are `{"id"?, "text", "label"}`,
/// seq2seq lines `{"id"?, "source", "target"}`. Missing ids become the
/// 1-based line number. Order is preserved; malformed lines and duplicate
/// ids are rejected with their line number.
pub fn load_corpus(path: &Path, kind: CorpusKind) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, payload) = match kind {
            CorpusKind::Classification => {
                let parsed: ClassLine = serde_json::from_str(&line)
                    .map_err(|e| Error::DataLine { line: line_no, message: e.to_string() })?;
                (parsed.id, Payload::Labeled { text: parsed.text, label: parsed.label })
            }
            CorpusKind::Seq2Seq => {
                let parsed: PairLine = serde_json::from_str(&line)
                    .map_err(|e| Error::DataLine { line: line_no, message: e.to_string() })?;
                (parsed.id, Payload::Pair { source: parsed.source, target: parsed.target })
            }
        };
        let id = id.unwrap_or_else(|| line_no.to_string());
        if !seen.insert(id.clone()) {
            return Err(Error::DataLine { line: line_no, message: format!("duplicate id {id:?}") });
        }
        instances.push(Instance { id, payload });
    }
    if instances.is_empty() {
        return Err(Error::Data(format!("empty corpus: {}", path.display())));
    }
    Corpus::new(kind, instances, path.display().to_string())
}

/// Writes a corpus back to JSONL with explicit ids, one compact object per
/// line, fields in load order. Loading a saved corpus reproduces it exactly.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for inst in corpus.instances() {
        let line = match &inst.payload {
            Payload::Labeled { text, label } => serde_json::json!({
                "id": inst.id, "text": text, "label": label,
            }),
            Payload::Pair { source, target } => serde_json::json!({
                "id": inst.id, "source": source, "target": target,
            }),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_three_line_classification_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"text\":\"a b\",\"label\":\"L0\"}\n{\"text\":\"c\",\"label\":\"L1\"}\n{\"id\":\"z\",\"text\":\"d\",\"label\":\"L0\"}\n",
        )
        .unwrap();
        let corpus = load_corpus(&path, CorpusKind::Classification).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.get(0).id, "1");
        assert_eq!(corpus.get(2).id, "z");
        assert_eq!(corpus.get(0).input_tokens(), vec!["a", "b"]);
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let err = load_corpus(&path, CorpusKind::Classification).unwrap_err();
        assert!(err.to_string().contains("empty corpus"));
    }

    #[test]
    fn seq2seq_line_tokenizes_both_sides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(&path, "{\"source\":\"a b\",\"target\":\"b a\"}\n").unwrap();
        let corpus = load_corpus(&path, CorpusKind::Seq2Seq).unwrap();
        assert_eq!(corpus.get(0).input_tokens().len(), 2);
        assert_eq!(corpus.get(0).target_tokens().len(), 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"text\":\"ok\",\"label\":\"L0\"}\nnot json\n").unwrap();
        match load_corpus(&path, CorpusKind::Classification) {
            Err(Error::DataLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn save_then_load_round_trips_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = Corpus::new(
            CorpusKind::Seq2Seq,
            vec![Instance::pair("a", "x  y", "y x"), Instance::pair("b", "z", "z")],
            "test",
        )
        .unwrap();
        save_corpus(&corpus, &path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let loaded = load_corpus(&path, CorpusKind::Seq2Seq).unwrap();
        assert_eq!(loaded.instances(), corpus.instances());
        save_corpus(&loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes1);
    }
}
