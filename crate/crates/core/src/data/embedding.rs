use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Pretrained word vectors; unknown tokens map to the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

/// Embedded utterance: one row per token.
#[derive(Clone, Debug)]
pub struct EmbeddedUtterance {
    pub matrix: Tensor,
    pub oov_count: usize,
}

impl EmbeddedUtterance {
    pub fn oov_rate(&self) -> f64 {
        self.oov_count as f64 / self.matrix.rows() as f64
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    /// Add a vector; an existing token keeps its first vector.
    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "embedding has {} components, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        let token = token.into();
        if self.vectors.contains_key(&token) {
            return Ok(false);
        }
        self.vectors.insert(token, vector);
        Ok(true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn lookup(&self, token: &str) -> Vec<f64> {
        self.get(token).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.dim])
    }

    /// Write in the `<count> <dim>` text format, tokens sorted.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{} {}", self.vectors.len(), self.dim)?;
        let mut tokens: Vec<_> = self.vectors.keys().collect();
        tokens.sort();
        for t in tokens {
            write!(w, "{t}")?;
            for v in &self.vectors[t] {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let err = |line: usize, reason: String| Error::Embedding {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file".into()))??;
    let mut parts = header.split_whitespace();
    let (count, dim) = match (parts.next(), parts.next(), parts.next()) {
        (Some(c), Some(d), None) => (
            c.parse::<usize>().map_err(|e| err(1, format!("bad count: {e}")))?,
            d.parse::<usize>().map_err(|e| err(1, format!("bad dimension: {e}")))?,
        ),
        _ => return Err(err(1, format!("header `{header}` is not `<count> <dim>`"))),
    };
    if dim == 0 {
        return Err(err(1, "dimension must be positive".into()));
    }
    let mut table = EmbeddingTable::new(dim);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(' ').filter(|s| !s.is_empty());
        let token = fields.next().unwrap_or_default();
        let vector = fields
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(lineno, format!("token `{token}`: {e}")))?;
        if vector.len() != dim {
            return Err(err(
                lineno,
                format!("token `{token}` has {} components, header declares {dim}", vector.len()),
            ));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(err(lineno, format!("token `{token}` has a non-finite component")));
        }
        table.insert(token, vector)?;
        rows += 1;
    }
    if rows != count {
        return Err(err(1, format!("header declares {count} vectors, file has {rows}")));
    }
    Ok(table)
}

/// `N × d` matrix of token vectors; OOV rows are zero.
pub fn embed_utterance(tokens: &[String], table: &EmbeddingTable) -> EmbeddedUtterance {
    let mut data = Vec::with_capacity(tokens.len() * table.dim());
    let mut oov_count = 0;
    for t in tokens {
        match table.get(t) {
            Some(v) => data.extend_from_slice(v),
            None => {
                oov_count += 1;
                data.extend(std::iter::repeat_n(0.0, table.dim()));
            }
        }
    }
    let matrix = Tensor::matrix(tokens.len(), table.dim(), data).expect("embed_utterance: empty token list");
    EmbeddedUtterance { matrix, oov_count }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(ts: &[&str]) -> Vec<String> {
        ts.iter().map(|s| s.to_string()).collect()
    }

    fn file(body: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vec.txt");
        std::fs::write(&p, body).unwrap();
        (dir, p)
    }

    #[test]
    fn loads_small_table() {
        let (_d, p) = file("3 4\na 1 0 0 0\nb 0 1 0 0\nc 0 0 1 0.5\n");
        let t = load_embeddings(&p).unwrap();
        assert_eq!((t.len(), t.dim()), (3, 4));
        assert_eq!(t.lookup("zzz"), vec![0.0; 4]);
        assert_eq!(t.lookup("c"), vec![0.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn duplicate_keeps_first() {
        let (_d, p) = file("2 1\na 1\na 2\n");
        let t = load_embeddings(&p).unwrap();
        assert_eq!(t.lookup("a"), vec![1.0]);
    }

    #[test]
    fn short_row_names_line() {
        let row300 = vec!["0.1"; 300].join(" ");
        let row299 = vec!["0.1"; 299].join(" ");
        let (_d, p) = file(&format!("2 300\nok {row300}\nshort {row299}\n"));
        match load_embeddings(&p) {
            Err(Error::Embedding { line, reason, .. }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("short"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn embed_rows_and_oov() {
        let mut t = EmbeddingTable::new(2);
        t.insert("a", vec![1.0, 0.0]).unwrap();
        t.insert("b", vec![0.0, 2.0]).unwrap();
        let e = embed_utterance(&toks(&["a", "a"]), &t);
        assert_eq!(e.matrix.to_rows(), vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(e.oov_rate(), 0.0);
        let e = embed_utterance(&toks(&["x", "y"]), &t);
        assert!(e.matrix.data().iter().all(|&v| v == 0.0));
        assert_eq!(e.oov_rate(), 1.0);
        let e = embed_utterance(&toks(&["a", "b", "q", "a"]), &t);
        assert_eq!(e.oov_rate(), 0.25);
    }

    #[test]
    fn save_roundtrip() {
        let mut t = EmbeddingTable::new(3);
        t.insert("kya", vec![0.1, -0.2, 3.5]).unwrap();
        t.insert("yaar", vec![1e-9, 0.0, -7.25]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        t.save(&p).unwrap();
        assert_eq!(load_embeddings(&p).unwrap(), t);
    }
}
