use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Vocabulary;
use crate::error::{Error, Result};
use crate::grad::{Scalar, Tensor};

/// Builds a `[|V|, dim]` embedding table from a whitespace-separated text
/// file (`token v1 ... v_dim` per line). Rows for tokens absent from the file
/// are drawn from uniform(-0.1, 0.1) with `seed`. Returns the table and the
/// fraction of vocabulary rows found in the file.
pub fn load_embeddings<T: Scalar>(path: &Path, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<(Tensor<T>, f64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table: Tensor<T> = Tensor::uniform(&[vocab.len(), dim], 0.1, &mut rng);
    let mut found = vec![false; vocab.len()];
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Format {
                line: lineno + 1,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if let Some(id) = vocab.id(token) {
            if !found[id] {
                found[id] = true;
                let row = &mut table.data_mut()[id * dim..(id + 1) * dim];
                for (r, v) in row.iter_mut().zip(values) {
                    *r = T::from_f64(v);
                }
            }
        }
    }
    let coverage = found.iter().filter(|&&f| f).count() as f64 / vocab.len() as f64;
    Ok((table, coverage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn full_coverage() {
        let vocab = Vocabulary::from_tokens(Vec::<String>::new());
        let f = write("<pad> 0 0\n<unk> 1 1\n<sos> 2 2\n<eos> 3 3\n");
        let (t, cov) = load_embeddings::<f64>(f.path(), &vocab, 2, 0).unwrap();
        assert_eq!(cov, 1.0);
        assert_eq!(t.row(3), &[3.0, 3.0]);
    }

    #[test]
    fn empty_file_is_random_but_seeded() {
        let vocab = Vocabulary::from_tokens(["a", "b"]);
        let f = write("");
        let (t1, cov) = load_embeddings::<f32>(f.path(), &vocab, 3, 9).unwrap();
        let (t2, _) = load_embeddings::<f32>(f.path(), &vocab, 3, 9).unwrap();
        let (t3, _) = load_embeddings::<f32>(f.path(), &vocab, 3, 10).unwrap();
        assert_eq!(cov, 0.0);
        assert_eq!(t1, t2);
        assert_ne!(t1, t3);
        assert!(t1.data().iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn partial_file_rows_are_exact() {
        let vocab = Vocabulary::from_tokens(["hotel", "cheap"]);
        let f = write("cheap 0.125 -3.5\nmissing 9 9\n");
        let (t, cov) = load_embeddings::<f32>(f.path(), &vocab, 2, 0).unwrap();
        assert_eq!(t.row(vocab.id("cheap").unwrap()), &[0.125f32, -3.5]);
        assert!((cov - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let vocab = Vocabulary::from_tokens(["a"]);
        let f = write("a 1 2\n\nb 1 2 3\n");
        match load_embeddings::<f32>(f.path(), &vocab, 2, 0) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
