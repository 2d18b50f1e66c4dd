//! Customer interest embeddings, selling point embeddings and cosine
//! assignment.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::nn::Matrix;
use crate::screener::ScreenerModel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub word: String,
    pub score: f64,
}

/// One line of `profiles.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerProfile {
    pub customer_id: String,
    pub keywords: Vec<Keyword>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterestEmbedding(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct SellingPointEmbedding(pub Vec<f64>);

/// Token → vector lookup.
///
/// Text file layout: a header line `D count`, then `count` lines of
/// `token v_1 … v_D` separated by single spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    vectors: Matrix,
}

impl EmbeddingTable {
    pub fn new(tokens: Vec<String>, vectors: Matrix) -> Result<Self> {
        if tokens.len() != vectors.rows() {
            return Err(Error::dims(
                "EmbeddingTable::new",
                format!("{} tokens for {} rows", tokens.len(), vectors.rows()),
            ));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("embedding table".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate embedding token {t:?}")));
            }
        }
        Ok(EmbeddingTable { index, tokens, vectors })
    }

    /// The screener's input embedding table, keyed by its vocabulary.
    pub fn from_screener(model: &ScreenerModel) -> Self {
        EmbeddingTable::new(model.vocab.tokens().to_vec(), model.params.embedding.clone())
            .expect("screener vocabulary matches its embedding rows")
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.vectors.row(i))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{} {}", self.dim(), self.len())?;
        for (i, tok) in self.tokens.iter().enumerate() {
            write!(w, "{tok}")?;
            for v in self.vectors.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))??;
        let mut parts = header.split_whitespace();
        let mut next_num = |what: &str| -> Result<usize> {
            parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(1, format!("header needs {what}")))
        };
        let dim = next_num("dimension")?;
        let count = next_num("count")?;
        let mut tokens = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 2;
            let mut fields = line.split(' ');
            let tok = fields.next().unwrap_or_default().to_string();
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>().map_err(|e| parse_err(lineno, e.to_string())))
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(parse_err(lineno, format!("expected {dim} values, found {}", values.len())));
            }
            tokens.push(tok);
            data.extend(values);
        }
        if tokens.len() != count {
            return Err(parse_err(1, format!("header says {count} rows, found {}", tokens.len())));
        }
        EmbeddingTable::new(tokens, Matrix::from_vec(count, dim, data)?)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `H = (1/N) Σ h_i·s_i` over all `N` keywords; OOV keywords contribute a
/// zero vector but still count towards `N`.
pub fn interest_embedding(profile: &CustomerProfile, table: &EmbeddingTable) -> Result<InterestEmbedding> {
    let unembeddable = || Error::UnembeddableProfile(profile.customer_id.clone());
    if profile.keywords.is_empty() {
        return Err(unembeddable());
    }
    if profile.keywords.iter().any(|k| !(k.score >= 0.0) || !k.score.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "profile {:?} has a negative or non-finite keyword score",
            profile.customer_id
        )));
    }
    let n = profile.keywords.len() as f64;
    let mut h = vec![0.0; table.dim()];
    for kw in &profile.keywords {
        if let Some(v) = table.get(&kw.word.to_lowercase()) {
            for (acc, x) in h.iter_mut().zip(v) {
                *acc += x * kw.score;
            }
        }
    }
    h.iter_mut().for_each(|x| *x /= n);
    if norm(&h) == 0.0 {
        return Err(unembeddable());
    }
    Ok(InterestEmbedding(h))
}

/// `G = Σ` token embeddings; OOV tokens contribute nothing.
pub fn sellingpoint_embedding(text: &str, table: &EmbeddingTable) -> Result<SellingPointEmbedding> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::Unscoreable(text.to_string()));
    }
    let mut g = vec![0.0; table.dim()];
    for tok in &tokens {
        if let Some(v) = table.get(tok) {
            for (acc, x) in g.iter_mut().zip(v) {
                *acc += x;
            }
        }
    }
    Ok(SellingPointEmbedding(g))
}

/// `H·G / (‖H‖₂‖G‖₂)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(h: &[f64], g: &[f64]) -> Result<f64> {
    if h.len() != g.len() {
        return Err(Error::dims("cosine_similarity", format!("{} vs {}", h.len(), g.len())));
    }
    let (nh, ng) = (norm(h), norm(g));
    if nh == 0.0 || ng == 0.0 || !nh.is_finite() || !ng.is_finite() {
        return Err(Error::UndefinedSimilarity);
    }
    let d: f64 = h.iter().zip(g).map(|(a, b)| a * b).sum();
    Ok((d / (nh * ng)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub index: usize,
    pub similarity: f64,
}

/// Argmax of cosine similarity between an interest embedding and candidate
/// embeddings; ties go to the lowest index and undefined similarities are
/// skipped.
pub fn assign_embeddings(h: &InterestEmbedding, candidates: &[SellingPointEmbedding]) -> Result<Assignment> {
    let mut best: Option<Assignment> = None;
    for (index, g) in candidates.iter().enumerate() {
        let Ok(similarity) = cosine_similarity(&h.0, &g.0) else {
            continue;
        };
        if best.is_none_or(|b| similarity > b.similarity) {
            best = Some(Assignment { index, similarity });
        }
    }
    best.ok_or(Error::UnembeddableCandidates)
}

pub fn assign<S: AsRef<str>>(profile: &CustomerProfile, selling_points: &[S], table: &EmbeddingTable) -> Result<Assignment> {
    let h = interest_embedding(profile, table)?;
    let gs: Vec<SellingPointEmbedding> = selling_points
        .iter()
        .map(|s| sellingpoint_embedding(s.as_ref(), table).unwrap_or(SellingPointEmbedding(vec![0.0; table.dim()])))
        .collect();
    assign_embeddings(&h, &gs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &[f64])]) -> EmbeddingTable {
        let tokens = rows.iter().map(|(t, _)| t.to_string()).collect();
        let m = Matrix::from_rows(&rows.iter().map(|(_, v)| v.to_vec()).collect::<Vec<_>>()).unwrap();
        EmbeddingTable::new(tokens, m).unwrap()
    }

    fn profile(kws: &[(&str, f64)]) -> CustomerProfile {
        CustomerProfile {
            customer_id: "c".into(),
            keywords: kws
                .iter()
                .map(|(w, s)| Keyword {
                    word: w.to_string(),
                    score: *s,
                })
                .collect(),
        }
    }

    /// Battery and screen tokens on separate axes.
    pub(crate) fn battery_table() -> EmbeddingTable {
        table(&[
            ("long", &[0.2, 0.1, 0.0]),
            ("battery", &[1.0, 0.0, 0.0]),
            ("life", &[0.5, 0.0, 0.1]),
            ("high", &[0.0, 0.2, 0.1]),
            ("refresh", &[0.0, 1.0, 0.0]),
            ("rate", &[0.0, 0.6, 0.1]),
            ("screen", &[0.0, 0.9, 0.0]),
        ])
    }

    #[test]
    fn interest_examples() {
        let t = table(&[("x", &[1.0, 0.0]), ("y", &[0.0, 1.0])]);
        assert_eq!(interest_embedding(&profile(&[("x", 1.0)]), &t).unwrap().0, [1.0, 0.0]);
        assert_eq!(interest_embedding(&profile(&[("x", 2.0), ("y", 4.0)]), &t).unwrap().0, [1.0, 2.0]);
        // OOV keyword still counts in N
        assert_eq!(interest_embedding(&profile(&[("x", 2.0), ("zz", 4.0)]), &t).unwrap().0, [1.0, 0.0]);
        assert!(matches!(
            interest_embedding(&profile(&[("x", 0.0), ("y", 0.0)]), &t),
            Err(Error::UnembeddableProfile(_))
        ));
        assert!(interest_embedding(&profile(&[("zz", 1.0)]), &t).is_err());
        assert!(interest_embedding(&profile(&[("x", -1.0)]), &t).is_err());
    }

    #[test]
    fn selling_point_examples() {
        let t = table(&[("x", &[1.0, 0.0]), ("y", &[0.0, 1.0])]);
        assert_eq!(sellingpoint_embedding("x", &t).unwrap().0, [1.0, 0.0]);
        assert_eq!(sellingpoint_embedding("x x", &t).unwrap().0, [2.0, 0.0]);
        assert_eq!(sellingpoint_embedding("x y", &t).unwrap().0, [1.0, 1.0]);
        assert_eq!(sellingpoint_embedding("qq", &t).unwrap().0, [0.0, 0.0]);
        assert!(sellingpoint_embedding("", &t).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::UndefinedSimilarity)));
    }

    #[test]
    fn assign_examples() {
        let t = battery_table();
        let p = profile(&[("battery", 0.9), ("screen", 0.1)]);
        let got = assign(&p, &["high refresh rate screen", "long battery life"], &t).unwrap();
        assert_eq!(got.index, 1);
        assert_eq!(assign(&p, &["high refresh rate screen"], &t).unwrap().index, 0);
        assert_eq!(assign(&p, &["long battery life", "long battery life"], &t).unwrap().index, 0);
        assert!(matches!(assign(&p, &["qq zz"], &t), Err(Error::UnembeddableCandidates)));
        // unembeddable candidates are skipped
        assert_eq!(assign(&p, &["qq", "screen"], &t).unwrap().index, 1);
    }

    #[test]
    fn table_file_round_trip() {
        let t = battery_table();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        t.save(&path).unwrap();
        assert_eq!(EmbeddingTable::load(&path).unwrap(), t);
        std::fs::write(&path, "2 1\nx 1.0\n").unwrap();
        assert!(matches!(EmbeddingTable::load(&path), Err(Error::Parse { line: 2, .. })));
    }
}
