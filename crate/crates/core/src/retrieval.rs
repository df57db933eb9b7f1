//! Expression imputation by exact top-k search over gene-branch embeddings.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_table, write_table};
use crate::encoders::ModelParams;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DB_EMBEDDINGS_FILE: &str = "db_embeddings.csv";
pub const DB_EXPRESSION_FILE: &str = "db_expression.csv";
pub const DB_MANIFEST_FILE: &str = "db_manifest.json";

/// Unit-norm gene embeddings of reference spots with their expression.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDb {
    pub embeddings: Matrix,
    pub expression: Matrix,
    pub spot_ids: Vec<String>,
    pub gene_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbManifest {
    pub n_spots: usize,
    pub embed_dim: usize,
    pub n_genes: usize,
    pub seed: u64,
    pub model_hash: String,
}

impl EmbeddingDb {
    pub fn new(embeddings: Matrix, expression: Matrix, spot_ids: Vec<String>, gene_names: Vec<String>) -> Result<Self> {
        let n = embeddings.rows();
        if expression.rows() != n || spot_ids.len() != n || gene_names.len() != expression.cols() {
            return Err(Error::Input(format!(
                "database parts disagree: {n} embeddings, {} expression rows, {} ids, {} genes for {} columns",
                expression.rows(),
                spot_ids.len(),
                gene_names.len(),
                expression.cols()
            )));
        }
        Ok(Self {
            embeddings,
            expression,
            spot_ids,
            gene_names,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks databases built from several slices.
    pub fn concat(parts: &[EmbeddingDb]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("no databases to concatenate".into()))?;
        if let Some(p) = parts.iter().find(|p| p.gene_names != first.gene_names) {
            return Err(Error::Input(format!(
                "gene lists differ between database parts ({} vs {} genes)",
                first.gene_names.len(),
                p.gene_names.len()
            )));
        }
        let emb: Vec<&Matrix> = parts.iter().map(|p| &p.embeddings).collect();
        let expr: Vec<&Matrix> = parts.iter().map(|p| &p.expression).collect();
        Self::new(
            Matrix::vstack(&emb)?,
            Matrix::vstack(&expr)?,
            parts.iter().flat_map(|p| p.spot_ids.iter().cloned()).collect(),
            first.gene_names.clone(),
        )
    }

    pub fn save(&self, dir: &Path, manifest: &DbManifest) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let cols: Vec<String> = (0..self.embeddings.cols()).map(|j| format!("e{j}")).collect();
        write_table(&dir.join(DB_EMBEDDINGS_FILE), &self.spot_ids, &cols, &self.embeddings)?;
        write_table(&dir.join(DB_EXPRESSION_FILE), &self.spot_ids, &self.gene_names, &self.expression)?;
        let path = dir.join(DB_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::file(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, DbManifest)> {
        let emb = read_table(&dir.join(DB_EMBEDDINGS_FILE))?;
        let expr = read_table(&dir.join(DB_EXPRESSION_FILE))?;
        if emb.ids != expr.ids {
            return Err(Error::Data("database files list different spots".into()));
        }
        let path = dir.join(DB_MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let manifest: DbManifest = serde_json::from_str(&text)?;
        let db = Self::new(emb.values, expr.values, emb.ids, expr.columns)?;
        if (db.len(), db.embeddings.cols(), db.gene_names.len())
            != (manifest.n_spots, manifest.embed_dim, manifest.n_genes)
        {
            return Err(Error::Data("database manifest does not match its files".into()));
        }
        Ok((db, manifest))
    }
}

/// Gene-branch embeddings of a reference slice with its expression.
pub fn build_database(
    model: &ModelParams,
    propagation: &Matrix,
    talpha: &Matrix,
    expression: &Matrix,
    spot_ids: &[String],
    gene_names: &[String],
) -> Result<EmbeddingDb> {
    if expression.rows() != talpha.rows() {
        return Err(Error::Input(format!(
            "{} expression rows for {} spots",
            expression.rows(),
            talpha.rows()
        )));
    }
    let embeddings = model.gene_embeddings(propagation, talpha)?;
    EmbeddingDb::new(embeddings, expression.clone(), spot_ids.to_vec(), gene_names.to_vec())
}

/// Image-branch embeddings of a query slice over its own graph.
pub fn embed_queries(model: &ModelParams, propagation: &Matrix, image_features: &Matrix) -> Result<Matrix> {
    model.image_embeddings(propagation, image_features)
}

/// Retrieved database rows for one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Descending similarity, ascending index on ties.
fn rank(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Exact top-`k` database rows by cosine similarity for every query row.
pub fn query_topk(db: &EmbeddingDb, queries: &Matrix, k: usize) -> Result<Vec<Neighbors>> {
    if k == 0 || k > db.len() {
        return Err(Error::Parameter(format!("k={k} outside 1..={}", db.len())));
    }
    if queries.cols() != db.embeddings.cols() {
        return Err(Error::Input(format!(
            "queries have {} dimensions, database has {}",
            queries.cols(),
            db.embeddings.cols()
        )));
    }
    let sims = queries.matmul_t(&db.embeddings);
    Ok(sims
        .row_iter()
        .map(|row| {
            let mut scored: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
            if k < scored.len() {
                scored.select_nth_unstable_by(k - 1, rank);
                scored.truncate(k);
            }
            scored.sort_unstable_by(rank);
            Neighbors {
                indices: scored.iter().map(|s| s.0).collect(),
                scores: scored.iter().map(|s| s.1).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Plain average of the retrieved rows.
    #[default]
    Uniform,
    /// Weights proportional to positive similarity; uniform if none is positive.
    Similarity,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "similarity" => Ok(Weighting::Similarity),
            other => Err(Error::Parameter(format!("unknown weighting `{other}` (uniform|similarity)"))),
        }
    }
}

/// Averages the retrieved expression rows of every query.
pub fn predict_expression(db: &EmbeddingDb, neighbors: &[Neighbors], weighting: Weighting) -> Result<Matrix> {
    let g = db.expression.cols();
    let mut out = Matrix::zeros(neighbors.len(), g);
    for (q, nb) in neighbors.iter().enumerate() {
        if nb.indices.is_empty() {
            return Err(Error::Input(format!("query {q} has no neighbors")));
        }
        if let Some(&bad) = nb.indices.iter().find(|&&i| i >= db.len()) {
            return Err(Error::Data(format!("neighbor index {bad} outside the database of {}", db.len())));
        }
        let mut weights: Vec<f64> = match weighting {
            Weighting::Uniform => vec![1.0; nb.indices.len()],
            Weighting::Similarity => nb.scores.iter().map(|s| s.max(0.0)).collect(),
        };
        if weights.iter().sum::<f64>() <= 0.0 {
            weights.fill(1.0);
        }
        let total: f64 = weights.iter().sum();
        let row = out.row_mut(q);
        for (&i, w) in nb.indices.iter().zip(&weights) {
            for (o, v) in row.iter_mut().zip(db.expression.row(i)) {
                *o += w * v;
            }
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}
