//! End-to-end fit and predict over slide datasets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Preprocessor, ProcessedSlice, SlideDataset};
use crate::encoders::ModelParams;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objectives::LossBreakdown;
use crate::retrieval::{build_database, embed_queries, predict_expression, query_topk, EmbeddingDb, Weighting};
use crate::train::{train, TrainConfig, TrainingSlice};

/// Model variants with one component removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// No bottleneck term.
    A,
    /// Normalized expression fed to the gene branch without PCA.
    B,
    /// Image branch without its graph encoder.
    C,
    /// Gene branch without its graph encoder.
    D,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::A, Ablation::B, Ablation::C, Ablation::D];

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::A => c.lambda_hsic = 0.0,
            Ablation::B => c.skip_pca = true,
            Ablation::C => c.image_gcn_depth = 0,
            Ablation::D => c.gene_gcn_depth = 0,
        }
        c
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::A => "Model A",
            Ablation::B => "Model B",
            Ablation::C => "Model C",
            Ablation::D => "Model D",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Ablation::A),
            "B" | "b" => Ok(Ablation::B),
            "C" | "c" => Ok(Ablation::C),
            "D" | "d" => Ok(Ablation::D),
            other => Err(Error::Config(format!("unknown ablation `{other}` (A|B|C|D)"))),
        }
    }
}

/// Everything needed to embed new slides: config, fitted preprocessing and
/// trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub preprocessor: Preprocessor,
    pub params: ModelParams,
    pub history: Vec<LossBreakdown>,
}

impl ModelBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }
}

fn training_slice(p: &ProcessedSlice) -> Result<TrainingSlice> {
    Ok(TrainingSlice {
        propagation: p.graph.propagation.clone(),
        gene_input: p
            .talpha
            .clone()
            .ok_or_else(|| Error::Data(format!("training slide {} has no expression", p.slide_id)))?,
        image_input: p.image.clone(),
    })
}

/// Preprocesses the training slides and trains both branches.
pub fn fit(train_slides: &[SlideDataset], cfg: &TrainConfig) -> Result<ModelBundle> {
    cfg.validate()?;
    let preprocessor = Preprocessor::fit(train_slides, cfg.into())?;
    let processed: Vec<ProcessedSlice> = train_slides
        .iter()
        .map(|s| preprocessor.transform(s))
        .collect::<Result<_>>()?;
    let slices: Vec<TrainingSlice> = processed.iter().map(training_slice).collect::<Result<_>>()?;
    let outcome = train(&slices, cfg)?;
    Ok(ModelBundle {
        config: cfg.clone(),
        preprocessor,
        params: outcome.params,
        history: outcome.history,
    })
}

/// Reference database over slides that carry expression.
pub fn database(bundle: &ModelBundle, slides: &[SlideDataset]) -> Result<EmbeddingDb> {
    let parts: Vec<EmbeddingDb> = slides
        .iter()
        .map(|s| {
            let p = bundle.preprocessor.transform(s)?;
            let (Some(expr), Some(talpha)) = (&p.expression, &p.talpha) else {
                return Err(Error::Data(format!("database slide {} has no expression", s.slide_id)));
            };
            build_database(
                &bundle.params,
                &p.graph.propagation,
                talpha,
                expr,
                &p.spot_ids,
                &bundle.preprocessor.selected_genes,
            )
        })
        .collect::<Result<_>>()?;
    EmbeddingDb::concat(&parts)
}

/// Predicted expression for every spot of a query slide.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub spot_ids: Vec<String>,
    pub gene_names: Vec<String>,
    pub values: Matrix,
}

pub fn predict(bundle: &ModelBundle, db: &EmbeddingDb, query: &SlideDataset, k: usize, weighting: Weighting) -> Result<Prediction> {
    query.validate()?;
    let graph = bundle.preprocessor.graph(query)?;
    let image = bundle.preprocessor.image_inputs(query)?;
    let emb = embed_queries(&bundle.params, &graph.propagation, &image)?;
    let neighbors = query_topk(db, &emb, k)?;
    Ok(Prediction {
        spot_ids: query.spot_ids.clone(),
        gene_names: db.gene_names.clone(),
        values: predict_expression(db, &neighbors, weighting)?,
    })
}

/// Log-normalized expression of the selected genes, the ground truth that
/// predictions are scored against.
pub fn truth(bundle: &ModelBundle, slide: &SlideDataset) -> Result<Matrix> {
    bundle
        .preprocessor
        .gene_inputs(slide)?
        .map(|(expr, _)| expr)
        .ok_or_else(|| Error::Data(format!("slide {} has no expression", slide.slide_id)))
}
