//! Slide files, preprocessing and a synthetic paired-data generator.
//!
//! A slide directory holds CSV files keyed by `spot_id`:
//!
//! ```text
//! coords.csv          spot_id,x,y
//! expression.csv      spot_id,<gene>,...      (optional for query slides)
//! image_features.csv  spot_id,f0,...          (or patches.csv: spot_id,p0,...)
//! latents.csv         spot_id,l0,...          (synthetic slides only)
//! ```

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::{ImageFeatureSource, Patch};
use crate::error::{Error, Result};
use crate::graph::{build_radius_adjacency, default_radius, SpotGraph};
use crate::linalg::{pca_fit_transform, Matrix, PcaModel};
use crate::train::TrainConfig;

pub const COORDS_FILE: &str = "coords.csv";
pub const EXPRESSION_FILE: &str = "expression.csv";
pub const FEATURES_FILE: &str = "image_features.csv";
pub const PATCHES_FILE: &str = "patches.csv";
pub const LATENTS_FILE: &str = "latents.csv";

/// A numeric CSV with a leading id column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: Matrix,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::file(path, io),
            other => Error::Data(format!("{file}: {other:?}")),
        })?;
    let header = reader.headers()?.clone();
    if header.get(0) != Some("spot_id") {
        return Err(Error::Parse {
            file,
            row: 1,
            col: 1,
            msg: "first column must be `spot_id`".into(),
        });
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 2;
        if record.len() != columns.len() + 1 {
            return Err(Error::Parse {
                file,
                row,
                col: record.len(),
                msg: format!("expected {} fields, got {}", columns.len() + 1, record.len()),
            });
        }
        ids.push(record[0].to_string());
        for (c, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                file: file.clone(),
                row,
                col: c + 1,
                msg: format!("`{cell}` is not a number"),
            })?;
            data.push(v);
        }
    }
    let values = Matrix::new(ids.len(), columns.len(), data)?;
    Ok(Table { ids, columns, values })
}

pub fn write_table(path: &Path, ids: &[String], columns: &[String], values: &Matrix) -> Result<()> {
    if ids.len() != values.rows() || columns.len() != values.cols() {
        return Err(Error::Input(format!(
            "table {:?} does not match {} ids and {} columns",
            values.shape(),
            ids.len(),
            columns.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::file(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let mut header = vec!["spot_id".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(values.row_iter()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// One tissue slice as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideDataset {
    pub slide_id: String,
    pub spot_ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    /// Raw counts, spots × genes; absent for image-only query slides.
    pub expression: Option<Matrix>,
    pub gene_names: Vec<String>,
    pub image: ImageFeatureSource,
}

impl SlideDataset {
    pub fn n_spots(&self) -> usize {
        self.spot_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_spots();
        if self.coords.len() != n || self.image.n_spots() != n {
            return Err(Error::Input(format!(
                "slide {}: {n} spots, {} coordinates, {} image rows",
                self.slide_id,
                self.coords.len(),
                self.image.n_spots()
            )));
        }
        if let Some(e) = &self.expression {
            if e.shape() != (n, self.gene_names.len()) {
                return Err(Error::Input(format!(
                    "slide {}: expression is {:?}, expected {n}x{}",
                    self.slide_id,
                    e.shape(),
                    self.gene_names.len()
                )));
            }
        }
        let mut seen = HashSet::new();
        if let Some(g) = self.gene_names.iter().find(|g| !seen.insert(g.as_str())) {
            return Err(Error::Data(format!("slide {}: duplicate gene name `{g}`", self.slide_id)));
        }
        let mut seen = HashSet::new();
        if let Some(s) = self.spot_ids.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::Data(format!("slide {}: duplicate spot id `{s}`", self.slide_id)));
        }
        Ok(())
    }
}

/// File locations of one slide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlidePaths {
    pub coords: PathBuf,
    pub expression: Option<PathBuf>,
    pub image_features: Option<PathBuf>,
    pub patches: Option<PathBuf>,
}

impl SlidePaths {
    /// Standard file names inside `dir`; optional files are kept only if present.
    pub fn in_dir(dir: &Path) -> Self {
        let opt = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        Self {
            coords: dir.join(COORDS_FILE),
            expression: opt(EXPRESSION_FILE),
            image_features: opt(FEATURES_FILE),
            patches: opt(PATCHES_FILE),
        }
    }
}

/// Reorders `table` rows to follow `order`; ids missing from the table are
/// collected into `missing`.
fn align_rows(table: &Table, order: &[String], missing: &mut Vec<String>) -> Option<Matrix> {
    let index: HashMap<&str, usize> = table.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let rows: Vec<usize> = order.iter().filter_map(|id| index.get(id.as_str()).copied()).collect();
    for id in order {
        if !index.contains_key(id.as_str()) {
            missing.push(id.clone());
        }
    }
    let known: HashSet<&str> = order.iter().map(String::as_str).collect();
    for id in &table.ids {
        if !known.contains(id.as_str()) {
            missing.push(id.clone());
        }
    }
    (rows.len() == order.len()).then(|| table.values.select_rows(&rows))
}

/// Loads a slide, aligning every file to the row order of the coordinates.
pub fn load_slide(slide_id: &str, paths: &SlidePaths) -> Result<SlideDataset> {
    let coords_t = read_table(&paths.coords)?;
    if coords_t.columns != ["x", "y"] {
        return Err(Error::Parse {
            file: paths.coords.display().to_string(),
            row: 1,
            col: 2,
            msg: "coordinate header must be `spot_id,x,y`".into(),
        });
    }
    let order = coords_t.ids.clone();
    let coords: Vec<[f64; 2]> = coords_t.values.row_iter().map(|r| [r[0], r[1]]).collect();
    let mut missing = Vec::new();

    let (expression, gene_names) = match &paths.expression {
        Some(p) => {
            let t = read_table(p)?;
            (align_rows(&t, &order, &mut missing), t.columns)
        }
        None => (None, Vec::new()),
    };
    let image = match (&paths.image_features, &paths.patches) {
        (Some(p), _) => {
            let t = read_table(p)?;
            align_rows(&t, &order, &mut missing).map(|features| ImageFeatureSource::Precomputed {
                features,
                patch_size: None,
            })
        }
        (None, Some(p)) => {
            let t = read_table(p)?;
            let size = ((t.columns.len() / 3) as f64).sqrt().round() as usize;
            if size == 0 || 3 * size * size != t.columns.len() {
                return Err(Error::Data(format!(
                    "{}: {} pixel columns is not 3 × size²",
                    p.display(),
                    t.columns.len()
                )));
            }
            align_rows(&t, &order, &mut missing).map(|m| ImageFeatureSource::Simple {
                patches: m
                    .row_iter()
                    .map(|r| Patch {
                        size,
                        pixels: r.to_vec(),
                    })
                    .collect(),
            })
        }
        (None, None) => {
            return Err(Error::Data(format!(
                "slide {slide_id}: neither {FEATURES_FILE} nor {PATCHES_FILE} given"
            )))
        }
    };
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::Alignment { missing });
    }
    let slide = SlideDataset {
        slide_id: slide_id.to_string(),
        spot_ids: order,
        coords,
        expression,
        gene_names,
        image: image.expect("aligned when nothing is missing"),
    };
    slide.validate()?;
    Ok(slide)
}

/// Loads `dir` using the standard file names; the slide id is the directory name.
pub fn load_slide_dir(dir: &Path) -> Result<SlideDataset> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "slide".into());
    if !dir.join(COORDS_FILE).exists() {
        return Err(Error::file(
            dir.join(COORDS_FILE),
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing coordinates file"),
        ));
    }
    load_slide(&id, &SlidePaths::in_dir(dir))
}

/// Writes the slide in the standard layout.
pub fn save_slide(dir: &Path, slide: &SlideDataset) -> Result<()> {
    slide.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let coords = Matrix::from_fn(slide.n_spots(), 2, |i, j| slide.coords[i][j]);
    write_table(&dir.join(COORDS_FILE), &slide.spot_ids, &["x".into(), "y".into()], &coords)?;
    if let Some(e) = &slide.expression {
        write_table(&dir.join(EXPRESSION_FILE), &slide.spot_ids, &slide.gene_names, e)?;
    }
    match &slide.image {
        ImageFeatureSource::Precomputed { features, .. } => {
            let cols: Vec<String> = (0..features.cols()).map(|j| format!("f{j}")).collect();
            write_table(&dir.join(FEATURES_FILE), &slide.spot_ids, &cols, features)?;
        }
        ImageFeatureSource::Simple { patches } => {
            let width = patches.first().map_or(0, |p| p.pixels.len());
            let rows: Vec<&[f64]> = patches.iter().map(|p| p.pixels.as_slice()).collect();
            let m = if rows.is_empty() {
                Matrix::zeros(0, width)
            } else {
                Matrix::from_rows(&rows)?
            };
            let cols: Vec<String> = (0..width).map(|j| format!("p{j}")).collect();
            write_table(&dir.join(PATCHES_FILE), &slide.spot_ids, &cols, &m)?;
        }
    }
    Ok(())
}

/// Library-size normalization to the median positive total, then `log1p`.
/// Spots with no counts stay at zero.
pub fn log_normalize(counts: &Matrix) -> Result<Matrix> {
    if let Some(v) = counts.as_slice().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Input(format!("counts must be finite and nonnegative, found {v}")));
    }
    let totals: Vec<f64> = counts.row_iter().map(|r| r.iter().sum()).collect();
    let mut positive: Vec<f64> = totals.iter().copied().filter(|&t| t > 0.0).collect();
    positive.sort_by(f64::total_cmp);
    let target = match positive.len() {
        0 => return Ok(counts.clone()),
        m if m % 2 == 1 => positive[m / 2],
        m => 0.5 * (positive[m / 2 - 1] + positive[m / 2]),
    };
    Ok(Matrix::from_fn(counts.rows(), counts.cols(), |i, j| {
        if totals[i] > 0.0 {
            (counts[(i, j)] * target / totals[i]).ln_1p()
        } else {
            0.0
        }
    }))
}

/// Gene indices ordered by decreasing population variance, ties by name.
pub fn rank_genes_by_variance(values: &Matrix, names: &[String]) -> Vec<usize> {
    let n = values.rows() as f64;
    let means = values.column_means();
    let var: Vec<f64> = (0..values.cols())
        .map(|j| values.row_iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n)
        .collect();
    let mut order: Vec<usize> = (0..values.cols()).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then_with(|| names[a].cmp(&names[b])));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub n_genes: usize,
    pub pca_dim: usize,
    pub skip_pca: bool,
    pub radius: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig::from(&TrainConfig::default())
    }
}

impl From<&TrainConfig> for PreprocessConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            n_genes: c.n_genes,
            pca_dim: c.pca_dim,
            skip_pca: c.skip_pca,
            radius: c.radius,
        }
    }
}

/// Gene selection, PCA and image-feature scaling fit on training slides only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub config: PreprocessConfig,
    /// Retained genes, highest variance first.
    pub selected_genes: Vec<String>,
    pub pca: Option<PcaModel>,
    pub image_mean: Vec<f64>,
    pub image_scale: Vec<f64>,
    pub warnings: Vec<String>,
}

/// A training or evaluation slice ready for the model.
#[derive(Debug, Clone)]
pub struct ProcessedSlice {
    pub slide_id: String,
    pub spot_ids: Vec<String>,
    pub graph: SpotGraph,
    /// Log-normalized expression of the selected genes, if the slide has any.
    pub expression: Option<Matrix>,
    /// `T_α`; present when expression is.
    pub talpha: Option<Matrix>,
    /// Standardized image features.
    pub image: Matrix,
}

fn gene_columns(slide: &SlideDataset, genes: &[String]) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = slide
        .gene_names
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();
    let missing: Vec<&str> = genes
        .iter()
        .filter(|g| !index.contains_key(g.as_str()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "slide {} lacks selected genes: {}",
            slide.slide_id,
            missing.join(", ")
        )));
    }
    Ok(genes.iter().map(|g| index[g.as_str()]).collect())
}

impl Preprocessor {
    pub fn fit(train: &[SlideDataset], config: PreprocessConfig) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Input("preprocessing needs at least one training slide".into()))?;
        let mut warnings = Vec::new();
        let mut normalized = Vec::with_capacity(train.len());
        let mut images = Vec::with_capacity(train.len());
        for slide in train {
            slide.validate()?;
            let counts = slide
                .expression
                .as_ref()
                .ok_or_else(|| Error::Data(format!("training slide {} has no expression", slide.slide_id)))?;
            let cols = gene_columns(slide, &first.gene_names)?;
            if slide.gene_names.len() != first.gene_names.len() {
                return Err(Error::Data(format!(
                    "training slide {} has {} genes, {} has {}",
                    slide.slide_id,
                    slide.gene_names.len(),
                    first.slide_id,
                    first.gene_names.len()
                )));
            }
            normalized.push(log_normalize(&counts.select_cols(&cols))?);
            images.push(slide.image.all()?);
        }
        let joint = Matrix::vstack(&normalized.iter().collect::<Vec<_>>())?;
        let rank = rank_genes_by_variance(&joint, &first.gene_names);
        let keep = if rank.len() < config.n_genes {
            warnings.push(format!(
                "only {} genes available, keeping all (requested {})",
                rank.len(),
                config.n_genes
            ));
            rank.len()
        } else {
            config.n_genes
        };
        let chosen = &rank[..keep];
        let selected_genes: Vec<String> = chosen.iter().map(|&j| first.gene_names[j].clone()).collect();

        let pca = if config.skip_pca {
            None
        } else {
            let x = joint.select_cols(chosen);
            let max_k = (x.rows().saturating_sub(1)).min(x.cols());
            let k = config.pca_dim.min(max_k);
            if k < config.pca_dim {
                warnings.push(format!("PCA dimension reduced from {} to {k}", config.pca_dim));
            }
            Some(pca_fit_transform(&x, k)?.0)
        };

        let all_images = Matrix::vstack(&images.iter().collect::<Vec<_>>())?;
        let image_mean = all_images.column_means();
        let rows = all_images.rows() as f64;
        let image_scale: Vec<f64> = (0..all_images.cols())
            .map(|j| {
                let sd = (all_images.row_iter().map(|r| (r[j] - image_mean[j]).powi(2)).sum::<f64>() / rows).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            config,
            selected_genes,
            pca,
            image_mean,
            image_scale,
            warnings,
        })
    }

    /// Width of `T_α`.
    pub fn gene_input_dim(&self) -> usize {
        self.pca.as_ref().map_or(self.selected_genes.len(), PcaModel::n_components)
    }

    /// Normalized expression of the selected genes and the matching `T_α`.
    pub fn gene_inputs(&self, slide: &SlideDataset) -> Result<Option<(Matrix, Matrix)>> {
        let Some(counts) = &slide.expression else {
            return Ok(None);
        };
        // normalize over all of the slide's genes, then keep the selection
        let all = log_normalize(counts)?;
        let expr = all.select_cols(&gene_columns(slide, &self.selected_genes)?);
        let talpha = match &self.pca {
            Some(p) => p.transform(&expr)?,
            None => expr.clone(),
        };
        Ok(Some((expr, talpha)))
    }

    pub fn image_inputs(&self, slide: &SlideDataset) -> Result<Matrix> {
        let raw = slide.image.all()?;
        if raw.cols() != self.image_mean.len() {
            return Err(Error::Input(format!(
                "slide {} has {} image features, training had {}",
                slide.slide_id,
                raw.cols(),
                self.image_mean.len()
            )));
        }
        Ok(Matrix::from_fn(raw.rows(), raw.cols(), |i, j| {
            (raw[(i, j)] - self.image_mean[j]) / self.image_scale[j]
        }))
    }

    pub fn graph(&self, slide: &SlideDataset) -> Result<SpotGraph> {
        let radius = match self.config.radius {
            Some(r) => r,
            None if slide.n_spots() < 2 => 1.0,
            None => default_radius(&slide.coords)?,
        };
        build_radius_adjacency(&slide.coords, radius)
    }

    pub fn transform(&self, slide: &SlideDataset) -> Result<ProcessedSlice> {
        slide.validate()?;
        let (expression, talpha) = match self.gene_inputs(slide)? {
            Some((e, t)) => (Some(e), Some(t)),
            None => (None, None),
        };
        Ok(ProcessedSlice {
            slide_id: slide.slide_id.clone(),
            spot_ids: slide.spot_ids.clone(),
            graph: self.graph(slide)?,
            expression,
            talpha,
            image: self.image_inputs(slide)?,
        })
    }
}

/// Output of [`preprocess`].
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub preprocessor: Preprocessor,
    pub train: Vec<ProcessedSlice>,
    pub test: Vec<ProcessedSlice>,
}

/// Fits on `train` and transforms both lists; `test` never influences the fit.
pub fn preprocess(train: &[SlideDataset], test: &[SlideDataset], config: PreprocessConfig) -> Result<Preprocessed> {
    let preprocessor = Preprocessor::fit(train, config)?;
    let train = train.iter().map(|s| preprocessor.transform(s)).collect::<Result<_>>()?;
    let test = test.iter().map(|s| preprocessor.transform(s)).collect::<Result<_>>()?;
    Ok(Preprocessed {
        preprocessor,
        train,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    #[default]
    Square,
    Hex,
}

impl std::str::FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(GridKind::Square),
            "hex" => Ok(GridKind::Hex),
            other => Err(Error::Parameter(format!("unknown grid `{other}` (square|hex)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_spots: usize,
    pub n_genes: usize,
    pub f_img: usize,
    pub seed: u64,
    pub grid: GridKind,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_spots: 800,
            n_genes: 200,
            f_img: 30,
            seed: 0,
            grid: GridKind::Square,
        }
    }
}

/// Width of the shared latent field.
pub const SYNTH_LATENT_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub slide: SlideDataset,
    /// Ground-truth latent field, spots × 8.
    pub latents: Matrix,
}

impl SyntheticSlide {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_slide(dir, &self.slide)?;
        let cols: Vec<String> = (0..self.latents.cols()).map(|j| format!("l{j}")).collect();
        write_table(&dir.join(LATENTS_FILE), &self.slide.spot_ids, &cols, &self.latents)
    }
}

pub fn grid_coords(n: usize, grid: GridKind) -> Vec<[f64; 2]> {
    let side = (n as f64).sqrt().ceil() as usize;
    (0..n)
        .map(|i| {
            let (col, row) = ((i % side) as f64, (i / side) as f64);
            match grid {
                GridKind::Square => [col, row],
                GridKind::Hex => [col + 0.5 * ((i / side) % 2) as f64, row * 3f64.sqrt() / 2.0],
            }
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Paired expression and image features driven by a shared smooth latent
/// field: counts from `exp(L W_g + b)` with multiplicative noise, image
/// features `L W_f` plus Gaussian noise.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticSlide> {
    if cfg.n_spots < 16 {
        return Err(Error::Parameter(format!("n_spots must be at least 16, got {}", cfg.n_spots)));
    }
    if cfg.n_genes == 0 || cfg.f_img == 0 {
        return Err(Error::Parameter("n_genes and f_img must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_spots;
    let r = SYNTH_LATENT_DIM;
    let coords = grid_coords(n, cfg.grid);
    let extent = coords.iter().fold(1.0f64, |m, c| m.max(c[0]).max(c[1]));

    let mut latents = Matrix::zeros(n, r);
    for l in 0..r {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        for (i, c) in coords.iter().enumerate() {
            let smooth: f64 = waves
                .iter()
                .map(|&(kx, ky, phase, amp)| amp * (std::f64::consts::TAU * (kx * c[0] + ky * c[1]) / extent + phase).sin())
                .sum();
            latents[(i, l)] = smooth + 0.2 * normal(&mut rng);
        }
        let col = latents.column(l);
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
        for i in 0..n {
            latents[(i, l)] = (latents[(i, l)] - mean) / sd;
        }
    }

    let w_gene = Matrix::from_fn(r, cfg.n_genes, |_, _| 0.35 * normal(&mut rng));
    let bias: Vec<f64> = (0..cfg.n_genes).map(|_| 2.0 + 0.8 * normal(&mut rng)).collect();
    let library: Vec<f64> = (0..n).map(|_| (0.2 * normal(&mut rng)).exp()).collect();
    let eta = latents.matmul(&w_gene);
    let expression = Matrix::from_fn(n, cfg.n_genes, |i, j| {
        let noise = (0.3 * normal(&mut rng)).exp();
        (library[i] * (eta[(i, j)] + bias[j]).exp() * noise).round()
    });

    let w_img = Matrix::from_fn(r, cfg.f_img, |_, _| normal(&mut rng) / (r as f64).sqrt());
    let mut features = latents.matmul(&w_img);
    for v in features.as_mut_slice() {
        *v += 0.5 * normal(&mut rng);
    }

    let width = (n - 1).to_string().len();
    let spot_ids: Vec<String> = (0..n).map(|i| format!("s{i:0width$}")).collect();
    let gwidth = (cfg.n_genes - 1).to_string().len();
    let gene_names: Vec<String> = (0..cfg.n_genes).map(|j| format!("gene_{j:0gwidth$}")).collect();
    Ok(SyntheticSlide {
        slide: SlideDataset {
            slide_id: format!("synthetic_{}", cfg.seed),
            spot_ids,
            coords,
            expression: Some(expression),
            gene_names,
            image: ImageFeatureSource::Precomputed {
                features,
                patch_size: None,
            },
        },
        latents,
    })
}

/// Splits a slide into two by spot index (`held_out` rows go to the second).
pub fn split_slide(slide: &SlideDataset, held_out: &[usize]) -> Result<(SlideDataset, SlideDataset)> {
    let n = slide.n_spots();
    if let Some(&bad) = held_out.iter().find(|&&i| i >= n) {
        return Err(Error::Input(format!("spot index {bad} out of range for {n} spots")));
    }
    let hold: HashSet<usize> = held_out.iter().copied().collect();
    let keep: Vec<usize> = (0..n).filter(|i| !hold.contains(i)).collect();
    let part = |idx: &[usize], suffix: &str| -> Result<SlideDataset> {
        Ok(SlideDataset {
            slide_id: format!("{}_{suffix}", slide.slide_id),
            spot_ids: idx.iter().map(|&i| slide.spot_ids[i].clone()).collect(),
            coords: idx.iter().map(|&i| slide.coords[i]).collect(),
            expression: slide.expression.as_ref().map(|e| e.select_rows(idx)),
            gene_names: slide.gene_names.clone(),
            image: match &slide.image {
                ImageFeatureSource::Precomputed { features, patch_size } => ImageFeatureSource::Precomputed {
                    features: features.select_rows(idx),
                    patch_size: *patch_size,
                },
                ImageFeatureSource::Simple { patches } => ImageFeatureSource::Simple {
                    patches: idx.iter().map(|&i| patches[i].clone()).collect(),
                },
            },
        })
    };
    Ok((part(&keep, "train")?, part(held_out, "test")?))
}
