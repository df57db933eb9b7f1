//! Training schedule and the finite-difference gradient check.
//!
//! Every optimizer step evaluates both DGI terms over the whole slice and the
//! alignment and bottleneck terms over one minibatch, whose rows are sliced
//! from the full-slice forward pass so each spot keeps its graph context.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ModelDims, ModelParams, Readout};
use crate::error::{Error, Result};
use crate::graph::build_radius_adjacency;
use crate::linalg::Matrix;
use crate::objectives::{evaluate_step, LossBreakdown, ObjectiveConfig, StepInputs};
use crate::optim::{adamw_step, AdamWConfig, OptState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// All terms from the first epoch.
    #[default]
    Joint,
    /// The first half of the epochs optimizes only the DGI terms.
    TwoPhase,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Stage::Joint),
            "two-phase" => Ok(Stage::TwoPhase),
            other => Err(Error::Config(format!("unknown stage `{other}` (joint|two-phase)"))),
        }
    }
}

/// Every knob of preprocessing, training and retrieval. Serialized as flat
/// `key = value` text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub tau: f64,
    pub beta: f64,
    pub lambda_dgi: f64,
    pub lambda_hsic: f64,
    /// Number of highly variable genes kept by preprocessing.
    pub n_genes: usize,
    pub pca_dim: usize,
    /// Feed log-normalized expression to the gene branch instead of PCA scores.
    pub skip_pca: bool,
    pub hid_dim: usize,
    pub embed_dim: usize,
    pub gene_gcn_depth: usize,
    pub image_gcn_depth: usize,
    /// Graph radius; the default radius rule applies when absent.
    pub radius: Option<f64>,
    pub readout: Readout,
    pub stage: Stage,
    pub seed: u64,
    pub topk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        let obj = ObjectiveConfig::default();
        Self {
            epochs: 30,
            batch_size: 16,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            tau: obj.tau,
            beta: obj.beta,
            lambda_dgi: obj.lambda_dgi,
            lambda_hsic: obj.lambda_hsic,
            n_genes: 2000,
            pca_dim: 256,
            skip_pca: false,
            hid_dim: 512,
            embed_dim: 256,
            gene_gcn_depth: 1,
            image_gcn_depth: 1,
            radius: None,
            readout: Readout::Sum,
            stage: Stage::Joint,
            seed: 0,
            topk: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("`{key}` {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        for (key, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_dgi", self.lambda_dgi),
            ("lambda_hsic", self.lambda_hsic),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "must be nonnegative");
            }
        }
        for (key, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(key, "must lie in [0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be positive");
        }
        for (key, v) in [
            ("n_genes", self.n_genes),
            ("pca_dim", self.pca_dim),
            ("hid_dim", self.hid_dim),
            ("embed_dim", self.embed_dim),
            ("topk", self.topk),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1");
            }
        }
        for (key, v) in [("gene_gcn_depth", self.gene_gcn_depth), ("image_gcn_depth", self.image_gcn_depth)] {
            if v > 2 {
                return bad(key, "must be 0, 1 or 2");
            }
        }
        if let Some(r) = self.radius {
            if !(r > 0.0 && r.is_finite()) {
                return bad("radius", "must be positive");
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Applies one `key = value` override, as given on a command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_kv_text()).expect("own output parses");
        let parsed = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        table.insert(key.to_string(), parsed);
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda_dgi: self.lambda_dgi,
            lambda_hsic: self.lambda_hsic,
            beta: self.beta,
            tau: self.tau,
            readout: self.readout,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One training slice, already preprocessed.
#[derive(Debug, Clone)]
pub struct TrainingSlice {
    pub propagation: Matrix,
    /// `T_α`: PCA scores (or normalized expression) per spot.
    pub gene_input: Matrix,
    pub image_input: Matrix,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean step breakdown of every epoch.
    pub history: Vec<LossBreakdown>,
}

fn check_slices(slices: &[TrainingSlice]) -> Result<(usize, usize)> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Config("training needs at least one slice".into()))?;
    let (gene_in, image_in) = (first.gene_input.cols(), first.image_input.cols());
    for (k, s) in slices.iter().enumerate() {
        let n = s.gene_input.rows();
        if s.image_input.rows() != n || s.propagation.shape() != (n, n) {
            return Err(Error::Config(format!(
                "slice {k}: {n} gene rows, {} image rows, propagation {:?}",
                s.image_input.rows(),
                s.propagation.shape()
            )));
        }
        if s.gene_input.cols() != gene_in || s.image_input.cols() != image_in {
            return Err(Error::Config(format!(
                "slice {k} has {}/{} input features, slice 0 has {gene_in}/{image_in}",
                s.gene_input.cols(),
                s.image_input.cols()
            )));
        }
        if !s.gene_input.is_finite() || !s.image_input.is_finite() {
            return Err(Error::Input(format!("slice {k} has non-finite features")));
        }
    }
    Ok((gene_in, image_in))
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Fits both branches. Deterministic given the slices and `cfg.seed`.
pub fn train(slices: &[TrainingSlice], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (gene_in, image_in) = check_slices(slices)?;
    let dims = ModelDims {
        gene_in,
        image_in,
        hid: cfg.hid_dim,
        embed: cfg.embed_dim,
        gene_depth: cfg.gene_gcn_depth,
        image_depth: cfg.image_gcn_depth,
    };
    let mut params = ModelParams::init(&dims, cfg.seed);
    let mut state = OptState::new(&params);
    let objective = cfg.objective();
    let adam = cfg.adamw();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let pretrain = match cfg.stage {
        Stage::Joint => 0,
        Stage::TwoPhase => cfg.epochs / 2,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        for slice in slices {
            let n = slice.gene_input.rows();
            let gene_negative = permutation(n, &mut rng);
            let image_negative = permutation(n, &mut rng);
            let batches: Vec<Vec<usize>> = if epoch < pretrain {
                vec![Vec::new()]
            } else {
                permutation(n, &mut rng)
                    .chunks(cfg.batch_size)
                    .map(<[usize]>::to_vec)
                    .collect()
            };
            for batch in &batches {
                let inputs = StepInputs {
                    propagation: &slice.propagation,
                    gene_input: &slice.gene_input,
                    image_input: &slice.image_input,
                    gene_negative: &gene_negative,
                    image_negative: &image_negative,
                    batch,
                };
                let eval = evaluate_step(&params, &inputs, &objective, None, true)?;
                let b = eval.breakdown;
                if let Some(term) = b.non_finite_term() {
                    return Err(Error::Divergence { term: term.into() });
                }
                adamw_step(&mut params, &eval.grads.expect("requested"), &mut state, &adam)?;
                sum.dgi_gene += b.dgi_gene;
                sum.dgi_image += b.dgi_image;
                sum.bottleneck += b.bottleneck;
                sum.alignment += b.alignment;
                steps += 1;
            }
        }
        let s = steps.max(1) as f64;
        let mut mean = LossBreakdown {
            dgi_gene: sum.dgi_gene / s,
            dgi_image: sum.dgi_image / s,
            bottleneck: sum.bottleneck / s,
            alignment: sum.alignment / s,
            lambda_dgi: objective.lambda_dgi,
            lambda_hsic: objective.lambda_hsic,
            beta: objective.beta,
            tau: objective.tau,
            total: 0.0,
        };
        mean.combine();
        history.push(mean);
    }
    Ok(TrainOutcome { params, history })
}

/// Which scalar the gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTerm {
    /// The weighted objective as configured.
    #[default]
    Combined,
    /// Sum of both branches' DGI losses.
    Dgi,
    Bottleneck,
    Alignment,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Dgi, LossTerm::Bottleneck, LossTerm::Alignment, LossTerm::Combined];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Combined => "combined",
            LossTerm::Dgi => "dgi",
            LossTerm::Bottleneck => "bottleneck",
            LossTerm::Alignment => "alignment",
        }
    }
}

impl std::str::FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown loss term `{s}` (dgi|bottleneck|alignment|combined)")))
    }
}

/// Settings of the gradient check harness.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub term: LossTerm,
    pub eps: f64,
    /// Block whose analytic gradient is deliberately perturbed.
    pub corrupt_block: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            objective: ObjectiveConfig::default(),
            term: LossTerm::Combined,
            eps: 1e-5,
            corrupt_block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    /// Worst relative error per parameter block.
    pub blocks: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() < tol
    }
}

/// `|a − f| / max(|a|, |f|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of the combined objective with central
/// differences on a random instance of 8 spots.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)])
        .collect();
    let propagation = build_radius_adjacency(&coords, 1.5)?.propagation;
    let gene_input = Matrix::from_fn(n, 5, |_, _| rng.random_range(-1.0..1.0));
    let image_input = Matrix::from_fn(n, 6, |_, _| rng.random_range(-1.0..1.0));
    let gene_negative = permutation(n, &mut rng);
    let image_negative = permutation(n, &mut rng);
    let batch: Vec<usize> = permutation(n, &mut rng)[..5].to_vec();
    let params = ModelParams::init(
        &ModelDims {
            gene_in: 5,
            image_in: 6,
            hid: 4,
            embed: 3,
            gene_depth: 1,
            image_depth: 1,
        },
        cfg.seed.wrapping_add(1),
    );
    let inputs = StepInputs {
        propagation: &propagation,
        gene_input: &gene_input,
        image_input: &image_input,
        gene_negative: &gene_negative,
        image_negative: &image_negative,
        batch: &batch,
    };
    let dgi_inputs = StepInputs { batch: &[], ..inputs };
    // Single terms are isolated by weights, an empty batch, or a difference
    // of two weightings.
    let only = |lambda_dgi: f64, lambda_hsic: f64| ObjectiveConfig {
        lambda_dgi,
        lambda_hsic,
        ..cfg.objective
    };
    let parts: Vec<(StepInputs, ObjectiveConfig, f64)> = match cfg.term {
        LossTerm::Combined => vec![(inputs, cfg.objective, 1.0)],
        LossTerm::Dgi => vec![(dgi_inputs, only(1.0, 0.0), 1.0)],
        LossTerm::Alignment => vec![(inputs, only(0.0, 0.0), 1.0)],
        LossTerm::Bottleneck => vec![(inputs, only(0.0, 1.0), 1.0), (inputs, only(0.0, 0.0), -1.0)],
    };
    let bandwidths = evaluate_step(&params, &inputs, &cfg.objective, None, false)?.bandwidths;
    let mut grads = params.zeros_like();
    for (inp, obj, sign) in &parts {
        let g = evaluate_step(&params, inp, obj, bandwidths, true)?.grads.expect("requested");
        for ((_, acc), (_, part)) in grads.blocks_mut().into_iter().zip(g.blocks()) {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += sign * b);
        }
    }
    if let Some(name) = &cfg.corrupt_block {
        let mut found = false;
        for (block, g) in grads.blocks_mut() {
            if &block == name {
                found = true;
                g.iter_mut().for_each(|v| *v = 1.5 * *v + 0.1);
            }
        }
        if !found {
            return Err(Error::Parameter(format!("no parameter block named `{name}`")));
        }
    }

    let loss_at = |p: &ModelParams| -> Result<f64> {
        let mut total = 0.0;
        for (inp, obj, sign) in &parts {
            total += sign * evaluate_step(p, inp, obj, bandwidths, false)?.breakdown.total;
        }
        Ok(total)
    };
    let names: Vec<(String, usize)> = params.blocks().into_iter().map(|(n, b)| (n, b.len())).collect();
    let analytic = grads.blocks();
    let mut blocks = Vec::with_capacity(names.len());
    for (k, (name, len)) in names.into_iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..len {
            let mut plus = params.clone();
            plus.blocks_mut()[k].1[i] += cfg.eps;
            let mut minus = params.clone();
            minus.blocks_mut()[k].1[i] -= cfg.eps;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * cfg.eps);
            worst = worst.max(relative_error(analytic[k].1[i], numeric));
        }
        blocks.push((name, worst));
    }
    Ok(GradCheckReport { seed: cfg.seed, blocks })
}
