//! Two-branch encoder: graph convolution + PReLU, a normalized linear
//! projection head, a sum (or mean) readout and a bilinear discriminator,
//! each with a hand-written reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l2_normalize_rows, Matrix};

/// Lower/upper clamp applied to discriminator probabilities before any log.
pub const PROB_CLAMP: f64 = 1e-7;

pub const INITIAL_PRELU_SLOPE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayerParams {
    /// in_dim × out_dim
    pub weight: Matrix,
    /// Shared negative-side slope of the PReLU.
    pub prelu_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHeadParams {
    /// hid_dim × embed_dim
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub bilinear: Matrix,
}

/// One modality: zero or more GCN layers, a projection head and the DGI
/// discriminator over the last GCN output.
///
/// With no GCN layers the hidden representation is the input itself, which is
/// how the "bypass the graph encoder" ablations are expressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchParams {
    pub gcn: Vec<GcnLayerParams>,
    pub head: ProjectionHeadParams,
    pub disc: DiscriminatorParams,
}

/// Gene branch (`H`) and image branch (`G`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub gene: BranchParams,
    pub image: BranchParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub gene_in: usize,
    pub image_in: usize,
    pub hid: usize,
    pub embed: usize,
    /// GCN layers in the gene branch (0 bypasses the graph encoder).
    pub gene_depth: usize,
    pub image_depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Readout::Sum),
            "mean" => Ok(Readout::Mean),
            other => Err(Error::Config(format!("unknown readout `{other}` (sum|mean)"))),
        }
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

impl BranchParams {
    fn init(input: usize, hid: usize, embed: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut gcn = Vec::with_capacity(depth);
        let mut dim = input;
        for _ in 0..depth {
            gcn.push(GcnLayerParams {
                weight: glorot(dim, hid, rng),
                prelu_slope: INITIAL_PRELU_SLOPE,
            });
            dim = hid;
        }
        let head = ProjectionHeadParams {
            weight: glorot(dim, embed, rng),
            bias: vec![0.0; embed],
        };
        let disc = DiscriminatorParams {
            bilinear: glorot(dim, dim, rng),
        };
        Self { gcn, head, disc }
    }

    pub fn input_dim(&self) -> usize {
        match self.gcn.first() {
            Some(l) => l.weight.rows(),
            None => self.head.weight.rows(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.head.weight.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.head.weight.cols()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            gcn: self
                .gcn
                .iter()
                .map(|l| GcnLayerParams {
                    weight: z(&l.weight),
                    prelu_slope: 0.0,
                })
                .collect(),
            head: ProjectionHeadParams {
                weight: z(&self.head.weight),
                bias: vec![0.0; self.head.bias.len()],
            },
            disc: DiscriminatorParams {
                bilinear: z(&self.disc.bilinear),
            },
        }
    }

    /// Runs the GCN stack. With `cache` the pass can later be differentiated.
    pub fn hidden_forward(&self, propagation: &Matrix, x: &Matrix, cache: bool) -> Result<BranchPass> {
        let mut tapes = cache.then(Vec::new);
        let mut h = x.clone();
        for layer in &self.gcn {
            let (out, tape) = gcn_forward_cached(propagation, &h, layer)?;
            if let Some(t) = tapes.as_mut() {
                t.push(tape);
            }
            h = out;
        }
        if self.gcn.is_empty() && x.cols() != self.head.weight.rows() {
            return Err(Error::Input(format!(
                "branch expects {} input features, got {}",
                self.head.weight.rows(),
                x.cols()
            )));
        }
        Ok(BranchPass { hidden: h, tapes })
    }

    /// Accumulates parameter gradients into `grads`.
    pub fn hidden_backward(
        &self,
        propagation: &Matrix,
        pass: &BranchPass,
        d_hidden: &Matrix,
        grads: &mut BranchParams,
    ) -> Result<()> {
        let tapes = pass
            .tapes
            .as_ref()
            .ok_or_else(|| Error::Usage("hidden_backward needs a cached forward pass".into()))?;
        let mut d = d_hidden.clone();
        for (idx, layer) in self.gcn.iter().enumerate().rev() {
            // the input gradient of the first layer is never needed
            let (g, dx) = gcn_backward_impl(propagation, &tapes[idx], layer, &d, idx > 0)?;
            grads.gcn[idx].weight.add_scaled(&g.weight, 1.0);
            grads.gcn[idx].prelu_slope += g.prelu_slope;
            if let Some(dx) = dx {
                d = dx;
            }
        }
        Ok(())
    }
}

/// Forward state of a branch's GCN stack.
#[derive(Debug, Clone)]
pub struct BranchPass {
    pub hidden: Matrix,
    tapes: Option<Vec<GcnTape>>,
}

impl BranchPass {
    /// Drops the cached activations, leaving only the output.
    pub fn without_tape(self) -> Self {
        Self {
            hidden: self.hidden,
            tapes: None,
        }
    }
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, PReLU slopes at 0.25.
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gene = BranchParams::init(dims.gene_in, dims.hid, dims.embed, dims.gene_depth, &mut rng);
        let image = BranchParams::init(dims.image_in, dims.hid, dims.embed, dims.image_depth, &mut rng);
        Self { gene, image }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gene: self.gene.zeros_like(),
            image: self.image.zeros_like(),
        }
    }

    /// Named flat views over every parameter block, in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, b) in [("gene", &self.gene), ("image", &self.image)] {
            for (i, l) in b.gcn.iter().enumerate() {
                out.push((format!("{name}.gcn{i}.weight"), l.weight.as_slice()));
                out.push((format!("{name}.gcn{i}.prelu_slope"), std::slice::from_ref(&l.prelu_slope)));
            }
            out.push((format!("{name}.head.weight"), b.head.weight.as_slice()));
            out.push((format!("{name}.head.bias"), b.head.bias.as_slice()));
            out.push((format!("{name}.disc.bilinear"), b.disc.bilinear.as_slice()));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (name, b) in [("gene", &mut self.gene), ("image", &mut self.image)] {
            for (i, l) in b.gcn.iter_mut().enumerate() {
                out.push((format!("{name}.gcn{i}.weight"), l.weight.as_mut_slice()));
                out.push((
                    format!("{name}.gcn{i}.prelu_slope"),
                    std::slice::from_mut(&mut l.prelu_slope),
                ));
            }
            out.push((format!("{name}.head.weight"), b.head.weight.as_mut_slice()));
            out.push((format!("{name}.head.bias"), b.head.bias.as_mut_slice()));
            out.push((format!("{name}.disc.bilinear"), b.disc.bilinear.as_mut_slice()));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// Gene-branch embeddings `T_ι` for every spot of a slice.
    pub fn gene_embeddings(&self, propagation: &Matrix, talpha: &Matrix) -> Result<Matrix> {
        let pass = self.gene.hidden_forward(propagation, talpha, false)?;
        head_forward(&pass.hidden, &self.gene.head)
    }

    /// Image-branch embeddings `G_f` for every spot of a slice.
    pub fn image_embeddings(&self, propagation: &Matrix, features: &Matrix) -> Result<Matrix> {
        let pass = self.image.hidden_forward(propagation, features, false)?;
        head_forward(&pass.hidden, &self.image.head)
    }
}

fn check_gcn_dims(propagation: &Matrix, x: &Matrix, params: &GcnLayerParams) -> Result<()> {
    let n = x.rows();
    if propagation.shape() != (n, n) {
        return Err(Error::Input(format!(
            "propagation is {:?}, expected {n}x{n}",
            propagation.shape()
        )));
    }
    if x.cols() != params.weight.rows() {
        return Err(Error::Input(format!(
            "GCN layer expects {} input features, got {}",
            params.weight.rows(),
            x.cols()
        )));
    }
    Ok(())
}

/// Cached activations of one GCN layer.
#[derive(Debug, Clone)]
pub struct GcnTape {
    /// `P X`
    propagated: Matrix,
    /// `P X W`, before the PReLU.
    pre_activation: Matrix,
}

fn prelu(u: f64, slope: f64) -> f64 {
    if u > 0.0 {
        u
    } else {
        slope * u
    }
}

/// `PReLU(P · X · W)`.
pub fn gcn_forward(propagation: &Matrix, x: &Matrix, params: &GcnLayerParams) -> Result<Matrix> {
    Ok(gcn_forward_cached(propagation, x, params)?.0)
}

pub fn gcn_forward_cached(
    propagation: &Matrix,
    x: &Matrix,
    params: &GcnLayerParams,
) -> Result<(Matrix, GcnTape)> {
    check_gcn_dims(propagation, x, params)?;
    let propagated = propagation.sparse_matmul(x);
    let pre_activation = propagated.matmul(&params.weight);
    let out = pre_activation.map(|u| prelu(u, params.prelu_slope));
    Ok((
        out,
        GcnTape {
            propagated,
            pre_activation,
        },
    ))
}

/// Returns the layer's parameter gradients and `dL/dX`.
pub fn gcn_backward(
    propagation: &Matrix,
    tape: &GcnTape,
    params: &GcnLayerParams,
    d_out: &Matrix,
) -> Result<(GcnLayerParams, Matrix)> {
    let (g, dx) = gcn_backward_impl(propagation, tape, params, d_out, true)?;
    Ok((g, dx.expect("requested")))
}

fn gcn_backward_impl(
    propagation: &Matrix,
    tape: &GcnTape,
    params: &GcnLayerParams,
    d_out: &Matrix,
    need_dx: bool,
) -> Result<(GcnLayerParams, Option<Matrix>)> {
    if d_out.shape() != tape.pre_activation.shape() {
        return Err(Error::Input("GCN upstream gradient has the wrong shape".into()));
    }
    let mut d_pre = d_out.clone();
    let mut d_slope = 0.0;
    for ((d, &u), &g) in d_pre
        .as_mut_slice()
        .iter_mut()
        .zip(tape.pre_activation.as_slice())
        .zip(d_out.as_slice())
    {
        if u <= 0.0 {
            d_slope += g * u;
            *d = g * params.prelu_slope;
        }
    }
    let d_weight = tape.propagated.t_matmul(&d_pre);
    // dX = Pᵀ (dU Wᵀ)
    let d_x = need_dx.then(|| propagation.sparse_t_matmul(&d_pre.matmul_t(&params.weight)));
    Ok((
        GcnLayerParams {
            weight: d_weight,
            prelu_slope: d_slope,
        },
        d_x,
    ))
}

/// Cached activations of the projection head.
#[derive(Debug, Clone)]
pub struct HeadTape {
    input: Matrix,
    pre_norm: Matrix,
    output: Matrix,
}

impl HeadTape {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

/// `l2_normalize_rows(Z · W + b)`.
pub fn head_forward(z: &Matrix, params: &ProjectionHeadParams) -> Result<Matrix> {
    Ok(head_forward_cached(z, params)?.output)
}

pub fn head_forward_cached(z: &Matrix, params: &ProjectionHeadParams) -> Result<HeadTape> {
    if z.cols() != params.weight.rows() || params.bias.len() != params.weight.cols() {
        return Err(Error::Input(format!(
            "projection head expects {} input features, got {}",
            params.weight.rows(),
            z.cols()
        )));
    }
    let mut pre_norm = z.matmul(&params.weight);
    for i in 0..pre_norm.rows() {
        for (v, b) in pre_norm.row_mut(i).iter_mut().zip(&params.bias) {
            *v += b;
        }
    }
    let output = l2_normalize_rows(&pre_norm);
    Ok(HeadTape {
        input: z.clone(),
        pre_norm,
        output,
    })
}

/// Returns the head's parameter gradients and `dL/dZ`.
pub fn head_backward(
    tape: &HeadTape,
    params: &ProjectionHeadParams,
    d_out: &Matrix,
) -> Result<(ProjectionHeadParams, Matrix)> {
    if d_out.shape() != tape.output.shape() {
        return Err(Error::Input("head upstream gradient has the wrong shape".into()));
    }
    // t = y/‖y‖  ⇒  dy = (dt − t (t·dt)) / ‖y‖
    let mut d_pre = Matrix::zeros(d_out.rows(), d_out.cols());
    for i in 0..d_out.rows() {
        let y = tape.pre_norm.row(i);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let t = tape.output.row(i);
        let dt = d_out.row(i);
        let dot: f64 = t.iter().zip(dt).map(|(a, b)| a * b).sum();
        for ((dy, &ti), &dti) in d_pre.row_mut(i).iter_mut().zip(t).zip(dt) {
            *dy = (dti - ti * dot) / norm;
        }
    }
    let d_weight = tape.input.t_matmul(&d_pre);
    let d_bias = d_pre.column_sums();
    let d_in = d_pre.matmul_t(&params.weight);
    Ok((
        ProjectionHeadParams {
            weight: d_weight,
            bias: d_bias,
        },
        d_in,
    ))
}

/// Global summary `h` of node representations.
pub fn readout(z: &Matrix, mode: Readout) -> Vec<f64> {
    let sums = z.column_sums();
    match mode {
        Readout::Sum => sums,
        Readout::Mean => {
            let n = z.rows().max(1) as f64;
            sums.into_iter().map(|v| v / n).collect()
        }
    }
}

/// Adds `dL/dh` to every row of `d_z` (scaled by 1/n for the mean readout).
pub fn readout_backward(d_h: &[f64], mode: Readout, d_z: &mut Matrix) {
    let scale = match mode {
        Readout::Sum => 1.0,
        Readout::Mean => 1.0 / d_z.rows().max(1) as f64,
    };
    for i in 0..d_z.rows() {
        for (d, g) in d_z.row_mut(i).iter_mut().zip(d_h) {
            *d += g * scale;
        }
    }
}

pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `zᵀ M h`.
pub fn bilinear_score(z: &[f64], h: &[f64], params: &DiscriminatorParams) -> Result<f64> {
    let m = &params.bilinear;
    if z.len() != m.rows() || h.len() != m.cols() {
        return Err(Error::Input(format!(
            "discriminator is {}x{}, got z of {} and h of {}",
            m.rows(),
            m.cols(),
            z.len(),
            h.len()
        )));
    }
    let mut s = 0.0;
    for (i, zi) in z.iter().enumerate() {
        if *zi == 0.0 {
            continue;
        }
        let mh: f64 = m.row(i).iter().zip(h).map(|(a, b)| a * b).sum();
        s += zi * mh;
    }
    Ok(s)
}

/// `σ(zᵀ M h)`, clamped to `[1e-7, 1 - 1e-7]`.
pub fn discriminate(z: &[f64], h: &[f64], params: &DiscriminatorParams) -> Result<f64> {
    Ok(sigmoid(bilinear_score(z, h, params)?).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// One histology patch: 3 channels of `size × size` pixels, channel-major,
/// intensities on a 0–255 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub size: usize,
    pub pixels: Vec<f64>,
}

/// Number of features produced by the simple patch featurizer.
pub const SIMPLE_FEATURES: usize = 30;
const HIST_BINS: usize = 8;

impl Patch {
    /// Per-channel mean, standard deviation and an 8-bin normalized
    /// histogram over [0, 256).
    pub fn features(&self) -> Result<Vec<f64>> {
        let per = self.size * self.size;
        if per == 0 || self.pixels.len() != 3 * per {
            return Err(Error::Data(format!(
                "patch of size {} needs {} pixel values, got {}",
                self.size,
                3 * per,
                self.pixels.len()
            )));
        }
        let mut means = [0.0; 3];
        let mut stds = [0.0; 3];
        let mut hist = [0.0; 3 * HIST_BINS];
        for c in 0..3 {
            let ch = &self.pixels[c * per..(c + 1) * per];
            let mean = ch.iter().sum::<f64>() / per as f64;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            means[c] = mean;
            stds[c] = var.sqrt();
            for v in ch {
                let bin = ((v / 256.0) * HIST_BINS as f64).floor().clamp(0.0, (HIST_BINS - 1) as f64) as usize;
                hist[c * HIST_BINS + bin] += 1.0 / per as f64;
            }
        }
        let mut out = Vec::with_capacity(SIMPLE_FEATURES);
        out.extend_from_slice(&means);
        out.extend_from_slice(&stds);
        out.extend_from_slice(&hist);
        Ok(out)
    }
}

/// Where image features come from. The frozen CNN backbone is replaced by
/// fixed per-spot vectors; the trainable last layer is the image head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ImageFeatureSource {
    /// One stored feature row per spot.
    Precomputed { features: Matrix, patch_size: Option<usize> },
    /// Raw pixel patches summarized by [`Patch::features`].
    Simple { patches: Vec<Patch> },
}

impl ImageFeatureSource {
    pub fn n_spots(&self) -> usize {
        match self {
            ImageFeatureSource::Precomputed { features, .. } => features.rows(),
            ImageFeatureSource::Simple { patches } => patches.len(),
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            ImageFeatureSource::Precomputed { features, .. } => features.cols(),
            ImageFeatureSource::Simple { .. } => SIMPLE_FEATURES,
        }
    }

    /// Feature rows for every spot.
    pub fn all(&self) -> Result<Matrix> {
        image_featurize(self, &(0..self.n_spots()).collect::<Vec<_>>())
    }
}

pub fn image_featurize(source: &ImageFeatureSource, spot_indices: &[usize]) -> Result<Matrix> {
    let n = source.n_spots();
    if let Some(&bad) = spot_indices.iter().find(|&&i| i >= n) {
        return Err(Error::Data(format!("no image features for spot index {bad} ({n} available)")));
    }
    match source {
        ImageFeatureSource::Precomputed { features, .. } => Ok(features.select_rows(spot_indices)),
        ImageFeatureSource::Simple { patches } => {
            let rows = spot_indices
                .iter()
                .map(|&i| patches[i].features())
                .collect::<Result<Vec<_>>>()?;
            if rows.is_empty() {
                return Ok(Matrix::zeros(0, SIMPLE_FEATURES));
            }
            Matrix::from_rows(&rows)
        }
    }
}
