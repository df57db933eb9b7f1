//! Loss terms and their gradients: the DGI loss for each branch, the nHSIC
//! bottleneck on the gene branch, and the soft-target cross-modal alignment.
//!
//! ```text
//! total = alignment + λ_dgi (dgi_gene + dgi_image) + λ_hsic · bottleneck
//! bottleneck = nHSIC(T_α, T_ρ) − β nHSIC(T_ι, T_ρ)
//! ```

use serde::{Deserialize, Serialize};

use crate::encoders::{
    bilinear_score, head_backward, head_forward_cached, readout, readout_backward, sigmoid,
    BranchParams, BranchPass, DiscriminatorParams, ModelParams, ProjectionHeadParams, Readout,
    PROB_CLAMP,
};
use crate::error::{Error, Result};
use crate::hsic::{median_bandwidth, nhsic_with_grads};
use crate::linalg::{check_temperature, log_softmax, softmax_in_place, Matrix};

/// Per-term loss values of one step (or an epoch average of steps).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dgi_gene: f64,
    pub dgi_image: f64,
    pub bottleneck: f64,
    pub alignment: f64,
    pub total: f64,
    pub lambda_dgi: f64,
    pub lambda_hsic: f64,
    pub beta: f64,
    pub tau: f64,
}

impl LossBreakdown {
    /// Recomputes `total` from the terms and weights.
    pub fn combine(&mut self) {
        self.total = self.alignment
            + self.lambda_dgi * (self.dgi_gene + self.dgi_image)
            + self.lambda_hsic * self.bottleneck;
    }

    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("dgi_gene", self.dgi_gene),
            ("dgi_image", self.dgi_image),
            ("bottleneck", self.bottleneck),
            ("alignment", self.alignment),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Weights and hyperparameters of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda_dgi: f64,
    pub lambda_hsic: f64,
    pub beta: f64,
    pub tau: f64,
    pub readout: Readout,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_dgi: 1.0,
            lambda_hsic: 1.0,
            beta: 1.0,
            tau: 1.0,
            readout: Readout::Sum,
        }
    }
}

fn check_same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!(
            "{what}: shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `-Σ_i [log D(z_i, h) + log(1 - D(z'_i, h))]` for a given readout `h`.
pub fn dgi_loss(z: &Matrix, z_neg: &Matrix, h: &[f64], disc: &DiscriminatorParams) -> Result<f64> {
    check_same_shape(z, z_neg, "dgi_loss")?;
    let mut loss = 0.0;
    for i in 0..z.rows() {
        let p = sigmoid(bilinear_score(z.row(i), h, disc)?).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let q = sigmoid(bilinear_score(z_neg.row(i), h, disc)?).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= p.ln() + (1.0 - q).ln();
    }
    Ok(loss)
}

pub(crate) struct DgiEval {
    pub loss: f64,
    pub d_pos: Matrix,
    pub d_neg: Matrix,
    pub d_bilinear: Matrix,
}

/// DGI loss with `h = readout(z)` and its gradients. Clamped probabilities
/// contribute no gradient.
pub(crate) fn dgi_loss_with_grad(
    z: &Matrix,
    z_neg: &Matrix,
    disc: &DiscriminatorParams,
    mode: Readout,
) -> Result<DgiEval> {
    check_same_shape(z, z_neg, "dgi_loss")?;
    let h = readout(z, mode);
    let m = &disc.bilinear;
    if m.shape() != (z.cols(), z.cols()) {
        return Err(Error::Input(format!(
            "discriminator is {:?}, representations have {} columns",
            m.shape(),
            z.cols()
        )));
    }
    let mh: Vec<f64> = m.row_iter().map(|r| r.iter().zip(&h).map(|(a, b)| a * b).sum()).collect();
    let n = z.rows();
    let mut loss = 0.0;
    let mut g_pos = vec![0.0; n];
    let mut g_neg = vec![0.0; n];
    let upper = 1.0 - PROB_CLAMP;
    for i in 0..n {
        let s: f64 = z.row(i).iter().zip(&mh).map(|(a, b)| a * b).sum();
        let sig = sigmoid(s);
        loss -= sig.clamp(PROB_CLAMP, upper).ln();
        if sig > PROB_CLAMP && sig < upper {
            g_pos[i] = -(1.0 - sig);
        }
        let s: f64 = z_neg.row(i).iter().zip(&mh).map(|(a, b)| a * b).sum();
        let sig = sigmoid(s);
        loss -= (1.0 - sig.clamp(PROB_CLAMP, upper)).ln();
        if sig > PROB_CLAMP && sig < upper {
            g_neg[i] = sig;
        }
    }
    // u = Zᵀ g + Z'ᵀ g'; dM = u hᵀ; dh = Mᵀ u
    let d = z.cols();
    let mut u = vec![0.0; d];
    for i in 0..n {
        for (k, uk) in u.iter_mut().enumerate() {
            *uk += g_pos[i] * z[(i, k)] + g_neg[i] * z_neg[(i, k)];
        }
    }
    let d_bilinear = Matrix::from_fn(d, d, |a, b| u[a] * h[b]);
    let d_h: Vec<f64> = (0..d).map(|b| (0..d).map(|a| m[(a, b)] * u[a]).sum()).collect();
    let mut d_pos = Matrix::from_fn(n, d, |i, k| g_pos[i] * mh[k]);
    let d_neg = Matrix::from_fn(n, d, |i, k| g_neg[i] * mh[k]);
    readout_backward(&d_h, mode, &mut d_pos);
    Ok(DgiEval {
        loss,
        d_pos,
        d_neg,
        d_bilinear,
    })
}

/// Kernel bandwidths used for one bottleneck evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BottleneckBandwidths {
    pub alpha: f64,
    pub rho: f64,
    pub iota: f64,
}

impl BottleneckBandwidths {
    /// Median heuristic on each matrix.
    pub fn median(talpha: &Matrix, trho: &Matrix, tiota: &Matrix) -> Self {
        Self {
            alpha: median_bandwidth(talpha),
            rho: median_bandwidth(trho),
            iota: median_bandwidth(tiota),
        }
    }
}

/// `nHSIC(T_α, T_ρ) − β nHSIC(T_ι, T_ρ)` with median-heuristic bandwidths.
pub fn bottleneck_objective(talpha: &Matrix, trho: &Matrix, tiota: &Matrix, beta: f64) -> Result<f64> {
    Ok(bottleneck_with_grad(talpha, trho, tiota, beta, None, false)?.value)
}

pub(crate) struct BottleneckEval {
    pub value: f64,
    pub d_rho: Option<Matrix>,
    pub d_iota: Option<Matrix>,
    pub bandwidths: BottleneckBandwidths,
}

/// Bottleneck value and (optionally) gradients with respect to `T_ρ` and
/// `T_ι`. Bandwidths are constants of the differentiation.
pub(crate) fn bottleneck_with_grad(
    talpha: &Matrix,
    trho: &Matrix,
    tiota: &Matrix,
    beta: f64,
    bandwidths: Option<BottleneckBandwidths>,
    want_grad: bool,
) -> Result<BottleneckEval> {
    if talpha.rows() != trho.rows() || trho.rows() != tiota.rows() {
        return Err(Error::Input(format!(
            "bottleneck inputs need equal row counts ({}, {}, {})",
            talpha.rows(),
            trho.rows(),
            tiota.rows()
        )));
    }
    let bw = bandwidths.unwrap_or_else(|| BottleneckBandwidths::median(talpha, trho, tiota));
    let keep = nhsic_with_grads(talpha, trho, bw.alpha, bw.rho, false, want_grad)?;
    let pred = nhsic_with_grads(tiota, trho, bw.iota, bw.rho, want_grad, want_grad)?;
    let value = keep.value - beta * pred.value;
    let (d_rho, d_iota) = if want_grad {
        let mut d_rho = keep.grad_b.expect("requested");
        d_rho.add_scaled(&pred.grad_b.expect("requested"), -beta);
        let d_iota = pred.grad_a.expect("requested").scale(-beta);
        (Some(d_rho), Some(d_iota))
    } else {
        (None, None)
    };
    Ok(BottleneckEval {
        value,
        d_rho,
        d_iota,
        bandwidths: bw,
    })
}

/// Symmetric soft-target contrastive loss between gene and image embeddings.
///
/// `target = row_softmax((S_img + S_spt)/2, τ)`, `logits = S_cro / τ`, and the
/// loss averages row-wise cross-entropy of `logits` against `target` with that
/// of `logitsᵀ` against `targetᵀ`.
pub fn alignment_loss(tiota: &Matrix, gf: &Matrix, tau: f64) -> Result<f64> {
    Ok(alignment_with_grad(tiota, gf, tau, false)?.value)
}

pub(crate) struct AlignmentEval {
    pub value: f64,
    pub d_tiota: Option<Matrix>,
    pub d_gf: Option<Matrix>,
}

pub(crate) fn alignment_with_grad(tiota: &Matrix, gf: &Matrix, tau: f64, want_grad: bool) -> Result<AlignmentEval> {
    check_temperature(tau)?;
    check_same_shape(tiota, gf, "alignment_loss")?;
    let b = tiota.rows();
    if b == 0 {
        return Err(Error::Input("alignment needs at least one pair".into()));
    }
    let s_cro = tiota.matmul_t(gf);
    let s_spt = tiota.matmul_t(tiota);
    let s_img = gf.matmul_t(gf);
    let mut target = Matrix::from_fn(b, b, |i, j| 0.5 * (s_img[(i, j)] + s_spt[(i, j)]));
    for i in 0..b {
        softmax_in_place(target.row_mut(i), tau);
    }
    let logits = s_cro.scale(1.0 / tau);
    let mut log_p = Matrix::zeros(b, b);
    for i in 0..b {
        log_p.row_mut(i).copy_from_slice(&log_softmax(logits.row(i)));
    }
    // column-wise log-softmax = row-wise on the transpose
    let logits_t = logits.transpose();
    let mut log_q = Matrix::zeros(b, b);
    for j in 0..b {
        for (i, v) in log_softmax(logits_t.row(j)).into_iter().enumerate() {
            log_q[(i, j)] = v;
        }
    }
    let mut ce_rows = 0.0;
    let mut ce_cols = 0.0;
    for i in 0..b {
        for j in 0..b {
            ce_rows -= target[(i, j)] * log_p[(i, j)];
            ce_cols -= target[(i, j)] * log_q[(i, j)];
        }
    }
    let bf = b as f64;
    let value = 0.5 * (ce_rows / bf + ce_cols / bf);
    if !want_grad {
        return Ok(AlignmentEval {
            value,
            d_tiota: None,
            d_gf: None,
        });
    }

    let c = 0.5 / bf;
    let row_w: Vec<f64> = target.row_iter().map(|r| r.iter().sum()).collect();
    let col_w = target.column_sums();
    // dL/dlogits
    let d_logits = Matrix::from_fn(b, b, |i, j| {
        c * (log_p[(i, j)].exp() * row_w[i] + log_q[(i, j)].exp() * col_w[j] - 2.0 * target[(i, j)])
    });
    // dL/dtarget, then through the row softmax at temperature τ
    let d_target = Matrix::from_fn(b, b, |i, j| -c * (log_p[(i, j)] + log_q[(i, j)]));
    let mut d_mix = Matrix::zeros(b, b);
    for i in 0..b {
        let t = target.row(i);
        let g = d_target.row(i);
        let dot: f64 = t.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..b {
            d_mix[(i, j)] = t[j] * (g[j] - dot) / tau;
        }
    }
    let d_scro = d_logits.scale(1.0 / tau);
    // S_spt and S_img each enter the mix with weight 1/2; both are X Xᵀ
    let d_sym = Matrix::from_fn(b, b, |i, j| 0.5 * (d_mix[(i, j)] + d_mix[(j, i)]));
    let mut d_tiota = d_scro.matmul(gf);
    d_tiota.add_scaled(&d_sym.matmul(tiota), 1.0);
    let mut d_gf = d_scro.t_matmul(tiota);
    d_gf.add_scaled(&d_sym.matmul(gf), 1.0);
    Ok(AlignmentEval {
        value,
        d_tiota: Some(d_tiota),
        d_gf: Some(d_gf),
    })
}

/// Everything one training step needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub propagation: &'a Matrix,
    /// `T_α`, the gene-branch input for every spot of the slice.
    pub gene_input: &'a Matrix,
    pub image_input: &'a Matrix,
    /// Row permutations producing the DGI negatives.
    pub gene_negative: &'a [usize],
    pub image_negative: &'a [usize],
    /// Spots of the minibatch for the alignment and bottleneck terms.
    pub batch: &'a [usize],
}

/// Loss values, gradients and the bandwidths used for the bottleneck.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub breakdown: LossBreakdown,
    pub grads: Option<ModelParams>,
    pub bandwidths: Option<BottleneckBandwidths>,
}

/// Combined objective and its gradient for every parameter.
pub fn total_loss(params: &ModelParams, inputs: &StepInputs, cfg: &ObjectiveConfig) -> Result<(LossBreakdown, ModelParams)> {
    let eval = evaluate_step(params, inputs, cfg, None, true)?;
    Ok((eval.breakdown, eval.grads.expect("requested")))
}

/// Evaluates the combined objective. Passing `bandwidths` pins the bottleneck
/// kernels (finite-difference checks need this); otherwise the median
/// heuristic is applied to the batch.
pub fn evaluate_step(
    params: &ModelParams,
    inputs: &StepInputs,
    cfg: &ObjectiveConfig,
    bandwidths: Option<BottleneckBandwidths>,
    want_grad: bool,
) -> Result<StepEval> {
    let n = inputs.gene_input.rows();
    if inputs.image_input.rows() != n || inputs.propagation.shape() != (n, n) {
        return Err(Error::Input(format!(
            "step inputs disagree on spot count: gene {n}, image {}, propagation {:?}",
            inputs.image_input.rows(),
            inputs.propagation.shape()
        )));
    }
    if inputs.gene_negative.len() != n || inputs.image_negative.len() != n {
        return Err(Error::Input("negative permutations must cover every spot".into()));
    }
    if let Some(&bad) = inputs.batch.iter().find(|&&i| i >= n) {
        return Err(Error::Input(format!("batch index {bad} out of range for {n} spots")));
    }
    let prop = inputs.propagation;
    let mut out = LossBreakdown {
        lambda_dgi: cfg.lambda_dgi,
        lambda_hsic: cfg.lambda_hsic,
        beta: cfg.beta,
        tau: cfg.tau,
        ..Default::default()
    };
    let mut grads = want_grad.then(|| params.zeros_like());

    let gene_pass = params.gene.hidden_forward(prop, inputs.gene_input, want_grad)?;
    let image_pass = params.image.hidden_forward(prop, inputs.image_input, want_grad)?;

    // DGI terms, full slice. A branch without a graph encoder has none.
    let gene_dgi = branch_dgi(&params.gene, prop, inputs.gene_input, inputs.gene_negative, cfg.readout, &gene_pass, want_grad)?;
    let image_dgi = branch_dgi(&params.image, prop, inputs.image_input, inputs.image_negative, cfg.readout, &image_pass, want_grad)?;
    out.dgi_gene = gene_dgi.as_ref().map_or(0.0, |d| d.eval.loss);
    out.dgi_image = image_dgi.as_ref().map_or(0.0, |d| d.eval.loss);

    // Minibatch terms on rows sliced from the full-slice forward.
    let batch = inputs.batch;
    let talpha_b = inputs.gene_input.select_rows(batch);
    let trho_b = gene_pass.hidden.select_rows(batch);
    let gimg_b = image_pass.hidden.select_rows(batch);
    let gene_head = head_forward_cached(&trho_b, &params.gene.head)?;
    let image_head = head_forward_cached(&gimg_b, &params.image.head)?;

    // An empty batch leaves a DGI-only step.
    let align = if batch.is_empty() {
        None
    } else {
        let e = alignment_with_grad(gene_head.output(), image_head.output(), cfg.tau, want_grad)?;
        out.alignment = e.value;
        Some(e)
    };

    let bottleneck = if batch.len() >= 2 {
        let e = bottleneck_with_grad(&talpha_b, &trho_b, gene_head.output(), cfg.beta, bandwidths, want_grad)?;
        out.bottleneck = e.value;
        Some(e)
    } else {
        None
    };
    out.combine();

    let Some(g) = grads.as_mut() else {
        return Ok(StepEval {
            breakdown: out,
            grads: None,
            bandwidths: bottleneck.map(|b| b.bandwidths),
        });
    };

    // d/d T_ι and d/d G_f for the batch rows
    let (mut d_tiota, d_gf) = match align {
        Some(e) => (e.d_tiota.expect("requested"), e.d_gf.expect("requested")),
        None => (
            Matrix::zeros(0, params.gene.embed_dim()),
            Matrix::zeros(0, params.image.embed_dim()),
        ),
    };
    let mut d_trho_b = Matrix::zeros(trho_b.rows(), trho_b.cols());
    if let Some(e) = &bottleneck {
        if cfg.lambda_hsic != 0.0 {
            d_tiota.add_scaled(e.d_iota.as_ref().expect("requested"), cfg.lambda_hsic);
            d_trho_b.add_scaled(e.d_rho.as_ref().expect("requested"), cfg.lambda_hsic);
        }
    }
    let (gh, d_from_head) = head_backward(&gene_head, &params.gene.head, &d_tiota)?;
    accumulate_head(&mut g.gene.head, &gh);
    d_trho_b.add_scaled(&d_from_head, 1.0);
    let (ih, d_img_b) = head_backward(&image_head, &params.image.head, &d_gf)?;
    accumulate_head(&mut g.image.head, &ih);

    let mut d_gene_hidden = scatter_rows(&d_trho_b, batch, n);
    let mut d_image_hidden = scatter_rows(&d_img_b, batch, n);

    if cfg.lambda_dgi != 0.0 {
        for (dgi, d_hidden, branch, bgrads) in [
            (gene_dgi, &mut d_gene_hidden, &params.gene, &mut g.gene),
            (image_dgi, &mut d_image_hidden, &params.image, &mut g.image),
        ] {
            let Some(dgi) = dgi else { continue };
            d_hidden.add_scaled(&dgi.eval.d_pos, cfg.lambda_dgi);
            bgrads.disc.bilinear.add_scaled(&dgi.eval.d_bilinear, cfg.lambda_dgi);
            branch.hidden_backward(prop, &dgi.negative, &dgi.eval.d_neg.scale(cfg.lambda_dgi), bgrads)?;
        }
    }
    params.gene.hidden_backward(prop, &gene_pass, &d_gene_hidden, &mut g.gene)?;
    params.image.hidden_backward(prop, &image_pass, &d_image_hidden, &mut g.image)?;

    Ok(StepEval {
        breakdown: out,
        grads,
        bandwidths: bottleneck.map(|b| b.bandwidths),
    })
}

struct BranchDgi {
    eval: DgiEval,
    negative: BranchPass,
}

fn branch_dgi(
    branch: &BranchParams,
    prop: &Matrix,
    x: &Matrix,
    perm: &[usize],
    mode: Readout,
    positive: &BranchPass,
    cache: bool,
) -> Result<Option<BranchDgi>> {
    if branch.gcn.is_empty() {
        return Ok(None);
    }
    let negative = branch.hidden_forward(prop, &x.select_rows(perm), cache)?;
    let eval = dgi_loss_with_grad(&positive.hidden, &negative.hidden, &branch.disc, mode)?;
    Ok(Some(BranchDgi { eval, negative }))
}

fn accumulate_head(into: &mut ProjectionHeadParams, g: &ProjectionHeadParams) {
    into.weight.add_scaled(&g.weight, 1.0);
    for (a, b) in into.bias.iter_mut().zip(&g.bias) {
        *a += b;
    }
}

fn scatter_rows(rows: &Matrix, index: &[usize], n: usize) -> Matrix {
    let mut out = Matrix::zeros(n, rows.cols());
    for (r, &i) in index.iter().enumerate() {
        for (o, v) in out.row_mut(i).iter_mut().zip(rows.row(r)) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{discriminate, ModelDims};
    use crate::graph::{build_radius_adjacency, shuffle_permutation};
    use crate::hsic::nhsic;
    use crate::linalg::l2_normalize_rows;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel(a: f64, f: f64) -> f64 {
        (a - f).abs() / a.abs().max(f.abs()).max(1e-7)
    }

    fn fd_check(f: &dyn Fn(&Matrix) -> f64, x: &Matrix, grad: &Matrix) -> f64 {
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..x.as_slice().len() {
            let mut p = x.clone();
            p.as_mut_slice()[k] += eps;
            let mut m = x.clone();
            m.as_mut_slice()[k] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            worst = worst.max(rel(grad.as_slice()[k], fd));
        }
        worst
    }

    #[test]
    fn dgi_chance_discriminator() {
        let z = random(8, 3, 1);
        let zn = random(8, 3, 2);
        let disc = DiscriminatorParams {
            bilinear: Matrix::zeros(3, 3),
        };
        let h = readout(&z, Readout::Sum);
        let loss = dgi_loss(&z, &zn, &h, &disc).unwrap();
        assert_abs_diff_eq!(loss, 16.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 11.090354888959125, epsilon = 1e-12);
    }

    #[test]
    fn dgi_perfect_separation_limit() {
        let eps: f64 = 1e-6;
        let logit = ((1.0 - eps) / eps).ln();
        let n = 8;
        let z = Matrix::from_fn(n, 1, |_, _| logit);
        let zn = Matrix::from_fn(n, 1, |_, _| -logit);
        let disc = DiscriminatorParams {
            bilinear: Matrix::identity(1),
        };
        let loss = dgi_loss(&z, &zn, &[1.0], &disc).unwrap();
        assert!(loss >= 0.0 && loss < 2.0 * n as f64 * 1.1e-6, "{loss}");
    }

    #[test]
    fn dgi_matches_loop_oracle_and_grad() {
        let z = random(8, 4, 3);
        let zn = random(8, 4, 4);
        let disc = DiscriminatorParams {
            bilinear: random(4, 4, 5),
        };
        for mode in [Readout::Sum, Readout::Mean] {
            let h = readout(&z, mode);
            let mut oracle = 0.0;
            for i in 0..8 {
                oracle -= discriminate(z.row(i), &h, &disc).unwrap().ln();
                oracle -= (1.0 - discriminate(zn.row(i), &h, &disc).unwrap()).ln();
            }
            let e = dgi_loss_with_grad(&z, &zn, &disc, mode).unwrap();
            assert_abs_diff_eq!(e.loss, oracle, epsilon = 1e-12);
            assert_abs_diff_eq!(dgi_loss(&z, &zn, &h, &disc).unwrap(), oracle, epsilon = 1e-12);

            let f_pos = |x: &Matrix| dgi_loss_with_grad(x, &zn, &disc, mode).unwrap().loss;
            assert!(fd_check(&f_pos, &z, &e.d_pos) < 1e-4);
            let f_neg = |x: &Matrix| dgi_loss_with_grad(&z, x, &disc, mode).unwrap().loss;
            assert!(fd_check(&f_neg, &zn, &e.d_neg) < 1e-4);
            let f_m = |m: &Matrix| {
                dgi_loss_with_grad(&z, &zn, &DiscriminatorParams { bilinear: m.clone() }, mode)
                    .unwrap()
                    .loss
            };
            assert!(fd_check(&f_m, &disc.bilinear, &e.d_bilinear) < 1e-4);
        }
    }

    #[test]
    fn dgi_decreases_with_positive_score() {
        let z = random(6, 2, 6);
        let zn = random(6, 2, 7);
        let h = vec![0.4, -0.3];
        let disc = DiscriminatorParams {
            bilinear: Matrix::identity(2),
        };
        let base = dgi_loss(&z, &zn, &h, &disc).unwrap();
        // moving z_0 along h raises its score zᵀh
        let mut z2 = z.clone();
        z2[(0, 0)] += 0.1 * h[0];
        z2[(0, 1)] += 0.1 * h[1];
        assert!(dgi_loss(&z2, &zn, &h, &disc).unwrap() < base);
        assert!(dgi_loss(&z, &zn, &h, &disc).unwrap() >= 0.0);
        assert!(matches!(dgi_loss(&z, &random(5, 2, 1), &h, &disc), Err(Error::Input(_))));
    }

    #[test]
    fn bottleneck_examples() {
        let ta = random(16, 5, 8);
        let tr = random(16, 4, 9);
        let ti = l2_normalize_rows(&random(16, 3, 10));
        let bw = BottleneckBandwidths::median(&ta, &tr, &ti);
        assert_abs_diff_eq!(
            bottleneck_objective(&ta, &tr, &ti, 0.0).unwrap(),
            nhsic(&ta, &tr, bw.alpha, bw.rho).unwrap(),
            epsilon = 1e-15
        );
        let constant = Matrix::from_fn(16, 4, |_, j| j as f64);
        assert_eq!(bottleneck_objective(&ta, &constant, &ti, 1.0).unwrap(), 0.0);

        // compositional oracle from the hsic primitive
        let h = |a: &Matrix, b: &Matrix, sa: f64, sb: f64| crate::hsic::hsic(a, b, sa, sb).unwrap();
        let n1 = h(&ta, &tr, bw.alpha, bw.rho)
            / ((1.0 + h(&ta, &ta, bw.alpha, bw.alpha)) * (1.0 + h(&tr, &tr, bw.rho, bw.rho))).sqrt();
        let n2 = h(&ti, &tr, bw.iota, bw.rho)
            / ((1.0 + h(&ti, &ti, bw.iota, bw.iota)) * (1.0 + h(&tr, &tr, bw.rho, bw.rho))).sqrt();
        assert_abs_diff_eq!(
            bottleneck_objective(&ta, &tr, &ti, 0.7).unwrap(),
            n1 - 0.7 * n2,
            epsilon = 1e-12
        );
        assert!(matches!(
            bottleneck_objective(&ta, &random(15, 4, 1), &ti, 1.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn bottleneck_bounded_for_unit_beta() {
        for seed in 0..10 {
            let ta = random(12, 3, seed);
            let tr = ta.map(|v| v.tanh());
            let ti = tr.clone();
            let v = bottleneck_objective(&ta, &tr, &ti, 1.0).unwrap();
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn bottleneck_grad_matches_finite_differences() {
        let ta = random(8, 5, 11);
        let tr = random(8, 4, 12);
        let ti = random(8, 3, 13);
        let e = bottleneck_with_grad(&ta, &tr, &ti, 1.3, None, true).unwrap();
        let bw = Some(e.bandwidths);
        let f_rho = |x: &Matrix| bottleneck_with_grad(&ta, x, &ti, 1.3, bw, false).unwrap().value;
        assert!(fd_check(&f_rho, &tr, e.d_rho.as_ref().unwrap()) < 1e-4);
        let f_iota = |x: &Matrix| bottleneck_with_grad(&ta, &tr, x, 1.3, bw, false).unwrap().value;
        assert!(fd_check(&f_iota, &ti, e.d_iota.as_ref().unwrap()) < 1e-4);
    }

    /// Literal double-loop transcription of the symmetric cross-entropy.
    fn alignment_oracle(ti: &Matrix, gf: &Matrix, tau: f64) -> f64 {
        let b = ti.rows();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let mut target = vec![vec![0.0; b]; b];
        for i in 0..b {
            let mix: Vec<f64> = (0..b)
                .map(|j| (dot(gf.row(i), gf.row(j)) + dot(ti.row(i), ti.row(j))) / 2.0 / tau)
                .collect();
            let z: f64 = mix.iter().map(|v| v.exp()).sum();
            for j in 0..b {
                target[i][j] = mix[j].exp() / z;
            }
        }
        let logits: Vec<Vec<f64>> = (0..b)
            .map(|i| (0..b).map(|j| dot(ti.row(i), gf.row(j)) / tau).collect())
            .collect();
        let mut rows = 0.0;
        for i in 0..b {
            let z: f64 = (0..b).map(|j| logits[i][j].exp()).sum();
            for j in 0..b {
                rows -= target[i][j] * (logits[i][j].exp() / z).ln();
            }
        }
        let mut cols = 0.0;
        for j in 0..b {
            let z: f64 = (0..b).map(|i| logits[i][j].exp()).sum();
            for i in 0..b {
                cols -= target[i][j] * (logits[i][j].exp() / z).ln();
            }
        }
        (rows / b as f64 + cols / b as f64) / 2.0
    }

    #[test]
    fn alignment_examples() {
        let one = l2_normalize_rows(&random(1, 4, 1));
        let other = l2_normalize_rows(&random(1, 4, 2));
        assert_abs_diff_eq!(alignment_loss(&one, &other, 0.5).unwrap(), 0.0, epsilon = 1e-15);

        let eye = Matrix::from_fn(4, 6, |i, j| if i == j { 1.0 } else { 0.0 });
        assert!(alignment_loss(&eye, &eye, 0.01).unwrap() < 1e-2);

        let ti = l2_normalize_rows(&random(3, 4, 3));
        let gf = l2_normalize_rows(&random(3, 4, 4));
        assert_abs_diff_eq!(
            alignment_loss(&ti, &gf, 0.7).unwrap(),
            alignment_oracle(&ti, &gf, 0.7),
            epsilon = 1e-10
        );
        assert!(matches!(alignment_loss(&ti, &gf, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn alignment_permutation_invariant() {
        let ti = l2_normalize_rows(&random(7, 5, 5));
        let gf = l2_normalize_rows(&random(7, 5, 6));
        let base = alignment_loss(&ti, &gf, 0.8).unwrap();
        let perm = shuffle_permutation(7, 3);
        assert_abs_diff_eq!(
            base,
            alignment_loss(&ti.select_rows(&perm), &gf.select_rows(&perm), 0.8).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn alignment_exchangeable_for_pairs() {
        // with two unit rows the soft target is symmetric, so swapping the
        // modalities leaves the loss unchanged
        let ti = l2_normalize_rows(&random(2, 4, 9));
        let gf = l2_normalize_rows(&random(2, 4, 10));
        assert_abs_diff_eq!(
            alignment_loss(&ti, &gf, 0.6).unwrap(),
            alignment_loss(&gf, &ti, 0.6).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn alignment_grad_matches_finite_differences() {
        for tau in [0.5, 1.0] {
            let ti = l2_normalize_rows(&random(5, 3, 7));
            let gf = l2_normalize_rows(&random(5, 3, 8));
            let e = alignment_with_grad(&ti, &gf, tau, true).unwrap();
            let f_t = |x: &Matrix| alignment_loss(x, &gf, tau).unwrap();
            assert!(fd_check(&f_t, &ti, e.d_tiota.as_ref().unwrap()) < 1e-4);
            let f_g = |x: &Matrix| alignment_loss(&ti, x, tau).unwrap();
            assert!(fd_check(&f_g, &gf, e.d_gf.as_ref().unwrap()) < 1e-4);
        }
    }

    fn step_fixture() -> (Matrix, Matrix, Matrix, Vec<usize>, Vec<usize>, ModelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let coords: Vec<[f64; 2]> = (0..8)
            .map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)])
            .collect();
        let prop = build_radius_adjacency(&coords, 1.3).unwrap().propagation;
        let params = ModelParams::init(
            &ModelDims {
                gene_in: 5,
                image_in: 6,
                hid: 4,
                embed: 3,
                gene_depth: 1,
                image_depth: 1,
            },
            2,
        );
        (
            prop,
            random(8, 5, 18),
            random(8, 6, 19),
            shuffle_permutation(8, 20),
            shuffle_permutation(8, 21),
            params,
        )
    }

    #[test]
    fn zero_auxiliary_weights_leave_alignment() {
        let (prop, xg, xi, ng, ni, params) = step_fixture();
        let batch = [0, 2, 3, 5, 7];
        let inputs = StepInputs {
            propagation: &prop,
            gene_input: &xg,
            image_input: &xi,
            gene_negative: &ng,
            image_negative: &ni,
            batch: &batch,
        };
        let cfg = ObjectiveConfig {
            lambda_dgi: 0.0,
            lambda_hsic: 0.0,
            ..Default::default()
        };
        let (b, _) = total_loss(&params, &inputs, &cfg).unwrap();
        assert_eq!(b.total, b.alignment);
        assert!(b.dgi_gene > 0.0 && b.dgi_image > 0.0);
    }

    #[test]
    fn doubling_hsic_weight_is_linear() {
        let (prop, xg, xi, ng, ni, params) = step_fixture();
        let batch = [1, 2, 4, 6];
        let inputs = StepInputs {
            propagation: &prop,
            gene_input: &xg,
            image_input: &xi,
            gene_negative: &ng,
            image_negative: &ni,
            batch: &batch,
        };
        let cfg = ObjectiveConfig::default();
        let a = evaluate_step(&params, &inputs, &cfg, None, false).unwrap().breakdown;
        let doubled = ObjectiveConfig {
            lambda_hsic: 2.0 * cfg.lambda_hsic,
            ..cfg
        };
        let b = evaluate_step(&params, &inputs, &doubled, None, false).unwrap().breakdown;
        assert_abs_diff_eq!(b.total - a.total, a.bottleneck * cfg.lambda_hsic, epsilon = 1e-12);
        let mut recombined = a;
        recombined.combine();
        assert_eq!(recombined.total, a.total);
    }

    #[test]
    fn empty_batch_is_a_dgi_only_step() {
        let (prop, xg, xi, ng, ni, params) = step_fixture();
        let inputs = StepInputs {
            propagation: &prop,
            gene_input: &xg,
            image_input: &xi,
            gene_negative: &ng,
            image_negative: &ni,
            batch: &[],
        };
        let cfg = ObjectiveConfig::default();
        let eval = evaluate_step(&params, &inputs, &cfg, None, true).unwrap();
        let b = eval.breakdown;
        assert_eq!((b.alignment, b.bottleneck), (0.0, 0.0));
        assert_abs_diff_eq!(b.total, b.dgi_gene + b.dgi_image, epsilon = 1e-12);
        let g = eval.grads.unwrap();
        assert!(g.gene.head.weight.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.gene.disc.bilinear.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn step_input_validation() {
        let (prop, xg, xi, ng, ni, params) = step_fixture();
        let batch = [0, 9];
        let inputs = StepInputs {
            propagation: &prop,
            gene_input: &xg,
            image_input: &xi,
            gene_negative: &ng,
            image_negative: &ni,
            batch: &batch,
        };
        assert!(matches!(
            total_loss(&params, &inputs, &ObjectiveConfig::default()),
            Err(Error::Input(_))
        ));
    }
}
