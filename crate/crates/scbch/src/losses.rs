//! Objective terms: neighbor-consensus soft labels, confidence weights,
//! weighted classification, and the bidirectional soft contrastive terms
//! (attraction, margin-adjusted repulsion, quantization regularizer).
//!
//! Pair construction follows the bidirectional taxonomy: a pair attracts
//! iff its label Jaccard similarity is positive, repels with weight
//! `1 - R_ij` iff that similarity is below one, and soft pairs with
//! partial overlap do both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{cosine, Matrix, Var};

/// Probability floor/ceiling applied before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// How cross-modal similarities are scaled before the exponential terms.
///
/// `Raw` uses the plain inner product: attraction self-limits once a pair
/// aligns (`exp(xi - S)` vanishes), but the geometry seen by `xi` and the
/// margin grows with the code length. `Mean` divides by the code length,
/// keeping similarities in [-1, 1] at the cost of that saturation. `Sqrt`
/// divides by the square root of the code length: random codes then have
/// unit-variance similarities for every length, so one `xi`/`margin`
/// setting transfers across lengths while saturation is preserved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityScaling {
    Mean,
    Raw,
    #[default]
    Sqrt,
}

impl SimilarityScaling {
    /// Multiplier applied to an inner product of `code_length`-bit codes.
    pub fn factor(&self, code_length: usize) -> f64 {
        match self {
            SimilarityScaling::Mean => 1.0 / code_length as f64,
            SimilarityScaling::Raw => 1.0,
            SimilarityScaling::Sqrt => 1.0 / (code_length as f64).sqrt(),
        }
    }
}

/// Hyperparameters of the contrastive terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveParams {
    /// Attraction sharpness; also the repulsion decay unless overridden.
    pub xi: f64,
    /// Optional separate decay for the repulsion hinge.
    pub xi_repulsion: Option<f64>,
    /// Margin threshold for hard negatives.
    pub margin: f64,
    /// Quantization regularizer strength.
    pub beta: f64,
    pub scaling: SimilarityScaling,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        ContrastiveParams {
            xi: 1.0,
            xi_repulsion: None,
            margin: 0.2,
            beta: 0.3,
            scaling: SimilarityScaling::default(),
        }
    }
}

impl ContrastiveParams {
    pub fn xi_repulsion(&self) -> f64 {
        self.xi_repulsion.unwrap_or(self.xi)
    }
}

/// Per-anchor neighbor indices and per-modality cosine similarities.
#[derive(Debug, Clone)]
pub struct NeighborSet {
    /// `indices[i]` lists the neighbors of anchor `i` (never containing `i`).
    pub indices: Vec<Vec<usize>>,
    /// `sims[m][i][k]` is the cosine similarity in modality `m` between
    /// anchor `i` and its `k`-th neighbor.
    pub sims: [Vec<Vec<f64>>; 2],
}

/// Scalar values of every objective term for one batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cscc: f64,
    pub attraction: f64,
    pub repulsion: f64,
    pub quantization: f64,
    pub total: f64,
    /// Per-sample confidence weights used in this batch.
    pub weights: Vec<f64>,
}

/// Jaccard similarity of two multi-hot label vectors.
///
/// Returns 0 when both vectors are empty.
pub fn jaccard(yi: &[f64], yj: &[f64]) -> Result<f64> {
    if yi.len() != yj.len() {
        return Err(Error::shape(format!(
            "jaccard: label lengths {} vs {}",
            yi.len(),
            yj.len()
        )));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&a, &b) in yi.iter().zip(yj) {
        let (a, b) = (a != 0.0, b != 0.0);
        inter += (a && b) as u8 as f64;
        union += (a || b) as u8 as f64;
    }
    if union == 0.0 {
        Ok(0.0)
    } else {
        Ok(inter / union)
    }
}

/// Full n x n matrix of pairwise label Jaccard similarities.
pub fn jaccard_matrix(labels: &Matrix) -> Matrix {
    let n = labels.rows();
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = jaccard(labels.row(i), labels.row(j)).expect("equal-length rows");
            r.set(i, j, v);
            r.set(j, i, v);
        }
    }
    r
}

/// Pairwise cosine similarities between the rows of a feature matrix.
pub fn batch_cosines(features: &Matrix) -> Matrix {
    let n = features.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out.set(i, i, cosine(features.row(i), features.row(i)));
        for j in (i + 1)..n {
            let c = cosine(features.row(i), features.row(j));
            out.set(i, j, c);
            out.set(j, i, c);
        }
    }
    out
}

/// Binary mask of attracting pairs: `M_ij = 1` iff `R_ij > 0` and `i != j`.
pub fn positive_pair_mask(r: &Matrix) -> Matrix {
    let n = r.rows();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && r.get(i, j) > 0.0 {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

/// Soft label for anchor `i`, aggregated from neighbor labels with
/// similarity-normalized weights averaged over both modalities.
///
/// If a modality's similarity sum is at most 1e-8 the weights for that
/// modality fall back to uniform `1/K`.
pub fn neighbor_soft_label(anchor: usize, neighbors: &NeighborSet, labels: &Matrix) -> Vec<f64> {
    let idx = &neighbors.indices[anchor];
    let k = idx.len();
    debug_assert!(k >= 1, "anchor {anchor} has no neighbors");
    let mut combined = vec![0.0; k];
    for sims_m in &neighbors.sims {
        let s = &sims_m[anchor];
        let denom: f64 = s.iter().sum();
        if denom <= 1e-8 {
            for w in combined.iter_mut() {
                *w += 0.5 / k as f64;
            }
        } else {
            for (w, &sv) in combined.iter_mut().zip(s) {
                *w += 0.5 * sv / denom;
            }
        }
    }
    let mut p = vec![0.0; labels.cols()];
    for (&j, &w) in idx.iter().zip(&combined) {
        for (pc, &yc) in p.iter_mut().zip(labels.row(j)) {
            *pc += w * yc;
        }
    }
    p
}

/// Confidence weight `gamma + (1 - gamma) * cos(y, p)` in `[gamma, 1]`.
///
/// A zero-norm label or soft label counts as cosine 0.
pub fn confidence_weight(y: &[f64], p: &[f64], gamma: f64) -> f64 {
    let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let np: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = if ny == 0.0 || np == 0.0 {
        0.0
    } else {
        cosine(y, p).clamp(0.0, 1.0)
    };
    gamma + (1.0 - gamma) * cos
}

fn const_like(var: &Var, m: Matrix) -> Var {
    var.tape().leaf(m)
}

/// Weighted binary cross-entropy over both modalities, averaged over
/// `2 * n * C` terms. Predictions are clamped to `[1e-7, 1 - 1e-7]`
/// before the logarithms.
pub fn cscc_loss(z1: &Var, z2: &Var, labels: &Matrix, weights: &[f64]) -> Result<Var> {
    let (n, c) = labels.shape();
    for (name, z) in [("z1", z1), ("z2", z2)] {
        if z.shape() != (n, c) {
            return Err(Error::shape(format!(
                "cscc: {name} is {:?}, labels are {n}x{c}",
                z.shape()
            )));
        }
    }
    if weights.len() != n {
        return Err(Error::shape(format!(
            "cscc: {} weights for {n} samples",
            weights.len()
        )));
    }
    let y = const_like(z1, labels.clone());
    let one_minus_y = const_like(z1, labels.map(|v| 1.0 - v));
    let mut w_tile = Matrix::zeros(n, c);
    for (i, &wi) in weights.iter().enumerate() {
        w_tile.row_mut(i).fill(wi);
    }
    let w = const_like(z1, w_tile);

    let mut bce_sum: Option<Var> = None;
    for z in [z1, z2] {
        let zc = z.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let pos = y.mul(&zc.ln())?;
        let neg = one_minus_y.mul(&zc.mul_scalar(-1.0).add_scalar(1.0).ln())?;
        let bce = pos.add(&neg)?;
        bce_sum = Some(match bce_sum {
            Some(acc) => acc.add(&bce)?,
            None => bce,
        });
    }
    let weighted = bce_sum.expect("two modalities").mul(&w)?;
    Ok(weighted
        .sum()?
        .mul_scalar(-1.0 / (2.0 * n as f64 * c as f64)))
}

/// Attraction over positive/soft pairs plus intra-instance alignment:
/// `(1/n^2) sum_{i!=j} exp(xi - S_ij) M_ij - (1/n) sum_i S_ii`.
pub fn attraction_loss(s: &Var, mask: &Matrix, xi: f64) -> Result<Var> {
    let (n, m) = s.shape();
    if n != m {
        return Err(Error::shape(format!("attraction: S must be square, got {n}x{m}")));
    }
    if mask.shape() != (n, n) {
        return Err(Error::shape(format!(
            "attraction: mask is {:?}, S is {n}x{n}",
            mask.shape()
        )));
    }
    let mask = const_like(s, mask.clone());
    let eye = const_like(s, Matrix::identity(n));
    let pull = s
        .mul_scalar(-1.0)
        .add_scalar(xi)
        .exp()
        .mul(&mask)?
        .sum()?
        .mul_scalar(1.0 / (n * n) as f64);
    let align = s.mul(&eye)?.sum()?.mul_scalar(1.0 / n as f64);
    pull.sub(&align)
}

/// Margin-adjusted similarity for one directed pair:
/// `N = s_d - xi * max(0, (s_ii - margin) - s_d)`.
pub fn hard_negative_adjust(s_d: f64, s_ii: f64, xi: f64, margin: f64) -> f64 {
    s_d - xi * ((s_ii - margin) - s_d).max(0.0)
}

/// Repulsion over both directions with label-overlap damping:
/// `(1/2n^2) sum_{i!=j} sum_d exp(N^d_ij (1 - R_ij))`.
pub fn repulsion_loss(s: &Var, r: &Matrix, xi: f64, margin: f64) -> Result<Var> {
    let (n, m) = s.shape();
    if n != m {
        return Err(Error::shape(format!("repulsion: S must be square, got {n}x{m}")));
    }
    if r.shape() != (n, n) {
        return Err(Error::shape(format!(
            "repulsion: R is {:?}, S is {n}x{n}",
            r.shape()
        )));
    }
    let eye = Matrix::identity(n);
    let ones = const_like(s, Matrix::filled(n, n, 1.0));
    let off_diag = const_like(s, eye.map(|v| 1.0 - v));
    let one_minus_r = const_like(s, r.map(|v| 1.0 - v));
    let eye = const_like(s, eye);

    // d[i][j] = S_ii for every j: mask the diagonal, then row-broadcast it.
    let d = s.mul(&eye)?.matmul(&ones)?;

    let mut total: Option<Var> = None;
    for direction in 0..2 {
        let s_d = if direction == 0 { s.clone() } else { s.transpose() };
        let hinge = d.add_scalar(-margin).sub(&s_d)?.relu();
        let adjusted = s_d.sub(&hinge.mul_scalar(xi))?;
        let term = adjusted.mul(&one_minus_r)?.exp().mul(&off_diag)?.sum()?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total
        .expect("two directions")
        .mul_scalar(1.0 / (2.0 * (n * n) as f64)))
}

/// Quantization regularizer `beta/(nL) * sum_m sum_il (1 - |h^m_il|)`,
/// driving code entries toward +-1.
pub fn quantization_loss(h1: &Var, h2: &Var, beta: f64) -> Result<Var> {
    let (n, l) = h1.shape();
    if h2.shape() != (n, l) {
        return Err(Error::shape(format!(
            "quantization: h1 is {n}x{l}, h2 is {:?}",
            h2.shape()
        )));
    }
    let q1 = h1.abs().mul_scalar(-1.0).add_scalar(1.0).sum()?;
    let q2 = h2.abs().mul_scalar(-1.0).add_scalar(1.0).sum()?;
    Ok(q1.add(&q2)?.mul_scalar(beta / (n * l) as f64))
}

/// Cross-modal similarity matrix `S_ij = <h^1_i, h^2_j>`, divided by the
/// code length under mean scaling.
pub fn cross_modal_similarity(h1: &Var, h2: &Var, scaling: SimilarityScaling) -> Result<Var> {
    let (n, l) = h1.shape();
    if h2.shape() != (n, l) {
        return Err(Error::shape(format!(
            "similarity: h1 is {n}x{l}, h2 is {:?}",
            h2.shape()
        )));
    }
    let s = h1.matmul(&h2.transpose())?;
    Ok(s.mul_scalar(scaling.factor(l)))
}

/// Plain (untaped) similarity matrix for diagnostics.
pub fn cross_modal_similarity_matrix(
    h1: &Matrix,
    h2: &Matrix,
    scaling: SimilarityScaling,
) -> Result<Matrix> {
    if h1.shape() != h2.shape() {
        return Err(Error::shape(format!(
            "similarity: h1 is {:?}, h2 is {:?}",
            h1.shape(),
            h2.shape()
        )));
    }
    let s = h1.matmul(&h2.transpose())?;
    Ok(s.scale(scaling.factor(h1.cols())))
}

/// The contrastive terms of one batch.
pub struct BschTerms {
    pub attraction: Var,
    pub repulsion: Var,
    pub quantization: Var,
    pub total: Var,
}

/// Attraction + repulsion + quantization with `S`, `R`, and `M` computed
/// internally from the codes and labels.
pub fn bsch_loss(
    h1: &Var,
    h2: &Var,
    labels: &Matrix,
    params: &ContrastiveParams,
) -> Result<BschTerms> {
    if labels.rows() != h1.shape().0 {
        return Err(Error::shape(format!(
            "bsch: {} label rows for batch of {}",
            labels.rows(),
            h1.shape().0
        )));
    }
    let r = jaccard_matrix(labels);
    let mask = positive_pair_mask(&r);
    let s = cross_modal_similarity(h1, h2, params.scaling)?;
    let attraction = attraction_loss(&s, &mask, params.xi)?;
    let repulsion = repulsion_loss(&s, &r, params.xi_repulsion(), params.margin)?;
    let quantization = quantization_loss(h1, h2, params.beta)?;
    let total = attraction.add(&repulsion)?.add(&quantization)?;
    Ok(BschTerms {
        attraction,
        repulsion,
        quantization,
        total,
    })
}
