//! Shared test oracles: naive loop implementations, finite differences,
//! and independent statistics, all deliberately written without the
//! library's vectorized or taped code paths.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scbch::model::HashModel;
use scbch::ndmath::Matrix;

/// Cross-modal similarity by explicit loops: `S[i][j] = <h1_i, h2_j> * factor`.
pub fn similarity_naive(h1: &Matrix, h2: &Matrix, factor: f64) -> Vec<Vec<f64>> {
    let n = h1.rows();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            for l in 0..h1.cols() {
                dot += h1.get(i, l) * h2.get(j, l);
            }
            s[i][j] = dot * factor;
        }
    }
    s
}

/// Jaccard similarity of two label rows by explicit counting.
pub fn jaccard_naive(a: &[f64], b: &[f64]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x != 0.0 && y != 0.0 {
            inter += 1;
        }
        if x != 0.0 || y != 0.0 {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Attraction loss by double loop over the similarity matrix.
pub fn attraction_naive(s: &[Vec<f64>], labels: &Matrix, xi: f64) -> f64 {
    let n = labels.rows();
    let mut pull = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && jaccard_naive(labels.row(i), labels.row(j)) > 0.0 {
                pull += (xi - s[i][j]).exp();
            }
        }
    }
    let mut align = 0.0;
    for (i, row) in s.iter().enumerate() {
        align += row[i];
    }
    pull / (n * n) as f64 - align / n as f64
}

/// Repulsion loss by triple loop over pairs and directions.
pub fn repulsion_naive(s: &[Vec<f64>], labels: &Matrix, xi: f64, margin: f64) -> f64 {
    let n = labels.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let r = jaccard_naive(labels.row(i), labels.row(j));
            for direction in 0..2 {
                let s_d = if direction == 0 { s[i][j] } else { s[j][i] };
                let hinge = ((s[i][i] - margin) - s_d).max(0.0);
                let adjusted = s_d - xi * hinge;
                total += (adjusted * (1.0 - r)).exp();
            }
        }
    }
    total / (2.0 * (n * n) as f64)
}

/// Weighted binary cross-entropy by explicit loops, clamping predictions
/// exactly as the implementation documents.
pub fn cscc_naive(z1: &Matrix, z2: &Matrix, labels: &Matrix, weights: &[f64]) -> f64 {
    let (n, c) = labels.shape();
    let mut total = 0.0;
    for i in 0..n {
        for cc in 0..c {
            for z in [z1, z2] {
                let zc = z.get(i, cc).clamp(1e-7, 1.0 - 1e-7);
                let y = labels.get(i, cc);
                total += weights[i] * (y * zc.ln() + (1.0 - y) * (1.0 - zc).ln());
            }
        }
    }
    -total / (2.0 * n as f64 * c as f64)
}

/// Quantization regularizer by explicit loops.
pub fn quantization_naive(h1: &Matrix, h2: &Matrix, beta: f64) -> f64 {
    let (n, l) = h1.shape();
    let mut total = 0.0;
    for h in [h1, h2] {
        for i in 0..n {
            for ll in 0..l {
                total += 1.0 - h.get(i, ll).abs();
            }
        }
    }
    beta * total / (n * l) as f64
}

/// Average precision recomputed from scratch.
pub fn ap_naive(relevance: &[bool]) -> f64 {
    let total: usize = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / total as f64
}

/// Pearson correlation, independent of any library statistics.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Relative error with an absolute floor so near-zero gradients compare
/// against finite-difference noise sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between `grads` and central finite differences of
/// `eval` over every entry of every leaf.
pub fn fd_max_rel_error(
    leaves: &[Matrix],
    grads: &[Matrix],
    step: f64,
    eval: impl Fn(&[Matrix]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for li in 0..leaves.len() {
        for e in 0..leaves[li].as_slice().len() {
            let mut plus = leaves.to_vec();
            plus[li].as_mut_slice()[e] += step;
            let mut minus = leaves.to_vec();
            minus[li].as_mut_slice()[e] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            worst = worst.max(rel_err(fd, grads[li].as_slice()[e]));
        }
    }
    worst
}

/// Clone of `template` with its parameter blocks replaced.
pub fn model_with_blocks(template: &HashModel, blocks: &[Matrix]) -> HashModel {
    let mut model = template.clone();
    for (dst, src) in model.param_blocks_mut().into_iter().zip(blocks) {
        *dst = src.clone();
    }
    model
}

/// Uniform random matrix in `[lo, hi)`.
pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random code matrix with entry magnitudes in `[0.1, 0.9]`, keeping a
/// safe distance from the `abs` kink at zero.
pub fn rand_codes(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let magnitude = rng.random_range(0.1..0.9);
            if rng.random_range(0.0..1.0) < 0.5 {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random multi-hot labels with 1..=max_active classes per row.
pub fn rand_labels(rng: &mut ChaCha8Rng, n: usize, c: usize, max_active: usize) -> Matrix {
    let mut labels = Matrix::zeros(n, c);
    for i in 0..n {
        let k = rng.random_range(1..=max_active.min(c));
        let mut classes: Vec<usize> = (0..c).collect();
        for swap in 0..k {
            let pick = rng.random_range(swap..c);
            classes.swap(swap, pick);
        }
        for &cc in classes.iter().take(k) {
            labels.set(i, cc, 1.0);
        }
    }
    labels
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
