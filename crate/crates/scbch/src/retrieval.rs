//! Sign binarization, bit-packed Hamming ranking, and MAP / precision-
//! recall evaluation.
//!
//! Retrieval sets at desk scale are small enough that exhaustive popcount
//! scans beat any approximate index.

use serde::{Deserialize, Serialize};

use crate::dataset::{MultimodalDataset, Split};
use crate::error::{Error, Result};
use crate::model::{HashModel, Modality};
use crate::ndmath::Matrix;

/// Retrieval direction: which modality queries which.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Image queries against text codes.
    I2T,
    /// Text queries against image codes.
    T2I,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::I2T => write!(f, "I2T"),
            Direction::T2I => write!(f, "T2I"),
        }
    }
}

/// Bit-packed sign codes with an id map back to sample indices.
///
/// Bit `l` of a code is set iff component `l` is +1; `sign(0) = +1`.
/// Padding bits beyond the code length are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryCodeIndex {
    code_length: usize,
    words_per_code: usize,
    words: Vec<u64>,
    ids: Vec<usize>,
}

impl BinaryCodeIndex {
    /// Packs continuous codes row by row; ids default to row positions.
    pub fn from_codes(h: &Matrix) -> BinaryCodeIndex {
        Self::from_codes_with_ids(h, (0..h.rows()).collect())
    }

    pub fn from_codes_with_ids(h: &Matrix, ids: Vec<usize>) -> BinaryCodeIndex {
        assert_eq!(h.rows(), ids.len(), "one id per code row");
        let code_length = h.cols();
        let words_per_code = code_length.div_ceil(64);
        let mut words = vec![0u64; h.rows() * words_per_code];
        for i in 0..h.rows() {
            let base = i * words_per_code;
            for (l, &v) in h.row(i).iter().enumerate() {
                if v >= 0.0 {
                    words[base + l / 64] |= 1u64 << (l % 64);
                }
            }
        }
        BinaryCodeIndex {
            code_length,
            words_per_code,
            words,
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Packed words of the `i`-th code.
    pub fn code(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    /// Unpacks the `i`-th code to +-1 components.
    pub fn unpack(&self, i: usize) -> Vec<i8> {
        let code = self.code(i);
        (0..self.code_length)
            .map(|l| {
                if code[l / 64] >> (l % 64) & 1 == 1 {
                    1
                } else {
                    -1
                }
            })
            .collect()
    }

    /// All items sorted by ascending Hamming distance to `query`, ties
    /// broken by ascending id.
    pub fn rank(&self, query: &[u64], query_code_length: usize) -> Result<Vec<(usize, u32)>> {
        if query_code_length != self.code_length || query.len() != self.words_per_code {
            return Err(Error::shape(format!(
                "code length mismatch: query {query_code_length} bits vs index {} bits",
                self.code_length
            )));
        }
        let mut ranked: Vec<(usize, u32)> = (0..self.len())
            .map(|i| (self.ids[i], hamming(query, self.code(i))))
            .collect();
        ranked.sort_unstable_by_key(|&(id, d)| (d, id));
        Ok(ranked)
    }
}

/// Popcount Hamming distance between two packed codes.
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// One retrieval experiment: ranked lists plus relevance per rank.
#[derive(Debug, Clone)]
pub struct RetrievalRun {
    pub direction: Direction,
    pub code_length: usize,
    /// `rankings[q]` holds retrieval-set sample ids in rank order.
    pub rankings: Vec<Vec<usize>>,
    /// Hamming distance at each rank, aligned with `rankings`.
    pub distances: Vec<Vec<u32>>,
    /// Relevance at each rank, aligned with `rankings`.
    pub relevance: Vec<Vec<bool>>,
}

/// Ranks every query against the index; `is_relevant(query_pos, item_id)`
/// defines ground truth.
pub fn run_retrieval(
    direction: Direction,
    queries: &BinaryCodeIndex,
    index: &BinaryCodeIndex,
    is_relevant: impl Fn(usize, usize) -> bool,
) -> Result<RetrievalRun> {
    if queries.code_length() != index.code_length() {
        return Err(Error::shape(format!(
            "code length mismatch: queries {} bits vs index {} bits",
            queries.code_length(),
            index.code_length()
        )));
    }
    let mut rankings = Vec::with_capacity(queries.len());
    let mut distances = Vec::with_capacity(queries.len());
    let mut relevance = Vec::with_capacity(queries.len());
    for q in 0..queries.len() {
        let ranked = index.rank(queries.code(q), queries.code_length())?;
        rankings.push(ranked.iter().map(|&(id, _)| id).collect::<Vec<_>>());
        distances.push(ranked.iter().map(|&(_, d)| d).collect::<Vec<_>>());
        relevance.push(
            ranked
                .iter()
                .map(|&(id, _)| is_relevant(q, id))
                .collect::<Vec<_>>(),
        );
    }
    Ok(RetrievalRun {
        direction,
        code_length: queries.code_length(),
        rankings,
        distances,
        relevance,
    })
}

/// Average precision of one ranked relevance list; 0 when nothing is
/// relevant. With a cutoff, only the top `k` ranks count and the
/// normalizer is `min(#relevant, k)`.
pub fn average_precision(relevance: &[bool], cutoff: Option<usize>) -> f64 {
    let total_relevant = relevance.iter().filter(|&&r| r).count();
    if total_relevant == 0 {
        return 0.0;
    }
    let k = cutoff.unwrap_or(relevance.len()).min(relevance.len());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    let denom = match cutoff {
        Some(k) => total_relevant.min(k),
        None => total_relevant,
    };
    sum / denom as f64
}

/// MAP over a run's queries plus bookkeeping counters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub num_queries: usize,
    /// Queries with no relevant item; they contribute AP = 0.
    pub zero_relevant: usize,
}

pub fn mean_average_precision(run: &RetrievalRun, cutoff: Option<usize>) -> Result<MapResult> {
    if run.relevance.is_empty() {
        return Err(Error::config("MAP over an empty query set"));
    }
    let mut sum = 0.0;
    let mut zero_relevant = 0usize;
    for rel in &run.relevance {
        if !rel.iter().any(|&r| r) {
            zero_relevant += 1;
        }
        sum += average_precision(rel, cutoff);
    }
    Ok(MapResult {
        map: sum / run.relevance.len() as f64,
        num_queries: run.relevance.len(),
        zero_relevant,
    })
}

/// How precision-recall points are swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrMode {
    /// One point per rank cutoff `1..=N`.
    Rank,
    /// One point per Hamming radius `0..=L`.
    Radius,
}

/// A precision-recall point; `cutoff` is a rank or a radius per [`PrMode`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub cutoff: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall averaged over queries at each cutoff. Queries
/// with zero relevant items are skipped (their recall is undefined).
pub fn precision_recall_curve(run: &RetrievalRun, mode: PrMode) -> Result<Vec<PrPoint>> {
    if run.relevance.is_empty() {
        return Err(Error::config("PR curve over an empty query set"));
    }
    let queries: Vec<usize> = (0..run.relevance.len())
        .filter(|&q| run.relevance[q].iter().any(|&r| r))
        .collect();
    if queries.is_empty() {
        return Err(Error::config("PR curve: every query has zero relevant items"));
    }
    let n_items = run.relevance[0].len();
    let cutoffs: Vec<usize> = match mode {
        PrMode::Rank => (1..=n_items).collect(),
        PrMode::Radius => (0..=run.code_length).collect(),
    };
    let mut points = Vec::with_capacity(cutoffs.len());
    for &cut in &cutoffs {
        let mut precision = 0.0;
        let mut recall = 0.0;
        for &q in &queries {
            let rel = &run.relevance[q];
            let total_relevant = rel.iter().filter(|&&r| r).count();
            let retrieved = match mode {
                PrMode::Rank => cut,
                PrMode::Radius => run.distances[q]
                    .iter()
                    .take_while(|&&d| d <= cut as u32)
                    .count(),
            };
            let hits = rel.iter().take(retrieved).filter(|&&r| r).count();
            if retrieved > 0 {
                precision += hits as f64 / retrieved as f64;
            }
            recall += hits as f64 / total_relevant as f64;
        }
        points.push(PrPoint {
            cutoff: cut,
            recall: recall / queries.len() as f64,
            precision: precision / queries.len() as f64,
        });
    }
    Ok(points)
}

/// Relevance rule used throughout evaluation: a pair is relevant iff the
/// clean labels share at least one class.
pub fn share_class(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).any(|(&x, &y)| x != 0.0 && y != 0.0)
}

/// MAP results for both directions of one model/dataset pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossModalMap {
    pub i2t: MapResult,
    pub t2i: MapResult,
}

impl CrossModalMap {
    pub fn average(&self) -> f64 {
        (self.i2t.map + self.t2i.map) / 2.0
    }
}

/// Encodes the query and retrieval splits of `dataset` with `model`,
/// builds both cross-modal runs, and returns their MAP results.
///
/// Relevance always uses clean labels, regardless of training noise.
pub fn evaluate_model(
    model: &HashModel,
    dataset: &MultimodalDataset,
    cutoff: Option<usize>,
) -> Result<CrossModalMap> {
    let (i2t, t2i) = build_runs(model, dataset)?;
    cross_modal_map_from_runs(&i2t, &t2i, cutoff)
}

/// MAP for a pair of already-built runs.
pub fn cross_modal_map_from_runs(
    i2t: &RetrievalRun,
    t2i: &RetrievalRun,
    cutoff: Option<usize>,
) -> Result<CrossModalMap> {
    Ok(CrossModalMap {
        i2t: mean_average_precision(i2t, cutoff)?,
        t2i: mean_average_precision(t2i, cutoff)?,
    })
}

/// Builds the I2T and T2I retrieval runs for a model over a dataset's
/// query and retrieval splits.
pub fn build_runs(
    model: &HashModel,
    dataset: &MultimodalDataset,
) -> Result<(RetrievalRun, RetrievalRun)> {
    let query_ids = dataset.indices_of(Split::Query);
    let db_ids = dataset.indices_of(Split::Retrieval);
    if query_ids.is_empty() {
        return Err(Error::config("evaluation needs a nonempty query split"));
    }
    if db_ids.is_empty() {
        return Err(Error::config("evaluation needs a nonempty retrieval split"));
    }

    let image_q = model.forward(Modality::Image, &dataset.image.select_rows(&query_ids))?;
    let text_q = model.forward(Modality::Text, &dataset.text.select_rows(&query_ids))?;
    let image_db = model.forward(Modality::Image, &dataset.image.select_rows(&db_ids))?;
    let text_db = model.forward(Modality::Text, &dataset.text.select_rows(&db_ids))?;

    let image_q = BinaryCodeIndex::from_codes_with_ids(&image_q, query_ids.clone());
    let text_q = BinaryCodeIndex::from_codes_with_ids(&text_q, query_ids.clone());
    let image_db = BinaryCodeIndex::from_codes_with_ids(&image_db, db_ids.clone());
    let text_db = BinaryCodeIndex::from_codes_with_ids(&text_db, db_ids);

    let labels = &dataset.clean_labels;
    let relevant = |qpos: usize, item_id: usize| {
        share_class(labels.row(query_ids[qpos]), labels.row(item_id))
    };
    let i2t = run_retrieval(Direction::I2T, &image_q, &text_db, relevant)?;
    let t2i = run_retrieval(Direction::T2I, &text_q, &image_db, relevant)?;
    Ok((i2t, t2i))
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pack_round_trip_all_lengths(
            len in prop::sample::select(vec![8usize, 16, 32, 64, 65, 128]),
            seed in 0u64..1000,
        ) {
            let vals: Vec<f64> = (0..len)
                .map(|l| ((seed.wrapping_mul(31).wrapping_add(l as u64 * 7919)) % 13) as f64 - 6.0)
                .collect();
            let m = Matrix::from_vec(1, len, vals.clone()).unwrap();
            let idx = BinaryCodeIndex::from_codes(&m);
            let direct: Vec<i8> = vals.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
            prop_assert_eq!(idx.unpack(0), direct);
        }

        #[test]
        fn hamming_metric_axioms(a in prop::collection::vec(any::<u64>(), 2),
                                 b in prop::collection::vec(any::<u64>(), 2),
                                 c in prop::collection::vec(any::<u64>(), 2)) {
            prop_assert_eq!(hamming(&a, &a), 0);
            prop_assert_eq!(hamming(&a, &b), hamming(&b, &a));
            prop_assert!(hamming(&a, &c) <= hamming(&a, &b) + hamming(&b, &c));
        }

        #[test]
        fn ap_stays_in_unit_interval(rel in prop::collection::vec(any::<bool>(), 1..40)) {
            let ap = average_precision(&rel, None);
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}
