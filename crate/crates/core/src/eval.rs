//! Retrieval evaluation: feature extraction, Euclidean ranking, CMC, mAP and
//! attribute accuracy.
//!
//! Ranking follows the usual cross-camera protocol: for each query the
//! gallery is sorted by ascending distance (ties keep gallery order), gallery
//! entries sharing both person and camera with the query are dropped, and
//! every remaining entry with the query's person id counts as relevant.

use std::fmt;

use thiserror::Error;

use crate::models::{ModelError, ParamSet};
use crate::synthdata::{Dataset, Split};
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sample {0} is missing person or camera id")]
    MissingIdentity(u64),
    #[error("sample {0} is missing attribute labels")]
    MissingAttributes(u64),
    #[error("distance matrix is {rows}×{cols} but metadata has {queries} queries and {gallery} gallery items")]
    MetaMismatch {
        rows: usize,
        cols: usize,
        queries: usize,
        gallery: usize,
    },
    #[error("max rank {k} must be between 1 and the gallery size {gallery}")]
    RankOutOfRange { k: usize, gallery: usize },
    #[error("no query has a valid match")]
    NoEvaluableQuery,
    #[error("{0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Meta {
    pub person_id: u32,
    pub camera_id: u32,
}

impl Meta {
    pub fn from_dataset(ds: &Dataset) -> Result<Vec<Meta>, EvalError> {
        ds.samples
            .iter()
            .map(|s| match (s.person_id, s.camera_id) {
                (Some(person_id), Some(camera_id)) => Ok(Meta { person_id, camera_id }),
                _ => Err(EvalError::MissingIdentity(s.sample_id)),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankingProtocol {
    pub exclude_same_camera_same_id: bool,
    /// Longest rank reported by the CMC curve.
    pub k: usize,
}

impl Default for RankingProtocol {
    fn default() -> Self {
        Self {
            exclude_same_camera_same_id: true,
            k: 10,
        }
    }
}

/// Row-major `queries × gallery` distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged distance rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Encoder outputs for every sample of `ds`, one row each.
pub fn extract_features(encoder: &ParamSet<f32>, ds: &Dataset) -> Result<Tensor<f32>, EvalError> {
    if ds.is_empty() {
        return Err(EvalError::Empty("cannot extract features from an empty dataset"));
    }
    Ok(encoder.infer(&ds.all_features())?)
}

/// Pairwise Euclidean distances via `‖a‖² + ‖b‖² − 2a·b`, clamped at zero
/// before the square root. Accumulates in `f64`.
pub fn distance_matrix(q: &Tensor<f32>, g: &Tensor<f32>) -> DistanceMatrix {
    assert_eq!(q.cols(), g.cols(), "query and gallery feature widths differ");
    let sq = |t: &Tensor<f32>, i: usize| t.row(i).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>();
    let gn: Vec<f64> = (0..g.rows()).map(|j| sq(g, j)).collect();
    let mut data = Vec::with_capacity(q.rows() * g.rows());
    for i in 0..q.rows() {
        let qn = sq(q, i);
        let qr = q.row(i);
        for (j, &gnj) in gn.iter().enumerate() {
            let dot: f64 = qr
                .iter()
                .zip(g.row(j))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            data.push((qn + gnj - 2.0 * dot).max(0.0).sqrt());
        }
    }
    DistanceMatrix {
        rows: q.rows(),
        cols: g.rows(),
        data,
    }
}

fn check_inputs(dist: &DistanceMatrix, q: &[Meta], g: &[Meta]) -> Result<(), EvalError> {
    if dist.rows != q.len() || dist.cols != g.len() {
        return Err(EvalError::MetaMismatch {
            rows: dist.rows,
            cols: dist.cols,
            queries: q.len(),
            gallery: g.len(),
        });
    }
    Ok(())
}

/// Relevance flags of the filtered, ranked gallery for query `i`.
fn ranked_relevance(dist: &DistanceMatrix, i: usize, q: Meta, g: &[Meta], protocol: &RankingProtocol) -> Vec<bool> {
    let row = dist.row(i);
    let mut order: Vec<usize> = (0..g.len()).collect();
    // stable: equal distances keep gallery index order
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    order
        .into_iter()
        .filter(|&j| {
            !(protocol.exclude_same_camera_same_id && g[j].person_id == q.person_id && g[j].camera_id == q.camera_id)
        })
        .map(|j| g[j].person_id == q.person_id)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmcResult {
    /// `cmc[k-1]` is the rank-k match rate.
    pub cmc: Vec<f64>,
    pub n_evaluated: usize,
    pub n_excluded: usize,
}

impl CmcResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k - 1]
    }
}

pub fn cmc_curve(
    dist: &DistanceMatrix,
    query: &[Meta],
    gallery: &[Meta],
    protocol: &RankingProtocol,
) -> Result<CmcResult, EvalError> {
    check_inputs(dist, query, gallery)?;
    if protocol.k == 0 || protocol.k > gallery.len() {
        return Err(EvalError::RankOutOfRange {
            k: protocol.k,
            gallery: gallery.len(),
        });
    }
    let mut hits = vec![0usize; protocol.k];
    let (mut evaluated, mut excluded) = (0, 0);
    for (i, &q) in query.iter().enumerate() {
        let rel = ranked_relevance(dist, i, q, gallery, protocol);
        match rel.iter().position(|&r| r) {
            None => excluded += 1,
            Some(first) => {
                evaluated += 1;
                for h in hits.iter_mut().skip(first) {
                    *h += 1;
                }
            }
        }
    }
    if evaluated == 0 {
        return Err(EvalError::NoEvaluableQuery);
    }
    Ok(CmcResult {
        cmc: hits.iter().map(|&h| h as f64 / evaluated as f64).collect(),
        n_evaluated: evaluated,
        n_excluded: excluded,
    })
}

/// AP of one ranked relevance list: mean over relevant positions `p` of
/// `hits_so_far / p`.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (p, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (p + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub n_evaluated: usize,
    pub n_excluded: usize,
}

pub fn mean_ap(
    dist: &DistanceMatrix,
    query: &[Meta],
    gallery: &[Meta],
    protocol: &RankingProtocol,
) -> Result<MapResult, EvalError> {
    check_inputs(dist, query, gallery)?;
    let mut sum = 0.0;
    let (mut evaluated, mut excluded) = (0, 0);
    for (i, &q) in query.iter().enumerate() {
        match average_precision(&ranked_relevance(dist, i, q, gallery, protocol)) {
            Some(ap) => {
                sum += ap;
                evaluated += 1;
            }
            None => excluded += 1,
        }
    }
    if evaluated == 0 {
        return Err(EvalError::NoEvaluableQuery);
    }
    Ok(MapResult {
        map: sum / evaluated as f64,
        n_evaluated: evaluated,
        n_excluded: excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttrAccuracy {
    pub per_attribute: Vec<f64>,
    pub mean: f64,
}

/// Accuracy of `σ(C(M(x))) ≥ threshold` against the labels of `ds`.
pub fn attr_accuracy(
    classifier: &ParamSet<f32>,
    encoder: &ParamSet<f32>,
    ds: &Dataset,
    threshold: f32,
) -> Result<AttrAccuracy, EvalError> {
    let feats = extract_features(encoder, ds)?;
    let logits = classifier.infer(&feats)?;
    let probs: Vec<f32> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    let labels: Vec<&[u8]> = ds
        .samples
        .iter()
        .map(|s| s.attributes.as_deref().ok_or(EvalError::MissingAttributes(s.sample_id)))
        .collect::<Result<_, _>>()?;
    Ok(accuracy_from_probs(&probs, &labels, ds.m, threshold))
}

/// Per-attribute accuracy of thresholded probabilities; `probs` is
/// row-major `n × m`.
pub fn accuracy_from_probs(probs: &[f32], labels: &[&[u8]], m: usize, threshold: f32) -> AttrAccuracy {
    let n = labels.len();
    let mut correct = vec![0usize; m];
    for (i, row) in labels.iter().enumerate() {
        for j in 0..m {
            let pred = u8::from(probs[i * m + j] >= threshold);
            if pred == row[j] {
                correct[j] += 1;
            }
        }
    }
    let per_attribute: Vec<f64> = correct.iter().map(|&c| c as f64 / n as f64).collect();
    let mean = per_attribute.iter().sum::<f64>() / m as f64;
    AttrAccuracy { per_attribute, mean }
}

/// Query and gallery halves of a target evaluation set.
#[derive(Debug, Clone)]
pub struct ReidEvaluator {
    pub query: Dataset,
    pub gallery: Dataset,
    query_meta: Vec<Meta>,
    gallery_meta: Vec<Meta>,
    pub protocol: RankingProtocol,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReidMetrics {
    pub cmc: CmcResult,
    pub map: f64,
}

impl ReidMetrics {
    pub fn rank1(&self) -> f64 {
        self.cmc.rank(1)
    }
}

impl ReidEvaluator {
    /// Splits `eval` into its query and gallery samples.
    pub fn new(eval: &Dataset, protocol: RankingProtocol) -> Result<Self, EvalError> {
        let query = eval.split(Split::Query);
        let gallery = eval.split(Split::Gallery);
        if query.is_empty() || gallery.is_empty() {
            return Err(EvalError::Empty("evaluation data needs query and gallery samples"));
        }
        Ok(Self {
            query_meta: Meta::from_dataset(&query)?,
            gallery_meta: Meta::from_dataset(&gallery)?,
            query,
            gallery,
            protocol,
        })
    }

    pub fn distances(&self, encoder: &ParamSet<f32>) -> Result<DistanceMatrix, EvalError> {
        let q = extract_features(encoder, &self.query)?;
        let g = extract_features(encoder, &self.gallery)?;
        Ok(distance_matrix(&q, &g))
    }

    pub fn evaluate(&self, encoder: &ParamSet<f32>) -> Result<ReidMetrics, EvalError> {
        let dist = self.distances(encoder)?;
        let cmc = cmc_curve(&dist, &self.query_meta, &self.gallery_meta, &self.protocol)?;
        let map = mean_ap(&dist, &self.query_meta, &self.gallery_meta, &self.protocol)?.map;
        Ok(ReidMetrics { cmc, map })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub attr_mean_accuracy: Option<f64>,
    pub n_queries_evaluated: usize,
    pub n_queries_excluded: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn new(metrics: &ReidMetrics, attr: Option<&AttrAccuracy>, config_fingerprint: impl Into<String>) -> Self {
        Self {
            cmc: metrics.cmc.cmc.clone(),
            map: metrics.map,
            attr_mean_accuracy: attr.map(|a| a.mean),
            n_queries_evaluated: metrics.cmc.n_evaluated,
            n_queries_excluded: metrics.cmc.n_excluded,
            config_fingerprint: config_fingerprint.into(),
        }
    }

    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k - 1]
    }

    /// `metric,name,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,name,value\n");
        for (k, v) in self.cmc.iter().enumerate() {
            out += &format!("cmc,rank{},{v}\n", k + 1);
        }
        out += &format!("map,mAP,{}\n", self.map);
        if let Some(a) = self.attr_mean_accuracy {
            out += &format!("attr,mean_accuracy,{a}\n");
        }
        out += &format!("meta,n_queries_evaluated,{}\n", self.n_queries_evaluated);
        out += &format!("meta,n_queries_excluded,{}\n", self.n_queries_excluded);
        out += &format!("meta,config_fingerprint,{}\n", self.config_fingerprint);
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| format!("{:.1}%", 100.0 * v);
        write!(f, "Rank1 {}", pct(self.rank(1)))?;
        for k in [5, 10] {
            if self.cmc.len() >= k {
                write!(f, "  Rank{k} {}", pct(self.rank(k)))?;
            }
        }
        write!(f, "  mAP {}", pct(self.map))?;
        if let Some(a) = self.attr_mean_accuracy {
            write!(f, "  attr-acc {}", pct(a))?;
        }
        write!(f, "  ({} queries", self.n_queries_evaluated)?;
        if self.n_queries_excluded > 0 {
            write!(f, ", {} without a valid match", self.n_queries_excluded)?;
        }
        write!(f, ")")
    }
}
