use super::JointEmbedder;
use crate::diffcore::{ParamStore, Tensor};
use crate::{Error, Result};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Recall at 1, 5 and 10 in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    /// Sequence queries against descriptions.
    pub a2t: [f64; 3],
    /// Description queries against sequences.
    pub t2a: [f64; 3],
}

impl RetrievalReport {
    /// `direction,k,recall` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("direction,k,recall\n");
        for (dir, r) in [("a2t", &self.a2t), ("t2a", &self.t2a)] {
            for (k, v) in RECALL_KS.iter().zip(r) {
                s.push_str(&format!("{dir},{k},{v}\n"));
            }
        }
        s
    }
}

/// Zero-based rank of the paired item among `sims` (row `q`); an equal
/// score at a lower index ranks ahead.
fn paired_rank(sims: &[f64], q: usize) -> usize {
    let own = sims[q];
    sims.iter()
        .enumerate()
        .filter(|&(j, &s)| s > own || (s == own && j < q))
        .count()
}

/// Row `i` of `ea` is paired with row `i` of `et`. With fewer than `k`
/// items the recall at `k` is 1.
pub fn retrieval_metrics(ea: &Tensor, et: &Tensor) -> Result<RetrievalReport> {
    if ea.rank() != 2 || ea.shape() != et.shape() || ea.shape()[0] == 0 {
        return Err(Error::shape(
            "retrieval_metrics",
            format!("{:?} vs {:?}", ea.shape(), et.shape()),
        ));
    }
    let n = ea.shape()[0];
    let sim = cosine_rows(ea, et);
    let simt: Vec<Vec<f64>> = (0..n).map(|j| sim.iter().map(|r| r[j]).collect()).collect();
    let recall = |m: &[Vec<f64>]| {
        let ranks: Vec<usize> = (0..n).map(|q| paired_rank(&m[q], q)).collect();
        RECALL_KS.map(|k| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
    };
    Ok(RetrievalReport {
        a2t: recall(&sim),
        t2a: recall(&simt),
    })
}

/// `out[i][j] = a_i · b_j`.
fn cosine_rows(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| {
            (0..b.rows())
                .map(|j| a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rerank {
    pub best: usize,
    pub best_score: f64,
    /// Cosine similarity of every candidate, in input order.
    pub scores: Vec<f64>,
}

/// Picks the candidate most similar to `description`; ties go to the
/// lowest index.
pub fn rerank(
    candidates: &[&Tensor],
    description: &[usize],
    encoder: &JointEmbedder,
    store: &ParamStore,
) -> Result<Rerank> {
    if candidates.is_empty() {
        return Err(Error::invalid("rerank needs at least one candidate"));
    }
    let ea = encoder.embed_sequences(store, candidates)?;
    let et = encoder.embed_descriptions(store, &[description])?;
    let scores: Vec<f64> = cosine_rows(&ea, &et).into_iter().map(|r| r[0]).collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(Rerank {
        best,
        best_score: scores[best],
        scores,
    })
}
