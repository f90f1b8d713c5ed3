//! Structured l1 pruning of feature models and magnitude sparsification of
//! embeddings.

use crate::nn::{DenseLayer, FeatureModel, Matrix};
use crate::{Error, Result};

/// Slack for ratios such as `0.29 * 100` that land just below an integer.
const RATIO_EPS: f64 = 1e-9;

/// Number of units a ratio selects out of `n`: `floor(ratio * n)`.
pub fn ratio_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + RATIO_EPS).floor() as usize).min(n)
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Config(format!("{name} must lie in [0, 1), got {r}")));
    }
    Ok(())
}

/// l1 importance of each live neuron: `sum_i |w[j,i]| + |b[j]|`.
/// Returns `(neuron index, score)` pairs; masked neurons are skipped.
pub fn importance_scores(layer: &DenseLayer) -> Vec<(usize, f64)> {
    (0..layer.out_dim())
        .filter(|&j| layer.neuron_mask[j])
        .map(|j| {
            let s = layer.weights.row(j).iter().map(|w| w.abs()).sum::<f64>() + layer.biases[j].abs();
            (j, s)
        })
        .collect()
}

/// Outcome of one structured prune call.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruneDecision {
    /// Neuron indices newly masked in each layer.
    pub newly_masked: Vec<Vec<usize>>,
    /// Ratio attained after this call: `max(alpha, previous_max_ratio)`.
    pub achieved_ratio: f64,
    pub previous_max_ratio: f64,
    pub warnings: Vec<String>,
}

impl PruneDecision {
    pub fn is_noop(&self) -> bool {
        self.newly_masked.iter().all(Vec::is_empty)
    }

    pub fn newly_masked_count(&self) -> usize {
        self.newly_masked.iter().map(Vec::len).sum()
    }
}

/// Masks the lowest-l1 neurons of every layer so each ends with exactly
/// `floor(alpha * n)` masked neurons out of its original `n`.
///
/// A no-op when `alpha <= alpha_prev_max`. Masks only ever grow. A layer is
/// never left without a live neuron; such targets are clamped to `n - 1`
/// and reported in `warnings`.
pub fn structured_prune(model: &mut FeatureModel, alpha: f64, alpha_prev_max: f64) -> Result<PruneDecision> {
    check_ratio("alpha", alpha)?;
    check_ratio("alpha_prev_max", alpha_prev_max)?;
    let mut decision = PruneDecision {
        newly_masked: vec![Vec::new(); model.layers.len()],
        achieved_ratio: alpha.max(alpha_prev_max),
        previous_max_ratio: alpha_prev_max,
        warnings: Vec::new(),
    };
    if alpha <= alpha_prev_max {
        return Ok(decision);
    }
    for (li, layer) in model.layers.iter_mut().enumerate() {
        let n = layer.out_dim();
        let mut target = ratio_count(alpha, n);
        if target >= n {
            decision.warnings.push(format!(
                "layer {li}: alpha {alpha} would mask all {n} neurons, keeping one"
            ));
            target = n - 1;
        }
        let already = layer.masked_neurons();
        if target <= already {
            continue;
        }
        let mut scores = importance_scores(layer);
        // Stable sort keeps lower indices first among equal scores.
        scores.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut fresh: Vec<usize> = scores.iter().take(target - already).map(|&(j, _)| j).collect();
        fresh.sort_unstable();
        for &j in &fresh {
            layer.neuron_mask[j] = false;
        }
        decision.newly_masked[li] = fresh;
    }
    Ok(decision)
}

/// Per-row magnitude-sparsified embedding, the object clients upload.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEmbedding {
    rows: usize,
    cols: usize,
    /// Kept `(row, col, value)` triples in row-major order.
    entries: Vec<(usize, usize, f64)>,
    keep_mask: Vec<bool>,
    beta_applied: f64,
}

/// Bytes for one encoded row: a 2-byte count plus 10 bytes per kept entry.
pub fn encoded_row_bytes(kept: usize) -> u64 {
    2 + 10 * kept as u64
}

impl SparseEmbedding {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn beta_applied(&self) -> f64 {
        self.beta_applied
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.keep_mask[r * self.cols + c]
    }

    pub fn kept_in_row(&self, r: usize) -> usize {
        self.keep_mask[r * self.cols..(r + 1) * self.cols]
            .iter()
            .filter(|&&k| k)
            .count()
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m.set(r, c, v);
        }
        m
    }

    /// Payload size under the wire encoding, summed over rows.
    pub fn encoded_len(&self) -> u64 {
        (0..self.rows).map(|r| encoded_row_bytes(self.kept_in_row(r))).sum()
    }

    /// Little-endian wire encoding: per row a `u16` count, then
    /// `(u16 column, f64 value)` per kept entry.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len() as usize);
        let mut it = self.entries.iter().peekable();
        for r in 0..self.rows {
            let kept = self.kept_in_row(r);
            out.extend_from_slice(&(kept as u16).to_le_bytes());
            while let Some(&&(er, c, v)) = it.peek() {
                if er != r {
                    break;
                }
                out.extend_from_slice(&(c as u16).to_le_bytes());
                out.extend_from_slice(&v.to_le_bytes());
                it.next();
            }
        }
        out
    }

    /// Inverse of [`encode`](Self::encode) for a known shape.
    pub fn decode(bytes: &[u8], rows: usize, cols: usize, beta_applied: f64) -> Result<Self> {
        let truncated = || Error::Data("truncated sparse embedding payload".into());
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(truncated)?;
            pos += n;
            Ok(s)
        };
        let mut entries = Vec::new();
        let mut keep_mask = vec![false; rows * cols];
        for r in 0..rows {
            let count = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            for _ in 0..count {
                let c = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
                let v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
                if c >= cols {
                    return Err(Error::Data(format!("column {c} out of range in row {r}")));
                }
                keep_mask[r * cols + c] = true;
                entries.push((r, c, v));
            }
        }
        if pos != bytes.len() {
            return Err(Error::Data("trailing bytes after sparse embedding payload".into()));
        }
        Ok(Self {
            rows,
            cols,
            entries,
            keep_mask,
            beta_applied,
        })
    }
}

/// Zeroes the `floor(beta * d)` smallest-magnitude entries of every row.
/// Equal magnitudes are zeroed lower column first; survivors are copied
/// bit-for-bit.
pub fn embedding_prune(h: &Matrix, beta: f64) -> Result<SparseEmbedding> {
    check_ratio("beta", beta)?;
    let (rows, cols) = (h.rows(), h.cols());
    if cols > u16::MAX as usize {
        return Err(Error::Shape(format!(
            "embedding width {cols} exceeds the u16 column index"
        )));
    }
    let drop = ratio_count(beta, cols);
    let mut keep_mask = vec![true; rows * cols];
    let mut entries = Vec::with_capacity(rows * (cols - drop));
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for r in 0..rows {
        let row = h.row(r);
        order.clear();
        order.extend(0..cols);
        order.sort_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs()));
        for &c in &order[..drop] {
            keep_mask[r * cols + c] = false;
        }
        for (c, &v) in row.iter().enumerate() {
            if keep_mask[r * cols + c] {
                entries.push((r, c, v));
            }
        }
    }
    Ok(SparseEmbedding {
        rows,
        cols,
        entries,
        keep_mask,
        beta_applied: beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseNetwork};
    use proptest::prelude::*;

    fn layer_from_rows(rows: &[Vec<f64>], biases: Vec<f64>) -> DenseLayer {
        let mut l = DenseLayer::zeros(rows[0].len(), rows.len(), Activation::Identity);
        l.weights = Matrix::from_rows(rows).unwrap();
        l.biases = biases;
        l
    }

    #[test]
    fn l1_scores_arithmetic() {
        let l = layer_from_rows(&[vec![1.0, -1.0], vec![0.0, 0.5]], vec![0.0, 0.0]);
        assert_eq!(importance_scores(&l), vec![(0, 2.0), (1, 0.5)]);
        let z = DenseLayer::zeros(3, 4, Activation::Relu);
        assert!(importance_scores(&z).iter().all(|&(_, s)| s == 0.0));
    }

    #[test]
    fn scores_skip_masked_and_include_bias() {
        let mut l = layer_from_rows(&[vec![1.0], vec![2.0], vec![3.0]], vec![-1.0, 0.0, 0.5]);
        l.neuron_mask[1] = false;
        assert_eq!(importance_scores(&l), vec![(0, 2.0), (2, 3.5)]);
    }

    #[test]
    fn alpha_zero_masks_nothing() {
        let mut net = DenseNetwork::new_seeded(&[6, 10, 4], 3).unwrap();
        let d = structured_prune(&mut net, 0.0, 0.0).unwrap();
        assert!(d.is_noop());
        assert!(net.layers.iter().all(|l| l.masked_neurons() == 0));
    }

    #[test]
    fn lower_alpha_than_previous_is_noop() {
        let mut net = DenseNetwork::new_seeded(&[6, 10, 4], 3).unwrap();
        structured_prune(&mut net, 0.6, 0.0).unwrap();
        let before = net.clone();
        let d = structured_prune(&mut net, 0.4, 0.6).unwrap();
        assert!(d.is_noop());
        assert_eq!(d.achieved_ratio, 0.6);
        assert_eq!(net, before);
    }

    #[test]
    fn clamps_to_one_survivor() {
        let mut net = DenseNetwork::new_seeded(&[3, 2, 1], 9).unwrap();
        let d = structured_prune(&mut net, 0.99, 0.0).unwrap();
        // floor(0.99*2)=1 fits; floor(0.99*1)=0 needs no clamp either.
        assert!(d.warnings.is_empty());
        assert_eq!(net.layers[0].live_neurons(), 1);
        let mut net = DenseNetwork::new_seeded(&[3, 20, 1], 9).unwrap();
        let d = structured_prune(&mut net, 1.0 - 1e-12, 0.0).unwrap();
        assert_eq!(net.layers[0].live_neurons(), 1);
        assert_eq!(net.layers[1].live_neurons(), 1);
        assert_eq!(d.warnings.len(), 2);
    }

    #[test]
    fn rejects_out_of_range_ratios() {
        let mut net = DenseNetwork::new_seeded(&[2, 2], 1).unwrap();
        assert!(structured_prune(&mut net, 1.0, 0.0).is_err());
        assert!(structured_prune(&mut net, -0.1, 0.0).is_err());
        assert!(embedding_prune(&Matrix::zeros(1, 2), 1.0).is_err());
    }

    #[test]
    fn ratio_count_tolerates_representation_error() {
        assert_eq!(ratio_count(0.29, 100), 29);
        assert_eq!(ratio_count(0.6, 10), 6);
        assert_eq!(ratio_count(0.25, 8), 2);
        assert_eq!(ratio_count(0.99, 3), 2);
    }

    #[test]
    fn embedding_prune_magnitude_order() {
        let h = Matrix::from_rows(&[vec![3.0, -1.0, 0.5, 2.0]]).unwrap();
        let s = embedding_prune(&h, 0.5).unwrap();
        assert_eq!(s.entries(), &[(0, 0, 3.0), (0, 3, 2.0)]);
        assert!(!s.is_kept(0, 1) && !s.is_kept(0, 2));
    }

    #[test]
    fn embedding_prune_ties_lower_column_first() {
        let h = Matrix::from_rows(&[vec![1.0, -1.0, 1.0, 5.0]]).unwrap();
        let s = embedding_prune(&h, 0.5).unwrap();
        assert_eq!(s.to_dense().row(0), &[0.0, 0.0, 1.0, 5.0]);
    }

    #[test]
    fn beta_zero_is_dense() {
        let h = Matrix::from_rows(&[vec![0.0, -2.5], vec![1e-300, 7.0]]).unwrap();
        let s = embedding_prune(&h, 0.0).unwrap();
        assert_eq!(s.to_dense(), h);
        assert_eq!(s.encoded_len(), 2 * (2 + 20));
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(SparseEmbedding::decode(&[1, 0, 9], 1, 4, 0.0).is_err());
        assert!(SparseEmbedding::decode(&[0, 0, 0], 1, 4, 0.0).is_err());
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..10).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-100.0f64..100.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn wire_round_trip(h in matrix_strategy(), beta in 0.0f64..0.99) {
            let s = embedding_prune(&h, beta).unwrap();
            let bytes = s.encode();
            prop_assert_eq!(bytes.len() as u64, s.encoded_len());
            let back = SparseEmbedding::decode(&bytes, s.rows(), s.cols(), beta).unwrap();
            prop_assert_eq!(back, s);
        }

        #[test]
        fn prune_error_non_decreasing_in_beta(h in matrix_strategy(), a in 0.0f64..0.99, b in 0.0f64..0.99) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let err = |beta| {
                let d = embedding_prune(&h, beta).unwrap().to_dense();
                h.as_slice().iter().zip(d.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
            };
            prop_assert!(err(lo) <= err(hi));
        }

        #[test]
        fn structured_prune_is_idempotent(seed in 0u64..500, alpha in 0.0f64..0.95) {
            let mut net = DenseNetwork::new_seeded(&[5, 12, 7, 4], seed).unwrap();
            structured_prune(&mut net, alpha, 0.0).unwrap();
            let once = net.clone();
            let d = structured_prune(&mut net, alpha, 0.0).unwrap();
            prop_assert!(d.is_noop());
            prop_assert_eq!(net, once);
        }
    }
}
