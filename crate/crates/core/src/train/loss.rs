use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// In-batch positives: `mask[[q, r]]` is true when text `r` is a positive for image `q`
/// (equivalently, image `q` is a positive for text `r`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSets {
    mask: Array2<bool>,
}

impl PositiveSets {
    /// Class-level positives: every same-class caption in the batch.
    pub fn from_labels<L: PartialEq>(labels: &[L]) -> Self {
        let n = labels.len();
        Self {
            mask: Array2::from_shape_fn((n, n), |(q, r)| labels[q] == labels[r]),
        }
    }

    /// Arbitrary positives; every row and column needs at least one entry.
    pub fn from_mask(mask: Array2<bool>) -> Result<Self> {
        if mask.nrows() != mask.ncols() {
            return Err(Error::Shape(format!("positive mask {:?} is not square", mask.shape())));
        }
        if let Some(q) = mask.rows().into_iter().position(|r| !r.iter().any(|&b| b)) {
            return Err(Error::Data(format!("image {q} has no positive text in the batch")));
        }
        if let Some(r) = mask.columns().into_iter().position(|c| !c.iter().any(|&b| b)) {
            return Err(Error::Data(format!("text {r} has no positive image in the batch")));
        }
        Ok(Self { mask })
    }

    pub fn len(&self) -> usize {
        self.mask.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, q: usize, r: usize) -> bool {
        self.mask[[q, r]]
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<F> {
    pub l_image: F,
    pub l_text: F,
    pub l_total: F,
}

/// Loss together with its gradient with respect to the similarity matrix and `log τ`.
#[derive(Debug, Clone)]
pub struct LossGrad<F> {
    pub loss: LossBreakdown<F>,
    pub d_similarity: Array2<F>,
    pub d_log_temperature: F,
}

fn log_softmax_rows<F: Scalar>(z: &Array2<F>) -> Array2<F> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn positive_counts(mask: &Array2<bool>, axis: Axis) -> Array1<usize> {
    mask.map_axis(axis, |lane| lane.iter().filter(|&&b| b).count())
}

/// Symmetric multi-positive contrastive loss over `Z = S / τ`, stabilized by per-row
/// and per-column max subtraction.
pub fn contrastive_loss<F: Scalar>(s: &Array2<F>, tau: F, positives: &PositiveSets) -> Result<LossBreakdown<F>> {
    Ok(contrastive_loss_grad(s, tau, positives)?.loss)
}

pub fn contrastive_loss_grad<F: Scalar>(s: &Array2<F>, tau: F, positives: &PositiveSets) -> Result<LossGrad<F>> {
    let n = s.nrows();
    if n == 0 || s.ncols() != n {
        return Err(Error::Shape(format!("similarity matrix {:?} must be square and non-empty", s.shape())));
    }
    if positives.len() != n {
        return Err(Error::Shape(format!("{} positive sets for a batch of {n}", positives.len())));
    }
    if !(tau.is_finite() && tau > F::zero()) {
        return Err(Error::numeric("log_tau", format!("temperature {tau} is not a positive finite number")));
    }
    if let Some(v) = s.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric("similarity", format!("non-finite entry {v}")));
    }
    let mask = positives.mask();
    let per_row = positive_counts(mask, Axis(1));
    let per_col = positive_counts(mask, Axis(0));
    if per_row.iter().chain(per_col.iter()).any(|&c| c == 0) {
        return Err(Error::Data("empty positive set".into()));
    }

    let z = s.mapv(|v| v / tau);
    let log_row = log_softmax_rows(&z);
    let log_col = log_softmax_rows(&z.t().to_owned()).reversed_axes();

    let inv_n = F::of(1.0 / n as f64);
    let mut l_image = F::zero();
    let mut l_text = F::zero();
    let mut g = Array2::zeros((n, n));
    for q in 0..n {
        for r in 0..n {
            let p_row = if mask[[q, r]] { F::of(1.0 / per_row[q] as f64) } else { F::zero() };
            let p_col = if mask[[q, r]] { F::of(1.0 / per_col[r] as f64) } else { F::zero() };
            l_image -= p_row * log_row[[q, r]];
            l_text -= p_col * log_col[[q, r]];
            g[[q, r]] = inv_n * (log_row[[q, r]].exp() - p_row + log_col[[q, r]].exp() - p_col);
        }
    }
    l_image *= inv_n;
    l_text *= inv_n;

    let d_log_temperature = -(&g * &z).sum();
    let d_similarity = g.mapv(|v| v / tau);
    Ok(LossGrad {
        loss: LossBreakdown {
            l_image,
            l_text,
            l_total: l_image + l_text,
        },
        d_similarity,
        d_log_temperature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    /// Double sums written out literally with plain exponentials.
    fn literal(s: &Array2<f64>, tau: f64, p: &PositiveSets) -> (f64, f64) {
        let n = s.nrows();
        let mut li = 0.0;
        let mut lt = 0.0;
        for q in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&r| p.contains(q, r)).collect();
            let denom: f64 = (0..n).map(|r2| (s[[q, r2]] / tau).exp()).sum();
            li += pos.iter().map(|&r| ((s[[q, r]] / tau).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
        }
        for r in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&q| p.contains(q, r)).collect();
            let denom: f64 = (0..n).map(|q2| (s[[q2, r]] / tau).exp()).sum();
            lt += pos.iter().map(|&q| ((s[[q, r]] / tau).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
        }
        (-li / n as f64, -lt / n as f64)
    }

    #[test]
    fn uniform_two_by_two() {
        let s = Array2::from_elem((2, 2), 0.3);
        let l = contrastive_loss(&s, 0.07, &PositiveSets::from_labels(&[0, 1])).unwrap();
        assert!((l.l_image - 2f64.ln()).abs() < 1e-12);
        assert!((l.l_text - 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.l_total, l.l_image + l.l_text);
    }

    #[test]
    fn saturated_diagonal() {
        let s: Array2<f64> = Array2::eye(3);
        let l = contrastive_loss(&s, 0.01, &PositiveSets::from_labels(&[0, 1, 2])).unwrap();
        assert!(l.l_total < 1e-3 && l.l_total >= 0.0);
    }

    #[test]
    fn matches_literal_form_on_mixed_positives() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(2..=6);
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let s = Array2::from_shape_simple_fn((n, n), || rng.random_range(-1.0..=1.0));
            let tau = [0.05, 0.1, 0.5][rng.random_range(0..3)];
            let p = PositiveSets::from_labels(&labels);
            let l = contrastive_loss(&s, tau, &p).unwrap();
            let (li, lt) = literal(&s, tau, &p);
            assert!((l.l_image - li).abs() < 1e-10 && (l.l_text - lt).abs() < 1e-10);
        }
    }

    #[test]
    fn similarity_and_temperature_gradients_match_differences() {
        let s = array![[0.9, -0.2, 0.1], [0.3, 0.5, -0.7], [0.0, 0.4, 0.2]];
        let p = PositiveSets::from_labels(&[0, 1, 0]);
        let log_tau: f64 = 0.1f64.ln();
        let g = contrastive_loss_grad(&s, log_tau.exp(), &p).unwrap();
        let h = 1e-6;
        for q in 0..3 {
            for r in 0..3 {
                let (mut a, mut b) = (s.clone(), s.clone());
                a[[q, r]] += h;
                b[[q, r]] -= h;
                let fd = (contrastive_loss(&a, log_tau.exp(), &p).unwrap().l_total
                    - contrastive_loss(&b, log_tau.exp(), &p).unwrap().l_total)
                    / (2.0 * h);
                assert!((fd - g.d_similarity[[q, r]]).abs() < 1e-6);
            }
        }
        let fd = (contrastive_loss(&s, (log_tau + h).exp(), &p).unwrap().l_total
            - contrastive_loss(&s, (log_tau - h).exp(), &p).unwrap().l_total)
            / (2.0 * h);
        assert!((fd - g.d_log_temperature).abs() < 1e-6);
    }

    #[test]
    fn permutation_invariance() {
        let s: Array2<f64> = array![[0.9, -0.2, 0.1], [0.3, 0.5, -0.7], [0.0, 0.4, 0.2]];
        let labels = [0, 1, 0];
        let perm = [2, 0, 1];
        let sp = Array2::from_shape_fn((3, 3), |(i, j)| s[[perm[i], perm[j]]]);
        let lp: Vec<i32> = perm.iter().map(|&i| labels[i]).collect();
        let a = contrastive_loss(&s, 0.2, &PositiveSets::from_labels(&labels)).unwrap();
        let b = contrastive_loss(&sp, 0.2, &PositiveSets::from_labels(&lp)).unwrap();
        assert!((a.l_total - b.l_total).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let s = Array2::from_elem((2, 2), 0.0);
        let p = PositiveSets::from_labels(&[0, 1]);
        assert!(matches!(
            contrastive_loss(&array![[f64::NAN, 0.0], [0.0, 0.0]], 0.1, &p),
            Err(Error::Numeric { .. })
        ));
        assert!(matches!(
            PositiveSets::from_mask(array![[true, false], [true, false]]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            contrastive_loss(&s, 0.1, &PositiveSets::from_labels(&[0, 1, 2])),
            Err(Error::Shape(_))
        ));
    }
}
