//! Bidirectional skeleton/text alignment: temperature-scaled cosine softmax in
//! both directions, label-defined target distributions, and the symmetric KL
//! loss with its analytic gradient.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::PROB_FLOOR;

/// One batch of paired embeddings. Rows of `skeleton` and `text` are expected
/// unit-normalized within 1e-6.
#[derive(Debug, Clone)]
pub struct AlignmentBatch {
    /// `B x d` skeleton embeddings.
    pub skeleton: Array2<f64>,
    /// `B x d` text embeddings.
    pub text: Array2<f64>,
    pub labels: Vec<usize>,
    pub tau: f64,
}

impl AlignmentBatch {
    pub fn new(skeleton: Array2<f64>, text: Array2<f64>, labels: Vec<usize>, tau: f64) -> Result<Self> {
        let batch = Self {
            skeleton,
            text,
            labels,
            tau,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Argument(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        let b = self.skeleton.nrows();
        if b == 0 {
            return Err(Error::Argument("batch must be nonempty".into()));
        }
        if self.text.dim() != self.skeleton.dim() {
            return Err(Error::Argument(format!(
                "skeleton is {:?} but text is {:?}",
                self.skeleton.dim(),
                self.text.dim()
            )));
        }
        if self.labels.len() != b {
            return Err(Error::Argument(format!(
                "{} labels for batch of {b}",
                self.labels.len()
            )));
        }
        for (name, m) in [("skeleton", &self.skeleton), ("text", &self.text)] {
            for (i, row) in m.rows().into_iter().enumerate() {
                let norm = row.dot(&row).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::Argument(format!(
                        "{name} row {i} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.skeleton.nrows()
    }
}

fn row_softmax_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|l| (l - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
}

/// Skeleton-to-text and text-to-skeleton transition probabilities:
/// `P_s2t(i,j) = softmax_j cos(s_i, t_j)/tau`, and symmetrically for t2s.
/// Every row sums to one.
pub fn bidirectional_probs(batch: &AlignmentBatch) -> Result<(Array2<f64>, Array2<f64>)> {
    batch.validate()?;
    // rows are unit vectors, so cosine reduces to the dot product
    let cos = batch.skeleton.dot(&batch.text.t());
    let mut p_s2t = cos.mapv(|c| c / batch.tau);
    let mut p_t2s = Array2::<f64>::zeros(cos.dim());
    p_t2s.assign(&cos.t());
    p_t2s.mapv_inplace(|c| c / batch.tau);
    row_softmax_inplace(&mut p_s2t);
    row_softmax_inplace(&mut p_t2s);
    Ok((p_s2t, p_t2s))
}

/// Label-defined targets: uniform over in-batch positives (same label),
/// zero elsewhere. Row `i` always contains itself, so rows sum to one.
pub fn target_distributions(labels: &[usize]) -> (Array2<f64>, Array2<f64>) {
    let b = labels.len();
    let mut q = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        let positives = labels.iter().filter(|&&l| l == labels[i]).count();
        let p = 1.0 / positives as f64;
        for j in 0..b {
            if labels[j] == labels[i] {
                q[(i, j)] = p;
            }
        }
    }
    (q.clone(), q)
}

fn kl_row(q: ndarray::ArrayView1<f64>, p: ndarray::ArrayView1<f64>) -> f64 {
    q.iter()
        .zip(p.iter())
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.max(PROB_FLOOR).ln()))
        .sum()
}

/// Symmetric KL alignment loss:
/// `1/2 [ mean_i KL(Q_s2t(i) || P_s2t(i)) + mean_i KL(Q_t2s(i) || P_t2s(i)) ]`.
pub fn alignment_loss(
    p_s2t: &Array2<f64>,
    p_t2s: &Array2<f64>,
    q_s2t: &Array2<f64>,
    q_t2s: &Array2<f64>,
) -> Result<f64> {
    let dim = p_s2t.dim();
    for (name, m) in [("p_t2s", p_t2s), ("q_s2t", q_s2t), ("q_t2s", q_t2s)] {
        if m.dim() != dim {
            return Err(Error::Argument(format!(
                "{name} is {:?}, expected {dim:?}",
                m.dim()
            )));
        }
    }
    let b = dim.0 as f64;
    let mut s2t = 0.0;
    let mut t2s = 0.0;
    for i in 0..dim.0 {
        s2t += kl_row(q_s2t.row(i), p_s2t.row(i));
        t2s += kl_row(q_t2s.row(i), p_t2s.row(i));
    }
    Ok(0.5 * (s2t / b + t2s / b))
}

/// Loss and gradients of the alignment objective with respect to the raw
/// (not necessarily unit-norm) embedding rows. Cosine similarity here divides
/// by the row norms, so the value is invariant to positive row scaling and
/// matches [`alignment_loss`] over [`bidirectional_probs`] for unit rows.
#[derive(Debug, Clone)]
pub struct AlignGrad {
    pub loss: f64,
    pub d_skeleton: Array2<f64>,
    pub d_text: Array2<f64>,
}

pub fn alignment_loss_grad(
    skeleton: &Array2<f64>,
    text: &Array2<f64>,
    labels: &[usize],
    tau: f64,
) -> Result<AlignGrad> {
    if tau <= 0.0 {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (b, d) = skeleton.dim();
    if b == 0 {
        return Err(Error::Argument("batch must be nonempty".into()));
    }
    if text.dim() != (b, d) {
        return Err(Error::Argument(format!(
            "skeleton is {:?} but text is {:?}",
            skeleton.dim(),
            text.dim()
        )));
    }
    if labels.len() != b {
        return Err(Error::Argument(format!("{} labels for batch of {b}", labels.len())));
    }

    let s_norms: Vec<f64> = skeleton
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let t_norms: Vec<f64> = text.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    for (i, &n) in s_norms.iter().enumerate() {
        if n == 0.0 {
            return Err(Error::Degenerate(format!("skeleton row {i} has zero norm")));
        }
    }
    for (i, &n) in t_norms.iter().enumerate() {
        if n == 0.0 {
            return Err(Error::Degenerate(format!("text row {i} has zero norm")));
        }
    }

    let mut s_hat = skeleton.clone();
    for (mut row, &n) in s_hat.rows_mut().into_iter().zip(s_norms.iter()) {
        row.mapv_inplace(|e| e / n);
    }
    let mut t_hat = text.clone();
    for (mut row, &n) in t_hat.rows_mut().into_iter().zip(t_norms.iter()) {
        row.mapv_inplace(|e| e / n);
    }

    let cos = s_hat.dot(&t_hat.t());
    let mut p_s2t = cos.mapv(|c| c / tau);
    let mut p_t2s = Array2::<f64>::zeros(cos.dim());
    p_t2s.assign(&cos.t());
    p_t2s.mapv_inplace(|c| c / tau);
    row_softmax_inplace(&mut p_s2t);
    row_softmax_inplace(&mut p_t2s);
    let (q_s2t, q_t2s) = target_distributions(labels);
    let loss = alignment_loss(&p_s2t, &p_t2s, &q_s2t, &q_t2s)?;

    // d loss / d cos(i,j): rows of A feed P_s2t, columns feed P_t2s.
    let scale = 1.0 / (2.0 * b as f64 * tau);
    let mut g = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            g[(i, j)] = scale * ((p_s2t[(i, j)] - q_s2t[(i, j)]) + (p_t2s[(j, i)] - q_t2s[(j, i)]));
        }
    }

    // cosine gradient: d cos(i,j)/d s_i = (t_hat_j - cos * s_hat_i) / |s_i|
    let gt = g.dot(&t_hat); // (B, d)
    let gc_rows: Vec<f64> = (0..b).map(|i| g.row(i).dot(&cos.row(i))).collect();
    let mut d_skeleton = Array2::<f64>::zeros((b, d));
    for i in 0..b {
        let mut row = d_skeleton.row_mut(i);
        row.assign(&gt.row(i));
        row.scaled_add(-gc_rows[i], &s_hat.row(i));
        row.mapv_inplace(|e| e / s_norms[i]);
    }

    let gs = g.t().dot(&s_hat); // (B, d)
    let gc_cols: Vec<f64> = (0..b).map(|j| g.column(j).dot(&cos.column(j))).collect();
    let mut d_text = Array2::<f64>::zeros((b, d));
    for j in 0..b {
        let mut row = d_text.row_mut(j);
        row.assign(&gs.row(j));
        row.scaled_add(-gc_cols[j], &t_hat.row(j));
        row.mapv_inplace(|e| e / t_norms[j]);
    }

    Ok(AlignGrad {
        loss,
        d_skeleton,
        d_text,
    })
}
