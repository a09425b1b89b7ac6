//! Document-level cross-modal alignment: mean pooling and the in-batch
//! contrastive objective over `2Q` pooled image and findings vectors.

use crate::encoders::Denominator;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Mean over the rows of a `k × d` matrix.
pub fn pool(tape: &mut Tape, rows: Var) -> Result<Var> {
    if tape.value(rows).rank() != 2 {
        return Err(Error::Shape(format!("pool expects a matrix, got {:?}", tape.shape(rows))));
    }
    tape.mean(rows, 0)
}

/// Contrastive loss over `Q` aligned pairs.
///
/// Anchors are all `2Q` vectors; the positive of `z_image[i]` is `z_text[i]`
/// and vice versa. Every vector from another pair, of either modality, is a
/// negative. The loss is the mean over anchors of
/// `−log( e^{s⁺/τ} / Σ e^{s/τ} )` with cosine `s`, the sum running over the
/// positive and negatives, or over negatives only.
pub fn contrastive_loss(
    tape: &mut Tape,
    z_image: &[Var],
    z_text: &[Var],
    tau: f64,
    denominator: Denominator,
) -> Result<Var> {
    let q = z_image.len();
    if q != z_text.len() {
        return Err(Error::Batch(format!("{q} image vectors vs {} text vectors", z_text.len())));
    }
    if q < 2 {
        return Err(Error::Batch(format!("contrastive batch needs ≥ 2 pairs, got {q}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
    }
    let all: Vec<Var> = z_image.iter().chain(z_text).copied().collect();
    let z = tape.concat_rows(&all)?;
    let zn = tape.normalize_rows(z)?;
    let sims = tape.matmul_nt(zn, zn)?;
    let logits = tape.scale(sims, 1.0 / tau);

    let n = 2 * q;
    let positive = |m: usize| if m < q { m + q } else { m - q };
    let targets: Vec<usize> = (0..n).map(positive).collect();
    let mut allowed = vec![true; n * n];
    for m in 0..n {
        allowed[m * n + m] = false;
        if denominator == Denominator::NegativesOnly {
            allowed[m * n + positive(m)] = false;
        }
    }
    tape.masked_nll(logits, &targets, &allowed)
}

/// Pooled representations of one examination.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledPair {
    pub z_image: Tensor,
    pub z_text: Tensor,
    pub pair_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub pairs: Vec<PooledPair>,
    pub tau: f64,
    pub denominator: Denominator,
}

impl ContrastiveBatch {
    pub fn new(pairs: Vec<PooledPair>, tau: f64) -> Self {
        Self {
            pairs,
            tau,
            denominator: Denominator::WithPositive,
        }
    }

    /// Loss value for the batch.
    pub fn loss(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let zi: Vec<Var> = self.pairs.iter().map(|p| tape.constant(p.z_image.clone())).collect();
        let zt: Vec<Var> = self.pairs.iter().map(|p| tape.constant(p.z_text.clone())).collect();
        let l = contrastive_loss(&mut tape, &zi, &zt, self.tau, self.denominator)?;
        Ok(tape.value(l).item())
    }
}

/// Fraction of image vectors whose most cosine-similar text vector, within the
/// same group, is their own pair. Groups are consecutive chunks of `group` pairs.
pub fn retrieval_top1(z_image: &[Tensor], z_text: &[Tensor], group: usize) -> Result<f64> {
    if z_image.len() != z_text.len() || z_image.is_empty() || group == 0 {
        return Err(Error::Alignment("retrieval needs equal, non-empty vector lists".into()));
    }
    let unit = |t: &Tensor| -> Result<Vec<f64>> {
        let n = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::Domain("zero-norm vector in retrieval".into()));
        }
        Ok(t.data().iter().map(|v| v / n).collect())
    };
    let zi: Vec<Vec<f64>> = z_image.iter().map(unit).collect::<Result<_>>()?;
    let zt: Vec<Vec<f64>> = z_text.iter().map(unit).collect::<Result<_>>()?;
    let mut hits = 0;
    for start in (0..zi.len()).step_by(group) {
        let end = (start + group).min(zi.len());
        for i in start..end {
            let best = (start..end)
                .map(|j| (j, zi[i].iter().zip(&zt[j]).map(|(a, b)| a * b).sum::<f64>()))
                .fold((start, f64::NEG_INFINITY), |acc, (j, s)| if s > acc.1 { (j, s) } else { acc });
            if best.0 == i {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / zi.len() as f64)
}
