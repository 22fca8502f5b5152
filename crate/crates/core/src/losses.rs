//! Training objectives as differentiable scalars on a [`Graph`].
//!
//! Every loss is a batch mean, so `alpha` and the learning rate do not depend
//! on batch size. Discriminator and classifier outputs are logits; the
//! sigmoid lives inside the log-likelihood losses.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("labels must be 0 or 1, found {0}")]
    NonBinaryLabel(f64),
    #[error("alpha must be non-negative, got {0}")]
    NegativeAlpha(f64),
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
}

/// Which adversarial objective drives adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdversarialLoss {
    /// Log-likelihood discriminator; only target samples pass through the
    /// adapted mapping.
    AddaLog,
    /// Least-squares discriminator; the adapted mapping sees a mixed batch
    /// of source and target samples.
    #[default]
    LsganBothDomains,
}

impl AdversarialLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            AdversarialLoss::AddaLog => "adda",
            AdversarialLoss::LsganBothDomains => "lsgan",
        }
    }
}

impl fmt::Display for AdversarialLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdversarialLoss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adda" => Ok(AdversarialLoss::AddaLog),
            "lsgan" => Ok(AdversarialLoss::LsganBothDomains),
            other => Err(format!("unknown loss variant `{other}` (expected adda or lsgan)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossVariant {
    pub adversarial: AdversarialLoss,
    /// Adds the `alpha`-weighted attribute term to the mapping update.
    pub with_classifier: bool,
}

impl Default for LossVariant {
    fn default() -> Self {
        Self {
            adversarial: AdversarialLoss::LsganBothDomains,
            with_classifier: true,
        }
    }
}

/// Discriminator and mapping losses computed from the same logits.
#[derive(Debug, Clone, Copy)]
pub struct AdvLosses {
    pub d_loss: Var,
    pub m_loss: Var,
}

fn nonempty<F: Scalar>(g: &Graph<F>, v: Var, what: &'static str) -> Result<(), LossError> {
    // Tensors cannot have zero-size dims, but keep the contract explicit.
    if g.value(v).is_empty() {
        return Err(LossError::EmptyBatch(what));
    }
    Ok(())
}

/// Multi-label sigmoid cross-entropy: batch mean of
/// `Σ_j max(z,0) − z·a + ln(1 + e^{−|z|})`.
pub fn attr_loss<F: Scalar>(g: &mut Graph<F>, logits: Var, labels: Var) -> Result<Var, LossError> {
    if let Some(&bad) = g
        .value(labels)
        .data()
        .iter()
        .find(|&&a| a != F::zero() && a != F::one())
    {
        return Err(LossError::NonBinaryLabel(bad.as_f64()));
    }
    let batch = g.value(logits).rows();
    let sp = g.softplus(logits)?;
    let za = g.mul(logits, labels)?;
    let per_elem = g.sub(sp, za)?;
    let total = g.sum(per_elem)?;
    let inv_b = F::one() / F::from_usize(batch).expect("batch fits");
    Ok(g.scale(total, inv_b)?)
}

/// `−mean log σ(d_src) − mean log(1 − σ(d_tgt))`.
pub fn adda_d_loss<F: Scalar>(g: &mut Graph<F>, d_src: Var, d_tgt: Var) -> Result<Var, LossError> {
    nonempty(g, d_src, "source")?;
    nonempty(g, d_tgt, "target")?;
    // −log σ(x) = softplus(−x); −log(1 − σ(x)) = softplus(x)
    let neg_src = g.neg(d_src)?;
    let real = g.softplus(neg_src)?;
    let real = g.mean(real)?;
    let fake = g.softplus(d_tgt)?;
    let fake = g.mean(fake)?;
    Ok(g.add(real, fake)?)
}

/// Inverted-label mapping loss `−mean log σ(d_tgt)`. The source term does
/// not depend on the mapping and is left out.
pub fn adda_m_loss<F: Scalar>(g: &mut Graph<F>, d_tgt: Var) -> Result<Var, LossError> {
    nonempty(g, d_tgt, "target")?;
    let neg = g.neg(d_tgt)?;
    let sp = g.softplus(neg)?;
    Ok(g.mean(sp)?)
}

pub fn adda_losses<F: Scalar>(g: &mut Graph<F>, d_src: Var, d_tgt: Var) -> Result<AdvLosses, LossError> {
    Ok(AdvLosses {
        d_loss: adda_d_loss(g, d_src, d_tgt)?,
        m_loss: adda_m_loss(g, d_tgt)?,
    })
}

/// `mean (d_src − 1)² + mean d_union²`: frozen-source features are labelled
/// 1, adapted features 0.
pub fn lsgan_d_loss<F: Scalar>(g: &mut Graph<F>, d_src: Var, d_union: Var) -> Result<Var, LossError> {
    nonempty(g, d_src, "source")?;
    nonempty(g, d_union, "union")?;
    let shifted = g.add_scalar(d_src, -F::one())?;
    let real = g.square(shifted)?;
    let real = g.mean(real)?;
    let fake = g.square(d_union)?;
    let fake = g.mean(fake)?;
    Ok(g.add(real, fake)?)
}

/// `mean (d_union − 1)²`: the mapping pushes adapted features toward the
/// frozen-source label.
pub fn lsgan_m_loss<F: Scalar>(g: &mut Graph<F>, d_union: Var) -> Result<Var, LossError> {
    nonempty(g, d_union, "union")?;
    let shifted = g.add_scalar(d_union, -F::one())?;
    let sq = g.square(shifted)?;
    Ok(g.mean(sq)?)
}

pub fn lsgan_losses<F: Scalar>(g: &mut Graph<F>, d_src: Var, d_union: Var) -> Result<AdvLosses, LossError> {
    Ok(AdvLosses {
        d_loss: lsgan_d_loss(g, d_src, d_union)?,
        m_loss: lsgan_m_loss(g, d_union)?,
    })
}

/// `m_adv + alpha · attr`, minimized jointly over mapping and classifier.
pub fn combined_objective<F: Scalar>(g: &mut Graph<F>, m_adv: Var, attr: Var, alpha: F) -> Result<Var, LossError> {
    if alpha < F::zero() {
        return Err(LossError::NegativeAlpha(alpha.as_f64()));
    }
    let weighted = g.scale(attr, alpha)?;
    Ok(g.add(m_adv, weighted)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{softplus, Tensor};

    fn col(g: &mut Graph<f64>, vals: &[f64]) -> Var {
        g.leaf(Tensor::new(&[vals.len(), 1], vals.to_vec()).unwrap().with_grad())
    }

    #[test]
    fn attr_loss_zero_logits_is_m_ln2() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[5, 8]));
        let a = g.constant(Tensor::new(&[5, 8], (0..40).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap());
        let l = attr_loss(&mut g, z, a).unwrap();
        assert!((g.value(l).item() - 8.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((g.value(l).item() - 5.545177).abs() < 1e-6);
    }

    #[test]
    fn attr_loss_saturates() {
        let mut g = Graph::<f64>::new();
        let labels = [1.0, 0.0, 0.0, 1.0];
        let logits: Vec<f64> = labels.iter().map(|&a| if a == 1.0 { 50.0 } else { -50.0 }).collect();
        let z = g.constant(Tensor::new(&[2, 2], logits).unwrap());
        let a = g.constant(Tensor::new(&[2, 2], labels.to_vec()).unwrap());
        let l = attr_loss(&mut g, z, a).unwrap();
        assert!(g.value(l).item() < 1e-9);
        assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn attr_loss_scalar_case() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let l = attr_loss(&mut g, z, a).unwrap();
        let expected = 2.0 * softplus(-1.0f64);
        assert!((g.value(l).item() - expected).abs() < 1e-15);
        assert!((expected - 0.626523).abs() < 1e-6);
    }

    #[test]
    fn attr_loss_rejects_bad_labels_and_shapes() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let a = g.constant(Tensor::from_rows(&[vec![0.5, 1.0]]).unwrap());
        assert!(matches!(attr_loss(&mut g, z, a), Err(LossError::NonBinaryLabel(_))));
        let a = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(attr_loss(&mut g, z, a), Err(LossError::Tensor(_))));
    }

    #[test]
    fn attr_loss_gradient_is_sigma_minus_label_over_batch() {
        let zs = [0.3, -1.2, 2.0, 0.0, 0.7, -0.4];
        let ys = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::new(&[3, 2], zs.to_vec()).unwrap().with_grad());
        let a = g.constant(Tensor::new(&[3, 2], ys.to_vec()).unwrap());
        let l = attr_loss(&mut g, z, a).unwrap();
        g.backward(l).unwrap();
        for (i, &d) in g.grad(z).unwrap().iter().enumerate() {
            let expect = (crate::tensor::sigmoid(zs[i]) - ys[i]) / 3.0;
            assert!((d - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adda_saturation_and_midpoint() {
        let mut g = Graph::<f64>::new();
        let s = col(&mut g, &[50.0, 50.0]);
        let t = col(&mut g, &[-50.0, -50.0]);
        let l = adda_losses(&mut g, s, t).unwrap();
        assert!(g.value(l.d_loss).item() < 1e-20);
        assert!((g.value(l.m_loss).item() - 50.0).abs() < 1e-12);

        let mut g = Graph::<f64>::new();
        let s = col(&mut g, &[0.0; 4]);
        let t = col(&mut g, &[0.0; 4]);
        let l = adda_losses(&mut g, s, t).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(l.d_loss).item() - 2.0 * ln2).abs() < 1e-15);
        assert!((g.value(l.m_loss).item() - ln2).abs() < 1e-15);
        g.backward(l.m_loss).unwrap();
        for &d in g.grad(t).unwrap() {
            assert!((d + 0.5 / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn lsgan_hand_values() {
        let mut g = Graph::<f64>::new();
        let s = col(&mut g, &[1.0, 1.0, 1.0]);
        let u = col(&mut g, &[0.0, 0.0]);
        let l = lsgan_losses(&mut g, s, u).unwrap();
        assert_eq!(g.value(l.d_loss).item(), 0.0);
        assert_eq!(g.value(l.m_loss).item(), 1.0);

        let u = col(&mut g, &[1.0, 1.0]);
        let m = lsgan_m_loss(&mut g, u).unwrap();
        assert_eq!(g.value(m).item(), 0.0);

        let u = col(&mut g, &[0.5, 0.2]);
        let m = lsgan_m_loss(&mut g, u).unwrap();
        assert!((g.value(m).item() - 0.445).abs() < 1e-12);
    }

    #[test]
    fn combined_objective_values() {
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::scalar(0.445).unwrap());
        let a = g.constant(Tensor::scalar(5.545177).unwrap());
        let c = combined_objective(&mut g, m, a, 0.1).unwrap();
        assert!((g.value(c).item() - 0.9995177).abs() < 1e-12);

        let c0 = combined_objective(&mut g, m, a, 0.0).unwrap();
        assert_eq!(g.value(c0).item().to_bits(), g.value(m).item().to_bits());

        assert!(matches!(
            combined_objective(&mut g, m, a, -0.1),
            Err(LossError::NegativeAlpha(_))
        ));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("adda".parse::<AdversarialLoss>().unwrap(), AdversarialLoss::AddaLog);
        assert_eq!(
            "lsgan".parse::<AdversarialLoss>().unwrap(),
            AdversarialLoss::LsganBothDomains
        );
        assert!("wgan".parse::<AdversarialLoss>().is_err());
    }
}
