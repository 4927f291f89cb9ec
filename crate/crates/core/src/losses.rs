//! Scalar training objectives: the β-weighted variational loss, cross-entropy,
//! the attribution alignment penalty, the head-1 L2 penalty, and their total.
//!
//! Each objective has a plain `f64` form for single samples and a graph form
//! ([`tape`]) over mini-batches used by the trainer.

use crate::attribution::AttributionMap;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::{LatentCode, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// The unweighted components of one batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub ce1: f64,
    pub ce2: f64,
    pub beta_loss: f64,
    pub att_loss: f64,
    pub reg: f64,
}

/// Components and weighted total. `ce1` already carries the sample weight.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce1: f64,
    pub ce2: f64,
    pub beta_loss: f64,
    pub att_loss: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ce1, self.ce2, self.beta_loss, self.att_loss, self.reg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `½ Σ (μ² + e^{log σ²} − 1 − log σ²)`.
pub fn kl_divergence(code: &LatentCode) -> Result<f64> {
    if code.mu.len() != code.log_var.len() {
        return Err(Error::Shape("mu and log_var lengths differ".into()));
    }
    let kl = 0.5
        * code
            .mu
            .iter()
            .zip(&code.log_var)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>();
    if !kl.is_finite() {
        return Err(Error::NonFinite("kl divergence".into()));
    }
    Ok(kl)
}

/// Negative ELBO: `½ Σ (x − x̂)² + β·KL`.
pub fn beta_vae_loss(image: &Image, reconstruction: &Image, code: &LatentCode, beta: f64) -> Result<f64> {
    if image.data.len() != reconstruction.data.len() {
        return Err(Error::Shape(format!(
            "image has {} values, reconstruction {}",
            image.data.len(),
            reconstruction.data.len()
        )));
    }
    let recon = 0.5 * image.data.iter().zip(&reconstruction.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let loss = recon + beta * kl_divergence(code)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("beta-vae loss".into()));
    }
    Ok(loss)
}

/// `−log softmax(logits)[y]`.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::OutOfRange { what: "label", value: y, limit: logits.len() });
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[y])
}

/// `‖g1 − m1‖²_F + ‖g2 − m2‖²_F`.
pub fn alignment_loss(g1: &AttributionMap, m1: &AttributionMap, g2: &AttributionMap, m2: &AttributionMap) -> Result<f64> {
    let dims = (g1.height(), g1.width());
    for m in [m1, g2, m2] {
        if (m.height(), m.width()) != dims {
            return Err(Error::Shape(format!(
                "map is {}x{}, expected {}x{}",
                m.height(),
                m.width(),
                dims.0,
                dims.1
            )));
        }
    }
    let sq = |a: &AttributionMap, b: &AttributionMap| a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    Ok(sq(g1, m1) + sq(g2, m2))
}

/// Sum of squares of all head-1 weights and biases.
pub fn head_l2(params: &ModelParams) -> f64 {
    params.head1_indices().iter().flat_map(|&i| params.tensors()[i].data()).map(|v| v * v).sum()
}

/// `ce1·w + ce2 + λ1·beta + λ2·att + λ3·reg`.
pub fn total_loss(components: LossComponents, weights: &LossWeights, sample_weight: f64) -> Result<LossBreakdown> {
    if !(sample_weight >= 0.0) || !sample_weight.is_finite() {
        return Err(Error::Invalid(format!("sample weight must be finite and nonnegative, got {sample_weight}")));
    }
    let c = components;
    if ![c.ce1, c.ce2, c.beta_loss, c.att_loss, c.reg].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("loss components".into()));
    }
    let ce1 = c.ce1 * sample_weight;
    let total = ce1 + c.ce2 + weights.lambda1 * c.beta_loss + weights.lambda2 * c.att_loss + weights.lambda3 * c.reg;
    Ok(LossBreakdown { ce1, ce2: c.ce2, beta_loss: c.beta_loss, att_loss: c.att_loss, reg: c.reg, total })
}

/// Batched forms on the autodiff graph. Every function sums over the batch.
pub mod tape {
    use super_autograd::{Tensor, Var};

    /// `½ Σ (x − x̂)²` over all entries.
    pub fn reconstruction<'g>(x: Var<'g>, x_hat: Var<'g>) -> Var<'g> {
        (x - x_hat).square().sum() * 0.5
    }

    /// Per-row KL to the standard normal, `[N, 2d]` inputs to `[N, 1]`.
    pub fn kl_rows<'g>(mu: Var<'g>, log_var: Var<'g>) -> Var<'g> {
        ((mu.square() + log_var.exp() - log_var).add_scalar(-1.0)).sum_axis_keep(1) * 0.5
    }

    /// Per-row cross-entropy, `[N, Y]` logits to `[N, 1]`.
    pub fn cross_entropy_rows<'g>(logits: Var<'g>, labels: &[usize]) -> Var<'g> {
        let s = logits.shape();
        let (n, y) = (s[0], s[1]);
        assert_eq!(labels.len(), n, "one label per row");
        let mut one_hot = Tensor::zeros(&[n, y]);
        for (i, &l) in labels.iter().enumerate() {
            one_hot.data_mut()[i * y + l] = 1.0;
        }
        let m = logits.max_axis_keep(1).detach();
        let lse = (logits - m).exp().sum_axis_keep(1).ln() + m;
        lse - logits.mul_const(one_hot).sum_axis_keep(1)
    }

    /// Per-row squared distance between `[N, P]` maps, `[N, 1]`.
    pub fn squared_distance_rows<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
        (a - b).square().sum_axis_keep(1)
    }

    /// Sum of squares over the given tensors.
    pub fn l2<'g>(vars: &[Var<'g>]) -> Var<'g> {
        let mut it = vars.iter().map(|v| v.square().sum());
        let first = it.next().expect("at least one tensor");
        it.fold(first, |acc, s| acc + s)
    }

    /// `Σ_i w_i r_i` for a `[N, 1]` column.
    pub fn weighted_sum<'g>(rows: Var<'g>, weights: &[f64]) -> Var<'g> {
        rows.mul_const(Tensor::new(vec![weights.len(), 1], weights.to_vec())).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::MapSource;

    fn map(h: usize, w: usize, v: Vec<f64>) -> AttributionMap {
        AttributionMap::new(h, w, v, MapSource::Head1).unwrap()
    }

    #[test]
    fn kl_closed_forms() {
        let code = |mu: f64, lv: f64| LatentCode { mu: vec![mu], log_var: vec![lv], d: 1 };
        assert_eq!(kl_divergence(&LatentCode { mu: vec![0.0; 4], log_var: vec![0.0; 4], d: 2 }).unwrap(), 0.0);
        assert!((kl_divergence(&code(1.0, 0.0)).unwrap() - 0.5).abs() < 1e-12);
        assert!(kl_divergence(&code(f64::NAN, 0.0)).is_err());
    }

    #[test]
    fn beta_vae_combines_reconstruction_and_kl() {
        let x = Image::filled(2, 2, [1.0, 0.0, 0.5]);
        let r = Image::filled(2, 2, [0.0, 0.0, 0.5]);
        let code = LatentCode { mu: vec![1.0], log_var: vec![0.0], d: 1 };
        assert!((beta_vae_loss(&x, &r, &code, 2.0).unwrap() - (2.0 + 1.0)).abs() < 1e-12);
        assert!(beta_vae_loss(&x, &Image::filled(1, 2, [0.0; 3]), &code, 1.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let big = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(big.is_finite() && big.abs() < 1e-12);
        assert!(matches!(cross_entropy(&[0.0, 0.0], 2), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn alignment_simple_cases() {
        let a = map(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(alignment_loss(&a, &a, &a, &a).unwrap(), 0.0);
        let ones = map(2, 2, vec![1.0; 4]);
        let zeros = map(2, 2, vec![0.0; 4]);
        assert_eq!(alignment_loss(&ones, &zeros, &a, &a).unwrap(), 4.0);
        assert!(alignment_loss(&a, &map(1, 4, vec![0.0; 4]), &a, &a).is_err());
    }

    #[test]
    fn total_loss_linear_combination() {
        let c = LossComponents { ce1: 1.0, ce2: 2.0, beta_loss: 3.0, att_loss: 4.0, reg: 5.0 };
        let w = LossWeights { beta: 1.0, lambda1: 1.0, lambda2: 2.0, lambda3: 0.1 };
        assert!((total_loss(c, &w, 1.0).unwrap().total - 14.5).abs() < 1e-12);
        assert_eq!(total_loss(LossComponents::default(), &w, 1.0).unwrap().total, 0.0);
        let jtt = LossComponents { ce1: 0.01, ..Default::default() };
        let zero = LossWeights { beta: 0.0, lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
        assert!((total_loss(jtt, &zero, 100.0).unwrap().total - 1.0).abs() < 1e-12);
        assert!(total_loss(c, &w, -1.0).is_err());
    }
}
