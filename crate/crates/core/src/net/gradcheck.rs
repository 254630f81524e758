//! Central finite differences over the forward pass only.
//!
//! Nothing here calls `backward`: parameter derivatives come from perturbing
//! parameter entries, tap derivatives from additive probes at the site.

use crate::error::Result;
use crate::net::model::{Model, NeuronSite, SiteKind};
use crate::net::pass::Perturbation;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-4;

/// `L(y) = sum(c * y) + 0.5 * sum(y^2)`, a smooth loss with a non-trivial gradient.
#[derive(Debug, Clone)]
pub struct ProbeLoss {
    pub coef: Tensor,
}

impl ProbeLoss {
    pub fn random(shape: &[usize], rng: &mut RngState) -> Result<Self> {
        let mut coef = Tensor::zeros(shape)?;
        for c in coef.data_mut() {
            *c = rng.uniform(-1.0, 1.0);
        }
        Ok(ProbeLoss { coef })
    }

    pub fn value(&self, y: &Tensor) -> f64 {
        y.data()
            .iter()
            .zip(self.coef.data())
            .map(|(y, c)| c * y + 0.5 * y * y)
            .sum()
    }

    pub fn grad(&self, y: &Tensor) -> Tensor {
        let mut g = y.clone();
        for (gi, c) in g.data_mut().iter_mut().zip(self.coef.data()) {
            *gi += c;
        }
        g
    }
}

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn loss_at(model: &Model, x: &Tensor, loss: &ProbeLoss, probes: &[Perturbation]) -> Result<f64> {
    let c = model.forward_pass(x, probes)?;
    Ok(loss.value(c.value(model.output_node())))
}

/// Finite-difference gradient for every parameter, flattened in `param_ids` order.
pub fn fd_param_grads(model: &Model, x: &Tensor, loss: &ProbeLoss, eps: f64) -> Result<Vec<f64>> {
    let mut m = model.clone();
    let mut out = Vec::new();
    for id in model.param_ids() {
        let len = model.param(id).unwrap().len();
        for k in 0..len {
            let orig = m.param(id).unwrap().data()[k];
            m.param_mut(id).unwrap().data_mut()[k] = orig + eps;
            let up = loss_at(&m, x, loss, &[])?;
            m.param_mut(id).unwrap().data_mut()[k] = orig - eps;
            let down = loss_at(&m, x, loss, &[])?;
            m.param_mut(id).unwrap().data_mut()[k] = orig;
            out.push((up - down) / (2.0 * eps));
        }
    }
    Ok(out)
}

/// Finite-difference tap gradient for every active site: the batch mean of
/// the per-sample derivative magnitude, probing the pre-activation
/// (post-activation sites) or the gain (layernorm features) one sample at a time.
pub fn fd_tap_grads(
    model: &Model,
    x: &Tensor,
    loss: &ProbeLoss,
    eps: f64,
) -> Result<Vec<(NeuronSite, f64)>> {
    let batch = x.rows();
    let mut out = Vec::new();
    for site in model.active_sites() {
        debug_assert!(matches!(
            site.kind,
            SiteKind::PostActivation | SiteKind::LayernormFeature
        ));
        let width = model.node(site.layer).width;
        let mut total = 0.0;
        for b in 0..batch {
            let mut delta = Tensor::zeros(&[batch, width])?;
            delta.set2(b, site.unit, eps);
            let up = loss_at(
                model,
                x,
                loss,
                &[Perturbation {
                    node: site.layer,
                    delta: delta.clone(),
                }],
            )?;
            delta.set2(b, site.unit, -eps);
            let down = loss_at(
                model,
                x,
                loss,
                &[Perturbation {
                    node: site.layer,
                    delta,
                }],
            )?;
            total += ((up - down) / (2.0 * eps)).abs();
        }
        out.push((site, total / batch as f64));
    }
    Ok(out)
}

/// Largest discrepancy found between reverse-mode and finite differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_param_rel: f64,
    pub max_tap_rel: f64,
    pub worst_param: Option<usize>,
    pub worst_site: Option<NeuronSite>,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_param_rel <= tol && self.max_tap_rel <= tol
    }
}

/// Compares `backward` against finite differences on one batch.
pub fn check_model(model: &Model, x: &Tensor, loss: &ProbeLoss, eps: f64) -> Result<GradReport> {
    let mut m = model.clone();
    let y = m.forward(x)?;
    let bw = m.backward(&loss.grad(&y))?;
    let analytic = bw.grads.flat();
    let numeric = fd_param_grads(model, x, loss, eps)?;
    let mut report = GradReport {
        max_param_rel: 0.0,
        max_tap_rel: 0.0,
        worst_param: None,
        worst_site: None,
        checked: analytic.len(),
    };
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_error(*a, *n);
        if report.worst_param.is_none() || e > report.max_param_rel {
            report.max_param_rel = e;
            report.worst_param = Some(k);
        }
    }
    let fd_taps = fd_tap_grads(model, x, loss, eps)?;
    for (tap, (site, fd)) in bw.taps.iter().zip(&fd_taps) {
        debug_assert_eq!(tap.site, *site);
        let e = rel_error(tap.gradient, *fd);
        report.checked += 1;
        if report.worst_site.is_none() || e > report.max_tap_rel {
            report.max_tap_rel = e;
            report.worst_site = Some(*site);
        }
    }
    Ok(report)
}
