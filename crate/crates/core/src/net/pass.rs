//! Forward evaluation and reverse-mode differentiation with per-site taps.

use serde::{Deserialize, Serialize};

use crate::error::{PlabError, Result};
use crate::net::model::{Fault, Model, NeuronSite, NodeId, Op, ParamId, ParamKind, SiteKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Node outputs of one forward pass, kept for the paired backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) values: Vec<Tensor>,
    pub(crate) ln: Vec<Option<LayerNormCache>>,
}

impl ForwardCache {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }
}

/// Additive probe used by finite-difference oracles.
///
/// On an activation node the delta is added to the pre-activation, on a
/// layernorm node to the gain (per sample and feature), on any other node
/// to its output.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub node: NodeId,
    pub delta: Tensor,
}

/// Batch statistics read at one site during backward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapRecord {
    pub site: NeuronSite,
    /// Mean over the batch of `|h|`.
    pub activation: f64,
    /// Mean over the batch of the per-sample gradient magnitude at the site.
    pub gradient: f64,
}

/// Parameter gradients aligned with `Model::param_ids`.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub ids: Vec<ParamId>,
    pub values: Vec<Tensor>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .map(|k| &self.values[k])
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().to_vec()).collect()
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.values {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: ParamGrads,
    pub taps: Vec<TapRecord>,
    pub input_grad: Tensor,
}

/// Row-major `c = a * b + beta * c` with `a: [m, k]`, `b: [k, n]` given by
/// (row stride, column stride) pairs.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.len() == m * n);
    // SAFETY: strides address only entries within the checked slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Model {
    fn check_input(&self, input: &Tensor) -> Result<usize> {
        match input.shape() {
            [b, d] if *d == self.input_dim() => Ok(*b),
            other => Err(PlabError::InvalidShape(format!(
                "model expects [batch, {}] input, got {other:?}",
                self.input_dim()
            ))),
        }
    }

    /// Pure forward pass returning every node's output.
    pub fn forward_pass(&self, input: &Tensor, probes: &[Perturbation]) -> Result<ForwardCache> {
        let batch = self.check_input(input)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut ln = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let probe = probes.iter().find(|p| p.node == id).map(|p| &p.delta);
            if let Some(d) = probe {
                if d.shape() != [batch, node.width] {
                    return Err(PlabError::InvalidShape(format!(
                        "probe for node {id} must be [{batch}, {}]",
                        node.width
                    )));
                }
            }
            let mut ln_cache = None;
            let mut out = match &node.op {
                Op::Input => input.clone(),
                Op::Linear(l) => {
                    let x = &values[l.input];
                    let fan_in = x.cols();
                    let width = node.width;
                    let mut data = l.bias.data().repeat(batch);
                    gemm(
                        batch,
                        fan_in,
                        width,
                        (x.data(), fan_in as isize, 1),
                        (l.weight.data(), 1, fan_in as isize),
                        1.0,
                        &mut data,
                    );
                    Tensor::from_vec(&[batch, width], data)?
                }
                Op::Activation { input, kind } => {
                    let z = &values[*input];
                    match probe {
                        Some(d) => {
                            let mut z = z.clone();
                            z.add_assign(d)?;
                            z.map(|v| kind.apply(v))
                        }
                        None => z.map(|v| kind.apply(v)),
                    }
                }
                Op::LayerNorm(n) => {
                    let x = &values[n.input];
                    let h = node.width;
                    let (gain, shift) = (n.gain.data(), n.shift.data());
                    let mut xhat = Vec::with_capacity(batch * h);
                    let mut inv_std = Vec::with_capacity(batch);
                    let mut out = Vec::with_capacity(batch * h);
                    for b in 0..batch {
                        let xr = x.row(b);
                        let mean = xr.iter().sum::<f64>() / h as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
                        let is = 1.0 / (var + n.eps).sqrt();
                        inv_std.push(is);
                        let start = xhat.len();
                        xhat.extend(xr.iter().map(|v| (v - mean) * is));
                        let xh = &xhat[start..];
                        match probe {
                            Some(d) => out.extend(
                                (0..h).map(|i| (gain[i] + d.get2(b, i)) * xh[i] + shift[i]),
                            ),
                            None => out.extend((0..h).map(|i| gain[i] * xh[i] + shift[i])),
                        }
                    }
                    ln_cache = Some(LayerNormCache {
                        xhat: Tensor::from_vec(&[batch, h], xhat)?,
                        inv_std,
                    });
                    Tensor::from_vec(&[batch, h], out)?
                }
                Op::Add { lhs, rhs } => {
                    let mut out = values[*lhs].clone();
                    out.add_assign(&values[*rhs])?;
                    out
                }
                Op::Concat { lhs, rhs } => {
                    let (a, c) = (&values[*lhs], &values[*rhs]);
                    let mut data = Vec::with_capacity(batch * node.width);
                    for b in 0..batch {
                        data.extend_from_slice(a.row(b));
                        data.extend_from_slice(c.row(b));
                    }
                    Tensor::from_vec(&[batch, node.width], data)?
                }
            };
            if let Some(d) = probe {
                if !matches!(node.op, Op::Activation { .. } | Op::LayerNorm(_)) {
                    out.add_assign(d)?;
                }
            }
            values.push(out);
            ln.push(ln_cache);
        }
        if !values[self.output].all_finite() {
            return Err(PlabError::NumericOverflow(
                "non-finite value in model output".into(),
            ));
        }
        Ok(ForwardCache { values, ln })
    }

    /// Evaluates the model without retaining state for backward.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut cache = self.forward_pass(input, &[])?;
        Ok(cache.values.swap_remove(self.output))
    }

    /// Evaluates the model and retains the node outputs for `backward`.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let cache = self.forward_pass(input, &[])?;
        let out = cache.values[self.output].clone();
        self.cache = Some(cache);
        Ok(out)
    }

    /// Reverse pass for the most recent `forward`. `grad_output` is the loss
    /// gradient with respect to the model output.
    pub fn backward(&mut self, grad_output: &Tensor) -> Result<Backward> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| PlabError::State("backward called without a matching forward".into()))?;
        self.backward_from(&cache, grad_output)
    }

    /// Reverse pass against an explicit cache (the model is not mutated).
    pub fn backward_from(&self, cache: &ForwardCache, grad_output: &Tensor) -> Result<Backward> {
        self.reverse(cache, grad_output, true)
    }

    /// Gradient with respect to the model input only; no parameter grads or taps.
    pub fn input_grad_from(&self, cache: &ForwardCache, grad_output: &Tensor) -> Result<Tensor> {
        Ok(self.reverse(cache, grad_output, false)?.input_grad)
    }

    fn reverse(&self, cache: &ForwardCache, grad_output: &Tensor, full: bool) -> Result<Backward> {
        let out_shape = cache.values[self.output].shape();
        if grad_output.shape() != out_shape {
            return Err(PlabError::InvalidShape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_output.shape(),
                out_shape
            )));
        }
        let batch = out_shape[0];
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[self.output] = Some(grad_output.clone());

        let ids = if full { self.param_ids() } else { Vec::new() };
        let mut pgrads: Vec<Option<Tensor>> = vec![None; ids.len()];
        let slot = |id: ParamId| ids.iter().position(|&x| x == id).unwrap();
        let mut taps: Vec<TapRecord> = Vec::new();

        fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            let g = match grads[id].take() {
                Some(g) => g,
                None => Tensor::zeros(&[batch, node.width])?,
            };
            match &node.op {
                Op::Input => {
                    grads[id] = Some(g);
                }
                Op::Linear(l) => {
                    let x = &cache.values[l.input];
                    let fan_in = x.cols();
                    let w = l.weight.data();
                    let width = node.width;
                    let mut dx = vec![0.0; batch * fan_in];
                    gemm(
                        batch,
                        width,
                        fan_in,
                        (g.data(), width as isize, 1),
                        (w, fan_in as isize, 1),
                        0.0,
                        &mut dx,
                    );
                    if full {
                        let mut dw = vec![0.0; width * fan_in];
                        gemm(
                            width,
                            batch,
                            fan_in,
                            (g.data(), 1, width as isize),
                            (x.data(), fan_in as isize, 1),
                            0.0,
                            &mut dw,
                        );
                        let mut db = vec![0.0; width];
                        for b in 0..batch {
                            for (d, gj) in db.iter_mut().zip(g.row(b)) {
                                *d += gj;
                            }
                        }
                        pgrads[slot(ParamId {
                            node: id,
                            kind: ParamKind::Weight,
                        })] = Some(Tensor::from_vec(&[node.width, fan_in], dw)?);
                        pgrads[slot(ParamId {
                            node: id,
                            kind: ParamKind::Bias,
                        })] = Some(Tensor::from_vec(&[node.width], db)?);
                    }
                    accumulate(&mut grads, l.input, Tensor::from_vec(&[batch, fan_in], dx)?)?;
                }
                Op::Activation { input, kind } => {
                    let z = &cache.values[*input];
                    let h = &cache.values[id];
                    let flip = self.fault == Some(Fault::FlipReluBackwardSign) && kind.is_relu();
                    let dz: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(z.data())
                        .map(|(gv, zv)| {
                            let der = kind.derivative(*zv);
                            gv * if flip { -der } else { der }
                        })
                        .collect();
                    let dz = Tensor::from_vec(&[batch, node.width], dz)?;
                    if full {
                        let mut sa = vec![0.0; node.width];
                        let mut sg = vec![0.0; node.width];
                        for b in 0..batch {
                            for ((a, s), (hv, dv)) in sa
                                .iter_mut()
                                .zip(&mut sg)
                                .zip(h.row(b).iter().zip(dz.row(b)))
                            {
                                *a += hv.abs();
                                *s += dv.abs();
                            }
                        }
                        for unit in 0..node.width {
                            let site = NeuronSite {
                                layer: id,
                                unit,
                                kind: SiteKind::PostActivation,
                            };
                            if self.pruned.contains(&site) {
                                continue;
                            }
                            taps.push(TapRecord {
                                site,
                                activation: sa[unit] / batch as f64,
                                gradient: sg[unit] / batch as f64,
                            });
                        }
                    }
                    accumulate(&mut grads, *input, dz)?;
                }
                Op::LayerNorm(ln) => {
                    let c = cache.ln[id].as_ref().expect("layernorm cache");
                    let y = &cache.values[id];
                    let hw = node.width;
                    let gain = ln.gain.data();
                    let mut dgain = vec![0.0; hw];
                    let mut dshift = vec![0.0; hw];
                    let mut dx = Vec::with_capacity(batch * hw);
                    let mut tap_g = vec![0.0; hw];
                    let mut tap_a = vec![0.0; hw];
                    let mut dxhat = vec![0.0; hw];
                    for b in 0..batch {
                        let (gr, xh, yr) = (g.row(b), c.xhat.row(b), y.row(b));
                        for i in 0..hw {
                            let per_sample = gr[i] * xh[i];
                            dgain[i] += per_sample;
                            dshift[i] += gr[i];
                            tap_g[i] += per_sample.abs();
                            tap_a[i] += yr[i].abs();
                            dxhat[i] = gr[i] * gain[i];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum();
                        let k = c.inv_std[b] / hw as f64;
                        dx.extend(
                            (0..hw).map(|i| k * (hw as f64 * dxhat[i] - sum_d - xh[i] * sum_dx)),
                        );
                    }
                    let dx = Tensor::from_vec(&[batch, hw], dx)?;
                    for unit in (0..hw).filter(|_| full) {
                        let site = NeuronSite {
                            layer: id,
                            unit,
                            kind: SiteKind::LayernormFeature,
                        };
                        if self.pruned.contains(&site) {
                            continue;
                        }
                        taps.push(TapRecord {
                            site,
                            activation: tap_a[unit] / batch as f64,
                            gradient: tap_g[unit] / batch as f64,
                        });
                    }
                    if full {
                        pgrads[slot(ParamId {
                            node: id,
                            kind: ParamKind::Gain,
                        })] = Some(Tensor::from_vec(&[hw], dgain)?);
                        pgrads[slot(ParamId {
                            node: id,
                            kind: ParamKind::Shift,
                        })] = Some(Tensor::from_vec(&[hw], dshift)?);
                    }
                    accumulate(&mut grads, ln.input, dx)?;
                }
                Op::Add { lhs, rhs } => {
                    accumulate(&mut grads, *lhs, g.clone())?;
                    accumulate(&mut grads, *rhs, g)?;
                }
                Op::Concat { lhs, rhs } => {
                    let wl = self.nodes[*lhs].width;
                    let wr = self.nodes[*rhs].width;
                    let mut gl = Vec::with_capacity(batch * wl);
                    let mut gr = Vec::with_capacity(batch * wr);
                    for b in 0..batch {
                        let row = g.row(b);
                        gl.extend_from_slice(&row[..wl]);
                        gr.extend_from_slice(&row[wl..]);
                    }
                    accumulate(&mut grads, *lhs, Tensor::from_vec(&[batch, wl], gl)?)?;
                    accumulate(&mut grads, *rhs, Tensor::from_vec(&[batch, wr], gr)?)?;
                }
            }
        }
        taps.sort_by_key(|a| a.site);
        let input_grad = grads[0].take().expect("input gradient");
        let values = pgrads
            .into_iter()
            .zip(&ids)
            .map(|(g, id)| match g {
                Some(g) => Ok(g),
                None => Tensor::zeros(self.param(*id).unwrap().shape()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Backward {
            grads: ParamGrads { ids, values },
            taps,
            input_grad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::InitSpec;
    use crate::net::activation::ActivationKind;
    use crate::net::model::ModelBuilder;
    use crate::rng::RngState;

    fn identity_relu() -> Model {
        let mut b = Model::builder(2);
        let l = b
            .linear_with(
                0,
                Tensor::identity(2).unwrap(),
                Tensor::zeros(&[2]).unwrap(),
                InitSpec::UniformFanIn { fan_in: 2 },
                InitSpec::UniformFanIn { fan_in: 2 },
            )
            .unwrap();
        let a = b.activation(l, ActivationKind::Relu).unwrap();
        b.finish(a).unwrap()
    }

    #[test]
    fn identity_relu_trace() {
        let mut m = identity_relu();
        let x = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let out = m.forward(&x).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
        let bw = m.backward(&Tensor::alloc(&[1, 2], 1.0).unwrap()).unwrap();
        assert_eq!(bw.taps.len(), 2);
        assert_eq!(bw.taps[0].activation, 1.0);
        assert_eq!(bw.taps[1].activation, 0.0);
        assert_eq!(bw.taps[1].gradient, 0.0);
    }

    #[test]
    fn zero_weight_net_is_zero_everywhere() {
        let mut b = Model::builder(3);
        let l = b
            .linear_with(
                0,
                Tensor::zeros(&[4, 3]).unwrap(),
                Tensor::zeros(&[4]).unwrap(),
                InitSpec::Constant { value: 0.0 },
                InitSpec::Constant { value: 0.0 },
            )
            .unwrap();
        let a = b.activation(l, ActivationKind::Relu).unwrap();
        let m = b.finish(a).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 9.0]]).unwrap();
        let c = m.forward_pass(&x, &[]).unwrap();
        assert!(c.value(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_with_zero_branch_is_identity() {
        let mut b = Model::builder(3);
        let l = b
            .linear_with(
                0,
                Tensor::zeros(&[3, 3]).unwrap(),
                Tensor::zeros(&[3]).unwrap(),
                InitSpec::Constant { value: 0.0 },
                InitSpec::Constant { value: 0.0 },
            )
            .unwrap();
        let s = b.add(0, l).unwrap();
        let m = b.finish(s).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.25]]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), x);
    }

    #[test]
    fn column_sum_rule_on_hand_example() {
        // h = relu(x) with x > 0, out = W h, L = sum(out) -> dL/dh_i = sum_j W[j,i].
        let w = Tensor::from_rows(&[vec![0.5, -2.0], vec![1.5, 0.25]]).unwrap();
        let mut b = Model::builder(2);
        let a = b
            .activation(ModelBuilder::INPUT, ActivationKind::Relu)
            .unwrap();
        let out = b
            .linear_with(
                a,
                w,
                Tensor::zeros(&[2]).unwrap(),
                InitSpec::UniformFanIn { fan_in: 2 },
                InitSpec::UniformFanIn { fan_in: 2 },
            )
            .unwrap();
        let mut m = b.finish(out).unwrap();
        m.forward(&Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap())
            .unwrap();
        let bw = m.backward(&Tensor::alloc(&[1, 2], 1.0).unwrap()).unwrap();
        assert_eq!(bw.taps[0].gradient, 2.0);
        assert_eq!(bw.taps[1].gradient, 1.75);
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut m = identity_relu();
        let e = m.backward(&Tensor::zeros(&[1, 2]).unwrap()).unwrap_err();
        assert!(matches!(e, PlabError::State(_)));
    }

    #[test]
    fn input_shape_checked() {
        let m = identity_relu();
        assert!(matches!(
            m.predict(&Tensor::zeros(&[1, 3]).unwrap()),
            Err(PlabError::InvalidShape(_))
        ));
    }

    #[test]
    fn overflow_detected() {
        let mut b = Model::builder(1);
        let l = b
            .linear_with(
                0,
                Tensor::alloc(&[1, 1], f64::MAX).unwrap(),
                Tensor::zeros(&[1]).unwrap(),
                InitSpec::Constant { value: 0.0 },
                InitSpec::Constant { value: 0.0 },
            )
            .unwrap();
        let m = b.finish(l).unwrap();
        let e = m
            .predict(&Tensor::alloc(&[1, 1], 10.0).unwrap())
            .unwrap_err();
        assert!(matches!(e, PlabError::NumericOverflow(_)));
    }

    #[test]
    fn deterministic_forward_backward() {
        let mut rng = RngState::new(3, 1);
        let mut b = Model::builder(4);
        let l = b.linear(0, 8, &mut rng).unwrap();
        let n = b.layer_norm(l).unwrap();
        let a = b.activation(n, ActivationKind::Swish).unwrap();
        let o = b.linear(a, 2, &mut rng).unwrap();
        let mut m = b.finish(o).unwrap();
        let x = Tensor::from_vec(&[3, 4], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let g = Tensor::alloc(&[3, 2], 0.3).unwrap();
        m.forward(&x).unwrap();
        let a1 = m.backward(&g).unwrap();
        m.forward(&x).unwrap();
        let a2 = m.backward(&g).unwrap();
        assert_eq!(a1.grads.flat(), a2.grads.flat());
        assert_eq!(a1.taps, a2.taps);
    }
}
