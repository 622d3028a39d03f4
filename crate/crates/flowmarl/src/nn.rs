//! MLP construction, forward passes, Adam, and Polyak target updates.
//!
//! Hidden layers are dense -> layer norm (optional) -> GELU; the output
//! layer is plain linear. Parameter containers are immutable values:
//! updates return new containers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub layer_norm: bool,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(in_dim: usize, hidden: &[usize], out_dim: usize, layer_norm: bool) -> Self {
        MlpSpec {
            in_dim,
            hidden: hidden.to_vec(),
            out_dim,
            layer_norm,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor, // [in, out]
    pub b: Tensor, // [out]
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,   // [dim]
    pub offset: Tensor, // [dim]
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    spec: MlpSpec,
    layers: Vec<DenseLayer>,     // hidden layers then output layer
    norms: Vec<NormParams>,      // one per hidden layer when layer_norm
}

impl MlpParams {
    /// Kaiming-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let mut dims = vec![spec.in_dim];
        dims.extend_from_slice(&spec.hidden);
        dims.push(spec.out_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut norms = Vec::new();
        for li in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[li], dims[li + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Tensor::new(
                vec![fan_in, fan_out],
                (0..fan_in * fan_out)
                    .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
                    .collect(),
            )
            .expect("init weight shape");
            let b = Tensor::zeros(vec![fan_out]);
            layers.push(DenseLayer { w, b });
            let is_hidden = li + 1 < dims.len() - 1;
            if is_hidden && spec.layer_norm {
                norms.push(NormParams {
                    gain: Tensor::full(vec![fan_out], 1.0),
                    offset: Tensor::zeros(vec![fan_out]),
                });
            }
        }
        MlpParams { spec, layers, norms }
    }

    /// All-zero parameters (useful for tests and zero-output nets).
    pub fn zeros(spec: MlpSpec) -> Self {
        let mut dims = vec![spec.in_dim];
        dims.extend_from_slice(&spec.hidden);
        dims.push(spec.out_dim);
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for li in 0..dims.len() - 1 {
            layers.push(DenseLayer {
                w: Tensor::zeros(vec![dims[li], dims[li + 1]]),
                b: Tensor::zeros(vec![dims[li + 1]]),
            });
            if li + 1 < dims.len() - 1 && spec.layer_norm {
                norms.push(NormParams {
                    gain: Tensor::full(vec![dims[li + 1]], 1.0),
                    offset: Tensor::zeros(vec![dims[li + 1]]),
                });
            }
        }
        MlpParams { spec, layers, norms }
    }

    pub fn from_parts(spec: MlpSpec, layers: Vec<DenseLayer>, norms: Vec<NormParams>) -> Result<Self> {
        let p = MlpParams { spec, layers, norms };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let mut dims = vec![self.spec.in_dim];
        dims.extend_from_slice(&self.spec.hidden);
        dims.push(self.spec.out_dim);
        if self.layers.len() != dims.len() - 1 {
            return Err(Error::shape(
                format!("{} layers", dims.len() - 1),
                format!("{} layers", self.layers.len()),
            ));
        }
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.w.shape() != [dims[li], dims[li + 1]] {
                return Err(Error::shape(
                    format!("weight [{}, {}]", dims[li], dims[li + 1]),
                    format!("weight {:?}", layer.w.shape()),
                ));
            }
            if layer.b.len() != dims[li + 1] {
                return Err(Error::shape(
                    format!("bias [{}]", dims[li + 1]),
                    format!("bias {:?}", layer.b.shape()),
                ));
            }
        }
        let want_norms = if self.spec.layer_norm { self.spec.hidden.len() } else { 0 };
        if self.norms.len() != want_norms {
            return Err(Error::shape(
                format!("{} norm layers", want_norms),
                format!("{} norm layers", self.norms.len()),
            ));
        }
        Ok(())
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut DenseLayer {
        &mut self.layers[i]
    }

    /// Canonical flat tensor order: per hidden layer w, b, (gain, offset);
    /// then output w, b. Adam state, gradients, and checkpoints all use it.
    pub fn flat_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        let n_hidden = self.spec.hidden.len();
        for li in 0..self.layers.len() {
            out.push(&self.layers[li].w);
            out.push(&self.layers[li].b);
            if li < n_hidden && self.spec.layer_norm {
                out.push(&self.norms[li].gain);
                out.push(&self.norms[li].offset);
            }
        }
        out
    }

    fn flat_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let n_hidden = self.spec.hidden.len();
        let layer_norm = self.spec.layer_norm;
        let mut out: Vec<&mut Tensor> = Vec::new();
        let norms = &mut self.norms;
        let mut norm_iter = norms.iter_mut();
        for (li, layer) in self.layers.iter_mut().enumerate() {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
            if li < n_hidden && layer_norm {
                let np = norm_iter.next().expect("norm params present");
                out.push(&mut np.gain);
                out.push(&mut np.offset);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.flat_tensors().iter().map(|t| t.len()).sum()
    }

    /// Copy of the parameters with one coordinate of one flat tensor
    /// shifted by `delta`. Used by finite-difference checks.
    pub fn perturbed(&self, tensor_idx: usize, coord: usize, delta: f64) -> MlpParams {
        let mut out = self.clone();
        let mut flat = out.flat_tensors_mut();
        flat[tensor_idx].data_mut()[coord] += delta;
        drop(flat);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.flat_tensors().iter().all(|t| t.all_finite())
    }

    /// Plain batched forward pass: input [batch, in_dim] -> [batch, out_dim].
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.spec.in_dim {
            return Err(Error::shape(
                format!("input with {} columns", self.spec.in_dim),
                format!("input with {} columns", input.cols()),
            ));
        }
        let mut x = input.clone();
        let n_hidden = self.spec.hidden.len();
        for (li, layer) in self.layers.iter().enumerate() {
            x = tensor::add_bias(&tensor::matmul(&x, &layer.w)?, &layer.b)?;
            if li < n_hidden {
                if self.spec.layer_norm {
                    let (normed, _) = tensor::layer_norm_rows(&x)?;
                    let np = &self.norms[li];
                    let n = normed.cols();
                    let mut y = normed;
                    for r in 0..y.rows() {
                        let row = &mut y.data_mut()[r * n..(r + 1) * n];
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = *v * np.gain.data()[j] + np.offset.data()[j];
                        }
                    }
                    x = y;
                }
                x = tensor::unary(&x, tensor::gelu);
            }
        }
        Ok(x)
    }

    /// Insert this network's parameters on a tape.
    pub fn insert_on_tape(&self, tape: &mut Tape, trainable: bool) -> MlpNodes {
        let push = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut weights = Vec::new();
        for layer in &self.layers {
            let w = push(tape, &layer.w);
            // biases are 1-d; the tape's add_bias wants them that way
            let b = push(tape, &layer.b);
            weights.push((w, b));
        }
        let mut norms = Vec::new();
        for np in &self.norms {
            let g = push(tape, &np.gain);
            let o = push(tape, &np.offset);
            norms.push((g, o));
        }
        MlpNodes {
            spec: self.spec.clone(),
            layers: weights,
            norms,
        }
    }

    /// Gradient tensors in canonical flat order (zeros where untouched).
    pub fn grads_from_tape(&self, tape: &Tape, nodes: &MlpNodes) -> Vec<Tensor> {
        nodes.flat_ids().iter().map(|&id| tape.grad(id)).collect()
    }
}

/// Tape handles for one network's parameters.
pub struct MlpNodes {
    spec: MlpSpec,
    layers: Vec<(NodeId, NodeId)>,
    norms: Vec<(NodeId, NodeId)>,
}

impl MlpNodes {
    pub fn forward(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let mut x = input;
        let n_hidden = self.spec.hidden.len();
        for (li, &(w, b)) in self.layers.iter().enumerate() {
            x = tape.matmul(x, w)?;
            x = tape.add_bias(x, b)?;
            if li < n_hidden {
                if self.spec.layer_norm {
                    let (g, o) = self.norms[li];
                    x = tape.layer_norm(x, g, o)?;
                }
                x = tape.gelu(x);
            }
        }
        Ok(x)
    }

    /// Parameter node ids in canonical flat order.
    pub fn flat_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let n_hidden = self.spec.hidden.len();
        for (li, &(w, b)) in self.layers.iter().enumerate() {
            out.push(w);
            out.push(b);
            if li < n_hidden && self.spec.layer_norm {
                let (g, o) = self.norms[li];
                out.push(g);
                out.push(o);
            }
        }
        out
    }
}

/// Evaluate a scalar loss built on a fresh tape and return its value along
/// with the gradient tensors for `params`, in canonical flat order.
pub fn grad<F>(params: &MlpParams, loss_fn: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &MlpNodes) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let nodes = params.insert_on_tape(&mut tape, true);
    let loss = loss_fn(&mut tape, &nodes)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    tape.backward(loss)?;
    Ok((value, params.grads_from_tape(&tape, &nodes)))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub lr: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams, lr: f64, eps: f64) -> Self {
        let m = params
            .flat_tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState {
            m,
            v,
            step: 0,
            lr,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Returns new params and state.
pub fn adam_step(
    params: &MlpParams,
    grads: &[Tensor],
    state: &AdamState,
) -> Result<(MlpParams, AdamState)> {
    let tensors = params.flat_tensors();
    if grads.len() != tensors.len() {
        return Err(Error::shape(
            format!("{} gradient tensors", tensors.len()),
            format!("{} gradient tensors", grads.len()),
        ));
    }
    for (g, t) in grads.iter().zip(tensors.iter()) {
        if g.shape() != t.shape() {
            return Err(Error::shape(
                format!("{:?}", t.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
    }
    let mut new_params = params.clone();
    let mut new_state = state.clone();
    new_state.step += 1;
    let t = new_state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    {
        let mut flat = new_params.flat_tensors_mut();
        for (i, g) in grads.iter().enumerate() {
            let m = new_state.m[i].data_mut();
            let v = new_state.v[i].data_mut();
            let p = flat[i].data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            }
        }
    }
    Ok((new_params, new_state))
}

/// target' = (1 - tau) * target + tau * online, elementwise.
pub fn polyak_update(target: &MlpParams, online: &MlpParams, tau: f64) -> Result<MlpParams> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "polyak tau must lie in [0, 1], got {}",
            tau
        )));
    }
    if target.spec != online.spec {
        return Err(Error::shape(
            format!("{:?}", target.spec),
            format!("{:?}", online.spec),
        ));
    }
    let mut out = target.clone();
    {
        let online_flat = online.flat_tensors();
        let mut flat = out.flat_tensors_mut();
        for (i, dst) in flat.iter_mut().enumerate() {
            let src = online_flat[i].data();
            for (d, &o) in dst.data_mut().iter_mut().zip(src.iter()) {
                *d = (1.0 - tau) * *d + tau * o;
            }
        }
    }
    Ok(out)
}
