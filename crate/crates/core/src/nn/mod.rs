//! Dense multilayer perceptrons over flat parameter vectors.
//!
//! Every network in the crate stores its parameters as one contiguous slice:
//! for each layer, the weight matrix (row-major, `outputs x inputs`) followed
//! by the bias. Keeping parameters flat lets the hypernetwork emit a head's
//! parameters directly and lets the optimizers treat every model uniformly.

mod optim;

pub use optim::{cosine_lr, Adam, LrSchedule, Optimizer, OptimizerKind, SgdMomentum};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Elementwise nonlinearity applied after a dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Sigmoid,
    Silu,
    Tanh,
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(z: T) -> T {
    // log(1 + e^z) without overflow for large |z|
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(T::zero()),
            Activation::Softplus => softplus(z),
            Activation::Sigmoid => sigmoid(z),
            Activation::Silu => z * sigmoid(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation `z`, given `y = apply(z)`.
    #[inline]
    pub fn derivative<T: Real>(self, z: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus => sigmoid(z),
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Silu => {
                let s = sigmoid(z);
                s + z * s * (T::one() - s)
            }
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// One fully connected layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Layer {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.outputs
    }

    /// Computes `rows` outputs. `pre` receives the affine result, `post` the activation.
    pub fn forward<T: Real>(&self, params: &[T], input: &[T], rows: usize, pre: &mut [T], post: &mut [T]) {
        let (ni, no) = (self.inputs, self.outputs);
        let (w, b) = params[..self.param_count()].split_at(self.weight_count());
        for r in 0..rows {
            let x = &input[r * ni..(r + 1) * ni];
            let z = &mut pre[r * no..(r + 1) * no];
            for ((zo, wrow), bo) in z.iter_mut().zip(w.chunks_exact(ni)).zip(b) {
                *zo = *bo + dot(wrow, x);
            }
            let y = &mut post[r * no..(r + 1) * no];
            for (yo, zo) in y.iter_mut().zip(z.iter()) {
                *yo = self.activation.apply(*zo);
            }
        }
    }

    /// Backpropagates `d_post` (overwritten with the pre-activation gradient).
    ///
    /// Parameter gradients accumulate into `grad`; the input gradient is
    /// accumulated into `d_input` when present.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        input: &[T],
        pre: &[T],
        post: &[T],
        d_post: &mut [T],
        rows: usize,
        grad: &mut [T],
        mut d_input: Option<&mut [T]>,
    ) {
        let (ni, no) = (self.inputs, self.outputs);
        let w = &params[..self.weight_count()];
        let (gw, gb) = grad[..self.param_count()].split_at_mut(self.weight_count());
        for r in 0..rows {
            let x = &input[r * ni..(r + 1) * ni];
            for o in 0..no {
                let k = r * no + o;
                let dz = d_post[k] * self.activation.derivative(pre[k], post[k]);
                d_post[k] = dz;
                if dz == T::zero() {
                    continue;
                }
                gb[o] += dz;
                axpy(&mut gw[o * ni..(o + 1) * ni], dz, x);
                if let Some(dx) = d_input.as_deref_mut() {
                    axpy(&mut dx[r * ni..(r + 1) * ni], dz, &w[o * ni..(o + 1) * ni]);
                }
            }
        }
    }
}

/// Layer stack of a multilayer perceptron.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub layers: Vec<Layer>,
}

/// Intermediate values of a forward pass, needed for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub rows: usize,
    pub input: Vec<T>,
    pub pre: Vec<Vec<T>>,
    pub post: Vec<Vec<T>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.post.last().map(Vec::as_slice).unwrap_or(&self.input)
    }
}

impl MlpShape {
    /// Builds `inputs -> hidden... -> outputs` with one activation for hidden layers.
    pub fn new(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = inputs;
        for &h in hidden {
            layers.push(Layer::new(prev, h, hidden_act));
            prev = h;
        }
        layers.push(Layer::new(prev, outputs, output_act));
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("nonempty").outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Start offset of each layer's parameters within the flat vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|l| {
                let off = acc;
                acc += l.param_count();
                off
            })
            .collect()
    }

    /// Uniform fan-in initialization with zero biases.
    ///
    /// With `zero_last` the final layer starts at zero, so the network's
    /// initial output is exactly its output activation at zero.
    pub fn init<T: Real, R: Rng>(&self, rng: &mut R, zero_last: bool) -> Vec<T> {
        let mut params = Vec::with_capacity(self.param_count());
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let gain = match layer.activation {
                Activation::Relu | Activation::Softplus | Activation::Silu => 6.0,
                _ => 3.0,
            };
            let bound = (gain / layer.inputs as f64).sqrt();
            for _ in 0..layer.weight_count() {
                let v = if zero_last && i + 1 == n {
                    0.0
                } else {
                    rng.gen_range(-bound..bound)
                };
                params.push(T::lit(v));
            }
            params.extend(std::iter::repeat_n(T::zero(), layer.outputs));
        }
        params
    }

    pub fn forward<T: Real>(&self, params: &[T], input: &[T], rows: usize) -> Trace<T> {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(input.len(), rows * self.inputs());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            let mut z = vec![T::zero(); rows * layer.outputs];
            let mut y = vec![T::zero(); rows * layer.outputs];
            let x = post.last().map(Vec::as_slice).unwrap_or(input);
            layer.forward(&params[off..], x, rows, &mut z, &mut y);
            off += layer.param_count();
            pre.push(z);
            post.push(y);
        }
        Trace {
            rows,
            input: input.to_vec(),
            pre,
            post,
        }
    }

    /// Reverse pass. `d_out` is the gradient of the loss w.r.t. the network output.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        trace: &Trace<T>,
        d_out: &[T],
        grad: &mut [T],
        d_input: Option<&mut [T]>,
    ) {
        let offsets = self.layer_offsets();
        let rows = trace.rows;
        let mut d = d_out.to_vec();
        let mut d_input = d_input;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            let off = offsets[l];
            let want_dx = l > 0 || d_input.is_some();
            let mut dx = if want_dx {
                vec![T::zero(); rows * layer.inputs]
            } else {
                Vec::new()
            };
            layer.backward(
                &params[off..],
                x,
                &trace.pre[l],
                &trace.post[l],
                &mut d,
                rows,
                &mut grad[off..],
                if want_dx { Some(dx.as_mut_slice()) } else { None },
            );
            if l == 0 {
                if let Some(out) = d_input.as_deref_mut() {
                    for (o, v) in out.iter_mut().zip(&dx) {
                        *o += *v;
                    }
                }
            }
            d = dx;
        }
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}
