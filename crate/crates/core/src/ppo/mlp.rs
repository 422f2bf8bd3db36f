//! Fully connected network with tanh hidden layers and a linear output,
//! plus its reverse-mode gradient.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters live in one flat buffer, layer by layer: the weight matrix
/// (`out x in`, row-major) followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    #[serde(skip)]
    version: u64,
}

/// Activations recorded by a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer: the network input, then each hidden activation.
    inputs: Vec<Array2<f64>>,
    version: u64,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
            version: 0,
        })
    }

    /// Glorot-uniform weights and zero biases; the last layer's weights are
    /// multiplied by `output_scale`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], output_scale: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let last = net.layers() - 1;
        let mut offset = 0;
        for l in 0..net.layers() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l == last { output_scale } else { 1.0 };
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit) * scale;
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters for sizes {sizes:?}, expected {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters. Invalidates forward caches taken earlier.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offset(l);
        let w = ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_in * fan_out])
            .expect("layer slice has the right length");
        let b = ArrayView1::from(&self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]);
        (w, b)
    }

    /// Forward pass over a batch (one row per sample).
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if input.ncols() != self.input_len() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                input.ncols(),
                self.input_len()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers());
        let mut a = input.to_owned();
        for l in 0..self.layers() {
            let (w, b) = self.layer(l);
            let mut z = a.dot(&w.t());
            z += &b;
            inputs.push(a);
            if l + 1 < self.layers() {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        Ok((
            a,
            ForwardCache {
                inputs,
                version: self.version,
            },
        ))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Single-sample convenience wrapper.
    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.predict(x)?.into_raw_vec_and_offset().0)
    }

    /// Gradient of `sum(output * output_grad)` with respect to every
    /// parameter, in the same flat layout as [`Mlp::params`].
    pub fn backward(&self, cache: &ForwardCache, output_grad: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if cache.version != self.version || cache.inputs.len() != self.layers() {
            return Err(Error::Shape("forward cache is stale".into()));
        }
        let batch = cache.inputs[0].nrows();
        if output_grad.dim() != (batch, self.output_len()) {
            return Err(Error::Shape(format!(
                "output gradient is {:?}, expected ({batch}, {})",
                output_grad.dim(),
                self.output_len()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut g = output_grad.to_owned();
        for l in (0..self.layers()).rev() {
            let (w, _) = self.layer(l);
            let a = &cache.inputs[l];
            let dw = g.t().dot(a);
            let db = g.sum_axis(Axis(0));
            let off = self.offset(l);
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            // `dot` may hand back a column-major result; copy in logical order.
            for (dst, src) in grads[off..off + fan_in * fan_out + fan_out].iter_mut().zip(dw.iter().chain(db.iter())) {
                *dst = *src;
            }
            if l > 0 {
                let mut prev = g.dot(&w);
                prev.zip_mut_with(a, |gp, &act| *gp *= 1.0 - act * act);
                g = prev;
            }
        }
        Ok(grads)
    }
}

/// Stacks equal-length rows into a batch matrix.
pub fn stack_rows<'a, I>(rows: I, width: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    let mut count = 0;
    for r in rows {
        debug_assert_eq!(r.len(), width);
        data.extend_from_slice(r);
        count += 1;
    }
    Array2::from_shape_vec((count, width), data).expect("rows share a width")
}
