//! Feed-forward network with SiLU hidden layers and a linear output,
//! evaluated on column batches (`input_dim × batch`).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseJson", into = "DenseJson")]
pub struct Dense {
    /// `out × in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct DenseJson {
    rows: usize,
    cols: usize,
    /// row-major
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl From<Dense> for DenseJson {
    fn from(d: Dense) -> Self {
        Self {
            rows: d.weight.nrows(),
            cols: d.weight.ncols(),
            weight: d.weight.transpose().as_slice().to_vec(),
            bias: d.bias.as_slice().to_vec(),
        }
    }
}

impl TryFrom<DenseJson> for Dense {
    type Error = String;

    fn try_from(j: DenseJson) -> std::result::Result<Self, String> {
        if j.weight.len() != j.rows * j.cols || j.bias.len() != j.rows {
            return Err(format!("layer shape {}x{} does not match data", j.rows, j.cols));
        }
        Ok(Dense {
            weight: DMatrix::from_row_slice(j.rows, j.cols, &j.weight),
            bias: DVector::from_vec(j.bias),
        })
    }
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Dense {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }

    fn affine(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weight * x;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        z
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Layer inputs and pre-activations kept for the backward pass.
pub struct ForwardCache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// `widths = [input, hidden.., output]`; weights drawn with variance
    /// `1/fan_in`, biases zero.
    pub fn new<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| {
                        let n: f64 = StandardNormal.sample(rng);
                        n * scale
                    }),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::invalid(format!("layer {k}: bias length mismatch")));
            }
            if k > 0 && layers[k - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::invalid(format!("layer {k}: input width mismatch")));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.ncols()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, ForwardCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&a);
            inputs.push(a);
            a = if k == last { z.clone() } else { z.map(silu) };
            pre.push(z);
        }
        (a, ForwardCache { inputs, pre })
    }

    /// Parameter gradients given `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DMatrix<f64>) -> Mlp {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let weight = &delta * cache.inputs[k].transpose();
            let bias = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            grads.push(Dense { weight, bias });
            if k > 0 {
                let back = layer.weight.transpose() * &delta;
                delta = back.zip_map(&cache.pre[k - 1], |g, z| g * silu_grad(z));
            }
        }
        grads.reverse();
        Mlp { layers: grads }
    }

    /// Visits every parameter alongside the matching entries of `others`,
    /// which must share this network's shapes.
    pub(crate) fn zip_params_mut<F>(&mut self, others: [&mut Mlp; 3], mut f: F)
    where
        F: FnMut(&mut f64, &mut f64, &mut f64, &mut f64),
    {
        let [a, b, c] = others;
        for (((p, g), m), v) in self
            .layers
            .iter_mut()
            .zip(a.layers.iter_mut())
            .zip(b.layers.iter_mut())
            .zip(c.layers.iter_mut())
        {
            let ws = p
                .weight
                .iter_mut()
                .zip(g.weight.iter_mut())
                .zip(m.weight.iter_mut())
                .zip(v.weight.iter_mut());
            let bs = p
                .bias
                .iter_mut()
                .zip(g.bias.iter_mut())
                .zip(m.bias.iter_mut())
                .zip(v.bias.iter_mut());
            for (((p, g), m), v) in ws.chain(bs) {
                f(p, g, m, v);
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::invalid("parameter vector length mismatch"));
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for p in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *p = *it.next().unwrap_or(&0.0);
            }
        }
        Ok(())
    }
}

/// Mean over columns of the squared distance between `out` and `target`,
/// with its gradient with respect to `out`.
pub fn mse_with_grad(out: &DMatrix<f64>, target: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let batch = out.ncols().max(1) as f64;
    let diff = out - target;
    let loss = diff.norm_squared() / batch;
    (loss, diff * (2.0 / batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;
    use rand::Rng;

    fn loss_at(net: &Mlp, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        mse_with_grad(&net.forward(x), y).0
    }

    fn check_gradient(widths: &[usize], batch: usize, seed: u64) {
        let mut rng = stream_rng(seed, "gradcheck", 0);
        let mut net = Mlp::new(widths, &mut rng).unwrap();
        // non-zero biases so every parameter path is exercised
        let mut p = net.params();
        for v in &mut p {
            *v += rng.random_range(-0.5..0.5);
        }
        net.set_params(&p).unwrap();
        let x = DMatrix::from_fn(widths[0], batch, |_, _| rng.random_range(-1.5..1.5));
        let y = DMatrix::from_fn(*widths.last().unwrap(), batch, |_, _| rng.random_range(-1.0..1.0));

        let (out, cache) = net.forward_cached(&x);
        let (_, g_out) = mse_with_grad(&out, &y);
        let analytic = net.backward(&cache, &g_out).params();

        let h = 1e-5;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus[i] += h;
            let mut minus = p.clone();
            minus[i] -= h;
            let mut np = net.clone();
            np.set_params(&plus).unwrap();
            let mut nm = net.clone();
            nm.set_params(&minus).unwrap();
            let fd = (loss_at(&np, &x, &y) - loss_at(&nm, &x, &y)) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: analytic {} fd {fd} rel {rel}", analytic[i]);
        }
    }

    #[test]
    fn gradient_matches_central_differences_on_ten_parameters() {
        // 1 -> 3 -> 1: 3 + 3 + 3 + 1 = 10 parameters
        let net = Mlp::new(&[1, 3, 1], &mut stream_rng(0, "x", 0)).unwrap();
        assert_eq!(net.param_count(), 10);
        for seed in 0..5 {
            check_gradient(&[1, 3, 1], 4, seed);
        }
    }

    #[test]
    fn gradient_matches_on_deeper_net() {
        check_gradient(&[4, 5, 6, 3], 7, 11);
    }

    #[test]
    fn batch_columns_are_independent() {
        let mut rng = stream_rng(2, "batch", 0);
        let net = Mlp::new(&[3, 8, 8, 2], &mut rng).unwrap();
        let x = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let all = net.forward(&x);
        for c in 0..5 {
            let one = net.forward(&x.columns(c, 1).into_owned());
            assert!((one - all.columns(c, 1)).abs().max() < 1e-14);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let net = Mlp::new(&[3, 4, 2], &mut stream_rng(5, "json", 0)).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&text).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = stream_rng(0, "x", 0);
        assert!(Mlp::new(&[3], &mut rng).is_err());
        assert!(Mlp::new(&[3, 0, 2], &mut rng).is_err());
        let a = Mlp::new(&[3, 4], &mut rng).unwrap();
        let b = Mlp::new(&[5, 2], &mut rng).unwrap();
        let layers = [a.layers()[0].clone(), b.layers()[0].clone()].to_vec();
        assert!(Mlp::from_layers(layers).is_err());
    }
}
