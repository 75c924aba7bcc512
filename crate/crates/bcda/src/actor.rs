//! Feedforward networks trained by explicit backpropagation.
//!
//! The policy network maps observations to bounded actions through three
//! ReLU hidden layers of 256 units and a tanh output scaled per dimension.
//! The same machinery with a linear head serves as the baseline's deep
//! critic. Gradients are computed by hand and applied with Adam.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

const HIDDEN: [usize; 3] = [256, 256, 256];
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Output nonlinearity of the final layer.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputSquash {
    /// `bound ⊙ tanh(p)`, keeping each output inside its bound.
    BoundedTanh(Array1<f64>),
    Linear,
}

/// Per-parameter gradients, shaped like the network's weights and biases.
pub struct MlpGrads {
    pub d_weights: Vec<Array2<f64>>,
    pub d_biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.d_weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.d_biases {
            b.mapv_inplace(|v| v * factor);
        }
    }
}

struct AdamState {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    step: u64,
}

/// Layered feedforward network with its optimizer state.
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    squash: OutputSquash,
    opt: AdamState,
}

impl Mlp {
    /// Policy network: observations in, bounded actions out.
    pub fn actor<R: Rng>(
        input_dim: usize,
        action_dim: usize,
        action_bound: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        if action_bound.len() != action_dim {
            return Err(Error::dims("actor bounds", action_dim, action_bound.len()));
        }
        if action_bound.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::Config("action bounds must be positive".into()));
        }
        let sizes = [&[input_dim][..], &HIDDEN, &[action_dim]].concat();
        Self::with_layers(&sizes, OutputSquash::BoundedTanh(Array1::from_vec(action_bound.to_vec())), rng)
    }

    /// Scalar-valued network with a linear head; the baseline's Q critic.
    pub fn scalar_critic<R: Rng>(input_dim: usize, rng: &mut R) -> Result<Self> {
        let sizes = [&[input_dim][..], &HIDDEN, &[1]].concat();
        Self::with_layers(&sizes, OutputSquash::Linear, rng)
    }

    /// General constructor: weights uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)],
    /// biases and optimizer moments zero.
    pub fn with_layers<R: Rng>(sizes: &[usize], squash: OutputSquash, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        if let OutputSquash::BoundedTanh(b) = &squash {
            if b.len() != *sizes.last().unwrap() {
                return Err(Error::dims("squash bounds", sizes.last().unwrap(), b.len()));
            }
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.random_range(-limit..limit)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        let opt = AdamState {
            m_w: weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_w: weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_b: biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            v_b: biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            step: 0,
        };
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
            squash,
            opt,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }
    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }
    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }
    pub fn squash(&self) -> &OutputSquash {
        &self.squash
    }
    pub(crate) fn parameters(&self) -> (&[Array2<f64>], &[Array1<f64>]) {
        (&self.weights, &self.biases)
    }
    pub(crate) fn parameters_mut(&mut self) -> (&mut [Array2<f64>], &mut [Array1<f64>]) {
        (&mut self.weights, &mut self.biases)
    }
    pub(crate) fn optimizer_step_count(&self) -> u64 {
        self.opt.step
    }

    /// Deep copy with fresh optimizer moments; used to spawn target networks.
    pub fn clone_for_target(&self) -> Mlp {
        Mlp {
            sizes: self.sizes.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            squash: self.squash.clone(),
            opt: AdamState {
                m_w: self.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
                v_w: self.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
                m_b: self.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
                v_b: self.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
                step: 0,
            },
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims("mlp input", self.input_dim(), x.ncols()));
        }
        Ok(())
    }

    /// Batch forward pass; rows are independent samples.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut a = x.to_owned();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut p = a.dot(w);
            p += b;
            if l < last {
                p.mapv_inplace(|v| v.max(0.0));
            } else {
                match &self.squash {
                    OutputSquash::BoundedTanh(bound) => {
                        p.mapv_inplace(f64::tanh);
                        p *= &bound.view().insert_axis(Axis(0));
                    }
                    OutputSquash::Linear => {}
                }
            }
            a = p;
        }
        Ok(a)
    }

    pub fn forward_one(&self, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
        let out = self.forward(&x.view().insert_axis(Axis(0)))?;
        Ok(out.row(0).to_owned())
    }

    /// Backpropagates `L = sum_i <upstream_i, f(x_i)>`, returning parameter
    /// gradients and the gradient of `L` with respect to each input row.
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        upstream: &ArrayView2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        self.check_input(x)?;
        if upstream.nrows() != x.nrows() || upstream.ncols() != self.output_dim() {
            return Err(Error::dims(
                "mlp upstream",
                format!("{}x{}", x.nrows(), self.output_dim()),
                format!("{}x{}", upstream.nrows(), upstream.ncols()),
            ));
        }
        let last = self.weights.len() - 1;
        // Forward with cached pre-activations.
        let mut activations = vec![x.to_owned()];
        let mut pres = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut p = activations[l].dot(w);
            p += b;
            pres.push(p.clone());
            if l < last {
                p.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(p);
        }

        // Output-layer delta: dL/dp_last.
        let mut delta = match &self.squash {
            OutputSquash::BoundedTanh(bound) => {
                let mut d = pres[last].mapv(f64::tanh);
                d.mapv_inplace(|t| 1.0 - t * t);
                d *= &bound.view().insert_axis(Axis(0));
                d *= upstream;
                d
            }
            OutputSquash::Linear => upstream.to_owned(),
        };

        let mut d_weights = vec![Array2::zeros((0, 0)); self.weights.len()];
        let mut d_biases = vec![Array1::zeros(0); self.weights.len()];
        for l in (0..=last).rev() {
            d_weights[l] = activations[l].t().dot(&delta);
            d_biases[l] = delta.sum_axis(Axis(0));
            let mut back = delta.dot(&self.weights[l].t());
            if l > 0 {
                // ReLU subgradient at exactly zero is taken as zero.
                back.zip_mut_with(&pres[l - 1], |g, p| {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = back;
        }
        Ok((
            MlpGrads {
                d_weights,
                d_biases,
            },
            delta,
        ))
    }

    /// Deterministic-policy-gradient step for the actor: gradients of
    /// `-(1/N) sum_i <dq_da_i, policy(s_i)>`, i.e. ascent on the critic value
    /// expressed as a descent direction.
    pub fn backward_chain(
        &self,
        states: &ArrayView2<f64>,
        dq_da: &ArrayView2<f64>,
    ) -> Result<MlpGrads> {
        let scale = -1.0 / states.nrows().max(1) as f64;
        let scaled = dq_da.mapv(|v| v * scale);
        let (grads, _) = self.backward(states, &scaled.view())?;
        Ok(grads)
    }

    /// One Adam update with bias correction.
    pub fn adam_step(&mut self, grads: &MlpGrads, lr: f64) -> Result<()> {
        if grads.d_weights.len() != self.weights.len() {
            return Err(Error::dims("adam layers", self.weights.len(), grads.d_weights.len()));
        }
        self.opt.step += 1;
        let t = self.opt.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for l in 0..self.weights.len() {
            if grads.d_weights[l].dim() != self.weights[l].dim() {
                return Err(Error::dims(
                    "adam weight shape",
                    format!("{:?}", self.weights[l].dim()),
                    format!("{:?}", grads.d_weights[l].dim()),
                ));
            }
            update_adam(
                &mut self.weights[l],
                &grads.d_weights[l],
                &mut self.opt.m_w[l],
                &mut self.opt.v_w[l],
                lr,
                bc1,
                bc2,
            );
            update_adam(
                &mut self.biases[l],
                &grads.d_biases[l],
                &mut self.opt.m_b[l],
                &mut self.opt.v_b[l],
                lr,
                bc1,
                bc2,
            );
        }
        Ok(())
    }

    /// Binary image in the same conventions as the broad network: dimension
    /// headers followed by row-major 64-bit little-endian reals, optimizer
    /// state included.
    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        use crate::io;
        io::write_magic(w, b"MLP1")?;
        io::write_u64(w, self.sizes.len() as u64)?;
        for s in &self.sizes {
            io::write_u64(w, *s as u64)?;
        }
        match &self.squash {
            OutputSquash::Linear => io::write_u64(w, 0)?,
            OutputSquash::BoundedTanh(b) => {
                io::write_u64(w, 1)?;
                io::write_vector(w, b)?;
            }
        }
        for (weight, bias) in self.weights.iter().zip(&self.biases) {
            io::write_matrix(w, weight)?;
            io::write_vector(w, bias)?;
        }
        io::write_u64(w, self.opt.step)?;
        for l in 0..self.weights.len() {
            io::write_matrix(w, &self.opt.m_w[l])?;
            io::write_matrix(w, &self.opt.v_w[l])?;
            io::write_vector(w, &self.opt.m_b[l])?;
            io::write_vector(w, &self.opt.v_b[l])?;
        }
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(r: &mut R) -> Result<Self> {
        use crate::io;
        io::read_magic(r, b"MLP1")?;
        let n_sizes = io::read_u64(r)? as usize;
        if n_sizes < 2 || n_sizes > 64 {
            return Err(Error::Config(format!("implausible layer count {n_sizes}")));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(io::read_u64(r)? as usize);
        }
        let squash = match io::read_u64(r)? {
            0 => OutputSquash::Linear,
            1 => OutputSquash::BoundedTanh(io::read_vector(r)?),
            tag => return Err(Error::Config(format!("unknown squash tag {tag}"))),
        };
        let layers = n_sizes - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let w = io::read_matrix(r)?;
            let b = io::read_vector(r)?;
            if w.dim() != (sizes[l], sizes[l + 1]) || b.len() != sizes[l + 1] {
                return Err(Error::dims(
                    "mlp read layer",
                    format!("{}x{}", sizes[l], sizes[l + 1]),
                    format!("{:?}/{}", w.dim(), b.len()),
                ));
            }
            weights.push(w);
            biases.push(b);
        }
        let step = io::read_u64(r)?;
        let mut opt = AdamState {
            m_w: Vec::with_capacity(layers),
            v_w: Vec::with_capacity(layers),
            m_b: Vec::with_capacity(layers),
            v_b: Vec::with_capacity(layers),
            step,
        };
        for l in 0..layers {
            let m_w = io::read_matrix(r)?;
            let v_w = io::read_matrix(r)?;
            let m_b = io::read_vector(r)?;
            let v_b = io::read_vector(r)?;
            if m_w.dim() != weights[l].dim() || v_w.dim() != weights[l].dim() {
                return Err(Error::dims(
                    "mlp read moments",
                    format!("{:?}", weights[l].dim()),
                    format!("{:?}", m_w.dim()),
                ));
            }
            opt.m_w.push(m_w);
            opt.v_w.push(v_w);
            opt.m_b.push(m_b);
            opt.v_b.push(v_b);
        }
        Ok(Mlp {
            sizes,
            weights,
            biases,
            squash,
            opt,
        })
    }

    /// Soft target update: every parameter `p <- rho p + (1 - rho) p_src`.
    pub fn polyak_from(&mut self, source: &Mlp, rho: f64) -> Result<()> {
        if self.sizes != source.sizes {
            return Err(Error::dims(
                "polyak architecture",
                format!("{:?}", source.sizes),
                format!("{:?}", self.sizes),
            ));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("rho must be in [0, 1], got {rho}")));
        }
        for (t, s) in self.weights.iter_mut().zip(&source.weights) {
            t.zip_mut_with(s, |a, b| *a = rho * *a + (1.0 - rho) * b);
        }
        for (t, s) in self.biases.iter_mut().zip(&source.biases) {
            t.zip_mut_with(s, |a, b| *a = rho * *a + (1.0 - rho) * b);
        }
        Ok(())
    }
}

fn update_adam<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPS);
        });
}
