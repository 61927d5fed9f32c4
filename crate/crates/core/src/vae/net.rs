//! Fixed MLP with a diagonal-Gaussian head and hand-written reverse- and
//! forward-mode derivatives.
//!
//! Activations are stored feature-major: a batch is a `features × batch`
//! matrix, one sample per column.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// out × in
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Linear {
            weight: DMatrix::from_fn(output, input, |_, _| rng.random_range(-bound..bound)),
            bias: DVector::from_fn(output, |_, _| rng.random_range(-bound..bound)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.weight * x;
        for mut col in y.column_iter_mut() {
            col += &self.bias;
        }
        y
    }

    /// Returns dX and accumulates parameter gradients into `grad`.
    fn backward(&self, x: &DMatrix<f64>, dy: &DMatrix<f64>, grad: &mut Linear) -> DMatrix<f64> {
        grad.weight += dy * x.transpose();
        for col in dy.column_iter() {
            grad.bias += col;
        }
        self.weight.transpose() * dy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: DVector<f64>,
    pub shift: DVector<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: DVector::from_element(dim, 1.0),
            shift: DVector::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        LayerNorm {
            gain: DVector::zeros(dim),
            shift: DVector::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub linear: Linear,
    pub norm: LayerNorm,
}

/// `[linear → layer norm → GELU] * n` followed by mean and log-variance heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMlp {
    pub blocks: Vec<Block>,
    pub mean_head: Linear,
    pub logvar_head: Linear,
}

struct BlockCache {
    input: DMatrix<f64>,
    normalized: DMatrix<f64>,
    inv_std: Vec<f64>,
    /// Layer-norm output, i.e. the GELU input.
    pre_activation: DMatrix<f64>,
}

pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    trunk_output: DMatrix<f64>,
}

/// Shapes of every parameter tensor, in `tensors()` order.
pub type TensorShape = (usize, usize);

impl GaussianMlp {
    pub fn init<R: Rng>(input: usize, widths: &[usize], output: usize, rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = input;
        for &w in widths {
            blocks.push(Block {
                linear: Linear::init(prev, w, rng),
                norm: LayerNorm::new(w),
            });
            prev = w;
        }
        GaussianMlp {
            blocks,
            mean_head: Linear::init(prev, output, rng),
            logvar_head: Linear::init(prev, output, rng),
        }
    }

    /// A network of the same shape with every parameter zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        GaussianMlp {
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    linear: Linear::zeros(b.linear.input_dim(), b.linear.output_dim()),
                    norm: LayerNorm::zeros(b.norm.gain.len()),
                })
                .collect(),
            mean_head: Linear::zeros(self.mean_head.input_dim(), self.mean_head.output_dim()),
            logvar_head: Linear::zeros(self.logvar_head.input_dim(), self.logvar_head.output_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.blocks
            .first()
            .map(|b| b.linear.input_dim())
            .unwrap_or_else(|| self.mean_head.input_dim())
    }

    pub fn output_dim(&self) -> usize {
        self.mean_head.output_dim()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            out.push(b.linear.weight.as_slice());
            out.push(b.linear.bias.as_slice());
            out.push(b.norm.gain.as_slice());
            out.push(b.norm.shift.as_slice());
        }
        for head in [&self.mean_head, &self.logvar_head] {
            out.push(head.weight.as_slice());
            out.push(head.bias.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(b.linear.weight.as_mut_slice());
            out.push(b.linear.bias.as_mut_slice());
            out.push(b.norm.gain.as_mut_slice());
            out.push(b.norm.shift.as_mut_slice());
        }
        for head in [&mut self.mean_head, &mut self.logvar_head] {
            out.push(head.weight.as_mut_slice());
            out.push(head.bias.as_mut_slice());
        }
        out
    }

    /// (rows, cols) of each tensor; vectors are reported as n × 1.
    pub fn shapes(&self) -> Vec<TensorShape> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.linear.weight.shape());
            out.push((b.linear.bias.len(), 1));
            out.push((b.norm.gain.len(), 1));
            out.push((b.norm.shift.len(), 1));
        }
        for head in [&self.mean_head, &self.logvar_head] {
            out.push(head.weight.shape());
            out.push((head.bias.len(), 1));
        }
        out
    }

    /// Batched forward pass. Returns `(mean, raw_logvar, cache)`.
    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, ForwardCache) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            let pre = block.linear.forward(&h);
            let n = pre.nrows() as f64;
            let mut normalized = pre.clone();
            let mut inv_std = Vec::with_capacity(pre.ncols());
            for mut col in normalized.column_iter_mut() {
                let mean = col.sum() / n;
                col.add_scalar_mut(-mean);
                let var = col.norm_squared() / n;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                col *= is;
                inv_std.push(is);
            }
            let mut ln = normalized.clone();
            for mut col in ln.column_iter_mut() {
                col.component_mul_assign(&block.norm.gain);
                col += &block.norm.shift;
            }
            let out = ln.map(gelu);
            caches.push(BlockCache {
                input: h,
                normalized,
                inv_std,
                pre_activation: ln,
            });
            h = out;
        }
        let mean = self.mean_head.forward(&h);
        let logvar = self.logvar_head.forward(&h);
        (
            mean,
            logvar,
            ForwardCache {
                blocks: caches,
                trunk_output: h,
            },
        )
    }

    /// Reverse pass. Accumulates parameter gradients into `grad` and returns
    /// the gradient with respect to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_mean: &DMatrix<f64>,
        d_logvar: &DMatrix<f64>,
        grad: &mut GaussianMlp,
    ) -> DMatrix<f64> {
        let mut dh = self
            .mean_head
            .backward(&cache.trunk_output, d_mean, &mut grad.mean_head);
        dh += self
            .logvar_head
            .backward(&cache.trunk_output, d_logvar, &mut grad.logvar_head);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[i];
            let g = &mut grad.blocks[i];
            // GELU
            let d_ln = dh.zip_map(&c.pre_activation, |d, p| d * gelu_grad(p));
            // affine part of the layer norm
            for (col_d, col_n) in d_ln.column_iter().zip(c.normalized.column_iter()) {
                g.norm.gain += col_d.component_mul(&col_n);
                g.norm.shift += col_d;
            }
            // normalization
            let n = d_ln.nrows() as f64;
            let mut d_pre = d_ln.clone();
            for (j, mut col) in d_pre.column_iter_mut().enumerate() {
                col.component_mul_assign(&block.norm.gain);
                let xhat = c.normalized.column(j);
                let mean_d = col.sum() / n;
                let mean_dx = col.dot(&xhat) / n;
                for r in 0..col.len() {
                    col[r] = c.inv_std[j] * (col[r] - mean_d - xhat[r] * mean_dx);
                }
            }
            dh = block.linear.backward(&c.input, &d_pre, &mut g.linear);
        }
        dh
    }

    /// Forward pass for one input together with the Jacobians of the mean and
    /// raw log-variance heads with respect to that input (forward mode).
    pub fn jacobian(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let dim = x.len();
        let mut h = DVector::from_column_slice(x);
        let mut tangent = DMatrix::<f64>::identity(dim, dim);
        for block in &self.blocks {
            let mut pre = &block.linear.weight * &h;
            pre += &block.linear.bias;
            let t_pre = &block.linear.weight * &tangent;
            let n = pre.len() as f64;
            let mean = pre.sum() / n;
            let centered = pre.add_scalar(-mean);
            let var = centered.norm_squared() / n;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let xhat = &centered * inv_std;
            let mut t_ln = t_pre.clone();
            for mut col in t_ln.column_iter_mut() {
                let mean_d = col.sum() / n;
                let mean_dx = col.dot(&xhat) / n;
                for r in 0..col.len() {
                    col[r] = block.norm.gain[r] * inv_std * (col[r] - mean_d - xhat[r] * mean_dx);
                }
            }
            let ln = xhat.component_mul(&block.norm.gain) + &block.norm.shift;
            for (r, mut row) in t_ln.row_iter_mut().enumerate() {
                row *= gelu_grad(ln[r]);
            }
            h = ln.map(gelu);
            tangent = t_ln;
        }
        let mean = &self.mean_head.weight * &h + &self.mean_head.bias;
        let logvar = &self.logvar_head.weight * &h + &self.logvar_head.bias;
        let j_mean = &self.mean_head.weight * &tangent;
        let j_logvar = &self.logvar_head.weight * &tangent;
        (mean, logvar, j_mean, j_logvar)
    }
}
