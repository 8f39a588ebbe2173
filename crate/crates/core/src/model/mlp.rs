use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NarsError, Result};
use crate::hetgraph::Task;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Prelu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the hop features fed to the model.
    pub in_dim: usize,
    /// Width after the optional shared input projection.
    pub proj_dim: Option<usize>,
    pub hidden: usize,
    /// Number of hop levels, `L + 1`.
    pub levels: usize,
    pub classes: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub task: Task,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden == 0 || self.levels == 0 || self.classes == 0 {
            return Err(NarsError::Invalid(format!("model dimensions must be positive: {self:?}")));
        }
        if self.proj_dim == Some(0) {
            return Err(NarsError::Invalid("projection width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NarsError::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn width(&self) -> usize {
        self.proj_dim.unwrap_or(self.in_dim)
    }
}

/// Labels of one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<T> {
    Classes(Vec<u32>),
    MultiHot(Matrix<T>),
}

impl<T: Scalar> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::MultiHot(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Layout {
    proj: Option<usize>,
    theta: Vec<usize>,
    theta_bias: Vec<usize>,
    theta_slope: Vec<Option<usize>>,
    omega: usize,
    omega_bias: usize,
    omega_slope: Option<usize>,
    head: usize,
    head_bias: usize,
}

/// Per-hop transforms Θ_l with PReLU, concatenation, dropout, a combiner Ω
/// with PReLU, dropout and a linear head. An optional projection shared by
/// all hops maps the hop features to the width seen by Θ_l.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NarsModel<T> {
    pub config: ModelConfig,
    params: Vec<Matrix<T>>,
    names: Vec<String>,
    layout: Layout,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache<T> {
    inputs: Vec<Matrix<T>>,
    z: Vec<Matrix<T>>,
    u: Vec<Matrix<T>>,
    concat: Matrix<T>,
    mask1: Option<Matrix<T>>,
    v: Matrix<T>,
    g: Matrix<T>,
    mask2: Option<Matrix<T>>,
    pub logits: Matrix<T>,
}

pub struct Gradients<T> {
    pub loss: T,
    /// One block per parameter, in [`NarsModel::blocks`] order.
    pub params: Vec<Matrix<T>>,
    /// Gradient with respect to each hop input.
    pub inputs: Vec<Matrix<T>>,
}

fn prelu<T: Scalar>(x: &Matrix<T>, slope: Option<T>) -> Matrix<T> {
    let mut y = x.clone();
    if let Some(s) = slope {
        y.as_mut_slice().iter_mut().for_each(|v| {
            if *v <= T::zero() {
                *v *= s
            }
        });
    }
    y
}

/// Returns `(dx, dslope)` for `y = prelu(x)`.
fn prelu_backward<T: Scalar>(x: &Matrix<T>, dy: &Matrix<T>, slope: Option<T>) -> (Matrix<T>, T) {
    let Some(s) = slope else { return (dy.clone(), T::zero()) };
    let mut dx = dy.clone();
    let mut ds = T::zero();
    for (d, &xv) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if xv <= T::zero() {
            ds += *d * xv;
            *d *= s;
        }
    }
    (dx, ds)
}

fn dropout_mask<T: Scalar>(rows: usize, cols: usize, rate: f64, rng: &mut (impl Rng + ?Sized)) -> Matrix<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    Matrix::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < rate { T::zero() } else { keep })
}

fn hadamard<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = a.clone();
    out.as_mut_slice().iter_mut().zip(b.as_slice()).for_each(|(x, y)| *x *= *y);
    out
}

fn check_finite<T: Scalar>(m: &Matrix<T>, layer: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(NarsError::NonFinite(format!("activation of layer `{layer}`")))
    }
}

impl<T: Scalar> NarsModel<T> {
    /// Weights and biases uniform in `±1/√fan_in`; PReLU slopes start at 0.25.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut layout = Layout::default();
        let mut push = |name: String, rows: usize, cols: usize, fan_in: usize, rng: &mut dyn FnMut() -> f64| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.push(Matrix::from_fn(rows, cols, |_, _| T::of((rng() * 2.0 - 1.0) * bound)));
            names.push(name);
            params.len() - 1
        };
        let mut draw = || rng.gen::<f64>();
        let width = config.width();
        let prelu_on = config.activation == Activation::Prelu;
        if let Some(p) = config.proj_dim {
            layout.proj = Some(push("projection".into(), config.in_dim, p, config.in_dim, &mut draw));
        }
        for l in 0..config.levels {
            layout.theta.push(push(format!("theta{l}"), width, config.hidden, width, &mut draw));
            layout.theta_bias.push(push(format!("theta{l}.bias"), 1, config.hidden, width, &mut draw));
        }
        let cat = config.levels * config.hidden;
        layout.omega = push("omega".into(), cat, config.hidden, cat, &mut draw);
        layout.omega_bias = push("omega.bias".into(), 1, config.hidden, cat, &mut draw);
        layout.head = push("head".into(), config.hidden, config.classes, config.hidden, &mut draw);
        layout.head_bias = push("head.bias".into(), 1, config.classes, config.hidden, &mut draw);
        if prelu_on {
            for l in 0..config.levels {
                params.push(Matrix::filled(1, 1, T::of(0.25)));
                names.push(format!("theta{l}.slope"));
                layout.theta_slope.push(Some(params.len() - 1));
            }
            params.push(Matrix::filled(1, 1, T::of(0.25)));
            names.push("omega.slope".into());
            layout.omega_slope = Some(params.len() - 1);
        } else {
            layout.theta_slope = vec![None; config.levels];
        }
        Ok(NarsModel { config, params, names, layout })
    }

    pub fn blocks(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub fn blocks_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    pub fn block_names(&self) -> &[String] {
        &self.names
    }

    pub fn block(&self, name: &str) -> Option<&Matrix<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    /// Trainable scalars, excluding any aggregation coefficients.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.as_slice().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NarsModel<U> {
        NarsModel {
            config: self.config.clone(),
            params: self.params.iter().map(Matrix::cast).collect(),
            names: self.names.clone(),
            layout: self.layout.clone(),
        }
    }

    fn slope(&self, idx: Option<usize>) -> Option<T> {
        idx.map(|i| self.params[i].get(0, 0))
    }

    /// Logits for `inputs` (one `B × in_dim` matrix per hop level). Dropout
    /// is applied only when `rng` is given.
    pub fn forward(&self, inputs: &[Matrix<T>], rng: Option<&mut dyn rand::RngCore>) -> Result<ForwardCache<T>> {
        let cfg = &self.config;
        if inputs.len() != cfg.levels {
            return Err(NarsError::Dimension(format!("{} hop inputs, model expects {}", inputs.len(), cfg.levels)));
        }
        let batch = inputs[0].rows();
        if batch == 0 {
            return Err(NarsError::Invalid("empty batch".into()));
        }
        for (l, x) in inputs.iter().enumerate() {
            if x.shape() != (batch, cfg.in_dim) {
                return Err(NarsError::Dimension(format!(
                    "hop {l} input is {:?}, expected ({batch}, {})",
                    x.shape(),
                    cfg.in_dim
                )));
            }
            check_finite(x, &format!("input{l}"))?;
        }
        let ly = &self.layout;
        let z: Vec<Matrix<T>> = match ly.proj {
            Some(p) => inputs.iter().map(|x| x.matmul(&self.params[p])).collect(),
            None => Vec::new(),
        };
        let mut u = Vec::with_capacity(cfg.levels);
        let mut acts = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let x = if ly.proj.is_some() { &z[l] } else { &inputs[l] };
            let mut ul = x.matmul(&self.params[ly.theta[l]]);
            ul.add_row(&self.params[ly.theta_bias[l]]);
            let al = prelu(&ul, self.slope(ly.theta_slope[l]));
            check_finite(&al, &self.names[ly.theta[l]])?;
            u.push(ul);
            acts.push(al);
        }
        let mut concat = Matrix::hcat(&acts);
        let mut rng = rng;
        let mask1 = match rng.as_deref_mut() {
            Some(r) if cfg.dropout > 0.0 => Some(dropout_mask(batch, concat.cols(), cfg.dropout, r)),
            _ => None,
        };
        if let Some(m) = &mask1 {
            concat = hadamard(&concat, m);
        }
        let mut v = concat.matmul(&self.params[ly.omega]);
        v.add_row(&self.params[ly.omega_bias]);
        let mut g = prelu(&v, self.slope(ly.omega_slope));
        check_finite(&g, "omega")?;
        let mask2 = match rng {
            Some(r) if cfg.dropout > 0.0 => Some(dropout_mask(batch, g.cols(), cfg.dropout, r)),
            _ => None,
        };
        if let Some(m) = &mask2 {
            g = hadamard(&g, m);
        }
        let mut logits = g.matmul(&self.params[ly.head]);
        logits.add_row(&self.params[ly.head_bias]);
        check_finite(&logits, "head")?;
        Ok(ForwardCache { inputs: inputs.to_vec(), z, u, concat, mask1, v, g, mask2, logits })
    }

    /// Mean loss over the batch and `∂loss/∂logits`.
    pub fn loss(&self, logits: &Matrix<T>, targets: &Targets<T>) -> Result<(T, Matrix<T>)> {
        let (b, c) = logits.shape();
        if targets.len() != b || b == 0 {
            return Err(NarsError::Dimension(format!("{} targets for {b} rows", targets.len())));
        }
        let mut dlogits = Matrix::zeros(b, c);
        let mut total = T::zero();
        match (targets, self.config.task) {
            (Targets::Classes(y), Task::SingleLabel) => {
                let inv_b = T::one() / T::of(b as f64);
                for r in 0..b {
                    let row = logits.row(r);
                    let yr = y[r] as usize;
                    if yr >= c {
                        return Err(NarsError::Invalid(format!("label {yr} outside {c} classes")));
                    }
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
                    let lse = max + sum.ln();
                    total += lse - row[yr];
                    let d = dlogits.row_mut(r);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        d[j] = (p - if j == yr { T::one() } else { T::zero() }) * inv_b;
                    }
                }
                Ok((total * inv_b, dlogits))
            }
            (Targets::MultiHot(y), Task::MultiLabel) => {
                if y.shape() != (b, c) {
                    return Err(NarsError::Dimension("multi-hot targets do not match logits".into()));
                }
                let inv = T::one() / T::of((b * c) as f64);
                for ((d, &x), &t) in dlogits.as_mut_slice().iter_mut().zip(logits.as_slice()).zip(y.as_slice()) {
                    // log(1 + e^-|x|) + max(x, 0) - x t
                    total += (T::one() + (-x.abs()).exp()).ln() + x.max(T::zero()) - x * t;
                    let p = T::one() / (T::one() + (-x).exp());
                    *d = (p - t) * inv;
                }
                Ok((total * inv, dlogits))
            }
            _ => Err(NarsError::Invalid("targets do not match the model's task".into())),
        }
    }

    /// Gradients for every parameter block and for every hop input.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Matrix<T>) -> (Vec<Matrix<T>>, Vec<Matrix<T>>) {
        let ly = &self.layout;
        let cfg = &self.config;
        let mut grads: Vec<Matrix<T>> = self.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();

        grads[ly.head] = cache.g.t_matmul(dlogits);
        grads[ly.head_bias] = dlogits.col_sums();
        let mut dg = dlogits.matmul_t(&self.params[ly.head]);
        if let Some(m) = &cache.mask2 {
            dg = hadamard(&dg, m);
        }
        let (dv, ds) = prelu_backward(&cache.v, &dg, self.slope(ly.omega_slope));
        if let Some(i) = ly.omega_slope {
            grads[i].set(0, 0, ds);
        }
        grads[ly.omega] = cache.concat.t_matmul(&dv);
        grads[ly.omega_bias] = dv.col_sums();
        let mut dcat = dv.matmul_t(&self.params[ly.omega]);
        if let Some(m) = &cache.mask1 {
            dcat = hadamard(&dcat, m);
        }
        let parts = dcat.hsplit(cfg.hidden);
        let mut dinputs = Vec::with_capacity(cfg.levels);
        let mut dproj = ly.proj.map(|p| Matrix::zeros(self.params[p].rows(), self.params[p].cols()));
        for l in 0..cfg.levels {
            let (du, ds) = prelu_backward(&cache.u[l], &parts[l], self.slope(ly.theta_slope[l]));
            if let Some(i) = ly.theta_slope[l] {
                grads[i].set(0, 0, ds);
            }
            let x = if ly.proj.is_some() { &cache.z[l] } else { &cache.inputs[l] };
            grads[ly.theta[l]] = x.t_matmul(&du);
            grads[ly.theta_bias[l]] = du.col_sums();
            let dx = du.matmul_t(&self.params[ly.theta[l]]);
            match (ly.proj, dproj.as_mut()) {
                (Some(p), Some(acc)) => {
                    acc.axpy(T::one(), &cache.inputs[l].t_matmul(&dx));
                    dinputs.push(dx.matmul_t(&self.params[p]));
                }
                _ => dinputs.push(dx),
            }
        }
        if let (Some(p), Some(d)) = (ly.proj, dproj) {
            grads[p] = d;
        }
        (grads, dinputs)
    }

    /// Forward, loss and backward in one call.
    pub fn loss_and_grads(
        &self,
        inputs: &[Matrix<T>],
        targets: &Targets<T>,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Gradients<T>> {
        let cache = self.forward(inputs, rng)?;
        let (loss, dlogits) = self.loss(&cache.logits, targets)?;
        let (params, inputs) = self.backward(&cache, &dlogits);
        Ok(Gradients { loss, params, inputs })
    }
}
