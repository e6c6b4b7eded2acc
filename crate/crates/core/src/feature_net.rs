//! The shared feature extractor: a fully connected ReLU network whose last
//! hidden activations are the GP feature vector.
//!
//! Every layer applies `relu(x W + b)`, including the last one, so features
//! are nonnegative. Gradients are exact reverse mode; a [`ForwardPass`]
//! records the activations a later [`FeatureNet::backward`] consumes and is
//! stamped with a token naming the parameter snapshot it came from.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, FrclError, Result};
use crate::numerics::{gemm, Matrix, Op};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FRCLNET1";

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// One affine layer; `weight` is `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![T::zero(); fan_out],
        }
    }

    fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }
}

#[derive(Debug)]
pub struct FeatureNet<T> {
    sizes: Vec<usize>,
    layers: Vec<Layer<T>>,
    id: u64,
    version: u64,
}

impl<T: Scalar> Clone for FeatureNet<T> {
    fn clone(&self) -> Self {
        Self {
            sizes: self.sizes.clone(),
            layers: self.layers.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

/// Identifies the parameter snapshot a forward pass was computed with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PassToken {
    net_id: u64,
    version: u64,
}

/// Activations cached by a forward pass: `acts[0]` is the input and
/// `acts[l + 1]` the post-ReLU output of layer `l`.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    token: PassToken,
    acts: Vec<Matrix<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn token(&self) -> PassToken {
        self.token
    }

    pub fn input(&self) -> &Matrix<T> {
        &self.acts[0]
    }

    /// The feature matrix `Φ_X`.
    pub fn output(&self) -> &Matrix<T> {
        self.acts.last().expect("at least the input")
    }
}

/// Gradient with the same shapes as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> ParamGrad<T> {
    pub fn zeros_like(net: &FeatureNet<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &ParamGrad<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.axpy(alpha, &b.weight).expect("congruent gradients");
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.weight.scale_mut(s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    /// Flattened in checkpoint order (per layer: weights row-major, then biases).
    pub fn to_vec(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

impl<T: Scalar> FeatureNet<T> {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        check_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Matrix::from_fn(fan_in, fan_out, |_, _| T::of(rng.random_range(-a..=a)));
                Layer {
                    weight,
                    bias: vec![T::zero(); fan_out],
                }
            })
            .collect();
        Ok(Self::assemble(sizes.to_vec(), layers))
    }

    /// Builds a network from explicit layers.
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| FrclError::InvalidConfig("network needs at least one layer".into()))?;
        let mut sizes = vec![first.weight.rows()];
        for l in &layers {
            if l.weight.rows() != *sizes.last().unwrap() {
                return Err(dim_err("FeatureNet::from_layers", sizes.last().unwrap(), l.weight.rows()));
            }
            if l.bias.len() != l.weight.cols() {
                return Err(dim_err("FeatureNet::from_layers", l.weight.cols(), l.bias.len()));
            }
            sizes.push(l.weight.cols());
        }
        Ok(Self::assemble(sizes, layers))
    }

    fn assemble(sizes: Vec<usize>, layers: Vec<Layer<T>>) -> Self {
        Self {
            sizes,
            layers,
            id: fresh_id(),
            version: 0,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    /// Feature width `K`.
    pub fn feature_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn token(&self) -> PassToken {
        PassToken {
            net_id: self.id,
            version: self.version,
        }
    }

    /// Mutable access to the parameters; invalidates outstanding forward passes.
    pub fn update(&mut self, f: impl FnOnce(&mut [Layer<T>])) {
        f(&mut self.layers);
        self.version += 1;
    }

    /// `Φ_X`, one feature row per input row.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut a = x.clone();
        for l in &self.layers {
            a = affine_relu(&a, l);
        }
        Ok(a)
    }

    pub fn forward_pass(&self, x: &Matrix<T>) -> Result<ForwardPass<T>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for l in &self.layers {
            let next = affine_relu(acts.last().unwrap(), l);
            acts.push(next);
        }
        Ok(ForwardPass {
            token: self.token(),
            acts,
        })
    }

    /// `Σ_j (∂φ(x_j)/∂θ)ᵀ g_j` for the cotangent rows `g_j`, reusing `pass`.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        x: &Matrix<T>,
        cotangent: &Matrix<T>,
    ) -> Result<ParamGrad<T>> {
        if pass.token != self.token() || pass.input() != x {
            return Err(FrclError::StaleCache);
        }
        self.backward_cached(pass, cotangent)
    }

    /// Runs its own forward pass, then [`Self::backward`].
    pub fn gradient(&self, x: &Matrix<T>, cotangent: &Matrix<T>) -> Result<ParamGrad<T>> {
        let pass = self.forward_pass(x)?;
        self.backward_cached(&pass, cotangent)
    }

    /// Backward against a pass whose token matches; the input is not compared.
    pub fn backward_cached(
        &self,
        pass: &ForwardPass<T>,
        cotangent: &Matrix<T>,
    ) -> Result<ParamGrad<T>> {
        if pass.token != self.token() {
            return Err(FrclError::StaleCache);
        }
        let out = pass.output();
        if cotangent.shape() != out.shape() {
            return Err(dim_err(
                "FeatureNet::backward",
                format!("{}x{}", out.rows(), out.cols()),
                format!("{}x{}", cotangent.rows(), cotangent.cols()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = cotangent.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let post = &pass.acts[li + 1];
            for (gv, &a) in g.data_mut().iter_mut().zip(post.data()) {
                if a <= T::zero() {
                    *gv = T::zero();
                }
            }
            let input = &pass.acts[li];
            let mut dw = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
            gemm(T::one(), input, Op::T, &g, Op::N, T::zero(), &mut dw)?;
            let mut db = vec![T::zero(); layer.bias.len()];
            for r in g.row_iter() {
                for (b, &v) in db.iter_mut().zip(r) {
                    *b += v;
                }
            }
            if li > 0 {
                g = g.mm(Op::N, &layer.weight, Op::T)?;
            }
            grads.push(Layer { weight: dw, bias: db });
        }
        grads.reverse();
        Ok(ParamGrad { layers: grads })
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(dim_err("FeatureNet::forward", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    /// Flattened parameters in checkpoint order.
    pub fn param_vec(&self) -> Vec<T> {
        ParamGrad {
            layers: self.layers.clone(),
        }
        .to_vec()
    }

    pub fn set_param_vec(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(dim_err("FeatureNet::set_param_vec", self.param_count(), values.len()));
        }
        self.update(|layers| {
            let mut off = 0;
            for l in layers {
                let n = l.weight.data().len();
                l.weight.data_mut().copy_from_slice(&values[off..off + n]);
                off += n;
                let n = l.bias.len();
                l.bias.copy_from_slice(&values[off..off + n]);
                off += n;
            }
        });
        Ok(())
    }

    /// Writes the binary checkpoint: magic, layer count, sizes, then per layer
    /// the row-major weights and the biases, all little-endian (`u64` counts, `f64` values).
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u64::<LittleEndian>(self.layers.len() as u64)?;
        for &s in &self.sizes {
            w.write_u64::<LittleEndian>(s as u64)?;
        }
        for v in self.param_vec() {
            w.write_f64::<LittleEndian>(v.as_f64())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FrclError::BadCheckpoint("network magic mismatch".into()));
        }
        let layers = r.read_u64::<LittleEndian>()? as usize;
        if layers == 0 || layers > 1024 {
            return Err(FrclError::BadCheckpoint(format!("implausible layer count {layers}")));
        }
        let mut sizes = Vec::with_capacity(layers + 1);
        for _ in 0..=layers {
            sizes.push(r.read_u64::<LittleEndian>()? as usize);
        }
        check_sizes(&sizes)?;
        let mut net = Self::assemble(
            sizes.clone(),
            sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        );
        let mut values = Vec::with_capacity(net.param_count());
        for _ in 0..net.param_count() {
            let v = r.read_f64::<LittleEndian>()?;
            if !v.is_finite() {
                return Err(FrclError::BadCheckpoint("non-finite parameter".into()));
            }
            values.push(T::of(v));
        }
        net.set_param_vec(&values)?;
        Ok(net)
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(FrclError::InvalidConfig("network needs at least one layer".into()));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(FrclError::InvalidConfig("zero-width layer".into()));
    }
    Ok(())
}

fn affine_relu<T: Scalar>(a: &Matrix<T>, l: &Layer<T>) -> Matrix<T> {
    let mut z = Matrix::zeros(a.rows(), l.weight.cols());
    for r in 0..z.rows() {
        z.row_mut(r).copy_from_slice(&l.bias);
    }
    gemm(T::one(), a, Op::N, &l.weight, Op::N, T::one(), &mut z).expect("layer shapes checked");
    z.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
    z
}
