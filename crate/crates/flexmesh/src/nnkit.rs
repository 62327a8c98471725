//! Minimal neural-network toolkit: named parameter storage, MLPs, scaled
//! dot-product attention, Adam, and a binary checkpoint format.
//!
//! Forward passes return explicit tapes; backward passes consume them and
//! accumulate parameter gradients into a [`Grads`] map, so a training step
//! can compose many forward calls (one per face, per frame, per window) and
//! backpropagate them in any order. No graph machinery: the call sites know
//! the dataflow and chain adjoints by hand.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Iteration
//! order is the lexicographic name order everywhere (BTreeMap), which keeps
//! optimizer updates and checkpoints deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{real, to_f64, Real};

/// Negative-side slope of the leaky rectifier used by every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Dense array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} wants {expect} scalars, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named trainable tensors plus Adam moment buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    moment1: BTreeMap<String, Vec<T>>,
    moment2: BTreeMap<String, Vec<T>>,
    steps: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            moment1: BTreeMap::new(),
            moment2: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name:?} already exists")));
        }
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.steps
    }

    /// Writes all tensors to a little-endian binary checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, tensor) in &self.params {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.shape.len() as u64).to_le_bytes());
            for &d in &tensor.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &tensor.data {
                buf.extend_from_slice(&to_f64(x).to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint produced by [`Self::save`]. Moment buffers start
    /// fresh; checkpoints carry parameters only.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, at: 0 };
        let magic = cur.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::invalid(format!(
                "{} is not a flexmesh checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let count = cur.take_u64()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = cur.take_u64()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::invalid("checkpoint contains a non-utf8 tensor name"))?;
            let ndims = cur.take_u64()? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(cur.take_u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let x = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
                data.push(real::<T>(x));
            }
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        if cur.at != bytes.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - cur.at
            )));
        }
        Ok(store)
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"FLEXMESH";
const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::invalid("checkpoint is truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Gradient accumulator keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct Grads<T> {
    map: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn new() -> Self {
        Grads { map: BTreeMap::new() }
    }

    /// Mutable slice for `name`, created as zeros on first touch.
    pub fn entry(&mut self, name: &str, len: usize) -> &mut [T] {
        self.map
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); len])
    }

    /// Adds `delta` elementwise into the slot for `name`.
    pub fn accumulate(&mut self, name: &str, delta: &[T]) {
        let slot = self.entry(name, delta.len());
        assert_eq!(slot.len(), delta.len(), "gradient length mismatch for {name}");
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += *d;
        }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Scales every stored gradient, e.g. for sample averaging.
    pub fn scale(&mut self, factor: T) {
        for g in self.map.values_mut() {
            for x in g {
                *x *= factor;
            }
        }
    }
}

#[inline]
fn leaky<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * real::<T>(LEAKY_SLOPE)
    }
}

#[inline]
fn leaky_grad<T: Real>(pre: T) -> T {
    if pre > T::zero() {
        T::one()
    } else {
        real::<T>(LEAKY_SLOPE)
    }
}

/// Layer widths of a fully connected network, input first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        MlpSpec { sizes: sizes.to_vec() }
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    fn weight_name(&self, prefix: &str, layer: usize) -> String {
        format!("{prefix}.w{layer}")
    }

    fn bias_name(&self, prefix: &str, layer: usize) -> String {
        format!("{prefix}.b{layer}")
    }
}

/// Registers MLP parameters: weights uniform in +-1/sqrt(fan_in), biases
/// zero. With `zero_final` the last layer starts all zero, so the network
/// output is exactly zero regardless of input; motion heads start inert.
pub fn init_mlp<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut R,
    zero_final: bool,
) -> Result<()> {
    for layer in 0..spec.layer_count() {
        let (fan_in, fan_out) = (spec.sizes[layer], spec.sizes[layer + 1]);
        let last = layer + 1 == spec.layer_count();
        let bound = (fan_in as f64).sqrt().recip();
        let w: Vec<T> = (0..fan_in * fan_out)
            .map(|_| {
                if last && zero_final {
                    T::zero()
                } else {
                    real::<T>(rng.gen_range(-bound..bound))
                }
            })
            .collect();
        store.insert(&spec.weight_name(prefix, layer), Tensor::new(vec![fan_out, fan_in], w)?)?;
        store.insert(&spec.bias_name(prefix, layer), Tensor::zeros(vec![fan_out]))?;
    }
    Ok(())
}

/// Intermediate activations needed by [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct MlpTape<T> {
    /// `inputs[l]` is what layer `l` consumed; `inputs[0]` is the network
    /// input.
    inputs: Vec<Vec<T>>,
    /// Pre-activation values of every hidden layer.
    pre: Vec<Vec<T>>,
}

impl<T: Real> MlpTape<T> {
    /// Flattened hidden pre-activations. Finite-difference tests use this
    /// to skip instances that straddle a rectifier kink.
    pub fn pre_activations(&self) -> Vec<T> {
        self.pre.iter().flatten().copied().collect()
    }
}

/// Fully connected forward pass: affine layers with leaky-rectifier
/// activations on all but the last layer.
pub fn mlp_forward<T: Real>(
    store: &ParamStore<T>,
    prefix: &str,
    spec: &MlpSpec,
    input: &[T],
) -> Result<(Vec<T>, MlpTape<T>)> {
    if input.len() != spec.sizes[0] {
        return Err(Error::invalid(format!(
            "mlp {prefix:?} expects input of size {}, got {}",
            spec.sizes[0],
            input.len()
        )));
    }
    let mut inputs = vec![input.to_vec()];
    let mut pre = Vec::new();
    let mut x = input.to_vec();
    for layer in 0..spec.layer_count() {
        let w = store.get(&spec.weight_name(prefix, layer))?;
        let b = store.get(&spec.bias_name(prefix, layer))?;
        let (fan_in, fan_out) = (spec.sizes[layer], spec.sizes[layer + 1]);
        let mut z = vec![T::zero(); fan_out];
        for o in 0..fan_out {
            let row = &w.data()[o * fan_in..(o + 1) * fan_in];
            let mut acc = b.data()[o];
            for i in 0..fan_in {
                acc += row[i] * x[i];
            }
            z[o] = acc;
        }
        let last = layer + 1 == spec.layer_count();
        if last {
            x = z;
        } else {
            pre.push(z.clone());
            x = z.into_iter().map(leaky).collect();
            inputs.push(x.clone());
        }
    }
    Ok((x, MlpTape { inputs, pre }))
}

/// Backward pass matching [`mlp_forward`]. Accumulates parameter gradients
/// into `grads` and returns the gradient with respect to the input.
pub fn mlp_backward<T: Real>(
    store: &ParamStore<T>,
    prefix: &str,
    spec: &MlpSpec,
    tape: &MlpTape<T>,
    d_output: &[T],
    grads: &mut Grads<T>,
) -> Result<Vec<T>> {
    let layers = spec.layer_count();
    assert_eq!(d_output.len(), spec.sizes[layers], "mlp output gradient size mismatch");
    let mut d = d_output.to_vec();
    for layer in (0..layers).rev() {
        let (fan_in, fan_out) = (spec.sizes[layer], spec.sizes[layer + 1]);
        // The final layer is linear; hidden layers pass through the
        // rectifier derivative first.
        if layer + 1 != layers {
            let z = &tape.pre[layer];
            for (di, &pre) in d.iter_mut().zip(z) {
                *di *= leaky_grad(pre);
            }
        }
        let x = &tape.inputs[layer];
        let w = store.get(&spec.weight_name(prefix, layer))?;
        {
            let gw = grads.entry(&spec.weight_name(prefix, layer), fan_in * fan_out);
            for o in 0..fan_out {
                for i in 0..fan_in {
                    gw[o * fan_in + i] += d[o] * x[i];
                }
            }
        }
        grads.accumulate(&spec.bias_name(prefix, layer), &d);
        let mut d_in = vec![T::zero(); fan_in];
        for o in 0..fan_out {
            let row = &w.data()[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                d_in[i] += row[i] * d[o];
            }
        }
        d = d_in;
    }
    Ok(d)
}

/// Multi-head scaled dot-product self-attention over a short token
/// sequence, mean-pooled to a single vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    pub input_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub output_dim: usize,
}

impl AttentionSpec {
    fn proj_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Registers query/key/value/output projections, uniform +-1/sqrt(fan_in)
/// weights and zero biases.
pub fn init_attention<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    spec: &AttentionSpec,
    rng: &mut R,
) -> Result<()> {
    let p = spec.proj_dim();
    let mat = |rows: usize, cols: usize, rng: &mut R| -> Vec<T> {
        let bound = (cols as f64).sqrt().recip();
        (0..rows * cols).map(|_| real::<T>(rng.gen_range(-bound..bound))).collect()
    };
    for (name, rows, cols) in [
        ("wq", p, spec.input_dim),
        ("wk", p, spec.input_dim),
        ("wv", p, spec.input_dim),
        ("wo", spec.output_dim, p),
    ] {
        let data = mat(rows, cols, rng);
        store.insert(&format!("{prefix}.{name}"), Tensor::new(vec![rows, cols], data)?)?;
        let bias_rows = rows;
        store.insert(
            &format!("{prefix}.{}", name.replace('w', "b")),
            Tensor::zeros(vec![bias_rows]),
        )?;
    }
    Ok(())
}

/// Everything the attention backward pass needs.
#[derive(Debug, Clone)]
pub struct AttnTape<T> {
    tokens: Vec<Vec<T>>,
    q: Vec<Vec<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// `probs[h][a]` are the softmax weights of query `a` over all keys.
    probs: Vec<Vec<Vec<T>>>,
    ctx: Vec<Vec<T>>,
}

fn affine<T: Real>(w: &Tensor<T>, b: &Tensor<T>, x: &[T]) -> Vec<T> {
    let rows = w.shape()[0];
    let cols = w.shape()[1];
    debug_assert_eq!(x.len(), cols);
    let mut out = b.data().to_vec();
    for r in 0..rows {
        let row = &w.data()[r * cols..(r + 1) * cols];
        let mut acc = out[r];
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
    out
}

/// Forward attention over `tokens`; the pooled output is the mean of the
/// per-token outputs.
pub fn attention_forward<T: Real>(
    store: &ParamStore<T>,
    prefix: &str,
    spec: &AttentionSpec,
    tokens: &[Vec<T>],
) -> Result<(Vec<T>, AttnTape<T>)> {
    if tokens.is_empty() {
        return Err(Error::invalid(format!("attention {prefix:?} got an empty window")));
    }
    for (i, t) in tokens.iter().enumerate() {
        if t.len() != spec.input_dim {
            return Err(Error::invalid(format!(
                "attention {prefix:?}: token {i} has size {}, expected {}",
                t.len(),
                spec.input_dim
            )));
        }
    }
    let wq = store.get(&format!("{prefix}.wq"))?;
    let bq = store.get(&format!("{prefix}.bq"))?;
    let wk = store.get(&format!("{prefix}.wk"))?;
    let bk = store.get(&format!("{prefix}.bk"))?;
    let wv = store.get(&format!("{prefix}.wv"))?;
    let bv = store.get(&format!("{prefix}.bv"))?;
    let wo = store.get(&format!("{prefix}.wo"))?;
    let bo = store.get(&format!("{prefix}.bo"))?;
    let n = tokens.len();
    let q: Vec<Vec<T>> = tokens.iter().map(|t| affine(wq, bq, t)).collect();
    let k: Vec<Vec<T>> = tokens.iter().map(|t| affine(wk, bk, t)).collect();
    let v: Vec<Vec<T>> = tokens.iter().map(|t| affine(wv, bv, t)).collect();
    let scale = real::<T>((spec.head_dim as f64).sqrt().recip());
    let mut probs = vec![vec![vec![T::zero(); n]; n]; spec.heads];
    let mut ctx = vec![vec![T::zero(); spec.proj_dim()]; n];
    for h in 0..spec.heads {
        let lo = h * spec.head_dim;
        let hi = lo + spec.head_dim;
        for a in 0..n {
            let mut scores = vec![T::zero(); n];
            for b in 0..n {
                let mut s = T::zero();
                for d in lo..hi {
                    s += q[a][d] * k[b][d];
                }
                scores[b] = s * scale;
            }
            let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for s in &mut scores {
                *s = (*s - max).exp();
                z += *s;
            }
            for b in 0..n {
                let p = scores[b] / z;
                probs[h][a][b] = p;
                for d in lo..hi {
                    ctx[a][d] += p * v[b][d];
                }
            }
        }
    }
    let outs: Vec<Vec<T>> = ctx.iter().map(|c| affine(wo, bo, c)).collect();
    let inv_n = real::<T>(1.0 / n as f64);
    let mut pooled = vec![T::zero(); spec.output_dim];
    for out in &outs {
        for (p, o) in pooled.iter_mut().zip(out) {
            *p += *o * inv_n;
        }
    }
    Ok((
        pooled,
        AttnTape {
            tokens: tokens.to_vec(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    ))
}

/// Backward pass matching [`attention_forward`]; returns per-token input
/// gradients.
pub fn attention_backward<T: Real>(
    store: &ParamStore<T>,
    prefix: &str,
    spec: &AttentionSpec,
    tape: &AttnTape<T>,
    d_pooled: &[T],
    grads: &mut Grads<T>,
) -> Result<Vec<Vec<T>>> {
    assert_eq!(d_pooled.len(), spec.output_dim, "attention output gradient size mismatch");
    let n = tape.tokens.len();
    let p = spec.proj_dim();
    let wq = store.get(&format!("{prefix}.wq"))?;
    let wk = store.get(&format!("{prefix}.wk"))?;
    let wv = store.get(&format!("{prefix}.wv"))?;
    let wo = store.get(&format!("{prefix}.wo"))?;
    let inv_n = real::<T>(1.0 / n as f64);
    let d_out: Vec<T> = d_pooled.iter().map(|&d| d * inv_n).collect();

    // Output projection: every token sees the same pooled gradient share.
    let mut d_ctx = vec![vec![T::zero(); p]; n];
    {
        let gwo = grads.entry(&format!("{prefix}.wo"), spec.output_dim * p);
        for a in 0..n {
            for r in 0..spec.output_dim {
                for c in 0..p {
                    gwo[r * p + c] += d_out[r] * tape.ctx[a][c];
                }
            }
        }
    }
    {
        let gbo = grads.entry(&format!("{prefix}.bo"), spec.output_dim);
        for r in 0..spec.output_dim {
            gbo[r] += d_out[r] * real::<T>(n as f64);
        }
    }
    for a in 0..n {
        for c in 0..p {
            let mut acc = T::zero();
            for r in 0..spec.output_dim {
                acc += wo.data()[r * p + c] * d_out[r];
            }
            d_ctx[a][c] = acc;
        }
    }

    let scale = real::<T>((spec.head_dim as f64).sqrt().recip());
    let mut d_q = vec![vec![T::zero(); p]; n];
    let mut d_k = vec![vec![T::zero(); p]; n];
    let mut d_v = vec![vec![T::zero(); p]; n];
    for h in 0..spec.heads {
        let lo = h * spec.head_dim;
        let hi = lo + spec.head_dim;
        for a in 0..n {
            // d probs, then softmax backward to d scores.
            let mut d_p = vec![T::zero(); n];
            for b in 0..n {
                let mut acc = T::zero();
                for d in lo..hi {
                    acc += d_ctx[a][d] * tape.v[b][d];
                }
                d_p[b] = acc;
                for d in lo..hi {
                    d_v[b][d] += tape.probs[h][a][b] * d_ctx[a][d];
                }
            }
            let mut inner = T::zero();
            for b in 0..n {
                inner += tape.probs[h][a][b] * d_p[b];
            }
            for b in 0..n {
                let d_s = tape.probs[h][a][b] * (d_p[b] - inner) * scale;
                for d in lo..hi {
                    d_q[a][d] += d_s * tape.k[b][d];
                    d_k[b][d] += d_s * tape.q[a][d];
                }
            }
        }
    }

    // Input projections.
    let mut d_tokens = vec![vec![T::zero(); spec.input_dim]; n];
    for (mat, bias, d_proj) in [
        ("wq", "bq", &d_q),
        ("wk", "bk", &d_k),
        ("wv", "bv", &d_v),
    ] {
        let w = match mat {
            "wq" => wq,
            "wk" => wk,
            _ => wv,
        };
        {
            let gw = grads.entry(&format!("{prefix}.{mat}"), p * spec.input_dim);
            for a in 0..n {
                for r in 0..p {
                    for c in 0..spec.input_dim {
                        gw[r * spec.input_dim + c] += d_proj[a][r] * tape.tokens[a][c];
                    }
                }
            }
        }
        {
            let gb = grads.entry(&format!("{prefix}.{bias}"), p);
            for a in 0..n {
                for r in 0..p {
                    gb[r] += d_proj[a][r];
                }
            }
        }
        for a in 0..n {
            for r in 0..p {
                let row = &w.data()[r * spec.input_dim..(r + 1) * spec.input_dim];
                for c in 0..spec.input_dim {
                    d_tokens[a][c] += row[c] * d_proj[a][r];
                }
            }
        }
    }
    Ok(d_tokens)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        AdamConfig {
            lr,
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-8),
        }
    }
}

/// One Adam update over every parameter in the store. Parameters without an
/// entry in `grads` receive zero gradient (their moments still decay).
/// Non-finite gradients or updates abort with a diagnostic naming the
/// parameter.
/// Per-tensor step damping. Adam's normalized update moves every scalar by
/// roughly `lr`, so one step shifts a layer's output in proportion to its
/// fan-in; at large learning rates the wide layers of a deep stack then
/// move orders of magnitude faster, in output terms, than the quantities
/// they feed, and the whole model destabilizes. Scaling each tensor's step
/// by the inverse square root of its fan-in (and flat damping for vectors)
/// equalizes per-layer output movement at any learning rate.
fn step_scale<T: Real>(shape: &[usize]) -> T {
    match shape.last() {
        Some(&fan_in) if shape.len() >= 2 => real(0.08 / (fan_in as f64).sqrt()),
        _ => real(1.0 / 32.0),
    }
}

pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &Grads<T>,
    cfg: &AdamConfig<T>,
) -> Result<()> {
    for name in grads.names() {
        if !store.params.contains_key(name) {
            return Err(Error::invalid(format!(
                "gradient provided for unknown parameter {name:?}"
            )));
        }
    }
    store.steps += 1;
    let t = store.steps as i32;
    let bias1 = T::one() - cfg.beta1.powi(t);
    let bias2 = T::one() - cfg.beta2.powi(t);
    for (name, tensor) in store.params.iter_mut() {
        let n = tensor.len();
        let zeros;
        let g: &[T] = match grads.get(name) {
            Some(g) => {
                if g.len() != n {
                    return Err(Error::invalid(format!(
                        "gradient for {name:?} has length {}, parameter has {n}",
                        g.len()
                    )));
                }
                g
            }
            None => {
                zeros = vec![T::zero(); n];
                &zeros
            }
        };
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient for parameter {name:?}"
            )));
        }
        let m = self_or_zeros(&mut store.moment1, name, n);
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (T::one() - cfg.beta1) * gi;
        }
        let v = self_or_zeros(&mut store.moment2, name, n);
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (T::one() - cfg.beta2) * gi * gi;
        }
        let m = &store.moment1[name];
        let v = &store.moment2[name];
        let step = cfg.lr * step_scale::<T>(tensor.shape());
        for i in 0..n {
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            let upd = step * m_hat / (v_hat.sqrt() + cfg.eps);
            tensor.data[i] -= upd;
            if !tensor.data[i].is_finite() {
                return Err(Error::numeric(format!(
                    "parameter {name:?} became non-finite during the optimizer step"
                )));
            }
        }
    }
    Ok(())
}

fn self_or_zeros<'a, T: Real>(
    map: &'a mut BTreeMap<String, Vec<T>>,
    name: &str,
    n: usize,
) -> &'a mut Vec<T> {
    map.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n])
}
