//! Reverse-mode automatic differentiation on flat row-major tensors.
//!
//! Operations are recorded into a per-sample [`Graph`]; `backward` replays
//! the tape in reverse and accumulates gradients. Graphs are single-writer;
//! parameter buffers are shared into graphs as `Arc` leaves so concurrent
//! samples never copy weights.

mod scalar;
pub mod checkpoint;
pub mod store;

pub use scalar::Scalar;
pub use store::{Adam, Binding, GradMap, Param, ParamStore};

use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GapError, Result};

/// Handle to a node inside one graph. Ids are only meaningful for the graph
/// that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Value storage: owned buffers for op outputs, shared ones for parameters.
#[derive(Debug, Clone)]
pub enum Buf<S> {
    Owned(Vec<S>),
    Shared(Arc<Vec<S>>),
}

impl<S> Deref for Buf<S> {
    type Target = [S];
    fn deref(&self) -> &[S] {
        match self {
            Buf::Owned(v) => v,
            Buf::Shared(a) => a,
        }
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBias { a: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    MulBias { a: TensorId, scale: TensorId },
    Scale { a: TensorId, c: S },
    Relu { a: TensorId },
    Softmax { a: TensorId },
    LayerNorm { a: TensorId, eps: S },
    Tcn { a: TensorId, eps: S },
    MeanAxis { a: TensorId, axis: usize },
    Concat { parts: Vec<TensorId>, axis: usize },
    Dropout { a: TensorId, mask: Vec<S> },
    Conv2d { input: TensorId, kernels: TensorId, bias: TensorId },
    Reshape { a: TensorId },
    SumAll { a: TensorId },
    BceLogit { logit: TensorId, label: S },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    values: Buf<S>,
    op: Op<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    rng: ChaCha8Rng,
    training: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape around `axis` into (product before, extent, product after).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Graph<S> {
    /// `seed` drives every stochastic op recorded on this graph (dropout);
    /// identical seeds give identical graphs.
    pub fn new(seed: u64, training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].values
    }

    /// Accumulated gradient of the last `backward` calls, if any reached
    /// this node.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Buf<S>, op: Op<S>) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node { shape, values, op });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<S>) -> Result<TensorId> {
        if numel(shape) != values.len() {
            return Err(GapError::Shape(format!(
                "leaf shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), Buf::Owned(values), Op::Leaf))
    }

    pub fn leaf_shared(&mut self, shape: &[usize], values: Arc<Vec<S>>) -> Result<TensorId> {
        if numel(shape) != values.len() {
            return Err(GapError::Shape(format!(
                "leaf shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), Buf::Shared(values), Op::Leaf))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GapError::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::ZERO; m * n];
        {
            let av = self.values(a);
            let bv = self.values(b);
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = av[i * k + p];
                    let brow = &bv[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        Ok(self.push(vec![m, n], Buf::Owned(out), Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(GapError::Shape(format!("transpose of {sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let av = self.values(a);
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], Buf::Owned(out), Op::Transpose { a }))
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GapError::Shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<S> =
            self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), Buf::Owned(out), Op::Add { a, b }))
    }

    /// Adds `bias` (shape `[c]`) to every length-`c` slice along the last
    /// dimension of `a`.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(GapError::Shape(format!("add_bias of {sa:?} and {sb:?}")));
        }
        let c = sb[0];
        let bv = self.values(bias).to_vec();
        let out: Vec<S> =
            self.values(a).iter().enumerate().map(|(i, &x)| x + bv[i % c]).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), Buf::Owned(out), Op::AddBias { a, bias }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<S> =
            self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), Buf::Owned(out), Op::Mul { a, b }))
    }

    /// Multiplies every length-`c` slice along the last dimension of `a` by
    /// `scale` (shape `[c]`).
    pub fn mul_bias(&mut self, a: TensorId, scale: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(scale));
        if sb.len() != 1 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(GapError::Shape(format!("mul_bias of {sa:?} and {sb:?}")));
        }
        let c = sb[0];
        let sv = self.values(scale).to_vec();
        let out: Vec<S> =
            self.values(a).iter().enumerate().map(|(i, &x)| x * sv[i % c]).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), Buf::Owned(out), Op::MulBias { a, scale }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let c = S::from_f64(c);
        let out: Vec<S> = self.values(a).iter().map(|&x| x * c).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), Buf::Owned(out), Op::Scale { a, c }))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.values(a).iter().map(|&x| x.maximum(S::ZERO)).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), Buf::Owned(out), Op::Relu { a }))
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let n = *sa.last().ok_or_else(|| GapError::Shape("softmax of a 0-rank tensor".into()))?;
        if self.values(a).iter().any(|v| v.is_nan()) {
            return Err(GapError::Numeric("softmax input contains NaN".into()));
        }
        let av = self.values(a);
        let mut out = vec![S::ZERO; av.len()];
        for (slice, oslice) in av.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mut m = slice[0];
            for &v in &slice[1..] {
                m = m.maximum(v);
            }
            let mut sum = S::ZERO;
            for (o, &v) in oslice.iter_mut().zip(slice) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in oslice.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(self.nodes[a.0].shape.clone(), Buf::Owned(out), Op::Softmax { a }))
    }

    /// Layer normalization over the last dimension, no learnable affine:
    /// `(x - mean) / sqrt(var + eps)` per slice.
    pub fn layer_norm(&mut self, a: TensorId, eps: f64) -> Result<TensorId> {
        let sa = self.shape(a);
        let n = *sa.last().ok_or_else(|| GapError::Shape("layer_norm of 0-rank".into()))?;
        let eps = S::from_f64(eps);
        let inv_n = S::ONE / S::from_f64(n as f64);
        let av = self.values(a);
        let mut out = vec![S::ZERO; av.len()];
        for (slice, oslice) in av.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mut mean = S::ZERO;
            for &v in slice {
                mean += v;
            }
            mean *= inv_n;
            let mut var = S::ZERO;
            for &v in slice {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = S::ONE / (var + eps).sqrt();
            for (o, &v) in oslice.iter_mut().zip(slice) {
                *o = (v - mean) * inv_std;
            }
        }
        Ok(self.push(self.nodes[a.0].shape.clone(), Buf::Owned(out), Op::LayerNorm { a, eps }))
    }

    /// Temporal context normalization of a `[t, d]` sequence: per feature
    /// column, subtract the mean over t and divide by the std over t plus
    /// `eps`.
    pub fn tcn(&mut self, a: TensorId, eps: f64) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(GapError::Shape(format!("tcn needs a [t, d] tensor, got {sa:?}")));
        }
        let (t, d) = (sa[0], sa[1]);
        if t < 2 {
            return Err(GapError::Config(
                "temporal normalization needs a sequence of length >= 2".into(),
            ));
        }
        let eps = S::from_f64(eps);
        let inv_t = S::ONE / S::from_f64(t as f64);
        let av = self.values(a);
        let mut out = vec![S::ZERO; av.len()];
        for j in 0..d {
            let mut mean = S::ZERO;
            for i in 0..t {
                mean += av[i * d + j];
            }
            mean *= inv_t;
            let mut var = S::ZERO;
            for i in 0..t {
                let c = av[i * d + j] - mean;
                var += c * c;
            }
            var *= inv_t;
            let denom = var.sqrt() + eps;
            for i in 0..t {
                out[i * d + j] = (av[i * d + j] - mean) / denom;
            }
        }
        Ok(self.push(vec![t, d], Buf::Owned(out), Op::Tcn { a, eps }))
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        if axis >= sa.len() {
            return Err(GapError::Shape(format!("mean over axis {axis} of {sa:?}")));
        }
        let (outer, extent, inner) = axis_split(sa, axis);
        let inv = S::ONE / S::from_f64(extent as f64);
        let av = self.values(a);
        let mut out = vec![S::ZERO; outer * inner];
        for o in 0..outer {
            for t in 0..extent {
                let base = (o * extent + t) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += av[base + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let mut shape = sa.to_vec();
        shape.remove(axis);
        Ok(self.push(shape, Buf::Owned(out), Op::MeanAxis { a, axis }))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(GapError::Shape("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(GapError::Shape(format!("concat axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len()
                || sp.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(GapError::Shape(format!("concat of {first:?} and {sp:?}")));
            }
            total += sp[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = vec![S::ZERO; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let extent = self.shape(p)[axis];
            let pv = self.values(p);
            for o in 0..outer {
                let src = o * extent * inner;
                let dst = (o * total + offset) * inner;
                out[dst..dst + extent * inner].copy_from_slice(&pv[src..src + extent * inner]);
            }
            offset += extent;
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, Buf::Owned(out), Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Inverted dropout. Identity (returns `a` itself) at inference or when
    /// `p == 0`; otherwise zeroes entries with probability `p` and scales
    /// survivors by `1/(1-p)`.
    pub fn dropout(&mut self, a: TensorId, p: f64) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(GapError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.values(a).len())
            .map(|_| if self.rng.random::<f64>() < p { S::ZERO } else { keep })
            .collect();
        let out: Vec<S> = self.values(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), Buf::Owned(out), Op::Dropout { a, mask }))
    }

    /// Valid (no padding) 2D cross-correlation plus per-channel bias.
    /// `input` is `[c_in, h, w]`, `kernels` `[c_out, c_in, k, k]`, `bias`
    /// `[c_out]`.
    pub fn conv2d_valid(
        &mut self,
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 3 || sk.len() != 4 || sb.len() != 1 {
            return Err(GapError::Shape(format!(
                "conv2d of input {si:?}, kernels {sk:?}, bias {sb:?}"
            )));
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, cik, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if cik != ci || sb[0] != co || kh != kw {
            return Err(GapError::Shape(format!(
                "conv2d of input {si:?}, kernels {sk:?}, bias {sb:?}"
            )));
        }
        let k = kh;
        if k > h || k > w {
            return Err(GapError::Shape(format!(
                "conv2d kernel {k}x{k} larger than input {h}x{w}"
            )));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut out = vec![S::ZERO; co * oh * ow];
        {
            let iv = self.values(input);
            let kv = self.values(kernels);
            let bv = self.values(bias);
            for o in 0..co {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = S::ZERO;
                        for c in 0..ci {
                            for u in 0..k {
                                let irow = (c * h + i + u) * w + j;
                                let krow = ((o * ci + c) * k + u) * k;
                                let ir = &iv[irow..irow + k];
                                let kr = &kv[krow..krow + k];
                                for v in 0..k {
                                    acc += ir[v] * kr[v];
                                }
                            }
                        }
                        out[(o * oh + i) * ow + j] = acc + bv[o];
                    }
                }
            }
        }
        Ok(self.push(vec![co, oh, ow], Buf::Owned(out), Op::Conv2d { input, kernels, bias }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.values(a).len() {
            return Err(GapError::Shape(format!(
                "reshape {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let values = self.values(a).to_vec();
        Ok(self.push(shape.to_vec(), Buf::Owned(values), Op::Reshape { a }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let mut acc = S::ZERO;
        for &v in self.values(a) {
            acc += v;
        }
        Ok(self.push(vec![1], Buf::Owned(vec![acc]), Op::SumAll { a }))
    }

    /// Numerically stable binary cross-entropy from a single logit:
    /// `max(z, 0) - z * label + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logit: TensorId, label: f64) -> Result<TensorId> {
        if self.values(logit).len() != 1 {
            return Err(GapError::Shape(format!(
                "bce_with_logits needs a scalar logit, got {:?}",
                self.shape(logit)
            )));
        }
        if label != 0.0 && label != 1.0 {
            return Err(GapError::Input(format!("label {label} must be 0 or 1")));
        }
        let z = self.values(logit)[0];
        if !z.is_finite() {
            return Err(GapError::Numeric("non-finite logit".into()));
        }
        let y = S::from_f64(label);
        let loss = z.maximum(S::ZERO) - z * y + (S::ONE + (-z.abs()).exp()).ln();
        Ok(self.push(vec![1], Buf::Owned(vec![loss]), Op::BceLogit { logit, label: y }))
    }

    /// Runs the reverse sweep from a scalar loss, adding this pass's
    /// gradients into the persistent per-node gradients (call `zero_grads`
    /// between steps to reset).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.values(loss).len() != 1 {
            return Err(GapError::Input(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<S>>> = vec![None; n];
        adj[loss.0] = Some(vec![S::ONE]);

        for idx in (0..n).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            match &mut self.grads[idx] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Adds the vector-Jacobian product of node `idx` into its parents'
    /// adjoints.
    fn propagate(&self, idx: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let ensure = |adj: &mut [Option<Vec<S>>], id: TensorId, len: usize| {
            adj[id.0].get_or_insert_with(|| vec![S::ZERO; len]);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n2 = self.shape(*b)[1];
                let av = self.values(*a);
                let bv = self.values(*b);
                ensure(adj, *a, m * k);
                {
                    let da = adj[a.0].as_mut().unwrap();
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = S::ZERO;
                            let grow = &g[i * n2..(i + 1) * n2];
                            let brow = &bv[p * n2..(p + 1) * n2];
                            for j in 0..n2 {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                ensure(adj, *b, k * n2);
                let db = adj[b.0].as_mut().unwrap();
                for i in 0..m {
                    let grow = &g[i * n2..(i + 1) * n2];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        let dbrow = &mut db[p * n2..(p + 1) * n2];
                        for j in 0..n2 {
                            dbrow[j] += aip * grow[j];
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let sa = self.shape(*a);
                let (m, n2) = (sa[0], sa[1]);
                ensure(adj, *a, m * n2);
                let da = adj[a.0].as_mut().unwrap();
                for i in 0..m {
                    for j in 0..n2 {
                        da[i * n2 + j] += g[j * m + i];
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    ensure(adj, *id, g.len());
                    let d = adj[id.0].as_mut().unwrap();
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += *y;
                    }
                }
            }
            Op::AddBias { a, bias } => {
                ensure(adj, *a, g.len());
                {
                    let da = adj[a.0].as_mut().unwrap();
                    for (x, y) in da.iter_mut().zip(g) {
                        *x += *y;
                    }
                }
                let c = self.shape(*bias)[0];
                ensure(adj, *bias, c);
                let db = adj[bias.0].as_mut().unwrap();
                for (i, y) in g.iter().enumerate() {
                    db[i % c] += *y;
                }
            }
            Op::Mul { a, b } => {
                let av = self.values(*a);
                let bv = self.values(*b);
                ensure(adj, *a, g.len());
                {
                    let da = adj[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                ensure(adj, *b, g.len());
                let db = adj[b.0].as_mut().unwrap();
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
            Op::MulBias { a, scale } => {
                let av = self.values(*a);
                let sv = self.values(*scale);
                let c = sv.len();
                ensure(adj, *a, g.len());
                {
                    let da = adj[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        da[i] += g[i] * sv[i % c];
                    }
                }
                ensure(adj, *scale, c);
                let ds = adj[scale.0].as_mut().unwrap();
                for i in 0..g.len() {
                    ds[i % c] += g[i] * av[i];
                }
            }
            Op::Scale { a, c } => {
                ensure(adj, *a, g.len());
                let da = adj[a.0].as_mut().unwrap();
                for (x, y) in da.iter_mut().zip(g) {
                    *x += *y * *c;
                }
            }
            Op::Relu { a } => {
                let av = self.values(*a);
                ensure(adj, *a, g.len());
                let da = adj[a.0].as_mut().unwrap();
                for i in 0..g.len() {
                    if av[i] > S::ZERO {
                        da[i] += g[i];
                    }
                }
            }
            Op::Softmax { a } => {
                let n2 = *node.shape.last().unwrap();
                let yv = &node.values;
                ensure(adj, *a, g.len());
                let da = adj[a.0].as_mut().unwrap();
                for (slice_idx, (ys, gs)) in
                    yv.chunks_exact(n2).zip(g.chunks_exact(n2)).enumerate()
                {
                    let mut dot = S::ZERO;
                    for i in 0..n2 {
                        dot += ys[i] * gs[i];
                    }
                    let base = slice_idx * n2;
                    for i in 0..n2 {
                        da[base + i] += ys[i] * (gs[i] - dot);
                    }
                }
            }
            Op::LayerNorm { a, eps } => {
                let n2 = *node.shape.last().unwrap();
                let inv_n = S::ONE / S::from_f64(n2 as f64);
                let av = self.values(*a);
                let yv = &node.values;
                ensure(adj, *a, g.len());
                let da = adj[a.0].as_mut().unwrap();
                for s in 0..g.len() / n2 {
                    let base = s * n2;
                    let xs = &av[base..base + n2];
                    let ys = &yv[base..base + n2];
                    let gs = &g[base..base + n2];
                    let mut mean = S::ZERO;
                    for &v in xs {
                        mean += v;
                    }
                    mean *= inv_n;
                    let mut var = S::ZERO;
                    for &v in xs {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_n;
                    let inv_std = S::ONE / (var + *eps).sqrt();
                    let mut g_mean = S::ZERO;
                    let mut gy_mean = S::ZERO;
                    for i in 0..n2 {
                        g_mean += gs[i];
                        gy_mean += gs[i] * ys[i];
                    }
                    g_mean *= inv_n;
                    gy_mean *= inv_n;
                    for i in 0..n2 {
                        da[base + i] += inv_std * (gs[i] - g_mean - ys[i] * gy_mean);
                    }
                }
            }
            Op::Tcn { a, eps } => {
                let (t, d) = (node.shape[0], node.shape[1]);
                let inv_t = S::ONE / S::from_f64(t as f64);
                let av = self.values(*a);
                ensure(adj, *a, g.len());
                let da = adj[a.0].as_mut().unwrap();
                let mut dc = vec![S::ZERO; t];
                for j in 0..d {
                    let mut mean = S::ZERO;
                    for i in 0..t {
                        mean += av[i * d + j];
                    }
                    mean *= inv_t;
                    let mut var = S::ZERO;
                    for i in 0..t {
                        let c = av[i * d + j] - mean;
                        var += c * c;
                    }
                    var *= inv_t;
                    let std = var.sqrt();
                    let denom = std + *eps;
                    let mut gc = S::ZERO;
                    for i in 0..t {
                        gc += g[i * d + j] * (av[i * d + j] - mean);
                    }
                    let mut dc_mean = S::ZERO;
                    for i in 0..t {
                        let c = av[i * d + j] - mean;
                        let mut v = g[i * d + j] / denom;
                        if std > S::ZERO {
                            v -= gc / (denom * denom) * (c / (S::from_f64(t as f64) * std));
                        }
                        dc[i] = v;
                        dc_mean += v;
                    }
                    dc_mean *= inv_t;
                    for i in 0..t {
                        da[i * d + j] += dc[i] - dc_mean;
                    }
                }
            }
            Op::MeanAxis { a, axis } => {
                let sa = self.shape(*a);
                let (outer, extent, inner) = axis_split(sa, *axis);
                let inv = S::ONE / S::from_f64(extent as f64);
                ensure(adj, *a, outer * extent * inner);
                let da = adj[a.0].as_mut().unwrap();
                for o in 0..outer {
                    for t in 0..extent {
                        let base = (o * extent + t) * inner;
                        let gbase = o * inner;
                        for i in 0..inner {
                            da[base + i] += g[gbase + i] * inv;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let extent = self.shape(p)[*axis];
                    ensure(adj, p, outer * extent * inner);
                    let dp = adj[p.0].as_mut().unwrap();
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * extent * inner;
                        for i in 0..extent * inner {
                            dp[dst + i] += g[src + i];
                        }
                    }
                    offset += extent;
                }
            }
            Op::Dropout { a, mask } => {
                ensure(adj, *a, g.len());
                let da = adj[a.0].as_mut().unwrap();
                for i in 0..g.len() {
                    da[i] += g[i] * mask[i];
                }
            }
            Op::Conv2d { input, kernels, bias } => {
                let si = self.shape(*input);
                let sk = self.shape(*kernels);
                let (ci, h, w) = (si[0], si[1], si[2]);
                let (co, k) = (sk[0], sk[2]);
                let (oh, ow) = (h - k + 1, w - k + 1);
                let iv = self.values(*input);
                let kv = self.values(*kernels);
                ensure(adj, *input, ci * h * w);
                ensure(adj, *kernels, co * ci * k * k);
                ensure(adj, *bias, co);
                // Split the adjoint buffer so input/kernel/bias slots can be
                // written in one pass.
                let mut di = std::mem::take(adj[input.0].as_mut().unwrap());
                let mut dk = std::mem::take(adj[kernels.0].as_mut().unwrap());
                let mut db = std::mem::take(adj[bias.0].as_mut().unwrap());
                for o in 0..co {
                    for i in 0..oh {
                        for j in 0..ow {
                            let go = g[(o * oh + i) * ow + j];
                            db[o] += go;
                            for c in 0..ci {
                                for u in 0..k {
                                    let ibase = (c * h + i + u) * w + j;
                                    let kbase = ((o * ci + c) * k + u) * k;
                                    for v in 0..k {
                                        di[ibase + v] += go * kv[kbase + v];
                                        dk[kbase + v] += go * iv[ibase + v];
                                    }
                                }
                            }
                        }
                    }
                }
                adj[input.0] = Some(di);
                adj[kernels.0] = Some(dk);
                adj[bias.0] = Some(db);
            }
            Op::Reshape { a } => {
                ensure(adj, *a, g.len());
                let da = adj[a.0].as_mut().unwrap();
                for (x, y) in da.iter_mut().zip(g) {
                    *x += *y;
                }
            }
            Op::SumAll { a } => {
                let len = self.values(*a).len();
                ensure(adj, *a, len);
                let da = adj[a.0].as_mut().unwrap();
                for x in da.iter_mut() {
                    *x += g[0];
                }
            }
            Op::BceLogit { logit, label } => {
                let z = self.values(*logit)[0];
                let sig = S::ONE / (S::ONE + (-z).exp());
                ensure(adj, *logit, 1);
                adj[logit.0].as_mut().unwrap()[0] += g[0] * (sig - *label);
            }
        }
    }
}
