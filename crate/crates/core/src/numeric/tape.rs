//! Reverse-mode gradient tape over dense vectors.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the nodes once, newest first, and accumulates output-gradients into
//! the parents of each node. Values are addressed through [`Var`] handles,
//! which remember the tape that created them.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::{dot, Matrix};
use crate::error::{shape_err, Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Variance stabilizer used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        w: usize,
        x: usize,
        b: Option<usize>,
        rows: usize,
        cols: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    SortedSum(Vec<usize>),
    Concat(Vec<usize>),
    Select(usize, usize),
    Bilinear {
        m: usize,
        a: usize,
        b: usize,
    },
    Relu(usize),
    Softplus(usize),
    Transpose(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    MaxPool {
        inputs: Vec<usize>,
        winner: Vec<u32>,
    },
    Softmax(usize),
    CrossEntropy {
        p: usize,
        label: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Record of the operations of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Seeded pseudo-random source for dropout masks.
#[derive(Debug, Clone)]
pub struct DropoutStream {
    rng: ChaCha8Rng,
}

impl DropoutStream {
    /// Stream keyed by a run seed and a list of counters (epoch, sample, ...).
    pub fn new(seed: u64, counters: &[u64]) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        for (slot, c) in counters.iter().take(3).enumerate() {
            key[8 * (slot + 1)..8 * (slot + 2)].copy_from_slice(&c.to_le_bytes());
        }
        Self {
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    fn mask(&mut self, len: usize, ratio: f64) -> Vec<f64> {
        let keep = 1.0 / (1.0 - ratio);
        (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < ratio {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    }
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to `var`, zero if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Result<Matrix> {
        if var.tape != self.tape || var.index >= self.grads.len() {
            return Err(Error::ForeignVar);
        }
        let (rows, cols) = self.shapes[var.index];
        let g = &self.grads[var.index];
        if g.is_empty() {
            Ok(Matrix::zeros(rows, cols))
        } else {
            Matrix::from_vec(rows, cols, g.clone())
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        Ok(&self.nodes[self.idx(v)?])
    }

    pub fn leaf(&mut self, m: &Matrix) -> Var {
        self.push(m.data().to_vec(), m.rows(), m.cols(), Op::Leaf)
    }

    pub fn vector(&mut self, values: &[f64]) -> Var {
        self.push(values.to_vec(), values.len(), 1, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], 1, 1, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<(usize, usize)> {
        let n = self.node(v)?;
        Ok((n.rows, n.cols))
    }

    /// `w x + b` with `w` of shape `rows x cols`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.shape(w)?;
        self.linear(w, rows, cols, x, Some(b))
    }

    /// Treats the entries of `m` as a row-major `rows x cols` matrix and
    /// multiplies it with `x`.
    pub fn matvec(&mut self, m: Var, rows: usize, cols: usize, x: Var) -> Result<Var> {
        self.linear(m, rows, cols, x, None)
    }

    fn linear(
        &mut self,
        w: Var,
        rows: usize,
        cols: usize,
        x: Var,
        b: Option<Var>,
    ) -> Result<Var> {
        let (wi, xi) = (self.idx(w)?, self.idx(x)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let wv = &self.nodes[wi].value;
        let xv = &self.nodes[xi].value;
        if wv.len() != rows * cols || xv.len() != cols {
            return Err(shape_err(
                "affine",
                format!(
                    "weights hold {} values for {rows}x{cols}, input has {} entries",
                    wv.len(),
                    xv.len()
                ),
            ));
        }
        let mut out: Vec<f64> = if cols == 0 {
            vec![0.0; rows]
        } else {
            wv.chunks_exact(cols).map(|row| dot(row, xv)).collect()
        };
        if let Some(bi) = bi {
            let bv = &self.nodes[bi].value;
            if bv.len() != rows {
                return Err(shape_err(
                    "affine",
                    format!("bias has {} entries, expected {rows}", bv.len()),
                ));
            }
            for (o, b) in out.iter_mut().zip(bv) {
                *o += b;
            }
        }
        Ok(self.push(
            out,
            rows,
            1,
            Op::Linear {
                w: wi,
                x: xi,
                b: bi,
                rows,
                cols,
            },
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (na, nb) = (&self.nodes[ai], &self.nodes[bi]);
        if na.value.len() != nb.value.len() {
            return Err(shape_err(
                name,
                format!("{} vs {} entries", na.value.len(), nb.value.len()),
            ));
        }
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let (rows, cols) = (na.rows, na.cols);
        Ok(self.push(out, rows, cols, op(ai, bi)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Entrywise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let n = &self.nodes[ai];
        let out = n.value.iter().map(|v| v * c).collect();
        let (rows, cols) = (n.rows, n.cols);
        Ok(self.push(out, rows, cols, Op::Scale(ai, c)))
    }

    /// Vector times a one-entry scalar node.
    pub fn mul_scalar(&mut self, v: Var, s: Var) -> Result<Var> {
        let (vi, si) = (self.idx(v)?, self.idx(s)?);
        if self.nodes[si].value.len() != 1 {
            return Err(shape_err("mul_scalar", "scalar operand has more than one entry"));
        }
        let c = self.nodes[si].value[0];
        let n = &self.nodes[vi];
        let out = n.value.iter().map(|x| x * c).collect();
        let (rows, cols) = (n.rows, n.cols);
        Ok(self.push(out, rows, cols, Op::MulScalar(vi, si)))
    }

    /// Entrywise sum of equally-shaped inputs. The addends of each entry are
    /// summed in ascending order, so the result does not depend on the order
    /// in which operands are supplied.
    pub fn sorted_sum(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("sum of zero operands".into()));
        }
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = (self.nodes[idx[0]].rows, self.nodes[idx[0]].cols);
        let len = rows * cols;
        if idx.iter().any(|&i| self.nodes[i].value.len() != len) {
            return Err(shape_err("sorted_sum", "operands differ in length"));
        }
        let mut scratch = Vec::with_capacity(idx.len());
        let out = (0..len)
            .map(|k| {
                scratch.clear();
                scratch.extend(idx.iter().map(|&i| self.nodes[i].value[k]));
                sorted_total(&mut scratch)
            })
            .collect();
        Ok(self.push(out, rows, cols, Op::SortedSum(idx)))
    }

    /// Arithmetic mean, with the same order independence as [`Tape::sorted_sum`].
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let s = self.sorted_sum(parts)?;
        self.scale(s, 1.0 / parts.len() as f64)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let out: Vec<f64> = idx
            .iter()
            .flat_map(|&i| self.nodes[i].value.iter().copied())
            .collect();
        let len = out.len();
        Ok(self.push(out, len, 1, Op::Concat(idx)))
    }

    pub fn select(&mut self, v: Var, entry: usize) -> Result<Var> {
        let vi = self.idx(v)?;
        let x = *self.nodes[vi]
            .value
            .get(entry)
            .ok_or_else(|| shape_err("select", format!("entry {entry} out of range")))?;
        Ok(self.push(vec![x], 1, 1, Op::Select(vi, entry)))
    }

    /// `a^T M b` summed over the products `M[r][c] * (a[r] * b[c])` in
    /// ascending order. For a symmetric `M` swapping `a` and `b` gives a
    /// bit-identical result.
    pub fn bilinear(&mut self, m: Var, a: Var, b: Var) -> Result<Var> {
        let (mi, ai, bi) = (self.idx(m)?, self.idx(a)?, self.idx(b)?);
        let (rows, cols) = (self.nodes[mi].rows, self.nodes[mi].cols);
        let (av, bv, mv) = (
            &self.nodes[ai].value,
            &self.nodes[bi].value,
            &self.nodes[mi].value,
        );
        if av.len() != rows || bv.len() != cols {
            return Err(shape_err(
                "bilinear",
                format!("{rows}x{cols} form with {}- and {}-vectors", av.len(), bv.len()),
            ));
        }
        let mut terms = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                terms.push(mv[r * cols + c] * (av[r] * bv[c]));
            }
        }
        let total = sorted_total(&mut terms);
        Ok(self.push(vec![total], 1, 1, Op::Bilinear { m: mi, a: ai, b: bi }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = &self.nodes[xi];
        let out = n.value.iter().map(|&v| f(v)).collect();
        let (rows, cols) = (n.rows, n.cols);
        Ok(self.push(out, rows, cols, op(xi)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, softplus, Op::Softplus)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = &self.nodes[xi];
        let (rows, cols) = (n.rows, n.cols);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = n.value[r * cols + c];
            }
        }
        Ok(self.push(out, cols, rows, Op::Transpose(xi)))
    }

    /// Normalizes `x` to zero mean and unit variance, then applies the
    /// learnable `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let xv = &self.nodes[xi].value;
        let (gv, bv) = (&self.nodes[gi].value, &self.nodes[bi].value);
        if xv.is_empty() || gv.len() != xv.len() || bv.len() != xv.len() {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {} entries, gain {}, bias {}",
                    xv.len(),
                    gv.len(),
                    bv.len()
                ),
            ));
        }
        let (normed, _) = normalize(xv);
        let out = normed
            .iter()
            .zip(gv.iter().zip(bv))
            .map(|(h, (g, b))| g * h + b)
            .collect();
        let (rows, cols) = (self.nodes[xi].rows, self.nodes[xi].cols);
        Ok(self.push(
            out,
            rows,
            cols,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
            },
        ))
    }

    /// Inverted dropout. A zero ratio or a missing stream returns `x` as is.
    pub fn dropout(
        &mut self,
        x: Var,
        ratio: f64,
        stream: Option<&mut DropoutStream>,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!(
                "dropout ratio {ratio} outside [0, 1)"
            )));
        }
        let xi = self.idx(x)?;
        let Some(stream) = stream else {
            return Ok(x);
        };
        if ratio == 0.0 {
            return Ok(x);
        }
        let n = &self.nodes[xi];
        let mask = stream.mask(n.value.len(), ratio);
        let out = n.value.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let (rows, cols) = (n.rows, n.cols);
        Ok(self.push(out, rows, cols, Op::Dropout { x: xi, mask }))
    }

    /// Entrywise maximum over candidates. Each entry records the first
    /// candidate attaining the maximum and routes its gradient there.
    pub fn max_pool(&mut self, candidates: &[Var]) -> Result<Var> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("max-pool over no candidates".into()));
        }
        let idx = candidates
            .iter()
            .map(|&c| self.idx(c))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = (self.nodes[idx[0]].rows, self.nodes[idx[0]].cols);
        let len = rows * cols;
        if idx.iter().any(|&i| self.nodes[i].value.len() != len) {
            return Err(shape_err("max_pool", "candidates differ in length"));
        }
        let mut winner = vec![0u32; len];
        let mut out = self.nodes[idx[0]].value.clone();
        for (slot, &i) in idx.iter().enumerate().skip(1) {
            for (k, &v) in self.nodes[i].value.iter().enumerate() {
                if v > out[k] {
                    out[k] = v;
                    winner[k] = slot as u32;
                }
            }
        }
        Ok(self.push(
            out,
            rows,
            cols,
            Op::MaxPool {
                inputs: idx,
                winner,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = &self.nodes[xi];
        let out = softmax(&n.value)?;
        let (rows, cols) = (n.rows, n.cols);
        Ok(self.push(out, rows, cols, Op::Softmax(xi)))
    }

    /// `-ln p[label]`, with `p[label]` floored at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, p: Var, label: usize) -> Result<Var> {
        let pi = self.idx(p)?;
        let pv = &self.nodes[pi].value;
        let q = *pv.get(label).ok_or_else(|| {
            Error::InvalidArgument(format!("label {label} out of range for {} classes", pv.len()))
        })?;
        Ok(self.push(
            vec![-q.max(PROB_FLOOR).ln()],
            1,
            1,
            Op::CrossEntropy { p: pi, label },
        ))
    }

    /// Propagates the gradient of the one-entry node `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(shape_err("backward", "loss must be a single value"));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[li] = vec![1.0];

        for i in (0..=li).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.propagate(i, &g, &mut grads);
            grads[i] = g;
        }

        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| (n.rows, n.cols)).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let val = |j: usize| -> &[f64] { &self.nodes[j].value };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Linear {
                w,
                x,
                b,
                rows,
                cols,
            } => {
                let (wv, xv) = (val(w), val(x));
                {
                    let gw = slot(grads, w, rows * cols);
                    for r in 0..rows {
                        if g[r] != 0.0 {
                            let row = &mut gw[r * cols..(r + 1) * cols];
                            for (acc, xc) in row.iter_mut().zip(xv) {
                                *acc += g[r] * xc;
                            }
                        }
                    }
                }
                {
                    let gx = slot(grads, x, cols);
                    for r in 0..rows {
                        if g[r] != 0.0 {
                            let row = &wv[r * cols..(r + 1) * cols];
                            for (acc, wc) in gx.iter_mut().zip(row) {
                                *acc += g[r] * wc;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    add_into(slot(grads, b, rows), g);
                }
            }
            &Op::Add(a, b) => {
                add_into(slot(grads, a, g.len()), g);
                add_into(slot(grads, b, g.len()), g);
            }
            &Op::Sub(a, b) => {
                add_into(slot(grads, a, g.len()), g);
                for (acc, gv) in slot(grads, b, g.len()).iter_mut().zip(g) {
                    *acc -= gv;
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                for (k, acc) in slot(grads, a, g.len()).iter_mut().enumerate() {
                    *acc += g[k] * bv[k];
                }
                for (k, acc) in slot(grads, b, g.len()).iter_mut().enumerate() {
                    *acc += g[k] * av[k];
                }
            }
            &Op::Scale(a, c) => {
                for (acc, gv) in slot(grads, a, g.len()).iter_mut().zip(g) {
                    *acc += c * gv;
                }
            }
            &Op::MulScalar(v, s) => {
                let (vv, c) = (val(v), val(s)[0]);
                for (acc, gv) in slot(grads, v, g.len()).iter_mut().zip(g) {
                    *acc += c * gv;
                }
                slot(grads, s, 1)[0] += dot(g, vv);
            }
            Op::SortedSum(parts) => {
                for &p in parts {
                    add_into(slot(grads, p, g.len()), g);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    add_into(slot(grads, p, len), &g[offset..offset + len]);
                    offset += len;
                }
            }
            &Op::Select(v, entry) => {
                let len = val(v).len();
                slot(grads, v, len)[entry] += g[0];
            }
            &Op::Bilinear { m, a, b } => {
                let (mv, av, bv) = (val(m), val(a), val(b));
                let (rows, cols) = (av.len(), bv.len());
                let gm = slot(grads, m, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gm[r * cols + c] += g[0] * av[r] * bv[c];
                    }
                }
                let ga = slot(grads, a, rows);
                for r in 0..rows {
                    ga[r] += g[0] * dot(&mv[r * cols..(r + 1) * cols], bv);
                }
                let gb = slot(grads, b, cols);
                for c in 0..cols {
                    let col: f64 = (0..rows).map(|r| mv[r * cols + c] * av[r]).sum();
                    gb[c] += g[0] * col;
                }
            }
            &Op::Relu(x) => {
                let xv = val(x);
                for (k, acc) in slot(grads, x, g.len()).iter_mut().enumerate() {
                    if xv[k] > 0.0 {
                        *acc += g[k];
                    }
                }
            }
            &Op::Softplus(x) => {
                let xv = val(x);
                for (k, acc) in slot(grads, x, g.len()).iter_mut().enumerate() {
                    *acc += g[k] * sigmoid(xv[k]);
                }
            }
            &Op::Transpose(x) => {
                // this node is cols x rows of the parent
                let (rows, cols) = (self.nodes[x].rows, self.nodes[x].cols);
                let gx = slot(grads, x, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }
            &Op::LayerNorm { x, gain, bias } => {
                let (xv, gv) = (val(x), val(gain));
                let (normed, inv_std) = normalize(xv);
                let len = xv.len() as f64;
                let gy: Vec<f64> = g.iter().zip(gv).map(|(a, b)| a * b).collect();
                let mean_gy = gy.iter().sum::<f64>() / len;
                let mean_gy_h = dot(&gy, &normed) / len;
                for (k, acc) in slot(grads, x, g.len()).iter_mut().enumerate() {
                    *acc += inv_std * (gy[k] - mean_gy - normed[k] * mean_gy_h);
                }
                for (k, acc) in slot(grads, gain, g.len()).iter_mut().enumerate() {
                    *acc += g[k] * normed[k];
                }
                add_into(slot(grads, bias, g.len()), g);
            }
            Op::Dropout { x, mask } => {
                for (k, acc) in slot(grads, *x, g.len()).iter_mut().enumerate() {
                    *acc += g[k] * mask[k];
                }
            }
            Op::MaxPool { inputs, winner } => {
                for (k, &w) in winner.iter().enumerate() {
                    let target = inputs[w as usize];
                    slot(grads, target, g.len())[k] += g[k];
                }
            }
            &Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let gy = dot(g, y);
                for (k, acc) in slot(grads, x, g.len()).iter_mut().enumerate() {
                    *acc += y[k] * (g[k] - gy);
                }
            }
            &Op::CrossEntropy { p, label } => {
                let pv = val(p);
                let q = pv[label];
                if q > PROB_FLOOR {
                    slot(grads, p, pv.len())[label] -= g[0] / q;
                }
            }
        }
    }
}

fn slot(grads: &mut [Vec<f64>], j: usize, len: usize) -> &mut Vec<f64> {
    let s = &mut grads[j];
    if s.is_empty() {
        s.resize(len, 0.0);
    }
    s
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn sorted_total(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let len = x.len() as f64;
    let mean = x.iter().sum::<f64>() / len;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for a positive target.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a plain slice.
pub fn softmax(s: &[f64]) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `-ln p[label]` with the same probability floor as the tape operation.
pub fn cross_entropy(p: &[f64], label: usize) -> Result<f64> {
    let q = p.get(label).ok_or_else(|| {
        Error::InvalidArgument(format!("label {label} out of range for {} classes", p.len()))
    })?;
    Ok(-q.max(PROB_FLOOR).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn affine_examples() {
        let mut t = Tape::new();
        let x = t.vector(&[1.0, 2.0]);
        let w = t.leaf(&Matrix::identity(2));
        let b = t.vector(&[0.0, 0.0]);
        let y = t.affine(w, x, b).unwrap();
        assert_eq!(t.value(y).unwrap(), &[1.0, 2.0]);

        let x = t.vector(&[1.0, 1.0]);
        let w = t.leaf(&Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap());
        let b = t.vector(&[-5.0]);
        let y = t.affine(w, x, b).unwrap();
        assert_eq!(t.value(y).unwrap(), &[0.0]);
    }

    #[test]
    fn affine_matches_hand_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut expected = vec![0.0; 8];
        for r in 0..8 {
            let mut acc = 0.0;
            for c in 0..8 {
                acc += w[r * 8 + c] * x[c];
            }
            expected[r] = acc + b[r];
        }
        let mut t = Tape::new();
        let wv = t.leaf(&Matrix::from_vec(8, 8, w).unwrap());
        let xv = t.vector(&x);
        let bv = t.vector(&b);
        let y = t.affine(wv, xv, bv).unwrap();
        for (got, want) in t.value(y).unwrap().iter().zip(&expected) {
            assert!(close(*got, *want, 1e-12));
        }
    }

    #[test]
    fn affine_rejects_mismatch() {
        let mut t = Tape::new();
        let w = t.leaf(&Matrix::zeros(2, 3));
        let x = t.vector(&[1.0, 2.0]);
        let b = t.vector(&[0.0, 0.0]);
        let err = t.affine(w, x, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "affine", .. }));
        let x = t.vector(&[1.0, 2.0, 3.0]);
        let b = t.vector(&[0.0]);
        assert!(t.affine(w, x, b).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-40.0, 0.0, 3.5, 700.0] {
            for p in softmax(&[c, c, c]).unwrap() {
                assert!(close(p, 1.0 / 3.0, 1e-15));
            }
        }
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (k, v) in p.iter().enumerate() {
            assert!(close(*v, ((k + 1) as f64).exp() / z, 1e-14));
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[1.0, 0.0], 0).unwrap() <= 1e-7);
        assert!(close(cross_entropy(&[0.5, 0.5], 1).unwrap(), 2f64.ln(), 1e-15));
        assert!(close(cross_entropy(&[0.1, 0.9], 0).unwrap(), -(0.1f64.ln()), 1e-15));
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        // floor keeps -ln 0 finite
        assert!(close(cross_entropy(&[0.0, 1.0], 0).unwrap(), -(PROB_FLOOR.ln()), 1e-15));
    }

    #[test]
    fn relu_layer_norm_dropout_examples() {
        let mut t = Tape::new();
        let x = t.vector(&[-1.0, 2.0]);
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).unwrap(), &[0.0, 2.0]);

        let c = t.vector(&[0.7; 5]);
        let g = t.vector(&[1.0; 5]);
        let b = t.vector(&[0.0; 5]);
        let n = t.layer_norm(c, g, b).unwrap();
        assert!(t.value(n).unwrap().iter().all(|v| v.abs() < 1e-9));

        let x = t.vector(&[1.0, -2.0, 3.0, 4.0]);
        let n = t.layer_norm(x, g, b);
        assert!(n.is_err());
        let g4 = t.vector(&[1.0; 4]);
        let b4 = t.vector(&[0.0; 4]);
        let n = t.layer_norm(x, g4, b4).unwrap();
        let v = t.value(n).unwrap();
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-5);

        let mut stream = DropoutStream::new(3, &[0]);
        let d = t.dropout(x, 0.0, Some(&mut stream)).unwrap();
        assert_eq!(d, x);
        assert!(t.dropout(x, 1.0, Some(&mut stream)).is_err());
    }

    #[test]
    fn dropout_zeroes_and_rescales() {
        let mut t = Tape::new();
        let x = t.vector(&[1.0; 20_000]);
        let mut stream = DropoutStream::new(11, &[1, 2]);
        let d = t.dropout(x, 0.3, Some(&mut stream)).unwrap();
        let v = t.value(d).unwrap();
        let zeros = v.iter().filter(|&&a| a == 0.0).count() as f64 / v.len() as f64;
        assert!((zeros - 0.3).abs() < 0.02);
        assert!(v
            .iter()
            .all(|&a| a == 0.0 || close(a, 1.0 / 0.7, 1e-15)));
    }

    #[test]
    fn backward_simple_product() {
        let mut t = Tape::new();
        let w = t.vector(&[0.5]);
        let x = t.vector(&[3.0]);
        let y = t.mul(w, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_zero_for_disconnected_and_rejects_foreign() {
        let mut t = Tape::new();
        let used = t.vector(&[1.0, 2.0]);
        let unused = t.leaf(&Matrix::zeros(2, 2));
        let s = t.softmax(used).unwrap();
        let l = t.cross_entropy(s, 1).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(unused).unwrap(), Matrix::zeros(2, 2));

        let mut other = Tape::new();
        let foreign = other.scalar(1.0);
        assert!(matches!(g.wrt(foreign), Err(Error::ForeignVar)));
        assert!(matches!(t.relu(foreign), Err(Error::ForeignVar)));
    }

    #[test]
    fn sorted_sum_is_order_independent() {
        let vals = [1e16, 1.0, -1e16, 3.0, 0.1];
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|&v| t.scalar(v)).collect();
        let a = t.sorted_sum(&vars).unwrap();
        let rev: Vec<Var> = vars.iter().rev().copied().collect();
        let b = t.sorted_sum(&rev).unwrap();
        assert_eq!(t.value(a).unwrap()[0].to_bits(), t.value(b).unwrap()[0].to_bits());
    }

    #[test]
    fn max_pool_routes_to_first_winner() {
        let mut t = Tape::new();
        let a = t.vector(&[1.0, 5.0]);
        let b = t.vector(&[1.0, 2.0]);
        let m = t.max_pool(&[a, b]).unwrap();
        assert_eq!(t.value(m).unwrap(), &[1.0, 5.0]);
        let w = t.vector(&[1.0, 1.0]);
        let s = t.mul(m, w).unwrap();
        let total = t.sorted_sum(&[s]).unwrap();
        let first = t.select(total, 0).unwrap();
        let second = t.select(total, 1).unwrap();
        let l = t.add(first, second).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[0.0, 0.0]);
        assert!(t.max_pool(&[]).is_err());
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-3, 0.1, 0.5, 2.0, 40.0] {
            assert!(close(softplus(softplus_inverse(y)), y, 1e-12));
        }
    }
}
