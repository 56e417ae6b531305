use super::kernels::{self, AttnShape, LayerNormCache};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        cache: LayerNormCache<T>,
    },
    Gelu(Var),
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    AttentionMix {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
        shape: AttnShape,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Parameters of one causal self-attention sublayer, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Record of primitive applications. Nodes are appended in evaluation
/// order, so reverse index order is a valid reverse topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `y = x·W + b` applied to the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.last() != ws.first() {
            return Err(Error::Shape(format!("affine: x {xs:?} against weight {ws:?}")));
        }
        let (d_in, d_out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::Shape(format!(
                    "affine: bias {:?} against weight {ws:?}",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).rows();
        let y = kernels::affine(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            d_in,
            d_out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        Ok(self.push(Tensor::from_vec(shape, y)?, Op::Affine { x, w, b }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: x {:?}, gain {:?}, shift {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(shift)
            )));
        }
        let (y, cache) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(shift).data(),
            d,
            eps,
        );
        let value = Tensor::from_vec(self.shape(x).to_vec(), y)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                cache,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::from_vec(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).cols();
        let data = kernels::softmax_rows(self.value(x).data(), d);
        let value = Tensor::from_vec(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(x))
    }

    /// Gathers rows of `table` (shape `[n, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= n {
                return Err(Error::Index { index: id, size: n });
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mixes projected queries, keys and values under a strict causal mask.
    /// Inputs are `[batch * seq, d]` with batch-major rows.
    pub fn attention_mix(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = (self.value(q).rows(), self.value(q).cols());
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::Shape(format!(
                "attention: {rows} rows do not split into sequences of {seq}"
            )));
        }
        let shape = AttnShape {
            batch: rows / seq,
            seq,
            heads,
            head_dim: d / heads,
        };
        let (out, probs) = kernels::attention_mix(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
        );
        let value = Tensor::from_vec(vec![rows, d], out)?;
        Ok(self.push(
            value,
            Op::AttentionMix {
                q,
                k,
                v,
                probs,
                shape,
            },
        ))
    }

    /// Multi-head causal self-attention with query/key/value/output projections.
    pub fn causal_attention(
        &mut self,
        x: Var,
        p: &AttentionVars,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let d = self.value(x).cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        let q = self.affine(x, p.wq, Some(p.bq))?;
        let k = self.affine(x, p.wk, Some(p.bk))?;
        let v = self.affine(x, p.wv, Some(p.bv))?;
        let mixed = self.attention_mix(q, k, v, seq, heads)?;
        self.affine(mixed, p.wo, Some(p.bo))
    }

    /// Attention weights `[batch, head, i, j]` saved by an attention-mix node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::AttentionMix { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean cross-entropy over rows with `Some` target; rows with `None`
    /// contribute nothing. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var> {
        let (rows, v) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().flatten().find(|&&t| t as usize >= v) {
            return Err(Error::Index {
                index: t as usize,
                size: v,
            });
        }
        let (loss, probs, count) = kernels::cross_entropy(self.value(logits).data(), targets, v);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward() needs a scalar root");
        self.backward_with(root, vec![T::one()]);
    }

    /// Backpropagates `seed` (same shape as `root`) through every node that
    /// `root` depends on. Gradients accumulate into existing ones.
    pub fn backward_with(&mut self, root: Var, seed: Vec<T>) {
        assert_eq!(seed.len(), self.value(root).len(), "seed shape");
        self.accumulate(root, seed);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                self.accumulate(v, c);
            }
        }
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let slot = &mut self.nodes[v.0].grad;
        match slot {
            None => *slot = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Affine { x, w, b } => {
                let ws = self.shape(*w);
                let (d_in, d_out) = (ws[0], ws[1]);
                let rows = self.nodes[x.0].value.rows();
                let gr = kernels::affine_backward(g, val(*x), val(*w), rows, d_in, d_out);
                let mut out = vec![(*x, gr.dx), (*w, gr.dw)];
                if let Some(b) = b {
                    out.push((*b, gr.db));
                }
                out
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                cache,
            } => {
                let d = self.nodes[x.0].value.cols();
                let (dx, dg, ds) = kernels::layer_norm_backward(g, cache, val(*gain), d);
                vec![(*x, dx), (*gain, dg), (*shift, ds)]
            }
            Op::Gelu(x) => {
                let dx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| gv * kernels::gelu_grad(xv))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let d = self.nodes[i].value.cols();
                vec![(*x, kernels::softmax_rows_backward(g, y, d))]
            }
            Op::Embedding { table, ids } => {
                let t = &self.nodes[table.0].value;
                let d = t.cols();
                let mut dt = vec![T::zero(); t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
                vec![(*table, dt)]
            }
            Op::AttentionMix {
                q,
                k,
                v,
                probs,
                shape,
            } => {
                let (dq, dk, dv) =
                    kernels::attention_mix_backward(g, val(*q), val(*k), val(*v), probs, *shape);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.nodes[logits.0].value.cols();
                let mut dl = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let row = r * v;
                            for c in 0..v {
                                dl[row + c] = probs[row + c] * scale;
                            }
                            dl[row + t as usize] -= scale;
                        }
                    }
                }
                vec![(*logits, dl)]
            }
        }
    }
}
