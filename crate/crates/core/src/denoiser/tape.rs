//! Tape-based reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every node holds a 2-D value. Operations are recorded in evaluation order,
//! so walking the tape backwards from a scalar output visits each node after
//! all of its consumers. Nodes that do not depend on a parameter are marked
//! constant and never receive a gradient.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// x + b with b a 1×m row broadcast over all rows.
    AddRow(NodeId, NodeId),
    /// out[i] = x[i] + table[index[i]]; rows with no index pass through.
    AddGathered {
        x: NodeId,
        table: NodeId,
        index: Vec<Option<usize>>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Array2<f64>,
        inv_std: Array1<f64>,
    },
    /// Keeps tanh of the inner polynomial for the backward pass.
    Gelu {
        x: NodeId,
        tanh: Array2<f64>,
    },
    /// Single-head scaled dot-product attention inside each row group.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: Vec<Vec<usize>>,
        probs: Vec<Array2<f64>>,
        scale: f64,
    },
    /// Σ_rows ‖x_r − target_r‖₂
    NormSum {
        x: NodeId,
        target: Array2<f64>,
    },
    /// Σ (x − target)²
    SqSum {
        x: NodeId,
        target: Array2<f64>,
    },
    Scale(NodeId, f64),
}

/// tanh through a single `exp`; saturates cleanly for large |u|.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.nodes[id].value.view()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn grad_flag(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.dot(&self.nodes[b].value);
        let g = self.grad_flag(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let g = self.grad_flag(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[row].value.nrows(),
            1,
            "broadcast operand must be a row"
        );
        let value = &self.nodes[x].value + &self.nodes[row].value;
        let g = self.grad_flag(&[x, row]);
        self.push(value, Op::AddRow(x, row), g)
    }

    pub fn add_gathered(&mut self, x: NodeId, table: NodeId, index: Vec<usize>) -> NodeId {
        self.add_gathered_partial(x, table, index.into_iter().map(Some).collect())
    }

    pub fn add_gathered_partial(
        &mut self,
        x: NodeId,
        table: NodeId,
        index: Vec<Option<usize>>,
    ) -> NodeId {
        let xv = &self.nodes[x].value;
        let tv = &self.nodes[table].value;
        assert_eq!(index.len(), xv.nrows());
        assert_eq!(tv.ncols(), xv.ncols());
        let mut value = xv.clone();
        for (mut row, i) in value.axis_iter_mut(Axis(0)).zip(&index) {
            if let Some(i) = *i {
                row += &tv.row(i);
            }
        }
        let g = self.grad_flag(&[x, table]);
        self.push(value, Op::AddGathered { x, table, index }, g)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let cols = xv.ncols() as f64;
        let mut normalized = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (mut row, s) in normalized.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let inv = *s;
            row.mapv_inplace(|v| v * inv);
        }
        let value = &normalized * &self.nodes[gamma].value + &self.nodes[beta].value;
        let g = self.grad_flag(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            g,
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let tanh = xv.mapv(|v| fast_tanh(GELU_C * (v + GELU_A * v * v * v)));
        let value = Zip::from(xv)
            .and(&tanh)
            .map_collect(|&v, &th| 0.5 * v * (1.0 + th));
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Gelu { x, tanh }, g)
    }

    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        groups: Vec<Vec<usize>>,
    ) -> NodeId {
        let (qv, kv, vv) = (
            &self.nodes[q].value,
            &self.nodes[k].value,
            &self.nodes[v].value,
        );
        let scale = 1.0 / (qv.ncols() as f64).sqrt();
        let mut value = Array2::zeros((qv.nrows(), vv.ncols()));
        let mut probs = Vec::with_capacity(groups.len());
        for rows in &groups {
            let qg = qv.select(Axis(0), rows);
            let kg = kv.select(Axis(0), rows);
            let vg = vv.select(Axis(0), rows);
            let mut p = qg.dot(&kg.t());
            for mut r in p.axis_iter_mut(Axis(0)) {
                let max = r.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
                r.mapv_inplace(|s| ((s - max) * scale).exp());
                let sum = r.sum();
                r.mapv_inplace(|e| e / sum);
            }
            let og = p.dot(&vg);
            for (o, &row) in og.axis_iter(Axis(0)).zip(rows) {
                value.row_mut(row).assign(&o);
            }
            probs.push(p);
        }
        let g = self.grad_flag(&[q, k, v]);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                groups,
                probs,
                scale,
            },
            g,
        )
    }

    pub fn norm_sum(&mut self, x: NodeId, target: Array2<f64>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.dim(), target.dim());
        let total: f64 = xv
            .axis_iter(Axis(0))
            .zip(target.axis_iter(Axis(0)))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        let g = self.grad_flag(&[x]);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::NormSum { x, target },
            g,
        )
    }

    pub fn sq_sum(&mut self, x: NodeId, target: Array2<f64>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.dim(), target.dim());
        let total: f64 = Zip::from(xv)
            .and(&target)
            .fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q));
        let g = self.grad_flag(&[x]);
        self.push(Array2::from_elem((1, 1), total), Op::SqSum { x, target }, g)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = &self.nodes[x].value * factor;
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Scale(x, factor), g)
    }

    /// Gradients of the 1×1 node `output` with respect to every node.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[output].value.dim(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(Array2::ones((1, 1)));

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            // Leaves keep their gradient; interior nodes pass it on.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let wants = |id: NodeId| self.nodes[id].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.dot(&self.nodes[*b].value.t()));
                }
                if wants(*b) {
                    accumulate(grads, *b, self.nodes[*a].value.t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if wants(*row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddGathered { x, table, index } => {
                if wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if wants(*table) {
                    let mut gt = Array2::zeros(self.nodes[*table].value.raw_dim());
                    for (row, i) in g.axis_iter(Axis(0)).zip(index) {
                        if let Some(i) = *i {
                            let mut dst = gt.row_mut(i);
                            dst += &row;
                        }
                    }
                    accumulate(grads, *table, gt);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                if wants(*gamma) {
                    let dg = (g * normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *gamma, dg);
                }
                if wants(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if wants(*x) {
                    let dxhat = g * &self.nodes[*gamma].value;
                    let cols = dxhat.ncols() as f64;
                    let mut dx = Array2::zeros(dxhat.raw_dim());
                    for (((mut out, dh), xh), &inv) in dx
                        .axis_iter_mut(Axis(0))
                        .zip(dxhat.axis_iter(Axis(0)))
                        .zip(normalized.axis_iter(Axis(0)))
                        .zip(inv_std.iter())
                    {
                        let sum_dh = dh.sum();
                        let sum_dh_xh: f64 = dh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &h| {
                            *o = inv / cols * (cols * d - sum_dh - h * sum_dh_xh);
                        });
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gelu { x, tanh } => {
                let dx = Zip::from(g)
                    .and(&self.nodes[*x].value)
                    .and(tanh)
                    .map_collect(|&g, &v, &th| {
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    });
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                probs,
                scale,
            } => {
                let (qv, kv, vv) = (
                    &self.nodes[*q].value,
                    &self.nodes[*k].value,
                    &self.nodes[*v].value,
                );
                let mut dq = Array2::zeros(qv.raw_dim());
                let mut dk = Array2::zeros(kv.raw_dim());
                let mut dv = Array2::zeros(vv.raw_dim());
                for (rows, p) in groups.iter().zip(probs) {
                    let go = g.select(Axis(0), rows);
                    let vg = vv.select(Axis(0), rows);
                    let dvg = p.t().dot(&go);
                    let dp = go.dot(&vg.t());
                    // softmax backward, folded with the 1/sqrt(C) scaling
                    let mut ds = dp;
                    for (mut d, pr) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                        let dot: f64 = d.iter().zip(pr).map(|(a, b)| a * b).sum();
                        Zip::from(&mut d)
                            .and(&pr)
                            .for_each(|x, &p| *x = p * (*x - dot) * scale);
                    }
                    let qg = qv.select(Axis(0), rows);
                    let kg = kv.select(Axis(0), rows);
                    let dqg = ds.dot(&kg);
                    let dkg = ds.t().dot(&qg);
                    for (i, &row) in rows.iter().enumerate() {
                        dq.row_mut(row).assign(&dqg.row(i));
                        dk.row_mut(row).assign(&dkg.row(i));
                        dv.row_mut(row).assign(&dvg.row(i));
                    }
                }
                if wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::NormSum { x, target } => {
                let s = g[[0, 0]];
                let mut dx = &self.nodes[*x].value - target;
                for mut row in dx.axis_iter_mut(Axis(0)) {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    // zero residual: take the zero subgradient
                    let f = if n > 0.0 { s / n } else { 0.0 };
                    row.mapv_inplace(|v| v * f);
                }
                accumulate(grads, *x, dx);
            }
            Op::SqSum { x, target } => {
                let s = 2.0 * g[[0, 0]];
                accumulate(grads, *x, (&self.nodes[*x].value - target) * s);
            }
            Op::Scale(x, factor) => accumulate(grads, *x, g * *factor),
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Takes the gradient of a leaf; leaves the output never reached get `None`.
    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    /// Checks d(build)/d(leaf) against central differences for every leaf entry.
    fn check<F>(leaves: Vec<Array2<f64>>, build: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<_> = leaves.iter().map(|l| tape.param(l.clone())).collect();
        let out = build(&mut tape, &ids);
        let mut grads = tape.backward(out);
        let eval = |leaves: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let ids: Vec<_> = leaves.iter().map(|l| tape.param(l.clone())).collect();
            let out = build(&mut tape, &ids);
            tape.value(out)[[0, 0]]
        };
        let h = 1e-5;
        for (li, &id) in ids.iter().enumerate() {
            let analytic = grads
                .take(id)
                .unwrap_or_else(|| Array2::zeros(leaves[li].raw_dim()));
            for idx in 0..leaves[li].len() {
                let (r, c) = (idx / leaves[li].ncols(), idx % leaves[li].ncols());
                let mut plus = leaves.clone();
                plus[li][[r, c]] += h;
                let mut minus = leaves.clone();
                minus[li][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * a.abs().max(numeric.abs()).max(1.0),
                    "leaf {li} [{r},{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_value() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.constant(array![[1.0], [1.0]]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), array![[3.0], [7.0]]);
    }

    #[test]
    fn gradient_of_linear_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = random(&mut rng, 4, 3);
        let leaves = vec![
            random(&mut rng, 4, 5),
            random(&mut rng, 5, 3),
            random(&mut rng, 1, 3),
        ];
        check(leaves, |tape, ids| {
            let m = tape.matmul(ids[0], ids[1]);
            let y = tape.add_row(m, ids[2]);
            tape.sq_sum(y, target.clone())
        });
    }

    #[test]
    fn gradient_of_layer_norm_and_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = random(&mut rng, 3, 6);
        let leaves = vec![
            random(&mut rng, 3, 6),
            random(&mut rng, 1, 6),
            random(&mut rng, 1, 6),
        ];
        check(leaves, |tape, ids| {
            let n = tape.layer_norm(ids[0], ids[1], ids[2]);
            let g = tape.gelu(n);
            let s = tape.scale(g, 0.5);
            tape.norm_sum(s, target.clone())
        });
    }

    #[test]
    fn gradient_of_grouped_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = random(&mut rng, 6, 4);
        let groups = vec![vec![0, 2, 4], vec![1, 3, 5]];
        let leaves = vec![
            random(&mut rng, 6, 4),
            random(&mut rng, 6, 4),
            random(&mut rng, 6, 4),
        ];
        check(leaves, |tape, ids| {
            let o = tape.attention(ids[0], ids[1], ids[2], groups.clone());
            tape.norm_sum(o, target.clone())
        });
    }

    #[test]
    fn gradient_of_gather_and_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = random(&mut rng, 5, 3);
        let leaves = vec![random(&mut rng, 5, 3), random(&mut rng, 2, 3)];
        check(leaves, |tape, ids| {
            let a = tape.add_gathered_partial(
                ids[0],
                ids[1],
                vec![Some(0), None, Some(1), Some(0), None],
            );
            let b = tape.add(a, ids[0]);
            tape.norm_sum(b, target.clone())
        });
    }

    #[test]
    fn shared_leaf_gradients_sum() {
        let mut tape = Tape::new();
        let w = tape.param(array![[2.0]]);
        let a = tape.constant(array![[3.0]]);
        let b = tape.constant(array![[5.0]]);
        let x = tape.matmul(a, w);
        let y = tape.matmul(b, w);
        let s = tape.add(x, y);
        let l = tape.sq_sum(s, array![[0.0]]);
        let grads = tape.backward(l);
        // d/dw (8w)^2 = 128 w
        assert_eq!(grads.get(w).unwrap()[[0, 0]], 256.0);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn norm_sum_zero_residual_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(array![[1.0, 2.0, 3.0]]);
        let l = tape.norm_sum(x, array![[1.0, 2.0, 3.0]]);
        let grads = tape.backward(l);
        assert_eq!(tape.value(l)[[0, 0]], 0.0);
        assert!(grads.get(x).unwrap().iter().all(|&g| g == 0.0));
    }
}
