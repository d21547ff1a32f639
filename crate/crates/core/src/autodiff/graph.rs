use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{DiffError, Tensor};

/// Handle to a node inside one [`Graph`]. Ids are not interchangeable
/// between graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf bound at evaluation time; no gradient is reported for it.
    Input,
    /// Leaf bound at evaluation time; gradients are accumulated and reported.
    Param,
    /// x[B,K] (or [K]) times w[K,N] plus row-broadcast bias b[N].
    Affine,
    /// x[B,C,H,W] * k[OC,C,KH,KW] + b[OC], padding 1, floor-divided stride.
    Conv2d(ConvGeom),
    Relu,
    Add,
    Sub,
    Mul,
    Square,
    Sum,
    Mean,
    Reshape,
    Concat,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    /// Leaf name; `None` for interior nodes.
    name: Option<String>,
}

/// Leaf values for one evaluation, keyed by leaf name.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    map: HashMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

/// Cached forward values for every node of a graph.
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }
}

/// Gradient of the root with respect to each parameter leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn from_map(map: HashMap<String, Tensor>) -> Self {
        Self { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> HashMap<String, Tensor> {
        self.map
    }
}

/// A fixed-shape computation graph. Append-only; insertion order is
/// topological by construction.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, name: Option<String>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            name,
        });
        id
    }

    fn leaf(&mut self, op: Op, name: &str, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        if self.leaves.contains_key(name) {
            return Err(DiffError::DuplicateLeaf(name.to_string()));
        }
        let id = self.push(op, vec![], shape, Some(name.to_string()));
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declare a data leaf (no gradient reported).
    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        self.leaf(Op::Input, name, shape)
    }

    /// Declare a trainable leaf (gradient reported by `backward`).
    pub fn param(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        self.leaf(Op::Param, name, shape)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Look up an already-declared leaf by name.
    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Names of all parameter leaves, in declaration order.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Param))
            .map(|n| n.name.clone().unwrap())
            .collect()
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let (batch, k) = match xs.len() {
            1 => (None, xs[0]),
            2 => (Some(xs[0]), xs[1]),
            _ => {
                return Err(shape_err("affine", format!("input rank {} not 1 or 2", xs.len())));
            }
        };
        if ws.len() != 2 || ws[0] != k {
            return Err(shape_err(
                "affine",
                format!("weight {ws:?} incompatible with input {xs:?}"),
            ));
        }
        let n = ws[1];
        if bs != [n] {
            return Err(shape_err("affine", format!("bias {bs:?}, expected [{n}]")));
        }
        let out = match batch {
            Some(bsz) => vec![bsz, n],
            None => vec![n],
        };
        Ok(self.push(Op::Affine, vec![x, w, b], out, None))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize) -> Result<NodeId, DiffError> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected x rank 4 and kernel rank 4, got {xs:?} and {ks:?}"),
            ));
        }
        let (batch, in_ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_ch, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != in_ch {
            return Err(shape_err(
                "conv2d",
                format!("kernel channels {kc} != input channels {in_ch}"),
            ));
        }
        if bs != [out_ch] {
            return Err(shape_err("conv2d", format!("bias {bs:?}, expected [{out_ch}]")));
        }
        let geom = ConvGeom::new(in_ch, h, w, out_ch, kh, kw, stride)
            .ok_or_else(|| shape_err("conv2d", format!("invalid geometry {xs:?} k {ks:?} stride {stride}")))?;
        let out = vec![batch, out_ch, geom.out_h, geom.out_w];
        Ok(self.push(Op::Conv2d(geom), vec![x, k, b], out, None))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu, vec![x], shape, None)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Square, vec![x], shape, None)
    }

    fn elementwise(&mut self, op: Op, name: &str, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, vec![a, b], shape, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.elementwise(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.elementwise(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.elementwise(Op::Mul, "mul", a, b)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x], vec![1], None)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, vec![x], vec![1], None)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.shape(x).iter().product::<usize>() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(x), shape),
            ));
        }
        Ok(self.push(Op::Reshape, vec![x], shape, None))
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.is_empty() {
            return Err(shape_err("concat", "rank-0 input".into()));
        }
        let mut dim0 = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(shape_err(
                    "concat",
                    format!("trailing dims differ: {s:?} vs {first:?}"),
                ));
            }
            dim0 += s[0];
        }
        let mut out = first;
        out[0] = dim0;
        Ok(self.push(Op::Concat, parts.to_vec(), out, None))
    }

    /// Evaluate every node given leaf bindings; intermediate values are
    /// cached for `backward`.
    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation, DiffError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input | Op::Param => {
                    let name = node.name.as_deref().unwrap();
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| DiffError::UnboundLeaf(name.to_string()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(shape_err(
                            "bind",
                            format!("leaf '{}' declared {:?}, bound {:?}", name, node.shape, t.shape()),
                        ));
                    }
                    t.clone()
                }
                Op::Affine => {
                    let x = &values[node.inputs[0].0];
                    let w = &values[node.inputs[1].0];
                    let b = &values[node.inputs[2].0];
                    eval_affine(x, w, b, &node.shape)
                }
                Op::Conv2d(geom) => {
                    let x = &values[node.inputs[0].0];
                    let k = &values[node.inputs[1].0];
                    let b = &values[node.inputs[2].0];
                    eval_conv2d(x, k, b, geom, &node.shape)
                }
                Op::Relu => {
                    let x = &values[node.inputs[0].0];
                    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    Tensor::new(node.shape.clone(), data).unwrap()
                }
                Op::Square => {
                    let x = &values[node.inputs[0].0];
                    let data = x.data().iter().map(|&v| v * v).collect();
                    Tensor::new(node.shape.clone(), data).unwrap()
                }
                Op::Add | Op::Sub | Op::Mul => {
                    let a = values[node.inputs[0].0].data();
                    let b = values[node.inputs[1].0].data();
                    let data = match node.op {
                        Op::Add => a.iter().zip(b).map(|(x, y)| x + y).collect(),
                        Op::Sub => a.iter().zip(b).map(|(x, y)| x - y).collect(),
                        _ => a.iter().zip(b).map(|(x, y)| x * y).collect(),
                    };
                    Tensor::new(node.shape.clone(), data).unwrap()
                }
                Op::Sum => Tensor::scalar(values[node.inputs[0].0].data().iter().sum()),
                Op::Mean => {
                    let x = &values[node.inputs[0].0];
                    Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
                }
                Op::Reshape => values[node.inputs[0].0].clone().reshaped(node.shape.clone()),
                Op::Concat => {
                    let mut data = Vec::with_capacity(node.shape.iter().product());
                    for &p in &node.inputs {
                        data.extend_from_slice(values[p.0].data());
                    }
                    Tensor::new(node.shape.clone(), data).unwrap()
                }
            };
            values.push(v);
        }
        Ok(Evaluation { values })
    }

    /// Reverse-accumulate d(root)/d(param) for every parameter leaf.
    /// The root must be scalar; accumulators start from zero on every call.
    pub fn backward(&self, eval: &Evaluation, root: NodeId) -> Result<Gradients, DiffError> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        let mut out = Gradients::default();
        for idx in (0..=root.0).rev() {
            let gy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    let name = node.name.clone().unwrap();
                    let t = Tensor::new(node.shape.clone(), gy).unwrap();
                    out.map.insert(name, t);
                }
                Op::Affine => {
                    let x = &eval.values[node.inputs[0].0];
                    let w = &eval.values[node.inputs[1].0];
                    let (bsz, k) = match x.shape().len() {
                        1 => (1, x.shape()[0]),
                        _ => (x.shape()[0], x.shape()[1]),
                    };
                    let n = w.shape()[1];
                    // d/dx = gy . w^T
                    let gx = acc_buf(&mut grads, node.inputs[0], x.numel());
                    kernels::matmul_nt_acc(&gy, w.data(), gx, bsz, n, k);
                    // d/dw = x^T . gy
                    let gw = acc_buf(&mut grads, node.inputs[1], w.numel());
                    kernels::matmul_tn_acc(x.data(), &gy, gw, bsz, k, n);
                    // d/db = column sums of gy
                    let gb = acc_buf(&mut grads, node.inputs[2], n);
                    for row in gy.chunks_exact(n) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
                Op::Conv2d(geom) => {
                    backward_conv2d(node, geom, &gy, eval, &mut grads);
                }
                Op::Relu => {
                    let x = eval.values[node.inputs[0].0].data();
                    let gx = acc_buf(&mut grads, node.inputs[0], x.len());
                    for i in 0..x.len() {
                        if x[i] > 0.0 {
                            gx[i] += gy[i];
                        }
                    }
                }
                Op::Square => {
                    let x = eval.values[node.inputs[0].0].data();
                    let gx = acc_buf(&mut grads, node.inputs[0], x.len());
                    for i in 0..x.len() {
                        gx[i] += 2.0 * x[i] * gy[i];
                    }
                }
                Op::Add => {
                    for &inp in &node.inputs {
                        let g = acc_buf(&mut grads, inp, gy.len());
                        for (a, &b) in g.iter_mut().zip(&gy) {
                            *a += b;
                        }
                    }
                }
                Op::Sub => {
                    let ga = acc_buf(&mut grads, node.inputs[0], gy.len());
                    for (a, &b) in ga.iter_mut().zip(&gy) {
                        *a += b;
                    }
                    let gb = acc_buf(&mut grads, node.inputs[1], gy.len());
                    for (a, &b) in gb.iter_mut().zip(&gy) {
                        *a -= b;
                    }
                }
                Op::Mul => {
                    let av = eval.values[node.inputs[0].0].data().to_vec();
                    let bv = eval.values[node.inputs[1].0].data().to_vec();
                    let ga = acc_buf(&mut grads, node.inputs[0], av.len());
                    for i in 0..av.len() {
                        ga[i] += gy[i] * bv[i];
                    }
                    let gb = acc_buf(&mut grads, node.inputs[1], bv.len());
                    for i in 0..bv.len() {
                        gb[i] += gy[i] * av[i];
                    }
                }
                Op::Sum => {
                    let numel = eval.values[node.inputs[0].0].numel();
                    let g = acc_buf(&mut grads, node.inputs[0], numel);
                    for v in g.iter_mut() {
                        *v += gy[0];
                    }
                }
                Op::Mean => {
                    let numel = eval.values[node.inputs[0].0].numel();
                    let scale = gy[0] / numel as f64;
                    let g = acc_buf(&mut grads, node.inputs[0], numel);
                    for v in g.iter_mut() {
                        *v += scale;
                    }
                }
                Op::Reshape => {
                    let numel = eval.values[node.inputs[0].0].numel();
                    let g = acc_buf(&mut grads, node.inputs[0], numel);
                    for (a, &b) in g.iter_mut().zip(&gy) {
                        *a += b;
                    }
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &inp in &node.inputs {
                        let numel = eval.values[inp.0].numel();
                        let g = acc_buf(&mut grads, inp, numel);
                        for (a, &b) in g.iter_mut().zip(&gy[offset..offset + numel]) {
                            *a += b;
                        }
                        offset += numel;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn shape_err(op: &str, detail: String) -> DiffError {
    DiffError::ShapeMismatch {
        op: op.to_string(),
        detail,
    }
}

fn acc_buf<'a>(grads: &'a mut [Option<Vec<f64>>], id: NodeId, numel: usize) -> &'a mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; numel])
}

fn eval_affine(x: &Tensor, w: &Tensor, b: &Tensor, out_shape: &[usize]) -> Tensor {
    let (bsz, k) = match x.shape().len() {
        1 => (1, x.shape()[0]),
        _ => (x.shape()[0], x.shape()[1]),
    };
    let n = w.shape()[1];
    let mut data = Vec::with_capacity(bsz * n);
    for _ in 0..bsz {
        data.extend_from_slice(b.data());
    }
    kernels::matmul_acc(x.data(), w.data(), &mut data, bsz, k, n);
    Tensor::new(out_shape.to_vec(), data).unwrap()
}

fn eval_conv2d(x: &Tensor, k: &Tensor, b: &Tensor, geom: &ConvGeom, out_shape: &[usize]) -> Tensor {
    let bsz = x.shape()[0];
    let in_sz = geom.in_ch * geom.in_h * geom.in_w;
    let out_sz = geom.out_ch * geom.out_spatial();
    let spatial = geom.out_spatial();
    let mut col = vec![0.0; geom.col_rows() * spatial];
    let mut data = vec![0.0; bsz * out_sz];
    for i in 0..bsz {
        let img = &x.data()[i * in_sz..(i + 1) * in_sz];
        kernels::im2col(img, geom, &mut col);
        let out = &mut data[i * out_sz..(i + 1) * out_sz];
        for (oc, &bias) in b.data().iter().enumerate() {
            out[oc * spatial..(oc + 1) * spatial].fill(bias);
        }
        kernels::matmul_acc(k.data(), &col, out, geom.out_ch, geom.col_rows(), spatial);
    }
    Tensor::new(out_shape.to_vec(), data).unwrap()
}

fn backward_conv2d(
    node: &Node,
    geom: &ConvGeom,
    gy: &[f64],
    eval: &Evaluation,
    grads: &mut [Option<Vec<f64>>],
) {
    let x = &eval.values[node.inputs[0].0];
    let k = &eval.values[node.inputs[1].0];
    let bsz = x.shape()[0];
    let in_sz = geom.in_ch * geom.in_h * geom.in_w;
    let out_sz = geom.out_ch * geom.out_spatial();
    let spatial = geom.out_spatial();
    let rows = geom.col_rows();

    // accumulate into freshly-zeroed or existing buffers
    let mut gk = std::mem::take(&mut grads[node.inputs[1].0]).unwrap_or_else(|| vec![0.0; k.numel()]);
    let mut gx = std::mem::take(&mut grads[node.inputs[0].0]).unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut gb = std::mem::take(&mut grads[node.inputs[2].0]).unwrap_or_else(|| vec![0.0; geom.out_ch]);

    let mut col = vec![0.0; rows * spatial];
    let mut gcol = vec![0.0; rows * spatial];
    for i in 0..bsz {
        let img = &x.data()[i * in_sz..(i + 1) * in_sz];
        let gy_i = &gy[i * out_sz..(i + 1) * out_sz];
        // kernel gradient: gy_i [OC,S] . col^T [S,R]
        kernels::im2col(img, geom, &mut col);
        kernels::matmul_nt_acc(gy_i, &col, &mut gk, geom.out_ch, spatial, rows);
        // input gradient: k^T [R,OC] . gy_i [OC,S], scattered back
        gcol.fill(0.0);
        kernels::matmul_tn_acc(k.data(), gy_i, &mut gcol, geom.out_ch, rows, spatial);
        kernels::col2im_acc(&gcol, geom, &mut gx[i * in_sz..(i + 1) * in_sz]);
        // bias gradient: spatial sums
        for oc in 0..geom.out_ch {
            gb[oc] += gy_i[oc * spatial..(oc + 1) * spatial].iter().sum::<f64>();
        }
    }
    grads[node.inputs[0].0] = Some(gx);
    grads[node.inputs[1].0] = Some(gk);
    grads[node.inputs[2].0] = Some(gb);
}
