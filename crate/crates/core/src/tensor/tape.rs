use super::{gemm, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation implemented outside the tape.
///
/// Returns one optional gradient per input, in input order, each with the
/// input's shape.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Upsample2x(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    GridSample {
        map: Var,
        coords: Var,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        input: Var,
        index: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list: values are appended in evaluation order, so reverse
/// insertion order is a valid reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not reach the root.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn same_or_leading_broadcast(a: &[usize], b: &[usize]) -> bool {
    a == b || (!a.is_empty() && &a[1..] == b)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Bilinear sample position with clamp-to-edge; returns base index and weight.
#[inline]
fn bilinear_axis(t: f64, size: usize) -> (usize, f64, bool) {
    if size == 1 {
        return (0, 0.0, true);
    }
    let clamped = !(0.0..=1.0).contains(&t);
    let x = t.clamp(0.0, 1.0) * (size - 1) as f64;
    let i0 = (x.floor() as usize).min(size - 2);
    (i0, x - i0 as f64, clamped)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !same_or_leading_broadcast(av.shape(), bv.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let nb = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % nb]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may omit `a`'s leading dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: s,
                reason: "expected rank 2".into(),
            });
        }
        let out = transpose2(s[0], s[1], self.value(a).data());
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![s[1], s[0]], out)?, Op::Transpose(a), rg))
    }

    /// 2-D convolution of `input [N,C,H,W]` with `weight [O,C,kh,kw]`.
    /// Stride and zero padding are applied exactly as given.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        if stride == 0 || si[2] + 2 * padding < sw[2] || si[3] + 2 * padding < sw[3] {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: si,
                reason: format!("kernel {:?} stride {} padding {}", sw, stride, padding),
            });
        }
        let geo = ConvGeom::new(&si, &sw, stride, padding);
        let mut out = vec![0.0; geo.n * geo.o * geo.ho * geo.wo];
        let mut cols = vec![0.0; geo.ckk() * geo.hw_out()];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        for n in 0..geo.n {
            im2col(&geo, &x[n * geo.in_stride()..(n + 1) * geo.in_stride()], &mut cols);
            let o_slice = &mut out[n * geo.out_stride()..(n + 1) * geo.out_stride()];
            gemm(geo.o, geo.ckk(), geo.hw_out(), w, false, &cols, false, o_slice, false);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            let hw = geo.hw_out();
            for (chunk_idx, chunk) in out.chunks_mut(hw).enumerate() {
                let bo = bv[chunk_idx % geo.o];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![geo.n, geo.o, geo.ho, geo.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2× upsampling of the last two dimensions.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "upsample2x",
                shape: s,
                reason: "need at least rank 2".into(),
            });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample2x(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {} out of range", axis),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let s = self.shape(v);
                let len = s[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean",
                shape: self.shape(a).to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let s = self.value(a).data().iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Bilinear lookup of `map [C,H,W]` at `coords [P,2]` holding `(u, v)`
    /// in `[0,1]²` (u along width). Corners map to pixel centres of the
    /// border pixels; coordinates outside the square clamp to the edge.
    pub fn grid_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let sm = self.shape(map).to_vec();
        let sc = self.shape(coords).to_vec();
        if sm.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "grid_sample",
                lhs: sm,
                rhs: sc,
            });
        }
        let (c, h, w) = (sm[0], sm[1], sm[2]);
        let p = sc[0];
        let m = self.value(map).data();
        let uv = self.value(coords).data();
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            let (x0, fx, _) = bilinear_axis(uv[2 * i], w);
            let (y0, fy, _) = bilinear_axis(uv[2 * i + 1], h);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = m[base + y0 * w + x0];
                let v01 = m[base + y0 * w + x1];
                let v10 = m[base + y1 * w + x0];
                let v11 = m[base + y1 * w + x1];
                out[i * c + ch] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
        let rg = self.rg(map) || self.rg(coords);
        Ok(self.push(Tensor::new(vec![p, c], out)?, Op::GridSample { map, coords }, rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: s,
                reason: format!("axis {} range {}..{}", axis, start, start + len),
            });
        }
        let (outer, dim, inner) = axis_split(&s, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Selects rows of a rank-2 tensor: `[R,C] → [index.len(), C]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || index.iter().any(|&i| i >= s[0]) {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: s,
                reason: "rank 2 input with in-range row indices required".into(),
            });
        }
        let c = s[1];
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![index.len(), c], out)?,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Writes row `i` of `a` to row `index[i]` of a zero `[rows, C]` tensor.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != index.len() || index.iter().any(|&i| i >= rows) {
            return Err(TensorError::InvalidShape {
                op: "scatter_rows",
                shape: s,
                reason: format!("{} indices into {} rows", index.len(), rows),
            });
        }
        let c = s[1];
        let x = self.value(a).data();
        let mut out = vec![0.0; rows * c];
        for (r, &i) in index.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&x[r * c..(r + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::ScatterRows {
                input: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Records a value computed outside the tape together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn reduce_broadcast(&self, b: Var, g: &Tensor) -> Tensor {
        let bs = self.shape(b);
        if bs == g.shape() {
            return g.clone();
        }
        let nb: usize = bs.iter().product();
        let mut out = vec![0.0; nb];
        for (i, x) in g.data().iter().enumerate() {
            out[i % nb] += x;
        }
        Tensor::new(bs.to_vec(), out).expect("broadcast reduction shape")
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let gb = self.reduce_broadcast(*b, g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let gb = self.reduce_broadcast(*b, g).map(|x| -x);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.numel();
                if self.rg(*a) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * bv.data()[i % nb])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if self.rg(*b) {
                    let full: Vec<f64> =
                        g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    let full = Tensor::new(av.shape().to_vec(), full).unwrap();
                    let gb = self.reduce_broadcast(*b, &full);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga).unwrap());
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb).unwrap());
                }
            }
            Op::Transpose(a) => {
                let s = g.shape();
                let t = transpose2(s[0], s[1], g.data());
                self.accumulate(grads, *a, Tensor::new(vec![s[1], s[0]], t).unwrap());
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let xv = val(*input);
                let wv = val(*weight);
                let geo = ConvGeom::new(xv.shape(), wv.shape(), *stride, *padding);
                let (ckk, hw) = (geo.ckk(), geo.hw_out());
                let mut cols = vec![0.0; ckk * hw];
                let mut gw = vec![0.0; wv.numel()];
                let mut gx = vec![0.0; xv.numel()];
                let mut gcols = vec![0.0; ckk * hw];
                for n in 0..geo.n {
                    let g_n = &g.data()[n * geo.out_stride()..(n + 1) * geo.out_stride()];
                    if self.rg(*weight) {
                        im2col(
                            &geo,
                            &xv.data()[n * geo.in_stride()..(n + 1) * geo.in_stride()],
                            &mut cols,
                        );
                        gemm(geo.o, hw, ckk, g_n, false, &cols, true, &mut gw, true);
                    }
                    if self.rg(*input) {
                        gemm(ckk, geo.o, hw, wv.data(), true, g_n, false, &mut gcols, false);
                        col2im(
                            &geo,
                            &gcols,
                            &mut gx[n * geo.in_stride()..(n + 1) * geo.in_stride()],
                        );
                    }
                }
                if self.rg(*weight) {
                    self.accumulate(grads, *weight, Tensor::new(wv.shape().to_vec(), gw).unwrap());
                }
                if self.rg(*input) {
                    self.accumulate(grads, *input, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; geo.o];
                        for (i, chunk) in g.data().chunks(hw).enumerate() {
                            gb[i % geo.o] += chunk.iter().sum::<f64>();
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![geo.o], gb).unwrap());
                    }
                }
            }
            Op::Upsample2x(a) => {
                let s = val(*a).shape().to_vec();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes: usize = s[..s.len() - 2].iter().product();
                let mut ga = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut ga[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(s, ga).unwrap());
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let s = val(v).shape().to_vec();
                    let len = s[*axis];
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gv.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(s, gv).unwrap());
                    }
                    offset += len;
                }
            }
            Op::LeakyRelu(a, slope) => {
                let d = zip_map(g, val(*a), |gx, x| if x > 0.0 { gx } else { slope * gx });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, &node.value, |gx, y| gx * y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = zip_map(g, &node.value, |gx, y| gx * y);
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = zip_map(g, val(*a), |gx, x| gx / x);
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = zip_map(g, val(*a), |gx, x| {
                    if x > 0.0 {
                        gx
                    } else if x < 0.0 {
                        -gx
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sin(a) => {
                let d = zip_map(g, val(*a), |gx, x| gx * x.cos());
                self.accumulate(grads, *a, d);
            }
            Op::Cos(a) => {
                let d = zip_map(g, val(*a), |gx, x| -gx * x.sin());
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = zip_map(g, val(*a), |gx, x| 2.0 * gx * x);
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::GridSample { map, coords } => {
                let mv = val(*map);
                let cv = val(*coords);
                let (c, h, w) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
                let m = mv.data();
                let uv = cv.data();
                let p = cv.shape()[0];
                let mut gm = vec![0.0; mv.numel()];
                let mut gc = vec![0.0; cv.numel()];
                for i in 0..p {
                    let (x0, fx, cx) = bilinear_axis(uv[2 * i], w);
                    let (y0, fy, cy) = bilinear_axis(uv[2 * i + 1], h);
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let (mut du, mut dv) = (0.0, 0.0);
                    for ch in 0..c {
                        let go = g.data()[i * c + ch];
                        if go == 0.0 {
                            continue;
                        }
                        let base = ch * h * w;
                        gm[base + y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                        gm[base + y0 * w + x1] += go * (1.0 - fy) * fx;
                        gm[base + y1 * w + x0] += go * fy * (1.0 - fx);
                        gm[base + y1 * w + x1] += go * fy * fx;
                        let v00 = m[base + y0 * w + x0];
                        let v01 = m[base + y0 * w + x1];
                        let v10 = m[base + y1 * w + x0];
                        let v11 = m[base + y1 * w + x1];
                        du += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        dv += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                    if !cx && w > 1 {
                        gc[2 * i] = du * (w - 1) as f64;
                    }
                    if !cy && h > 1 {
                        gc[2 * i + 1] = dv * (h - 1) as f64;
                    }
                }
                if self.rg(*map) {
                    self.accumulate(grads, *map, Tensor::new(mv.shape().to_vec(), gm).unwrap());
                }
                if self.rg(*coords) {
                    self.accumulate(grads, *coords, Tensor::new(cv.shape().to_vec(), gc).unwrap());
                }
            }
            Op::Slice { input, axis, start } => {
                let s = val(*input).shape().to_vec();
                let (outer, dim, inner) = axis_split(&s, *axis);
                let len = g.shape()[*axis];
                let mut gi = vec![0.0; val(*input).numel()];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    gi[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, Tensor::new(s, gi).unwrap());
            }
            Op::Reshape(a) => {
                let gi = g.clone().reshaped(val(*a).shape()).unwrap();
                self.accumulate(grads, *a, gi);
            }
            Op::GatherRows { input, index } => {
                let s = val(*input).shape().to_vec();
                let c = s[1];
                let mut gi = vec![0.0; s[0] * c];
                for (r, &i) in index.iter().enumerate() {
                    for ch in 0..c {
                        gi[i * c + ch] += g.data()[r * c + ch];
                    }
                }
                self.accumulate(grads, *input, Tensor::new(s, gi).unwrap());
            }
            Op::ScatterRows { input, index } => {
                let c = g.shape()[1];
                let mut gi = Vec::with_capacity(index.len() * c);
                for &i in index {
                    gi.extend_from_slice(&g.data()[i * c..(i + 1) * c]);
                }
                self.accumulate(grads, *input, Tensor::new(vec![index.len(), c], gi).unwrap());
            }
            Op::Custom { inputs, op } => {
                let in_vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&in_vals, &node.value, g);
                debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        debug_assert_eq!(gi.shape(), val(v).shape(), "{} grad shape", op.name());
                        self.accumulate(grads, v, gi);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), d).unwrap()
}

fn transpose2(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(si: &[usize], sw: &[usize], stride: usize, pad: usize) -> Self {
        let (kh, kw) = (sw[2], sw[3]);
        Self {
            n: si[0],
            c: si[1],
            h: si[2],
            w: si[3],
            o: sw[0],
            kh,
            kw,
            stride,
            pad,
            ho: (si[2] + 2 * pad - kh) / stride + 1,
            wo: (si[3] + 2 * pad - kw) / stride + 1,
        }
    }
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
    fn in_stride(&self) -> usize {
        self.c * self.h * self.w
    }
    fn out_stride(&self) -> usize {
        self.o * self.ho * self.wo
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let hw = g.hw_out();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[ci * g.h * g.w + iy as usize * g.w..][..g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], gx: &mut [f64]) {
    let hw = g.hw_out();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut gx[ci * g.h * g.w + iy as usize * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let a = Tensor::from_fn(&[3, 3], |i| (i as f64 * 1.3).sin());
        let av = tape.constant(a.clone());
        let y = tape.matmul(eye, av).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn grid_sample_midpoint() {
        let mut tape = Tape::new();
        let map = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let uv = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let y = tape.grid_sample(map, uv).unwrap();
        assert_eq!(tape.value(y).item(), 1.5);
    }

    #[test]
    fn grid_sample_clamps_outside_unit_square() {
        let mut tape = Tape::new();
        let map = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let uv = tape.param(Tensor::new(vec![2, 2], vec![-0.5, 1.7, 2.0, -1.0]).unwrap());
        let y = tape.grid_sample(map, uv).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 1.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(uv).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        let y = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y), Tensor::zeros(&[2]));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn shape_mismatch_names_dims() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::ones(&[2, 3]));
        let b = tape.param(Tensor::ones(&[4, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 3]);
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn leading_dim_broadcast_add() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[3, 2]));
        let b = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).data(), &[3.0, 3.0]);
    }
}
