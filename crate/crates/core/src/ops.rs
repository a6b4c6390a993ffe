//! Direct cleartext semantics of every supported operator.
//!
//! These loops are deliberately naive; they are the reference the lowered
//! (matrix) forms and the encrypted backends are checked against.

use crate::graph::{pads_of, GraphError, ModelGraph, Node, OpKind, Window2d};
use crate::tensor::{broadcast_shape, broadcast_to, strides, Tensor};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    binary(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    binary(a, b, |x, y| x * y)
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Option<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let a = broadcast_to(a, &shape);
    let b = broadcast_to(b, &shape);
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Some(Tensor::new(shape, data))
}

/// Grouped 2-D convolution of an NCHW input.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, win: &Window2d, group: usize) -> Tensor {
    let [n, c, h, wd] = dims4(x.shape());
    let [m, cg, kh, kw] = dims4(w.shape());
    let [oh, ow] = win.output_hw(h, wd).expect("conv window fits");
    let mg = m / group;
    let mut out = Tensor::zeros(vec![n, m, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    let od = out.data_mut();
    for b in 0..n {
        for oc in 0..m {
            let g = oc / mg;
            let bias_v = bias.map_or(0.0, |t| t.data()[oc]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias_v;
                    for icg in 0..cg {
                        let ic = g * cg + icg;
                        for ky in 0..kh {
                            let iy = (oy * win.strides[0] + ky) as isize - win.pads[0] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * win.strides[1] + kx) as isize - win.pads[1] as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xs[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = ws[((oc * cg + icg) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    od[((b * m + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// 2-D average pooling. Without `count_include_pad` the divisor counts only
/// positions inside the input.
pub fn average_pool(x: &Tensor, win: &Window2d, count_include_pad: bool) -> Tensor {
    let [n, c, h, wd] = dims4(x.shape());
    let [oh, ow] = win.output_hw(h, wd).expect("pool window fits");
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    let xs = x.data();
    let od = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for ky in 0..win.kernel[0] {
                        for kx in 0..win.kernel[1] {
                            let iy = (oy * win.strides[0] + ky) as isize - win.pads[0] as isize;
                            let ix = (ox * win.strides[1] + kx) as isize - win.pads[1] as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                sum += xs[((b * c + ch) * h + iy as usize) * wd + ix as usize];
                                count += 1;
                            }
                        }
                    }
                    let divisor = if count_include_pad { win.kernel[0] * win.kernel[1] } else { count.max(1) };
                    od[((b * c + ch) * oh + oy) * ow + ox] = sum / divisor as f64;
                }
            }
        }
    }
    out
}

/// `alpha * op(A) * op(B) + beta * C` with ONNX Gemm transpose flags.
pub fn gemm(a: &Tensor, b: &Tensor, c: Option<&Tensor>, alpha: f64, beta: f64, trans_a: bool, trans_b: bool) -> Tensor {
    let (m, k) = if trans_a { (a.shape()[1], a.shape()[0]) } else { (a.shape()[0], a.shape()[1]) };
    let n = if trans_b { b.shape()[0] } else { b.shape()[1] };
    let at = |i: usize, j: usize| if trans_a { a.data()[j * m + i] } else { a.data()[i * k + j] };
    let bt = |i: usize, j: usize| if trans_b { b.data()[j * k + i] } else { b.data()[i * n + j] };
    let cb = c.map(|c| broadcast_to(c, &[m, n]));
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += at(i, p) * bt(p, j);
            }
            let bias = cb.as_ref().map_or(0.0, |c| c.data()[i * n + j]);
            out.data_mut()[i * n + j] = alpha * acc + beta * bias;
        }
    }
    out
}

/// Matrix product for the shapes accepted by shape inference: a stacked
/// left operand against a 1-D/2-D right operand, or 2-D × 2-D.
pub fn matmul(a: &Tensor, b: &Tensor, out_shape: &[usize]) -> Tensor {
    let k = *a.shape().last().expect("rank >= 1");
    let n = if b.shape().len() == 2 { b.shape()[1] } else { 1 };
    let rows = a.len() / k;
    let mut data = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[r * k + p] * b.data()[p * n + j];
            }
            data[r * n + j] = acc;
        }
    }
    Tensor::new(out_shape.to_vec(), data)
}

/// Zero padding; `pads` is `[begin..., end...]` per axis.
pub fn pad(x: &Tensor, pads: &[usize]) -> Tensor {
    let rank = x.shape().len();
    let out_shape: Vec<usize> = (0..rank).map(|i| x.shape()[i] + pads[i] + pads[i + rank]).collect();
    let mut out = Tensor::zeros(out_shape.clone());
    let in_strides = strides(x.shape());
    let out_strides = strides(&out_shape);
    for (flat, &v) in x.data().iter().enumerate() {
        let mut dst = 0;
        for d in 0..rank {
            let idx = (flat / in_strides[d]) % x.shape()[d];
            dst += (idx + pads[d]) * out_strides[d];
        }
        out.data_mut()[dst] = v;
    }
    out
}

fn dims4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

/// Evaluate one node on concrete inputs (`inputs[i]` is the value of the
/// node's i-th input, `None` where omitted). Requires shapes inferred.
pub fn eval_node(g: &ModelGraph, node: &Node, inputs: &[Option<&Tensor>]) -> Result<Tensor, GraphError> {
    let kind = node.kind().ok_or_else(|| GraphError::shape(&node.name, format!("unsupported operator {}", node.op)))?;
    let arg = |i: usize| {
        inputs.get(i).copied().flatten().ok_or_else(|| GraphError::shape(&node.name, format!("missing input #{i}")))
    };
    let out_spec = node
        .outputs
        .first()
        .and_then(|o| g.edges.get(o))
        .ok_or_else(|| GraphError::shape(&node.name, "output shape not inferred"))?;
    let mismatch = || GraphError::shape(&node.name, "operand shapes do not broadcast");
    let out = match kind {
        OpKind::Relu => relu(arg(0)?),
        OpKind::Add => add(arg(0)?, arg(1)?).ok_or_else(mismatch)?,
        OpKind::Mul => mul(arg(0)?, arg(1)?).ok_or_else(mismatch)?,
        OpKind::Conv => {
            let w = arg(1)?;
            let win = Window2d::from_node(node, Some([w.shape()[2], w.shape()[3]]))?;
            let group = node.attr_int("group").unwrap_or(1) as usize;
            conv2d(arg(0)?, w, inputs.get(2).copied().flatten(), &win, group)
        }
        OpKind::AveragePool => {
            let win = Window2d::from_node(node, None)?;
            average_pool(arg(0)?, &win, node.attr_int("count_include_pad").unwrap_or(0) != 0)
        }
        OpKind::Gemm => gemm(
            arg(0)?,
            arg(1)?,
            inputs.get(2).copied().flatten(),
            node.attr_float("alpha").unwrap_or(1.0),
            node.attr_float("beta").unwrap_or(1.0),
            node.attr_int("transA").unwrap_or(0) != 0,
            node.attr_int("transB").unwrap_or(0) != 0,
        ),
        OpKind::MatMul => matmul(arg(0)?, arg(1)?, &out_spec.shape),
        OpKind::Pad => pad(arg(0)?, &pads_of(g, node)?),
        OpKind::Flatten | OpKind::Reshape => arg(0)?.reshaped(out_spec.shape.clone()),
    };
    if out.shape() != out_spec.shape.as_slice() {
        return Err(GraphError::shape(
            &node.name,
            format!("evaluated shape {:?} differs from inferred {:?}", out.shape(), out_spec.shape),
        ));
    }
    Ok(out)
}
