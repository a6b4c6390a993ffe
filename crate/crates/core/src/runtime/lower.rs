//! Linear operators as explicit plaintext matrices over the flattened
//! (row-major NCHW) input.

use serde::{Deserialize, Serialize};

use crate::graph::Window2d;
use crate::linalg::{SparseBuilder, SparseMatrix};
use crate::tensor::{broadcast_to, strides, Tensor};

/// `y = matrix * flatten(x) + bias`, reshaped to `out_shape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMapPlan {
    pub matrix: SparseMatrix,
    pub bias: Option<Vec<f64>>,
    pub out_shape: Vec<usize>,
    /// Nodes folded into this map, in execution order.
    pub sources: Vec<String>,
}

impl LinearMapPlan {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut y = self.matrix.apply(x.data());
        if let Some(b) = &self.bias {
            y.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        Tensor::new(self.out_shape.clone(), y)
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &LinearMapPlan) -> LinearMapPlan {
        let matrix = self.matrix.matmul(&inner.matrix);
        let bias = match (&inner.bias, &self.bias) {
            (None, b) => b.clone(),
            (Some(ib), b) => {
                let mut v = self.matrix.apply(ib);
                if let Some(b) = b {
                    v.iter_mut().zip(b).for_each(|(v, b)| *v += b);
                }
                Some(v)
            }
        };
        let mut sources = inner.sources.clone();
        sources.extend(self.sources.iter().cloned());
        LinearMapPlan { matrix, bias, out_shape: self.out_shape.clone(), sources }
    }
}

fn check_nchw(shape: &[usize]) -> Result<[usize; 4], String> {
    match shape {
        &[n, c, h, w] if n == 1 => Ok([n, c, h, w]),
        other => Err(format!("expected a (1, C, H, W) input, got {other:?}")),
    }
}

/// Grouped 2-D convolution as a matrix; bias is broadcast per output channel.
pub fn im2col_matrix(
    in_shape: &[usize],
    weights: &Tensor,
    win: &Window2d,
    group: usize,
    bias: Option<&Tensor>,
) -> Result<LinearMapPlan, String> {
    let [_, c, h, wd] = check_nchw(in_shape)?;
    let &[m, cg, kh, kw] = weights.shape() else {
        return Err(format!("expected 4-D weights, got {:?}", weights.shape()));
    };
    if group == 0 || c % group != 0 || m % group != 0 || c / group != cg {
        return Err(format!("{c} input channels, {m} filters of depth {cg} do not form {group} groups"));
    }
    if [kh, kw] != win.kernel {
        return Err(format!("kernel {:?} disagrees with weights {:?}", win.kernel, weights.shape()));
    }
    if bias.is_some_and(|b| b.len() != m) {
        return Err(format!("bias must have {m} entries"));
    }
    let [oh, ow] = win.output_hw(h, wd).ok_or("kernel does not fit the padded input")?;
    let mg = m / group;
    let ws = weights.data();
    let mut b = SparseBuilder::new(c * h * wd);
    for oc in 0..m {
        let g = oc / mg;
        for oy in 0..oh {
            for ox in 0..ow {
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
                            let v = ws[((oc * cg + icg) * kh + ky) * kw + kx];
                            if v != 0.0 {
                                b.push((ic * h + iy as usize) * wd + ix as usize, v);
                            }
                        }
                    }
                }
                b.finish_row();
            }
        }
    }
    let bias = bias.map(|t| (0..m).flat_map(|oc| std::iter::repeat_n(t.data()[oc], oh * ow)).collect());
    Ok(LinearMapPlan { matrix: b.build(), bias, out_shape: vec![1, m, oh, ow], sources: Vec::new() })
}

pub fn avgpool_matrix(in_shape: &[usize], win: &Window2d, count_include_pad: bool) -> Result<LinearMapPlan, String> {
    let [_, c, h, wd] = check_nchw(in_shape)?;
    let [oh, ow] = win.output_hw(h, wd).ok_or("pool window does not fit the padded input")?;
    let mut b = SparseBuilder::new(c * h * wd);
    let mut inside = Vec::new();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                inside.clear();
                for ky in 0..win.kernel[0] {
                    for kx in 0..win.kernel[1] {
                        let iy = (oy * win.strides[0] + ky) as isize - win.pads[0] as isize;
                        let ix = (ox * win.strides[1] + kx) as isize - win.pads[1] as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                            inside.push((ch * h + iy as usize) * wd + ix as usize);
                        }
                    }
                }
                let divisor = if count_include_pad { win.kernel[0] * win.kernel[1] } else { inside.len().max(1) };
                for &col in &inside {
                    b.push(col, 1.0 / divisor as f64);
                }
                b.finish_row();
            }
        }
    }
    Ok(LinearMapPlan { matrix: b.build(), bias: None, out_shape: vec![1, c, oh, ow], sources: Vec::new() })
}

/// Zero-padding embedding; `pads` is `[begin..., end...]`.
pub fn pad_matrix(in_shape: &[usize], pads: &[usize]) -> Result<LinearMapPlan, String> {
    let rank = in_shape.len();
    if pads.len() != 2 * rank {
        return Err(format!("{} pad amounts for rank {rank}", pads.len()));
    }
    let out_shape: Vec<usize> = (0..rank).map(|i| in_shape[i] + pads[i] + pads[i + rank]).collect();
    let out_len: usize = out_shape.iter().product();
    let in_len: usize = in_shape.iter().product();
    let (is, os) = (strides(in_shape), strides(&out_shape));
    let mut src_of = vec![None; out_len];
    for flat in 0..in_len {
        let dst: usize = (0..rank).map(|d| ((flat / is[d]) % in_shape[d] + pads[d]) * os[d]).sum();
        src_of[dst] = Some(flat);
    }
    let mut b = SparseBuilder::new(in_len);
    for src in src_of {
        if let Some(s) = src {
            b.push(s, 1.0);
        }
        b.finish_row();
    }
    Ok(LinearMapPlan { matrix: b.build(), bias: None, out_shape, sources: Vec::new() })
}

/// ONNX Gemm with encrypted `A`: `alpha * op(A) * op(B) + beta * C`.
pub fn gemm_matrix(
    a_shape: &[usize],
    b: &Tensor,
    c: Option<&Tensor>,
    alpha: f64,
    beta: f64,
    trans_a: bool,
    trans_b: bool,
) -> Result<LinearMapPlan, String> {
    let (&[a0, a1], &[b0, b1]) = (a_shape, b.shape()) else {
        return Err(format!("Gemm needs 2-D operands, got {a_shape:?} and {:?}", b.shape()));
    };
    let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
    let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
    if k != kb {
        return Err(format!("inner dimensions {k} and {kb} differ"));
    }
    let bt = |p: usize, j: usize| if trans_b { b.data()[j * k + p] } else { b.data()[p * n + j] };
    let a_index = |i: usize, p: usize| if trans_a { p * m + i } else { i * k + p };
    let mut builder = SparseBuilder::new(m * k);
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                let v = alpha * bt(p, j);
                if v != 0.0 {
                    builder.push(a_index(i, p), v);
                }
            }
            builder.finish_row();
        }
    }
    let bias = c.map(|c| broadcast_to(c, &[m, n]).data().iter().map(|v| beta * v).collect());
    Ok(LinearMapPlan { matrix: builder.build(), bias, out_shape: vec![m, n], sources: Vec::new() })
}

/// MatMul with one constant operand. `data_left` says which side is encrypted.
pub fn matmul_matrix(
    data_shape: &[usize],
    constant: &Tensor,
    data_left: bool,
    out_shape: &[usize],
) -> Result<LinearMapPlan, String> {
    let data_len: usize = data_shape.iter().product();
    let mut builder = SparseBuilder::new(data_len);
    if data_left {
        let k = *data_shape.last().ok_or("scalar MatMul operand")?;
        let n = match constant.shape() {
            &[kb] if kb == k => 1,
            &[kb, n] if kb == k => n,
            s => return Err(format!("constant operand {s:?} does not match inner dimension {k}")),
        };
        for r in 0..data_len / k {
            for j in 0..n {
                for p in 0..k {
                    let v = constant.data()[p * n + j];
                    if v != 0.0 {
                        builder.push(r * k + p, v);
                    }
                }
                builder.finish_row();
            }
        }
    } else {
        let &[m, k] = constant.shape() else {
            return Err(format!("left constant operand must be 2-D, got {:?}", constant.shape()));
        };
        let n = match data_shape {
            &[kb] if kb == k => 1,
            &[kb, n] if kb == k => n,
            s => return Err(format!("encrypted operand {s:?} does not match inner dimension {k}")),
        };
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let v = constant.data()[i * k + p];
                    if v != 0.0 {
                        builder.push(p * n + j, v);
                    }
                }
                builder.finish_row();
            }
        }
    }
    let matrix = builder.build();
    if matrix.rows() != out_shape.iter().product::<usize>() {
        return Err(format!("MatMul lowers to {} outputs, inferred shape is {out_shape:?}", matrix.rows()));
    }
    Ok(LinearMapPlan { matrix, bias: None, out_shape: out_shape.to_vec(), sources: Vec::new() })
}
