use std::collections::{BTreeMap, BTreeSet};

use prost::Message;

use super::proto::{
    attr_type, data_type, AttributeProto, Dimension, GraphProto, ModelProto, NodeProto, OperatorSetIdProto,
    TensorProto, TensorShapeProto, TypeProto, TypeProtoTensor, ValueInfoProto,
};
use super::{AttrValue, GraphError, ModelGraph, Node, Op, OpKind, TensorSpec};
use crate::tensor::Tensor;

/// Decode a serialized ONNX `ModelProto`.
///
/// Initializers become dense 64-bit tensors. A symbolic or missing leading
/// input dimension is pinned to 1 (batch size one); other symbolic dims are
/// left unresolved and rejected later by shape inference.
pub fn load_model(bytes: &[u8]) -> Result<ModelGraph, GraphError> {
    let model = ModelProto::decode(bytes).map_err(|e| GraphError::Parse(e.to_string()))?;
    let graph = model.graph.ok_or_else(|| GraphError::Parse("model has no graph".into()))?;

    let opset = model
        .opset_import
        .iter()
        .find(|o| matches!(o.domain.as_deref(), None | Some("") | Some("ai.onnx")))
        .and_then(|o| o.version)
        .ok_or_else(|| GraphError::Parse("model declares no default-domain opset".into()))?;

    let mut initializers = BTreeMap::new();
    let mut edges = BTreeMap::new();
    for t in &graph.initializer {
        let name = t.name.clone().unwrap_or_default();
        if name.is_empty() {
            return Err(GraphError::Parse("initializer without a name".into()));
        }
        let tensor = decode_tensor(t).map_err(|e| GraphError::Parse(format!("initializer `{name}`: {e}")))?;
        edges.insert(name.clone(), TensorSpec::new(tensor.shape().to_vec()));
        initializers.insert(name, tensor);
    }

    let mut inputs = Vec::new();
    for vi in &graph.input {
        let name = vi.name.clone().unwrap_or_default();
        if initializers.contains_key(&name) {
            continue;
        }
        if let Some(shape) = input_shape(vi) {
            edges.insert(name.clone(), TensorSpec::new(shape));
        }
        inputs.push(name);
    }
    let outputs = graph.output.iter().map(|vi| vi.name.clone().unwrap_or_default()).collect();

    let mut nodes = Vec::with_capacity(graph.node.len());
    for (i, n) in graph.node.iter().enumerate() {
        let op_type = n.op_type.clone().unwrap_or_default();
        let domain = n.domain.as_deref().unwrap_or("");
        let op = match OpKind::from_onnx(&op_type) {
            Some(k) if domain.is_empty() || domain == "ai.onnx" => Op::Supported(k),
            _ if domain.is_empty() => Op::Unsupported(op_type.clone()),
            _ => Op::Unsupported(format!("{domain}::{op_type}")),
        };
        let name = match n.name.as_deref() {
            Some(s) if !s.is_empty() => s.to_string(),
            _ => format!("{op_type}_{i}"),
        };
        let mut attrs = BTreeMap::new();
        for a in &n.attribute {
            let key = a.name.clone().unwrap_or_default();
            attrs.insert(key, decode_attr(a)?);
        }
        nodes.push(Node { name, op, attrs, inputs: n.input.clone(), outputs: n.output.clone() });
    }

    Ok(ModelGraph { name: graph.name.unwrap_or_default(), opset, nodes, edges, initializers, inputs, outputs })
}

fn input_shape(vi: &ValueInfoProto) -> Option<Vec<usize>> {
    let dims = &vi.r#type.as_ref()?.tensor_type.as_ref()?.shape.as_ref()?.dim;
    let mut shape = Vec::with_capacity(dims.len());
    for (i, d) in dims.iter().enumerate() {
        match d.dim_value {
            Some(v) if v > 0 => shape.push(v as usize),
            _ if i == 0 => shape.push(1),
            _ => return None,
        }
    }
    Some(shape)
}

fn decode_attr(a: &AttributeProto) -> Result<AttrValue, GraphError> {
    let ty = a.r#type.unwrap_or_else(|| {
        // Some writers omit the type; infer it from the populated field.
        if a.i.is_some() {
            attr_type::INT
        } else if a.f.is_some() {
            attr_type::FLOAT
        } else if !a.ints.is_empty() {
            attr_type::INTS
        } else if !a.floats.is_empty() {
            attr_type::FLOATS
        } else if a.s.is_some() {
            attr_type::STRING
        } else {
            0
        }
    });
    Ok(match ty {
        attr_type::INT => AttrValue::Int(a.i.unwrap_or(0)),
        attr_type::FLOAT => AttrValue::Float(a.f.unwrap_or(0.0)),
        attr_type::INTS => AttrValue::Ints(a.ints.clone()),
        attr_type::FLOATS => AttrValue::Floats(a.floats.clone()),
        attr_type::STRING => AttrValue::String(
            String::from_utf8(a.s.clone().unwrap_or_default())
                .map_err(|_| GraphError::Parse(format!("attribute `{:?}` is not UTF-8", a.name)))?,
        ),
        other => AttrValue::Opaque(other),
    })
}

fn decode_tensor(t: &TensorProto) -> Result<Tensor, String> {
    if t.data_location == Some(1) {
        return Err("external tensor data is not supported".into());
    }
    let mut shape = Vec::with_capacity(t.dims.len());
    for &d in &t.dims {
        if d < 0 {
            return Err(format!("negative dimension {d}"));
        }
        shape.push(d as usize);
    }
    let n: usize = shape.iter().product();
    let raw = t.raw_data.as_deref().filter(|r| !r.is_empty());
    let data: Vec<f64> = match t.data_type.unwrap_or(0) {
        data_type::FLOAT => match raw {
            Some(r) => chunks::<4>(r)?.map(|c| f32::from_le_bytes(c) as f64).collect(),
            None => t.float_data.iter().map(|&v| v as f64).collect(),
        },
        data_type::DOUBLE => match raw {
            Some(r) => chunks::<8>(r)?.map(f64::from_le_bytes).collect(),
            None => t.double_data.clone(),
        },
        data_type::INT64 => match raw {
            Some(r) => chunks::<8>(r)?.map(|c| i64::from_le_bytes(c) as f64).collect(),
            None => t.int64_data.iter().map(|&v| v as f64).collect(),
        },
        data_type::INT32 => match raw {
            Some(r) => chunks::<4>(r)?.map(|c| i32::from_le_bytes(c) as f64).collect(),
            None => t.int32_data.iter().map(|&v| v as f64).collect(),
        },
        other => return Err(format!("unsupported tensor element type {other}")),
    };
    if data.len() != n {
        return Err(format!("expected {n} elements for shape {shape:?}, found {}", data.len()));
    }
    Ok(Tensor::new(shape, data))
}

fn chunks<const W: usize>(raw: &[u8]) -> Result<impl Iterator<Item = [u8; W]> + '_, String> {
    if !raw.len().is_multiple_of(W) {
        return Err(format!("raw data length {} is not a multiple of {W}", raw.len()));
    }
    Ok(raw.chunks_exact(W).map(|c| c.try_into().expect("exact chunk")))
}

/// Serialize a graph as an ONNX `ModelProto` declaring the graph's opset.
///
/// Initializers are written as `FLOAT` raw data, except the integer-typed
/// operands ONNX requires (Reshape `shape`, Pad `pads`) which are `INT64`.
pub fn to_onnx_bytes(g: &ModelGraph) -> Vec<u8> {
    let int_operands: BTreeSet<&str> = g
        .nodes
        .iter()
        .filter_map(|n| match n.kind() {
            Some(OpKind::Reshape) | Some(OpKind::Pad) => n.input(1),
            _ => None,
        })
        .collect();

    let initializer =
        g.initializers.iter().map(|(name, t)| encode_tensor(name, t, int_operands.contains(name.as_str()))).collect();

    let node = g
        .nodes
        .iter()
        .map(|n| NodeProto {
            input: n.inputs.clone(),
            output: n.outputs.clone(),
            name: Some(n.name.clone()),
            op_type: Some(n.op.name().to_string()),
            domain: None,
            attribute: n.attrs.iter().map(|(k, v)| encode_attr(k, v)).collect(),
            doc_string: None,
        })
        .collect();

    let value_info = |name: &String| ValueInfoProto {
        name: Some(name.clone()),
        r#type: Some(TypeProto {
            tensor_type: Some(TypeProtoTensor {
                elem_type: Some(data_type::FLOAT),
                shape: g.edges.get(name).map(|s| TensorShapeProto {
                    dim: s
                        .shape
                        .iter()
                        .map(|&d| Dimension { dim_value: Some(d as i64), dim_param: None, denotation: None })
                        .collect(),
                }),
            }),
            denotation: None,
        }),
        doc_string: None,
    };

    let model = ModelProto {
        ir_version: Some(7),
        opset_import: vec![OperatorSetIdProto { domain: Some(String::new()), version: Some(g.opset) }],
        producer_name: Some("heinfer".into()),
        producer_version: Some(env!("CARGO_PKG_VERSION").into()),
        domain: None,
        model_version: None,
        doc_string: None,
        graph: Some(GraphProto {
            node,
            name: Some(g.name.clone()),
            initializer,
            doc_string: None,
            input: g.inputs.iter().map(value_info).collect(),
            output: g.outputs.iter().map(value_info).collect(),
            value_info: Vec::new(),
        }),
    };
    model.encode_to_vec()
}

fn encode_tensor(name: &str, t: &Tensor, as_int64: bool) -> TensorProto {
    let (ty, raw): (i32, Vec<u8>) = if as_int64 {
        (data_type::INT64, t.data().iter().flat_map(|&v| (v as i64).to_le_bytes()).collect())
    } else {
        (data_type::FLOAT, t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect())
    };
    TensorProto {
        dims: t.shape().iter().map(|&d| d as i64).collect(),
        data_type: Some(ty),
        name: Some(name.to_string()),
        raw_data: Some(raw),
        ..Default::default()
    }
}

fn encode_attr(name: &str, v: &AttrValue) -> AttributeProto {
    let mut a = AttributeProto { name: Some(name.to_string()), ..Default::default() };
    match v {
        AttrValue::Int(i) => {
            a.r#type = Some(attr_type::INT);
            a.i = Some(*i);
        }
        AttrValue::Float(f) => {
            a.r#type = Some(attr_type::FLOAT);
            a.f = Some(*f);
        }
        AttrValue::Ints(v) => {
            a.r#type = Some(attr_type::INTS);
            a.ints = v.clone();
        }
        AttrValue::Floats(v) => {
            a.r#type = Some(attr_type::FLOATS);
            a.floats = v.clone();
        }
        AttrValue::String(s) => {
            a.r#type = Some(attr_type::STRING);
            a.s = Some(s.as_bytes().to_vec());
        }
        AttrValue::Opaque(ty) => a.r#type = Some(*ty),
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EXPORT_OPSET;

    fn relu_model() -> Vec<u8> {
        let g = ModelGraph {
            name: "relu".into(),
            opset: EXPORT_OPSET,
            nodes: vec![Node::new("r", OpKind::Relu, &["x"], &["y"])],
            edges: BTreeMap::from([("x".to_string(), TensorSpec::new(vec![1, 4]))]),
            initializers: BTreeMap::new(),
            inputs: vec!["x".into()],
            outputs: vec!["y".into()],
        };
        to_onnx_bytes(&g)
    }

    #[test]
    fn single_relu_graph() {
        let g = load_model(&relu_model()).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.nodes[0].kind(), Some(OpKind::Relu));
        let g = super::super::infer_shapes(&g).unwrap();
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.edges["y"].shape, vec![1, 4]);
    }

    #[test]
    fn truncated_bytes_fail_to_parse() {
        let bytes = relu_model();
        let err = load_model(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, GraphError::Parse(_)));
    }

    #[test]
    fn missing_graph_fails() {
        let model = ModelProto {
            opset_import: vec![OperatorSetIdProto { domain: None, version: Some(13) }],
            ..Default::default()
        };
        assert!(matches!(load_model(&model.encode_to_vec()), Err(GraphError::Parse(_))));
    }

    #[test]
    fn symbolic_batch_dim_pins_to_one() {
        let mut model = ModelProto::decode(relu_model().as_slice()).unwrap();
        let dim0 = &mut model.graph.as_mut().unwrap().input[0]
            .r#type
            .as_mut()
            .unwrap()
            .tensor_type
            .as_mut()
            .unwrap()
            .shape
            .as_mut()
            .unwrap()
            .dim[0];
        dim0.dim_value = None;
        dim0.dim_param = Some("batch".into());
        let g = load_model(&model.encode_to_vec()).unwrap();
        assert_eq!(g.edges["x"].shape, vec![1, 4]);
    }

    #[test]
    fn float_data_and_int64_initializers_decode() {
        let t = TensorProto {
            dims: vec![2],
            data_type: Some(data_type::FLOAT),
            float_data: vec![1.5, -2.0],
            ..Default::default()
        };
        assert_eq!(decode_tensor(&t).unwrap().data(), &[1.5, -2.0]);
        let t = TensorProto {
            dims: vec![2],
            data_type: Some(data_type::INT64),
            raw_data: Some([(-1i64).to_le_bytes(), 7i64.to_le_bytes()].concat()),
            ..Default::default()
        };
        assert_eq!(decode_tensor(&t).unwrap().data(), &[-1.0, 7.0]);
        let t = TensorProto { dims: vec![1], data_type: Some(10), ..Default::default() };
        assert!(decode_tensor(&t).is_err());
    }
}
