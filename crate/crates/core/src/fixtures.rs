//! Random-weight instances of the evaluation networks.
//!
//! Weights are drawn from `N(0, 2 / fan_in)` and biases from `N(0, 0.05^2)`,
//! all rounded to `f32` so an exported model reloads bit-exactly. Inputs are
//! uniform on `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::CalibrationSet;
use crate::graph::{infer_shapes, AttrValue, ModelGraph, Node, OpKind, TensorSpec, EXPORT_OPSET};
use crate::tensor::Tensor;

pub const DEFAULT_CALIBRATION_SAMPLES: usize = 100;
const BIAS_STD: f64 = 0.05;
const INPUT_NAME: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FixtureName {
    CryptoNets,
    LeNet5,
    MobileFaceNetsClassifier,
}

impl FixtureName {
    pub const ALL: [FixtureName; 3] =
        [FixtureName::CryptoNets, FixtureName::LeNet5, FixtureName::MobileFaceNetsClassifier];

    pub fn as_str(self) -> &'static str {
        match self {
            FixtureName::CryptoNets => "cryptonets",
            FixtureName::LeNet5 => "lenet5",
            FixtureName::MobileFaceNetsClassifier => "mobilefacenets-classifier",
        }
    }

    pub fn input_shape(self) -> Vec<usize> {
        match self {
            FixtureName::CryptoNets | FixtureName::LeNet5 => vec![1, 1, 32, 32],
            FixtureName::MobileFaceNetsClassifier => vec![1, 320, 7, 7],
        }
    }
}

impl fmt::Display for FixtureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown fixture `{0}` (expected cryptonets, lenet5 or mobilefacenets-classifier)")]
pub struct UnknownFixture(pub String);

impl FromStr for FixtureName {
    type Err = UnknownFixture;

    fn from_str(s: &str) -> Result<Self, UnknownFixture> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "cryptonets" => Ok(FixtureName::CryptoNets),
            "lenet5" | "lenet-5" => Ok(FixtureName::LeNet5),
            "mobilefacenets-classifier" | "mobilefacenets" => Ok(FixtureName::MobileFaceNetsClassifier),
            _ => Err(UnknownFixture(s.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: FixtureName,
    pub seed: u64,
    pub graph: ModelGraph,
    pub calibration: CalibrationSet,
}

impl Fixture {
    /// Fresh inputs from the calibration distribution, independent of the
    /// calibration set itself.
    pub fn sample_inputs(&self, n: usize, seed: u64) -> Vec<Tensor> {
        uniform_inputs(&self.name.input_shape(), n, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1e57))
    }
}

pub fn build_fixture(name: FixtureName, seed: u64) -> Fixture {
    let mut b = Builder::new(seed, name.input_shape());
    match name {
        FixtureName::CryptoNets => {
            let x = b.conv("conv1", INPUT_NAME, 1, 4, 5, 3, 1, true);
            let x = b.relu("relu1", &x);
            let x = b.flatten("flatten", &x);
            let x = b.fc("fc1", &x, 400, 128);
            let x = b.relu("relu2", &x);
            b.fc("fc2", &x, 128, 10);
        }
        FixtureName::LeNet5 => {
            let x = b.conv("conv1", INPUT_NAME, 1, 6, 5, 1, 1, true);
            let x = b.relu("relu1", &x);
            let x = b.avgpool("pool1", &x);
            let x = b.conv("conv2", &x, 6, 16, 5, 1, 1, true);
            let x = b.relu("relu2", &x);
            let x = b.avgpool("pool2", &x);
            let x = b.conv("conv3", &x, 16, 120, 5, 1, 1, true);
            let x = b.relu("relu3", &x);
            let x = b.flatten("flatten", &x);
            let x = b.fc("fc1", &x, 120, 84);
            let x = b.relu("relu4", &x);
            b.fc("fc2", &x, 84, 10);
        }
        FixtureName::MobileFaceNetsClassifier => {
            let x = b.conv("dwconv", INPUT_NAME, 320, 320, 7, 1, 320, true);
            b.conv("conv", &x, 320, 128, 1, 1, 1, false);
        }
    }
    let graph = b.finish(name.as_str());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca11_b4a7);
    let calibration =
        CalibrationSet::new(INPUT_NAME, uniform_inputs(&name.input_shape(), DEFAULT_CALIBRATION_SAMPLES, &mut rng));
    Fixture { name, seed, graph, calibration }
}

fn uniform_inputs(shape: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let len: usize = shape.iter().product();
    (0..n).map(|_| Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random::<f32>() as f64).collect())).collect()
}

struct Builder {
    rng: ChaCha8Rng,
    graph: ModelGraph,
    last: String,
}

impl Builder {
    fn new(seed: u64, input_shape: Vec<usize>) -> Self {
        let mut graph = ModelGraph {
            name: String::new(),
            opset: EXPORT_OPSET,
            nodes: Vec::new(),
            edges: Default::default(),
            initializers: Default::default(),
            inputs: vec![INPUT_NAME.into()],
            outputs: Vec::new(),
        };
        graph.edges.insert(INPUT_NAME.into(), TensorSpec::new(input_shape));
        Self { rng: ChaCha8Rng::seed_from_u64(seed), graph, last: INPUT_NAME.into() }
    }

    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| dist.sample(&mut self.rng) as f32 as f64).collect())
    }

    fn init(&mut self, name: String, t: Tensor) -> String {
        self.graph.edges.insert(name.clone(), TensorSpec::new(t.shape().to_vec()));
        self.graph.initializers.insert(name.clone(), t);
        name
    }

    fn push(&mut self, node: Node) -> String {
        let out = node.outputs[0].clone();
        self.graph.nodes.push(node);
        self.last = out.clone();
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        x: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        group: usize,
        bias: bool,
    ) -> String {
        let fan_in = cin / group * k * k;
        let w = self.normal(vec![cout, cin / group, k, k], (2.0 / fan_in as f64).sqrt());
        let w = self.init(format!("{name}.weight"), w);
        let mut inputs = vec![x.to_string(), w];
        if bias {
            let b = self.normal(vec![cout], BIAS_STD);
            inputs.push(self.init(format!("{name}.bias"), b));
        }
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let out = format!("{name}_out");
        let k = k as i64;
        let s = stride as i64;
        self.push(
            Node::new(name, OpKind::Conv, &refs, &[&out])
                .with_attr("kernel_shape", AttrValue::Ints(vec![k, k]))
                .with_attr("strides", AttrValue::Ints(vec![s, s]))
                .with_attr("group", AttrValue::Int(group as i64)),
        )
    }

    fn fc(&mut self, name: &str, x: &str, fan_in: usize, fan_out: usize) -> String {
        let w = self.normal(vec![fan_out, fan_in], (2.0 / fan_in as f64).sqrt());
        let w = self.init(format!("{name}.weight"), w);
        let b = self.normal(vec![fan_out], BIAS_STD);
        let b = self.init(format!("{name}.bias"), b);
        let out = format!("{name}_out");
        self.push(
            Node::new(name, OpKind::Gemm, &[x, w.as_str(), b.as_str()], &[&out]).with_attr("transB", AttrValue::Int(1)),
        )
    }

    fn relu(&mut self, name: &str, x: &str) -> String {
        let out = format!("{name}_out");
        self.push(Node::new(name, OpKind::Relu, &[x], &[&out]))
    }

    fn avgpool(&mut self, name: &str, x: &str) -> String {
        let out = format!("{name}_out");
        self.push(
            Node::new(name, OpKind::AveragePool, &[x], &[&out])
                .with_attr("kernel_shape", AttrValue::Ints(vec![2, 2]))
                .with_attr("strides", AttrValue::Ints(vec![2, 2])),
        )
    }

    fn flatten(&mut self, name: &str, x: &str) -> String {
        let out = format!("{name}_out");
        self.push(Node::new(name, OpKind::Flatten, &[x], &[&out]).with_attr("axis", AttrValue::Int(1)))
    }

    fn finish(mut self, name: &str) -> ModelGraph {
        self.graph.name = name.into();
        self.graph.outputs = vec![self.last.clone()];
        infer_shapes(&self.graph).expect("fixture graphs are well formed")
    }
}
