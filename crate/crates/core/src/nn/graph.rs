use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, ConvSpec};
use super::weights::WeightSet;
use super::{NnError, Result, Shape, Tensor};
use crate::reparam::RepBlock;

/// Variance-conditioned channel gate.
///
/// Per channel, the spatial (population) variance of the input feeds a
/// two-layer MLP `channels -> hidden -> channels`; the MLP output multiplies
/// the corresponding input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGate {
    pub channels: usize,
    pub hidden: usize,
    pub fc1_weight: Vec<f32>,
    pub fc1_bias: Vec<f32>,
    pub fc2_weight: Vec<f32>,
    pub fc2_bias: Vec<f32>,
}

impl GlobalGate {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            channels,
            hidden,
            fc1_weight: vec![0.0; hidden * channels],
            fc1_bias: vec![0.0; hidden],
            fc2_weight: vec![0.0; channels * hidden],
            fc2_bias: vec![0.0; channels],
        }
    }

    pub fn gates(&self, variance: &[f32]) -> Vec<f32> {
        let hidden: Vec<f32> = (0..self.hidden)
            .map(|j| {
                let row = &self.fc1_weight[j * self.channels..(j + 1) * self.channels];
                let z: f32 = row.iter().zip(variance).map(|(w, v)| w * v).sum();
                (z + self.fc1_bias[j]).max(0.0)
            })
            .collect();
        (0..self.channels)
            .map(|c| {
                let row = &self.fc2_weight[c * self.hidden..(c + 1) * self.hidden];
                row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f32>() + self.fc2_bias[c]
            })
            .collect()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let s = input.shape();
        if s.c != self.channels {
            return Err(NnError::shape(format!(
                "global gate over {} channels fed {}",
                self.channels, s.c
            )));
        }
        let mut out = input.clone();
        for n in 0..s.n {
            let variance: Vec<f32> = (0..s.c)
                .map(|c| {
                    let plane = input.plane(n, c);
                    let len = plane.len().max(1) as f64;
                    let mean = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / len;
                    let var = plane
                        .iter()
                        .map(|&v| (f64::from(v) - mean).powi(2))
                        .sum::<f64>()
                        / len;
                    var as f32
                })
                .collect();
            for (c, g) in self.gates(&variance).into_iter().enumerate() {
                out.plane_mut(n, c).iter_mut().for_each(|v| *v *= g);
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> u64 {
        (self.fc1_weight.len() + self.fc1_bias.len() + self.fc2_weight.len() + self.fc2_bias.len())
            as u64
    }

    pub fn macs(&self, batch: usize) -> u64 {
        (2 * self.channels * self.hidden * batch) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv(ConvSpec),
    Relu,
    PixelShuffle(usize),
    PixelUnshuffle(usize),
    Concat,
    Add,
    Mul,
    /// Channels `start..end` of the single input.
    Slice {
        start: usize,
        end: usize,
    },
    AvgPool(usize),
    /// Inputs `[low, like]`: upsample `low` by the factor, cropped to `like`'s spatial size.
    UpsampleNearest(usize),
    GlobalBranch(GlobalGate),
    /// Training-form multi-branch block; replaced by a conv on fusion.
    RepBlock(RepBlock),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv(_) => "conv",
            Op::Relu => "relu",
            Op::PixelShuffle(_) => "pixel_shuffle",
            Op::PixelUnshuffle(_) => "pixel_unshuffle",
            Op::Concat => "concat",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Slice { .. } => "slice",
            Op::AvgPool(_) => "avg_pool",
            Op::UpsampleNearest(_) => "upsample_nearest",
            Op::GlobalBranch(_) => "global_branch",
            Op::RepBlock(_) => "rep_block",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Concat => None,
            Op::Add | Op::Mul | Op::UpsampleNearest(_) => Some(2),
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub name: String,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    Training,
    Fused,
}

/// A topologically ordered DAG of layers with named weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub inputs: Vec<GraphInput>,
    pub nodes: Vec<Node>,
    pub outputs: Vec<String>,
    pub form: Form,
}

pub type TensorMap = HashMap<String, Tensor>;

/// Callback over `(name, dims, data)` of every weight tensor.
pub type WeightVisitor<'a> = dyn FnMut(&str, &[usize], &[f32]) + 'a;
pub type WeightVisitorMut<'a> = dyn FnMut(&str, &[usize], &mut [f32]) + 'a;

impl ModelGraph {
    pub fn new(name: impl Into<String>, form: Form) -> Self {
        Self {
            name: name.into(),
            inputs: Vec::new(),
            nodes: Vec::new(),
            outputs: Vec::new(),
            form,
        }
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Checks ids are unique, every edge points backwards and outputs exist.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for input in &self.inputs {
            if !seen.insert(&input.name) {
                return Err(NnError::Graph(format!("duplicate id `{}`", input.name)));
            }
        }
        for node in &self.nodes {
            for src in &node.inputs {
                if !seen.contains(src.as_str()) {
                    return Err(NnError::Graph(format!(
                        "node `{}` reads `{src}` before it is defined",
                        node.id
                    )));
                }
            }
            if let Some(arity) = node.op.arity() {
                if node.inputs.len() != arity {
                    return Err(NnError::Graph(format!(
                        "node `{}` ({}) takes {arity} inputs, has {}",
                        node.id,
                        node.op.kind(),
                        node.inputs.len()
                    )));
                }
            } else if node.inputs.is_empty() {
                return Err(NnError::Graph(format!("node `{}` has no inputs", node.id)));
            }
            if !seen.insert(&node.id) {
                return Err(NnError::Graph(format!("duplicate id `{}`", node.id)));
            }
        }
        for out in &self.outputs {
            if !seen.contains(out.as_str()) {
                return Err(NnError::Graph(format!("unknown output `{out}`")));
            }
        }
        Ok(())
    }

    fn node_shape(node: &Node, ins: &[Shape]) -> Result<Shape> {
        let first = ins[0];
        let same = |a: Shape, b: Shape, what: &str| {
            if a == b {
                Ok(a)
            } else {
                Err(NnError::shape(format!("{what} of {a} and {b}")))
            }
        };
        match &node.op {
            Op::Conv(spec) => spec.output_shape(first),
            Op::Relu => Ok(first),
            Op::PixelShuffle(r) => {
                if !first.c.is_multiple_of(r * r) {
                    return Err(NnError::NotDivisible(format!(
                        "pixel_shuffle({r}) of {} channels",
                        first.c
                    )));
                }
                Ok(Shape::new(first.n, first.c / (r * r), first.h * r, first.w * r))
            }
            Op::PixelUnshuffle(r) => {
                if !first.h.is_multiple_of(*r) || !first.w.is_multiple_of(*r) {
                    return Err(NnError::NotDivisible(format!(
                        "pixel_unshuffle({r}) of {}x{}",
                        first.h, first.w
                    )));
                }
                Ok(Shape::new(first.n, first.c * r * r, first.h / r, first.w / r))
            }
            Op::Concat => {
                let mut c = 0;
                for s in ins {
                    if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                        return Err(NnError::shape(format!("concat of {first} with {s}")));
                    }
                    c += s.c;
                }
                Ok(first.with_channels(c))
            }
            Op::Add => same(first, ins[1], "add"),
            Op::Mul => same(first, ins[1], "mul"),
            Op::Slice { start, end } => {
                if start >= end || *end > first.c {
                    return Err(NnError::shape(format!(
                        "slice {start}..{end} of {} channels",
                        first.c
                    )));
                }
                Ok(first.with_channels(end - start))
            }
            Op::AvgPool(k) => Ok(Shape::new(
                first.n,
                first.c,
                first.h.div_ceil(*k),
                first.w.div_ceil(*k),
            )),
            Op::UpsampleNearest(k) => {
                let like = ins[1];
                if first.h * k < like.h || first.w * k < like.w {
                    return Err(NnError::shape(format!(
                        "upsample_nearest({k}) of {first} cannot cover {like}"
                    )));
                }
                Ok(Shape::new(first.n, first.c, like.h, like.w))
            }
            Op::GlobalBranch(g) => {
                if g.channels != first.c {
                    return Err(NnError::shape(format!(
                        "global gate over {} channels fed {}",
                        g.channels, first.c
                    )));
                }
                Ok(first)
            }
            Op::RepBlock(block) => block.output_shape(first),
        }
    }

    fn input_shapes_for(&self, input_shapes: &HashMap<String, Shape>) -> Result<HashMap<String, Shape>> {
        let mut shapes = HashMap::new();
        for input in &self.inputs {
            let s = *input_shapes
                .get(&input.name)
                .ok_or_else(|| NnError::MissingInput(input.name.clone()))?;
            if s.c != input.channels {
                return Err(NnError::ShapeMismatch {
                    node: input.name.clone(),
                    detail: format!("declared {} channels, got {s}", input.channels),
                });
            }
            shapes.insert(input.name.clone(), s);
        }
        Ok(shapes)
    }

    /// Shape of every graph input and node for the given input shapes.
    pub fn infer_shapes(&self, input_shapes: &HashMap<String, Shape>) -> Result<HashMap<String, Shape>> {
        self.validate()?;
        let mut shapes = self.input_shapes_for(input_shapes)?;
        for node in &self.nodes {
            let ins: Vec<Shape> = node.inputs.iter().map(|i| shapes[i]).collect();
            let s = Self::node_shape(node, &ins).map_err(|e| e.at_node(&node.id))?;
            shapes.insert(node.id.clone(), s);
        }
        Ok(shapes)
    }

    /// Single-input convenience for [`Self::infer_shapes`].
    pub fn infer_single(&self, shape: Shape) -> Result<HashMap<String, Shape>> {
        let name = self
            .inputs
            .first()
            .ok_or_else(|| NnError::Graph("graph has no inputs".into()))?
            .name
            .clone();
        self.infer_shapes(&HashMap::from([(name, shape)]))
    }

    fn eval_node(node: &Node, ins: &[&Tensor]) -> Result<Tensor> {
        let first = ins[0];
        match &node.op {
            Op::Conv(spec) => ops::conv2d(first, spec),
            Op::Relu => Ok(ops::relu(first)),
            Op::PixelShuffle(r) => ops::pixel_shuffle(first, *r),
            Op::PixelUnshuffle(r) => ops::pixel_unshuffle(first, *r),
            Op::Concat => ops::concat(ins),
            Op::Add => ops::add(first, ins[1]),
            Op::Mul => ops::mul(first, ins[1]),
            Op::Slice { start, end } => ops::slice_channels(first, *start, *end),
            Op::AvgPool(k) => ops::avg_pool(first, *k),
            Op::UpsampleNearest(k) => {
                let like = ins[1].shape();
                ops::upsample_nearest(first, *k, like.h, like.w)
            }
            Op::GlobalBranch(g) => g.forward(first),
            Op::RepBlock(block) => block.forward(first),
        }
    }

    /// Evaluates the graph; returns every declared output.
    pub fn run(&self, inputs: &TensorMap) -> Result<TensorMap> {
        let declared: HashMap<String, Shape> =
            inputs.iter().map(|(k, v)| (k.clone(), v.shape())).collect();
        // Validates structure and shapes before any arithmetic happens.
        self.infer_shapes(&declared)?;

        let mut last_use: HashMap<&str, usize> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            for src in &node.inputs {
                last_use.insert(src, i);
            }
        }
        let keep: HashSet<&str> = self.outputs.iter().map(String::as_str).collect();

        let mut values: HashMap<String, Tensor> = HashMap::new();
        for input in &self.inputs {
            values.insert(input.name.clone(), inputs[&input.name].clone());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let out = {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|s| &values[s]).collect();
                Self::eval_node(node, &ins).map_err(|e| e.at_node(&node.id))?
            };
            if !out.is_finite() {
                return Err(NnError::NonFinite(node.id.clone()));
            }
            values.insert(node.id.clone(), out);
            for src in &node.inputs {
                if last_use.get(src.as_str()) == Some(&i) && !keep.contains(src.as_str()) {
                    values.remove(src);
                }
            }
        }
        Ok(self
            .outputs
            .iter()
            .map(|o| (o.clone(), values[o].clone()))
            .collect())
    }

    /// Runs a single-input, single-output graph.
    pub fn run_single(&self, input: Tensor) -> Result<Tensor> {
        let name = self
            .inputs
            .first()
            .ok_or_else(|| NnError::Graph("graph has no inputs".into()))?
            .name
            .clone();
        let mut outs = self.run(&HashMap::from([(name, input)]))?;
        let out = self
            .outputs
            .first()
            .ok_or_else(|| NnError::Graph("graph has no outputs".into()))?;
        Ok(outs.remove(out).expect("declared output is produced"))
    }

    /// Learnable scalars: every conv weight and bias, gate MLP and RepBlock branch tensor.
    pub fn count_params(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Conv(spec) => spec.param_count(),
                Op::GlobalBranch(g) => g.param_count(),
                Op::RepBlock(b) => b.param_count(),
                _ => 0,
            })
            .sum()
    }

    /// Multiply-accumulates for one forward pass at the given input shapes.
    pub fn count_macs(&self, input_shapes: &HashMap<String, Shape>) -> Result<u64> {
        let shapes = self.infer_shapes(input_shapes)?;
        let mut total = 0u64;
        for node in &self.nodes {
            let out = shapes[&node.id];
            total += match &node.op {
                Op::Conv(spec) => spec.macs(out) * out.n as u64,
                Op::GlobalBranch(g) => g.macs(out.n),
                Op::RepBlock(b) => b.macs(out) * out.n as u64,
                _ => 0,
            };
        }
        Ok(total)
    }

    pub fn count_macs_single(&self, shape: Shape) -> Result<u64> {
        let name = self
            .inputs
            .first()
            .ok_or_else(|| NnError::Graph("graph has no inputs".into()))?
            .name
            .clone();
        self.count_macs(&HashMap::from([(name, shape)]))
    }

    /// Visits every named weight tensor in graph order.
    pub fn for_each_weight(&self, f: &mut WeightVisitor) {
        for node in &self.nodes {
            match &node.op {
                Op::Conv(spec) => visit_conv(&node.id, spec, f),
                Op::GlobalBranch(g) => {
                    let id = &node.id;
                    f(&format!("{id}.fc1.weight"), &[g.hidden, g.channels], &g.fc1_weight);
                    f(&format!("{id}.fc1.bias"), &[g.hidden], &g.fc1_bias);
                    f(&format!("{id}.fc2.weight"), &[g.channels, g.hidden], &g.fc2_weight);
                    f(&format!("{id}.fc2.bias"), &[g.channels], &g.fc2_bias);
                }
                Op::RepBlock(b) => b.for_each_weight(&node.id, f),
                _ => {}
            }
        }
    }

    pub fn for_each_weight_mut(&mut self, f: &mut WeightVisitorMut) {
        for node in &mut self.nodes {
            match &mut node.op {
                Op::Conv(spec) => visit_conv_mut(&node.id, spec, f),
                Op::GlobalBranch(g) => {
                    let id = &node.id;
                    let (c, h) = (g.channels, g.hidden);
                    f(&format!("{id}.fc1.weight"), &[h, c], &mut g.fc1_weight);
                    f(&format!("{id}.fc1.bias"), &[h], &mut g.fc1_bias);
                    f(&format!("{id}.fc2.weight"), &[c, h], &mut g.fc2_weight);
                    f(&format!("{id}.fc2.bias"), &[c], &mut g.fc2_bias);
                }
                Op::RepBlock(b) => b.for_each_weight_mut(&node.id, f),
                _ => {}
            }
        }
    }

    pub fn weight_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_weight(&mut |name, _, _| names.push(name.to_string()));
        names
    }

    pub fn export_weights(&self) -> WeightSet {
        let mut set = WeightSet::default();
        self.for_each_weight(&mut |name, dims, data| {
            set.push(name, dims.to_vec(), data.to_vec());
        });
        set
    }

    /// Loads a full weight set; the set must name exactly this graph's tensors.
    pub fn load_weights(&mut self, weights: &WeightSet) -> Result<()> {
        let names = self.weight_names();
        let expected: HashSet<&str> = names.iter().map(String::as_str).collect();
        let mut missing: Vec<String> = names
            .iter()
            .filter(|n| weights.get(n).is_none())
            .cloned()
            .collect();
        let extra: Vec<String> = weights
            .names()
            .filter(|n| !expected.contains(n))
            .map(str::to_string)
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            missing.sort();
            return Err(NnError::WeightMismatch { missing, extra });
        }
        let mut failure = None;
        self.for_each_weight_mut(&mut |name, dims, data| {
            let w = weights.get(name).expect("presence checked above");
            if w.dims != dims || w.data.len() != data.len() {
                failure.get_or_insert_with(|| NnError::WeightShape {
                    name: name.to_string(),
                    expected: dims.to_vec(),
                    got: w.dims.clone(),
                });
            } else {
                data.copy_from_slice(&w.data);
            }
        });
        failure.map_or(Ok(()), Err)
    }

    /// Uniform fan-in scaled initialisation: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    ///
    /// A bias shares the fan-in of the weight visited just before it; a fixed
    /// stencil scale counts its nine taps.
    pub fn init_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last_fan_in = 1usize;
        self.for_each_weight_mut(&mut |name, dims, data| {
            let fan_in = if dims.len() > 1 {
                last_fan_in = dims[1..].iter().product();
                last_fan_in
            } else if name.ends_with(".scale") {
                9
            } else {
                last_fan_in
            };
            let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
            for v in data.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        });
    }

    /// Zeros every weight whose name matches the predicate.
    pub fn zero_weights(&mut self, pred: impl Fn(&str) -> bool) {
        self.for_each_weight_mut(&mut |name, _, data| {
            if pred(name) {
                data.fill(0.0);
            }
        });
    }
}

pub(crate) fn visit_conv(id: &str, spec: &ConvSpec, f: &mut WeightVisitor) {
    let k = spec.kernel;
    f(
        &format!("{id}.weight"),
        &[spec.out_ch, spec.in_ch, k, k],
        &spec.weight,
    );
    f(&format!("{id}.bias"), &[spec.out_ch], &spec.bias);
}

pub(crate) fn visit_conv_mut(id: &str, spec: &mut ConvSpec, f: &mut WeightVisitorMut) {
    let dims = [spec.out_ch, spec.in_ch, spec.kernel, spec.kernel];
    f(&format!("{id}.weight"), &dims, &mut spec.weight);
    f(&format!("{id}.bias"), &[spec.out_ch], &mut spec.bias);
}

/// Incremental graph construction; every method returns the new node id.
pub struct GraphBuilder {
    graph: ModelGraph,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, form: Form) -> Self {
        Self {
            graph: ModelGraph::new(name, form),
        }
    }

    pub fn input(&mut self, name: &str, channels: usize) -> String {
        self.graph.inputs.push(GraphInput {
            name: name.to_string(),
            channels,
        });
        name.to_string()
    }

    pub fn push(&mut self, id: impl Into<String>, op: Op, inputs: &[&str]) -> String {
        let id = id.into();
        self.graph.nodes.push(Node {
            id: id.clone(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        id
    }

    pub fn conv(
        &mut self,
        id: impl Into<String>,
        input: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> String {
        self.push(
            id,
            Op::Conv(ConvSpec::zeros(in_ch, out_ch, kernel, stride)),
            &[input],
        )
    }

    pub fn relu(&mut self, id: impl Into<String>, input: &str) -> String {
        self.push(id, Op::Relu, &[input])
    }

    pub fn add(&mut self, id: impl Into<String>, a: &str, b: &str) -> String {
        self.push(id, Op::Add, &[a, b])
    }

    pub fn output(&mut self, id: &str) {
        self.graph.outputs.push(id.to_string());
    }

    pub fn finish(self) -> ModelGraph {
        self.graph
            .validate()
            .expect("builder produced an invalid graph");
        self.graph
    }
}
