//! Genotype decoding into a layer DAG, shape inference, memory estimates and
//! exports.
//!
//! A decoded [`LayerGraph`] holds the input nodes, the active grid nodes and a
//! single softmax output node, in ascending node-id order (a valid topological
//! order). [`LayerGraph::infer_shapes`] turns it into a [`ShapedGraph`].

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, FunctionSpec, TensorShape};
use crate::genome::Genotype;

pub const GRAPH_SCHEMA: &str = "cgpnas.graph.v1";
const SCALAR_BYTES: usize = 4;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("invalid architecture: node {node} produces a zero-sized feature map")]
pub struct InvalidArchitecture {
    pub node: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeOp {
    /// Network input with its index among the genotype's inputs.
    Input(usize),
    Function(FunctionSpec),
    /// Flatten, fully connected layer, softmax.
    Output,
}

impl NodeOp {
    pub fn label(&self) -> String {
        match self {
            NodeOp::Input(i) => format!("input{i}"),
            NodeOp::Function(f) => f.symbol(),
            NodeOp::Output => "softmax".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    /// Genotype node id; the output node gets `node_count` of the genotype.
    pub id: usize,
    pub op: NodeOp,
    /// Producer ids by input slot.
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGraph {
    pub nodes: Vec<GraphNode>,
}

/// Decodes the first output gene's active subgraph.
pub fn decode(g: &Genotype) -> LayerGraph {
    decode_with(g, &g.config().catalog())
}

pub fn decode_with(g: &Genotype, catalog: &Catalog) -> LayerGraph {
    let cfg = g.config();
    let active = g.active_nodes();
    let mut nodes: Vec<GraphNode> = (0..cfg.inputs)
        .map(|i| GraphNode {
            id: i,
            op: NodeOp::Input(i),
            inputs: vec![],
        })
        .collect();
    for &id in &active.nodes {
        let gene = g.gene(id);
        let spec = *catalog
            .get(gene.function_id)
            .expect("validated genotype has in-range function ids");
        nodes.push(GraphNode {
            id,
            op: NodeOp::Function(spec),
            inputs: gene.inputs[..spec.arity()].to_vec(),
        });
    }
    nodes.push(GraphNode {
        id: cfg.node_count(),
        op: NodeOp::Output,
        inputs: vec![g.outputs()[0]],
    });
    LayerGraph { nodes }
}

/// `true` when both genotypes decode to equal graphs.
pub fn same_phenotype(a: &Genotype, b: &Genotype) -> bool {
    graph_equal(&decode(a), &decode(b))
}

/// Structural equality of two graphs, independent of node ids.
pub fn graph_equal(a: &LayerGraph, b: &LayerGraph) -> bool {
    a.canonical_form() == b.canonical_form()
}

impl LayerGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index_of(&self) -> HashMap<usize, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    pub fn output(&self) -> &GraphNode {
        self.nodes.last().expect("graph always has an output node")
    }

    /// Relabels nodes in post-order of a slot-ordered depth-first walk from
    /// the output. Two graphs are isomorphic as slot-ordered rooted DAGs
    /// exactly when their canonical forms are equal.
    pub fn canonical_form(&self) -> Vec<(NodeOp, Vec<usize>)> {
        let index = self.index_of();
        let mut label: HashMap<usize, usize> = HashMap::new();
        let mut out = Vec::with_capacity(self.nodes.len());
        // explicit stack: (node index, next slot to visit)
        let mut stack = vec![(self.nodes.len() - 1, 0usize)];
        while let Some((i, slot)) = stack.pop() {
            let node = &self.nodes[i];
            if label.contains_key(&node.id) {
                continue;
            }
            if slot < node.inputs.len() {
                stack.push((i, slot + 1));
                let child = node.inputs[slot];
                if !label.contains_key(&child) {
                    stack.push((index[&child], 0));
                }
                continue;
            }
            let ins = node.inputs.iter().map(|p| label[p]).collect();
            label.insert(node.id, out.len());
            out.push((node.op, ins));
        }
        out
    }

    /// Assigns an output shape to every node in topological order.
    pub fn infer_shapes(
        &self,
        input: TensorShape,
        classes: usize,
    ) -> Result<ShapedGraph, InvalidArchitecture> {
        let index = self.index_of();
        let mut shapes: Vec<TensorShape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let shape = match node.op {
                NodeOp::Input(_) => input,
                NodeOp::Output => TensorShape::new(1, 1, classes),
                NodeOp::Function(spec) => {
                    let first = shapes[index[&node.inputs[0]]];
                    let second = node.inputs.get(1).map(|p| shapes[index[p]]);
                    spec.output_shape(first, second)
                        .expect("decoded arity matches the function")
                        .ok_or(InvalidArchitecture { node: node.id })?
                }
            };
            shapes.push(shape);
        }
        Ok(ShapedGraph {
            graph: self.clone(),
            shapes,
            input,
            classes,
        })
    }

    pub fn to_dot(&self) -> String {
        render_dot(self, None)
    }
}

/// Byte estimate of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    /// Activations and their gradients.
    pub activation_bytes: usize,
    /// Parameters, their gradients and one optimizer slot.
    pub parameter_bytes: usize,
    pub total_bytes: usize,
}

/// A decoded graph with a shape per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapedGraph {
    pub graph: LayerGraph,
    pub shapes: Vec<TensorShape>,
    pub input: TensorShape,
    pub classes: usize,
}

impl ShapedGraph {
    pub fn nodes(&self) -> &[GraphNode] {
        &self.graph.nodes
    }

    pub fn shape_of(&self, id: usize) -> Option<TensorShape> {
        self.graph
            .nodes
            .iter()
            .position(|n| n.id == id)
            .map(|i| self.shapes[i])
    }

    /// Shape feeding the softmax layer.
    pub fn final_feature_shape(&self) -> TensorShape {
        self.shape_of(self.graph.output().inputs[0])
            .expect("output producer is in the graph")
    }

    /// Parameters of node `i` (index into `nodes`).
    pub fn node_params(&self, i: usize) -> usize {
        let node = &self.graph.nodes[i];
        match node.op {
            NodeOp::Input(_) => 0,
            NodeOp::Function(spec) => {
                let input = self.shape_of(node.inputs[0]).expect("producer shaped");
                spec.param_count(input)
            }
            NodeOp::Output => {
                let features = self.final_feature_shape().elements();
                features * self.classes + self.classes
            }
        }
    }

    pub fn param_count(&self) -> usize {
        (0..self.graph.nodes.len()).map(|i| self.node_params(i)).sum()
    }

    pub fn estimate_memory(&self, batch: usize) -> MemoryEstimate {
        let per_sample: usize = self
            .graph
            .nodes
            .iter()
            .zip(&self.shapes)
            .map(|(node, shape)| match node.op {
                // convolution output, normalized output, activation
                NodeOp::Function(spec) if spec.is_convolutional() => 3 * shape.elements(),
                _ => shape.elements(),
            })
            .sum();
        let activation_bytes = 2 * per_sample * batch * SCALAR_BYTES;
        let parameter_bytes = 3 * self.param_count() * SCALAR_BYTES;
        MemoryEstimate {
            activation_bytes,
            parameter_bytes,
            total_bytes: activation_bytes + parameter_bytes,
        }
    }

    pub fn to_dot(&self) -> String {
        render_dot(&self.graph, Some(self))
    }

    pub fn to_json(&self) -> GraphJson {
        GraphJson {
            schema: GRAPH_SCHEMA.to_string(),
            input: self.input.into(),
            classes: self.classes,
            nodes: self
                .graph
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| JsonNode {
                    id: n.id,
                    kind: match n.op {
                        NodeOp::Input(_) => "Input".into(),
                        NodeOp::Function(f) => f.kind.to_string(),
                        NodeOp::Output => "Output".into(),
                    },
                    symbol: n.op.label(),
                    shape: self.shapes[i].into(),
                    params: self.node_params(i),
                })
                .collect(),
            edges: self
                .graph
                .nodes
                .iter()
                .flat_map(|n| {
                    n.inputs.iter().enumerate().map(move |(slot, &from)| JsonEdge {
                        from,
                        to: n.id,
                        slot,
                    })
                })
                .collect(),
            total_params: self.param_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphJson {
    pub schema: String,
    pub input: [usize; 3],
    pub classes: usize,
    pub nodes: Vec<JsonNode>,
    pub edges: Vec<JsonEdge>,
    pub total_params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonNode {
    pub id: usize,
    pub kind: String,
    pub symbol: String,
    pub shape: [usize; 3],
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonEdge {
    pub from: usize,
    pub to: usize,
    pub slot: usize,
}

impl From<TensorShape> for [usize; 3] {
    fn from(s: TensorShape) -> Self {
        [s.rows, s.cols, s.channels]
    }
}

fn render_dot(graph: &LayerGraph, shaped: Option<&ShapedGraph>) -> String {
    let mut out = String::from("digraph cgpnas {\n  rankdir=TB;\n  node [shape=box];\n");
    for (i, node) in graph.nodes.iter().enumerate() {
        let mut label = match node.op {
            NodeOp::Output => match shaped {
                Some(s) => format!("softmax({})", s.classes),
                None => "softmax".into(),
            },
            op => op.label(),
        };
        if let Some(s) = shaped {
            if !matches!(node.op, NodeOp::Output) {
                let _ = write!(label, "\\n{}", s.shapes[i]);
            }
        }
        let _ = writeln!(out, "  n{} [label=\"{}\"];", node.id, label);
    }
    for node in &graph.nodes {
        let binary = node.inputs.len() > 1;
        for (slot, from) in node.inputs.iter().enumerate() {
            if binary {
                let _ = writeln!(out, "  n{from} -> n{} [label=\"{slot}\"];", node.id);
            } else {
                let _ = writeln!(out, "  n{from} -> n{};", node.id);
            }
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{FunctionKind, FunctionSetId};
    use crate::genome::{random_genotype, CgpConfig, NodeGene};
    use crate::rng::seeded;

    fn open_config(rows: usize, cols: usize) -> CgpConfig {
        CgpConfig {
            rows,
            cols,
            levels_back: cols,
            min_active: 0,
            max_active: rows * cols,
            ..CgpConfig::default()
        }
    }

    fn gene(function_id: usize, a: usize, b: usize) -> NodeGene {
        NodeGene {
            function_id,
            inputs: [a, b],
        }
    }

    // ConvSet ids: 0 CB(32,3) 1 CB(32,5) 2 CB(64,3) 3 CB(64,5) 4 CB(128,3)
    // 5 CB(128,5) 6 MP 7 AP 8 Sum 9 Concat
    fn chain(functions: &[usize]) -> Genotype {
        let n = functions.len();
        let genes = functions
            .iter()
            .enumerate()
            .map(|(j, &f)| gene(f, j, j))
            .collect();
        Genotype::from_parts(open_config(1, n), genes, vec![n]).unwrap()
    }

    #[test]
    fn two_by_three_with_one_inactive_node() {
        // ids: 0 input; column 0: 1,2; column 1: 3,4; column 2: 5,6
        let g = Genotype::from_parts(
            open_config(2, 3),
            vec![
                gene(0, 0, 0),
                gene(2, 0, 0),
                gene(8, 1, 2),
                gene(6, 2, 2),
                gene(1, 4, 4),
                gene(9, 3, 4),
            ],
            vec![6],
        )
        .unwrap();
        let graph = decode(&g);
        assert_eq!(g.active_count(), 5);
        assert_eq!(graph.len(), 7);
        assert!(graph.nodes.iter().all(|n| n.id != 5));
        assert_eq!(graph.output().inputs, vec![6]);
    }

    #[test]
    fn pass_through_graph() {
        let g = Genotype::from_parts(open_config(1, 2), vec![gene(0, 0, 0); 2], vec![0]).unwrap();
        let graph = decode(&g);
        assert_eq!(graph.len(), 2);
        let shaped = graph.infer_shapes(TensorShape::new(32, 32, 3), 10).unwrap();
        assert_eq!(shaped.final_feature_shape().elements(), 3072);
        assert_eq!(shaped.param_count(), 30_730);
    }

    #[test]
    fn node_count_matches_active_set() {
        let mut rng = seeded(2);
        for _ in 0..100 {
            let g = random_genotype(&CgpConfig::default(), &mut rng).unwrap();
            assert_eq!(decode(&g).len(), g.active_count() + 2);
        }
    }

    #[test]
    fn unary_nodes_use_slot_zero_only() {
        let g = chain(&[0, 6, 9]);
        let graph = decode(&g);
        for n in &graph.nodes {
            if let NodeOp::Function(f) = n.op {
                assert_eq!(n.inputs.len(), f.arity());
            }
        }
    }

    #[test]
    fn shape_composition() {
        // CB(64,3) -> MP -> CB(32,5)
        let g = chain(&[2, 6, 1]);
        let shaped = decode(&g).infer_shapes(TensorShape::new(32, 32, 3), 10).unwrap();
        assert_eq!(shaped.final_feature_shape(), TensorShape::new(16, 16, 32));
    }

    #[test]
    fn pooling_chain_to_zero_is_invalid() {
        let g = chain(&[6; 6]);
        let err = decode(&g).infer_shapes(TensorShape::new(32, 32, 3), 10).unwrap_err();
        assert_eq!(err, InvalidArchitecture { node: 6 });
        let ok = chain(&[6; 5]);
        assert!(decode(&ok).infer_shapes(TensorShape::new(32, 32, 3), 10).is_ok());
    }

    #[test]
    fn memory_estimates() {
        let g = Genotype::from_parts(open_config(1, 1), vec![gene(0, 0, 0)], vec![0]).unwrap();
        let shaped = decode(&g).infer_shapes(TensorShape::new(32, 32, 3), 10).unwrap();
        let m = shaped.estimate_memory(128);
        assert_eq!(m.parameter_bytes, (3072 * 10 + 10) * 4 * 3);
        assert_eq!(shaped.estimate_memory(256).activation_bytes, 2 * m.activation_bytes);
        assert_eq!(m.total_bytes, m.activation_bytes + m.parameter_bytes);

        let big = decode(&chain(&[5])).infer_shapes(TensorShape::new(32, 32, 3), 10).unwrap();
        let small = decode(&chain(&[0])).infer_shapes(TensorShape::new(32, 32, 3), 10).unwrap();
        assert!(big.estimate_memory(128).total_bytes > small.estimate_memory(128).total_bytes);
    }

    #[test]
    fn canonical_form_ignores_ids() {
        // same CB -> MP chain placed on different rows
        let cfg = open_config(2, 2);
        let a = Genotype::from_parts(
            cfg.clone(),
            vec![gene(0, 0, 0), gene(3, 0, 0), gene(6, 1, 1), gene(7, 2, 2)],
            vec![3],
        )
        .unwrap();
        let b = Genotype::from_parts(
            cfg.clone(),
            vec![gene(3, 0, 0), gene(0, 0, 0), gene(6, 2, 2), gene(7, 1, 1)],
            vec![3],
        )
        .unwrap();
        assert!(same_phenotype(&a, &b));
        let c = Genotype::from_parts(
            cfg,
            vec![gene(0, 0, 0), gene(3, 0, 0), gene(7, 1, 1), gene(6, 2, 2)],
            vec![3],
        )
        .unwrap();
        assert!(!same_phenotype(&a, &c));
        assert!(graph_equal(&decode(&a), &decode(&a)));
    }

    #[test]
    fn slot_order_matters_for_concat() {
        let cfg = open_config(2, 2);
        let make = |x: usize, y: usize| {
            Genotype::from_parts(
                cfg.clone(),
                vec![gene(0, 0, 0), gene(6, 0, 0), gene(9, x, y), gene(0, 1, 1)],
                vec![3],
            )
            .unwrap()
        };
        assert!(!same_phenotype(&make(1, 2), &make(2, 1)));
        assert!(same_phenotype(&make(1, 2), &make(1, 2)));
    }

    #[test]
    fn dot_output() {
        let g = Genotype::from_parts(open_config(1, 1), vec![gene(0, 0, 0)], vec![0]).unwrap();
        let shaped = decode(&g).infer_shapes(TensorShape::new(32, 32, 3), 10).unwrap();
        let dot = shaped.to_dot();
        assert_eq!(dot.matches("[label=").count(), 2);
        assert_eq!(dot.matches("->").count(), 1);
        assert_eq!(dot, shaped.to_dot());
        let sum = decode(&chain(&[0, 8])).to_dot();
        assert!(sum.contains("[label=\"1\"]"));
    }

    #[test]
    fn json_export() {
        let g = chain(&[2, 6, 1]);
        let shaped = decode(&g).infer_shapes(TensorShape::new(32, 32, 3), 10).unwrap();
        let json = shaped.to_json();
        assert_eq!(json.schema, GRAPH_SCHEMA);
        assert_eq!(json.nodes.len(), 5);
        assert_eq!(json.edges.len(), 4);
        assert_eq!(json.total_params, json.nodes.iter().map(|n| n.params).sum::<usize>());
        let text = serde_json::to_string(&json).unwrap();
        let back: GraphJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back, json);
    }

    #[test]
    fn res_set_decodes_res_blocks() {
        let cfg = CgpConfig {
            function_set: FunctionSetId::ResSet,
            ..open_config(1, 1)
        };
        let g = Genotype::from_parts(cfg, vec![gene(0, 0, 0)], vec![1]).unwrap();
        let graph = decode(&g);
        assert!(matches!(graph.nodes[1].op, NodeOp::Function(f) if f.kind == FunctionKind::ResBlock));
    }
}
