//! Directed message passing encoder.
//!
//! Hidden states live on directed edges. For edge `v -> w`:
//!
//! ```text
//! h0[v->w] = relu([x_v | e_vw] W_in)
//! ht[v->w] = relu(h0[v->w] + (sum over k in N(v) \ {w} of h(t-1)[k->v]) W_msg)   t = 1..depth-1
//! h_v      = relu([x_v | sum over k in N(v) of h(depth-1)[k->v]] W_node)
//! ```
//!
//! The reverse edge `w -> v` never feeds `v -> w`, so walks cannot
//! immediately backtrack. Graph embeddings are the mean (or sum) of node
//! embeddings. There are no biases and no dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Axis, DiffError, Tape, Tensor, Var};
use crate::molgraph::{FeaturizedGraph, ATOM_FEATURES, BOND_FEATURES, FEATURE_SCHEME_VERSION};
use crate::par;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub depth: usize,
    pub readout: Readout,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { hidden_dim: 300, depth: 3, readout: Readout::Mean, seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.hidden_dim == 0 {
            return Err(EncoderError::Config("hidden_dim must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(EncoderError::Config("depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Width of a directed-edge input row: atom features then bond features.
pub const EDGE_INPUT: usize = ATOM_FEATURES + BOND_FEATURES;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `(F_a + F_b) x hidden`
    pub w_in: Tensor,
    /// `hidden x hidden`
    pub w_msg: Tensor,
    /// `(F_a + hidden) x hidden`
    pub w_node: Tensor,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized by construction")
}

pub fn init_params(config: &EncoderConfig) -> Result<EncoderParams, EncoderError> {
    config.validate()?;
    let h = config.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(EncoderParams {
        w_in: glorot(&mut rng, EDGE_INPUT, h),
        w_msg: glorot(&mut rng, h, h),
        w_node: glorot(&mut rng, ATOM_FEATURES + h, h),
    })
}

impl EncoderParams {
    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_in, &self.w_msg, &self.w_node]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_in, &mut self.w_msg, &mut self.w_node]
    }

    pub fn from_tensors(mut tensors: Vec<Tensor>, config: &EncoderConfig) -> Result<Self, EncoderError> {
        if tensors.len() != 3 {
            return Err(EncoderError::Shape(format!("expected 3 parameter tensors, got {}", tensors.len())));
        }
        let w_node = tensors.pop().expect("len 3");
        let w_msg = tensors.pop().expect("len 3");
        let w_in = tensors.pop().expect("len 3");
        let p = EncoderParams { w_in, w_msg, w_node };
        p.check(config)?;
        Ok(p)
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_msg.rows()
    }

    /// Verifies shapes against the config and that every entry is finite.
    pub fn check(&self, config: &EncoderConfig) -> Result<(), EncoderError> {
        let h = config.hidden_dim;
        let expect = [(EDGE_INPUT, h), (h, h), (ATOM_FEATURES + h, h)];
        for (t, (r, c)) in self.tensors().iter().zip(expect) {
            if t.shape() != [r, c] {
                return Err(EncoderError::Shape(format!("parameter {:?}, expected [{r}, {c}]", t.shape())));
            }
            if t.data().iter().any(|x| !x.is_finite()) {
                return Err(EncoderError::Shape("non-finite parameter".into()));
            }
        }
        Ok(())
    }
}

/// Several featurized molecules packed as one disjoint graph.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    /// `E x EDGE_INPUT`: `[x_source | bond]` per directed edge.
    pub edge_inputs: Tensor,
    /// `N x ATOM_FEATURES`
    pub atom_features: Tensor,
    /// For each directed edge `v -> w`, the edges `k -> v` with `k != w`.
    pub message_sources: Vec<Vec<usize>>,
    /// For each atom, all incoming directed edges.
    pub node_incoming: Vec<Vec<usize>>,
    /// Global atom indices belonging to each molecule.
    pub graph_nodes: Vec<Vec<usize>>,
}

impl GraphBatch {
    pub fn new(graphs: &[&FeaturizedGraph]) -> Result<Self, EncoderError> {
        let mut edge_inputs = Vec::new();
        let mut atom_features = Vec::new();
        let mut message_sources = Vec::new();
        let mut node_incoming = Vec::new();
        let mut graph_nodes = Vec::with_capacity(graphs.len());
        let (mut atom_off, mut edge_off) = (0usize, 0usize);
        for g in graphs {
            if g.scheme_version != FEATURE_SCHEME_VERSION
                || g.atom_features.len() != g.n_atoms() * ATOM_FEATURES
                || g.bond_features.len() != g.n_bonds() * BOND_FEATURES
            {
                return Err(EncoderError::Shape(format!(
                    "featurization scheme v{} does not match encoder v{FEATURE_SCHEME_VERSION}",
                    g.scheme_version
                )));
            }
            atom_features.extend_from_slice(&g.atom_features);
            for (e, edge) in g.edges.iter().enumerate() {
                edge_inputs.extend_from_slice(g.atom_row(edge.source));
                edge_inputs.extend_from_slice(g.bond_row(e / 2));
                let sources = g.incidence[edge.source]
                    .iter()
                    .copied()
                    .filter(|&k| k != edge.reverse)
                    .map(|k| k + edge_off)
                    .collect();
                message_sources.push(sources);
            }
            for incoming in &g.incidence {
                node_incoming.push(incoming.iter().map(|&k| k + edge_off).collect());
            }
            graph_nodes.push((atom_off..atom_off + g.n_atoms()).collect());
            atom_off += g.n_atoms();
            edge_off += g.edges.len();
        }
        Ok(GraphBatch {
            edge_inputs: Tensor::matrix(edge_off, EDGE_INPUT, edge_inputs)?,
            atom_features: Tensor::matrix(atom_off, ATOM_FEATURES, atom_features)?,
            message_sources,
            node_incoming,
            graph_nodes,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.node_incoming.len()
    }

    pub fn n_graphs(&self) -> usize {
        self.graph_nodes.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub w_in: Var,
    pub w_msg: Var,
    pub w_node: Var,
}

impl ParamVars {
    pub fn trainable(tape: &mut Tape, p: &EncoderParams) -> Self {
        ParamVars {
            w_in: tape.param(p.w_in.clone()),
            w_msg: tape.param(p.w_msg.clone()),
            w_node: tape.param(p.w_node.clone()),
        }
    }

    pub fn frozen(tape: &mut Tape, p: &EncoderParams) -> Self {
        ParamVars {
            w_in: tape.constant(p.w_in.clone()),
            w_msg: tape.constant(p.w_msg.clone()),
            w_node: tape.constant(p.w_node.clone()),
        }
    }

    pub fn vars(&self) -> [Var; 3] {
        [self.w_in, self.w_msg, self.w_node]
    }
}

#[derive(Debug, Clone)]
pub struct Encoded {
    /// `N x hidden`
    pub nodes: Var,
    /// `B x hidden`
    pub graphs: Var,
    /// Edge states `h0 .. h(depth-1)`, each `E x hidden`.
    pub edge_states: Vec<Var>,
    /// Aggregated incoming messages at steps `1 .. depth-1`, each `E x hidden`.
    pub messages: Vec<Var>,
}

/// Records the encoder forward pass for a batch on `tape`.
pub fn forward(
    tape: &mut Tape,
    params: ParamVars,
    batch: &GraphBatch,
    config: &EncoderConfig,
) -> Result<Encoded, EncoderError> {
    config.validate()?;
    let hidden = tape.value(params.w_msg).rows();
    if hidden != config.hidden_dim {
        return Err(EncoderError::Shape(format!(
            "params have hidden {hidden}, config says {}",
            config.hidden_dim
        )));
    }
    let x_edges = tape.constant(batch.edge_inputs.clone());
    let x_atoms = tape.constant(batch.atom_features.clone());

    let pre = tape.matmul(x_edges, params.w_in)?;
    let h0 = tape.relu(pre);
    let mut edge_states = vec![h0];
    let mut messages = Vec::new();
    let mut h = h0;
    for _ in 1..config.depth {
        let m = tape.gather_sum(h, batch.message_sources.clone())?;
        let mw = tape.matmul(m, params.w_msg)?;
        let s = tape.add(h0, mw)?;
        h = tape.relu(s);
        messages.push(m);
        edge_states.push(h);
    }
    let agg = tape.gather_sum(h, batch.node_incoming.clone())?;
    let node_in = tape.concat(x_atoms, agg, Axis::Cols)?;
    let node_pre = tape.matmul(node_in, params.w_node)?;
    let nodes = tape.relu(node_pre);

    let summed = tape.gather_sum(nodes, batch.graph_nodes.clone())?;
    let graphs = match config.readout {
        Readout::Sum => summed,
        Readout::Mean => {
            let inv = batch.graph_nodes.iter().map(|g| 1.0 / g.len() as f64).collect();
            tape.scale_rows(summed, inv)?
        }
    };
    Ok(Encoded { nodes, graphs, edge_states, messages })
}

/// Node embeddings (`|atoms| x hidden`) and graph embedding for one molecule.
pub fn encode(
    g: &FeaturizedGraph,
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<(Tensor, Vec<f64>), EncoderError> {
    params.check(config)?;
    let mut tape = Tape::new();
    let vars = ParamVars::frozen(&mut tape, params);
    let batch = GraphBatch::new(&[g])?;
    let out = forward(&mut tape, vars, &batch, config)?;
    Ok((tape.value(out.nodes).clone(), tape.value(out.graphs).data().to_vec()))
}

/// Graph embeddings for many molecules, one tape per molecule, in parallel
/// when enabled. Output order follows input order.
pub fn embed_all(
    graphs: &[FeaturizedGraph],
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<Vec<Vec<f64>>, EncoderError> {
    par::map_slice(graphs, |g| encode(g, params, config).map(|(_, e)| e))
        .into_iter()
        .collect()
}
