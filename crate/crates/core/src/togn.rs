//! Third-order graph network: initial node, factor and edge features,
//! stacked factor-graph layers with edge-conditioned weights and max-pooling,
//! and the action and relation classification heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::InteractionGraph;
use crate::numeric::{DropoutStream, Matrix, ParamId, ParamStore, Tape, Var};

/// Network dimensions and regularization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Length of each participant's base feature vector.
    pub feature_dim: usize,
    pub num_actions: usize,
    /// Node and factor feature width, shared by all layers.
    pub hidden: usize,
    /// Edge feature width.
    pub edge_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            num_actions: 9,
            hidden: 64,
            edge_dim: 16,
            layers: 10,
            dropout: 0.3,
            layer_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_actions < 2 || self.hidden == 0 || self.edge_dim == 0
        {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive with at least 2 actions: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// A fully connected layer. Regularized layers are followed by dropout and,
/// when configured, layer normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<(ParamId, ParamId)>,
    pub regularized: bool,
}

/// Two fully connected layers with a ReLU in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub first: Dense,
    pub second: Dense,
}

/// Parameters of one factor-graph layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Message network for variable-to-factor updates.
    pub message_vf: Mlp,
    /// Edge-to-weight network for variable-to-factor updates.
    pub weight_vf: Mlp,
    pub message_fv: Mlp,
    pub weight_fv: Mlp,
}

/// Where each network tensor lives in the [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TognParams {
    pub action_input: Dense,
    pub relation_input: Dense,
    pub edge_input: Dense,
    pub layers: Vec<LayerParams>,
    pub action_head: Dense,
    pub relation_head: Dense,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    layer_norm: bool,
}

impl Init<'_> {
    fn glorot(&mut self, rows: usize, cols: usize) -> Matrix {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
        Matrix::from_vec(rows, cols, data).expect("finite init")
    }

    fn dense(&mut self, name: &str, rows: usize, cols: usize, regularized: bool) -> Dense {
        let w = self.glorot(rows, cols);
        let weight = self.store.add(format!("{name}.weight"), w);
        let bias = self.store.add(format!("{name}.bias"), Matrix::zeros(rows, 1));
        let norm = (regularized && self.layer_norm).then(|| {
            (
                self.store.add(format!("{name}.ln_gain"), Matrix::filled(rows, 1, 1.0)),
                self.store.add(format!("{name}.ln_bias"), Matrix::zeros(rows, 1)),
            )
        });
        Dense {
            weight,
            bias,
            norm,
            regularized,
        }
    }

    fn mlp(&mut self, name: &str, out: usize, hidden: usize, input: usize) -> Mlp {
        Mlp {
            first: self.dense(&format!("{name}.0"), hidden, input, true),
            second: self.dense(&format!("{name}.1"), out, hidden, true),
        }
    }

    /// Edge-to-weight network whose initial output acts like a unit-gain
    /// `d x d` operator.
    fn weight_mlp(&mut self, name: &str, d: usize, edge_dim: usize) -> Mlp {
        let mlp = self.mlp(name, d * d, edge_dim, edge_dim);
        let scale = 1.0 / (d as f64).sqrt();
        match mlp.second.norm {
            Some((gain, _)) => {
                self.store.get_mut(gain).data_mut().fill(scale);
            }
            None => {
                let bias = self.store.get_mut(mlp.second.bias);
                for k in 0..d {
                    bias.data_mut()[k * d + k] = 1.0;
                }
            }
        }
        mlp
    }
}

impl TognParams {
    /// Registers freshly initialized network tensors in `store`.
    pub fn init(config: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let ModelConfig {
            feature_dim: f,
            num_actions,
            hidden: d,
            edge_dim: h,
            layers,
            ..
        } = *config;
        let mut init = Init {
            store,
            rng,
            layer_norm: config.layer_norm,
        };
        let action_input = init.dense("fc_y", d, f, true);
        let relation_input = init.dense("fc_z", d, 2 * f, true);
        let edge_input = init.dense("fc_e", h, 2 * d, true);
        let layers = (0..layers)
            .map(|l| LayerParams {
                message_vf: init.mlp(&format!("layer{l}.m_vf"), d, d, 2 * d),
                weight_vf: init.weight_mlp(&format!("layer{l}.q_vf"), d, h),
                message_fv: init.mlp(&format!("layer{l}.m_fv"), d, d, 2 * d),
                weight_fv: init.weight_mlp(&format!("layer{l}.q_fv"), d, h),
            })
            .collect();
        let action_head = init.dense("alpha", num_actions, d, false);
        let relation_head = init.dense("beta", 2, d, false);
        Self {
            action_input,
            relation_input,
            edge_input,
            layers,
            action_head,
            relation_head,
        }
    }
}

/// Per-person action distributions and per-pair relation distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub actions: Vec<Vec<f64>>,
    /// Indexed by pair slot, each over `{0, 1}`.
    pub relations: Vec<Vec<f64>>,
}

/// Score vectors recorded on a tape.
#[derive(Clone, Debug)]
pub struct ScoreVars {
    pub actions: Vec<Var>,
    pub relations: Vec<Var>,
}

impl ScoreVars {
    pub fn values(&self, tape: &Tape) -> Result<ScoreSet> {
        let read = |vars: &[Var]| -> Result<Vec<Vec<f64>>> {
            vars.iter().map(|&v| Ok(tape.value(v)?.to_vec())).collect()
        };
        Ok(ScoreSet {
            actions: read(&self.actions)?,
            relations: read(&self.relations)?,
        })
    }
}

/// Node, factor and edge features of one layer.
#[derive(Clone, Debug)]
pub struct FeatureState {
    pub nodes: Vec<Var>,
    pub factors: Vec<Var>,
    pub edges: Vec<Var>,
}

/// One forward pass in progress: the tape, the bound parameter leaves and
/// the optional dropout stream (absent in evaluation mode).
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a [Var],
    pub config: &'a ModelConfig,
    pub dropout: Option<&'a mut DropoutStream>,
}

/// Records every tensor of `store` as a leaf, indexed by [`ParamId`].
pub fn bind_params(tape: &mut Tape, store: &ParamStore) -> Vec<Var> {
    store.tensors().iter().map(|t| tape.leaf(t)).collect()
}

impl Forward<'_> {
    fn p(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    pub fn dense(&mut self, layer: &Dense, x: Var) -> Result<Var> {
        let y = self
            .tape
            .affine(self.p(layer.weight), x, self.p(layer.bias))?;
        if !layer.regularized {
            return Ok(y);
        }
        let y = self
            .tape
            .dropout(y, self.config.dropout, self.dropout.as_deref_mut())?;
        match layer.norm {
            Some((gain, bias)) => {
                let (g, b) = (self.p(gain), self.p(bias));
                self.tape.layer_norm(y, g, b)
            }
            None => Ok(y),
        }
    }

    pub fn mlp(&mut self, mlp: &Mlp, x: Var) -> Result<Var> {
        let h = self.dense(&mlp.first, x)?;
        let h = self.tape.relu(h)?;
        self.dense(&mlp.second, h)
    }

    /// Action nodes project their own base feature; relation node `g(u, v)`
    /// projects the concatenation of both participants' features.
    ///
    /// The two features are concatenated in lexicographic order of their
    /// values, so the result does not depend on how participants are numbered.
    pub fn init_node_features(
        &mut self,
        net: &TognParams,
        graph: &InteractionGraph,
        features: &[Vec<f64>],
    ) -> Result<Vec<Var>> {
        check_features(self.config, graph, features)?;
        let mut nodes = Vec::with_capacity(graph.node_count());
        let base: Vec<Var> = features.iter().map(|f| self.tape.vector(f)).collect();
        for &phi in &base {
            nodes.push(self.dense(&net.action_input, phi)?);
        }
        for (u, v) in graph.pairs().pairs() {
            let (a, b) = if lex_le(&features[u], &features[v]) {
                (base[u], base[v])
            } else {
                (base[v], base[u])
            };
            let joint = self.tape.concat(&[a, b])?;
            nodes.push(self.dense(&net.relation_input, joint)?);
        }
        Ok(nodes)
    }

    /// Each factor starts as the mean of its three node features.
    pub fn init_factor_features(
        &mut self,
        graph: &InteractionGraph,
        nodes: &[Var],
    ) -> Result<Vec<Var>> {
        graph
            .factors()
            .iter()
            .map(|f| {
                let members = f.nodes.map(|k| nodes[k]);
                self.tape.mean(&members)
            })
            .collect()
    }

    /// `ReLU(FC_e([node, factor]))` for every edge; computed once per pass.
    pub fn init_edge_features(
        &mut self,
        net: &TognParams,
        graph: &InteractionGraph,
        nodes: &[Var],
        factors: &[Var],
    ) -> Result<Vec<Var>> {
        graph
            .edges()
            .iter()
            .map(|e| {
                let joint = self.tape.concat(&[nodes[e.node], factors[e.factor]])?;
                let t = self.dense(&net.edge_input, joint)?;
                self.tape.relu(t)
            })
            .collect()
    }

    fn edge_message(
        &mut self,
        weight: &Mlp,
        message: &Mlp,
        edge: Var,
        factor: Var,
        node: Var,
    ) -> Result<Var> {
        let d = self.config.hidden;
        let q = self.mlp(weight, edge)?;
        let joint = self.tape.concat(&[factor, node])?;
        let m = self.mlp(message, joint)?;
        self.tape.matvec(q, d, d, m)
    }

    /// One factor-graph layer. Factor and node updates both read the input
    /// state; each pools its candidate messages with an entrywise max.
    pub fn layer_forward(
        &mut self,
        graph: &InteractionGraph,
        layer: &LayerParams,
        state: &FeatureState,
    ) -> Result<FeatureState> {
        let mut to_factor = Vec::with_capacity(graph.edges().len());
        let mut to_node = Vec::with_capacity(graph.edges().len());
        for (k, e) in graph.edges().iter().enumerate() {
            let (t, g, f) = (state.edges[k], state.factors[e.factor], state.nodes[e.node]);
            to_factor.push(self.edge_message(&layer.weight_vf, &layer.message_vf, t, g, f)?);
            to_node.push(self.edge_message(&layer.weight_fv, &layer.message_fv, t, g, f)?);
        }
        let factors = (0..graph.factors().len())
            .map(|c| {
                let cands = graph.factor_edges(c).map(|k| to_factor[k]);
                self.tape.max_pool(&cands)
            })
            .collect::<Result<Vec<_>>>()?;
        let nodes = (0..graph.node_count())
            .map(|i| {
                let incident = graph.node_edges(i);
                if incident.is_empty() {
                    return Err(Error::InvalidArgument(format!("node {i} has no factors")));
                }
                let cands: Vec<Var> = incident.iter().map(|&k| to_node[k]).collect();
                self.tape.max_pool(&cands)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureState {
            nodes,
            factors,
            edges: state.edges.clone(),
        })
    }

    pub fn heads(
        &mut self,
        net: &TognParams,
        graph: &InteractionGraph,
        nodes: &[Var],
    ) -> Result<ScoreVars> {
        let mut actions = Vec::with_capacity(graph.participants());
        for i in graph.action_nodes() {
            let s = self.dense(&net.action_head, nodes[i])?;
            actions.push(self.tape.softmax(s)?);
        }
        let mut relations = Vec::with_capacity(graph.pairs().pair_count());
        for j in graph.relation_nodes() {
            let s = self.dense(&net.relation_head, nodes[j])?;
            relations.push(self.tape.softmax(s)?);
        }
        Ok(ScoreVars { actions, relations })
    }

    /// Full network: initial features, every layer, then both heads.
    pub fn scores(
        &mut self,
        net: &TognParams,
        graph: &InteractionGraph,
        features: &[Vec<f64>],
    ) -> Result<ScoreVars> {
        let nodes = self.init_node_features(net, graph, features)?;
        let factors = self.init_factor_features(graph, &nodes)?;
        let edges = self.init_edge_features(net, graph, &nodes, &factors)?;
        let mut state = FeatureState {
            nodes,
            factors,
            edges,
        };
        for layer in &net.layers {
            state = self.layer_forward(graph, layer, &state)?;
        }
        self.heads(net, graph, &state.nodes)
    }
}

fn check_features(
    config: &ModelConfig,
    graph: &InteractionGraph,
    features: &[Vec<f64>],
) -> Result<()> {
    if features.len() != graph.participants() {
        return Err(Error::InvalidArgument(format!(
            "{} feature vectors for {} participants",
            features.len(),
            graph.participants()
        )));
    }
    for (i, f) in features.iter().enumerate() {
        if f.len() != config.feature_dim {
            return Err(shape_err(
                "init_node_features",
                format!("participant {i} has {} features, expected {}", f.len(), config.feature_dim),
            ));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("base feature of participant {i}")));
        }
    }
    Ok(())
}

fn lex_le(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}
