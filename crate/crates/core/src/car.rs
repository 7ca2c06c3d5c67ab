//! Consistency-aware reasoning over action and relation scores.
//!
//! The energy adds Potts-style penalties to the negated scores: a
//! compatibility penalty `lambda_c(y_j, y_k)` for every interacting pair and a
//! transitivity penalty `lambda_t` for every triple of relations with exactly
//! two interactions. Mean-field inference approximates the induced Gibbs
//! distribution and yields refined scores; it is recorded on the tape so that
//! both penalties learn together with the network.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::InteractionGraph;
use crate::numeric::{argmax, softmax, softplus, softplus_inverse, Matrix, ParamId, ParamStore, Tape, Var};
use crate::togn::{ScoreSet, ScoreVars};

/// Relation triples `(z_rs, z_st, z_rt)` that break transitivity.
pub const GAMMA: [[u8; 3]; 3] = [[1, 1, 0], [1, 0, 1], [0, 1, 1]];

pub fn violates_transitivity(z: [u8; 3]) -> bool {
    GAMMA.contains(&z)
}

/// Concrete penalty values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    /// `|Y| x |Y|`, read symmetrically as `(m[a][b] + m[b][a]) / 2`.
    pub compat: Matrix,
    pub trans: f64,
}

impl Penalties {
    pub fn new(compat: Matrix, trans: f64) -> Result<Self> {
        if compat.rows() != compat.cols() || compat.is_empty() {
            return Err(shape_err(
                "Penalties::new",
                format!("compatibility penalty must be square, got {:?}", compat.shape()),
            ));
        }
        if compat.data().iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || !(trans.is_finite() && trans >= 0.0)
        {
            return Err(Error::InvalidArgument("penalties must be finite and nonnegative".into()));
        }
        Ok(Self { compat, trans })
    }

    pub fn uniform(classes: usize, compat: f64, trans: f64) -> Result<Self> {
        Self::new(Matrix::filled(classes, classes, compat), trans)
    }

    pub fn zero(classes: usize) -> Self {
        Self {
            compat: Matrix::zeros(classes, classes),
            trans: 0.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.compat.rows()
    }

    pub fn compat(&self, a: usize, b: usize) -> f64 {
        0.5 * (self.compat.get(a, b) + self.compat.get(b, a))
    }
}

/// Learnable penalty settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarConfig {
    pub iterations: usize,
    pub lambda_c_init: f64,
    pub lambda_t_init: f64,
    /// Pins the compatibility penalty at zero.
    pub freeze_compat: bool,
    /// Pins the transitivity penalty at zero.
    pub freeze_trans: bool,
}

impl Default for CarConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            lambda_c_init: 0.5,
            lambda_t_init: 0.1,
            freeze_compat: false,
            freeze_trans: false,
        }
    }
}

impl CarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("mean-field needs at least one iteration".into()));
        }
        if !(self.lambda_c_init > 0.0 && self.lambda_t_init > 0.0)
            || !(self.lambda_c_init.is_finite() && self.lambda_t_init.is_finite())
        {
            return Err(Error::InvalidArgument(
                "penalty initializations must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Unconstrained tensors whose softplus gives the penalties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarParams {
    pub compat_raw: ParamId,
    pub trans_raw: ParamId,
}

impl CarParams {
    pub fn init(config: &CarConfig, classes: usize, store: &mut ParamStore) -> Self {
        let c = softplus_inverse(config.lambda_c_init);
        let t = softplus_inverse(config.lambda_t_init);
        Self {
            compat_raw: store.add("car.compat_raw", Matrix::filled(classes, classes, c)),
            trans_raw: store.add("car.trans_raw", Matrix::filled(1, 1, t)),
        }
    }

    /// Current penalty values, with frozen penalties reported as zero.
    pub fn penalties(&self, config: &CarConfig, store: &ParamStore) -> Penalties {
        let raw = store.get(self.compat_raw);
        let compat = if config.freeze_compat {
            Matrix::zeros(raw.rows(), raw.cols())
        } else {
            let data = raw.data().iter().map(|&v| softplus(v)).collect();
            Matrix::from_vec(raw.rows(), raw.cols(), data).expect("softplus is finite")
        };
        let trans = if config.freeze_trans {
            0.0
        } else {
            softplus(store.get(self.trans_raw).get(0, 0))
        };
        Penalties { compat, trans }
    }

    /// Records the penalties on the tape from the bound raw tensors.
    pub fn bind(&self, config: &CarConfig, tape: &mut Tape, params: &[Var]) -> Result<PenaltyVars> {
        let raw = params[self.compat_raw.index()];
        let (rows, cols) = tape.shape(raw)?;
        let compat = if config.freeze_compat {
            tape.leaf(&Matrix::zeros(rows, cols))
        } else {
            let sp = tape.softplus(raw)?;
            symmetrize(tape, sp)?
        };
        let trans = if config.freeze_trans {
            tape.scalar(0.0)
        } else {
            tape.softplus(params[self.trans_raw.index()])?
        };
        Ok(PenaltyVars { compat, trans })
    }
}

/// Penalties recorded on a tape: a symmetric matrix and a scalar.
#[derive(Clone, Copy, Debug)]
pub struct PenaltyVars {
    pub compat: Var,
    pub trans: Var,
}

impl PenaltyVars {
    pub fn constant(tape: &mut Tape, penalties: &Penalties) -> Result<Self> {
        let raw = tape.leaf(&penalties.compat);
        Ok(Self {
            compat: symmetrize(tape, raw)?,
            trans: tape.scalar(penalties.trans),
        })
    }
}

fn symmetrize(tape: &mut Tape, m: Var) -> Result<Var> {
    let t = tape.transpose(m)?;
    let s = tape.add(m, t)?;
    tape.scale(s, 0.5)
}

/// Per-variable marginals of the factorized approximation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalSet {
    pub actions: Vec<Vec<f64>>,
    /// Indexed by pair slot.
    pub relations: Vec<Vec<f64>>,
}

impl MarginalSet {
    pub fn relation(&self, graph: &InteractionGraph, k: usize, l: usize) -> Result<&[f64]> {
        Ok(&self.relations[graph.pairs().unordered_slot(k, l)?])
    }
}

/// Action per person and relation bit per pair slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub y: Vec<usize>,
    pub z: Vec<u8>,
}

impl Labeling {
    pub fn participants(&self) -> usize {
        self.y.len()
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let n = self.y.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("labeling covers {n} participants")));
        }
        if self.z.len() != n * (n - 1) / 2 {
            return Err(Error::InvalidArgument(format!(
                "{} relation bits for {n} participants",
                self.z.len()
            )));
        }
        if let Some(bad) = self.y.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("action {bad} outside {classes} classes")));
        }
        if self.z.iter().any(|&z| z > 1) {
            return Err(Error::InvalidArgument("relation bits must be 0 or 1".into()));
        }
        Ok(())
    }
}

pub fn potts_compat(a: usize, b: usize, z: u8, penalties: &Penalties) -> f64 {
    if z == 1 {
        penalties.compat(a, b)
    } else {
        0.0
    }
}

pub fn potts_trans(z_rs: u8, z_st: u8, z_rt: u8, trans: f64) -> f64 {
    if violates_transitivity([z_rs, z_st, z_rt]) {
        trans
    } else {
        0.0
    }
}

fn check_scores(scores: &ScoreSet, graph: &InteractionGraph, classes: usize) -> Result<()> {
    if scores.actions.len() != graph.participants()
        || scores.relations.len() != graph.pairs().pair_count()
    {
        return Err(shape_err(
            "scores",
            format!(
                "{} action and {} relation vectors for {} participants",
                scores.actions.len(),
                scores.relations.len(),
                graph.participants()
            ),
        ));
    }
    if scores.actions.iter().any(|a| a.len() != classes) || scores.relations.iter().any(|r| r.len() != 2) {
        return Err(shape_err("scores", "score vector lengths do not match the class counts"));
    }
    Ok(())
}

/// Energy of a labeling over the factor graph.
pub fn energy(
    labeling: &Labeling,
    scores: &ScoreSet,
    penalties: &Penalties,
    graph: &InteractionGraph,
) -> Result<f64> {
    let n = graph.participants();
    if labeling.participants() != n {
        return Err(Error::InvalidArgument("labeling does not match the graph".into()));
    }
    labeling.validate(penalties.classes())?;
    check_scores(scores, graph, penalties.classes())?;
    let mut e = 0.0;
    for i in graph.action_nodes() {
        e -= scores.actions[i][labeling.y[i]];
    }
    for f in graph.compat_factors() {
        let [j, k, node] = f.nodes;
        let slot = node - n;
        let z = labeling.z[slot];
        e += -scores.relations[slot][z as usize] + potts_compat(labeling.y[j], labeling.y[k], z, penalties);
    }
    for f in graph.trans_factors() {
        let [a, b, c] = f.nodes.map(|node| labeling.z[node - n]);
        e += potts_trans(a, b, c, penalties.trans);
    }
    Ok(e)
}

/// Marginals recorded on a tape.
#[derive(Clone, Debug)]
pub struct MarginalVars {
    pub actions: Vec<Var>,
    pub relations: Vec<Var>,
}

impl MarginalVars {
    pub fn values(&self, tape: &Tape) -> Result<MarginalSet> {
        let read = |vars: &[Var]| -> Result<Vec<Vec<f64>>> {
            vars.iter().map(|&v| Ok(tape.value(v)?.to_vec())).collect()
        };
        Ok(MarginalSet {
            actions: read(&self.actions)?,
            relations: read(&self.relations)?,
        })
    }

    fn leaves(tape: &mut Tape, m: &MarginalSet) -> Self {
        Self {
            actions: m.actions.iter().map(|q| tape.vector(q)).collect(),
            relations: m.relations.iter().map(|q| tape.vector(q)).collect(),
        }
    }
}

/// Expected compatibility penalty of each action of person `i`:
/// `sum_j sum_{y_j} lambda_c(y_i, y_j) Q_j(y_j) Q_ij(1)`.
fn action_expectation(
    tape: &mut Tape,
    q: &MarginalVars,
    pen: &PenaltyVars,
    graph: &InteractionGraph,
    i: usize,
) -> Result<Var> {
    let (classes, _) = tape.shape(pen.compat)?;
    let mut terms = Vec::with_capacity(graph.participants() - 1);
    for j in graph.action_nodes().filter(|&j| j != i) {
        let slot = graph.pairs().unordered_slot(i, j)?;
        let expected = tape.matvec(pen.compat, classes, classes, q.actions[j])?;
        let on = tape.select(q.relations[slot], 1)?;
        terms.push(tape.mul_scalar(expected, on)?);
    }
    tape.sorted_sum(&terms)
}

/// Expected penalty of both states of relation `(k, l)`.
fn relation_expectation(
    tape: &mut Tape,
    q: &MarginalVars,
    pen: &PenaltyVars,
    graph: &InteractionGraph,
    k: usize,
    l: usize,
) -> Result<Var> {
    let pairs = graph.pairs();
    let compat_on = tape.bilinear(pen.compat, q.actions[k], q.actions[l])?;
    let mut broken_if_off = Vec::new();
    let mut broken_if_on = Vec::new();
    for m in graph.action_nodes().filter(|&m| m != k && m != l) {
        let km = q.relations[pairs.unordered_slot(k, m)?];
        let ml = q.relations[pairs.unordered_slot(m, l)?];
        let (km0, km1) = (tape.select(km, 0)?, tape.select(km, 1)?);
        let (ml0, ml1) = (tape.select(ml, 0)?, tape.select(ml, 1)?);
        // z_kl = 0 breaks transitivity iff both others interact
        broken_if_off.push(tape.mul(km1, ml1)?);
        // z_kl = 1 breaks it iff exactly one of the others does
        let a = tape.mul(km1, ml0)?;
        let b = tape.mul(km0, ml1)?;
        broken_if_on.push(tape.add(a, b)?);
    }
    let (off, on) = if broken_if_off.is_empty() {
        (tape.scalar(0.0), compat_on)
    } else {
        let off = tape.sorted_sum(&broken_if_off)?;
        let off = tape.mul(pen.trans, off)?;
        let on = tape.sorted_sum(&broken_if_on)?;
        let on = tape.mul(pen.trans, on)?;
        (off, tape.add(compat_on, on)?)
    };
    tape.concat(&[off, on])
}

/// Refined scores and the marginals of the last round, all on the tape.
#[derive(Clone, Debug)]
pub struct MeanFieldVars {
    pub refined: ScoreVars,
    pub marginals: MarginalVars,
}

/// Synchronous mean-field rounds starting from `softmax` of the scores.
/// `trace`, when given, receives the marginals before the first round and
/// after every round.
pub fn mean_field_on_tape(
    tape: &mut Tape,
    scores: &ScoreVars,
    pen: &PenaltyVars,
    graph: &InteractionGraph,
    iterations: usize,
    mut trace: Option<&mut Vec<MarginalSet>>,
) -> Result<MeanFieldVars> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("mean-field needs at least one iteration".into()));
    }
    if scores.actions.len() != graph.participants()
        || scores.relations.len() != graph.pairs().pair_count()
    {
        return Err(shape_err("mean_field", "score count does not match the graph"));
    }
    let mut q = MarginalVars {
        actions: scores.actions.iter().map(|&s| tape.softmax(s)).collect::<Result<_>>()?,
        relations: scores.relations.iter().map(|&s| tape.softmax(s)).collect::<Result<_>>()?,
    };
    if let Some(t) = trace.as_deref_mut() {
        t.push(q.values(tape)?);
    }
    let mut refined = scores.clone();
    for _ in 0..iterations {
        let mut next = MarginalVars {
            actions: Vec::with_capacity(q.actions.len()),
            relations: Vec::with_capacity(q.relations.len()),
        };
        for i in graph.action_nodes() {
            let penalty = action_expectation(tape, &q, pen, graph, i)?;
            let r = tape.sub(scores.actions[i], penalty)?;
            refined.actions[i] = r;
            next.actions.push(tape.softmax(r)?);
        }
        for (slot, (k, l)) in graph.pairs().pairs().enumerate() {
            let penalty = relation_expectation(tape, &q, pen, graph, k, l)?;
            let r = tape.sub(scores.relations[slot], penalty)?;
            refined.relations[slot] = r;
            next.relations.push(tape.softmax(r)?);
        }
        q = next;
        if let Some(t) = trace.as_deref_mut() {
            t.push(q.values(tape)?);
        }
    }
    Ok(MeanFieldVars {
        refined,
        marginals: q,
    })
}

fn score_leaves(tape: &mut Tape, scores: &ScoreSet) -> ScoreVars {
    ScoreVars {
        actions: scores.actions.iter().map(|s| tape.vector(s)).collect(),
        relations: scores.relations.iter().map(|s| tape.vector(s)).collect(),
    }
}

fn check_marginals(m: &MarginalSet, graph: &InteractionGraph, classes: usize) -> Result<()> {
    let as_scores = ScoreSet {
        actions: m.actions.clone(),
        relations: m.relations.clone(),
    };
    check_scores(&as_scores, graph, classes)
}

/// One synchronous update of `Q_i` from the previous marginals.
pub fn mf_action_update(
    marginals: &MarginalSet,
    scores: &ScoreSet,
    penalties: &Penalties,
    graph: &InteractionGraph,
    i: usize,
) -> Result<Vec<f64>> {
    check_scores(scores, graph, penalties.classes())?;
    check_marginals(marginals, graph, penalties.classes())?;
    if i >= graph.participants() {
        return Err(Error::InvalidArgument(format!("person {i} out of range")));
    }
    let mut tape = Tape::new();
    let q = MarginalVars::leaves(&mut tape, marginals);
    let pen = PenaltyVars::constant(&mut tape, penalties)?;
    let penalty = action_expectation(&mut tape, &q, &pen, graph, i)?;
    let theta = tape.value(penalty)?;
    let shifted: Vec<f64> = scores.actions[i].iter().zip(theta).map(|(s, p)| s - p).collect();
    softmax(&shifted)
}

/// One synchronous update of `Q_kl` from the previous marginals.
pub fn mf_relation_update(
    marginals: &MarginalSet,
    scores: &ScoreSet,
    penalties: &Penalties,
    graph: &InteractionGraph,
    k: usize,
    l: usize,
) -> Result<Vec<f64>> {
    check_scores(scores, graph, penalties.classes())?;
    check_marginals(marginals, graph, penalties.classes())?;
    let slot = graph.pairs().slot(k, l)?;
    let mut tape = Tape::new();
    let q = MarginalVars::leaves(&mut tape, marginals);
    let pen = PenaltyVars::constant(&mut tape, penalties)?;
    let penalty = relation_expectation(&mut tape, &q, &pen, graph, k, l)?;
    let theta = tape.value(penalty)?;
    let shifted: Vec<f64> = scores.relations[slot].iter().zip(theta).map(|(s, p)| s - p).collect();
    softmax(&shifted)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanFieldOutput {
    pub refined: ScoreSet,
    pub marginals: MarginalSet,
    /// Marginals at initialization and after each round.
    pub trace: Vec<MarginalSet>,
}

/// Mean-field inference on plain values.
pub fn mean_field(
    scores: &ScoreSet,
    penalties: &Penalties,
    graph: &InteractionGraph,
    iterations: usize,
) -> Result<MeanFieldOutput> {
    check_scores(scores, graph, penalties.classes())?;
    let mut tape = Tape::new();
    let s = score_leaves(&mut tape, scores);
    let pen = PenaltyVars::constant(&mut tape, penalties)?;
    let mut trace = Vec::with_capacity(iterations + 1);
    let out = mean_field_on_tape(&mut tape, &s, &pen, graph, iterations, Some(&mut trace))?;
    Ok(MeanFieldOutput {
        refined: out.refined.values(&tape)?,
        marginals: out.marginals.values(&tape)?,
        trace,
    })
}

/// Per-variable argmax, lowest class on ties.
pub fn decode(scores: &ScoreSet) -> Labeling {
    Labeling {
        y: scores.actions.iter().map(|s| argmax(s)).collect(),
        z: scores.relations.iter().map(|s| argmax(s) as u8).collect(),
    }
}
