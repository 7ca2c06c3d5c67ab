//! Network plus reasoning layer, with checkpointing.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::car::{decode, mean_field_on_tape, CarConfig, CarParams, Labeling, MarginalSet, MeanFieldVars, Penalties};
use crate::error::{Error, Result};
use crate::graph::InteractionGraph;
use crate::numeric::{DropoutStream, Matrix, ParamStore, Tape, Var};
use crate::togn::{bind_params, Forward, ModelConfig, ScoreSet, ScoreVars, TognParams};

/// All learnable values and the settings that shape them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub car_config: CarConfig,
    pub store: ParamStore,
    pub net: TognParams,
    pub car: CarParams,
}

/// Everything a forward pass leaves on the tape.
pub struct Recorded {
    pub params: Vec<Var>,
    pub scores: ScoreVars,
    pub reasoning: MeanFieldVars,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Inference {
    pub scores: ScoreSet,
    pub refined: ScoreSet,
    pub marginals: MarginalSet,
    pub labeling: Labeling,
    /// Marginals per mean-field round, filled when requested.
    pub trace: Vec<MarginalSet>,
}

impl Model {
    pub fn new(config: ModelConfig, car_config: CarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        car_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = TognParams::init(&config, &mut store, &mut rng);
        let car = CarParams::init(&car_config, config.num_actions, &mut store);
        Ok(Self {
            config,
            car_config,
            store,
            net,
            car,
        })
    }

    pub fn penalties(&self) -> Penalties {
        self.car.penalties(&self.car_config, &self.store)
    }

    /// Records network and reasoning on `tape`. Dropout is active only when a
    /// stream is supplied.
    pub fn record(
        &self,
        tape: &mut Tape,
        graph: &InteractionGraph,
        features: &[Vec<f64>],
        dropout: Option<&mut DropoutStream>,
        trace: Option<&mut Vec<MarginalSet>>,
    ) -> Result<Recorded> {
        let params = bind_params(tape, &self.store);
        let scores = {
            let mut fwd = Forward {
                tape,
                params: &params,
                config: &self.config,
                dropout,
            };
            fwd.scores(&self.net, graph, features)?
        };
        let pen = self.car.bind(&self.car_config, tape, &params)?;
        let reasoning = mean_field_on_tape(
            tape,
            &scores,
            &pen,
            graph,
            self.car_config.iterations,
            trace,
        )?;
        Ok(Recorded {
            params,
            scores,
            reasoning,
        })
    }

    /// Network scores alone, in evaluation mode.
    pub fn togn_forward(&self, features: &[Vec<f64>]) -> Result<ScoreSet> {
        let graph = InteractionGraph::build(features.len())?;
        let params;
        let mut tape = Tape::new();
        params = bind_params(&mut tape, &self.store);
        let mut fwd = Forward {
            tape: &mut tape,
            params: &params,
            config: &self.config,
            dropout: None,
        };
        let scores = fwd.scores(&self.net, &graph, features)?;
        scores.values(&tape)
    }

    pub fn infer(&self, features: &[Vec<f64>], with_trace: bool) -> Result<Inference> {
        let graph = InteractionGraph::build(features.len())?;
        let mut tape = Tape::new();
        let mut trace = Vec::new();
        let rec = self.record(
            &mut tape,
            &graph,
            features,
            None,
            with_trace.then_some(&mut trace),
        )?;
        let refined = rec.reasoning.refined.values(&tape)?;
        Ok(Inference {
            scores: rec.scores.values(&tape)?,
            labeling: decode(&refined),
            refined,
            marginals: rec.reasoning.marginals.values(&tape)?,
            trace,
        })
    }

    /// Argmax of the refined scores, lowest index on ties.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Labeling> {
        Ok(self.infer(features, false)?.labeling)
    }
}

const CHECKPOINT_FORMAT: &str = "hiu-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    model: ModelConfig,
    car: CarConfig,
    /// Decoded penalties, informational only.
    penalties: Penalties,
    tensors: Vec<TensorEntry>,
}

impl Model {
    pub fn to_checkpoint(&self) -> Result<String> {
        let tensors = self
            .store
            .names()
            .iter()
            .zip(self.store.tensors())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().to_vec(),
            })
            .collect();
        Ok(serde_json::to_string(&CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.config.clone(),
            car: self.car_config.clone(),
            penalties: self.penalties(),
            tensors,
        })?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let header: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("checkpoint is not valid JSON: {e}")))?;
        if header.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        match header.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => {
                return Err(Error::Format(format!(
                    "checkpoint version {other:?}, expected {CHECKPOINT_VERSION}"
                )))
            }
        }
        let file: CheckpointFile = serde_json::from_value(header)
            .map_err(|e| Error::Format(format!("corrupt checkpoint: {e}")))?;
        let mut model = Model::new(file.model, file.car, 0)?;
        let mut stored = ParamStore::new();
        for t in file.tensors {
            let m = Matrix::from_vec(t.rows, t.cols, t.data)
                .map_err(|e| Error::Format(format!("tensor {}: {e}", t.name)))?;
            stored.add(t.name, m);
        }
        if stored.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model needs {}",
                stored.len(),
                model.store.len()
            )));
        }
        model
            .store
            .load_from(&stored)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_checkpoint()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}
