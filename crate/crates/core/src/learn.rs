//! Joint training of the network and the penalties, evaluation loops and
//! the four-way ablation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::car::{CarConfig, Labeling};
use crate::data::{derive_seed, SceneConfig, SceneSample};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::graph::InteractionGraph;
use crate::model::Model;
use crate::numeric::{AdamConfig, DropoutStream, Matrix, OptimizerState, Tape, Var};
use crate::oracle::CompatTable;
use crate::togn::{ModelConfig, ScoreVars};

const SHUFFLE_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Layers, widths and dropout live here.
    pub model: ModelConfig,
    /// Mean-field rounds and penalty initialization live here.
    pub car: CarConfig,
    pub data: SceneConfig,
    pub train_scenes: usize,
    /// Defaults to a tenth of the training count when absent.
    pub val_scenes: Option<usize>,
    /// Save a checkpoint every this many epochs; 0 keeps only the first and last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: AdamConfig::default().lr,
            seed: 0,
            model: ModelConfig::default(),
            car: CarConfig::default(),
            data: SceneConfig::default(),
            train_scenes: 5000,
            val_scenes: None,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_scenes == 0 || self.val_count() == 0 {
            return Err(Error::InvalidArgument(
                "batch size and scene counts must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.model.num_actions != self.data.num_actions() {
            return Err(Error::InvalidArgument(format!(
                "model predicts {} actions, data has {}",
                self.model.num_actions,
                self.data.num_actions()
            )));
        }
        if self.model.feature_dim != self.data.feature_dim {
            return Err(Error::InvalidArgument(format!(
                "model expects {}-dim features, data has {}",
                self.model.feature_dim, self.data.feature_dim
            )));
        }
        self.model.validate()?;
        self.car.validate()?;
        self.data.validate()
    }

    pub fn val_count(&self) -> usize {
        self.val_scenes.unwrap_or(self.train_scenes.div_ceil(10))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Mean cross-entropy over action variables plus mean over relation
/// variables, each against `softmax` of the refined scores.
pub fn loss_on_tape(tape: &mut Tape, refined: &ScoreVars, truth: &Labeling) -> Result<Var> {
    if refined.actions.len() != truth.y.len() || refined.relations.len() != truth.z.len() {
        return Err(Error::InvalidArgument(
            "labels do not match the scored graph".into(),
        ));
    }
    let mut term = |scores: &[Var], labels: &mut dyn Iterator<Item = usize>| -> Result<Var> {
        let mut parts = Vec::with_capacity(scores.len());
        for (&s, label) in scores.iter().zip(labels) {
            let p = tape.softmax(s)?;
            parts.push(tape.cross_entropy(p, label)?);
        }
        tape.mean(&parts)
    };
    let y = term(&refined.actions, &mut truth.y.iter().copied())?;
    let z = term(&refined.relations, &mut truth.z.iter().map(|&b| b as usize))?;
    tape.add(y, z)
}

fn record_loss(
    model: &Model,
    tape: &mut Tape,
    sample: &SceneSample,
    dropout: Option<&mut DropoutStream>,
) -> Result<(Var, Vec<Var>)> {
    let truth = sample.truth();
    truth.validate(model.config.num_actions)?;
    let graph = InteractionGraph::build(sample.participants())?;
    let rec = model.record(tape, &graph, &sample.features, dropout, None)?;
    let loss = loss_on_tape(tape, &rec.reasoning.refined, &truth)?;
    Ok((loss, rec.params))
}

/// Evaluation-mode loss of one scene.
pub fn loss(model: &Model, sample: &SceneSample) -> Result<f64> {
    let mut tape = Tape::new();
    let (l, _) = record_loss(model, &mut tape, sample, None)?;
    Ok(tape.value(l)?[0])
}

/// Loss and its gradient with respect to every stored tensor, in store order.
pub fn loss_and_grad(
    model: &Model,
    sample: &SceneSample,
    dropout: Option<&mut DropoutStream>,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let (l, params) = record_loss(model, &mut tape, sample, dropout)?;
    let value = tape.value(l)?[0];
    let grads = tape.backward(l)?;
    let grads = params.iter().map(|&p| grads.wrt(p)).collect::<Result<_>>()?;
    Ok((value, grads))
}

/// Where training stopped on a non-finite loss, with the parameters at
/// that point.
#[derive(Clone, Debug)]
pub struct Divergence {
    pub epoch: usize,
    pub step: u64,
    pub sample: usize,
    pub loss: f64,
    pub snapshot: Model,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "loss {} at epoch {}, step {}, scene {}",
            self.loss, self.epoch, self.step, self.sample
        )
    }
}

/// Mean loss and metrics over a scene set, in evaluation mode.
pub fn evaluate(
    model: &Model,
    scenes: &[SceneSample],
    table: &CompatTable,
) -> Result<(f64, MetricReport)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(scenes.len());
    let mut truths = Vec::with_capacity(scenes.len());
    for s in scenes {
        let graph = InteractionGraph::build(s.participants())?;
        let mut tape = Tape::new();
        let rec = model.record(&mut tape, &graph, &s.features, None, None)?;
        let truth = s.truth();
        let l = loss_on_tape(&mut tape, &rec.reasoning.refined, &truth)?;
        total += tape.value(l)?[0];
        preds.push(crate::car::decode(&rec.reasoning.refined.values(&tape)?));
        truths.push(truth);
    }
    let report = MetricReport::compute(&preds, &truths, table)?;
    Ok((total / scenes.len() as f64, report))
}

/// One line of training history. Epoch 0 describes the initial model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val: MetricReport,
    pub lambda_t: f64,
    pub lambda_c_mean: f64,
}

/// Receives history lines and checkpoints as training proceeds.
pub trait TrainObserver {
    fn epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _epoch: usize, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

fn epoch_record(
    model: &Model,
    epoch: usize,
    train_loss: Option<f64>,
    val: &[SceneSample],
    table: &CompatTable,
) -> Result<EpochRecord> {
    let (val_loss, report) = evaluate(model, val, table)?;
    let pen = model.penalties();
    let c = pen.compat.data();
    Ok(EpochRecord {
        epoch,
        train_loss,
        val_loss,
        val: report,
        lambda_t: pen.trans,
        lambda_c_mean: c.iter().sum::<f64>() / c.len() as f64,
    })
}

/// Minibatch Adam on the summed-then-averaged batch gradient. Scenes are
/// reshuffled each epoch and every forward pass draws dropout from a stream
/// keyed by `(seed, epoch, scene)`, so a run is fully determined by its seed.
pub fn train(
    config: &TrainConfig,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let table = config.data.compat_table()?;
    let mut model = Model::new(config.model.clone(), config.car.clone(), config.seed)?;
    let mut opt = OptimizerState::new(config.adam(), model.store.tensors());
    let mut history = vec![epoch_record(&model, 0, None, val_set, &table)?];
    observer.epoch(&history[0])?;
    observer.checkpoint(0, &model)?;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut sum: Option<Vec<Matrix>> = None;
            for &k in batch {
                let mut stream = DropoutStream::new(config.seed, &[epoch as u64, k as u64]);
                let (l, grads) = match loss_and_grad(&model, &train_set[k], Some(&mut stream)) {
                    Ok(r) => r,
                    // a blown-up pass can fail before the loss is even formed
                    Err(Error::NonFinite(_)) => (f64::NAN, Vec::new()),
                    Err(e) => return Err(e),
                };
                if !l.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged(Box::new(Divergence {
                        epoch,
                        step: opt.steps(),
                        sample: k,
                        loss: l,
                        snapshot: model,
                    })));
                }
                epoch_loss += l;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("chunks are non-empty");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            opt.step(model.store.tensors_mut(), &grads)?;
        }
        let record = epoch_record(
            &model,
            epoch,
            Some(epoch_loss / train_set.len() as f64),
            val_set,
            &table,
        )?;
        observer.epoch(&record)?;
        history.push(record);
        let cadence = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
        if cadence || epoch == config.epochs {
            observer.checkpoint(epoch, &model)?;
        }
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Togn,
    CarC,
    CarT,
    CarCT,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Togn, Variant::CarC, Variant::CarT, Variant::CarCT];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Togn => "TOGN",
            Variant::CarC => "TOGN+CAR^C",
            Variant::CarT => "TOGN+CAR^T",
            Variant::CarCT => "TOGN+CAR^CT",
        }
    }

    /// `(freeze compat, freeze trans)`.
    pub fn frozen(self) -> (bool, bool) {
        match self {
            Variant::Togn => (true, true),
            Variant::CarC => (false, true),
            Variant::CarT => (true, false),
            Variant::CarCT => (false, false),
        }
    }

    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        (c.car.freeze_compat, c.car.freeze_trans) = self.frozen();
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub name: String,
    pub val_loss: f64,
    pub report: MetricReport,
}

/// Trains the four variants on the same scenes and seed and scores each
/// final model on the validation scenes.
pub fn ablate(
    config: &TrainConfig,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
) -> Result<Vec<AblationRow>> {
    let table = config.data.compat_table()?;
    Variant::ALL
        .iter()
        .map(|&v| {
            let out = train(&v.apply(config), train_set, val_set, &mut ())?;
            let (val_loss, report) = evaluate(&out.model, val_set, &table)?;
            Ok(AblationRow {
                variant: v,
                name: v.name().into(),
                val_loss,
                report,
            })
        })
        .collect()
}

/// Plain-text comparison table, one row per variant.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<13} {:>8} {:>9} {:>9} {:>12}\n",
        "model", "F1", "accuracy", "mean IoU", "consistency"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<13} {:>8.4} {:>9.4} {:>9.4} {:>12.4}\n",
            r.name, r.report.f1, r.report.accuracy, r.report.mean_iou, r.report.consistency_rate
        ));
    }
    out
}
