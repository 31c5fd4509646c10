//! Supervised training of the planner on gold plans.
//!
//! Examples are visited in an order shuffled per epoch from `(seed, epoch)`;
//! each example's loss is differentiated on its own graph and gradients are
//! averaged over the batch before an AdamW step. Dropout masks come from a
//! counter-indexed stream, so a run is a pure function of its inputs and
//! configuration. The parameters with the best validation KS-F1 (greedy
//! decoding) are kept.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, RngState};
pub use loss::{loss_total, LossParts, LossWeights, MatchingMode};
pub use optim::AdamW;

use crate::embed::Vocab;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, score_plan, Averaging, PlanScore};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Graph, ParamGrads};
use crate::planner::{decode, DecodeOptions, Decoded};
use crate::schema::Example;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Beam width used when decoding with a trained model.
    pub beam: usize,
    pub no_repeat: bool,
    pub max_len: usize,
    pub loss_weights: LossWeights,
    pub matching_mode: MatchingMode,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-3,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            beam: 5,
            no_repeat: true,
            max_len: 50,
            loss_weights: LossWeights::default(),
            matching_mode: MatchingMode::default(),
            weight_decay: 0.01,
            clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.beam == 0 || self.max_len == 0 {
            return bad("beam and max_len must be at least 1");
        }
        if self.max_len >= self.model.max_steps {
            return bad("max_len must be below max_steps");
        }
        let w = self.loss_weights;
        if ![w.k, w.e, w.m].iter().all(|x| x.is_finite() && *x >= 0.0) {
            return bad("loss weights must be finite and non-negative");
        }
        Ok(())
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            max_len: self.max_len,
            no_repeat: self.no_repeat,
            beam: self.beam,
        }
    }
}

/// Contiguous 80/10/10 split.
pub fn split(examples: &[Example]) -> (&[Example], &[Example], &[Example]) {
    let n = examples.len();
    let a = n * 8 / 10;
    let b = a + n / 10;
    (&examples[..a], &examples[a..b], &examples[b..])
}

/// One line of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Batch {
        epoch: usize,
        batch: usize,
        loss: f64,
        l_k: f64,
        l_e: f64,
        l_m: f64,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        loss: f64,
        l_k: f64,
        l_e: f64,
        l_m: f64,
        val_ks_f1: f64,
        val_cs_f1: f64,
        val_co: f64,
        best: bool,
    },
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: Checkpoint,
    pub last: Model,
    pub trace: Vec<TraceRecord>,
}

/// Decodes every example and scores it against its gold plan.
pub fn evaluate(
    model: &Model,
    examples: &[Example],
    opts: &DecodeOptions,
    averaging: Averaging,
) -> Result<(PlanScore, Vec<Decoded>)> {
    let mut scores = Vec::with_capacity(examples.len());
    let mut decoded = Vec::with_capacity(examples.len());
    for ex in examples {
        let gold = ex
            .gold_plan
            .as_ref()
            .ok_or_else(|| Error::TrainingSetup(format!("example {} has no gold plan", ex.id)))?;
        let d = decode(model, &ex.input, opts)?;
        scores.push(score_plan(&d.plan, gold, &ex.input));
        decoded.push(d);
    }
    Ok((aggregate(&scores, averaging), decoded))
}

fn check_examples(examples: &[Example]) -> Result<()> {
    for ex in examples {
        let gold = ex
            .gold_plan
            .as_ref()
            .ok_or_else(|| Error::TrainingSetup(format!("example {} has no gold plan", ex.id)))?;
        gold.validate(&ex.input, true)
            .map_err(|m| Error::Validation { id: ex.id.clone(), message: m })?;
    }
    Ok(())
}

fn seed_stream(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Trains from scratch; `on_record` sees each trace record as it is made.
pub fn train(
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
    mut on_record: impl FnMut(&TraceRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::TrainingSetup("empty training set".into()));
    }
    check_examples(train_set)?;
    check_examples(val_set)?;
    let vocab = Vocab::build(train_set, &config.model.embed);
    let mut model = Model::new(config.model.clone(), vocab, config.seed)?;
    let mut opt = AdamW::new(config.lr, config.weight_decay, config.clip);
    let greedy = DecodeOptions { beam: 1, ..config.decode_options() };
    let mut trace = Vec::new();
    let mut emit = |r: TraceRecord, trace: &mut Vec<TraceRecord>| {
        on_record(&r);
        trace.push(r);
    };

    let mut stream = 0u64;
    let mut best: Option<Checkpoint> = None;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut sums = LossParts::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grads = ParamGrads::new();
            let mut parts = LossParts::default();
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let ex = &train_set[i];
                let gold = ex.gold_plan.as_ref().expect("checked");
                let mut g = Graph::training(seed_stream(config.seed), stream);
                stream += 1;
                let (loss, p) = loss_total(
                    &mut g,
                    &model,
                    &ex.input,
                    gold,
                    config.loss_weights,
                    config.matching_mode,
                    config.no_repeat,
                )?;
                if !p.total.is_finite() {
                    return Err(Error::NonFinite(format!("loss at epoch {epoch} batch {b}")));
                }
                for (name, gv) in g.backward(loss)? {
                    let acc = grads.entry(name).or_insert_with(|| vec![0.0; gv.len()]);
                    acc.iter_mut().zip(&gv).for_each(|(a, x)| *a += x * inv);
                }
                parts.l_k += p.l_k * inv;
                parts.l_e += p.l_e * inv;
                parts.l_m += p.l_m * inv;
                parts.total += p.total * inv;
            }
            let grad_norm = opt
                .step(&mut model.params, &grads)
                .map_err(|_| Error::NonFinite(format!("gradient at epoch {epoch} batch {b}")))?;
            let w = chunk.len() as f64;
            sums.l_k += parts.l_k * w;
            sums.l_e += parts.l_e * w;
            sums.l_m += parts.l_m * w;
            sums.total += parts.total * w;
            emit(
                TraceRecord::Batch {
                    epoch,
                    batch: b,
                    loss: parts.total,
                    l_k: parts.l_k,
                    l_e: parts.l_e,
                    l_m: parts.l_m,
                    grad_norm,
                },
                &mut trace,
            );
        }

        let (val, _) = if val_set.is_empty() {
            (PlanScore::default(), Vec::new())
        } else {
            evaluate(&model, val_set, &greedy, Averaging::Micro)?
        };
        let improved = best.is_none() || (!val_set.is_empty() && val.ks_f1 > best_f1);
        if improved {
            best_f1 = val.ks_f1;
            let rng = RngState {
                seed: config.seed,
                epoch: epoch as u64,
                dropout_stream: stream,
            };
            best = Some(Checkpoint::from_model(&model, config, rng, val.ks_f1, epoch as u64));
        }
        let n = train_set.len() as f64;
        emit(
            TraceRecord::Epoch {
                epoch,
                loss: sums.total / n,
                l_k: sums.l_k / n,
                l_e: sums.l_e / n,
                l_m: sums.l_m / n,
                val_ks_f1: val.ks_f1,
                val_cs_f1: val.cs_f1,
                val_co: val.co,
                best: improved,
            },
            &mut trace,
        );
    }
    let best = match best {
        Some(b) => b,
        None => Checkpoint::from_model(
            &model,
            config,
            RngState {
                seed: config.seed,
                epoch: 0,
                dropout_stream: stream,
            },
            0.0,
            0,
        ),
    };
    Ok(TrainOutcome { best, last: model, trace })
}
