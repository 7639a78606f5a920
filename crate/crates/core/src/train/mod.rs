//! The continual-learning trainer and the fine-tuning / retraining baselines.
//!
//! Every method shares one loop: draw batches, accumulate per-utterance
//! gradients in batch order, take a clipped Adam step, and at the end of an
//! epoch evaluate the dev objective, apply the halving rule and test for
//! convergence. Only the per-step objective differs.

mod adam;
mod schedule;

pub use adam::{adam_step, ClipStats, OptimizerState};
pub use schedule::{check_converged, schedule_step, Schedule};

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, ctc_loss_node};
use crate::data::{fingerprint, BatchStream, DomainData, Utterance};
use crate::diff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{distill_kl, task1_nodes, HyperParams, LossBreakdown};
use crate::model::{Gradients, ModelConfig, ModelParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Original model: CTC on Data0 from a fresh initialization.
    Base,
    /// Fine-tuning: CTC on Data1 starting from the original model.
    Ft,
    /// Retraining: CTC on pooled Data0 and Data1 from a fresh initialization.
    Rt,
    Mtlcf,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Base, Method::Ft, Method::Rt, Method::Mtlcf];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Ft => "ft",
            Method::Rt => "rt",
            Method::Mtlcf => "mtlcf",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("method", format!("unknown method {s:?}; expected base, ft, rt or mtlcf")))
    }
}

/// One row of a run history. Epoch 0 evaluates the starting model.
///
/// The loss columns are dev-set values of the terms the method optimizes;
/// terms a method does not use are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
    pub dev_loss: f64,
    pub cer_org: Option<f64>,
    pub cer_tar: Option<f64>,
    pub sub_loss1: Option<f64>,
    pub sub_loss2: Option<f64>,
    pub loss2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Halvings,
    EpochCap,
}

#[derive(Debug, Clone)]
pub struct TrainRun<S> {
    pub method: Method,
    pub hyper: HyperParams,
    pub schedule: Schedule,
    pub seed: u64,
    /// `history.len() == completed epochs + 1`.
    pub history: Vec<EpochRecord>,
    pub model: ModelParams<S>,
    pub stop_reason: StopReason,
    /// Target-domain training utterances available to the run.
    pub scale_tar: usize,
    /// Fingerprint of the (org, tar) test sets the CERs were measured on.
    pub test_fingerprint: (Option<u64>, Option<u64>),
}

/// Everything about a finished run except its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub method: Method,
    pub seed: u64,
    pub scale_tar: usize,
    pub stop_reason: StopReason,
    pub test_fingerprint: (Option<u64>, Option<u64>),
    #[serde(skip)]
    pub history: Vec<EpochRecord>,
}

impl<S> TrainRun<S> {
    pub fn label(&self) -> String {
        self.method.to_string()
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            label: self.label(),
            method: self.method,
            seed: self.seed,
            scale_tar: self.scale_tar,
            stop_reason: self.stop_reason,
            test_fingerprint: self.test_fingerprint,
            history: self.history.clone(),
        }
    }

    pub fn epochs(&self) -> usize {
        self.history.len() - 1
    }

    pub fn final_record(&self) -> &EpochRecord {
        self.history.last().expect("history starts with epoch 0")
    }
}

/// Test sets scored after every epoch. Either may be absent.
#[derive(Debug, Clone, Copy)]
pub struct TestSets<'a, S> {
    pub org: Option<&'a [Utterance<S>]>,
    pub tar: Option<&'a [Utterance<S>]>,
}

impl<S> Default for TestSets<'_, S> {
    fn default() -> Self {
        Self { org: None, tar: None }
    }
}

/// Settings shared by every method.
#[derive(Debug, Clone)]
pub struct RunOptions<'a, S> {
    pub hyper: HyperParams,
    pub schedule: Schedule,
    pub seed: u64,
    pub tests: TestSets<'a, S>,
}

/// Per-step instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    /// Global step counter, starting at 1.
    pub step: u64,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub clip: ClipStats,
}

/// State written out when a run aborts on a non-finite value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortDump {
    pub method: Method,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub message: String,
    pub batch_org: Vec<usize>,
    pub batch_tar: Vec<usize>,
    pub max_abs_param: f64,
}

/// Hooks called by the training loop. All methods default to no-ops.
pub trait StepObserver<S: Scalar> {
    /// After each parameter update.
    fn on_step(&mut self, _report: &StepReport, _model: &ModelParams<S>) {}
    /// After each epoch, including epoch 0. An error stops the run.
    fn on_epoch(&mut self, _record: &EpochRecord, _model: &ModelParams<S>) -> Result<()> {
        Ok(())
    }
    /// Before a non-finite abort is returned.
    fn on_abort(&mut self, _dump: &AbortDump, _model: &ModelParams<S>) {}
}

impl<S: Scalar> StepObserver<S> for () {}

/// Derives an independent stream seed from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)).next_u64()
}

const STREAM_ORG: u64 = 1;
const STREAM_TAR: u64 = 2;
const STREAM_POOLED: u64 = 3;
const STREAM_INIT: u64 = 4;

/// The continual-learning method: the student starts as a copy of
/// `model0`, which stays frozen and supplies distillation targets.
pub fn train_mtlcf<S: Scalar>(
    model0: &ModelParams<S>,
    data0: &DomainData<S>,
    data1: &DomainData<S>,
    opts: &RunOptions<'_, S>,
    observer: &mut dyn StepObserver<S>,
) -> Result<TrainRun<S>> {
    opts.hyper.validate()?;
    let teacher_train = teacher_outputs(model0, &data0.train)?;
    let teacher_dev = teacher_outputs(model0, &data0.dev)?;
    let objective = Objective::Mtlcf {
        org_train: &data0.train,
        org_dev: &data0.dev,
        teacher_train,
        teacher_dev,
        tar_train: &data1.train,
        tar_dev: &data1.dev,
    };
    let student = model0.clone().frozen(false);
    run(Method::Mtlcf, student, objective, data1.train.len(), opts, observer)
}

/// Fine-tuning baseline: CTC on Data1 starting from a copy of `model0`.
pub fn train_ft<S: Scalar>(
    model0: &ModelParams<S>,
    data1: &DomainData<S>,
    opts: &RunOptions<'_, S>,
    observer: &mut dyn StepObserver<S>,
) -> Result<TrainRun<S>> {
    let objective = Objective::Ctc {
        train: data1.train.iter().collect(),
        dev: data1.dev.iter().collect(),
        stream: STREAM_TAR,
    };
    run(Method::Ft, model0.clone().frozen(false), objective, data1.train.len(), opts, observer)
}

/// Retraining baseline: CTC on the pooled training sets from a fresh
/// initialization seeded by the run seed.
pub fn train_rt<S: Scalar>(
    config: &ModelConfig,
    data0: &DomainData<S>,
    data1: &DomainData<S>,
    opts: &RunOptions<'_, S>,
    observer: &mut dyn StepObserver<S>,
) -> Result<TrainRun<S>> {
    let objective = Objective::Ctc {
        train: data0.train.iter().chain(&data1.train).collect(),
        dev: data0.dev.iter().chain(&data1.dev).collect(),
        stream: STREAM_POOLED,
    };
    let model = fresh_model(config, opts.seed)?;
    run(Method::Rt, model, objective, data1.train.len(), opts, observer)
}

/// Trains the original model on Data0 from a fresh initialization.
pub fn train_base<S: Scalar>(
    config: &ModelConfig,
    data0: &DomainData<S>,
    opts: &RunOptions<'_, S>,
    observer: &mut dyn StepObserver<S>,
) -> Result<TrainRun<S>> {
    let objective = Objective::Ctc {
        train: data0.train.iter().collect(),
        dev: data0.dev.iter().collect(),
        stream: STREAM_ORG,
    };
    let model = fresh_model(config, opts.seed)?;
    run(Method::Base, model, objective, 0, opts, observer)
}

fn fresh_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<S>> {
    ModelParams::init(&ModelConfig {
        seed: derive_seed(seed, STREAM_INIT),
        ..config.clone()
    })
}

fn teacher_outputs<S: Scalar>(teacher: &ModelParams<S>, split: &[Utterance<S>]) -> Result<Vec<Tensor<S>>> {
    split.iter().map(|u| teacher.infer(&u.features)).collect()
}

enum Objective<'a, S> {
    Ctc {
        train: Vec<&'a Utterance<S>>,
        dev: Vec<&'a Utterance<S>>,
        stream: u64,
    },
    Mtlcf {
        org_train: &'a [Utterance<S>],
        org_dev: &'a [Utterance<S>],
        teacher_train: Vec<Tensor<S>>,
        teacher_dev: Vec<Tensor<S>>,
        tar_train: &'a [Utterance<S>],
        tar_dev: &'a [Utterance<S>],
    },
}

fn lengths<S: Scalar>(utts: impl Iterator<Item = impl std::ops::Deref<Target = Utterance<S>>>) -> Vec<usize> {
    utts.map(|u| u.features.rows()).collect()
}

/// Batch streams for one run: the main stream defines the epoch.
struct Streams {
    main: BatchStream,
    org: Option<BatchStream>,
}

impl<S: Scalar> Objective<'_, S> {
    fn streams(&self, seed: u64, m: usize) -> Result<Streams> {
        match self {
            Objective::Ctc { train, stream, .. } => Ok(Streams {
                main: BatchStream::new(lengths(train.iter().copied()), m, derive_seed(seed, *stream))?,
                org: None,
            }),
            Objective::Mtlcf { org_train, tar_train, .. } => Ok(Streams {
                main: BatchStream::new(lengths(tar_train.iter()), m, derive_seed(seed, STREAM_TAR))?,
                org: Some(BatchStream::new(lengths(org_train.iter()), m, derive_seed(seed, STREAM_ORG))?),
            }),
        }
    }

    fn step_gradients(
        &self,
        model: &ModelParams<S>,
        batch_tar: &[usize],
        batch_org: &[usize],
        hyper: &HyperParams,
    ) -> Result<(LossBreakdown, Gradients<S>)> {
        match self {
            Objective::Ctc { train, .. } => {
                let batch: Vec<&Utterance<S>> = batch_tar.iter().map(|&i| train[i]).collect();
                ctc_batch_gradient(model, &batch, hyper)
            }
            Objective::Mtlcf {
                org_train,
                teacher_train,
                tar_train,
                ..
            } => {
                let org: Vec<(&Utterance<S>, &Tensor<S>)> =
                    batch_org.iter().map(|&i| (&org_train[i], &teacher_train[i])).collect();
                let tar: Vec<&Utterance<S>> = batch_tar.iter().map(|&i| &tar_train[i]).collect();
                mtlcf_batch_gradient(model, &org, &tar, hyper)
            }
        }
    }

    /// Dev objective and its terms (mean over utterances).
    fn dev_loss(&self, model: &ModelParams<S>, hyper: &HyperParams) -> Result<(f64, Option<LossBreakdown>)> {
        match self {
            Objective::Ctc { dev, .. } => Ok((mean_ctc(model, dev.iter().copied())?, None)),
            Objective::Mtlcf {
                org_dev,
                teacher_dev,
                tar_dev,
                ..
            } => {
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for (u, t) in org_dev.iter().zip(teacher_dev) {
                    let lp = model.infer(&u.features)?;
                    s1 += kl_value(lp.clone(), t.clone(), hyper.temperature)?;
                    s2 += ctc_loss(&lp, &u.labels)?.loss.as_f64();
                }
                let n0 = org_dev.len().max(1) as f64;
                let l2 = mean_ctc(model, tar_dev.iter())?;
                let b = LossBreakdown::compose(s1 / n0, s2 / n0, l2, hyper)?;
                Ok((b.total, Some(b)))
            }
        }
    }
}

/// Batch-reduced CTC loss and its gradient. The loss is reported as
/// `loss2` and `total`.
pub fn ctc_batch_gradient<S: Scalar>(
    model: &ModelParams<S>,
    batch: &[&Utterance<S>],
    hyper: &HyperParams,
) -> Result<(LossBreakdown, Gradients<S>)> {
    let mut grads = Gradients::zeros_like(model);
    let w = hyper.batch_weight(batch.len());
    let mut total = 0.0;
    for u in batch {
        total += ctc_gradient(model, u, S::lit(w), &mut grads)?;
    }
    let loss = total * w;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("ctc loss = {loss}")));
    }
    let losses = LossBreakdown {
        loss2: loss,
        total: loss,
        ..LossBreakdown::default()
    };
    Ok((losses, grads))
}

/// The composite objective on one step's batches and its gradient with
/// respect to the student. `org` pairs each original-domain utterance with
/// the frozen teacher's log-probabilities for it.
///
/// Gradients are accumulated utterance by utterance in batch order,
/// original domain first. A term whose weight is zero is evaluated but not
/// differentiated.
pub fn mtlcf_batch_gradient<S: Scalar>(
    model: &ModelParams<S>,
    org: &[(&Utterance<S>, &Tensor<S>)],
    tar: &[&Utterance<S>],
    hyper: &HyperParams,
) -> Result<(LossBreakdown, Gradients<S>)> {
    let mut grads = Gradients::zeros_like(model);
    let w0 = hyper.batch_weight(org.len());
    let w1 = hyper.batch_weight(tar.len());
    let (mut s1, mut s2, mut l2) = (0.0, 0.0, 0.0);
    for (u, teacher) in org {
        let (a, b) = task1_gradient(model, u, teacher, hyper, S::lit(hyper.beta * w0), &mut grads)?;
        s1 += a;
        s2 += b;
    }
    for u in tar {
        l2 += ctc_gradient(model, u, S::lit((1.0 - hyper.beta) * w1), &mut grads)?;
    }
    let losses = LossBreakdown::compose(s1 * w0, s2 * w0, l2 * w1, hyper)?;
    Ok((losses, grads))
}

fn ctc_gradient<S: Scalar>(model: &ModelParams<S>, u: &Utterance<S>, weight: S, grads: &mut Gradients<S>) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.constant(u.features.clone());
    let lp = model.forward_bound(&mut g, &bound, x)?;
    let loss = ctc_loss_node(&mut g, lp, &u.labels)?;
    let value = g.scalar(loss)?.as_f64();
    if weight != S::zero() {
        g.backward(loss)?;
        grads.add_from_graph(&g, &bound, weight);
    }
    Ok(value)
}

/// Task-1 gradient on one original-domain utterance; returns
/// `(sub_loss1, sub_loss2)`.
fn task1_gradient<S: Scalar>(
    model: &ModelParams<S>,
    u: &Utterance<S>,
    teacher: &Tensor<S>,
    hyper: &HyperParams,
    weight: S,
    grads: &mut Gradients<S>,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.constant(u.features.clone());
    let lp = model.forward_bound(&mut g, &bound, x)?;
    let t = g.constant(teacher.clone());
    let nodes = task1_nodes(&mut g, lp, t, &u.labels, hyper)?;
    let values = (g.scalar(nodes.sub_loss1)?.as_f64(), g.scalar(nodes.sub_loss2)?.as_f64());
    if weight != S::zero() {
        g.backward(nodes.loss1)?;
        grads.add_from_graph(&g, &bound, weight);
    }
    Ok(values)
}

fn kl_value<S: Scalar>(student: Tensor<S>, teacher: Tensor<S>, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student);
    let t = g.constant(teacher);
    let kl = distill_kl(&mut g, s, t, S::lit(temperature))?;
    Ok(g.scalar(kl)?.as_f64())
}

fn mean_ctc<'u, S: Scalar + 'u>(model: &ModelParams<S>, utts: impl Iterator<Item = &'u Utterance<S>>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for u in utts {
        sum += ctc_loss(&model.infer(&u.features)?, &u.labels)?.loss.as_f64();
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn epoch_record<S: Scalar>(
    epoch: usize,
    lr: f64,
    model: &ModelParams<S>,
    dev: (f64, Option<LossBreakdown>),
    tests: &TestSets<'_, S>,
) -> Result<EpochRecord> {
    let cer_org = tests.org.map(|t| evaluate(model, t, "test_org")).transpose()?;
    let cer_tar = tests.tar.map(|t| evaluate(model, t, "test_tar")).transpose()?;
    let (dev_loss, terms) = dev;
    if !dev_loss.is_finite() {
        return Err(Error::NonFinite(format!("dev loss = {dev_loss}")));
    }
    Ok(EpochRecord {
        epoch,
        lr,
        dev_loss,
        cer_org: cer_org.map(|r| r.mean_cer),
        cer_tar: cer_tar.map(|r| r.mean_cer),
        sub_loss1: terms.map(|b| b.sub_loss1),
        sub_loss2: terms.map(|b| b.sub_loss2),
        loss2: Some(terms.map_or(dev_loss, |b| b.loss2)),
    })
}

fn max_abs_param<S: Scalar>(model: &ModelParams<S>) -> f64 {
    model
        .tensors()
        .iter()
        .flat_map(|t| t.data())
        .fold(0.0, |m, x| if x.is_finite() { m.max(x.abs().as_f64()) } else { f64::INFINITY })
}

fn abort<S: Scalar>(observer: &mut dyn StepObserver<S>, model: &ModelParams<S>, dump: AbortDump) -> Error {
    log::error!("{} aborted at epoch {} step {}: {}", dump.method, dump.epoch, dump.step, dump.message);
    observer.on_abort(&dump, model);
    Error::NonFinite(format!("{} (epoch {}, step {})", dump.message, dump.epoch, dump.step))
}

/// Routes a non-finite dev evaluation through the abort path.
fn guard<T, S: Scalar>(
    r: Result<T>,
    method: Method,
    epoch: usize,
    step: u64,
    lr: f64,
    model: &ModelParams<S>,
    observer: &mut dyn StepObserver<S>,
) -> Result<T> {
    match r {
        Err(Error::NonFinite(message)) => {
            let dump = AbortDump {
                method,
                epoch,
                step,
                lr,
                message,
                batch_org: vec![],
                batch_tar: vec![],
                max_abs_param: max_abs_param(model),
            };
            Err(abort(observer, model, dump))
        }
        other => other,
    }
}

fn run<S: Scalar>(
    method: Method,
    mut model: ModelParams<S>,
    objective: Objective<'_, S>,
    scale_tar: usize,
    opts: &RunOptions<'_, S>,
    observer: &mut dyn StepObserver<S>,
) -> Result<TrainRun<S>> {
    opts.hyper.validate()?;
    opts.schedule.validate()?;
    let hyper = &opts.hyper;
    let mut streams = objective.streams(opts.seed, hyper.batch_size)?;
    let mut state = OptimizerState::new(model.tensors(), &opts.schedule);

    let dev = guard(objective.dev_loss(&model, hyper), method, 0, 0, state.learning_rate, &model, observer)?;
    let first = epoch_record(0, state.learning_rate, &model, dev, &opts.tests)?;
    observer.on_epoch(&first, &model)?;
    let mut history = vec![first];
    let mut dev_history = vec![history[0].dev_loss];

    let stop_reason = loop {
        let epoch = history.len();
        let lr = state.learning_rate;
        for _ in 0..streams.main.batches_per_pass() {
            let batch_tar = streams.main.next_batch();
            let batch_org = streams.org.as_mut().map(BatchStream::next_batch).unwrap_or_default();
            let outcome = objective
                .step_gradients(&model, &batch_tar, &batch_org, hyper)
                .and_then(|(losses, grads)| {
                    let clip = adam_step(model.tensors_mut(), &grads, &mut state)?;
                    Ok((losses, clip))
                });
            let (losses, clip) = match outcome {
                Ok(v) => v,
                Err(Error::NonFinite(message)) => {
                    let dump = AbortDump {
                        method,
                        epoch,
                        step: state.step + 1,
                        lr,
                        message,
                        batch_org,
                        batch_tar,
                        max_abs_param: max_abs_param(&model),
                    };
                    return Err(abort(observer, &model, dump));
                }
                Err(e) => return Err(e),
            };
            let report = StepReport {
                epoch,
                step: state.step,
                lr,
                losses,
                clip,
            };
            log::trace!("{method} step {}: total {:.6}", report.step, losses.total);
            observer.on_step(&report, &model);
        }

        let dev = guard(objective.dev_loss(&model, hyper), method, epoch, state.step, lr, &model, observer)?;
        let record = epoch_record(epoch, lr, &model, dev, &opts.tests)?;
        log::info!(
            "{method} epoch {epoch}: lr {lr:e} dev {:.5} cer_org {:?} cer_tar {:?}",
            record.dev_loss,
            record.cer_org,
            record.cer_tar
        );
        dev_history.push(record.dev_loss);
        observer.on_epoch(&record, &model)?;
        history.push(record);

        schedule_step(&dev_history, &mut state, &opts.schedule);
        if check_converged(&dev_history, &state, &opts.schedule) {
            break if state.halvings_done >= opts.schedule.max_halvings {
                StopReason::Halvings
            } else {
                StopReason::EpochCap
            };
        }
    };

    Ok(TrainRun {
        method,
        hyper: opts.hyper.clone(),
        schedule: opts.schedule.clone(),
        seed: opts.seed,
        history,
        model,
        stop_reason,
        scale_tar,
        test_fingerprint: (opts.tests.org.map(fingerprint), opts.tests.tar.map(fingerprint)),
    })
}
