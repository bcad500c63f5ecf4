use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adamw_step, sgd_step, EpochMetrics, Metrics, OptimizerKind, OptimizerState, TrainConfig};
use crate::autodiff::{Graph, Scalar, Tensor};
use crate::backbone::BackboneWeights;
use crate::data::Dataset;
use crate::error::{LsptError, Result};
use crate::prompts::{forward_graph, param_partition, BankVars, Components, PromptBank, StrategyKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub bank: PromptBank<T>,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    /// `true,predicted,count` rows for every cell.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true,predicted,count\n");
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                s.push_str(&format!("{t},{p},{c}\n"));
            }
        }
        s
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_compatible<T: Scalar>(data: &Dataset<T>, backbone: &BackboneWeights<T>) -> Result<()> {
    let c = &backbone.config;
    if data.image_h() != c.image_h || data.image_w() != c.image_w || data.patch != c.patch {
        return Err(LsptError::Config(format!(
            "dataset images {}×{} patch {} do not match backbone {}×{} patch {}",
            data.image_h(),
            data.image_w(),
            data.patch,
            c.image_h,
            c.image_w,
            c.patch
        )));
    }
    if data.classes != c.classes {
        return Err(LsptError::Config(format!(
            "dataset has {} classes, backbone head expects {}",
            data.classes, c.classes
        )));
    }
    Ok(())
}

fn embed_all<T: Scalar>(data: &Dataset<T>, backbone: &BackboneWeights<T>) -> Result<Vec<Tensor<T>>> {
    (0..data.len()).map(|i| backbone.patch_embed(&data.image(i))).collect()
}

fn logits_for<T: Scalar>(
    x0: &Tensor<T>,
    backbone: &BackboneWeights<T>,
    bank: &PromptBank<T>,
    components: Components,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant_ref(x0);
    let vars = BankVars::register(&mut g, bank);
    let fwd = forward_graph(&mut g, backbone, &vars, components, x, None)?;
    Ok(g.value(fwd.logits).clone())
}

/// Predicted class of every sample.
pub fn predict<T: Scalar>(
    data: &Dataset<T>,
    backbone: &BackboneWeights<T>,
    bank: &PromptBank<T>,
    strategy: StrategyKind,
) -> Result<Vec<usize>> {
    check_compatible(data, backbone)?;
    bank.check_supports(strategy.components(), &backbone.config)?;
    let x0 = embed_all(data, backbone)?;
    predict_cached(&x0, backbone, bank, strategy.components())
}

fn predict_cached<T: Scalar>(
    x0: &[Tensor<T>],
    backbone: &BackboneWeights<T>,
    bank: &PromptBank<T>,
    components: Components,
) -> Result<Vec<usize>> {
    x0.iter()
        .map(|x| Ok(argmax(logits_for(x, backbone, bank, components)?.data())))
        .collect()
}

pub(super) fn score(predictions: Vec<usize>, labels: &[usize], classes: usize) -> Evaluation {
    let mut confusion = vec![vec![0; classes]; classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        confusion[t][p] += 1;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, t)| p == t).count();
    let accuracy = if labels.is_empty() {
        0.0
    } else {
        correct as f64 / labels.len() as f64
    };
    Evaluation {
        accuracy,
        confusion,
        predictions,
    }
}

/// Accuracy and confusion counts of `strategy` on `data`. An empty dataset
/// scores 0.
pub fn evaluate<T: Scalar>(
    data: &Dataset<T>,
    backbone: &BackboneWeights<T>,
    bank: &PromptBank<T>,
    strategy: StrategyKind,
) -> Result<Evaluation> {
    let predictions = predict(data, backbone, bank, strategy)?;
    Ok(score(predictions, &data.labels, data.classes))
}

/// Trains the parameters of `bank` that `config.strategy` uses; everything
/// else, including the backbone, is left untouched.
///
/// Each step averages per-sample gradients over a minibatch in a fixed
/// order, so a run is a pure function of its inputs and `config.seed`.
pub fn train<T: Scalar>(
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    backbone: &BackboneWeights<T>,
    bank: PromptBank<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let components = config.strategy.components();
    bank.check_supports(components, &backbone.config)?;
    check_compatible(train_set, backbone)?;
    check_compatible(val_set, backbone)?;
    if train_set.is_empty() {
        return Err(LsptError::EmptyInput("training set"));
    }
    let train_x0 = embed_all(train_set, backbone)?;
    let val_x0 = embed_all(val_set, backbone)?;

    let trainable_names: Vec<String> = param_partition(config.strategy, &bank, backbone)
        .trainable
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mask: Vec<bool> = bank
        .named_parameters()
        .iter()
        .map(|(n, _)| trainable_names.contains(n))
        .collect();

    let mut bank = bank;
    let mut state = {
        let params = selected(&mut bank, &mask);
        OptimizerState::new(&params)
    };
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Metrics::default();
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Option<Tensor<T>>> = vec![None; mask.iter().filter(|&&m| m).count()];
            for &i in batch {
                let mut g = Graph::new();
                let x = g.constant_ref(&train_x0[i]);
                let vars = BankVars::register(&mut g, &bank);
                let at = |e: LsptError| match e {
                    LsptError::Numeric(m) => {
                        LsptError::Numeric(format!("{m} at epoch {epoch}, step {}, sample {i}", step + 1))
                    }
                    other => other,
                };
                let fwd = forward_graph(&mut g, backbone, &vars, components, x, None).map_err(at)?;
                let label = train_set.labels[i];
                if argmax(g.value(fwd.logits).data()) == label {
                    correct += 1;
                }
                let loss = g.cross_entropy(fwd.logits, &[label]).map_err(at)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(at(LsptError::Numeric(format!("non-finite loss {value}"))));
                }
                loss_sum += value.to_f64().unwrap_or(f64::NAN);
                let mut grads = g.backward(loss)?;
                let wanted = vars.vars().into_iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v);
                for (slot, v) in acc.iter_mut().zip(wanted) {
                    let grad = grads.take(v).expect("trainable leaf has a gradient");
                    match slot {
                        Some(sum) => sum.add_assign(&grad),
                        None => *slot = Some(grad),
                    }
                }
            }
            let inv = T::one() / T::lit(batch.len() as f64);
            let grads: Vec<Tensor<T>> = acc
                .into_iter()
                .map(|g| g.expect("non-empty batch").map(|v| v * inv))
                .collect();
            let lr = if config.cosine {
                0.5 * config.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
            } else {
                config.lr
            };
            let mut params = selected(&mut bank, &mask);
            match config.optimizer {
                OptimizerKind::SgdMomentum => sgd_step(&mut params, &grads, &mut state, config, lr),
                OptimizerKind::AdamW => adamw_step(&mut params, &grads, &mut state, config, lr),
            }
            step += 1;
        }
        let val_pred = predict_cached(&val_x0, backbone, &bank, components)?;
        let val_acc = score(val_pred, &val_set.labels, val_set.classes).accuracy;
        metrics.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_acc,
            seconds: if config.record_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(TrainOutcome { bank, metrics })
}

fn selected<'b, T: Scalar>(bank: &'b mut PromptBank<T>, mask: &[bool]) -> Vec<&'b mut Tensor<T>> {
    bank.parameters_mut()
        .into_iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(t, _)| t)
        .collect()
}
