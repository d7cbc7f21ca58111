//! Minibatch training with Adam and the decaying learning rate.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Adam;

use super::{compute_metrics, elbo, predict, Data, Metrics, Model, NoiseBundle, TrainSchedule, LOG_NOISE_VAR};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub neg_elbo: f64,
    pub kl: f64,
    pub nll: f64,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<Metrics>,
}

/// Trains `model` in place. Every source of randomness (minibatch order,
/// Monte Carlo noise, validation noise) derives from `seed`, so logs are
/// reproducible apart from `wall_ms`. `sink` sees each record as it is made.
pub fn train(
    model: &mut Model,
    schedule: &TrainSchedule,
    data: &Data,
    val: Option<&Data>,
    seed: u64,
    mut sink: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    schedule.validate()?;
    model.config.validate()?;
    if data.n == 0 {
        return Err(Error::Contract("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lr = schedule.lr();
    let bs = schedule.batch_size.min(data.n);
    let mut order: Vec<usize> = (0..data.n).collect();
    let mut cursor = data.n;
    let mut adam = Adam::new();
    let start = Instant::now();
    let mut log = Vec::new();
    for step in 0..schedule.total_steps {
        if cursor + bs > data.n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = data.subset(&order[cursor..cursor + bs]);
        cursor += bs;
        let noise = NoiseBundle::draw(&model.config, bs, model.config.mc_train, &mut rng);
        let graph = elbo(&model.config, &model.params, &batch, data.n, &noise)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        if !graph.parts.neg_elbo.is_finite() {
            return Err(Error::Numeric(format!("objective diverged at step {step}")));
        }
        let rate = lr.at(step);
        if step % schedule.eval_interval == 0 || step + 1 == schedule.total_steps {
            let val = match val {
                Some(v) => {
                    let p = predict(model, &v.x, v.n, model.config.mc_test, seed ^ (step as u64).wrapping_mul(0x9E37_79B9))?;
                    Some(compute_metrics(&p, &v.y)?)
                }
                None => None,
            };
            let rec = LogRecord {
                step,
                lr: rate,
                neg_elbo: graph.parts.neg_elbo,
                kl: graph.parts.kl,
                nll: graph.parts.nll,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                val,
            };
            sink(&rec);
            log.push(rec);
        }
        let mut grads = graph.gradients()?;
        if step < schedule.fixed_noise_steps {
            if let Some(g) = grads.get_mut(LOG_NOISE_VAR) {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        if grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
        }
        adam.step(std::slice::from_mut(&mut model.params), &[grads], rate)?;
    }
    Ok(log)
}
