//! Training loop with per-epoch logging, divergence guard and checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{Checkpoint, EpochLog, RngState};
use crate::config::{Augmentation, TrainConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, Provenance};
use crate::loss::{sorted_mean, LossRegistry, PointSetLoss};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensor::{ParamId, Tensor};

/// Stream of the generator that drives data order, augmentation and the
/// merge FPS start.
const DATA_STREAM: u64 = 300;

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    rng: ChaCha8Rng,
    loss: Box<dyn PointSetLoss>,
}

/// Rotate about the z axis.
fn rotate_z(points: &[Point], angle: f64) -> Vec<Point> {
    let (s, c) = angle.sin_cos();
    points
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
        .collect()
}

impl Trainer {
    pub fn new(config: &TrainConfig, registry: &LossRegistry) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.seed)?;
        let adam = Adam::new(config.optimizer, &model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Trainer {
            config: config.clone(),
            model,
            adam,
            epoch: 0,
            log: Vec::new(),
            rng,
            loss: registry.build(&config.loss)?,
        })
    }

    /// Continue from a checkpoint exactly where it stopped.
    pub fn resume(checkpoint: &Checkpoint, registry: &LossRegistry, path: &std::path::Path) -> Result<Self> {
        let meta = &checkpoint.meta;
        let (model, adam) = checkpoint.restore(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(meta.rng.seed);
        rng.set_stream(meta.rng.stream);
        let pos: u128 = meta
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::format(path, "bad generator position"))?;
        rng.set_word_pos(pos);
        Ok(Trainer {
            config: meta.config.clone(),
            model,
            adam,
            epoch: meta.epoch,
            log: meta.log.clone(),
            rng,
            loss: registry.build(&meta.config.loss)?,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.config.seed,
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.config,
            &self.model,
            &self.adam,
            self.epoch,
            self.rng_state(),
            &self.log,
        )
    }

    fn augment(&mut self, aug: Augmentation, sample: &Sample) -> Result<(PointCloud, PointCloud)> {
        let angle = if aug.rotation > 0.0 {
            self.rng.gen_range(-aug.rotation..=aug.rotation)
        } else {
            0.0
        };
        let mut partial = rotate_z(sample.partial.points(), angle);
        let gt = rotate_z(sample.gt.points(), angle);
        if aug.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, aug.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
            for p in &mut partial {
                for c in p.iter_mut() {
                    *c += normal.sample(&mut self.rng);
                }
            }
        }
        Ok((
            PointCloud::new(partial, Provenance::Partial)?,
            PointCloud::new(gt, Provenance::GroundTruth)?,
        ))
    }

    /// Loss and parameter gradients (store order) for one sample.
    fn sample_gradients(&mut self, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
        let (partial, gt) = match self.config.augmentation {
            Some(aug) => self.augment(aug, sample)?,
            None => (sample.partial.clone(), sample.gt.clone()),
        };
        let union = partial.len() + self.config.model.n_miss;
        let start = self.rng.gen_range(0..union);
        let mut g = self.model.bind(self.config.precision);
        let out = self.model.forward_complete(&mut g, &partial, start)?;
        let y = g.tape.constant(gt.to_tensor());
        let loss = self.loss.forward(&mut g.tape, y, out.merged)?;
        let value = g.tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch + 1,
                loss: value,
            });
        }
        let grads = g.tape.backward(loss)?;
        let per_param = (0..self.model.store.len())
            .map(|k| {
                grads
                    .wrt(g.p(ParamId(k)))
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("no gradient for parameter {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((value, per_param))
    }

    /// One pass over `samples` in a freshly shuffled order.
    pub fn run_epoch(&mut self, samples: &[&Sample]) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(Error::config("no training samples"));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut losses = Vec::with_capacity(samples.len());
        for batch in order.chunks(self.config.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (value, grads) = self.sample_gradients(samples[i])?;
                losses.push(value);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                                *u += v;
                            }
                        }
                    }
                }
            }
            let mut acc = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for t in &mut acc {
                for v in t.data_mut() {
                    *v *= scale;
                }
                if !t.is_finite() {
                    return Err(Error::Divergence {
                        epoch: self.epoch + 1,
                        loss: f64::NAN,
                    });
                }
            }
            self.adam.update(&mut self.model.store, &acc)?;
        }
        self.epoch += 1;
        let entry = EpochLog {
            epoch: self.epoch,
            mean_loss: sorted_mean(&mut losses),
        };
        self.log.push(entry);
        Ok(entry)
    }

    /// Train until `config.epochs` epochs are complete. `on_epoch` runs
    /// after each epoch and may save checkpoints.
    pub fn train(
        &mut self,
        samples: &[&Sample],
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let entry = self.run_epoch(samples)?;
            on_epoch(self, &entry)?;
        }
        Ok(())
    }
}
