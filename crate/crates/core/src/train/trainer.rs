use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::{learning_rate, AdamState};
use super::config::{SubsetSampler, TrainConfig};
use super::loss::loss_graph;
use crate::clue::{ClueSet, ClueSubset, Modality};
use crate::data::{Manifest, MixtureExample, Split};
use crate::dccrn::{Checkpoint, ClueMode, Model};
use crate::error::{Error, Result};
use crate::nn::{ComplexFeature, Graph, ParamGrads, ParamStore};
use crate::signal::StftPlan;

/// Model, parameters and optimiser state for one training stage.
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub stage: u8,
    pub steps: usize,
    adam: AdamState<f32>,
    plan: StftPlan<f32>,
    cfg: TrainConfig,
    sampler: SubsetSampler,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Stage 1 starts from `init` or a fresh model. Stage 2 needs `init`
    /// and adds a freshly initialised clue network when it has none.
    pub fn new(cfg: &TrainConfig, init: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (mut model, mut store) = match init {
            Some(ckpt) => ckpt.instantiate::<f32>()?,
            None if cfg.stage == 1 => {
                let mut store = ParamStore::new();
                let model = Model::new(&cfg.model, &mut store, &mut rng)?;
                (model, store)
            }
            None => {
                return Err(Error::Contract(
                    "stage-2 training starts from a stage-1 checkpoint".into(),
                ))
            }
        };
        if cfg.stage == 2 && model.clue.is_none() {
            model.add_clue_net(&mut store, &mut rng)?;
        }
        let plan = StftPlan::new(model.config.stft)?;
        Ok(Self {
            adam: AdamState::new(&store, cfg.adam),
            sampler: SubsetSampler::new(&cfg.subset_weights)?,
            model,
            store,
            stage: cfg.stage,
            steps: 0,
            plan,
            cfg: cfg.clone(),
            rng,
        })
    }

    pub fn mode(&self) -> ClueMode {
        if self.stage == 1 {
            ClueMode::Tag
        } else {
            ClueMode::Fused
        }
    }

    fn graph_loss<'a>(
        &'a self,
        g: &Graph<'a, f32>,
        ex: &MixtureExample,
        clues: &ClueSet,
    ) -> Result<crate::tensor::Var> {
        let samples = |x: &[f64]| x.iter().map(|&v| v as f32).collect::<Vec<_>>();
        let n = ex.mixture.len();
        let x = g.constant(vec![n], samples(&ex.mixture.samples))?;
        let fwd = self.model.forward(g, &self.plan, x, clues, self.mode())?;
        let s = g.constant(vec![n], samples(&ex.target.samples))?;
        let (sr, si) = self.plan.forward(g.tape(), s)?;
        let target_spec = ComplexFeature::new(g.tape(), sr, si)?;
        loss_graph(
            g.tape(),
            s,
            fwd.wave,
            target_spec,
            fwd.estimate,
            &self.cfg.loss,
        )
    }

    fn clues_for(&self, ex: &MixtureExample, subset: Option<ClueSubset>) -> Result<ClueSet> {
        match (self.mode(), subset) {
            (ClueMode::Tag, _) => ex.clues.restrict(ClueSubset::TAG),
            (ClueMode::Fused, Some(s)) => ex.clues.restrict(s),
            (ClueMode::Fused, None) => Ok(ex.clues.clone()),
        }
    }

    /// Loss and parameter gradients for one example. In the fused mode the
    /// encoders of modalities outside `subset` must receive no gradient.
    pub fn example_grads(
        &self,
        ex: &MixtureExample,
        subset: Option<ClueSubset>,
    ) -> Result<(f64, ParamGrads<f32>)> {
        let clues = self.clues_for(ex, subset)?;
        let g = Graph::new(&self.store);
        let loss = self.graph_loss(&g, ex, &clues)?;
        let value = g.scalar_value(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Domain {
                op: "train",
                msg: format!("non-finite loss {value} at step {}", self.steps),
            });
        }
        let grads = g.backward(loss)?;
        if let Some(net) = &self.model.clue {
            let present = clues.present();
            for m in Modality::CLUES
                .into_iter()
                .filter(|m| !present.contains(*m))
            {
                if let Some(id) = net
                    .modality_params(m)
                    .into_iter()
                    .find(|id| grads.get(*id).is_some())
                {
                    return Err(Error::Contract(format!(
                        "absent {m} clue routed a gradient into {}",
                        self.store.name(id)
                    )));
                }
            }
        }
        Ok((value, grads))
    }

    /// Loss without gradients.
    pub fn eval_loss(&self, ex: &MixtureExample, subset: Option<ClueSubset>) -> Result<f64> {
        let clues = self.clues_for(ex, subset)?;
        let g = Graph::new(&self.store);
        let loss = self.graph_loss(&g, ex, &clues)?;
        Ok(g.scalar_value(loss) as f64)
    }

    /// One Adam step on the mean gradient of `batch`; returns the mean loss.
    pub fn step(&mut self, batch: &[(MixtureExample, Option<ClueSubset>)], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut total = ParamGrads::empty(self.store.len());
        let mut loss = 0.0;
        for (ex, subset) in batch {
            let (l, g) = self.example_grads(ex, *subset)?;
            loss += l;
            total.add_assign(&g);
        }
        total.scale(1.0 / batch.len() as f32);
        self.adam.update(&mut self.store, &total, lr)?;
        self.steps += 1;
        Ok(loss / batch.len() as f64)
    }

    pub fn sample_subset(&mut self) -> Option<ClueSubset> {
        (self.stage == 2).then(|| self.sampler.sample(&mut self.rng))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(&self.model.config, self.stage, &self.store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub best: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// Subset used for the `i`-th validation example in stage 2: the seven
/// subsets in turn, so every epoch scores the same pairs.
pub fn validation_subset(i: usize) -> ClueSubset {
    let all = ClueSubset::all_nonempty();
    all[i % all.len()]
}

/// Trains on the manifest's `train` split with early stopping on the
/// `valid` split (the training loss when there is none). `on_epoch` sees
/// each log entry as it is produced.
pub fn train(
    manifest: &Manifest,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let train_set: Vec<_> = manifest.split(Split::Train).collect();
    if train_set.is_empty() {
        return Err(Error::Input("manifest has no training examples".into()));
    }
    let valid_set: Vec<_> = manifest.split(Split::Valid).collect();
    let classes = cfg
        .model
        .clue
        .classes
        .max(init.map_or(0, |c| c.config.clue.classes));
    if let Some(r) = manifest.records.iter().find(|r| r.target_class >= classes) {
        return Err(Error::Config(format!(
            "example {} targets class {} but the model has {classes} tag classes",
            r.id, r.target_class
        )));
    }
    let mut trainer = Trainer::new(cfg, init)?;
    let valid_examples: Vec<MixtureExample> = valid_set
        .iter()
        .map(|r| r.example())
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg.lr0, cfg.decay, epoch);
        order.shuffle(&mut trainer.rng);
        let (mut sum, mut count) = (0.0, 0);
        let mut capped = false;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let subset = trainer.sample_subset();
                batch.push((train_set[i].example()?, subset));
            }
            sum += trainer.step(&batch, lr)? * batch.len() as f64;
            count += batch.len();
            if cfg.max_steps.is_some_and(|m| trainer.steps >= m) {
                capped = true;
                break;
            }
        }
        let train_loss = sum / count as f64;
        let valid_loss = if valid_examples.is_empty() {
            train_loss
        } else {
            let mut s = 0.0;
            for (i, ex) in valid_examples.iter().enumerate() {
                let subset = (trainer.stage == 2).then(|| validation_subset(i));
                s += trainer.eval_loss(ex, subset)?;
            }
            s / valid_examples.len() as f64
        };
        let improved = best.as_ref().is_none_or(|(b, _)| valid_loss < *b);
        if improved {
            best = Some((valid_loss, trainer.checkpoint()?));
            stale = 0;
        } else {
            stale += 1;
        }
        let entry = EpochLog {
            epoch,
            lr,
            steps: trainer.steps,
            train_loss,
            valid_loss,
            best: improved,
        };
        on_epoch(&entry);
        log.push(entry);
        if capped || stale >= cfg.patience {
            break 'epochs;
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch").1,
        log,
        steps: trainer.steps,
    })
}
