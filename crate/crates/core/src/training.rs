//! The alternating training loop.
//!
//! After pretraining a plain autoencoder and fitting a two-state mixture to
//! its codes, each round runs `E` epochs of mini-batch SGD on the ELBO with a
//! stepwise-EM update of the tree parameters after every batch, then
//! re-encodes the data and searches for a better tree structure on the
//! encoder means.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::em::{accumulate_stats, batch_em, stepwise_update, EmConfig, RepairPool, SufficientStats};
use crate::error::{Error, Result};
use crate::model::LtvaeModel;
use crate::neural::{
    draw_eps, elbo_and_gradients, reconstruction_and_gradients, ElboBreakdown, Head, TreePrior, Vae, VaeOptimizer,
};
use crate::rng::{derive_seed, seeded};
use crate::search::{bic_score, search, SearchConfig};
use crate::tree::{init_random, LatentStructure, ModelFile, TreeParameters};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub z_dim: usize,
    pub hidden: Vec<usize>,
    pub head: Head,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub stepwise_eta: f64,
    pub max_rounds: usize,
    /// Stop once a round with unchanged structure improves the mean ELBO
    /// by less than this.
    pub elbo_tol: f64,
    pub pretrain_epochs: usize,
    pub pretrain_restarts: usize,
    /// Monte-Carlo samples per datum in the ELBO.
    pub mc_samples: usize,
    pub structure_search: bool,
    pub search: SearchConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            z_dim: 4,
            hidden: vec![64, 32],
            head: Head::Bernoulli,
            epochs_per_round: 5,
            batch_size: 128,
            lr: 1e-3,
            stepwise_eta: 0.01,
            max_rounds: 20,
            elbo_tol: 1e-3,
            pretrain_epochs: 50,
            pretrain_restarts: 10,
            mc_samples: 1,
            structure_search: true,
            search: SearchConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("z_dim", self.z_dim),
            ("epochs_per_round", self.epochs_per_round),
            ("batch_size", self.batch_size),
            ("max_rounds", self.max_rounds),
            ("pretrain_restarts", self.pretrain_restarts),
            ("mc_samples", self.mc_samples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if !(self.stepwise_eta > 0.0 && self.stepwise_eta <= 1.0) {
            return Err(Error::InvalidArgument("stepwise eta must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub round: usize,
    pub epoch: usize,
    pub recon: f64,
    pub prior: f64,
    pub entropy: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mean_elbo: f64,
    /// BIC on the encoder means before and after the search.
    pub bic_before: f64,
    pub bic_after: f64,
    pub structure: String,
    pub structure_changed: bool,
    pub search_log: Vec<String>,
}

/// Wall-clock seconds of one round; kept out of every serialized output so
/// reruns stay byte-identical.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoundTiming {
    pub sgd_seconds: f64,
    pub search_seconds: f64,
}

impl RoundTiming {
    pub fn total(&self) -> f64 {
        self.sgd_seconds + self.search_seconds
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean reconstruction loglikelihood per pretraining epoch.
    pub pretrain_recon: Vec<f64>,
    /// BIC of each restart of the initial mixture fit.
    pub pretrain_bics: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
    #[serde(skip)]
    pub timings: Vec<RoundTiming>,
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: LtvaeModel,
    pub optimizer: VaeOptimizer,
    pub history: History,
    /// Rounds completed.
    pub round: usize,
    /// Set once the ELBO plateau rule fires. The round cap is checked
    /// separately, so a capped run can be resumed with a larger cap.
    pub finished: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    round: usize,
    finished: bool,
    model: ModelFile,
    optimizer: VaeOptimizer,
    history: History,
}

impl TrainState {
    pub fn to_checkpoint_json(&self) -> String {
        let file = CheckpointFile {
            round: self.round,
            finished: self.finished,
            model: self.model.to_file(),
            optimizer: self.optimizer.clone(),
            history: self.history.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::ModelParse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let model = LtvaeModel::from_file(&file.model)?;
        if file.optimizer.encoder.m.len() != model.vae.encoder.n_params()
            || file.optimizer.decoder.m.len() != model.vae.decoder.n_params()
        {
            return Err(Error::Format("optimizer state does not match the networks".into()));
        }
        Ok(TrainState {
            model,
            optimizer: file.optimizer,
            history: file.history,
            round: file.round,
            finished: file.finished,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_checkpoint_json())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        TrainState::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

fn batch_rows(data: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    data.select(Axis(0), idx)
}

/// Encoder means of every row.
pub fn encode_means(vae: &Vae, data: ArrayView2<f64>) -> Array2<f64> {
    vae.encode_params(data).0
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub vae: Vae,
    pub structure: LatentStructure,
    pub params: TreeParameters,
    pub recon_history: Vec<f64>,
    pub restart_bics: Vec<f64>,
}

/// Reconstruction-only autoencoder training, then the best of several EM
/// restarts of a two-state latent over singleton pouches on the codes.
pub fn pretrain(data: ArrayView2<f64>, config: &TrainConfig) -> Result<Pretrained> {
    config.validate()?;
    let n = data.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("training data"));
    }
    config.head.check(data)?;
    let mut vae = Vae::new(data.ncols(), &config.hidden, config.z_dim, config.head, derive_seed(config.seed, 1));
    let mut opt = VaeOptimizer::new(&vae, config.lr);
    let mut rng = seeded(derive_seed(config.seed, 2));
    let mut order: Vec<usize> = (0..n).collect();
    let mut recon_history = Vec::with_capacity(config.pretrain_epochs);
    for _ in 0..config.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let xb = batch_rows(data, chunk);
            let (recon, grads) = reconstruction_and_gradients(&vae, xb.view())?;
            opt.step(&mut vae, &grads);
            total += recon * chunk.len() as f64;
        }
        recon_history.push(total / n as f64);
    }

    let dz = encode_means(&vae, data);
    let structure = LatentStructure::gmm(2, config.z_dim);
    let mut best: Option<(f64, TreeParameters)> = None;
    let mut restart_bics = Vec::with_capacity(config.pretrain_restarts);
    for r in 0..config.pretrain_restarts {
        let init = init_random(&structure, dz.view(), derive_seed(config.seed, 100 + r as u64))?;
        let em = EmConfig {
            seed: derive_seed(config.seed, 200 + r as u64),
            ..EmConfig::default()
        };
        let run = batch_em(&structure, &init, dz.view(), &em)?;
        let bic = bic_score(&structure, &run.params, dz.view())?;
        restart_bics.push(bic);
        if best.as_ref().is_none_or(|(b, _)| bic > *b) {
            best = Some((bic, run.params));
        }
    }
    let (_, params) = best.expect("at least one restart");
    Ok(Pretrained {
        vae,
        structure,
        params,
        recon_history,
        restart_bics,
    })
}

/// Pretrains and packages the result as round 0.
pub fn initial_state(data: ArrayView2<f64>, config: &TrainConfig) -> Result<TrainState> {
    let pre = pretrain(data, config)?;
    let optimizer = VaeOptimizer::new(&pre.vae, config.lr);
    let history = History {
        pretrain_recon: pre.recon_history,
        pretrain_bics: pre.restart_bics,
        ..History::default()
    };
    Ok(TrainState {
        model: LtvaeModel::new(pre.structure, pre.params, pre.vae)?,
        optimizer,
        history,
        round: 0,
        finished: false,
    })
}

/// One outer iteration: `E` epochs of SGD with stepwise EM, then structure
/// search on the encoder means.
pub fn run_round(state: &mut TrainState, data: ArrayView2<f64>, config: &TrainConfig) -> Result<RoundRecord> {
    config.validate()?;
    let n = data.nrows();
    let round = state.round + 1;
    let mut rng = seeded(derive_seed(config.seed, 1000 + round as u64));
    let started = Instant::now();

    let dz0 = encode_means(&state.model.vae, data);
    let mut acc = accumulate_stats(&state.model.structure, &state.model.params, dz0.view())?.0;
    let pool_seed = derive_seed(config.seed, 3000 + round as u64);
    let mut pool = RepairPool::new(dz0.view(), pool_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_totals = Vec::with_capacity(config.epochs_per_round);

    for epoch in 1..=config.epochs_per_round {
        order.shuffle(&mut rng);
        let mut sum = ElboBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            let xb = batch_rows(data, chunk);
            let eps = draw_eps(&mut rng, config.mc_samples, chunk.len(), config.z_dim);
            let mut batch_stats = SufficientStats::zeros(&state.model.structure);
            let (elbo, grads) = {
                let prior = TreePrior::new(&state.model.structure, &state.model.params);
                elbo_and_gradients(&state.model.vae, &prior, xb.view(), &eps, Some(&mut batch_stats))?
            };
            state.optimizer.step(&mut state.model.vae, &grads);
            let (next_acc, params, _) = stepwise_update(
                &acc,
                &batch_stats,
                config.stepwise_eta,
                n,
                &state.model.structure,
                Some(&mut pool),
            );
            acc = next_acc;
            state.model.params = params;
            let w = chunk.len() as f64;
            sum.recon += elbo.recon * w;
            sum.prior += elbo.prior * w;
            sum.entropy += elbo.entropy * w;
        }
        let mean = ElboBreakdown::new(sum.recon / n as f64, sum.prior / n as f64, sum.entropy / n as f64);
        epoch_totals.push(mean.total);
        state.history.epochs.push(EpochRecord {
            round,
            epoch,
            recon: mean.recon,
            prior: mean.prior,
            entropy: mean.entropy,
            total: mean.total,
        });
    }
    let sgd_seconds = started.elapsed().as_secs_f64();

    let search_started = Instant::now();
    let dz = encode_means(&state.model.vae, data);
    let bic_before = bic_score(&state.model.structure, &state.model.params, dz.view())?;
    let mut record = RoundRecord {
        round,
        mean_elbo: epoch_totals.iter().sum::<f64>() / epoch_totals.len() as f64,
        bic_before,
        bic_after: bic_before,
        structure: state.model.structure.describe(),
        structure_changed: false,
        search_log: Vec::new(),
    };
    if config.structure_search {
        let search_config = SearchConfig {
            seed: derive_seed(config.seed, 5000 + round as u64),
            ..config.search.clone()
        };
        let outcome = search(&state.model.structure, &state.model.params, dz.view(), &search_config)?;
        record.structure_changed = outcome.structure.canonical_form() != state.model.structure.canonical_form();
        record.bic_after = outcome.bic;
        record.search_log = outcome.log.iter().map(|s| s.to_string()).collect();
        record.structure = outcome.structure.describe();
        state.model.structure = outcome.structure;
        state.model.params = outcome.params;
    }
    crate::tree::validate(&state.model.structure, &state.model.params)?;
    let timing = RoundTiming {
        sgd_seconds,
        search_seconds: search_started.elapsed().as_secs_f64(),
    };

    let plateau = state
        .history
        .rounds
        .last()
        .is_some_and(|prev| record.mean_elbo - prev.mean_elbo < config.elbo_tol && !record.structure_changed);
    state.round = round;
    state.finished = plateau;
    state.history.rounds.push(record.clone());
    state.history.timings.push(timing);
    Ok(record)
}

/// Runs rounds until the stopping rule fires, starting from `state` (or
/// from pretraining), saving a checkpoint after every round when
/// `checkpoint` is given.
pub fn train_from(
    data: ArrayView2<f64>,
    config: &TrainConfig,
    state: Option<TrainState>,
    checkpoint: Option<&Path>,
    mut on_round: impl FnMut(&TrainState, &RoundRecord),
) -> Result<TrainState> {
    let mut state = match state {
        Some(s) => s,
        None => {
            let s = initial_state(data, config)?;
            if let Some(path) = checkpoint {
                s.save_checkpoint(path)?;
            }
            s
        }
    };
    if state.model.vae.x_dim() != data.ncols() {
        return Err(Error::DimensionMismatch {
            expected: state.model.vae.x_dim(),
            got: data.ncols(),
        });
    }
    while !state.finished && state.round < config.max_rounds {
        let record = run_round(&mut state, data, config)?;
        if let Some(path) = checkpoint {
            state.save_checkpoint(path)?;
        }
        on_round(&state, &record);
    }
    Ok(state)
}

pub fn train(data: ArrayView2<f64>, config: &TrainConfig) -> Result<TrainState> {
    train_from(data, config, None, None, |_, _| {})
}
