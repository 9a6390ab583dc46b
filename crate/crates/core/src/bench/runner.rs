use std::path::Path;
use std::time::Instant;

use super::config::{DatasetSource, ExperimentConfig, Method};
use super::dataset::{load_csv, synth_dataset, Dataset, Split};
use super::metrics::MetricsRecord;
use crate::adapt::{
    anchored_pair, naive_failure_probe, online_step, pair_distances, ttt_episode_naive, ttt_episode_offline,
    AnchorState, NaiveProbeReport, OnlineState, TttConfig, TttMode,
};
use crate::baselines::{actmad_episode, collect_stats, ActivationStats};
use crate::diff::{ParamSnapshot, Tensor};
use crate::dualnet::{DualInputModel, ModelSpec, PredictionPair};
use crate::error::{Error, Result};
use crate::ood::{corrupt_dataset, make_levels, stack_items, stream, CorruptionSpec, StreamSchedule};
use crate::rng::derive_seed;
use crate::training::{fit, task_error, TrainReport};

/// Everything a seed's cells share: the split, the fitted model and its
/// frozen copy, and the corruption levels.
#[derive(Clone, Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub split: Split,
    pub model: DualInputModel,
    pub anchor: AnchorState,
    pub train_report: TrainReport,
    pub levels: Vec<CorruptionSpec>,
}

/// Loads or synthesizes the data for `seed` and splits it.
pub fn load_split(cfg: &ExperimentConfig, seed: u64) -> Result<Split> {
    let split_seed = derive_seed(seed, &[1]);
    match &cfg.dataset {
        DatasetSource::Csv { path, label_columns } => load_csv(path, label_columns, split_seed, cfg.train_fraction),
        DatasetSource::Synthetic(spec) => {
            let mut spec = spec.clone();
            spec.seed = derive_seed(spec.seed, &[seed]);
            Split::new(&synth_dataset(&spec)?, split_seed, cfg.train_fraction)
        }
    }
}

pub fn model_spec(cfg: &ExperimentConfig, data: &Dataset) -> ModelSpec {
    ModelSpec {
        input_dim: data.input_dim(),
        label_dim: data.label_dim(),
        hidden: cfg.model.hidden.clone(),
        activation: cfg.model.activation,
        task: cfg.model.task,
        neutral: cfg.model.neutral,
    }
}

/// Builds the seed's context. The model is fitted on the clean train split,
/// or loaded from `weights` when given.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64, weights: Option<&Path>) -> Result<SeedContext> {
    let split = load_split(cfg, seed)?;
    let mut model = DualInputModel::new(model_spec(cfg, &split.train), derive_seed(seed, &[2]))?;
    let train_report = match weights {
        Some(path) => {
            model.load_weights(path)?;
            TrainReport::default()
        }
        None => {
            let mut tc = cfg.train.clone();
            tc.shuffle_seed = derive_seed(seed, &[3, tc.shuffle_seed]);
            fit(&mut model, &split.train, &tc)?
        }
    };
    let levels = make_levels(
        cfg.corruption.family,
        &cfg.corruption.severities,
        derive_seed(seed, &[4]),
    )?;
    Ok(SeedContext {
        seed,
        anchor: AnchorState::frozen(&model),
        split,
        model,
        train_report,
        levels,
    })
}

/// Evaluation data per level: the corrupted test split, or with a stream
/// configured, the stream items of that level in order.
pub fn level_data(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<Vec<Dataset>> {
    match &cfg.stream {
        None => Ok(ctx.levels.iter().map(|l| corrupt_dataset(l, &ctx.split.test)).collect()),
        Some(sc) => {
            let schedule = StreamSchedule {
                levels: ctx.levels.clone(),
                items_per_level: sc.items_per_level,
                interpolate: sc.interpolate,
            };
            let items = stream(&schedule, &ctx.split.test)?;
            items
                .chunks(sc.items_per_level)
                .map(|chunk| {
                    let (x, y) = stack_items(chunk)?;
                    Dataset::new(x, y)
                })
                .collect()
        }
    }
}

/// Consecutive row ranges of size `size`; a trailing single row joins the
/// previous batch.
pub fn batch_ranges(n: usize, size: usize) -> Vec<(usize, usize)> {
    let size = size.max(1);
    let mut out: Vec<(usize, usize)> = (0..n).step_by(size).map(|s| (s, (s + size).min(n))).collect();
    if size > 1 && out.len() > 1 && out.last().is_some_and(|&(s, e)| e - s == 1) {
        let (_, e) = out.pop().unwrap();
        out.last_mut().unwrap().1 = e;
    }
    out
}

/// Per-sample outputs of one (method, level) cell.
#[derive(Clone, Debug)]
pub struct CellOutput {
    pub predictions: Tensor,
    pub idempotence: Vec<f64>,
    pub record: MetricsRecord,
}

enum MethodState {
    Base,
    Actmad(ActivationStats),
    Offline(TttConfig),
    Naive(TttConfig),
    Online(TttConfig, OnlineState),
}

/// Runs one method over the levels of a seed, keeping the model (and the
/// online state) across levels.
pub struct MethodRun<'a> {
    cfg: &'a ExperimentConfig,
    ctx: &'a SeedContext,
    method: Method,
    model: DualInputModel,
    post_fit: ParamSnapshot,
    state: MethodState,
}

fn ttt_for(cfg: &ExperimentConfig, mode: TttMode) -> TttConfig {
    let shared = match (mode, &cfg.online_ttt) {
        (TttMode::Online, Some(o)) => o,
        _ => &cfg.ttt,
    };
    TttConfig { mode, ..shared.clone() }
}

impl<'a> MethodRun<'a> {
    pub fn new(cfg: &'a ExperimentConfig, ctx: &'a SeedContext, method: Method) -> Result<Self> {
        let model = ctx.model.clone();
        let state = match method {
            Method::Base => MethodState::Base,
            Method::ActmadLite => MethodState::Actmad(collect_stats(&model, &ctx.split.train)?),
            Method::It3Offline => MethodState::Offline(ttt_for(cfg, TttMode::Offline)),
            Method::It3Naive => MethodState::Naive(ttt_for(cfg, TttMode::Naive)),
            Method::It3Online => {
                let tc = ttt_for(cfg, TttMode::Online);
                let st = OnlineState::new(&model, &tc)?;
                MethodState::Online(tc, st)
            }
        };
        Ok(Self {
            cfg,
            ctx,
            method,
            post_fit: model.params().snapshot(),
            model,
            state,
        })
    }

    /// One batch: the prediction pair and the forward/backward counts.
    fn batch(&mut self, x: &Tensor) -> Result<(PredictionPair, usize, usize)> {
        let anchor = &self.ctx.anchor;
        match &mut self.state {
            MethodState::Base => Ok((anchored_pair(&self.model, Some(anchor), x)?, 1, 0)),
            MethodState::Actmad(stats) => {
                let (pred, rep) = actmad_episode(&mut self.model, stats, x, &self.cfg.ttt)?;
                // y1 from the frozen model, for the idempotence column only
                let y1 = self
                    .model
                    .infer_with(anchor.params().values(), x, &self.model.aux_from_prediction(&pred))?;
                Ok((PredictionPair { y0: pred, y1 }, rep.forward_passes, rep.backward_passes))
            }
            MethodState::Offline(tc) => {
                let (pair, rep) = ttt_episode_offline(&mut self.model, anchor, x, tc)?;
                Ok((pair, rep.forward_passes, rep.backward_passes))
            }
            MethodState::Naive(tc) => {
                let (pair, rep) = ttt_episode_naive(&mut self.model, x, tc)?;
                Ok((pair, rep.forward_passes, rep.backward_passes))
            }
            MethodState::Online(tc, st) => {
                let (pair, rep) = online_step(&mut self.model, st, x, tc)?;
                Ok((pair, rep.forward_passes, rep.backward_passes))
            }
        }
    }

    fn probe(&self, data: &Dataset) -> Result<Option<NaiveProbeReport>> {
        if self.method != Method::It3Naive {
            return Ok(None);
        }
        let tc = TttConfig {
            steps: self.cfg.naive_probe.steps,
            lr: self.cfg.naive_probe.lr,
            ..ttt_for(self.cfg, TttMode::Naive)
        };
        let seed = derive_seed(self.ctx.seed, &[5]);
        naive_failure_probe(&self.model, &data.features, &data.labels, &tc, seed).map(Some)
    }

    /// Evaluates `data` (one level) batch by batch.
    pub fn run_level(&mut self, level: usize, data: &Dataset) -> Result<CellOutput> {
        let size = self.cfg.batch_size_for(self.method);
        let mut preds: Vec<f64> = Vec::with_capacity(data.labels.len());
        let mut idem = Vec::with_capacity(data.len());
        let (mut fwd, mut bwd, mut episodes) = (0, 0, 0);
        let mut wall = 0.0;
        let resets = !self.method.is_online();
        for (s, e) in batch_ranges(data.len(), size) {
            let x = data.features.select_rows(&(s..e).collect::<Vec<_>>());
            let t0 = Instant::now();
            let (pair, f, b) = self.batch(&x)?;
            wall += t0.elapsed().as_secs_f64() * 1e3;
            if resets && self.model.params().snapshot() != self.post_fit {
                return Err(Error::Contract(format!(
                    "{} left parameters modified after a batch",
                    self.method
                )));
            }
            idem.extend(pair_distances(&pair));
            preds.extend_from_slice(pair.y0.data());
            fwd += f;
            bwd += b;
            episodes += 1;
        }
        let predictions = Tensor::new(data.labels.shape().to_vec(), preds)?;
        let record = MetricsRecord {
            method: self.method.name().to_owned(),
            level,
            seed: self.ctx.seed,
            task_error: task_error(self.model.task(), &predictions, &data.labels),
            mean_idempotence_error: idem.iter().sum::<f64>() / idem.len() as f64,
            episodes,
            forward_passes: fwd,
            backward_passes: bwd,
            wall_time_ms: wall,
            n_samples: data.len(),
            aborted: false,
            error: None,
            probe: self.probe(data)?,
        };
        Ok(CellOutput {
            predictions,
            idempotence: idem,
            record,
        })
    }
}

/// Every (method, level) cell of one prepared seed. A failing cell yields
/// a flagged record and the run continues.
pub fn run_seed(cfg: &ExperimentConfig, ctx: &SeedContext) -> Vec<MetricsRecord> {
    let n_levels = ctx.levels.len();
    let data = match level_data(cfg, ctx) {
        Ok(d) => d,
        Err(e) => return aborted_seed(cfg, ctx.seed, n_levels, &e),
    };
    let mut out = Vec::new();
    for &m in &cfg.methods {
        let mut run = match MethodRun::new(cfg, ctx, m) {
            Ok(r) => r,
            Err(e) => {
                out.extend((0..n_levels).map(|l| MetricsRecord::aborted(m.name(), l, ctx.seed, e.to_string())));
                continue;
            }
        };
        for (level, d) in data.iter().enumerate() {
            match run.run_level(level, d) {
                Ok(cell) => out.push(cell.record),
                Err(e) => {
                    log::warn!("{m} level {level} seed {}: {e}", ctx.seed);
                    out.push(MetricsRecord::aborted(m.name(), level, ctx.seed, e.to_string()));
                }
            }
        }
    }
    out
}

fn aborted_seed(cfg: &ExperimentConfig, seed: u64, n_levels: usize, e: &Error) -> Vec<MetricsRecord> {
    log::warn!("seed {seed}: {e}");
    cfg.methods
        .iter()
        .flat_map(|m| (0..n_levels).map(move |l| MetricsRecord::aborted(m.name(), l, seed, e.to_string())))
        .collect()
}

/// The full grid: for each seed, fit (or load `weights`) and evaluate every
/// method at every level. Config errors are returned; per-seed and per-cell
/// failures become flagged records.
pub fn run_experiment_with(cfg: &ExperimentConfig, weights: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        match prepare_seed(cfg, seed, weights) {
            Ok(ctx) => out.extend(run_seed(cfg, &ctx)),
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => out.extend(aborted_seed(cfg, seed, cfg.corruption.severities.len(), &e)),
        }
    }
    Ok(out)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    run_experiment_with(cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_singleton_merges() {
        assert_eq!(batch_ranges(9, 4), vec![(0, 4), (4, 9)]);
        assert_eq!(batch_ranges(8, 4), vec![(0, 4), (4, 8)]);
        assert_eq!(batch_ranges(3, 1), vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(batch_ranges(1, 8), vec![(0, 1)]);
        assert_eq!(batch_ranges(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
    }
}
