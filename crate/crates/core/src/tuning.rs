//! Hyperband hyperparameter search over the fusion-model space.
//!
//! Successive halving with reduction factor eta inside brackets: bracket
//! `s` starts `ceil((s_max+1)/(s+1) * eta^s)` sampled configurations at
//! `max_resource / eta^s` epochs and keeps the top `1/eta` by validation
//! loss at each rung. The class-weighted loss and the patience-3 early
//! stop run inside every trial; validation loss is the only objective.

use crate::fusion::{
    build_model, train, FusionError, FusionHyperparams, SegmentSet, TrainOptions,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("search space has an empty axis")]
    EmptySpace,
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed trial log {path} line {line}")]
    MalformedLog { path: PathBuf, line: usize },
}

/// Hyperband settings. Defaults: 27-epoch maximum per trial, eta 3, two
/// full iterations of the algorithm, patience 3 inside trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HyperbandConfig {
    pub max_resource: u32,
    pub eta: u32,
    pub iterations: u32,
    pub patience: u32,
}

impl Default for HyperbandConfig {
    fn default() -> Self {
        HyperbandConfig { max_resource: 27, eta: 3, iterations: 2, patience: 3 }
    }
}

impl HyperbandConfig {
    pub fn validate(&self) -> Result<(), TuneError> {
        if self.eta < 2 || self.max_resource < self.eta || self.iterations == 0 {
            return Err(TuneError::EmptySpace);
        }
        Ok(())
    }

    /// Total-epoch budget bound per bracket: `(s_max + 1) * max_resource`.
    pub fn bracket_budget(&self) -> u64 {
        let s_max = (self.max_resource as f64).log(self.eta as f64).floor() as u64;
        (s_max + 1) * self.max_resource as u64
    }
}

/// One rung: how many configurations run and for how many epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rung {
    pub n_configs: u32,
    pub epochs: u32,
}

/// One bracket: rung 0 holds the starting allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bracket {
    pub s: u32,
    pub rungs: Vec<Rung>,
}

impl Bracket {
    pub fn start(&self) -> Rung {
        self.rungs[0]
    }
}

/// The bracket/rung plan for a configuration.
pub fn hyperband_schedule(cfg: &HyperbandConfig) -> Vec<Bracket> {
    let eta = cfg.eta as f64;
    let s_max = (cfg.max_resource as f64).log(eta).floor() as u32;
    (0..=s_max)
        .rev()
        .map(|s| {
            let n = (((s_max + 1) as f64 / (s + 1) as f64) * eta.powi(s as i32)).ceil() as u32;
            let r = cfg.max_resource / cfg.eta.pow(s);
            let rungs = (0..=s)
                .map(|i| Rung { n_configs: n / cfg.eta.pow(i), epochs: r * cfg.eta.pow(i) })
                .collect();
            Bracket { s, rungs }
        })
        .collect()
}

/// The discrete hyperparameter domain; axes hold the candidate options and
/// `base` carries everything that is not searched.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchSpace {
    pub bilstm1_units: Vec<usize>,
    pub dropout1: Vec<f64>,
    pub bilstm2_units: Vec<usize>,
    pub dropout2: Vec<f64>,
    pub bilstm3_units: Vec<usize>,
    pub dropout3: Vec<f64>,
    pub n_dense: Vec<usize>,
    pub base: FusionHyperparams,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            bilstm1_units: vec![512, 256],
            dropout1: vec![0.1, 0.3, 0.5],
            bilstm2_units: vec![128, 256],
            dropout2: vec![0.1, 0.3, 0.5],
            bilstm3_units: vec![64, 128],
            dropout3: vec![0.1, 0.3, 0.5],
            n_dense: vec![4, 5, 6],
            base: FusionHyperparams::default(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), TuneError> {
        let empty = self.bilstm1_units.is_empty()
            || self.dropout1.is_empty()
            || self.bilstm2_units.is_empty()
            || self.dropout2.is_empty()
            || self.bilstm3_units.is_empty()
            || self.dropout3.is_empty()
            || self.n_dense.is_empty();
        if empty {
            return Err(TuneError::EmptySpace);
        }
        Ok(())
    }

    /// Number of points in the product space.
    pub fn size(&self) -> usize {
        self.bilstm1_units.len()
            * self.dropout1.len()
            * self.bilstm2_units.len()
            * self.dropout2.len()
            * self.bilstm3_units.len()
            * self.dropout3.len()
            * self.n_dense.len()
    }

    /// Uniform draw: each axis sampled independently.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> FusionHyperparams {
        let pick_usize = |v: &Vec<usize>, rng: &mut ChaCha8Rng| v[rng.gen_range(0..v.len())];
        let pick_f64 = |v: &Vec<f64>, rng: &mut ChaCha8Rng| v[rng.gen_range(0..v.len())];
        FusionHyperparams {
            bilstm1_units: pick_usize(&self.bilstm1_units, rng),
            dropout1: pick_f64(&self.dropout1, rng),
            bilstm2_units: pick_usize(&self.bilstm2_units, rng),
            dropout2: pick_f64(&self.dropout2, rng),
            bilstm3_units: pick_usize(&self.bilstm3_units, rng),
            dropout3: pick_f64(&self.dropout3, rng),
            n_dense: pick_usize(&self.n_dense, rng),
            ..self.base.clone()
        }
    }
}

/// Result of one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub val_loss: f64,
    pub epochs_run: u32,
}

/// Trains one configuration for at most `max_epochs` and reports its best
/// validation loss. Implementations must be deterministic in `trial_seed`.
pub trait TrialRunner: Sync {
    fn run(
        &self,
        h: &FusionHyperparams,
        max_epochs: u32,
        trial_seed: u64,
    ) -> Result<TrialOutcome, TuneError>;
}

/// The production runner: fresh model per trial, class-weighted training
/// with early stopping, validation loss as the objective.
pub struct FusionTrialRunner<'a> {
    train_set: &'a SegmentSet,
    val_set: &'a SegmentSet,
    weights: (f64, f64),
    patience: u32,
}

impl<'a> FusionTrialRunner<'a> {
    pub fn new(
        train_set: &'a SegmentSet,
        val_set: &'a SegmentSet,
        weights: (f64, f64),
        patience: u32,
    ) -> Result<Self, TuneError> {
        let shared: Vec<u32> = train_set
            .interview_ids()
            .intersection(&val_set.interview_ids())
            .copied()
            .collect();
        if !shared.is_empty() {
            return Err(FusionError::LeakageDetected(shared).into());
        }
        Ok(FusionTrialRunner { train_set, val_set, weights, patience })
    }
}

impl TrialRunner for FusionTrialRunner<'_> {
    fn run(
        &self,
        h: &FusionHyperparams,
        max_epochs: u32,
        trial_seed: u64,
    ) -> Result<TrialOutcome, TuneError> {
        let t_frames = self.train_set.t_frames().ok_or(FusionError::EmptyTrainingSet)?;
        let mut model = build_model(h, t_frames, trial_seed)?;
        let mut opts = TrainOptions::from_hyperparams(h, max_epochs as usize, trial_seed);
        opts.patience = self.patience as usize;
        let history = train(&mut model, self.train_set, self.val_set, self.weights, &opts)?;
        Ok(TrialOutcome {
            val_loss: history.best_val_loss(),
            epochs_run: history.epochs_run() as u32,
        })
    }
}

/// One row of the trial log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub iteration: u32,
    pub bracket: u32,
    pub rung: u32,
    pub trial_index: usize,
    pub config_hash: String,
    pub epochs: u32,
    pub val_loss: f64,
    pub config: FusionHyperparams,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub best: FusionHyperparams,
    pub best_val_loss: f64,
    pub records: Vec<TrialRecord>,
}

fn trial_seed(seed: u64, iteration: u32, bracket: u32, trial_index: usize) -> u64 {
    seed ^ ((iteration as u64) << 48)
        ^ ((bracket as u64) << 40)
        ^ (trial_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs `cfg.iterations` full Hyperband passes and returns the
/// configuration with the globally minimal validation loss plus the
/// complete trial log. Rung survivors are picked by validation loss with
/// ties broken by earlier trial index.
pub fn hyperband_search(
    space: &SearchSpace,
    runner: &dyn TrialRunner,
    cfg: &HyperbandConfig,
    seed: u64,
) -> Result<SearchOutcome, TuneError> {
    space.validate()?;
    cfg.validate()?;
    let schedule = hyperband_schedule(cfg);
    let mut records: Vec<TrialRecord> = Vec::new();
    let mut best: Option<(f64, FusionHyperparams)> = None;
    let mut next_trial_index = 0usize;

    for iteration in 0..cfg.iterations {
        for bracket in &schedule {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ ((iteration as u64) << 32) ^ bracket.s as u64,
            );
            let mut candidates: Vec<(usize, FusionHyperparams)> = (0..bracket.start().n_configs)
                .map(|_| {
                    let idx = next_trial_index;
                    next_trial_index += 1;
                    (idx, space.sample(&mut rng))
                })
                .collect();

            for (rung_pos, rung) in bracket.rungs.iter().enumerate() {
                candidates.truncate(rung.n_configs as usize);
                if candidates.is_empty() {
                    break;
                }
                let outcomes: Vec<(usize, FusionHyperparams, TrialOutcome)> = candidates
                    .par_iter()
                    .map(|(idx, h)| {
                        let out =
                            runner.run(h, rung.epochs, trial_seed(seed, iteration, bracket.s, *idx))?;
                        Ok((*idx, h.clone(), out))
                    })
                    .collect::<Result<_, TuneError>>()?;

                for (idx, h, out) in &outcomes {
                    records.push(TrialRecord {
                        iteration,
                        bracket: bracket.s,
                        rung: rung_pos as u32,
                        trial_index: *idx,
                        config_hash: h.config_hash(),
                        epochs: out.epochs_run.min(rung.epochs),
                        val_loss: out.val_loss,
                        config: h.clone(),
                    });
                    match &best {
                        Some((loss, _)) if *loss <= out.val_loss => {}
                        _ => best = Some((out.val_loss, h.clone())),
                    }
                }

                let mut ranked = outcomes;
                ranked.sort_by(|a, b| {
                    a.2.val_loss.total_cmp(&b.2.val_loss).then(a.0.cmp(&b.0))
                });
                candidates = ranked.into_iter().map(|(idx, h, _)| (idx, h)).collect();
            }
        }
    }
    let (best_val_loss, best) = best.ok_or(TuneError::EmptySpace)?;
    Ok(SearchOutcome { best, best_val_loss, records })
}

/// Writes the delimited trial log:
/// `iteration,bracket,rung,trial,config_hash,epochs,val_loss`.
pub fn write_trial_log(path: &Path, records: &[TrialRecord]) -> Result<(), TuneError> {
    let mut text = String::from("iteration,bracket,rung,trial,config_hash,epochs,val_loss\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{},{:.6}\n",
            r.iteration, r.bracket, r.rung, r.trial_index, r.config_hash, r.epochs, r.val_loss
        ));
    }
    std::fs::write(path, text).map_err(|source| TuneError::Io { path: path.to_path_buf(), source })
}

/// Reads back the numeric columns of a trial log (config payloads are not
/// stored in the log).
pub fn read_trial_log(path: &Path) -> Result<Vec<(u32, u32, u32, usize, String, u32, f64)>, TuneError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| TuneError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || TuneError::MalformedLog { path: path.to_path_buf(), line: i + 1 };
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(bad());
        }
        out.push((
            parts[0].parse().map_err(|_| bad())?,
            parts[1].parse().map_err(|_| bad())?,
            parts[2].parse().map_err(|_| bad())?,
            parts[3].parse().map_err(|_| bad())?,
            parts[4].to_string(),
            parts[5].parse().map_err(|_| bad())?,
            parts[6].parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

/// Sums epochs charged to one bracket of one iteration from the log.
pub fn bracket_epochs(records: &[TrialRecord], iteration: u32, bracket: u32) -> u64 {
    records
        .iter()
        .filter(|r| r.iteration == iteration && r.bracket == bracket)
        .map(|r| r.epochs as u64)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    #[test]
    fn schedule_for_27_and_eta_3() {
        let cfg = HyperbandConfig::default();
        let brackets = hyperband_schedule(&cfg);
        let starts: Vec<(u32, u32)> =
            brackets.iter().map(|b| (b.start().n_configs, b.start().epochs)).collect();
        assert_eq!(starts, vec![(27, 1), (12, 3), (6, 9), (4, 27)]);

        // Survivor counts inside the widest bracket: 27 -> 9 -> 3 -> 1.
        let survivors: Vec<u32> = brackets[0].rungs.iter().map(|r| r.n_configs).collect();
        assert_eq!(survivors, vec![27, 9, 3, 1]);
        let epochs: Vec<u32> = brackets[0].rungs.iter().map(|r| r.epochs).collect();
        assert_eq!(epochs, vec![1, 3, 9, 27]);
    }

    #[test]
    fn schedule_for_tiny_resource() {
        let cfg = HyperbandConfig { max_resource: 3, eta: 3, ..Default::default() };
        let brackets = hyperband_schedule(&cfg);
        let starts: Vec<(u32, u32)> =
            brackets.iter().map(|b| (b.start().n_configs, b.start().epochs)).collect();
        assert_eq!(starts, vec![(3, 1), (2, 3)]);
    }

    #[test]
    fn full_space_has_648_configurations() {
        assert_eq!(SearchSpace::default().size(), 648);
    }

    /// Deterministic fake runner: loss is a smooth function of the config,
    /// so search outcomes are exactly reproducible.
    struct FakeRunner {
        calls: Mutex<u64>,
    }

    impl TrialRunner for FakeRunner {
        fn run(
            &self,
            h: &FusionHyperparams,
            max_epochs: u32,
            _trial_seed: u64,
        ) -> Result<TrialOutcome, TuneError> {
            *self.calls.lock().unwrap() += 1;
            let loss = h.dropout1 + 0.01 * h.n_dense as f64
                + 1.0 / (h.bilstm1_units as f64)
                + 0.3 / (max_epochs as f64);
            Ok(TrialOutcome { val_loss: loss, epochs_run: max_epochs })
        }
    }

    #[test]
    fn single_point_space_returns_it() {
        let space = SearchSpace {
            bilstm1_units: vec![8],
            dropout1: vec![0.1],
            bilstm2_units: vec![8],
            dropout2: vec![0.1],
            bilstm3_units: vec![8],
            dropout3: vec![0.1],
            n_dense: vec![4],
            base: FusionHyperparams::default(),
        };
        let cfg = HyperbandConfig { max_resource: 3, eta: 3, iterations: 1, patience: 3 };
        let runner = FakeRunner { calls: Mutex::new(0) };
        let out = hyperband_search(&space, &runner, &cfg, 7).unwrap();
        assert_eq!(out.best.bilstm1_units, 8);
        assert_eq!(out.best.n_dense, 4);
    }

    #[test]
    fn search_is_deterministic_and_within_budget() {
        let space = SearchSpace::default();
        let cfg = HyperbandConfig::default();
        let runner = FakeRunner { calls: Mutex::new(0) };
        let a = hyperband_search(&space, &runner, &cfg, 99).unwrap();
        let b = hyperband_search(&space, &runner, &cfg, 99).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.config_hash, y.config_hash);
            assert_eq!(x.val_loss, y.val_loss);
        }

        // Budget bound per (iteration, bracket).
        let budget = cfg.bracket_budget();
        for iteration in 0..cfg.iterations {
            for bracket in hyperband_schedule(&cfg) {
                let used = bracket_epochs(&a.records, iteration, bracket.s);
                assert!(
                    used <= budget,
                    "bracket {} used {used} epochs over budget {budget}",
                    bracket.s
                );
            }
        }
    }

    #[test]
    fn empty_axis_is_rejected() {
        let space = SearchSpace { n_dense: vec![], ..SearchSpace::default() };
        let runner = FakeRunner { calls: Mutex::new(0) };
        assert!(matches!(
            hyperband_search(&space, &runner, &HyperbandConfig::default(), 1),
            Err(TuneError::EmptySpace)
        ));
    }

    #[test]
    fn trial_log_round_trips() {
        let records = vec![TrialRecord {
            iteration: 0,
            bracket: 3,
            rung: 1,
            trial_index: 5,
            config_hash: "abcd1234".into(),
            epochs: 3,
            val_loss: 0.512345,
            config: FusionHyperparams::default(),
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.csv");
        write_trial_log(&path, &records).unwrap();
        let rows = read_trial_log(&path).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, 0);
        assert_eq!(rows[0].1, 3);
        assert_eq!(rows[0].4, "abcd1234");
        assert!((rows[0].6 - 0.512345).abs() < 1e-9);
    }
}
