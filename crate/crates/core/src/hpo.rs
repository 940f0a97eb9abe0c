//! Learning-rate / weight-decay search.
//!
//! Trials are proposed by a Sobol sequence for the first `n_sobol`
//! configurations and by a per-dimension Parzen estimator ("TPE-lite") after
//! that, then pruned by synchronous successive halving. The top `k`
//! configurations are re-trained with several seeds, the best mean wins, and
//! the winner's seed models are scored on the test set once.
//!
//! Every trial of a search shares the master seed; only the configuration
//! differs between trials.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::heads::{HeadKind, HeadState};
use crate::numerics::RngStream;
use crate::trainer::{evaluate, mean_sd, Dataset, Run, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum HpoError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("journal line {line}: {msg}")]
    Journal { line: usize, msg: String },
    #[error("Sobol generator supports dimensions 1..={max}, asked for {asked}")]
    SobolDimension { asked: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, HpoError>;

// ---------------------------------------------------------------------------
// Sobol

/// `(s, a, m_1..m_s)` for dimensions 2.. of the Joe-Kuo `new-joe-kuo-6.21201` set.
const JOE_KUO: &[(u32, u32, &[u32])] = &[
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
];

const SOBOL_BITS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Sobol {
    directions: Vec<[u32; SOBOL_BITS]>,
    state: Vec<u32>,
    /// Number of points emitted so far; the all-zero point is never emitted.
    index: u64,
}

impl Sobol {
    pub const MAX_DIM: usize = JOE_KUO.len() + 1;

    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > Self::MAX_DIM {
            return Err(HpoError::SobolDimension {
                asked: dim,
                max: Self::MAX_DIM,
            });
        }
        let mut directions = Vec::with_capacity(dim);
        let mut first = [0u32; SOBOL_BITS];
        for (k, v) in first.iter_mut().enumerate() {
            *v = 1 << (SOBOL_BITS - 1 - k);
        }
        directions.push(first);
        for &(s, a, init) in &JOE_KUO[..dim - 1] {
            let s = s as usize;
            let mut m = vec![0u32; SOBOL_BITS];
            m[..s].copy_from_slice(init);
            for k in s..SOBOL_BITS {
                let mut next = m[k - s] ^ (m[k - s] << s);
                for i in 1..s {
                    if (a >> (s - 1 - i)) & 1 == 1 {
                        next ^= m[k - i] << i;
                    }
                }
                m[k] = next;
            }
            let mut v = [0u32; SOBOL_BITS];
            for k in 0..SOBOL_BITS {
                v[k] = m[k] << (SOBOL_BITS - 1 - k);
            }
            directions.push(v);
        }
        Ok(Self {
            directions,
            state: vec![0; dim],
            index: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.state.len()
    }

    /// Next point in `[0, 1)^dim` by the Gray-code recurrence.
    pub fn next_point(&mut self) -> Vec<f64> {
        let c = (!self.index).trailing_zeros() as usize;
        for (x, v) in self.state.iter_mut().zip(&self.directions) {
            *x ^= v[c.min(SOBOL_BITS - 1)];
        }
        self.index += 1;
        self.state.iter().map(|&x| x as f64 / 2f64.powi(SOBOL_BITS as i32)).collect()
    }
}

// ---------------------------------------------------------------------------
// Search space

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low > 0.0 && low < high && high.is_finite()) {
            return Err(HpoError::Config(format!("range [{low}, {high}] must satisfy 0 < low < high")));
        }
        Ok(Self { low, high })
    }

    fn log_bounds(&self) -> (f64, f64) {
        (self.low.ln(), self.high.ln())
    }
}

pub fn to_loguniform(u: f64, range: &Range) -> f64 {
    let (lo, hi) = range.log_bounds();
    (lo + u * (hi - lo)).exp().clamp(range.low, range.high)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSpace {
    pub lr: Range,
    pub wd: Range,
}

impl SearchSpace {
    pub fn for_head(kind: HeadKind) -> Self {
        let lr = if kind.is_prototype() {
            Range { low: 2e-3, high: 8e-2 }
        } else {
            Range { low: 1e-4, high: 7e-3 }
        };
        Self {
            lr,
            wd: Range { low: 1e-5, high: 5e-4 },
        }
    }

    fn ranges(&self) -> [Range; 2] {
        [self.lr, self.wd]
    }

    pub fn from_unit(&self, u: &[f64]) -> (f64, f64) {
        (to_loguniform(u[0], &self.lr), to_loguniform(u[1], &self.wd))
    }

    pub fn contains(&self, lr: f64, wd: f64) -> bool {
        (self.lr.low..=self.lr.high).contains(&lr) && (self.wd.low..=self.wd.high).contains(&wd)
    }
}

// ---------------------------------------------------------------------------
// TPE-lite

pub const TPE_MIN_HISTORY: usize = 10;
pub const TPE_GAMMA: f64 = 0.25;
pub const TPE_CANDIDATES: usize = 24;

/// Per-dimension gaussian Parzen mixture in log space, with one extra
/// uniform component over the range so the density never vanishes.
struct Parzen {
    centers: Vec<f64>,
    bandwidth: f64,
    lo: f64,
    hi: f64,
}

impl Parzen {
    fn fit(points: &[f64], lo: f64, hi: f64) -> Self {
        let n = points.len() as f64;
        let (_, sd) = mean_sd(points);
        let floor = 1e-2 * (hi - lo);
        let bandwidth = (1.06 * sd * n.powf(-0.2)).max(floor);
        Self {
            centers: points.to_vec(),
            bandwidth,
            lo,
            hi,
        }
    }

    fn density(&self, x: f64) -> f64 {
        let norm = 1.0 / (self.bandwidth * (2.0 * std::f64::consts::PI).sqrt());
        let kernels: f64 = self
            .centers
            .iter()
            .map(|c| {
                let z = (x - c) / self.bandwidth;
                norm * (-0.5 * z * z).exp()
            })
            .sum();
        (kernels + 1.0 / (self.hi - self.lo)) / (self.centers.len() as f64 + 1.0)
    }

    fn sample(&self, rng: &mut RngStream) -> f64 {
        let c = self.centers[rng.below(self.centers.len())];
        for _ in 0..64 {
            let x = c + self.bandwidth * rng.gaussian();
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        c.clamp(self.lo, self.hi)
    }
}

/// Completed-trial summary the suggester learns from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub lr: f64,
    pub wd: f64,
    pub metric: f64,
}

/// Suggests `(lr, wd)`; `None` when the history is too short, in which case
/// the caller falls back to Sobol. Equal metrics everywhere carry no signal
/// and give a uniform draw in log space.
pub fn tpe_suggest(history: &[Observation], space: &SearchSpace, rng: &mut RngStream) -> Option<(f64, f64)> {
    if history.len() < TPE_MIN_HISTORY {
        return None;
    }
    let first = history[0].metric;
    if history.iter().all(|o| o.metric == first) {
        let u = [rng.uniform(), rng.uniform()];
        return Some(space.from_unit(&u));
    }
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[b].metric.total_cmp(&history[a].metric));
    let n_good = ((history.len() as f64 * TPE_GAMMA).ceil() as usize).max(1);
    let (good, bad) = order.split_at(n_good);

    let models: Vec<(Parzen, Parzen)> = space
        .ranges()
        .iter()
        .enumerate()
        .map(|(dim, r)| {
            let (lo, hi) = r.log_bounds();
            let coord = |i: &usize| {
                let o = &history[*i];
                if dim == 0 {
                    o.lr.ln()
                } else {
                    o.wd.ln()
                }
            };
            let g: Vec<f64> = good.iter().map(coord).collect();
            let b: Vec<f64> = bad.iter().map(coord).collect();
            (Parzen::fit(&g, lo, hi), Parzen::fit(&b, lo, hi))
        })
        .collect();

    let mut best = (f64::NEG_INFINITY, [0.0; 2]);
    for _ in 0..TPE_CANDIDATES {
        let mut x = [0.0; 2];
        let mut score = 0.0;
        for (d, (l, g)) in models.iter().enumerate() {
            x[d] = l.sample(rng);
            score += l.density(x[d]).ln() - g.density(x[d]).ln();
        }
        if score > best.0 {
            best = (score, x);
        }
    }
    let [lr, wd] = best.1;
    Some((
        lr.exp().clamp(space.lr.low, space.lr.high),
        wd.exp().clamp(space.wd.low, space.wd.high),
    ))
}

// ---------------------------------------------------------------------------
// Successive halving

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Sobol,
    Tpe,
}

impl Source {
    fn name(self) -> &'static str {
        match self {
            Source::Sobol => "sobol",
            Source::Tpe => "tpe",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub lr: f64,
    pub wd: f64,
    pub source: Source,
    /// Validation metric at each completed rung.
    pub rung_metrics: Vec<f64>,
    pub pruned: bool,
}

impl TrialRecord {
    pub fn rungs_reached(&self) -> usize {
        self.rung_metrics.len()
    }

    pub fn best_rung_metric(&self) -> Option<f64> {
        self.rung_metrics.last().copied()
    }
}

/// Trains configurations on behalf of the search.
pub trait TrialRunner {
    /// Brings trial `trial` to `epochs` total epochs and returns its
    /// validation metric there. Calls for one trial come with increasing
    /// epoch counts.
    fn run_to(&mut self, trial: usize, lr: f64, wd: f64, epochs: usize) -> Result<f64>;

    /// The trial will not be advanced again.
    fn release(&mut self, _trial: usize) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct HalvingConfig {
    pub n_trials: usize,
    pub n_sobol: usize,
    /// Cumulative epochs at each rung, strictly increasing.
    pub rungs: Vec<usize>,
    /// Survivors per rung are `ceil(alive / keep_divisor)`.
    pub keep_divisor: usize,
    pub master_seed: u64,
}

impl Default for HalvingConfig {
    fn default() -> Self {
        Self {
            n_trials: 50,
            n_sobol: 25,
            rungs: vec![3, 10, 30],
            keep_divisor: 3,
            master_seed: 0,
        }
    }
}

impl HalvingConfig {
    pub fn validate(&self) -> Result<()> {
        let increasing = self.rungs.windows(2).all(|w| w[0] < w[1]);
        if self.n_trials == 0 || self.rungs.is_empty() || !increasing || self.rungs[0] == 0 || self.keep_divisor == 0 {
            return Err(HpoError::Config(format!("{self:?}")));
        }
        if self.n_sobol > self.n_trials {
            return Err(HpoError::Config(format!(
                "{} Sobol trials exceed {} trials",
                self.n_sobol, self.n_trials
            )));
        }
        Ok(())
    }

    /// Upper bound on epochs trained across all trials.
    pub fn epoch_budget(&self) -> usize {
        let mut alive = self.n_trials;
        let mut prev = 0;
        let mut total = 0;
        for &r in &self.rungs {
            total += alive * (r - prev);
            prev = r;
            alive = alive.div_ceil(self.keep_divisor);
        }
        total
    }
}

/// Indices of the survivors among `alive` by descending metric, ties to the
/// lower trial id.
pub fn survivors(alive: &[(usize, f64)], keep_divisor: usize) -> Vec<usize> {
    let mut ranked = alive.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = alive.len().div_ceil(keep_divisor);
    let mut ids: Vec<usize> = ranked[..keep].iter().map(|&(id, _)| id).collect();
    ids.sort_unstable();
    ids
}

/// Runs the full search. The first rung is filled one trial at a time so
/// that the suggester sees every earlier first-rung result; later rungs
/// resume the survivors.
pub fn successive_halving<R: TrialRunner>(
    runner: &mut R,
    space: &SearchSpace,
    cfg: &HalvingConfig,
) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    let mut sobol = Sobol::new(2)?;
    let mut rng = RngStream::new(cfg.master_seed, 10);
    let mut records: Vec<TrialRecord> = Vec::with_capacity(cfg.n_trials);
    for id in 0..cfg.n_trials {
        let history: Vec<Observation> = records
            .iter()
            .map(|r| Observation {
                lr: r.lr,
                wd: r.wd,
                metric: r.rung_metrics[0],
            })
            .collect();
        let suggestion = if id < cfg.n_sobol {
            None
        } else {
            tpe_suggest(&history, space, &mut rng)
        };
        let (lr, wd, source) = match suggestion {
            Some((lr, wd)) => (lr, wd, Source::Tpe),
            None => {
                let (lr, wd) = space.from_unit(&sobol.next_point());
                (lr, wd, Source::Sobol)
            }
        };
        let metric = runner.run_to(id, lr, wd, cfg.rungs[0])?;
        records.push(TrialRecord {
            trial_id: id,
            lr,
            wd,
            source,
            rung_metrics: vec![metric],
            pruned: false,
        });
    }

    let mut alive: Vec<usize> = (0..cfg.n_trials).collect();
    for (rung, &epochs) in cfg.rungs.iter().enumerate().skip(1) {
        let scored: Vec<(usize, f64)> = alive.iter().map(|&id| (id, records[id].rung_metrics[rung - 1])).collect();
        let keep = survivors(&scored, cfg.keep_divisor);
        for &id in &alive {
            if !keep.contains(&id) {
                records[id].pruned = true;
                runner.release(id);
            }
        }
        for &id in &keep {
            let r = &records[id];
            let metric = runner.run_to(id, r.lr, r.wd, epochs)?;
            records[id].rung_metrics.push(metric);
        }
        alive = keep;
    }
    for id in alive {
        runner.release(id);
    }
    Ok(records)
}

/// The `k` best configurations: furthest rung first, then metric there,
/// then trial id.
pub fn top_k(records: &[TrialRecord], k: usize) -> Vec<&TrialRecord> {
    let mut ranked: Vec<&TrialRecord> = records.iter().filter(|r| !r.rung_metrics.is_empty()).collect();
    ranked.sort_by(|a, b| {
        b.rungs_reached()
            .cmp(&a.rungs_reached())
            .then(b.best_rung_metric().unwrap().total_cmp(&a.best_rung_metric().unwrap()))
            .then(a.trial_id.cmp(&b.trial_id))
    });
    ranked.truncate(k);
    ranked
}

// ---------------------------------------------------------------------------
// Selection and the single test evaluation

pub trait Finalizer {
    /// Full-budget training of one configuration with one seed; returns the
    /// final validation metric.
    fn reseed(&mut self, candidate: usize, lr: f64, wd: f64, seed: u64) -> Result<f64>;

    /// Test-set metric of every seed model kept for `candidate`.
    fn test(&mut self, candidate: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReseedRecord {
    pub trial_id: usize,
    pub lr: f64,
    pub wd: f64,
    pub seed: u64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalRecord {
    pub trial_id: usize,
    pub lr: f64,
    pub wd: f64,
    pub val_mean: f64,
    pub val_sd: f64,
    pub test_mean: f64,
    pub test_sd: f64,
    pub test_per_seed: Vec<f64>,
}

pub fn reseed_seeds(master_seed: u64, n: usize) -> Vec<u64> {
    (1..=n as u64).map(|i| master_seed.wrapping_mul(1_000).wrapping_add(i)).collect()
}

/// Re-trains the top `k` with `seeds`, picks the best mean validation metric
/// (ties to the better-ranked candidate) and evaluates that one on test.
pub fn select_and_finalize<F: Finalizer>(
    records: &[TrialRecord],
    k: usize,
    seeds: &[u64],
    fin: &mut F,
) -> Result<(Vec<ReseedRecord>, FinalRecord)> {
    if k == 0 || seeds.is_empty() {
        return Err(HpoError::Config("top-k and seed count must be positive".into()));
    }
    let candidates = top_k(records, k);
    if candidates.is_empty() {
        return Err(HpoError::Config("no completed trials to select from".into()));
    }
    let mut reseeds = Vec::new();
    let mut best: Option<(usize, f64, f64)> = None;
    for (slot, cand) in candidates.iter().enumerate() {
        let vals = seeds
            .iter()
            .map(|&seed| {
                let v = fin.reseed(slot, cand.lr, cand.wd, seed)?;
                reseeds.push(ReseedRecord {
                    trial_id: cand.trial_id,
                    lr: cand.lr,
                    wd: cand.wd,
                    seed,
                    val_metric: v,
                });
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, sd) = mean_sd(&vals);
        if best.is_none_or(|(_, m, _)| mean > m) {
            best = Some((slot, mean, sd));
        }
    }
    let (slot, val_mean, val_sd) = best.expect("at least one candidate");
    let test_per_seed = fin.test(slot)?;
    let (test_mean, test_sd) = mean_sd(&test_per_seed);
    let winner = candidates[slot];
    Ok((
        reseeds,
        FinalRecord {
            trial_id: winner.trial_id,
            lr: winner.lr,
            wd: winner.wd,
            val_mean,
            val_sd,
            test_mean,
            test_sd,
            test_per_seed,
        },
    ))
}

// ---------------------------------------------------------------------------
// Probe-backed runner

/// Runs trials and re-seeds as real probe trainings over shared datasets.
/// The test set is only touched by [`Finalizer::test`].
pub struct ProbeSearch<'a> {
    pub base: TrainConfig,
    train: &'a Dataset,
    val: &'a Dataset,
    test: &'a Dataset,
    runs: BTreeMap<usize, Run>,
    kept: BTreeMap<usize, Vec<HeadState>>,
    pub epochs_trained: usize,
    pub test_evaluations: usize,
}

impl<'a> ProbeSearch<'a> {
    pub fn new(base: TrainConfig, train: &'a Dataset, val: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        train.check_compatible(val, "validation")?;
        train.check_compatible(test, "test")?;
        Ok(Self {
            base,
            train,
            val,
            test,
            runs: BTreeMap::new(),
            kept: BTreeMap::new(),
            epochs_trained: 0,
            test_evaluations: 0,
        })
    }

    /// Seed models kept for a candidate slot after re-seeding.
    pub fn kept_models(&self, candidate: usize) -> &[HeadState] {
        self.kept.get(&candidate).map_or(&[], Vec::as_slice)
    }
}

impl TrialRunner for ProbeSearch<'_> {
    fn run_to(&mut self, trial: usize, lr: f64, wd: f64, epochs: usize) -> Result<f64> {
        let run = match self.runs.entry(trial) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => {
                let cfg = TrainConfig {
                    lr,
                    weight_decay: wd,
                    ..self.base.clone()
                };
                e.insert(Run::new(cfg, self.train)?)
            }
        };
        let before = run.epoch();
        run.advance_to(epochs, self.train, self.val)?;
        self.epochs_trained += run.epoch() - before;
        run.per_epoch_val
            .last()
            .copied()
            .ok_or_else(|| HpoError::Config(format!("trial {trial} trained no epochs")))
    }

    fn release(&mut self, trial: usize) {
        self.runs.remove(&trial);
    }
}

impl Finalizer for ProbeSearch<'_> {
    fn reseed(&mut self, candidate: usize, lr: f64, wd: f64, seed: u64) -> Result<f64> {
        let cfg = TrainConfig {
            lr,
            weight_decay: wd,
            seed,
            ..self.base.clone()
        };
        let mut run = Run::new(cfg.clone(), self.train)?;
        run.advance_to(cfg.epochs, self.train, self.val)?;
        self.epochs_trained += run.epoch();
        let v = run.per_epoch_val.last().copied().unwrap_or(f64::NAN);
        self.kept.entry(candidate).or_default().push(run.head);
        Ok(v)
    }

    fn test(&mut self, candidate: usize) -> Result<Vec<f64>> {
        self.test_evaluations += 1;
        let metric = self.base.metric;
        self.kept_models(candidate)
            .iter()
            .map(|h| Ok(evaluate(h, self.test, metric)?.value))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HpoOutcome {
    pub trials: Vec<TrialRecord>,
    pub reseeds: Vec<ReseedRecord>,
    pub final_record: FinalRecord,
}

/// Search, re-seed and test for one head over one store triple.
pub fn run_hpo(
    base: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    halving: &HalvingConfig,
    k: usize,
    n_seeds: usize,
) -> Result<(HpoOutcome, HeadState)> {
    let space = SearchSpace::for_head(base.head);
    let mut base = base.clone();
    base.seed = halving.master_seed;
    base.epochs = *halving.rungs.last().ok_or_else(|| HpoError::Config("no rungs".into()))?;
    let mut search = ProbeSearch::new(base, train, val, test)?;
    let trials = successive_halving(&mut search, &space, halving)?;
    let seeds = reseed_seeds(halving.master_seed, n_seeds);
    let (reseeds, final_record) = select_and_finalize(&trials, k, &seeds, &mut search)?;
    let winner_slot = top_k(&trials, k)
        .iter()
        .position(|r| r.trial_id == final_record.trial_id)
        .expect("winner is a candidate");
    let head = search.kept_models(winner_slot)[0].clone();
    Ok((
        HpoOutcome {
            trials,
            reseeds,
            final_record,
        },
        head,
    ))
}

// ---------------------------------------------------------------------------
// Journal

pub const JOURNAL_HEADER: &str = "record,trial,source,lr,wd,rung_metrics,pruned,seed,value,sd";

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

/// One `trial` line per trial, one `reseed` line per seed run and a single
/// `final` line carrying the test mean and sd; the per-seed test values are
/// in its `rung_metrics` column.
pub fn render_journal(outcome: &HpoOutcome) -> String {
    let mut out = String::new();
    writeln!(out, "{JOURNAL_HEADER}").unwrap();
    for t in &outcome.trials {
        writeln!(
            out,
            "trial,{},{},{},{},{},{},,,",
            t.trial_id,
            t.source.name(),
            t.lr,
            t.wd,
            join(&t.rung_metrics),
            t.pruned
        )
        .unwrap();
    }
    for r in &outcome.reseeds {
        writeln!(out, "reseed,{},,{},{},,,{},{},", r.trial_id, r.lr, r.wd, r.seed, r.val_metric).unwrap();
    }
    let f = &outcome.final_record;
    writeln!(
        out,
        "final,{},,{},{},{},,,{},{}",
        f.trial_id,
        f.lr,
        f.wd,
        join(&f.test_per_seed),
        f.test_mean,
        f.test_sd
    )
    .unwrap();
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Journal {
    pub trials: Vec<TrialRecord>,
    pub reseeds: Vec<ReseedRecord>,
    /// `(trial, lr, wd, per-seed test, mean, sd)` of each final line.
    pub finals: Vec<(usize, f64, f64, Vec<f64>, f64, f64)>,
}

pub fn parse_journal(text: &str) -> Result<Journal> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == JOURNAL_HEADER => {}
        _ => {
            return Err(HpoError::Journal {
                line: 1,
                msg: "missing header".into(),
            })
        }
    }
    let mut j = Journal::default();
    for (i, line) in lines {
        let line_no = i + 1;
        let err = |msg: String| HpoError::Journal { line: line_no, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(err(format!("expected 10 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let int = |s: &str| s.parse::<u64>().map_err(|e| err(format!("{s:?}: {e}")));
        let list = |s: &str| -> Result<Vec<f64>> {
            if s.is_empty() {
                Ok(Vec::new())
            } else {
                s.split(';').map(num).collect()
            }
        };
        let trial = int(f[1])? as usize;
        match f[0] {
            "trial" => j.trials.push(TrialRecord {
                trial_id: trial,
                source: match f[2] {
                    "sobol" => Source::Sobol,
                    "tpe" => Source::Tpe,
                    other => return Err(err(format!("unknown source {other:?}"))),
                },
                lr: num(f[3])?,
                wd: num(f[4])?,
                rung_metrics: list(f[5])?,
                pruned: f[6].parse().map_err(|_| err(format!("bad pruned flag {:?}", f[6])))?,
            }),
            "reseed" => j.reseeds.push(ReseedRecord {
                trial_id: trial,
                lr: num(f[3])?,
                wd: num(f[4])?,
                seed: int(f[7])?,
                val_metric: num(f[8])?,
            }),
            "final" => j
                .finals
                .push((trial, num(f[3])?, num(f[4])?, list(f[5])?, num(f[8])?, num(f[9])?)),
            other => return Err(err(format!("unknown record type {other:?}"))),
        }
    }
    Ok(j)
}
