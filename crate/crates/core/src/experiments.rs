//! Parameter sweeps producing plot-ready CSV.
//!
//! A sweep runs every (grid value, mechanism pair, seed) job, writes one row
//! per job and then one aggregate row per (grid value, mechanism pair) with
//! the mean and standard deviation over seeds. Column order is fixed by
//! [`SWEEP_COLUMNS`].

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{mechanism_err_bound, Aggregator, BoundValue};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ldp::ClipBound;
use crate::market::{generate_bid_profile, MarketConfig, Scenario};
use crate::murba::{checkpoint_name, evaluate, load_checkpoint, sample_instances, MbrModel};
use crate::sim::{run_fl, synthetic_blobs, Auctioneer, Mechanism, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    /// One auction per seed; reports the error bound and the payment.
    ErrBound,
    /// A federated run per seed on the synthetic blobs; reports the final
    /// accuracy.
    Accuracy,
    /// Regret and IR of a trained MBR on fresh profiles.
    Violations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Budget,
    N,
    M,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Budget => "budget",
            SweepParameter::N => "n",
            SweepParameter::M => "m",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MechanismPair {
    pub mechanism: Mechanism,
    pub aggregator: Aggregator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub parameter: SweepParameter,
    pub grid: Vec<f64>,
    pub seeds: usize,
    pub base_seed: u64,
    pub pairs: Vec<MechanismPair>,
    pub budget: f64,
    pub n: usize,
    pub m: usize,
    pub scenario: Scenario,
    pub clip: f64,
    pub rounds: usize,
    pub learning_rate: f64,
    pub rows_per_owner: usize,
    pub profiles: usize,
    pub budget_range: (f64, f64),
    pub misreport_rounds: usize,
    pub misreport_step: f64,
    pub checkpoint_dir: Option<PathBuf>,
    pub execution: Execution,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            kind: SweepKind::ErrBound,
            parameter: SweepParameter::Budget,
            grid: vec![5.0, 10.0, 20.0, 40.0],
            seeds: 10,
            base_seed: 0,
            pairs: vec![MechanismPair {
                mechanism: Mechanism::AllIn,
                aggregator: Aggregator::VarOpt,
            }],
            budget: 10.0,
            n: 10,
            m: 20,
            scenario: Scenario::Low,
            clip: 1.0,
            rounds: 10,
            learning_rate: 0.01,
            rows_per_owner: 100,
            profiles: 1000,
            budget_range: (1.0, 20.0),
            misreport_rounds: 25,
            misreport_step: 0.1,
            checkpoint_dir: None,
            execution: Execution::Parallel,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.pairs.is_empty() || self.seeds == 0 {
            return Err(Error::Config("sweep needs a grid, a mechanism pair and at least one seed".into()));
        }
        for &v in &self.grid {
            let ok = match self.parameter {
                SweepParameter::Budget => v > 0.0 && v.is_finite(),
                SweepParameter::N | SweepParameter::M => v >= 1.0 && v.fract() == 0.0,
            };
            if !ok {
                return Err(Error::Config(format!("invalid {} grid value {v}", self.parameter.name())));
            }
        }
        if self.kind == SweepKind::Violations && self.pairs.iter().any(|p| p.mechanism != Mechanism::Murba) {
            return Err(Error::Config("violation sweeps only apply to murba".into()));
        }
        ClipBound::new(self.clip)?;
        Ok(())
    }

    /// `(budget, n, m)` at grid value `v`.
    fn point(&self, v: f64) -> (f64, usize, usize) {
        match self.parameter {
            SweepParameter::Budget => (v, self.n, self.m),
            SweepParameter::N => (self.budget, v as usize, self.m),
            SweepParameter::M => (self.budget, self.n, v as usize),
        }
    }

    /// Every `(n, M)` a MURBA pair in this sweep will need a model for.
    pub fn required_models(&self) -> Vec<(usize, usize)> {
        if !self.pairs.iter().any(|p| p.mechanism == Mechanism::Murba) {
            return Vec::new();
        }
        let mut need: Vec<(usize, usize)> = self.grid.iter().map(|&v| {
            let (_, n, m) = self.point(v);
            (n, m)
        })
        .collect();
        need.sort_unstable();
        need.dedup();
        need
    }
}

/// Trained models keyed by `(n, M)`.
#[derive(Debug, Clone, Default)]
pub struct ModelStore {
    models: BTreeMap<(usize, usize), MbrModel>,
}

impl ModelStore {
    pub fn insert(&mut self, model: MbrModel) {
        self.models.insert((model.n(), model.m()), model);
    }

    pub fn get(&self, n: usize, m: usize) -> Option<&MbrModel> {
        self.models.get(&(n, m))
    }

    /// Loads every checkpoint `spec` needs from `dir`, failing on the first
    /// missing file.
    pub fn load_for(spec: &SweepSpec, dir: &Path) -> Result<Self> {
        let mut store = Self::default();
        for (n, m) in spec.required_models() {
            let path = dir.join(checkpoint_name(n, m));
            if !path.exists() {
                return Err(Error::Io(format!("missing checkpoint {}", path.display())));
            }
            store.insert(load_checkpoint(&path)?.0);
        }
        Ok(store)
    }
}

/// Metrics of one job; `None` where the sweep kind does not produce it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Metrics {
    pub err_bound: Option<f64>,
    pub accuracy: Option<f64>,
    pub total_payment: Option<f64>,
    pub regret_mean: Option<f64>,
    pub regret_max: Option<f64>,
    pub ir_mean: Option<f64>,
    pub ir_max: Option<f64>,
}

impl Metrics {
    fn fields(&self) -> [Option<f64>; 7] {
        [
            self.err_bound,
            self.accuracy,
            self.total_payment,
            self.regret_mean,
            self.regret_max,
            self.ir_mean,
            self.ir_max,
        ]
    }

    fn from_fields(f: [Option<f64>; 7]) -> Self {
        Self {
            err_bound: f[0],
            accuracy: f[1],
            total_payment: f[2],
            regret_mean: f[3],
            regret_max: f[4],
            ir_mean: f[5],
            ir_max: f[6],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub pair: MechanismPair,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub value: f64,
    pub pair: MechanismPair,
    pub count: usize,
    pub mean: Metrics,
    pub std: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub parameter: SweepParameter,
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<AggregateRow>,
}

/// Mean and sample standard deviation. Any infinite sample makes both
/// infinite.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if xs.iter().any(|x| x.is_infinite()) {
        return (f64::INFINITY, f64::INFINITY);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_job(spec: &SweepSpec, models: &ModelStore, value: f64, pair: MechanismPair, seed: u64) -> Result<Metrics> {
    let (budget, n, m) = spec.point(value);
    let clip = ClipBound::new(spec.clip)?;
    let market = MarketConfig::for_scenario(n, budget, spec.scenario, seed);
    let model = match pair.mechanism {
        Mechanism::Murba => Some(models.get(n, m).ok_or_else(|| {
            Error::Config(format!("no MBR model loaded for n={n}, M={m} ({})", checkpoint_name(n, m)))
        })?),
        Mechanism::AllIn => None,
    };
    match spec.kind {
        SweepKind::ErrBound => {
            let profile = generate_bid_profile(&market, &mut market.rng())?;
            let auctioneer = match model {
                Some(mdl) => Auctioneer::Murba(mdl),
                None => Auctioneer::AllIn,
            };
            let outcome = auctioneer.run(&profile, budget)?;
            Ok(Metrics {
                err_bound: Some(mechanism_err_bound(pair.aggregator, &outcome.epsilons, clip).to_f64()),
                total_payment: Some(outcome.total_payment()),
                ..Metrics::default()
            })
        }
        SweepKind::Accuracy => {
            let data = synthetic_blobs(n, spec.rows_per_owner, seed)?;
            let cfg = SimConfig {
                rounds: spec.rounds,
                learning_rate: spec.learning_rate,
                clip: spec.clip,
                mechanism: pair.mechanism,
                aggregator: pair.aggregator,
                market,
                seed,
                noiseless: false,
                mbr_checkpoint: None,
            };
            let report = run_fl(&cfg, &data, model.map(|m| m as _))?;
            let last = report.rounds.last().map_or(BoundValue::Infinite, |r| r.err_bound);
            Ok(Metrics {
                err_bound: Some(last.to_f64()),
                accuracy: Some(report.final_accuracy()),
                total_payment: Some(report.rounds.iter().map(|r| r.total_payment).sum()),
                ..Metrics::default()
            })
        }
        SweepKind::Violations => {
            let model = model.expect("validated murba pair");
            let mut rng = market.rng();
            let batch = sample_instances(&market, spec.budget_range, spec.profiles, &mut rng)?;
            // The outer sweep already fans out over jobs.
            let rep = evaluate(model, &batch, spec.misreport_rounds, spec.misreport_step, clip, Execution::Sequential)?;
            Ok(Metrics {
                err_bound: Some(rep.err_hat),
                regret_mean: Some(rep.summary.regret_mean),
                regret_max: Some(rep.summary.regret_max),
                ir_mean: Some(rep.summary.ir_mean),
                ir_max: Some(rep.summary.ir_max),
                ..Metrics::default()
            })
        }
    }
}

pub fn run_sweep(spec: &SweepSpec, models: &ModelStore) -> Result<SweepResult> {
    spec.validate()?;
    for (n, m) in spec.required_models() {
        if models.get(n, m).is_none() {
            return Err(Error::Config(format!("missing MBR model {}", checkpoint_name(n, m))));
        }
    }
    let mut jobs = Vec::new();
    for &value in &spec.grid {
        for &pair in &spec.pairs {
            for k in 0..spec.seeds {
                jobs.push((value, pair, spec.base_seed + k as u64));
            }
        }
    }
    let rows = spec
        .execution
        .map(&jobs, |&(value, pair, seed)| {
            run_job(spec, models, value, pair, seed).map(|metrics| SweepRow {
                value,
                pair,
                seed,
                metrics,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let aggregates = rows
        .chunks(spec.seeds)
        .map(|group| {
            let cols: Vec<[Option<f64>; 7]> = group.iter().map(|r| r.metrics.fields()).collect();
            let mut mean = [None; 7];
            let mut std = [None; 7];
            for c in 0..7 {
                let xs: Option<Vec<f64>> = cols.iter().map(|f| f[c]).collect();
                if let Some(xs) = xs {
                    let (m, s) = mean_std(&xs);
                    mean[c] = Some(m);
                    std[c] = Some(s);
                }
            }
            AggregateRow {
                value: group[0].value,
                pair: group[0].pair,
                count: group.len(),
                mean: Metrics::from_fields(mean),
                std: Metrics::from_fields(std),
            }
        })
        .collect();
    Ok(SweepResult {
        parameter: spec.parameter,
        rows,
        aggregates,
    })
}

/// Column order of sweep CSVs.
pub const SWEEP_COLUMNS: [&str; 20] = [
    "row_type",
    "parameter",
    "value",
    "mechanism",
    "aggregator",
    "seed",
    "err_bound",
    "accuracy",
    "total_payment",
    "regret_mean",
    "regret_max",
    "ir_mean",
    "ir_max",
    "err_bound_std",
    "accuracy_std",
    "total_payment_std",
    "regret_mean_std",
    "regret_max_std",
    "ir_mean_std",
    "ir_max_std",
];

pub(crate) fn fmt_value(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => x.to_string(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Data rows first, then the aggregate rows.
pub fn write_sweep_csv<W: Write>(w: W, result: &SweepResult) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SWEEP_COLUMNS).map_err(csv_err)?;
    let param = result.parameter.name();
    for r in &result.rows {
        let mut rec = vec![
            "data".to_string(),
            param.to_string(),
            r.value.to_string(),
            r.pair.mechanism.to_string(),
            r.pair.aggregator.to_string(),
            r.seed.to_string(),
        ];
        rec.extend(r.metrics.fields().iter().map(|v| fmt_value(*v)));
        rec.extend(std::iter::repeat_n(String::new(), 7));
        out.write_record(&rec).map_err(csv_err)?;
    }
    for a in &result.aggregates {
        let mut rec = vec![
            "aggregate".to_string(),
            param.to_string(),
            a.value.to_string(),
            a.pair.mechanism.to_string(),
            a.pair.aggregator.to_string(),
            String::new(),
        ];
        rec.extend(a.mean.fields().iter().map(|v| fmt_value(*v)));
        rec.extend(a.std.fields().iter().map(|v| fmt_value(*v)));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mean_std_examples() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_relative_eq!(m, 2.0);
        assert_relative_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
        assert_eq!(mean_std(&[1.0, f64::INFINITY]), (f64::INFINITY, f64::INFINITY));
    }

    #[test]
    fn budget_sweep_row_counts() {
        let spec = SweepSpec {
            seeds: 10,
            ..SweepSpec::default()
        };
        let res = run_sweep(&spec, &ModelStore::default()).unwrap();
        assert_eq!(res.rows.len(), 40);
        assert_eq!(res.aggregates.len(), 4);
        assert!(res.aggregates.iter().all(|a| a.count == 10));

        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &res).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 40 + 4);
        assert_eq!(lines[0], SWEEP_COLUMNS.join(","));
        assert!(lines[41].starts_with("aggregate,budget,5,allin,varopt,,"));
    }

    #[test]
    fn aggregate_matches_rows() {
        let spec = SweepSpec {
            seeds: 5,
            grid: vec![20.0],
            ..SweepSpec::default()
        };
        let res = run_sweep(&spec, &ModelStore::default()).unwrap();
        let pays: Vec<f64> = res.rows.iter().map(|r| r.metrics.total_payment.unwrap()).collect();
        let (m, s) = mean_std(&pays);
        assert_eq!(res.aggregates[0].mean.total_payment, Some(m));
        assert_eq!(res.aggregates[0].std.total_payment, Some(s));
        assert_eq!(res.aggregates[0].mean.accuracy, None);
    }

    #[test]
    fn sequential_and_parallel_sweeps_agree() {
        let spec = SweepSpec {
            seeds: 3,
            ..SweepSpec::default()
        };
        let a = run_sweep(&SweepSpec { execution: Execution::Sequential, ..spec.clone() }, &ModelStore::default()).unwrap();
        let b = run_sweep(&spec, &ModelStore::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn murba_needs_per_m_checkpoints() {
        let spec = SweepSpec {
            parameter: SweepParameter::M,
            grid: vec![5.0, 10.0],
            n: 5,
            pairs: vec![MechanismPair {
                mechanism: Mechanism::Murba,
                aggregator: Aggregator::VarOpt,
            }],
            ..SweepSpec::default()
        };
        assert_eq!(spec.required_models(), vec![(5, 5), (5, 10)]);
        let dir = tempfile::tempdir().unwrap();
        let err = ModelStore::load_for(&spec, dir.path()).unwrap_err();
        assert!(err.to_string().contains("mbr_n5_m5.mbr"), "{err}");
        assert!(run_sweep(&spec, &ModelStore::default()).is_err());
    }

    #[test]
    fn violation_sweep_rejects_allin() {
        let spec = SweepSpec {
            kind: SweepKind::Violations,
            ..SweepSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
