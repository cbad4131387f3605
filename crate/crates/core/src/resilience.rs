//! Resilience profiling and per-chip retraining budget selection.
//!
//! [`profile`] runs a grid of fault-injection experiments: for every fault
//! rate and repeat a fresh fault map is drawn, the pre-trained network is
//! pruned with the induced masks and retrained until it reaches the accuracy
//! target (or runs out of epochs). The number of epochs each cell needed is
//! summarised per rate as min / mean / max.
//!
//! [`select_budget`] reads that table back for a concrete chip. The chosen
//! statistic is made monotone in the fault rate with a running maximum,
//! linearly interpolated between profiled rates and rounded up. Chips outside
//! the profiled range, or next to a rate where the target was not always
//! reached, are refused rather than guessed.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Split};
use crate::error::SelectError;
use crate::faultsim::{derive_maskset, generate_fault_map, ArrayConfig};
use crate::numnet::{evaluate, train_masked_until, EpochTrace, NetworkParams, TrainConfig};
use crate::{seed, Error, Result};

/// Slack applied before rounding interpolated budgets up, so that values like
/// `5.000000000000001` produced by float arithmetic still round to 5.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Min,
    Mean,
    Max,
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Statistic::Min => "min",
            Statistic::Mean => "mean",
            Statistic::Max => "max",
        })
    }
}

impl FromStr for Statistic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "min" => Ok(Statistic::Min),
            "mean" => Ok(Statistic::Mean),
            "max" => Ok(Statistic::Max),
            other => Err(format!(
                "unknown statistic `{other}` (expected min, mean or max)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub fault_rates: Vec<f64>,
    pub repeats: usize,
    pub max_epochs: usize,
    pub accuracy_target: f64,
    pub train_cfg: TrainConfig,
    pub base_seed: u64,
}

impl ProfileConfig {
    fn validate(&self, array: ArrayConfig) -> Result<()> {
        if self.fault_rates.is_empty() {
            return Err(Error::InvalidConfig("fault_rates must not be empty".into()));
        }
        if self.fault_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidConfig(
                "fault rates must lie in [0, 1]".into(),
            ));
        }
        for w in self.fault_rates.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidConfig(
                    "fault_rates must be strictly increasing".into(),
                ));
            }
            if array.fault_count(w[0]) == array.fault_count(w[1]) {
                return Err(Error::InvalidConfig(format!(
                    "fault rates {} and {} give the same fault count on a {}x{} array",
                    w[0], w[1], array.rows, array.cols
                )));
            }
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if !(self.accuracy_target > 0.0 && self.accuracy_target <= 1.0) {
            return Err(Error::InvalidConfig(
                "accuracy_target must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceEntry {
    /// Fault rate realised on the array, `round(r * R * C) / (R * C)` for the
    /// requested rate `r`.
    pub fault_rate: f64,
    /// Epochs to target for every repeat; `None` when it was never reached.
    pub epochs_per_repeat: Vec<Option<usize>>,
    pub min: Option<usize>,
    pub mean: Option<f64>,
    pub max: Option<usize>,
    pub reachable: bool,
}

impl ResilienceEntry {
    pub fn from_repeats(fault_rate: f64, epochs_per_repeat: Vec<Option<usize>>) -> Self {
        let reached: Vec<usize> = epochs_per_repeat.iter().flatten().copied().collect();
        let mean = (!reached.is_empty())
            .then(|| reached.iter().sum::<usize>() as f64 / reached.len() as f64);
        ResilienceEntry {
            fault_rate,
            min: reached.iter().min().copied(),
            mean,
            max: reached.iter().max().copied(),
            reachable: reached.len() == epochs_per_repeat.len(),
            epochs_per_repeat,
        }
    }

    pub fn statistic(&self, stat: Statistic) -> Option<f64> {
        match stat {
            Statistic::Min => self.min.map(|v| v as f64),
            Statistic::Mean => self.mean,
            Statistic::Max => self.max.map(|v| v as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceTable {
    pub accuracy_target: f64,
    pub array: ArrayConfig,
    /// [`NetworkSpec::fingerprint`](crate::numnet::NetworkSpec::fingerprint)
    /// of the profiled network.
    pub network: String,
    /// Which split accuracies were measured on.
    pub accuracy_split: Split,
    pub entries: Vec<ResilienceEntry>,
    pub profile_config: ProfileConfig,
}

impl ResilienceTable {
    pub fn max_rate(&self) -> Option<f64> {
        self.entries.last().map(|e| e.fault_rate)
    }

    /// Largest budget the table can hand out for `stat`, if any entry is
    /// reachable.
    pub fn max_budget(&self, stat: Statistic) -> Option<usize> {
        self.entries
            .iter()
            .filter(|e| e.reachable)
            .filter_map(|e| e.statistic(stat))
            .map(ceil_budget)
            .max()
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.entries.windows(2) {
            if w[0].fault_rate >= w[1].fault_rate {
                return Err(Error::InvalidConfig(
                    "resilience entries must be sorted by strictly increasing fault rate".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: ResilienceTable = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    /// Long-form `rate,repeat,epochs` rows; unreached cells have an empty
    /// epochs field.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["fault_rate", "repeat", "epochs"])?;
        for e in &self.entries {
            for (k, epochs) in e.epochs_per_repeat.iter().enumerate() {
                w.write_record([
                    e.fault_rate.to_string(),
                    k.to_string(),
                    epochs.map(|v| v.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        let file = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        self.write_csv(file)
    }
}

/// First epoch whose accuracy reaches `target`; `Some(0)` means the network
/// already meets it without retraining.
pub fn epochs_to_target(trace: &EpochTrace, target: f64) -> Option<usize> {
    trace.accuracies.iter().position(|&a| a >= target)
}

/// Seed of the fault map for grid cell `(rate_index, repeat)`.
pub fn cell_seed(base_seed: u64, rate_index: usize, repeat: usize) -> u64 {
    seed::derive(base_seed, &[rate_index as u64, repeat as u64])
}

/// Shuffle seed for retraining against the fault map with `map_seed`.
pub fn retrain_seed(train_seed: u64, map_seed: u64) -> u64 {
    seed::derive(train_seed, &[map_seed])
}

/// Build the resilience table of `params` on `array`.
///
/// Every cell retrains from `params` itself. Cells run on the current rayon
/// pool and are merged in `(rate, repeat)` order, so the table does not
/// depend on the number of threads.
pub fn profile(
    params: &NetworkParams,
    train: &Dataset,
    test: &Dataset,
    array: ArrayConfig,
    cfg: &ProfileConfig,
) -> Result<ResilienceTable> {
    array.validate()?;
    cfg.validate(array)?;
    cfg.train_cfg.validate(train.len())?;

    let baseline = evaluate(params, test)?;
    if baseline < cfg.accuracy_target {
        log::warn!(
            "baseline accuracy {baseline:.4} is below the target {:.4}; \
             the target is unreachable even without faults",
            cfg.accuracy_target
        );
    }

    let spec = params.spec();
    let cells: Vec<(usize, usize)> = (0..cfg.fault_rates.len())
        .flat_map(|r| (0..cfg.repeats).map(move |k| (r, k)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(r, k)| {
            let map =
                generate_fault_map(array, cfg.fault_rates[r], cell_seed(cfg.base_seed, r, k))?;
            let masks = derive_maskset(spec, &map);
            let train_cfg = TrainConfig {
                seed: retrain_seed(cfg.train_cfg.seed, map.seed()),
                ..cfg.train_cfg
            };
            let (_, trace) = train_masked_until(
                params,
                &masks,
                train,
                test,
                cfg.max_epochs,
                cfg.accuracy_target,
                &train_cfg,
            )?;
            Ok(epochs_to_target(&trace, cfg.accuracy_target))
        })
        .collect::<Result<Vec<_>>>()?;

    let entries = results
        .chunks(cfg.repeats)
        .zip(&cfg.fault_rates)
        .map(|(epochs, &rate)| {
            ResilienceEntry::from_repeats(array.realized_rate(rate), epochs.to_vec())
        })
        .collect();

    Ok(ResilienceTable {
        accuracy_target: cfg.accuracy_target,
        array,
        network: spec.fingerprint(),
        accuracy_split: test.split,
        entries,
        profile_config: cfg.clone(),
    })
}

fn ceil_budget(v: f64) -> usize {
    (v - CEIL_SLACK).ceil().max(0.0) as usize
}

/// Retraining budget, in epochs, for a chip with fault rate `chip_rate`.
pub fn select_budget(
    table: &ResilienceTable,
    chip_rate: f64,
    stat: Statistic,
) -> Result<usize, SelectError> {
    let entries = &table.entries;
    let last = entries.last().ok_or(SelectError::EmptyTable)?;
    if chip_rate.is_nan() || chip_rate > last.fault_rate {
        return Err(SelectError::RateBeyondProfile {
            chip_rate,
            max_rate: last.fault_rate,
        });
    }

    // running-max envelope over the reachable entries
    let mut running = f64::NEG_INFINITY;
    let envelope: Vec<Option<f64>> = entries
        .iter()
        .map(|e| match (e.reachable, e.statistic(stat)) {
            (true, Some(v)) => {
                running = running.max(v);
                Some(running)
            }
            _ => None,
        })
        .collect();
    let at = |k: usize| {
        envelope[k].ok_or(SelectError::Unrecoverable {
            chip_rate,
            entry_rate: entries[k].fault_rate,
        })
    };

    let hi = entries
        .iter()
        .position(|e| e.fault_rate >= chip_rate)
        .expect("chip_rate is within the profiled range");
    if hi == 0 || entries[hi].fault_rate == chip_rate {
        return Ok(ceil_budget(at(hi)?));
    }
    let lo = hi - 1;
    let (b_lo, b_hi) = (at(lo)?, at(hi)?);
    let (r_lo, r_hi) = (entries[lo].fault_rate, entries[hi].fault_rate);
    let t = (chip_rate - r_lo) / (r_hi - r_lo);
    Ok(ceil_budget(b_lo + t * (b_hi - b_lo)))
}
