//! Fleet-level comparison of retraining policies.
//!
//! A fleet is a population of simulated faulty chips. Every policy tunes the
//! same pre-trained network separately for each chip: `reduce:<stat>` asks
//! the resilience table for a budget matching the chip's fault rate, while
//! `fixed:<n>` spends the same number of epochs on every chip.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Split};
use crate::faultsim::{derive_maskset, fault_rate, generate_fault_map, ArrayConfig, FaultMap};
use crate::numnet::{train_masked, NetworkParams, TrainConfig};
use crate::resilience::{retrain_seed, select_budget, ResilienceTable, Statistic};
use crate::{seed, Error, Result};

/// How fault severities are drawn for a fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum RateDistribution {
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// One rate per chip, in chip order.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipRecord {
    pub chip_id: String,
    /// Rate the map was generated at; the realised rate is `fault_rate(&fault_map)`.
    pub requested_rate: f64,
    pub fault_map: FaultMap,
}

/// Chip `i` draws its rate and fault map from `derive(seed, i)`.
pub fn generate_fleet(
    array: ArrayConfig,
    count: usize,
    dist: &RateDistribution,
    seed: u64,
) -> Result<Vec<ChipRecord>> {
    array.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("fleet needs at least one chip".into()));
    }
    match dist {
        RateDistribution::Uniform { lo, hi } => {
            if !(0.0 <= *lo && lo <= hi && *hi <= 1.0) {
                return Err(Error::InvalidDistribution(format!(
                    "uniform bounds must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]"
                )));
            }
        }
        RateDistribution::Explicit(rates) => {
            if rates.len() != count {
                return Err(Error::InvalidDistribution(format!(
                    "{} explicit rates for {count} chips",
                    rates.len()
                )));
            }
            if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::InvalidDistribution(
                    "explicit rates must lie in [0, 1]".into(),
                ));
            }
        }
    }

    let width = (count - 1).to_string().len().max(3);
    (0..count)
        .map(|i| {
            let chip_seed = seed::derive(seed, &[i as u64]);
            let rate = match dist {
                RateDistribution::Uniform { lo, hi } if lo == hi => *lo,
                RateDistribution::Uniform { lo, hi } => {
                    seed::rng(chip_seed).random_range(*lo..=*hi)
                }
                RateDistribution::Explicit(rates) => rates[i],
            };
            let fault_map = generate_fault_map(array, rate, seed::derive_tag(chip_seed, "map"))?;
            Ok(ChipRecord {
                chip_id: format!("chip-{i:0width$}"),
                requested_rate: rate,
                fault_map,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    Reduce(Statistic),
    Fixed(usize),
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Reduce(stat) => write!(f, "reduce:{stat}"),
            Policy::Fixed(epochs) => write!(f, "fixed:{epochs}"),
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, arg) = s.split_once(':').ok_or_else(|| {
            format!("policy `{s}` must look like reduce:<stat> or fixed:<epochs>")
        })?;
        match kind {
            "reduce" => Ok(Policy::Reduce(arg.parse()?)),
            "fixed" => arg
                .parse()
                .map(Policy::Fixed)
                .map_err(|_| format!("fixed policy needs a non-negative epoch count, got `{arg}`")),
            _ => Err(format!("unknown policy kind `{kind}`")),
        }
    }
}

impl Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Low, mid and high fixed-epoch baselines for a table: the high one is the
/// largest `max` budget the table hands out, the others a third and two
/// thirds of it, rounded up.
pub fn fixed_baselines(table: &ResilienceTable) -> Option<[usize; 3]> {
    let hi = table.max_budget(Statistic::Max)?;
    Some([hi.div_ceil(3), (2 * hi).div_ceil(3), hi])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipResult {
    pub chip_id: String,
    pub fault_rate: f64,
    /// `None` when the chip could not be given a budget.
    pub budget_epochs: Option<usize>,
    /// Reason code when no budget could be selected.
    pub failure: Option<String>,
    pub final_accuracy: Option<f64>,
    pub meets_constraint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetReport {
    pub policy: Policy,
    pub accuracy_constraint: f64,
    pub accuracy_split: Split,
    pub results: Vec<ChipResult>,
    pub total_epochs: usize,
    pub num_meeting: usize,
    pub num_failed: usize,
}

impl FleetReport {
    fn from_results(
        policy: Policy,
        constraint: f64,
        split: Split,
        results: Vec<ChipResult>,
    ) -> Self {
        FleetReport {
            policy,
            accuracy_constraint: constraint,
            accuracy_split: split,
            total_epochs: results.iter().filter_map(|r| r.budget_epochs).sum(),
            num_meeting: results.iter().filter(|r| r.meets_constraint).count(),
            num_failed: results.iter().filter(|r| r.failure.is_some()).count(),
            results,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "chip_id",
            "fault_rate",
            "policy",
            "budget_epochs",
            "final_accuracy",
            "meets_constraint",
        ])?;
        let policy = self.policy.to_string();
        for r in &self.results {
            let budget = match (&r.budget_epochs, &r.failure) {
                (Some(b), _) => b.to_string(),
                (None, Some(reason)) => format!("FAILED:{reason}"),
                (None, None) => String::new(),
            };
            w.write_record([
                r.chip_id.clone(),
                r.fault_rate.to_string(),
                policy.clone(),
                budget,
                r.final_accuracy.map(|a| a.to_string()).unwrap_or_default(),
                r.meets_constraint.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn check_table(
    table: &ResilienceTable,
    params: &NetworkParams,
    fleet: &[ChipRecord],
    constraint: f64,
) -> Result<()> {
    if (table.accuracy_target - constraint).abs() > 1e-12 {
        return Err(Error::TableMismatch(format!(
            "table was profiled for accuracy target {}, constraint is {constraint}",
            table.accuracy_target
        )));
    }
    if let Some(chip) = fleet.iter().find(|c| c.fault_map.config() != table.array) {
        return Err(Error::TableMismatch(format!(
            "{} uses a {}x{} array, table was profiled on {}x{}",
            chip.chip_id,
            chip.fault_map.config().rows,
            chip.fault_map.config().cols,
            table.array.rows,
            table.array.cols
        )));
    }
    let fingerprint = params.spec().fingerprint();
    if table.network != fingerprint {
        return Err(Error::TableMismatch(format!(
            "table network {} differs from {fingerprint}",
            table.network
        )));
    }
    Ok(())
}

/// Tune `pretrained` for every chip in `fleet` under `policy`.
///
/// Each chip starts from `pretrained`. Chips the table cannot certify are
/// recorded as failed and are not retrained. Chips run in parallel on the
/// current rayon pool; results stay in fleet order.
#[allow(clippy::too_many_arguments)]
pub fn run_policy(
    pretrained: &NetworkParams,
    train: &Dataset,
    test: &Dataset,
    fleet: &[ChipRecord],
    policy: Policy,
    table: Option<&ResilienceTable>,
    constraint: f64,
    train_cfg: &TrainConfig,
) -> Result<FleetReport> {
    let table = match (policy, table) {
        (Policy::Reduce(_), None) => {
            return Err(Error::TableMismatch(format!(
                "{policy} needs a resilience table"
            )))
        }
        (_, t) => t,
    };
    if let (Policy::Reduce(_), Some(t)) = (policy, table) {
        check_table(t, pretrained, fleet, constraint)?;
    }

    let spec = pretrained.spec();
    let results = fleet
        .par_iter()
        .map(|chip| {
            let rate = fault_rate(&chip.fault_map);
            let budget = match (policy, table) {
                (Policy::Fixed(epochs), _) => Ok(epochs),
                (Policy::Reduce(stat), Some(t)) => select_budget(t, rate, stat),
                (Policy::Reduce(_), None) => unreachable!("checked above"),
            };
            let epochs = match budget {
                Ok(epochs) => epochs,
                Err(err) => {
                    return Ok(ChipResult {
                        chip_id: chip.chip_id.clone(),
                        fault_rate: rate,
                        budget_epochs: None,
                        failure: Some(err.code().to_string()),
                        final_accuracy: None,
                        meets_constraint: false,
                    })
                }
            };
            let masks = derive_maskset(spec, &chip.fault_map);
            let cfg = TrainConfig {
                seed: retrain_seed(train_cfg.seed, chip.fault_map.seed()),
                ..*train_cfg
            };
            let (_, trace) = train_masked(pretrained, &masks, train, test, epochs, &cfg)?;
            let accuracy = trace.last();
            Ok(ChipResult {
                chip_id: chip.chip_id.clone(),
                fault_rate: rate,
                budget_epochs: Some(epochs),
                failure: None,
                final_accuracy: Some(accuracy),
                meets_constraint: accuracy >= constraint,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FleetReport::from_results(
        policy, constraint, test.split, results,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: Policy,
    pub total_epochs: usize,
    pub num_meeting: usize,
    pub num_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAccuracies {
    pub policy: Policy,
    pub final_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub accuracy_constraint: f64,
    pub fleet_size: usize,
    pub chip_ids: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub accuracies: Vec<PolicyAccuracies>,
}

impl Comparison {
    pub fn row(&self, policy: Policy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "policy",
            "total_epochs",
            "num_meeting",
            "num_failed",
            "fleet_size",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.policy.to_string(),
                r.total_epochs.to_string(),
                r.num_meeting.to_string(),
                r.num_failed.to_string(),
                self.fleet_size.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Summarise reports that were produced over the same fleet and constraint.
pub fn compare_policies(reports: &[FleetReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::MismatchedFleets("no reports to compare".into()))?;
    let chips = |r: &FleetReport| -> Vec<(String, f64)> {
        r.results
            .iter()
            .map(|c| (c.chip_id.clone(), c.fault_rate))
            .collect()
    };
    let reference = chips(first);
    for r in &reports[1..] {
        if r.accuracy_constraint != first.accuracy_constraint {
            return Err(Error::MismatchedFleets(format!(
                "{} uses constraint {}, {} uses {}",
                r.policy, r.accuracy_constraint, first.policy, first.accuracy_constraint
            )));
        }
        if chips(r) != reference {
            return Err(Error::MismatchedFleets(format!(
                "{} and {} were run on different chips",
                r.policy, first.policy
            )));
        }
    }
    Ok(Comparison {
        accuracy_constraint: first.accuracy_constraint,
        fleet_size: reference.len(),
        chip_ids: reference.into_iter().map(|(id, _)| id).collect(),
        rows: reports
            .iter()
            .map(|r| ComparisonRow {
                policy: r.policy,
                total_epochs: r.total_epochs,
                num_meeting: r.num_meeting,
                num_failed: r.num_failed,
            })
            .collect(),
        accuracies: reports
            .iter()
            .map(|r| PolicyAccuracies {
                policy: r.policy,
                final_accuracy: r.results.iter().map(|c| c.final_accuracy).collect(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn array() -> ArrayConfig {
        ArrayConfig::new(8, 8).unwrap()
    }

    #[test]
    fn hundred_unique_chips() {
        let fleet = generate_fleet(
            array(),
            100,
            &RateDistribution::Uniform { lo: 0.0, hi: 0.3 },
            1,
        )
        .unwrap();
        assert_eq!(fleet.len(), 100);
        let mut ids: Vec<_> = fleet.iter().map(|c| c.chip_id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        assert_eq!(fleet[7].chip_id, "chip-007");
        assert!(fleet
            .iter()
            .all(|c| (0.0..=0.3).contains(&c.requested_rate)));
    }

    #[test]
    fn explicit_and_degenerate_distributions() {
        let zero =
            generate_fleet(array(), 5, &RateDistribution::Explicit(vec![0.0; 5]), 2).unwrap();
        assert!(zero.iter().all(|c| c.fault_map.num_faulty() == 0));
        let fixed = generate_fleet(
            array(),
            10,
            &RateDistribution::Uniform { lo: 0.05, hi: 0.05 },
            3,
        )
        .unwrap();
        let expected = (0.05f64 * 64.0).round() as usize;
        assert!(fixed.iter().all(|c| c.fault_map.num_faulty() == expected));
    }

    #[test]
    fn invalid_distributions() {
        let bad = [
            RateDistribution::Uniform { lo: 0.3, hi: 0.1 },
            RateDistribution::Uniform { lo: -0.1, hi: 0.1 },
            RateDistribution::Explicit(vec![0.1; 3]),
            RateDistribution::Explicit(vec![0.1, 1.5]),
        ];
        for dist in &bad {
            assert!(matches!(
                generate_fleet(array(), 2, dist, 0),
                Err(Error::InvalidDistribution(_))
            ));
        }
    }

    #[test]
    fn fleet_is_seeded() {
        let dist = RateDistribution::Uniform { lo: 0.0, hi: 0.5 };
        assert_eq!(
            generate_fleet(array(), 6, &dist, 9).unwrap(),
            generate_fleet(array(), 6, &dist, 9).unwrap()
        );
        assert_ne!(
            generate_fleet(array(), 6, &dist, 9).unwrap(),
            generate_fleet(array(), 6, &dist, 10).unwrap()
        );
    }

    #[test]
    fn policy_strings() {
        for text in [
            "reduce:max",
            "reduce:mean",
            "reduce:min",
            "fixed:0",
            "fixed:12",
        ] {
            assert_eq!(text.parse::<Policy>().unwrap().to_string(), text);
        }
        assert!("fixed:-1".parse::<Policy>().is_err());
        assert!("reduce".parse::<Policy>().is_err());
        assert!("adaptive:3".parse::<Policy>().is_err());
        assert_eq!(
            serde_json::to_string(&Policy::Fixed(3)).unwrap(),
            "\"fixed:3\""
        );
    }

    fn report(policy: Policy, rates: &[f64], budgets: &[Option<usize>]) -> FleetReport {
        let results = rates
            .iter()
            .zip(budgets)
            .enumerate()
            .map(|(i, (&rate, &b))| ChipResult {
                chip_id: format!("chip-{i:03}"),
                fault_rate: rate,
                budget_epochs: b,
                failure: b.is_none().then(|| "RATE_BEYOND_PROFILE".to_string()),
                final_accuracy: b.map(|e| 0.8 + 0.05 * e as f64),
                meets_constraint: b.is_some_and(|e| 0.8 + 0.05 * e as f64 >= 0.9),
            })
            .collect();
        FleetReport::from_results(policy, 0.9, Split::Test, results)
    }

    #[test]
    fn report_accounting() {
        let r = report(
            Policy::Reduce(Statistic::Max),
            &[0.0, 0.1, 0.5],
            &[Some(0), Some(3), None],
        );
        assert_eq!((r.total_epochs, r.num_meeting, r.num_failed), (3, 1, 1));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("chip-002,0.5,reduce:max,FAILED:RATE_BEYOND_PROFILE,,false"));
        assert!(text.contains("chip-001,0.1,reduce:max,3,0.9500000000000001,true"));
    }

    #[test]
    fn comparison_rows() {
        let a = report(Policy::Fixed(2), &[0.0, 0.1], &[Some(2), Some(2)]);
        let single = compare_policies(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.rows[0].total_epochs, 4);
        assert_eq!(single.rows[0].num_meeting, 2);
        let twice = compare_policies(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(twice.rows[0], twice.rows[1]);

        let other = report(Policy::Fixed(1), &[0.0, 0.2], &[Some(1), Some(1)]);
        assert!(matches!(
            compare_policies(&[a, other]),
            Err(Error::MismatchedFleets(_))
        ));
        assert!(compare_policies(&[]).is_err());
    }
}
