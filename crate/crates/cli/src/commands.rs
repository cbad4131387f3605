use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use reduce_core::dataio::Split;
use reduce_core::faultsim::{derive_maskset, fault_rate, generate_fault_map, FaultMap};
use reduce_core::fleet::{compare_policies, fixed_baselines, generate_fleet, run_policy, Policy};
use reduce_core::numnet::{evaluate, init_params, train, train_masked, EpochTrace, NetworkParams};
use reduce_core::resilience::{
    profile as run_profile, retrain_seed, select_budget, ProfileConfig, ResilienceTable, Statistic,
};
use reduce_core::Error;

use crate::config::{tags, RunConfig};
use crate::{CliError, GlobalOpts};

struct Context {
    cfg: RunConfig,
    out: PathBuf,
}

impl Context {
    fn load(global: &GlobalOpts) -> Result<Self, CliError> {
        let path = global
            .config
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs --config".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(seed) = global.seed {
            cfg.seed = seed;
        }
        let out = global.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        fs::create_dir_all(&out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        Ok(Context { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn params(&self, explicit: Option<PathBuf>) -> Result<NetworkParams, CliError> {
        let path = explicit.unwrap_or_else(|| self.path("params.json"));
        let params: NetworkParams = read_json(&path)?;
        if params.spec() != &self.cfg.network {
            return Err(CliError::Usage(format!(
                "{} holds a {:?} network, config describes {:?}",
                path.display(),
                params.spec().layer_dims,
                self.cfg.network.layer_dims
            )));
        }
        Ok(params)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    write_file(path, text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

#[derive(Serialize)]
struct PretrainMetrics {
    baseline_accuracy: f64,
    accuracy_constraint: f64,
    accuracy_split: Split,
    train_samples: usize,
    test_samples: usize,
    epochs: usize,
    trace: EpochTrace,
}

pub fn pretrain(global: &GlobalOpts) -> Result<(), CliError> {
    let ctx = Context::load(global)?;
    let cfg = &ctx.cfg;
    let (train_set, test_set) = cfg.datasets()?;
    let init = init_params(&cfg.network, cfg.derived_seed(tags::PRETRAIN_INIT));
    let (params, trace) = train(
        &init,
        &train_set,
        &test_set,
        cfg.pretrain_epochs,
        &cfg.train_config(tags::PRETRAIN),
    )?;
    let baseline = trace.last();
    let constraint = cfg.accuracy_constraint.resolve(baseline);
    log::info!("baseline accuracy {baseline:.4}, constraint {constraint:.4}");

    write_json(&ctx.path("params.json"), &params)?;
    write_json(
        &ctx.path("pretrain_metrics.json"),
        &PretrainMetrics {
            baseline_accuracy: baseline,
            accuracy_constraint: constraint,
            accuracy_split: test_set.split,
            train_samples: train_set.len(),
            test_samples: test_set.len(),
            epochs: cfg.pretrain_epochs,
            trace,
        },
    )?;
    if baseline < constraint {
        return Err(CliError::Unrecoverable(format!(
            "baseline accuracy {baseline} does not reach the constraint {constraint}"
        )));
    }
    Ok(())
}

pub fn profile(global: &GlobalOpts, params_path: Option<PathBuf>) -> Result<(), CliError> {
    let ctx = Context::load(global)?;
    let cfg = &ctx.cfg;
    let params = ctx.params(params_path)?;
    let (train_set, test_set) = cfg.datasets()?;
    let baseline = evaluate(&params, &test_set)?;
    let profile_cfg = ProfileConfig {
        fault_rates: cfg.profile.fault_rates.clone(),
        repeats: cfg.profile.repeats,
        max_epochs: cfg.profile.max_epochs,
        accuracy_target: cfg.accuracy_constraint.resolve(baseline),
        train_cfg: cfg.train_config(tags::RETRAIN),
        base_seed: cfg.derived_seed(tags::PROFILE),
    };
    let table = run_profile(&params, &train_set, &test_set, cfg.array, &profile_cfg)?;
    table.save(&ctx.path("resilience.json"), &ctx.path("resilience.csv"))?;
    Ok(())
}

pub fn select(table_path: &Path, map_path: &Path, stat: Statistic) -> Result<(), CliError> {
    let text = fs::read_to_string(table_path).map_err(|e| Error::Io {
        path: table_path.to_path_buf(),
        source: e,
    })?;
    let table = ResilienceTable::from_json(&text)?;
    let map: FaultMap = read_json(map_path)?;
    if map.config() != table.array {
        return Err(CliError::Usage(format!(
            "fault map is for a {}x{} array, table for {}x{}",
            map.config().rows,
            map.config().cols,
            table.array.rows,
            table.array.cols
        )));
    }
    let budget = select_budget(&table, fault_rate(&map), stat)?;
    println!("{budget}");
    Ok(())
}

#[derive(Serialize)]
struct RetrainMetrics {
    fault_rate: f64,
    pruned_weights: usize,
    epochs: usize,
    accuracy_before: f64,
    final_accuracy: f64,
    accuracy_constraint: f64,
    meets_constraint: bool,
    accuracy_split: Split,
    trace: EpochTrace,
}

pub fn retrain(
    global: &GlobalOpts,
    params_path: Option<PathBuf>,
    map_path: &Path,
    epochs: usize,
) -> Result<(), CliError> {
    let ctx = Context::load(global)?;
    let cfg = &ctx.cfg;
    let params = ctx.params(params_path)?;
    let map: FaultMap = read_json(map_path)?;
    if map.config() != cfg.array {
        return Err(CliError::Usage(
            "fault map does not match the configured array".into(),
        ));
    }
    let (train_set, test_set) = cfg.datasets()?;
    let constraint = cfg
        .accuracy_constraint
        .resolve(evaluate(&params, &test_set)?);
    let masks = derive_maskset(&cfg.network, &map);
    let mut train_cfg = cfg.train_config(tags::RETRAIN);
    train_cfg.seed = retrain_seed(train_cfg.seed, map.seed());
    let (tuned, trace) = train_masked(&params, &masks, &train_set, &test_set, epochs, &train_cfg)?;

    write_json(&ctx.path("retrained_params.json"), &tuned)?;
    write_json(
        &ctx.path("retrain_metrics.json"),
        &RetrainMetrics {
            fault_rate: fault_rate(&map),
            pruned_weights: masks.num_pruned(),
            epochs,
            accuracy_before: trace.accuracies[0],
            final_accuracy: trace.last(),
            accuracy_constraint: constraint,
            meets_constraint: trace.last() >= constraint,
            accuracy_split: test_set.split,
            trace,
        },
    )
}

/// `fixed:lo|mid|hi` resolve against the table; everything else parses as a
/// [`Policy`].
fn resolve_policy(text: &str, table: Option<&ResilienceTable>) -> Result<Policy, CliError> {
    let ladder = match text {
        "fixed:lo" => Some(0),
        "fixed:mid" => Some(1),
        "fixed:hi" => Some(2),
        _ => None,
    };
    match ladder {
        Some(k) => {
            let table =
                table.ok_or_else(|| CliError::Usage(format!("{text} needs a resilience table")))?;
            let baselines = fixed_baselines(table).ok_or_else(|| {
                CliError::Unrecoverable("no reachable entry in the resilience table".into())
            })?;
            Ok(Policy::Fixed(baselines[k]))
        }
        None => text.parse().map_err(CliError::Usage),
    }
}

fn policy_slug(policy: Policy) -> String {
    policy.to_string().replace(':', "-")
}

pub fn fleet(
    global: &GlobalOpts,
    params_path: Option<PathBuf>,
    table_path: Option<PathBuf>,
    policies: Vec<String>,
) -> Result<(), CliError> {
    let ctx = Context::load(global)?;
    let cfg = &ctx.cfg;
    let params = ctx.params(params_path)?;
    let policies = if policies.is_empty() {
        cfg.fleet.policies.clone()
    } else {
        policies
    };
    if policies.is_empty() {
        return Err(CliError::Usage(
            "no policies given (config fleet.policies or --policies)".into(),
        ));
    }

    let table_path = table_path.unwrap_or_else(|| ctx.path("resilience.json"));
    let table = if table_path.exists() {
        let text = fs::read_to_string(&table_path).map_err(|e| Error::Io {
            path: table_path.clone(),
            source: e,
        })?;
        Some(ResilienceTable::from_json(&text)?)
    } else {
        None
    };

    let mut resolved = Vec::new();
    for text in &policies {
        let policy = resolve_policy(text, table.as_ref())?;
        if let Policy::Fixed(e) = policy {
            if e > cfg.profile.max_epochs {
                return Err(CliError::Usage(format!(
                    "{policy} exceeds the configured maximum of {} epochs",
                    cfg.profile.max_epochs
                )));
            }
        }
        if !resolved.contains(&policy) {
            resolved.push(policy);
        }
    }

    let (train_set, test_set) = cfg.datasets()?;
    let constraint = cfg
        .accuracy_constraint
        .resolve(evaluate(&params, &test_set)?);
    let chips = generate_fleet(
        cfg.array,
        cfg.fleet.count,
        &cfg.fleet.rates,
        cfg.derived_seed(tags::FLEET),
    )?;
    write_json(&ctx.path("fleet_chips.json"), &chips)?;

    let train_cfg = cfg.train_config(tags::RETRAIN);
    let mut reports = Vec::with_capacity(resolved.len());
    for policy in resolved {
        let report = run_policy(
            &params,
            &train_set,
            &test_set,
            &chips,
            policy,
            table.as_ref(),
            constraint,
            &train_cfg,
        )?;
        let slug = policy_slug(policy);
        write_file(
            &ctx.path(&format!("fleet_{slug}.json")),
            report.to_json()?.as_bytes(),
        )?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        write_file(&ctx.path(&format!("fleet_{slug}.csv")), &csv)?;
        log::info!(
            "{policy}: {} / {} chips meet the constraint with {} epochs",
            report.num_meeting,
            chips.len(),
            report.total_epochs
        );
        reports.push(report);
    }

    let comparison = compare_policies(&reports)?;
    write_file(
        &ctx.path("comparison.json"),
        comparison.to_json()?.as_bytes(),
    )?;
    let mut csv = Vec::new();
    comparison.write_csv(&mut csv)?;
    write_file(&ctx.path("comparison.csv"), &csv)
}

pub fn fault_map(
    global: &GlobalOpts,
    rate: f64,
    map_seed: u64,
    output: Option<PathBuf>,
) -> Result<(), CliError> {
    let ctx = Context::load(global)?;
    let map = generate_fault_map(ctx.cfg.array, rate, map_seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    write_json(&output.unwrap_or_else(|| ctx.path("fault_map.json")), &map)
}
