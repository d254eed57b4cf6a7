//! Config sweeps: a grid file maps dotted config keys to candidate values,
//! e.g. `"model.encoder" = ["linear", "ftt"]`. Every combination is trained
//! once per seed and scored; results are summarized as mean and sample std.

use std::path::Path;

use rayon::prelude::*;
use stepwise_core::datapipe::Split;

use crate::commands::{fit, load_raw};
use crate::config::ExperimentConfig;
use crate::failure::Failure;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub keys: Vec<String>,
    pub values: Vec<Vec<toml::Value>>,
}

pub type Setting = Vec<(String, toml::Value)>;

impl Grid {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Failure::config(format!("grid: {e}")))?;
        let mut grid = Grid { keys: Vec::new(), values: Vec::new() };
        for (key, value) in table {
            let toml::Value::Array(options) = value else {
                return Err(Failure::config(format!("grid key `{key}` must map to an array")));
            };
            if options.is_empty() {
                return Err(Failure::config(format!("grid key `{key}` has no values")));
            }
            if !key.contains('.') {
                return Err(Failure::config(format!("grid key `{key}` must be `section.field`")));
            }
            grid.keys.push(key);
            grid.values.push(options);
        }
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Cartesian product in key order, last key varying fastest.
    pub fn settings(&self) -> Vec<Setting> {
        let mut out: Vec<Setting> = vec![Vec::new()];
        for (key, options) in self.keys.iter().zip(&self.values) {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    options.iter().map(move |v| {
                        let mut s = prefix.clone();
                        s.push((key.clone(), v.clone()));
                        s
                    })
                })
                .collect();
        }
        out
    }
}

pub fn apply(base: &toml::Table, setting: &Setting) -> Result<ExperimentConfig, Failure> {
    let mut table = base.clone();
    for (key, value) in setting {
        let parts: Vec<&str> = key.split('.').collect();
        let (last, sections) = parts.split_last().expect("split yields at least one part");
        let mut cursor = &mut table;
        for part in sections {
            let entry = cursor.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cursor = entry
                .as_table_mut()
                .ok_or_else(|| Failure::config(format!("grid key `{key}`: `{part}` is not a section")))?;
        }
        cursor.insert(last.to_string(), value.clone());
    }
    ExperimentConfig::from_table(table)
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SettingResult {
    pub setting: Vec<(String, String)>,
    pub runs: Vec<Run>,
}

impl SettingResult {
    /// `(metric, mean, sample std)`; std is 0 for a single run.
    pub fn summary(&self) -> Vec<(String, f64, f64)> {
        let Some(first) = self.runs.first() else {
            return Vec::new();
        };
        first
            .metrics
            .iter()
            .map(|(name, _)| {
                let vals: Vec<f64> = self
                    .runs
                    .iter()
                    .map(|r| r.metrics.iter().find(|(n, _)| n == name).map_or(f64::NAN, |(_, v)| *v))
                    .collect();
                if vals.iter().all(|v| v.to_bits() == vals[0].to_bits()) {
                    return (name.clone(), vals[0], 0.0);
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let std = if vals.len() < 2 {
                    0.0
                } else {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                };
                (name.clone(), mean, std)
            })
            .collect()
    }
}

fn run_setting(base: &toml::Table, setting: &Setting, seeds: &[u64], split: Split) -> Result<SettingResult, Failure> {
    let mut cfg = apply(base, setting)?;
    let raw = load_raw(&cfg)?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        cfg.train.seed = seed;
        let trained = fit(&cfg, &raw, split)?;
        let mut metrics = vec![("loss".to_string(), trained.scored.loss)];
        metrics.extend(trained.scored.metrics);
        runs.push(Run { seed, metrics });
    }
    Ok(SettingResult { setting: setting.iter().map(|(k, v)| (k.clone(), value_text(v))).collect(), runs })
}

/// Settings run one after another unless `parallel`, in which case
/// independent settings run concurrently. Results keep grid order.
pub fn sweep(
    base: &toml::Table,
    grid: &Grid,
    seeds: &[u64],
    split: Split,
    parallel: bool,
) -> Result<Vec<SettingResult>, Failure> {
    if seeds.is_empty() {
        return Err(Failure::config("sweep needs at least one seed"));
    }
    let settings = grid.settings();
    if parallel {
        settings.par_iter().map(|s| run_setting(base, s, seeds, split)).collect()
    } else {
        settings.iter().map(|s| run_setting(base, s, seeds, split)).collect()
    }
}

/// `sweep.csv`: one row per setting with `<metric>_mean` and `<metric>_std`.
/// `runs.csv`: one row per (setting, seed).
pub fn write_results(grid: &Grid, results: &[SettingResult], out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out)?;
    let metric_names: Vec<String> = results
        .first()
        .and_then(|r| r.runs.first())
        .map(|r| r.metrics.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();

    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    let mut header = grid.keys.clone();
    header.push("runs".into());
    for m in &metric_names {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for r in results {
        let mut row: Vec<String> = r.setting.iter().map(|(_, v)| v.clone()).collect();
        row.push(r.runs.len().to_string());
        for (_, mean, std) in r.summary() {
            row.push(mean.to_string());
            row.push(std.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("runs.csv"))?;
    let mut header = grid.keys.clone();
    header.push("seed".into());
    header.extend(metric_names.iter().cloned());
    w.write_record(&header)?;
    for r in results {
        for run in &r.runs {
            let mut row: Vec<String> = r.setting.iter().map(|(_, v)| v.clone()).collect();
            row.push(run.seed.to_string());
            row.extend(run.metrics.iter().map(|(_, v)| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_of_two_by_two_has_four_settings() {
        let grid =
            Grid::parse("\"model.encoder\" = [\"linear\", \"ftt\"]\n\"model.grouping\" = [\"none\", \"dataset\"]\n")
                .unwrap();
        let settings = grid.settings();
        assert_eq!(settings.len(), 4);
        assert_eq!(settings[1][0].1.as_str(), Some("linear"));
        assert_eq!(settings[1][1].1.as_str(), Some("dataset"));
    }

    #[test]
    fn empty_grid_is_one_setting() {
        assert_eq!(Grid::parse("").unwrap().settings(), vec![Vec::new()]);
    }

    #[test]
    fn bad_grids_are_config_errors() {
        for text in ["\"model.encoder\" = \"ftt\"", "\"model.encoder\" = []", "encoder = [\"ftt\"]", "= ["] {
            assert_eq!(Grid::parse(text).unwrap_err().code(), 2, "{text}");
        }
    }

    #[test]
    fn apply_sets_nested_keys_and_validates() {
        let base: toml::Table = "[data]\ndir = \"d\"\n".parse().unwrap();
        let grid = Grid::parse("\"model.token_dim\" = [16]\n\"train.seed\" = [9]\n").unwrap();
        let cfg = apply(&base, &grid.settings()[0]).unwrap();
        assert_eq!(cfg.model.token_dim, 16);
        assert_eq!(cfg.train.seed, 9);
        let bad = Grid::parse("\"model.tokens\" = [16]\n").unwrap();
        assert_eq!(apply(&base, &bad.settings()[0]).unwrap_err().code(), 2);
    }

    #[test]
    fn summary_statistics() {
        let run = |seed, v| Run { seed, metrics: vec![("auprc".into(), v)] };
        let r = SettingResult { setting: Vec::new(), runs: vec![run(0, 0.2), run(1, 0.4), run(2, 0.6)] };
        let (_, mean, std) = r.summary()[0].clone();
        assert!((mean - 0.4).abs() < 1e-15);
        assert!((std - 0.2).abs() < 1e-15);
        let same = SettingResult { setting: Vec::new(), runs: vec![run(0, 0.3), run(0, 0.3), run(0, 0.3)] };
        assert_eq!(same.summary()[0].2, 0.0);
    }
}
