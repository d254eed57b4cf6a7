use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use super::{Labels, Split, Stay, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::grouping::{validate_partition, GroupingScheme};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetPaths {
    pub data: PathBuf,
    pub labels: PathBuf,
    pub splits: PathBuf,
    pub groups: Option<PathBuf>,
}

impl DatasetPaths {
    /// `data.csv`, `labels.csv`, `splits.csv` and `groups.csv` under `dir`.
    pub fn in_dir(dir: &Path, with_groups: bool) -> Self {
        Self {
            data: dir.join("data.csv"),
            labels: dir.join("labels.csv"),
            splits: dir.join("splits.csv"),
            groups: with_groups.then(|| dir.join("groups.csv")),
        }
    }
}

fn data_err<T>(path: &Path, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Data(format!("{}: {msg}", path.display())))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn parse_value(path: &Path, cell: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => data_err(path, format!("invalid value `{cell}` (missing cells must be empty)")),
    }
}

fn parse_time(path: &Path, cell: &str) -> Result<usize> {
    cell.trim().parse::<usize>().or_else(|_| data_err(path, format!("time `{cell}` is not a nonnegative integer step")))
}

struct RawStay {
    id: String,
    rows: Vec<(usize, Vec<Option<f64>>)>,
    times: BTreeSet<usize>,
}

/// Reads the data, labels, splits and optional groups CSVs.
pub fn load_dataset(paths: &DatasetPaths, step_hours: f64) -> Result<TimeSeriesDataset> {
    let mut rdr = reader(&paths.data)?;
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "stay_id" || &header[1] != "time" {
        return data_err(&paths.data, "header must be `stay_id,time,<feature...>`");
    }
    let feature_names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let d = feature_names.len();

    let mut raw: Vec<RawStay> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != d + 2 {
            return data_err(&paths.data, format!("row has {} cells, expected {}", rec.len(), d + 2));
        }
        let id = rec[0].to_string();
        let t = parse_time(&paths.data, &rec[1])?;
        let values = rec.iter().skip(2).map(|c| parse_value(&paths.data, c)).collect::<Result<Vec<_>>>()?;
        let k = *index.entry(id.clone()).or_insert_with(|| {
            raw.push(RawStay { id: id.clone(), rows: Vec::new(), times: BTreeSet::new() });
            raw.len() - 1
        });
        let stay = &mut raw[k];
        if stay.times.contains(&t) {
            return data_err(&paths.data, format!("duplicate row for stay {id} at time {t}"));
        }
        if stay.times.last().is_some_and(|&last| t < last) {
            return data_err(&paths.data, format!("non-monotone time {t} in stay {id}"));
        }
        stay.times.insert(t);
        stay.rows.push((t, values));
    }
    if raw.is_empty() {
        return data_err(&paths.data, "no rows");
    }

    let lengths: Vec<usize> = raw.iter().map(|s| s.times.last().map_or(0, |&t| t + 1)).collect();
    let labels = load_labels(&paths.labels, &index, &lengths)?;
    let splits = load_splits(&paths.splits, &index)?;

    let stays = raw
        .into_iter()
        .zip(labels)
        .zip(splits)
        .zip(&lengths)
        .map(|(((r, labels), split), &t_len)| {
            let mut x = vec![f64::NAN; t_len * d];
            let mut observed = vec![false; t_len * d];
            for (t, values) in r.rows {
                for (j, v) in values.into_iter().enumerate() {
                    if let Some(v) = v {
                        x[t * d + j] = v;
                        observed[t * d + j] = true;
                    }
                }
            }
            Stay { id: r.id, x, observed, labels, split }
        })
        .collect();

    let grouping = match &paths.groups {
        Some(p) => Some(load_groups(p, &feature_names)?),
        None => None,
    };
    let ds = TimeSeriesDataset { stays, feature_names, grouping, step_hours, scaler: None };
    ds.validate()?;
    Ok(ds)
}

fn load_labels(path: &Path, index: &HashMap<String, usize>, lengths: &[usize]) -> Result<Vec<Labels>> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let per_step = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["stay_id", "time", "label"] => true,
        ["stay_id", "label"] => false,
        _ => return data_err(path, "header must be `stay_id,time,label` or `stay_id,label`"),
    };
    let mut labels: Vec<Option<Labels>> = vec![None; lengths.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let k = *index
            .get(&rec[0])
            .ok_or_else(|| Error::Data(format!("{}: label for unknown stay {}", path.display(), &rec[0])))?;
        if per_step {
            let t = parse_time(path, &rec[1])?;
            if t >= lengths[k] {
                return data_err(path, format!("label at time {t} beyond stay {} of length {}", &rec[0], lengths[k]));
            }
            let slot = labels[k].get_or_insert_with(|| Labels::PerStep {
                values: vec![0.0; lengths[k]],
                valid: vec![false; lengths[k]],
            });
            let Labels::PerStep { values, valid } = slot else { unreachable!() };
            if valid[t] {
                return data_err(path, format!("duplicate label for stay {} at time {t}", &rec[0]));
            }
            if let Some(v) = parse_value(path, &rec[2])? {
                values[t] = v;
                valid[t] = true;
            }
        } else {
            if labels[k].is_some() {
                return data_err(path, format!("duplicate label for stay {}", &rec[0]));
            }
            let v = parse_value(path, &rec[1])?
                .ok_or_else(|| Error::Data(format!("{}: empty label for stay {}", path.display(), &rec[0])))?;
            labels[k] = Some(Labels::PerStay(v));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(k, l)| {
            l.ok_or_else(|| {
                let id = index.iter().find(|(_, &v)| v == k).map(|(id, _)| id.as_str()).unwrap_or("?");
                Error::Data(format!("{}: no labels for stay {id}", path.display()))
            })
        })
        .collect()
}

fn load_splits(path: &Path, index: &HashMap<String, usize>) -> Result<Vec<Split>> {
    let mut rdr = reader(path)?;
    if rdr.headers()?.iter().collect::<Vec<_>>() != ["stay_id", "split"] {
        return data_err(path, "header must be `stay_id,split`");
    }
    let mut splits: Vec<Option<Split>> = vec![None; index.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let k = *index
            .get(&rec[0])
            .ok_or_else(|| Error::Data(format!("{}: split for unknown stay {}", path.display(), &rec[0])))?;
        if splits[k].is_some() {
            return data_err(path, format!("duplicate split for stay {}", &rec[0]));
        }
        splits[k] = Some(rec[1].trim().parse()?);
    }
    splits
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            s.ok_or_else(|| {
                let id = index.iter().find(|(_, &v)| v == k).map(|(id, _)| id.as_str()).unwrap_or("?");
                Error::Data(format!("{}: no split for stay {id}", path.display()))
            })
        })
        .collect()
}

/// Groups appear in order of first mention; features keep file order.
pub(crate) fn load_groups(path: &Path, feature_names: &[String]) -> Result<GroupingScheme> {
    let mut rdr = reader(path)?;
    if rdr.headers()?.iter().collect::<Vec<_>>() != ["feature", "group"] {
        return data_err(path, "header must be `feature,group`");
    }
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let j = feature_names
            .iter()
            .position(|f| f == &rec[0])
            .ok_or_else(|| Error::Data(format!("{}: unknown feature `{}`", path.display(), &rec[0])))?;
        let name = rec[1].to_string();
        match groups.iter_mut().find(|(g, _)| *g == name) {
            Some((_, idx)) => idx.push(j),
            None => groups.push((name, vec![j])),
        }
    }
    let scheme_name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("groups").to_string();
    let scheme = GroupingScheme::new(scheme_name, groups);
    validate_partition(&scheme, feature_names.len())?;
    Ok(scheme)
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Writes the dataset as CSVs. Unobserved cells are written empty, so
/// this is meant for raw (unprocessed) datasets.
pub fn write_dataset(ds: &TimeSeriesDataset, dir: &Path) -> Result<DatasetPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = DatasetPaths::in_dir(dir, ds.grouping.is_some());
    let d = ds.num_features();

    let mut w = csv::Writer::from_path(&paths.data)?;
    let mut header = vec!["stay_id".to_string(), "time".to_string()];
    header.extend(ds.feature_names.iter().cloned());
    w.write_record(&header)?;
    for s in &ds.stays {
        for t in 0..s.len(d) {
            let mut row = vec![s.id.clone(), t.to_string()];
            for j in 0..d {
                let i = t * d + j;
                row.push(if s.observed[i] { fmt_value(s.x[i]) } else { String::new() });
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.labels)?;
    let per_step = matches!(ds.stays.first().map(|s| &s.labels), Some(Labels::PerStep { .. }));
    if per_step {
        w.write_record(["stay_id", "time", "label"])?;
    } else {
        w.write_record(["stay_id", "label"])?;
    }
    for s in &ds.stays {
        match &s.labels {
            Labels::PerStep { values, valid } if per_step => {
                for (t, (v, ok)) in values.iter().zip(valid).enumerate() {
                    if *ok {
                        w.write_record([s.id.clone(), t.to_string(), fmt_value(*v)])?;
                    }
                }
            }
            Labels::PerStay(v) if !per_step => w.write_record([s.id.clone(), fmt_value(*v)])?,
            _ => return Err(Error::Data("stays mix per-step and per-stay labels".into())),
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.splits)?;
    w.write_record(["stay_id", "split"])?;
    for s in &ds.stays {
        w.write_record([s.id.clone(), s.split.to_string()])?;
    }
    w.flush()?;

    if let (Some(g), Some(p)) = (&ds.grouping, &paths.groups) {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["feature", "group"])?;
        for group in &g.groups {
            for &j in &group.indices {
                w.write_record([ds.feature_names[j].as_str(), group.name.as_str()])?;
            }
        }
        w.flush()?;
    }
    Ok(paths)
}
