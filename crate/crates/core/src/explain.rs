//! Attention-based explanations: within-group feature weights, between-group
//! weights and their trajectories over time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::{Split, Stay, TimeSeriesDataset};
use crate::diffcore::{Graph, Mode, ParamStore, Tensor, Var};
use crate::encoders::EncoderKind;
use crate::error::{Error, Result};
use crate::grouping::{AggregationMethod, GroupedEncoder};
use crate::model::{Embedding, ModelConfig, EMBED_PREFIX};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadReduction {
    #[default]
    Mean,
    /// Per-position maximum over heads, renormalized to sum to 1.
    Max,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerChoice {
    #[default]
    Last,
    Index(usize),
}

/// Which attention map is read: the CLS query row of one layer, reduced
/// over heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reduction {
    pub layer: LayerChoice,
    pub heads: HeadReduction,
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let layer = match self.layer {
            LayerChoice::Last => "last".to_string(),
            LayerChoice::Index(l) => l.to_string(),
        };
        let heads = match self.heads {
            HeadReduction::Mean => "mean",
            HeadReduction::Max => "max",
        };
        write!(f, "layer={layer};heads={heads};query=cls")
    }
}

/// Per-timestep CLS attention rows for one stay. Position 0 of every row is
/// the CLS token itself.
#[derive(Clone, Debug, PartialEq)]
pub struct StayAttention {
    /// `[K][T][|M_k| + 1]`
    pub within: Vec<Vec<Vec<f64>>>,
    /// `[T][K + 1]`
    pub between: Vec<Vec<f64>>,
}

fn grouped_with_attention(model: &ModelConfig) -> Result<&GroupedEncoder> {
    let ge = match &model.embedding {
        Embedding::Grouped(ge) => ge,
        Embedding::None => return Err(Error::NoAttention("model has no embedding module".into())),
        Embedding::Direct(_) => return Err(Error::NoAttention("embedding is not grouped".into())),
    };
    if ge.encoder.kind != EncoderKind::Ftt {
        return Err(Error::NoAttention(format!("group encoder is {:?}, not ftt", ge.encoder.kind)));
    }
    if ge.aggregator.method != AggregationMethod::Attention {
        return Err(Error::NoAttention(format!("aggregator is {:?}, not attention", ge.aggregator.method)));
    }
    Ok(ge)
}

/// CLS query rows `[N][L]` of one layer's attention `[N, heads, q, L]`.
fn cls_rows(g: &Graph, layers: &[Var], reduction: Reduction) -> Result<Vec<Vec<f64>>> {
    let layer = match reduction.layer {
        LayerChoice::Last => layers.len().checked_sub(1),
        LayerChoice::Index(l) => (l < layers.len()).then_some(l),
    }
    .ok_or_else(|| {
        Error::Config(format!("attention layer {:?} out of range ({} layers)", reduction.layer, layers.len()))
    })?;
    let att = g.value(layers[layer]);
    let s = att.shape();
    let (n, heads, q, len) = (s[0], s[1], s[2], s[3]);
    let data = att.data();
    Ok((0..n)
        .map(|i| {
            let head_row = |h: usize| &data[((i * heads + h) * q) * len..][..len];
            let mut row = vec![0.0; len];
            match reduction.heads {
                HeadReduction::Mean => {
                    for h in 0..heads {
                        row.iter_mut().zip(head_row(h)).for_each(|(r, v)| *r += v);
                    }
                    row.iter_mut().for_each(|r| *r /= heads as f64);
                }
                HeadReduction::Max => {
                    for h in 0..heads {
                        row.iter_mut().zip(head_row(h)).for_each(|(r, v)| *r = r.max(*v));
                    }
                    let total: f64 = row.iter().sum();
                    row.iter_mut().for_each(|r| *r /= total);
                }
            }
            row
        })
        .collect())
}

/// Attention rows of every timestep of `stay` (already preprocessed).
pub fn extract_attention(
    model: &ModelConfig,
    params: &ParamStore,
    stay: &Stay,
    reduction: Reduction,
) -> Result<StayAttention> {
    let ge = grouped_with_attention(model)?;
    let d = model.input_dim;
    if stay.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("stay {} has unprocessed missing values", stay.id)));
    }
    let t = stay.len(d);
    let mut g = Graph::new(params, Mode::Eval, 0);
    let x = g.constant(Tensor::new(vec![t, d], stay.x.clone())?)?;
    let out = ge.forward(&mut g, EMBED_PREFIX, x, false)?;
    let within =
        out.group_attention.iter().map(|layers| cls_rows(&g, layers, reduction)).collect::<Result<Vec<_>>>()?;
    let between = cls_rows(&g, &out.aggregator_attention, reduction)?;
    Ok(StayAttention { within, between })
}

/// Fixed-point scale for order-independent sums of weights in `[0, 1]`.
const FIXED_ONE: f64 = (1u64 << 60) as f64;

/// Exact running sum of weight vectors.
#[derive(Clone, Debug)]
struct ExactMean {
    sums: Vec<i128>,
    count: u64,
}

impl ExactMean {
    fn new(len: usize) -> Self {
        Self { sums: vec![0; len], count: 0 }
    }

    fn add(&mut self, row: &[f64]) {
        for (s, &v) in self.sums.iter_mut().zip(row) {
            *s += (v * FIXED_ONE).round() as i128;
        }
        self.count += 1;
    }

    fn mean(&self) -> Vec<f64> {
        self.sums
            .iter()
            .map(|&s| if self.count == 0 { 0.0 } else { (s as f64 / self.count as f64) / FIXED_ONE })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub group: String,
    pub features: Vec<String>,
    /// Mean CLS attention on each feature token.
    pub weights: Vec<f64>,
    /// Mean CLS self-attention, excluded from `weights`.
    pub cls_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverTime {
    pub stay_id: String,
    /// `[T][K]` between-group weights.
    pub weights: Vec<Vec<f64>>,
    /// `[T]` aggregator CLS self-attention.
    pub cls_mass: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub within: Vec<GroupWeights>,
    pub groups: Vec<String>,
    /// Mean aggregator attention on each group.
    pub between: Vec<f64>,
    pub between_cls_mass: f64,
    pub over_time: Vec<OverTime>,
    pub checkpoint: String,
    pub split: Split,
    pub reduction: String,
    /// Number of timesteps averaged.
    pub timesteps: u64,
}

/// Averages attention over every timestep of every stay in `split`.
/// Trajectories are kept for `stay_ids` only.
pub fn aggregate_report(
    model: &ModelConfig,
    params: &ParamStore,
    ds: &TimeSeriesDataset,
    split: Split,
    stay_ids: &[String],
    reduction: Reduction,
    checkpoint: &str,
) -> Result<AttentionReport> {
    let ge = grouped_with_attention(model)?;
    let k = ge.scheme.len();
    let mut within: Vec<ExactMean> = ge.scheme.groups.iter().map(|g| ExactMean::new(g.indices.len() + 1)).collect();
    let mut between = ExactMean::new(k + 1);
    let mut over_time = Vec::new();
    let mut seen = 0usize;
    for stay in ds.split(split) {
        seen += 1;
        let att = extract_attention(model, params, stay, reduction)?;
        for (acc, rows) in within.iter_mut().zip(&att.within) {
            rows.iter().for_each(|r| acc.add(r));
        }
        att.between.iter().for_each(|r| between.add(r));
        if stay_ids.contains(&stay.id) {
            over_time.push(OverTime {
                stay_id: stay.id.clone(),
                weights: att.between.iter().map(|r| r[1..].to_vec()).collect(),
                cls_mass: att.between.iter().map(|r| r[0]).collect(),
            });
        }
    }
    if seen == 0 {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    if let Some(missing) = stay_ids.iter().find(|id| !over_time.iter().any(|o| &o.stay_id == *id)) {
        return Err(Error::Data(format!("stay {missing} not found in split {split}")));
    }
    over_time.sort_by(|a, b| a.stay_id.cmp(&b.stay_id));
    let between_mean = between.mean();
    Ok(AttentionReport {
        within: ge
            .scheme
            .groups
            .iter()
            .zip(&within)
            .map(|(g, acc)| {
                let m = acc.mean();
                GroupWeights {
                    group: g.name.clone(),
                    features: g.indices.iter().map(|&j| ds.feature_names[j].clone()).collect(),
                    weights: m[1..].to_vec(),
                    cls_mass: m[0],
                }
            })
            .collect(),
        groups: ge.scheme.groups.iter().map(|g| g.name.clone()).collect(),
        between: between_mean[1..].to_vec(),
        between_cls_mass: between_mean[0],
        over_time,
        checkpoint: checkpoint.to_string(),
        split,
        reduction: reduction.to_string(),
        timesteps: between.count,
    })
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN: f64 = 60.0;

fn svg_frame(title: &str, x_label: &str, y_label: &str, body: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        SVG_W / 2.0,
        xml_escape(title)
    );
    let (x0, y0, x1) = (MARGIN, SVG_H - MARGIN, SVG_W - MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{MARGIN}" stroke="black"/>"#);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = y0 - v * (y0 - MARGIN);
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end" font-size="10">{v:.2}</text>"#, x0 - 6.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        SVG_W / 2.0,
        SVG_H - 12.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0,
        xml_escape(y_label)
    );
    s.push_str(body);
    s.push_str("</svg>\n");
    s
}

/// Bar chart of weights in `[0, 1]`.
pub fn bar_chart_svg(title: &str, x_label: &str, labels: &[String], values: &[f64]) -> String {
    let plot_w = SVG_W - 2.0 * MARGIN;
    let plot_h = SVG_H - 2.0 * MARGIN;
    let slot = plot_w / labels.len().max(1) as f64;
    let mut body = String::new();
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let h = v.clamp(0.0, 1.0) * plot_h;
        let x = MARGIN + i as f64 * slot + slot * 0.1;
        let _ = writeln!(
            body,
            r##"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="#4878a8"><title>{}: {v:.4}</title></rect>"##,
            SVG_H - MARGIN - h,
            slot * 0.8,
            xml_escape(label)
        );
        let _ = writeln!(
            body,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
            x + slot * 0.4,
            SVG_H - MARGIN + 14.0,
            xml_escape(label)
        );
    }
    svg_frame(title, x_label, "attention weight", &body)
}

/// One polyline per series over time.
pub fn line_chart_svg(title: &str, series_names: &[String], series: &[Vec<f64>]) -> String {
    const COLORS: [&str; 8] = ["#4878a8", "#d65f5f", "#6acc64", "#956cb4", "#8c613c", "#dc7ec0", "#797979", "#d5bb67"];
    let plot_w = SVG_W - 2.0 * MARGIN;
    let plot_h = SVG_H - 2.0 * MARGIN;
    let steps = series.first().map_or(0, Vec::len);
    let dx = if steps > 1 { plot_w / (steps - 1) as f64 } else { 0.0 };
    let mut body = String::new();
    for (k, (name, ys)) in series_names.iter().zip(series).enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(t, &y)| format!("{:.1},{:.1}", MARGIN + t as f64 * dx, SVG_H - MARGIN - y.clamp(0.0, 1.0) * plot_h))
            .collect();
        let _ = writeln!(
            body,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            body,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="{color}">{}</text>"#,
            SVG_W - MARGIN + 4.0,
            MARGIN + 14.0 * k as f64,
            xml_escape(name)
        );
    }
    svg_frame(title, "time step", "attention weight", &body)
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `within_<group>.csv`, `between.csv`, `over_time_<stay>.csv`,
/// a matching SVG for each, and `cls_mass.csv` with the CLS self-attention
/// of every component. Returns the paths written.
pub fn emit_report(report: &AttentionReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: Option<String>, csv: Option<(Vec<String>, Vec<Vec<String>>)>| -> Result<()> {
        let p = out_dir.join(name);
        match (body, csv) {
            (Some(b), _) => std::fs::write(&p, b)?,
            (None, Some((h, rows))) => write_csv(&p, &h, &rows)?,
            (None, None) => unreachable!(),
        }
        written.push(p);
        Ok(())
    };
    let s = |v: &str| v.to_string();

    for gw in &report.within {
        let stem = format!("within_{}", file_safe(&gw.group));
        let rows = gw.features.iter().zip(&gw.weights).map(|(f, w)| vec![f.clone(), w.to_string()]).collect();
        put(format!("{stem}.csv"), None, Some((vec![s("feature"), s("weight")], rows)))?;
        let svg = bar_chart_svg(&format!("Within-group attention: {}", gw.group), "feature", &gw.features, &gw.weights);
        put(format!("{stem}.svg"), Some(svg), None)?;
    }

    let rows = report.groups.iter().zip(&report.between).map(|(g, w)| vec![g.clone(), w.to_string()]).collect();
    put(s("between.csv"), None, Some((vec![s("group"), s("weight")], rows)))?;
    put(
        s("between.svg"),
        Some(bar_chart_svg("Between-group attention", "group", &report.groups, &report.between)),
        None,
    )?;

    for ot in &report.over_time {
        let stem = format!("over_time_{}", file_safe(&ot.stay_id));
        let mut header = vec![s("time")];
        header.extend(report.groups.iter().cloned());
        let rows = ot
            .weights
            .iter()
            .enumerate()
            .map(|(t, r)| std::iter::once(t.to_string()).chain(r.iter().map(f64::to_string)).collect())
            .collect();
        put(format!("{stem}.csv"), None, Some((header, rows)))?;
        let series: Vec<Vec<f64>> =
            (0..report.groups.len()).map(|k| ot.weights.iter().map(|r| r[k]).collect()).collect();
        let svg =
            line_chart_svg(&format!("Between-group attention over time: {}", ot.stay_id), &report.groups, &series);
        put(format!("{stem}.svg"), Some(svg), None)?;
    }

    let mut rows = vec![vec![s("aggregator"), report.between_cls_mass.to_string()]];
    rows.extend(report.within.iter().map(|gw| vec![format!("group:{}", gw.group), gw.cls_mass.to_string()]));
    put(s("cls_mass.csv"), None, Some((vec![s("component"), s("weight")], rows)))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{BackboneKind, BackboneSpec, HeadKind, PredictionMode};
    use crate::datapipe::{generate_synthetic, preprocess, SyntheticSpec, TaskKind};
    use crate::encoders::EncoderSpec;
    use crate::grouping::{AggregatorSpec, GroupingScheme};

    fn model(scheme: GroupingScheme, d: usize) -> ModelConfig {
        ModelConfig {
            input_dim: d,
            embedding: Embedding::Grouped(GroupedEncoder {
                scheme,
                encoder: EncoderSpec {
                    kind: EncoderKind::Ftt,
                    input_dim: 0,
                    output_dim: 4,
                    depth: 2,
                    hidden_dim: 4,
                    token_dim: 4,
                    heads: 2,
                    dropout: 0.0,
                    attention_dropout: 0.0,
                },
                aggregator: AggregatorSpec {
                    method: AggregationMethod::Attention,
                    agg_depth: 2,
                    agg_heads: 2,
                    output_dim: 4,
                    dropout: 0.0,
                    attention_dropout: 0.0,
                },
            }),
            backbone: BackboneSpec {
                kind: BackboneKind::Gru,
                hidden_dim: 4,
                depth: 1,
                heads: 1,
                kernel_size: 2,
                dilation_base: 2,
                dropout: 0.0,
                attention_dropout: 0.0,
                head: HeadKind::Binary,
                prediction: PredictionMode::PerStep,
            },
        }
    }

    fn data() -> TimeSeriesDataset {
        let spec = SyntheticSpec::new(4, 20, 6, 3, 3, 0.3, TaskKind::OnlineBinary);
        preprocess(&generate_synthetic(&spec).unwrap().0).unwrap()
    }

    fn sums_to_one(row: &[f64]) -> bool {
        (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9 && row.iter().all(|w| (0.0..=1.0).contains(w))
    }

    #[test]
    fn rows_are_distributions() {
        let ds = data();
        let m = model(ds.grouping.clone().unwrap(), 9);
        let p = m.init(0).unwrap();
        for heads in [HeadReduction::Mean, HeadReduction::Max] {
            for layer in [LayerChoice::Last, LayerChoice::Index(0)] {
                let att = extract_attention(&m, &p, &ds.stays[0], Reduction { layer, heads }).unwrap();
                let t = ds.stays[0].len(9);
                assert_eq!(att.between.len(), t);
                assert!(att.between.iter().all(|r| r.len() == 4 && sums_to_one(r)));
                for rows in &att.within {
                    assert!(rows.iter().all(|r| r.len() == 4 && sums_to_one(r)));
                }
            }
        }
        let bad = Reduction { layer: LayerChoice::Index(2), heads: HeadReduction::Mean };
        assert!(extract_attention(&m, &p, &ds.stays[0], bad).is_err());
    }

    #[test]
    fn single_group_and_single_feature() {
        let mut ds = data();
        ds.feature_names.truncate(1);
        for s in &mut ds.stays {
            s.x = s.x.chunks(9).map(|r| r[0]).collect();
            s.observed = s.observed.chunks(9).map(|r| r[0]).collect();
        }
        let m = model(GroupingScheme::new("one", vec![("only".into(), vec![0])]), 1);
        let p = m.init(1).unwrap();
        let att = extract_attention(&m, &p, &ds.stays[0], Reduction::default()).unwrap();
        assert!(att.between.iter().all(|r| r.len() == 2 && sums_to_one(r)));
        assert!(att.within[0].iter().all(|r| r.len() == 2 && sums_to_one(r)));
    }

    #[test]
    fn three_step_stay_has_three_rows() {
        let mut ds = data();
        let s = &mut ds.stays[0];
        s.x.truncate(3 * 9);
        s.observed.truncate(3 * 9);
        let m = model(ds.grouping.clone().unwrap(), 9);
        let p = m.init(2).unwrap();
        assert_eq!(extract_attention(&m, &p, &ds.stays[0], Reduction::default()).unwrap().between.len(), 3);
    }

    #[test]
    fn models_without_attention_are_rejected() {
        let ds = data();
        let mut m = model(ds.grouping.clone().unwrap(), 9);
        let p = m.init(0).unwrap();
        if let Embedding::Grouped(ge) = &mut m.embedding {
            ge.aggregator.method = AggregationMethod::Mean;
        }
        let err = extract_attention(&m, &p, &ds.stays[0], Reduction::default()).unwrap_err();
        assert!(matches!(&err, Error::NoAttention(msg) if msg.contains("aggregator")), "{err}");
        m.embedding = Embedding::None;
        assert!(matches!(extract_attention(&m, &p, &ds.stays[0], Reduction::default()), Err(Error::NoAttention(_))));
    }

    fn one_stay_split(ds: &TimeSeriesDataset, i: usize, copies: usize) -> TimeSeriesDataset {
        let mut out = ds.clone();
        let mut s = ds.stays[i].clone();
        s.split = Split::Test;
        out.stays = (0..copies).map(|_| s.clone()).collect();
        out
    }

    #[test]
    fn report_of_single_step_equals_extraction() {
        let ds = data();
        let m = model(ds.grouping.clone().unwrap(), 9);
        let p = m.init(3).unwrap();
        let mut one = one_stay_split(&ds, 0, 1);
        one.stays[0].x.truncate(9);
        one.stays[0].observed.truncate(9);
        if let crate::datapipe::Labels::PerStep { values, valid } = &mut one.stays[0].labels {
            values.truncate(1);
            valid.truncate(1);
        }
        let att = extract_attention(&m, &p, &one.stays[0], Reduction::default()).unwrap();
        let r = aggregate_report(&m, &p, &one, Split::Test, &[], Reduction::default(), "ck").unwrap();
        for (a, b) in r.between.iter().zip(&att.between[0][1..]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((r.between_cls_mass - att.between[0][0]).abs() < 1e-15);
        assert!((r.within[1].weights[2] - att.within[1][0][3]).abs() < 1e-15);
    }

    #[test]
    fn report_is_order_and_duplication_invariant() {
        let ds = data();
        let m = model(ds.grouping.clone().unwrap(), 9);
        let p = m.init(4).unwrap();
        let once =
            aggregate_report(&m, &p, &one_stay_split(&ds, 2, 1), Split::Test, &[], Reduction::default(), "ck").unwrap();
        let twice =
            aggregate_report(&m, &p, &one_stay_split(&ds, 2, 2), Split::Test, &[], Reduction::default(), "ck").unwrap();
        assert_eq!(once.between, twice.between);
        assert_eq!(once.within, twice.within);

        let ids: Vec<String> = ds.split(Split::Test).map(|s| s.id.clone()).collect();
        let forward = aggregate_report(&m, &p, &ds, Split::Test, &ids, Reduction::default(), "ck").unwrap();
        let mut rev = ds.clone();
        rev.stays.reverse();
        let backward = aggregate_report(&m, &p, &rev, Split::Test, &ids, Reduction::default(), "ck").unwrap();
        assert_eq!(forward, backward);
        let total: f64 = forward.between.iter().sum::<f64>() + forward.between_cls_mass;
        assert!((total - 1.0).abs() < 1e-9);
        assert!(aggregate_report(&m, &p, &ds, Split::Test, &["nope".into()], Reduction::default(), "ck").is_err());
    }

    #[test]
    fn emitted_files_are_complete_and_deterministic() {
        let ds = data();
        let m = model(ds.grouping.clone().unwrap(), 9);
        let p = m.init(5).unwrap();
        let id = ds.split(Split::Val).next().unwrap().id.clone();
        let report =
            aggregate_report(&m, &p, &ds, Split::Val, std::slice::from_ref(&id), Reduction::default(), "ck").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&report, dir.path()).unwrap();
        let between = std::fs::read_to_string(dir.path().join("between.csv")).unwrap();
        assert_eq!(between.lines().count(), 1 + 3);
        let over = std::fs::read_to_string(dir.path().join(format!("over_time_{id}.csv"))).unwrap();
        let t = ds.stays.iter().find(|s| s.id == id).unwrap().len(9);
        assert_eq!(over.lines().count(), 1 + t);
        assert_eq!(over.lines().next().unwrap(), "time,group0,group1,group2");
        for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == "svg")) {
            let text = std::fs::read_to_string(f).unwrap();
            let doc = roxmltree::Document::parse(&text).unwrap();
            assert_eq!(doc.root_element().tag_name().name(), "svg");
            assert!(text.contains("attention weight"));
        }
        let dir2 = tempfile::tempdir().unwrap();
        emit_report(&report, dir2.path()).unwrap();
        for f in &files {
            let name = f.file_name().unwrap();
            assert_eq!(std::fs::read(f).unwrap(), std::fs::read(dir2.path().join(name)).unwrap());
        }
    }

    #[test]
    fn escaping_keeps_svg_well_formed() {
        let svg = bar_chart_svg("a <b> & \"c\"", "x", &["p&q".into()], &[0.5]);
        roxmltree::Document::parse(&svg).unwrap();
    }
}
