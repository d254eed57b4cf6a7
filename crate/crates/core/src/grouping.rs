//! Feature grouping: partitions of the feature set into concepts, one encoder
//! per concept, and the aggregation of concept embeddings into a single
//! timestep embedding.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Var};
use crate::encoders::{self, Encoded, EncoderSpec};
use crate::error::{Error, PartitionError, Result};
use crate::nn::{self, BlockSpec};

/// Upper bound on `K * group_dim` for concatenation aggregation.
pub const MAX_CONCAT_WIDTH: usize = 4096;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    /// Feature indices, in the order the group's encoder sees them.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingScheme {
    pub name: String,
    pub groups: Vec<Group>,
}

impl GroupingScheme {
    pub fn new(name: impl Into<String>, groups: Vec<(String, Vec<usize>)>) -> Self {
        Self { name: name.into(), groups: groups.into_iter().map(|(name, indices)| Group { name, indices }).collect() }
    }

    /// A single group holding every feature in order.
    pub fn single(d: usize) -> Self {
        Self::new("none", vec![("all".to_string(), (0..d).collect())])
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group index of every feature. Assumes a valid partition.
    pub fn group_of(&self, d: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; d];
        for (k, g) in self.groups.iter().enumerate() {
            for &i in &g.indices {
                if i < d {
                    out[i] = k;
                }
            }
        }
        out
    }
}

/// Checks that the groups are nonempty, pairwise disjoint and cover `0..d`.
pub fn validate_partition(scheme: &GroupingScheme, d: usize) -> Result<(), PartitionError> {
    if scheme.groups.is_empty() {
        return Err(PartitionError::NoGroups);
    }
    if let Some(g) = scheme.groups.iter().find(|g| g.indices.is_empty()) {
        return Err(PartitionError::EmptyGroup(g.name.clone()));
    }
    let mut seen = vec![0usize; d];
    for g in &scheme.groups {
        for &i in &g.indices {
            if i >= d {
                return Err(PartitionError::OutOfRange { index: i, d });
            }
            seen[i] += 1;
        }
    }
    let overlap: Vec<usize> = (0..d).filter(|&i| seen[i] > 1).collect();
    if !overlap.is_empty() {
        return Err(PartitionError::Overlap(overlap));
    }
    let missing: Vec<usize> = (0..d).filter(|&i| seen[i] == 0).collect();
    if !missing.is_empty() {
        return Err(PartitionError::Uncovered(missing));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMethod {
    #[default]
    Mean,
    Sum,
    /// Order-sensitive: concatenates in scheme order.
    Concat,
    Attention,
}

impl std::str::FromStr for AggregationMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "avg" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            "concat" => Ok(Self::Concat),
            "attention" => Ok(Self::Attention),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSpec {
    pub method: AggregationMethod,
    pub agg_depth: usize,
    pub agg_heads: usize,
    pub output_dim: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
}

impl AggregatorSpec {
    pub fn validate(&self, groups: usize, group_dim: usize) -> Result<()> {
        if self.output_dim == 0 {
            return Err(Error::Config("aggregator output_dim must be positive".into()));
        }
        match self.method {
            AggregationMethod::Concat if groups * group_dim > MAX_CONCAT_WIDTH => {
                Err(Error::Config(format!("concat width {groups} x {group_dim} exceeds {MAX_CONCAT_WIDTH}")))
            }
            AggregationMethod::Attention => {
                if self.agg_depth == 0 {
                    return Err(Error::Config("agg_depth must be at least 1".into()));
                }
                self.block_spec(group_dim).validate()
            }
            _ => Ok(()),
        }
    }

    fn block_spec(&self, group_dim: usize) -> BlockSpec {
        BlockSpec {
            width: group_dim,
            heads: self.agg_heads,
            ffn_hidden: 2 * group_dim,
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            causal: false,
        }
    }
}

pub fn init_aggregator(
    store: &mut ParamStore,
    prefix: &str,
    spec: &AggregatorSpec,
    groups: usize,
    group_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    spec.validate(groups, group_dim)?;
    match spec.method {
        AggregationMethod::Mean | AggregationMethod::Sum => {
            store.init_linear(&format!("{prefix}.out"), group_dim, spec.output_dim, rng)
        }
        AggregationMethod::Concat => {
            store.init_linear(&format!("{prefix}.out"), groups * group_dim, spec.output_dim, rng)
        }
        AggregationMethod::Attention => {
            nn::init_cls_stack(store, &format!("{prefix}.tf"), spec.agg_depth, &spec.block_spec(group_dim), rng);
            store.init_linear(&format!("{prefix}.out"), group_dim, spec.output_dim, rng);
        }
    }
    Ok(())
}

/// Aggregated timestep embedding.
pub struct Aggregated {
    /// `[N, output_dim]`
    pub h: Var,
    /// Attention aggregation only: per-layer `[N, heads, q_rows, K + 1]`, token 0 is CLS.
    pub attention: Vec<Var>,
}

/// Combines `K` concept embeddings `[N, e]` into one `[N, output_dim]` embedding.
pub fn aggregate(
    g: &mut Graph,
    prefix: &str,
    spec: &AggregatorSpec,
    h_list: &[Var],
    full_attention: bool,
) -> Result<Aggregated> {
    let first = match h_list.first() {
        Some(v) => g.shape(*v).to_vec(),
        None => return Err(Error::Config("aggregate needs at least one group".into())),
    };
    if first.len() != 2 || h_list.iter().any(|v| g.shape(*v) != first.as_slice()) {
        let shapes: Vec<Vec<usize>> = h_list.iter().map(|v| g.shape(*v).to_vec()).collect();
        return Err(Error::Shape {
            op: "aggregate",
            detail: format!("group embeddings must share one [N, e] shape, got {shapes:?}"),
        });
    }
    let (n, e) = (first[0], first[1]);
    let k = h_list.len();
    spec.validate(k, e)?;
    let out = format!("{prefix}.out");
    match spec.method {
        AggregationMethod::Mean | AggregationMethod::Sum => {
            let mut acc = h_list[0];
            for &h in &h_list[1..] {
                acc = g.add(acc, h)?;
            }
            if spec.method == AggregationMethod::Mean && k > 1 {
                acc = g.scale(acc, 1.0 / k as f64);
            }
            Ok(Aggregated { h: nn::linear(g, &out, acc)?, attention: Vec::new() })
        }
        AggregationMethod::Concat => {
            let cat = if k == 1 { h_list[0] } else { g.concat(h_list, 1)? };
            Ok(Aggregated { h: nn::linear(g, &out, cat)?, attention: Vec::new() })
        }
        AggregationMethod::Attention => {
            let rows: Vec<Var> = h_list.iter().map(|&h| g.reshape(h, &[n, 1, e])).collect::<Result<_>>()?;
            let tokens = if k == 1 { rows[0] } else { g.concat(&rows, 1)? };
            let stack =
                nn::cls_stack(g, &format!("{prefix}.tf"), tokens, spec.agg_depth, &spec.block_spec(e), full_attention)?;
            Ok(Aggregated { h: nn::linear(g, &out, stack.cls)?, attention: stack.attention })
        }
    }
}

/// Per-group encoders (one shared architecture, independent parameters)
/// followed by an aggregator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedEncoder {
    pub scheme: GroupingScheme,
    /// Architecture shared by every group; `input_dim` is overridden per group
    /// and `output_dim` is the concept-embedding width.
    pub encoder: EncoderSpec,
    pub aggregator: AggregatorSpec,
}

/// Output of a grouped forward pass.
pub struct GroupedOutput {
    pub h: Var,
    pub concepts: Vec<Var>,
    pub group_attention: Vec<Vec<Var>>,
    pub aggregator_attention: Vec<Var>,
}

impl GroupedEncoder {
    pub fn group_spec(&self, k: usize) -> EncoderSpec {
        EncoderSpec { input_dim: self.scheme.groups[k].indices.len(), ..self.encoder.clone() }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        validate_partition(&self.scheme, d)?;
        for k in 0..self.scheme.len() {
            self.group_spec(k).validate()?;
        }
        self.aggregator.validate(self.scheme.len(), self.encoder.output_dim)
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        self.validate(d)?;
        for k in 0..self.scheme.len() {
            encoders::init_encoder(store, &format!("{prefix}.group{k}"), &self.group_spec(k), rng)?;
        }
        init_aggregator(
            store,
            &format!("{prefix}.agg"),
            &self.aggregator,
            self.scheme.len(),
            self.encoder.output_dim,
            rng,
        )
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var, full_attention: bool) -> Result<GroupedOutput> {
        let mut concepts = Vec::with_capacity(self.scheme.len());
        let mut group_attention = Vec::with_capacity(self.scheme.len());
        for k in 0..self.scheme.len() {
            let enc = concept_embed(g, prefix, self, k, x, full_attention)?;
            concepts.push(enc.h);
            group_attention.push(enc.attention);
        }
        let agg = aggregate(g, &format!("{prefix}.agg"), &self.aggregator, &concepts, full_attention)?;
        Ok(GroupedOutput { h: agg.h, concepts, group_attention, aggregator_attention: agg.attention })
    }
}

/// Concept embedding of group `k`: slices `x[:, M_k]` in the scheme's
/// declared order and applies that group's encoder.
pub fn concept_embed(
    g: &mut Graph,
    prefix: &str,
    grouped: &GroupedEncoder,
    k: usize,
    x: Var,
    full_attention: bool,
) -> Result<Encoded> {
    let group = grouped.scheme.groups.get(k).ok_or_else(|| Error::Config(format!("group index {k} out of range")))?;
    let d = g.shape(x)[1];
    if let Some(&bad) = group.indices.iter().find(|&&i| i >= d) {
        return Err(PartitionError::OutOfRange { index: bad, d }.into());
    }
    let xs = if group.indices.iter().copied().eq(0..d) { x } else { g.index_select(x, 1, &group.indices)? };
    encoders::encode(g, &format!("{prefix}.group{k}"), &grouped.group_spec(k), xs, full_attention)
}
