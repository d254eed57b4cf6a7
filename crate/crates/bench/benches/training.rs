use criterion::{black_box, criterion_group, criterion_main, Criterion};
use stepwise_core::backbones::{BackboneKind, BackboneSpec, HeadKind, PredictionMode};
use stepwise_core::datapipe::{generate_synthetic, make_batches, preprocess, Split, SyntheticSpec, TaskKind};
use stepwise_core::diffcore::{Graph, Mode};
use stepwise_core::encoders::{EncoderKind, EncoderSpec};
use stepwise_core::grouping::{AggregationMethod, AggregatorSpec, GroupedEncoder};
use stepwise_core::model::{Embedding, ModelConfig};
use stepwise_core::trainer::batch_forward;

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_batch_step
}
criterion_main!(benches);

fn bench_batch_step(c: &mut Criterion) {
    let spec = SyntheticSpec::new(0, 64, 32, 4, 6, 0.3, TaskKind::OnlineBinary);
    let (raw, scheme) = generate_synthetic(&spec).unwrap();
    let ds = preprocess(&raw).unwrap();
    let batch = make_batches(&ds, Split::Train, 32, None).unwrap().remove(0);

    let encoder = EncoderSpec {
        kind: EncoderKind::Ftt,
        input_dim: 0,
        output_dim: 16,
        depth: 1,
        hidden_dim: 16,
        token_dim: 8,
        heads: 2,
        dropout: 0.0,
        attention_dropout: 0.0,
    };
    let mut group = c.benchmark_group("batch_step");
    for kind in [BackboneKind::Gru, BackboneKind::Transformer, BackboneKind::Tcn] {
        let model = ModelConfig {
            input_dim: ds.num_features(),
            embedding: Embedding::Grouped(GroupedEncoder {
                scheme: scheme.clone(),
                encoder: encoder.clone(),
                aggregator: AggregatorSpec {
                    method: AggregationMethod::Attention,
                    agg_depth: 1,
                    agg_heads: 2,
                    output_dim: 16,
                    dropout: 0.0,
                    attention_dropout: 0.0,
                },
            }),
            backbone: BackboneSpec {
                kind,
                hidden_dim: 32,
                depth: if kind == BackboneKind::Tcn { 5 } else { 1 },
                heads: 1,
                kernel_size: 2,
                dilation_base: 2,
                dropout: 0.0,
                attention_dropout: 0.0,
                head: HeadKind::Binary,
                prediction: PredictionMode::PerStep,
            },
        };
        let params = model.init(0).unwrap();
        group.bench_function(format!("{kind:?}"), |b| {
            b.iter(|| {
                let mut g = Graph::new(&params, Mode::Train, 0);
                let (_, loss) = batch_forward(&mut g, &model, TaskKind::OnlineBinary, &batch).unwrap();
                g.backward(loss.loss).unwrap();
                black_box(g.param_grads())
            })
        });
    }
    group.finish();
}
