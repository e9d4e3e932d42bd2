use criterion::{criterion_group, criterion_main, Criterion};
use srn_bench::{images, model};
use srn_core::harness::model::{loss, Stage};
use srn_core::harness::DecoderKind;
use srn_core::nn::Ctx;
use srn_core::vsfd::LossWeights;

fn forward_backward(c: &mut Criterion) {
    let x = images(32);
    let labels: Vec<usize> = (0..32 * 8).map(|i| if i % 8 < 4 { i % 12 } else { 12 }).collect();
    let mut group = c.benchmark_group("train_step_b32");
    for kind in [DecoderKind::SrnNoGsrm, DecoderKind::Srn, DecoderKind::Serial] {
        let m = model(kind);
        group.bench_function(kind.name(), |b| {
            b.iter(|| {
                let mut cx = Ctx::new(&m.params, true);
                let xv = cx.constant(x.clone());
                let t = loss(&mut cx, &m.config, xv, &labels, Stage::Joint, &LossWeights::default()).unwrap();
                cx.g.backward(t.total).unwrap();
                cx.grads()
            })
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward_backward
}
criterion_main!(benches);
