use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use scs_core::losses::evaluate;
use scs_core::{BoundaryParams, FieldPartition, LossKind, ScalarHypers};
use scs_supcon_bench::random_batch;

fn bench_losses(c: &mut Criterion) {
    let partition = FieldPartition { d_common: 24, d_style: 8 };
    let params = BoundaryParams::default();
    let hypers = ScalarHypers::default();
    let mut group = c.benchmark_group("loss_forward_backward");
    for rows in [32usize, 64, 128] {
        let batch = random_batch(rows, partition, 8, rows as u64);
        group.throughput(Throughput::Elements((rows * rows) as u64));
        for kind in LossKind::ALL {
            group.bench_with_input(BenchmarkId::new(kind.name(), rows), &batch, |b, batch| {
                b.iter(|| evaluate(kind, black_box(batch), &params, &hypers, true).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_sigmoid_only(c: &mut Criterion) {
    let partition = FieldPartition { d_common: 24, d_style: 8 };
    let batch = random_batch(64, partition, 8, 1);
    let r = batch.z.column_block(0, 24);
    let sim = r.matmul_transposed(&r).unwrap();
    let pairs = scs_core::losses::build_pair_labels(&batch.labels).unwrap();
    let params = BoundaryParams::default();
    c.bench_function("sigmoid_pair_loss_64", |b| {
        b.iter(|| scs_core::losses::sigmoid_pair_loss(black_box(&sim), &pairs, &params, true).unwrap())
    });
}

criterion_group!(losses, bench_losses, bench_sigmoid_only);
criterion_main!(losses);
