use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use wrap_core::explore::{suite_case, SuiteConfig};
use wrap_core::golden::golden_trace;
use wrap_core::workload::{run_workload, WorkloadKind, WorkloadSpec};
use wrap_core::{check_all_ticks, inject_crash, recover, run, Method, Schedule, SimConfig};

fn hashtable_runs(c: &mut Criterion) {
    let spec = WorkloadSpec {
        kind: WorkloadKind::Hashtable,
        threads: 4,
        tx_count: 500,
        writes_per_tx: 10,
        read_write_ratio: 0.0,
        table_lines: 1 << 12,
        seed: 7,
    };
    let mut g = c.benchmark_group("hashtable_500tx");
    for method in [Method::Wrap, Method::PtlEager, Method::HtmOnly] {
        let cfg = SimConfig {
            method,
            full_trace: false,
            ..SimConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(method.name()), &cfg, |b, cfg| {
            b.iter(|| run_workload(&spec, &Schedule::timed(7, 0.05), cfg).unwrap())
        });
    }
    g.finish();
}

fn checker(c: &mut Criterion) {
    let case = suite_case(3, &SuiteConfig::default());
    let trace = run(&case.workload, &case.config, &case.schedule).unwrap();
    c.bench_function("check_all_ticks_suite_case", |b| {
        b.iter(|| check_all_ticks(black_box(&trace)).unwrap())
    });
}

fn recovery(c: &mut Criterion) {
    let trace = golden_trace().unwrap();
    let image = inject_crash(&trace, trace.last_tick()).unwrap().image;
    c.bench_function("recover_worked_example", |b| b.iter(|| recover(black_box(&image)).unwrap()));
}

criterion_group!(benches, hashtable_runs, checker, recovery);
criterion_main!(benches);
