//! Data-parallel core against its sequential fallback.
//!
//! Each workload runs on the rayon global pool and again inside a
//! one-thread pool. Build with `--no-default-features` to time the plain
//! sequential code path; the group names carry the build mode so criterion
//! keeps both histories apart.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use boundary_engine::eval::{evaluate, EvalConfig};
use boundary_engine::mcnn::{self, McnnConfig};
use boundary_engine::model::Model;
use boundary_engine::parallel::is_parallel;
use boundary_engine::pipeline::PipelineConfig;
use boundary_engine::synth::{gen_synthetic, SyntheticSpec};
use boundary_engine::{agcn, Tape, Tensor};

fn mode() -> &'static str {
    if is_parallel() {
        "rayon"
    } else {
        "sequential-build"
    }
}

/// Runs `f` on the global pool and on a single worker.
fn both<F: Fn() + Sync>(c: &mut Criterion, group: &str, f: F) {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut g = c.benchmark_group(format!("{group}/{}", mode()));
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("pool", rayon::current_num_threads()), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("single", 1), |b| b.iter(|| single.install(&f)));
    g.finish();
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[32, 64, 256]);
    let w = random(&mut rng, &[64, 32, 3, 3]);
    let bias = random(&mut rng, &[64]);
    both(c, "conv2d 32->64 on 64x256", || {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(bias.clone()));
        t.conv2d(xv, wv, bv, 1, 1).unwrap();
    });
}

fn synth(c: &mut Criterion) {
    let spec = SyntheticSpec {
        count: 64,
        ..SyntheticSpec::default()
    };
    both(c, "gen_synthetic 64", || {
        gen_synthetic(&spec, 1).unwrap();
    });
}

fn eval(c: &mut Criterion) {
    let spec = SyntheticSpec {
        count: 16,
        ..SyntheticSpec::default()
    };
    let samples = gen_synthetic(&spec, 2).unwrap();
    let cfg = PipelineConfig::desk();
    let model = Model {
        mcnn: mcnn::init_weights(&McnnConfig::desk(), 0).unwrap(),
        agcn: agcn::init_weights(&cfg.agcn, 1).unwrap(),
        contour: cfg.contour,
        refine: true,
    };
    both(c, "evaluate 16 crops", || {
        evaluate(&model, &samples, &EvalConfig::default()).unwrap();
    });
}

criterion_group!(benches, conv, synth, eval);
criterion_main!(benches);
