use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tokcom::autodiff::{Graph, Tensor};
use tokcom::channel::{sample_channel, FrameDraw, IdentityChannel};
use tokcom::receiver::{GenerationOptions, Item, SamplingNoise, TokenStrategy};
use tokcom::rng::{normal_vec, rng_from_seed};
use tokcom::{
    ChannelKind, Coder, CoderConfig, PackedSequence, Receiver, SourceSample, Tokenizer,
    TokenizerConfig,
};
use tokcom_bench::{gaussian_samples, small_receiver};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let mut rng = rng_from_seed(1);
        let a = Tensor::matrix(n, n, normal_vec(&mut rng, n * n))
            .unwrap()
            .with_grad();
        let b = Tensor::matrix(n, n, normal_vec(&mut rng, n * n)).unwrap();
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.leaf(a.clone());
                let y = g.leaf(b.clone());
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                black_box(g.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("causal_attention");
    for len in [8, 32, 64] {
        let (d, heads) = (32, 4);
        let mut rng = rng_from_seed(2);
        let mk = |rng: &mut _| {
            Tensor::matrix(len, d, normal_vec(rng, len * d))
                .unwrap()
                .with_grad()
        };
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        group.bench_with_input(
            BenchmarkId::new("forward_backward", len),
            &len,
            |bench, _| {
                bench.iter(|| {
                    let mut g = Graph::new();
                    let (q, k, v) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
                    let o = g.causal_attention(q, k, v, &[len], heads).unwrap();
                    let s = g.sum(o);
                    black_box(g.backward(s).unwrap());
                })
            },
        );
    }
    group.finish();
}

fn tokenizer_loss(c: &mut Criterion) {
    let cfg = TokenizerConfig {
        token_width: 2,
        ..TokenizerConfig::continuous(64, 8)
    };
    let tok = Tokenizer::new(cfg, 3).unwrap();
    let data = gaussian_samples(32, 64, 4);
    let refs: Vec<&SourceSample> = data.iter().collect();
    let draws = tok.noise_draws(refs.len(), &mut rng_from_seed(5));
    c.bench_function("sigma_genib_loss_backward_b32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let p = tok.params.bind(&mut g);
            let v = tok
                .loss_graph(&mut g, &p, &refs, &draws, &IdentityChannel)
                .unwrap();
            black_box(g.backward(v.total).unwrap());
        })
    });
}

fn channel(c: &mut Criterion) {
    let coder = Coder::new(CoderConfig::new(16, 2.0), &mut rng_from_seed(6)).unwrap();
    let mut rng = rng_from_seed(7);
    let latents: Vec<Vec<f64>> = (0..256).map(|_| normal_vec(&mut rng, 16)).collect();
    let frames: Vec<FrameDraw> = (0..256)
        .map(|_| {
            FrameDraw::sample(
                sample_channel(ChannelKind::Rayleigh, 10.0, 1.0, &mut rng),
                coder.symbols(),
                &mut rng,
            )
        })
        .collect();
    c.bench_function("coded_channel_256_frames", |bench| {
        bench.iter(|| black_box(coder.transmit_latents(&latents, &frames).unwrap()))
    });
}

fn generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("continuous_generation");
    group.sample_size(10);
    let rx = Receiver::new(small_receiver(2), 8).unwrap();
    let opts = GenerationOptions {
        strategy: TokenStrategy::Greedy,
        noise: SamplingNoise::Deterministic,
    };
    for tokens in [2, 8, 16] {
        let mut rng = rng_from_seed(9);
        let prefixes: Vec<PackedSequence> = (0..16)
            .map(|_| {
                let items = (0..tokens)
                    .map(|_| Item::Continuous(normal_vec(&mut rng, 2)))
                    .collect();
                PackedSequence::from_items(items, 16, 2).unwrap()
            })
            .collect();
        let plan = prefixes[0].modality_mask().to_vec();
        group.bench_with_input(BenchmarkId::new("batch16", tokens), &tokens, |bench, _| {
            bench.iter(|| {
                black_box(
                    rx.generate_batch(&prefixes, &plan, opts, &mut rng_from_seed(10), None)
                        .unwrap(),
                )
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    matmul,
    attention,
    tokenizer_loss,
    channel,
    generation
);
criterion_main!(benches);
