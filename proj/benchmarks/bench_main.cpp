#include <benchmark/benchmark.h>

#include "protoseg/encoder.hpp"
#include "protoseg/episodes.hpp"
#include "protoseg/refine.hpp"

using namespace protoseg;

namespace {

DenseArray<float> random_image(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
    Rng rng(seed);
    DenseArray<float> img({c, h, w});
    for (float& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

void BM_conv2d_forward(benchmark::State& state) {
    const std::size_t s = static_cast<std::size_t>(state.range(0));
    DenseArray<float> img = random_image(3, s, s, 1);
    DenseArray<float> kernel({16, 3, 3, 3});
    Rng rng(2);
    for (float& v : kernel.data) v = static_cast<float>(rng.normal() * 0.1);
    for (auto _ : state) {
        Graph<float> g;
        Node<float>* out = g.conv2d(g.constant(img), g.constant(kernel), 1, 1, 1);
        benchmark::DoNotOptimize(out->value.data.data());
    }
}
BENCHMARK(BM_conv2d_forward)->Arg(32)->Arg(64);

void BM_encoder_backward(benchmark::State& state) {
    const std::size_t s = static_cast<std::size_t>(state.range(0));
    EncoderParams<float> p = init_encoder<float>(EncoderConfig{}, 7);
    DenseArray<float> img = random_image(3, s, s, 3);
    for (auto _ : state) {
        Graph<float> g;
        Node<float>* f = extract_features(g, p, img, true);
        Node<float>* loss = g.mean(f, {0, 1, 2});
        g.backward(loss);
        benchmark::DoNotOptimize(loss->value.data[0]);
    }
}
BENCHMARK(BM_encoder_backward)->Arg(32)->Arg(64);

void BM_episode_refine(benchmark::State& state) {
    SynthConfig sc;
    sc.image_size = 32;
    SynthDataset ds(sc, 50, 11);
    DatasetSplit split{make_folds(ds.class_ids()), 0, false};
    EncoderParams<float> p = init_encoder<float>(EncoderConfig{}, 7);
    RefineConfig<float> rc;
    rc.adapt_steps = static_cast<int>(state.range(0));
    std::uint64_t seed = 0;
    for (auto _ : state) {
        Episode ep = sample_episode(ds, split, 1, 1, 1, seed++);
        RefineResult<float> r = refine_and_segment(p, ep.data, rc);
        benchmark::DoNotOptimize(r.query_masks[0].v.data());
    }
}
BENCHMARK(BM_episode_refine)->Arg(0)->Arg(5);

}  // namespace

BENCHMARK_MAIN();
