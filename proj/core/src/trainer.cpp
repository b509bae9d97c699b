#include "protoseg/trainer.hpp"

#include <cmath>

#include "protoseg/protocore.hpp"
#include "protoseg/rng.hpp"

namespace protoseg {

namespace {

void flip_episode(EpisodeData<float>& ep) {
    for (auto& shots : ep.support_images)
        for (auto& img : shots) img = hflip(img);
    for (auto& shots : ep.support_masks)
        for (auto& m : shots) m = hflip(m);
    for (auto& img : ep.query_images) img = hflip(img);
    for (auto& m : ep.query_masks) m = hflip(m);
}

}  // namespace

TrainState train(const Dataset& dataset, const DatasetSplit& split, const TrainConfig& config,
                 TrainState state, const ProgressSink& progress, const CheckpointSink& checkpoint) {
    config.validate();

    std::vector<DenseArray<float>*> flat;
    for (auto& k : state.params.kernels) flat.push_back(&k);
    for (auto& b : state.params.biases) flat.push_back(&b);
    if (state.sgd.velocity.empty()) state.sgd = SgdState<float>::zeros_like(flat);
    if (state.adam.m.empty()) state.adam = AdamState<float>::zeros_like(flat);

    for (long iter = state.iteration; iter < config.iterations; ++iter) {
        // episode and augmentation draw are pure functions of (seed, iter),
        // which is what makes checkpoint resume bit-exact
        Rng iter_rng(hash_combine(config.seed, static_cast<std::uint64_t>(iter)));
        Episode ep = sample_episode(dataset, split, config.n_way, config.k_shot, config.n_query,
                                    iter_rng.bits());
        if (config.hflip_augment && iter_rng.coin(0.5)) flip_episode(ep.data);

        const double lr = config.lr_at(iter);

        Graph<float> g;
        std::vector<Node<float>*> ks, bs;
        for (auto& k : state.params.kernels) ks.push_back(g.leaf(k));
        for (auto& b : state.params.biases) bs.push_back(g.leaf(b));
        Node<float>* loss = bidirectional_loss_node(g, state.params.config, ks, bs, ep.data,
                                                    static_cast<float>(config.temperature));
        const double loss_v = static_cast<double>(loss->value.data[0]);
        if (!std::isfinite(loss_v)) throw TrainDivergedError(iter, lr);
        g.backward(loss);

        std::vector<const DenseArray<float>*> grads;
        for (Node<float>* k : ks) grads.push_back(&k->grad);
        for (Node<float>* b : bs) grads.push_back(&b->grad);
        if (config.optimizer == TrainConfig::Optimizer::sgd_momentum) {
            sgd_step(flat, grads, state.sgd, static_cast<float>(lr),
                     static_cast<float>(config.momentum), static_cast<float>(config.weight_decay));
        } else {
            adam_step(flat, grads, state.adam, static_cast<float>(lr));
        }
        state.iteration = iter + 1;

        if (progress && (iter == 0 || (iter + 1) % 50 == 0))
            progress({iter + 1, loss_v, lr});
        if (checkpoint && (iter + 1) % config.decay_interval == 0 && iter + 1 < config.iterations)
            checkpoint(state);
    }
    if (checkpoint) checkpoint(state);
    return state;
}

TrainState train(const Dataset& dataset, const DatasetSplit& split, const TrainConfig& config,
                 const EncoderConfig& encoder_config, const ProgressSink& progress,
                 const CheckpointSink& checkpoint) {
    TrainState state;
    state.params = init_encoder<float>(encoder_config, config.seed);
    return train(dataset, split, config, std::move(state), progress, checkpoint);
}

}  // namespace protoseg
