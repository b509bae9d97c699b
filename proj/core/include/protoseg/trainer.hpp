#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/encoder.hpp"
#include "protoseg/episodes.hpp"
#include "protoseg/optim.hpp"

namespace protoseg {

/// Episodic end-to-end training of the encoder under the bidirectional
/// objective: one episode per iteration, SGD-momentum with L2 weight decay
/// and step lr decay by default.
struct TrainConfig {
    enum class Optimizer { sgd_momentum, adam };
    Optimizer optimizer = Optimizer::sgd_momentum;
    double learning_rate = 7e-3;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double lr_decay_factor = 0.1;
    long decay_interval = 1000;
    long iterations = 3000;
    bool hflip_augment = true;
    int n_way = 1;
    int k_shot = 1;
    int n_query = 1;
    double temperature = 20.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (learning_rate <= 0) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
        if (decay_interval <= 0) throw std::invalid_argument("TrainConfig: decay_interval must be > 0");
        if (iterations < 0) throw std::invalid_argument("TrainConfig: iterations must be >= 0");
    }

    double lr_at(long iteration) const {
        double lr = learning_rate;
        for (long i = 0; i < iteration / decay_interval; ++i) lr *= lr_decay_factor;
        return lr;
    }
};

struct TrainLogEntry {
    long iteration = 0;
    double loss = 0;
    double lr = 0;
};

struct TrainDivergedError : std::runtime_error {
    TrainDivergedError(long iteration, double lr)
        : std::runtime_error("training loss became non-finite at iteration " +
                             std::to_string(iteration) + " (lr " + std::to_string(lr) + ")"),
          iteration(iteration),
          lr(lr) {}
    long iteration;
    double lr;
};

struct TrainState {
    EncoderParams<float> params;
    SgdState<float> sgd;
    AdamState<float> adam;
    long iteration = 0;  // iterations already completed
};

using ProgressSink = std::function<void(const TrainLogEntry&)>;
using CheckpointSink = std::function<void(const TrainState&)>;

/// Runs config.iterations total iterations starting from state.iteration
/// (so a resumed run reproduces an uninterrupted one bit-for-bit: the
/// episode stream is a pure function of (seed, iteration)).
TrainState train(const Dataset& dataset, const DatasetSplit& split, const TrainConfig& config,
                 TrainState state, const ProgressSink& progress = nullptr,
                 const CheckpointSink& checkpoint = nullptr);

/// Fresh training run: encoder initialized from (encoder_config, seed).
TrainState train(const Dataset& dataset, const DatasetSplit& split, const TrainConfig& config,
                 const EncoderConfig& encoder_config, const ProgressSink& progress = nullptr,
                 const CheckpointSink& checkpoint = nullptr);

}  // namespace protoseg
