#pragma once

#include <filesystem>

#include "protoseg/trainer.hpp"

namespace protoseg {

/// Checkpoint = one PTNS container holding the architecture descriptor,
/// kernels/biases, optimizer buffers and the iteration counter, so a
/// resumed run continues bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

/// Parameters only (no optimizer state), e.g. for eval inputs.
void save_encoder(const std::filesystem::path& path, const EncoderParams<float>& params);
EncoderParams<float> load_encoder(const std::filesystem::path& path);

}  // namespace protoseg
