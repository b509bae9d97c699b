#include "protoseg/checkpoint.hpp"

#include <map>

#include "protoseg/ptns.hpp"

namespace protoseg {

namespace {

DenseArray<float> encode_arch(const EncoderConfig& c) {
    std::vector<float> v{static_cast<float>(c.input_channels), static_cast<float>(c.kernel_size),
                         static_cast<float>(c.blocks())};
    for (std::size_t b = 0; b < c.blocks(); ++b) {
        v.push_back(static_cast<float>(c.widths[b]));
        v.push_back(static_cast<float>(c.strides[b]));
        v.push_back(static_cast<float>(c.dilations[b]));
    }
    const std::size_t n = v.size();
    return DenseArray<float>({n}, std::move(v));
}

EncoderConfig decode_arch(const DenseArray<float>& a) {
    EncoderConfig c;
    c.input_channels = static_cast<std::size_t>(a.data.at(0));
    c.kernel_size = static_cast<std::size_t>(a.data.at(1));
    const std::size_t blocks = static_cast<std::size_t>(a.data.at(2));
    c.widths.clear();
    c.strides.clear();
    c.dilations.clear();
    for (std::size_t b = 0; b < blocks; ++b) {
        c.widths.push_back(static_cast<std::size_t>(a.data.at(3 + 3 * b)));
        c.strides.push_back(static_cast<int>(a.data.at(4 + 3 * b)));
        c.dilations.push_back(static_cast<int>(a.data.at(5 + 3 * b)));
    }
    c.validate();
    return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
    PtnsEntries entries;
    entries.emplace_back("arch", encode_arch(state.params.config));
    for (std::size_t b = 0; b < state.params.kernels.size(); ++b) {
        entries.emplace_back("kernel" + std::to_string(b), state.params.kernels[b]);
        entries.emplace_back("bias" + std::to_string(b), state.params.biases[b]);
    }
    for (std::size_t i = 0; i < state.sgd.velocity.size(); ++i)
        entries.emplace_back("sgd_v" + std::to_string(i), state.sgd.velocity[i]);
    for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
        entries.emplace_back("adam_m" + std::to_string(i), state.adam.m[i]);
        entries.emplace_back("adam_v" + std::to_string(i), state.adam.v[i]);
    }
    entries.emplace_back(
        "meta", DenseArray<float>({2}, {static_cast<float>(state.iteration),
                                        static_cast<float>(state.adam.step)}));
    write_ptns_container(path, entries);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
    std::map<std::string, DenseArray<float>> by_name;
    for (auto& [name, arr] : read_ptns_container(path)) by_name.emplace(name, std::move(arr));
    auto arch = by_name.find("arch");
    if (arch == by_name.end()) throw std::runtime_error(path.string() + ": missing arch entry");
    TrainState state;
    state.params.config = decode_arch(arch->second);
    for (std::size_t b = 0; b < state.params.config.blocks(); ++b) {
        state.params.kernels.push_back(by_name.at("kernel" + std::to_string(b)));
        state.params.biases.push_back(by_name.at("bias" + std::to_string(b)));
    }
    for (std::size_t i = 0; by_name.count("sgd_v" + std::to_string(i)); ++i)
        state.sgd.velocity.push_back(by_name.at("sgd_v" + std::to_string(i)));
    for (std::size_t i = 0; by_name.count("adam_m" + std::to_string(i)); ++i) {
        state.adam.m.push_back(by_name.at("adam_m" + std::to_string(i)));
        state.adam.v.push_back(by_name.at("adam_v" + std::to_string(i)));
    }
    if (auto it = by_name.find("meta"); it != by_name.end()) {
        state.iteration = static_cast<long>(it->second.data.at(0));
        state.adam.step = static_cast<long>(it->second.data.at(1));
    }
    return state;
}

void save_encoder(const std::filesystem::path& path, const EncoderParams<float>& params) {
    TrainState s;
    s.params = params;
    save_checkpoint(path, s);
}

EncoderParams<float> load_encoder(const std::filesystem::path& path) {
    return load_checkpoint(path).params;
}

}  // namespace protoseg
