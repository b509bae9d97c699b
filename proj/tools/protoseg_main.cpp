// protoseg command line: synthetic dataset generation, episodic training,
// evaluation with ablation grids, and artifact inspection.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "protoseg/checkpoint.hpp"
#include "protoseg/config.hpp"
#include "protoseg/episodes.hpp"
#include "protoseg/manifest.hpp"
#include "protoseg/metrics.hpp"
#include "protoseg/pnm.hpp"
#include "protoseg/refine.hpp"
#include "protoseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace protoseg;

namespace {

// PROTOSEG_SEED wins over flags and config files everywhere.
bool env_seed(std::uint64_t& seed) {
    const char* s = std::getenv("PROTOSEG_SEED");
    if (!s || !*s) return false;
    seed = std::strtoull(s, nullptr, 10);
    return true;
}

// Removes everything a failed command managed to write, so a nonzero exit
// never leaves partial outputs behind.
class OutputDir {
public:
    explicit OutputDir(fs::path dir) : dir_(std::move(dir)) {
        created_ = !fs::exists(dir_);
        fs::create_directories(dir_);
    }
    ~OutputDir() {
        if (committed_) return;
        if (created_) {
            std::error_code ec;
            fs::remove_all(dir_, ec);
        } else {
            for (const auto& p : files_) {
                std::error_code ec;
                fs::remove(p, ec);
            }
        }
    }
    fs::path file(const std::string& name) {
        files_.push_back(dir_ / name);
        return files_.back();
    }
    const fs::path& path() const { return dir_; }
    void note(const fs::path& p) { files_.push_back(p); }
    void commit() { committed_ = true; }

private:
    fs::path dir_;
    std::vector<fs::path> files_;
    bool created_ = false;
    bool committed_ = false;
};

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(const std::string& out, int classes, int per_class, int size, std::uint64_t seed) {
    if (classes < 4) throw std::invalid_argument("need >= 4 classes for 4 folds");
    env_seed(seed);
    SynthConfig cfg;
    cfg.image_size = static_cast<std::size_t>(size);
    cfg.n_shape_classes = static_cast<std::size_t>(classes);
    cfg.validate();

    OutputDir dir(out);
    write_synth_dataset(dir.path(), cfg, static_cast<std::size_t>(per_class), seed);

    RunManifest man;
    man.subcommand = "synth";
    man.set("out", fs::absolute(dir.path()).string());
    man.set_num("classes", classes);
    man.set_num("per_class", per_class);
    man.set_num("size", size);
    man.set_num("seed", seed);
    man.write(dir.file("manifest.txt"));
    dir.commit();
    std::cout << "wrote " << classes * per_class << " scenes to " << out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

TrainConfig parse_train_config(const std::string& config_path, std::size_t& image_size) {
    TrainConfig tc;
    if (!config_path.empty()) {
        ConfigFile cf = ConfigFile::parse_file(config_path);
        const std::string opt = cf.get_string("optimizer", "sgd");
        if (opt == "sgd")
            tc.optimizer = TrainConfig::Optimizer::sgd_momentum;
        else if (opt == "adam")
            tc.optimizer = TrainConfig::Optimizer::adam;
        else
            throw ConfigError("optimizer must be 'sgd' or 'adam', got '" + opt + "'");
        tc.learning_rate = cf.get_double("learning_rate", tc.learning_rate);
        tc.momentum = cf.get_double("momentum", tc.momentum);
        tc.weight_decay = cf.get_double("weight_decay", tc.weight_decay);
        tc.lr_decay_factor = cf.get_double("lr_decay_factor", tc.lr_decay_factor);
        tc.decay_interval = cf.get_long("decay_interval", tc.decay_interval);
        tc.iterations = cf.get_long("iterations", tc.iterations);
        tc.hflip_augment = cf.get_bool("hflip_augment", tc.hflip_augment);
        tc.n_way = static_cast<int>(cf.get_long("n_way", tc.n_way));
        tc.k_shot = static_cast<int>(cf.get_long("k_shot", tc.k_shot));
        tc.n_query = static_cast<int>(cf.get_long("n_query", tc.n_query));
        tc.temperature = cf.get_double("temperature", tc.temperature);
        tc.seed = static_cast<std::uint64_t>(cf.get_long("seed", 0));
        image_size = static_cast<std::size_t>(cf.get_long("image_size", 0));
        cf.finish();
    }
    env_seed(tc.seed);
    tc.validate();
    return tc;
}

int cmd_train(const std::string& data, int fold, const std::string& config_path,
              const std::string& out, const std::string& resume) {
    if (fold < 0 || fold > 3) throw std::invalid_argument("fold must be in 0..3");
    std::size_t image_size = 0;
    TrainConfig tc = parse_train_config(config_path, image_size);

    std::map<int, int> folds = read_folds_file(fs::path(data) / "folds.txt");
    IngestConfig ic;
    ic.target_size = image_size;
    auto dataset = ingest_directory(data, ic);
    DatasetSplit split{folds, fold, /*train_role=*/true};

    OutputDir dir(out);
    const fs::path ckpt_path = dir.file("checkpoint.ptns");
    const fs::path log_path = dir.file("train.log");
    std::ofstream log(log_path);

    ProgressSink progress = [&](const TrainLogEntry& e) {
        log << e.iteration << '\t' << e.loss << '\t' << e.lr << '\n';
        log.flush();
    };
    CheckpointSink sink = [&](const TrainState& s) { save_checkpoint(ckpt_path, s); };

    TrainState state;
    if (!resume.empty()) {
        state = load_checkpoint(resume);
        state = train(*dataset, split, tc, std::move(state), progress, sink);
    } else {
        state = train(*dataset, split, tc, EncoderConfig{}, progress, sink);
    }

    RunManifest man;
    man.subcommand = "train";
    man.set("data", fs::absolute(data).string());
    man.set_num("data_folds_hash", content_hash(fs::path(data) / "folds.txt"));
    man.set_num("fold", fold);
    if (!config_path.empty()) {
        man.set("config", fs::absolute(config_path).string());
        man.set_num("config_hash", content_hash(config_path));
    }
    man.set("optimizer", tc.optimizer == TrainConfig::Optimizer::sgd_momentum ? "sgd" : "adam");
    man.set_num("learning_rate", tc.learning_rate);
    man.set_num("momentum", tc.momentum);
    man.set_num("weight_decay", tc.weight_decay);
    man.set_num("lr_decay_factor", tc.lr_decay_factor);
    man.set_num("decay_interval", tc.decay_interval);
    man.set_num("iterations", tc.iterations);
    man.set_num("hflip_augment", static_cast<int>(tc.hflip_augment));
    man.set_num("n_way", tc.n_way);
    man.set_num("k_shot", tc.k_shot);
    man.set_num("n_query", tc.n_query);
    man.set_num("temperature", tc.temperature);
    man.set_num("seed", tc.seed);
    man.set_num("image_size", image_size);
    if (!resume.empty()) man.set("resume", fs::absolute(resume).string());
    man.set("out", fs::absolute(dir.path()).string());
    man.write(dir.file("manifest.txt"));
    dir.commit();
    std::cout << "trained " << state.iteration << " iterations, checkpoint at "
              << ckpt_path.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalSettings {
    int n_way = 1;
    int k_shot = 5;
    int n_query = 1;
    int episodes = 1000;
    int runs = 5;
    int jobs = 1;
    RefineConfig<float> refine;
    std::uint64_t seed = 0;
};

struct RunMetrics {
    double mean_iou = 0;
    double binary_iou = 0;
};

RunMetrics eval_one_run(const Dataset& dataset, const DatasetSplit& split,
                        const EncoderParams<float>& params, const EvalSettings& s,
                        std::uint64_t run_seed, const std::string& dump_dir) {
    IoUAccumulator multi, binary;
    std::mutex merge_mutex;
    std::atomic<int> next{0};

    auto worker = [&] {
        IoUAccumulator local_multi, local_binary;
        for (int e = next.fetch_add(1); e < s.episodes; e = next.fetch_add(1)) {
            Episode ep = sample_episode(dataset, split, s.n_way, s.k_shot, s.n_query,
                                        hash_combine(run_seed, static_cast<std::uint64_t>(e)));
            RefineResult<float> r = refine_and_segment(params, ep.data, s.refine);
            for (std::size_t t = 0; t < ep.data.query_masks.size(); ++t) {
                local_multi.accumulate(r.query_masks[t], ep.data.query_masks[t]);
                local_binary.accumulate(binarize(r.query_masks[t]), binarize(ep.data.query_masks[t]));
            }
            if (!dump_dir.empty()) {
                // qualitative triplets: truth, support-only prediction
                // (same adaptation, no fusion), fused prediction
                RefineConfig<float> no_fusion = s.refine;
                no_fusion.fusion_steps = 0;
                RefineResult<float> r0 = refine_and_segment(params, ep.data, no_fusion);
                for (std::size_t t = 0; t < ep.data.query_masks.size(); ++t) {
                    const std::string stem =
                        "ep" + std::to_string(e) + "_q" + std::to_string(t);
                    write_pgm(fs::path(dump_dir) / (stem + "_truth.pgm"),
                              ep.data.query_masks[t]);
                    write_pgm(fs::path(dump_dir) / (stem + "_support.pgm"), r0.query_masks[t]);
                    write_pgm(fs::path(dump_dir) / (stem + "_fused.pgm"), r.query_masks[t]);
                }
                std::lock_guard<std::mutex> lk(merge_mutex);
                std::ofstream legend(fs::path(dump_dir) / "legend.txt", std::ios::app);
                for (std::size_t n = 0; n < ep.class_map.size(); ++n)
                    legend << e << '\t' << n + 1 << '\t' << ep.class_map[n] << '\n';
            }
        }
        std::lock_guard<std::mutex> lk(merge_mutex);
        multi.merge(local_multi);
        binary.merge(local_binary);
    };

    if (s.jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < s.jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return {multi.mean_iou(), binary.binary_iou()};
}

std::vector<int> parse_grid_axis(const std::vector<std::string>& specs, const std::string& axis,
                                 int fallback) {
    for (const std::string& spec : specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("--grid entries look like 'adapt=0,1,3,5', got '" + spec +
                                        "'");
        if (spec.substr(0, eq) != axis) continue;
        std::vector<int> vals;
        std::istringstream in(spec.substr(eq + 1));
        std::string tok;
        while (std::getline(in, tok, ',')) vals.push_back(std::stoi(tok));
        if (vals.empty()) throw std::invalid_argument("--grid axis '" + axis + "' has no values");
        return vals;
    }
    return {fallback};
}

int cmd_eval(const std::string& data, int fold, const std::string& checkpoint,
             const std::string& out, EvalSettings s, const std::string& dump_masks,
             const std::vector<std::string>& grid, int image_size) {
    if (fold < 0 || fold > 3) throw std::invalid_argument("fold must be in 0..3");
    env_seed(s.seed);

    EncoderParams<float> params = load_encoder(checkpoint);
    std::map<int, int> folds = read_folds_file(fs::path(data) / "folds.txt");
    IngestConfig ic;
    ic.target_size = static_cast<std::size_t>(image_size);
    auto dataset = ingest_directory(data, ic);
    DatasetSplit split{folds, fold, /*train_role=*/false};
    if (static_cast<int>(split.classes().size()) < s.n_way)
        throw std::invalid_argument("fold " + std::to_string(fold) + " has only " +
                                    std::to_string(split.classes().size()) +
                                    " classes; cannot run " + std::to_string(s.n_way) + "-way");

    OutputDir dir(out);
    if (!dump_masks.empty()) fs::create_directories(dump_masks);

    std::ostringstream csv;
    csv << std::setprecision(10);
    if (grid.empty()) {
        csv << "fold,nway,kshot,adapt_steps,fusion_steps,omega_s,omega_q,run,run_seed,"
               "mean_iou,binary_iou\n";
        std::vector<double> miou, biou;
        for (int r = 0; r < s.runs; ++r) {
            // masks are dumped for the first run only
            const std::string dump = (r == 0) ? dump_masks : "";
            const std::uint64_t run_seed = hash_combine(s.seed, static_cast<std::uint64_t>(r));
            RunMetrics m = eval_one_run(*dataset, split, params, s, run_seed, dump);
            miou.push_back(m.mean_iou);
            biou.push_back(m.binary_iou);
            csv << fold << ',' << s.n_way << ',' << s.k_shot << ',' << s.refine.adapt_steps << ','
                << s.refine.fusion_steps << ',' << s.refine.omega_s << ',' << s.refine.omega_q
                << ',' << r << ',' << run_seed << ',' << m.mean_iou << ',' << m.binary_iou << '\n';
        }
        RunStats ms = multi_run_report(miou), bs = multi_run_report(biou);
        csv << fold << ',' << s.n_way << ',' << s.k_shot << ',' << s.refine.adapt_steps << ','
            << s.refine.fusion_steps << ',' << s.refine.omega_s << ',' << s.refine.omega_q
            << ",mean,," << ms.mean << ',' << bs.mean << '\n';
        csv << fold << ',' << s.n_way << ',' << s.k_shot << ',' << s.refine.adapt_steps << ','
            << s.refine.fusion_steps << ',' << s.refine.omega_s << ',' << s.refine.omega_q
            << ",stddev,," << ms.stddev << ',' << bs.stddev << '\n';
    } else {
        // ablation sweep over adaptation and fusion step counts
        csv << "adapt_steps,fusion_steps,mean_iou,mean_iou_stddev,binary_iou,binary_iou_stddev\n";
        for (int a : parse_grid_axis(grid, "adapt", s.refine.adapt_steps))
            for (int f : parse_grid_axis(grid, "fusion", s.refine.fusion_steps)) {
                EvalSettings cell = s;
                cell.refine.adapt_steps = a;
                cell.refine.fusion_steps = f;
                std::vector<double> miou, biou;
                for (int r = 0; r < s.runs; ++r) {
                    RunMetrics m =
                        eval_one_run(*dataset, split, params, cell,
                                     hash_combine(s.seed, static_cast<std::uint64_t>(r)), "");
                    miou.push_back(m.mean_iou);
                    biou.push_back(m.binary_iou);
                }
                RunStats ms = multi_run_report(miou), bs = multi_run_report(biou);
                csv << a << ',' << f << ',' << ms.mean << ',' << ms.stddev << ',' << bs.mean << ','
                    << bs.stddev << '\n';
            }
    }

    std::cout << csv.str();
    std::ofstream(dir.file("results.csv")) << csv.str();

    RunManifest man;
    man.subcommand = "eval";
    man.set("data", fs::absolute(data).string());
    man.set("checkpoint", fs::absolute(checkpoint).string());
    man.set_num("checkpoint_hash", content_hash(checkpoint));
    man.set_num("fold", fold);
    man.set_num("nway", s.n_way);
    man.set_num("kshot", s.k_shot);
    man.set_num("queries", s.n_query);
    man.set_num("episodes", s.episodes);
    man.set_num("runs", s.runs);
    man.set_num("jobs", s.jobs);
    man.set_num("adapt_steps", s.refine.adapt_steps);
    man.set_num("adapt_lr", s.refine.adapt_learning_rate);
    man.set_num("fusion_steps", s.refine.fusion_steps);
    man.set_num("omega_s", s.refine.omega_s);
    man.set_num("omega_q", s.refine.omega_q);
    man.set_num("temperature", s.refine.temperature);
    man.set_num("seed", s.seed);
    man.set_num("image_size", image_size);
    if (!dump_masks.empty()) man.set("dump_masks", fs::absolute(dump_masks).string());
    for (const auto& g : grid) man.set("grid", g);
    man.set("out", fs::absolute(dir.path()).string());
    man.write(dir.file("manifest.txt"));
    dir.commit();
    return 0;
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

int cmd_inspect(const std::string& checkpoint, const std::string& episode_dump) {
    if (!checkpoint.empty()) {
        TrainState state = load_checkpoint(checkpoint);
        const EncoderConfig& c = state.params.config;
        std::cout << "blocks: " << c.blocks() << "\n";
        for (std::size_t b = 0; b < c.blocks(); ++b)
            std::cout << "  block " << b << ": kernel " << shape_str(state.params.kernels[b].shape)
                      << " bias " << shape_str(state.params.biases[b].shape) << " stride "
                      << c.strides[b] << " dilation " << c.dilations[b] << "\n";
        std::cout << "parameters: " << state.params.parameter_count() << "\n";
        std::cout << "iteration: " << state.iteration << "\n";
        return 0;
    }
    // episode dump: per-episode class-id legend plus label histograms of the
    // dumped masks
    const fs::path legend_path = fs::path(episode_dump) / "legend.txt";
    std::ifstream legend(legend_path);
    if (!legend) throw std::runtime_error("missing legend file: " + legend_path.string());
    int ep, slot, cls;
    while (legend >> ep >> slot >> cls)
        std::cout << "episode " << ep << " slot " << slot << " class " << cls << "\n";
    std::vector<fs::path> masks;
    for (const auto& entry : fs::directory_iterator(episode_dump))
        if (entry.path().extension() == ".pgm") masks.push_back(entry.path());
    std::sort(masks.begin(), masks.end());
    for (const auto& p : masks) {
        LabelMask m = read_pgm(p);
        std::map<int, std::size_t> hist;
        for (int v : m.v) ++hist[v];
        std::cout << p.filename().string() << " " << m.h << "x" << m.w;
        for (const auto& [label, n] : hist) std::cout << " " << label << ":" << n;
        std::cout << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prototype-based few-shot segmentation toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic shape dataset");
    std::string synth_out;
    int synth_classes = 8, synth_per_class = 200, synth_size = 64;
    std::uint64_t synth_seed = 0;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--classes", synth_classes, "number of shape classes (4..8)");
    synth->add_option("--per-class", synth_per_class, "scenes per class");
    synth->add_option("--size", synth_size, "square image size in pixels");
    synth->add_option("--seed", synth_seed, "dataset seed");

    // train
    auto* train = app.add_subcommand("train", "train the encoder on 3 folds");
    std::string train_data, train_config, train_out, train_resume;
    int train_fold = 0;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--fold", train_fold, "held-out fold (0..3)")->required();
    train->add_option("--config", train_config, "key = value training config file");
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--resume", train_resume, "checkpoint to resume from");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out fold");
    std::string eval_data, eval_checkpoint, eval_out, eval_dump;
    std::vector<std::string> eval_grid;
    int eval_fold = 0, eval_image_size = 0;
    EvalSettings es;
    double omega_s = 0.5, omega_q = 0.5, adapt_lr = 1e-4;
    std::uint64_t eval_seed = 0;
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--fold", eval_fold, "held-out fold (0..3)")->required();
    eval->add_option("--checkpoint", eval_checkpoint, "trained checkpoint")->required();
    eval->add_option("--out", eval_out, "output directory for results.csv + manifest")->required();
    eval->add_option("--nway", es.n_way, "episode classes N");
    eval->add_option("--kshot", es.k_shot, "support shots K");
    eval->add_option("--queries", es.n_query, "query images per episode");
    eval->add_option("--episodes", es.episodes, "episodes per run");
    eval->add_option("--runs", es.runs, "independently seeded runs");
    eval->add_option("--adapt-steps", es.refine.adapt_steps, "test-time adaptation steps");
    eval->add_option("--adapt-lr", adapt_lr, "adaptation learning rate");
    eval->add_option("--fusion-steps", es.refine.fusion_steps, "prototype fusion steps");
    eval->add_option("--omega-s", omega_s, "support prototype fusion weight");
    eval->add_option("--omega-q", omega_q, "query prototype fusion weight");
    eval->add_option("--dump-masks", eval_dump, "directory for qualitative PGM triplets");
    eval->add_option("--jobs", es.jobs, "worker threads across episodes");
    eval->add_option("--grid", eval_grid, "ablation axes, e.g. adapt=0,1,3,5 fusion=0,1,2,3");
    eval->add_option("--seed", eval_seed, "evaluation seed");
    eval->add_option("--image-size", eval_image_size, "resize scenes on ingest (0 = native)");

    // inspect
    auto* inspect = app.add_subcommand("inspect", "describe a checkpoint or episode dump");
    std::string ins_checkpoint, ins_episode_dump;
    auto* opt_ck = inspect->add_option("--checkpoint", ins_checkpoint, "checkpoint to describe");
    inspect->add_option("--episode-dump", ins_episode_dump, "mask dump directory to describe")
        ->excludes(opt_ck);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed())
            return cmd_synth(synth_out, synth_classes, synth_per_class, synth_size, synth_seed);
        if (train->parsed())
            return cmd_train(train_data, train_fold, train_config, train_out, train_resume);
        if (eval->parsed()) {
            es.refine.omega_s = static_cast<float>(omega_s);
            es.refine.omega_q = static_cast<float>(omega_q);
            es.refine.adapt_learning_rate = static_cast<float>(adapt_lr);
            es.seed = eval_seed;
            return cmd_eval(eval_data, eval_fold, eval_checkpoint, eval_out, es, eval_dump,
                            eval_grid, eval_image_size);
        }
        if (inspect->parsed()) {
            if (ins_checkpoint.empty() && ins_episode_dump.empty())
                throw std::invalid_argument("inspect needs --checkpoint or --episode-dump");
            return cmd_inspect(ins_checkpoint, ins_episode_dump);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
