#pragma once

// Command-line front end. dispatch() parses everything before doing any work and maps
// failures onto exit codes: 0 success, 1 usage, 2 data or format error, 3 numerical failure.

#include <CLI11.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "qcnn/bytes.hpp"
#include "qcnn/codec.hpp"
#include "qcnn/descriptor.hpp"
#include "qcnn/engine.hpp"
#include "qcnn/error.hpp"
#include "qcnn/network.hpp"
#include "qcnn/parallel.hpp"
#include "qcnn/retrieval.hpp"
#include "qcnn/synthetic.hpp"
#include "qcnn/trainer.hpp"

namespace qcnn::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericalError = 3 };

/// Bad flag combination discovered after parsing.
class UsageError : public Error {
public:
    using Error::Error;
};

namespace fs = std::filesystem;

inline std::string fixed(double v, int digits) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

inline std::string megabytes(std::size_t bytes) { return fixed(static_cast<double>(bytes) / 1e6, 2); }

inline CompressedModel load_model(const fs::path& path) {
    const Bytes bytes = read_file(path);
    try {
        return decode(bytes);
    } catch (const FormatError& e) {
        throw FormatError("'" + path.string() + "': " + e.what());
    }
}

inline FloatWeights load_weights(const fs::path& path, const NetworkDefinition& net) {
    const Bytes bytes = read_file(path);
    try {
        return decode_weights(bytes, net);
    } catch (const Error& e) {
        throw FormatError("'" + path.string() + "': " + e.what());
    }
}

inline std::vector<DescriptorRecord> load_descriptors(const fs::path& path) {
    const Bytes bytes = read_file(path);
    return decode_descriptors(bytes, path.string());
}

/// Refuses to overwrite any input of the same command.
inline void guard_output(const std::string& out, const std::vector<std::string>& inputs) {
    if (out.empty()) return;
    std::error_code ec;
    for (const auto& in : inputs) {
        if (in.empty()) continue;
        if (out == in || (fs::exists(in) && fs::exists(out) && fs::equivalent(in, out, ec))) {
            throw UsageError("output '" + out + "' would overwrite input '" + in + "'");
        }
    }
}

/// Float or compressed weights for an engine, plus the mode they run in.
struct EngineSource {
    std::string net_path;
    std::string weights_path;
    std::string model_path;
    std::string mode;  // empty: float without a model, dequantized with one

    void add_flags(CLI::App* cmd) {
        cmd->add_option("--net", net_path, "network definition file")->required();
        cmd->add_option("--weights", weights_path, "full-precision weights (.qfw); supplies the fc head")->required();
        cmd->add_option("--model", model_path, "compressed conv layers (.qcm)");
        cmd->add_option("--mode", mode, "float | dequantized | integer")
            ->check(CLI::IsMember({"float", "dequantized", "integer"}));
    }

    [[nodiscard]] InferenceMode resolved_mode() const {
        if (mode.empty()) return model_path.empty() ? InferenceMode::Float : InferenceMode::Dequantized;
        const InferenceMode m = parse_mode(mode);
        if (m == InferenceMode::Float && !model_path.empty()) throw UsageError("--mode float cannot use --model");
        if (m != InferenceMode::Float && model_path.empty()) {
            throw UsageError("--mode " + mode + " needs --model");
        }
        return m;
    }

    [[nodiscard]] Engine build(std::span<const Tensor> calibration) const {
        const InferenceMode m = resolved_mode();
        const NetworkDefinition net = load_network(net_path);
        FloatWeights w = load_weights(weights_path, net);
        if (m == InferenceMode::Float) return Engine(net, std::move(w), m);
        QuantizedWeights q{load_model(model_path), std::move(w.fc)};
        if (!matches(net, q.model)) {
            throw FormatError("'" + model_path + "' does not match the network in '" + net_path + "'");
        }
        std::optional<ActivationScales> scales;
        if (m == InferenceMode::Integer && !calibration.empty()) {
            scales = Engine(net, q, InferenceMode::Dequantized).calibrate(calibration);
        }
        return Engine(net, std::move(q), m, scales);
    }
};

/// Shared training flags.
struct TrainFlags {
    double learning_rate = 0.05;
    std::size_t epochs = 10;
    std::size_t batch = 16;
    std::size_t samples = 1000;
    std::size_t eval_samples = 200;
    std::string metrics_path;

    void add_flags(CLI::App* cmd) {
        cmd->add_option("--lr", learning_rate, "learning rate")->capture_default_str();
        cmd->add_option("--epochs", epochs, "epochs")->capture_default_str()->check(CLI::PositiveNumber);
        cmd->add_option("--batch", batch, "batch size")->capture_default_str()->check(CLI::PositiveNumber);
        cmd->add_option("--samples", samples, "synthetic training images")->capture_default_str()->check(CLI::PositiveNumber);
        cmd->add_option("--eval-samples", eval_samples, "synthetic held-out images")->capture_default_str();
        cmd->add_option("--metrics", metrics_path, "write per-epoch CSV (epoch,loss,top1)");
    }
};

inline std::string metrics_csv(std::span<const EpochMetrics> history) {
    std::string s = "epoch,loss,top1\n";
    for (const auto& m : history) s += std::to_string(m.epoch) + "," + fixed(m.loss, 6) + "," + fixed(m.top1, 6) + "\n";
    return s;
}

/// The synthetic shape corpus sized to the network input. Training and held-out sets
/// come from seed and seed + 1.
inline std::pair<std::vector<LabeledImage>, std::vector<LabeledImage>> shape_data(const NetworkDefinition& net,
                                                                                  const TrainFlags& f,
                                                                                  std::uint64_t seed) {
    const Shape3& in = net.input();
    if (in.channels != 3 || in.height != in.width) {
        throw UsageError("synthetic training data needs a 3xSxS network input");
    }
    if (net.class_count() != synth::kShapeClasses) {
        throw UsageError("synthetic training data has " + std::to_string(synth::kShapeClasses) +
                         " classes; the network classifies " + std::to_string(net.class_count()));
    }
    return {synth::shapes_dataset(f.samples, seed, in.height), synth::shapes_dataset(f.eval_samples, seed + 1, in.height)};
}

inline void print_history(std::ostream& err, std::span<const EpochMetrics> history) {
    for (const auto& m : history)
        err << "epoch " << m.epoch << "  loss " << fixed(m.loss, 4) << "  top1 " << fixed(m.top1, 4) << "\n";
}

/// Key/value summary written by `eval` and read by `report`.
struct EvalSummary {
    double map = 0.0;
    std::size_t queries = 0;
    std::string precision;
};

inline std::string format_eval(const EvalSummary& s) {
    return "map " + fixed(s.map, 6) + "\nqueries " + std::to_string(s.queries) + "\nprecision " + s.precision + "\n";
}

inline EvalSummary parse_eval(const fs::path& path) {
    std::istringstream in(read_text_file(path));
    EvalSummary s;
    bool have_map = false;
    for (std::string key; in >> key;) {
        if (key == "map") {
            if (!(in >> s.map)) break;
            have_map = true;
        } else if (key == "queries") {
            in >> s.queries;
        } else if (key == "precision") {
            in >> s.precision;
        } else {
            throw FormatError("'" + path.string() + "': unknown key '" + key + "'");
        }
    }
    if (!have_map || !(s.map >= 0.0 && s.map <= 1.0)) throw FormatError("'" + path.string() + "': missing or invalid map");
    return s;
}

inline constexpr std::array<std::string_view, 3> kReportPipelines{"nip", "rnip5", "rnip14"};
inline constexpr std::array<std::string_view, 3> kReportPrecisions{"real", "byte", "bit"};

inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Quantized CNN compression and NIP/RNIP image retrieval", "qcnn"};
    app.require_subcommand(1);
    std::uint64_t seed = 0;
    std::size_t jobs = default_jobs();
    app.add_option("--seed", seed, "seed for every random choice")->capture_default_str();
    app.add_option("--jobs", jobs, "worker threads (default: QCNN_JOBS or 1)")->check(CLI::PositiveNumber);
    app.fallthrough();

    // ratio
    auto* ratio = app.add_subcommand("ratio", "compression ratio of a mask/scalar width, or of a whole profile");
    int ratio_m = 0, ratio_s = kScalarBits;
    std::string ratio_net, ratio_profile;
    ratio->add_option("--mask-bits", ratio_m, "mask bits per weight (1-5)");
    ratio->add_option("--scalar-bits", ratio_s, "scalar bits per kernel")->capture_default_str();
    ratio->add_option("--net", ratio_net, "network definition (with --profile)");
    ratio->add_option("--profile", ratio_profile, "bit allocation such as 3x7,1x6");

    // quantize
    auto* quantize = app.add_subcommand("quantize", "compress the conv layers of a float network");
    std::string q_net, q_weights, q_profile, q_policy = "xnor", q_out, q_weights_out;
    quantize->add_option("--net", q_net, "network definition file")->required();
    quantize->add_option("--weights", q_weights, "float weights (.qfw); random He init from --seed when omitted");
    quantize->add_option("--profile", q_profile, "bit allocation such as 3x7,1x6")->required();
    quantize->add_option("--policy", q_policy, "1-bit scaling: xnor | mean")->capture_default_str();
    quantize->add_option("--out", q_out, "compressed model (.qcm)")->required();
    quantize->add_option("--weights-out", q_weights_out, "also save the float weights that were compressed");

    // inspect
    auto* inspect = app.add_subcommand("inspect", "describe a compressed model");
    std::string i_model;
    inspect->add_option("model", i_model, "compressed model (.qcm)")->required();

    // infer
    auto* infer = app.add_subcommand("infer", "classify IMG1 images");
    EngineSource infer_src;
    std::size_t infer_k = 5;
    std::vector<std::string> infer_images;
    infer_src.add_flags(infer);
    infer->add_option("--top-k", infer_k, "labels per image")->capture_default_str()->check(CLI::PositiveNumber);
    infer->add_option("images", infer_images, "IMG1 files")->required();

    // train
    auto* train = app.add_subcommand("train", "train a float network on the synthetic shape corpus");
    std::string t_net, t_out;
    TrainFlags t_flags;
    train->add_option("--net", t_net, "network definition file")->required();
    train->add_option("--out", t_out, "float weights (.qfw)")->required();
    t_flags.add_flags(train);

    // retrain
    auto* retrain = app.add_subcommand("retrain", "quantization-aware retraining from float weights");
    std::string r_net, r_weights, r_profile, r_policy = "xnor", r_out, r_shadow, r_refresh = "epoch";
    bool r_global = false;
    TrainFlags r_flags;
    r_flags.epochs = 5;
    r_flags.learning_rate = 0.01;
    retrain->add_option("--net", r_net, "network definition file")->required();
    retrain->add_option("--weights", r_weights, "float starting weights (.qfw)")->required();
    retrain->add_option("--profile", r_profile, "bit allocation such as 2x3")->required();
    retrain->add_option("--policy", r_policy, "1-bit scaling: xnor | mean")->capture_default_str();
    retrain->add_option("--out", r_out, "retrained compressed model (.qcm)")->required();
    retrain->add_option("--shadow", r_shadow, "full-precision shadow weights (.qfw)")->required();
    retrain->add_option("--shift-refresh", r_refresh, "epoch | step")
        ->capture_default_str()
        ->check(CLI::IsMember({"epoch", "step"}));
    retrain->add_flag("--global-shift", r_global, "one shift exponent shared by all layers");
    r_flags.add_flags(retrain);

    // extract
    auto* extract = app.add_subcommand("extract", "NIP or RNIP descriptors for a directory of IMG1 images");
    EngineSource ex_src;
    std::string ex_images, ex_method = "nip", ex_levels, ex_precision = "real", ex_out;
    bool ex_no_rot = false;
    ex_src.add_flags(extract);
    extract->add_option("--images", ex_images, "directory of <id>.img files")->required();
    extract->add_option("--method", ex_method, "nip | rnip")->capture_default_str()->check(CLI::IsMember({"nip", "rnip"}));
    extract->add_option("--levels", ex_levels, "grid levels (default 1,2,3 for nip, 1,2 for rnip)");
    extract->add_flag("--no-rotations", ex_no_rot, "rnip without the rotation orbit");
    extract->add_option("--precision", ex_precision, "real | byte | bit")
        ->capture_default_str()
        ->check(CLI::IsMember({"real", "byte", "bit"}));
    extract->add_option("--out", ex_out, "descriptor file")->required();

    // index
    auto* index = app.add_subcommand("index", "merge descriptor files into one validated index");
    std::vector<std::string> idx_inputs;
    std::string idx_out;
    index->add_option("descriptors", idx_inputs, "descriptor files")->required();
    index->add_option("--out", idx_out, "index file")->required();

    // search
    auto* search = app.add_subcommand("search", "rank the index against a query");
    std::string s_index, s_query_id, s_query;
    std::size_t s_k = 10;
    search->add_option("--index", s_index, "index file")->required();
    auto* qid = search->add_option("--query-id", s_query_id, "query by an id stored in the index");
    auto* qfile = search->add_option("--query", s_query, "descriptor file holding query records");
    qid->excludes(qfile);
    search->add_option("--k", s_k, "results per query")->capture_default_str()->check(CLI::PositiveNumber);

    // eval
    auto* eval = app.add_subcommand("eval", "mean average precision of an index against ground truth");
    std::string e_index, e_gt, e_results, e_out;
    eval->add_option("--index", e_index, "index file")->required();
    eval->add_option("--gt", e_gt, "ground-truth file")->required();
    eval->add_option("--results", e_results, "write the ranked CSV (query_id,rank,id,score)");
    eval->add_option("--out", e_out, "write the summary read by report");

    // report
    auto* report = app.add_subcommand("report", "mAP grid and model-size line from eval summaries");
    std::string rep_dir, rep_model, rep_csv;
    report->add_option("--dir", rep_dir, "directory with <nip|rnip5|rnip14>_<real|byte|bit>.eval")->required();
    report->add_option("--model", rep_model, "compressed model for the size line")->required();
    report->add_option("--csv", rep_csv, "also write the grid as CSV");

    std::vector<const char*> argv{"qcnn"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*ratio) {
            if (!ratio_profile.empty() || !ratio_net.empty()) {
                if (ratio_profile.empty() || ratio_net.empty()) throw UsageError("--net and --profile go together");
                const NetworkDefinition net = load_network(ratio_net);
                out << fixed(model_ratio(net.architecture(), parse_profile(ratio_profile)), 2) << "\n";
            } else {
                if (ratio->count("--mask-bits") == 0) throw UsageError("ratio needs --mask-bits or --net/--profile");
                out << fixed(ratio_formula(ratio_m, ratio_s), 2) << "\n";
            }
        } else if (*quantize) {
            guard_output(q_out, {q_net, q_weights});
            guard_output(q_weights_out, {q_net, q_weights});
            const NetworkDefinition net = load_network(q_net);
            const BitAllocationProfile profile = parse_profile(q_profile);
            const QuantPolicy policy = parse_policy(q_policy);
            FloatWeights w;
            if (q_weights.empty()) {
                err << "no --weights given; using He-normal weights from seed " << seed << "\n";
                w = init_weights(net, seed);
            } else {
                w = load_weights(q_weights, net);
            }
            std::vector<QuantizationStats> stats;
            const CompressedModel model = compress(net, w, profile, policy, &stats);
            write_file(q_out, encode(model));
            if (!q_weights_out.empty()) write_file(q_weights_out, encode_weights(w));
            for (std::size_t i = 0; i < stats.size(); ++i) {
                if (stats[i].degenerate) err << "warning: layer " << i + 1 << " has all-zero weights\n";
                if (stats[i].shift_saturated) err << "warning: layer " << i + 1 << " shift saturated at " << kMaxShift << "\n";
                if (stats[i].scalar_saturations + stats[i].bias_saturations > 0) {
                    err << "warning: layer " << i + 1 << " clipped " << stats[i].scalar_saturations << " scalars and "
                        << stats[i].bias_saturations << " biases\n";
                }
            }
            const ModelSizes sz = model_sizes(model);
            out << "wrote " << q_out << ": " << model.layers.size() << " layers, profile " << format_profile(profile)
                << ", ratio " << fixed(model_ratio(model.arch, profile), 2) << ", " << sz.compressed_bytes << " bytes\n";
        } else if (*inspect) {
            const CompressedModel m = load_model(i_model);
            const ModelSizes sz = model_sizes(m);
            out << "model " << i_model << "\n";
            out << "input " << m.arch.input.channels << "x" << m.arch.input.height << "x" << m.arch.input.width << "\n";
            out << "policy " << to_string(m.provenance.policy) << "\n";
            out << "source " << hex64(m.provenance.source_checksum) << "\n";
            out << "layer   out    in  stride  pad  m   e  payload_bytes\n";
            for (std::size_t i = 0; i < m.layers.size(); ++i) {
                const auto& l = m.layers[i];
                char line[96];
                std::snprintf(line, sizeof line, "%5zu %5zu %5zu %7zu %4zu %2d %3d %14zu\n", i + 1, l.shape.out_channels,
                              l.shape.in_channels, l.shape.stride, l.shape.padding, l.mask_bits, l.shift,
                              layer_payload_bytes(l.shape, l.mask_bits));
                out << line;
            }
            out << "profile " << format_profile(m.profile()) << "\n";
            out << "overall ratio " << fixed(model_ratio(m.arch, m.profile()), 2) << "\n";
            out << "float size " << sz.float_bytes << " bytes (" << megabytes(sz.float_bytes) << " MB)\n";
            out << "compressed size " << sz.compressed_bytes << " bytes (" << megabytes(sz.compressed_bytes) << " MB)\n";
        } else if (*infer) {
            std::vector<Tensor> images;
            for (const auto& p : infer_images) images.push_back(load_image(p));
            const Engine engine = infer_src.build(images);
            if (!engine.network().has_classifier()) throw UsageError("'" + infer_src.net_path + "' has no classifier head");
            std::vector<std::vector<ScoredLabel>> results(images.size());
            parallel_for(images.size(), jobs, [&](std::size_t i) { results[i] = classify(engine, images[i], infer_k); });
            for (std::size_t i = 0; i < images.size(); ++i) {
                out << infer_images[i] << ":";
                for (const auto& s : results[i]) out << " " << s.label << "(" << fixed(s.score, 6) << ")";
                out << "\n";
            }
        } else if (*train) {
            guard_output(t_out, {t_net});
            guard_output(t_flags.metrics_path, {t_net});
            const NetworkDefinition net = load_network(t_net);
            const auto [data, held_out] = shape_data(net, t_flags, seed);
            TrainConfig cfg;
            cfg.learning_rate = t_flags.learning_rate;
            cfg.epochs = t_flags.epochs;
            cfg.batch_size = t_flags.batch;
            cfg.seed = seed;
            cfg.jobs = jobs;
            err << "training on " << data.size() << " images for " << cfg.epochs << " epochs\n";
            const TrainResult r = train_float(net, data, cfg, nullptr, held_out);
            print_history(err, r.history);
            write_file(t_out, encode_weights(r.weights));
            if (!t_flags.metrics_path.empty()) write_text_file(t_flags.metrics_path, metrics_csv(r.history));
            out << "wrote " << t_out << ": top1 " << fixed(r.history.back().top1, 4) << "\n";
        } else if (*retrain) {
            for (const auto& o : {r_out, r_shadow, r_flags.metrics_path}) guard_output(o, {r_net, r_weights});
            const NetworkDefinition net = load_network(r_net);
            const FloatWeights w = load_weights(r_weights, net);
            const auto [data, held_out] = shape_data(net, r_flags, seed);
            TrainConfig cfg;
            cfg.learning_rate = r_flags.learning_rate;
            cfg.epochs = r_flags.epochs;
            cfg.batch_size = r_flags.batch;
            cfg.seed = seed;
            cfg.jobs = jobs;
            cfg.policy = parse_policy(r_policy);
            cfg.profile = parse_profile(r_profile);
            cfg.shift_refresh = r_refresh == "step" ? ShiftRefresh::PerStep : ShiftRefresh::PerEpoch;
            cfg.global_shift = r_global;
            err << "retraining on " << data.size() << " images, profile " << format_profile(cfg.profile) << "\n";
            const RetrainResult r = retrain_quantized(net, w, data, cfg, held_out);
            print_history(err, r.history);
            write_file(r_out, encode(r.model->model));
            write_file(r_shadow, encode_weights(r.shadow));
            if (!r_flags.metrics_path.empty()) write_text_file(r_flags.metrics_path, metrics_csv(r.history));
            out << "wrote " << r_out << " and " << r_shadow << ": top1 " << fixed(r.history.back().top1, 4) << "\n";
        } else if (*extract) {
            guard_output(ex_out, {ex_src.net_path, ex_src.weights_path, ex_src.model_path});
            const bool rnip = ex_method == "rnip";
            if (ex_no_rot && !rnip) throw UsageError("--no-rotations applies to --method rnip only");
            const RoiGrid levels = ex_levels.empty() ? RoiGrid{rnip ? std::vector<std::size_t>{1, 2}
                                                                    : std::vector<std::size_t>{1, 2, 3}}
                                                     : parse_levels(ex_levels);
            const Precision precision = parse_precision(ex_precision);
            const Dataset ds = ingest_dataset(ex_images);
            for (const auto& w : ds.warnings) err << "warning: " << w << "\n";
            const NetworkDefinition net = load_network(ex_src.net_path);
            std::vector<Tensor> calibration;
            if (ex_src.resolved_mode() == InferenceMode::Integer) {
                for (const auto& img : ds.images) {
                    check_chw(img.image, "calibration image");
                    calibration.push_back(resize_bilinear(img.image, net.input().height, net.input().width));
                }
            }
            const Engine engine = ex_src.build(calibration);
            std::vector<DescriptorRecord> records(ds.images.size());
            parallel_for(ds.images.size(), jobs, [&](std::size_t i) {
                const Tensor& img = ds.images[i].image;
                const Descriptor d = rnip ? extract_rnip(engine, img, levels, !ex_no_rot) : extract_nip(engine, img, levels);
                records[i] = {ds.images[i].id, convert(d, precision)};
            });
            write_file(ex_out, encode_descriptors(records));
            out << "wrote " << ex_out << ": " << records.size() << " " << ex_precision << " descriptors ("
                << ex_method << ", levels";
            for (std::size_t l : levels.levels) out << " " << l;
            out << ")\n";
        } else if (*index) {
            guard_output(idx_out, idx_inputs);
            std::vector<DescriptorRecord> all;
            for (const auto& p : idx_inputs) {
                auto recs = load_descriptors(p);
                for (auto& r : recs) all.push_back(std::move(r));
            }
            const RetrievalIndex idx = build_index(all);
            std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
            write_file(idx_out, encode_descriptors(all));
            out << "wrote " << idx_out << ": " << idx.size() << " " << to_string(idx.precision()) << " descriptors\n";
        } else if (*search) {
            const RetrievalIndex idx = build_index(load_descriptors(s_index));
            std::vector<DescriptorRecord> queries;
            if (!s_query_id.empty()) {
                queries.push_back({s_query_id, idx.at(s_query_id)});
            } else if (!s_query.empty()) {
                queries = load_descriptors(s_query);
            } else {
                throw UsageError("search needs --query-id or --query");
            }
            out << "query_id,rank,id,score\n";
            for (const auto& q : queries) {
                const auto hits = idx.search(q.descriptor, s_k);
                for (std::size_t k = 0; k < hits.size(); ++k)
                    out << q.id << "," << k + 1 << "," << hits[k].id << "," << fixed(hits[k].score, 6) << "\n";
            }
        } else if (*eval) {
            guard_output(e_results, {e_index, e_gt});
            guard_output(e_out, {e_index, e_gt});
            const RetrievalIndex idx = build_index(load_descriptors(e_index));
            const GroundTruth gt = parse_ground_truth(read_text_file(e_gt), e_gt);
            const Evaluation ev = evaluate(idx, gt);
            if (!e_results.empty()) write_text_file(e_results, format_results(ev));
            const EvalSummary summary{ev.map, ev.queries.size(), std::string(to_string(idx.precision()))};
            if (!e_out.empty()) write_text_file(e_out, format_eval(summary));
            for (const auto& q : ev.queries) err << "AP " << q.query << " " << fixed(q.ap, 4) << "\n";
            out << "mAP " << fixed(ev.map, 4) << " over " << ev.queries.size() << " queries (" << summary.precision << ")\n";
        } else if (*report) {
            guard_output(rep_csv, {rep_model});
            std::map<std::pair<std::string, std::string>, double> grid;
            for (auto pipe : kReportPipelines)
                for (auto prec : kReportPrecisions) {
                    const fs::path p = fs::path(rep_dir) / (std::string(pipe) + "_" + std::string(prec) + ".eval");
                    grid[{std::string(pipe), std::string(prec)}] = parse_eval(p).map;
                }
            const CompressedModel m = load_model(rep_model);
            const ModelSizes sz = model_sizes(m);
            std::ostringstream text, csv;
            text << "mAP          NIP     RNIP-5x  RNIP-14x\n";
            csv << "precision,nip,rnip5,rnip14\n";
            for (auto prec : kReportPrecisions) {
                char row[80];
                const std::string p(prec);
                std::snprintf(row, sizeof row, "%-8s %8.4f %8.4f %9.4f\n", p.c_str(), grid[{"nip", p}], grid[{"rnip5", p}],
                              grid[{"rnip14", p}]);
                text << row;
                csv << p << "," << fixed(grid[{"nip", p}], 6) << "," << fixed(grid[{"rnip5", p}], 6) << ","
                    << fixed(grid[{"rnip14", p}], 6) << "\n";
            }
            text << "CNN model size: " << megabytes(sz.float_bytes) << "M bytes (floating) -> "
                 << megabytes(sz.compressed_bytes) << "M bytes (" << format_profile(m.profile()) << ", ratio "
                 << fixed(model_ratio(m.arch, m.profile()), 2) << ")\n";
            csv << "model_float_bytes," << sz.float_bytes << "\nmodel_compressed_bytes," << sz.compressed_bytes << "\n";
            out << text.str();
            if (!rep_csv.empty()) write_text_file(rep_csv, csv.str());
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericalError& e) {
        err << "error: " << e.what() << "\n";
        return kNumericalError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kDataError;
    }
    return kOk;
}

}  // namespace qcnn::cli
