// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "generators.hpp"
#include "oracles.hpp"
#include "qcnn/qcnn.hpp"

using namespace qcnn;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass;
    std::string detail;
};

std::string sci(double v) {
    std::ostringstream s;
    s << std::scientific << std::setprecision(2) << v;
    return s.str();
}

std::string num(double v, int digits = 4) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(digits);
    s << v;
    return s.str();
}

const std::string kFixtures = QCNN_FIXTURE_DIR;

Verdict ratio_reproduction() {
    const double r3 = ratio_formula(3, 8), r1 = ratio_formula(1, 8);
    return {std::abs(r3 - 8.23) <= 0.01 && std::abs(r1 - 16.94) <= 0.01,
            "r(3,8)=" + num(r3) + " r(1,8)=" + num(r1)};
}

Verdict vgg_ratio() {
    const double r = model_ratio(load_network(kFixtures + "/vgg16.cfg").architecture(), parse_profile("3x7,1x6"));
    return {std::abs(r - 15.06) <= 0.02, "ratio=" + num(r)};
}

Verdict size_accounting() {
    const ModelSizes s = model_sizes(load_network(kFixtures + "/vgg16.cfg").architecture(), parse_profile("3x7,1x6"));
    const double f = static_cast<double>(s.float_bytes) / 1e6, c = static_cast<double>(s.compressed_bytes) / 1e6;
    return {std::abs(f - 58.86) <= 0.02 * 58.86 && std::abs(c - 3.92) <= 0.02 * 3.92,
            "float=" + num(f, 2) + "MB compressed=" + num(c, 2) + "MB"};
}

Verdict codec_round_trip() {
    std::mt19937_64 rng(4);
    std::size_t ok = 0;
    const std::size_t n = 600;
    for (std::size_t i = 0; i < n; ++i) {
        const CompressedModel m = gen::random_model(rng);
        const Bytes b = encode(m);
        const CompressedModel back = decode(b);
        if (back == m && encode(back) == b) ++ok;
    }
    return {ok == n, std::to_string(ok) + "/" + std::to_string(n) + " models bit-exact"};
}

Verdict quantizer_bounds() {
    std::mt19937_64 rng(5);
    std::size_t kernels = 0, violations = 0;
    for (int m = 2; m <= 5; ++m)
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor w = oracle::random_tensor({4, 4, 3, 3}, rng, -0.5, 0.5);
            const auto approx = approximate_kernels(w, m, QuantPolicy::XnorAbsMean);
            const QuantizedLayer q = quantize_layer(w, std::vector<double>(4, 0.0), m, QuantPolicy::XnorAbsMean).layer;
            const int L = mask_limit(m);
            for (std::size_t p = 0; p < q.kernels.size(); ++p, ++kernels) {
                const double alpha = approx[p].alpha;
                const double alpha_hat = dequantize_scalar(q.kernels[p].scalar, q.shift);
                for (std::size_t l = 0; l < 9; ++l) {
                    const double err = std::abs(w[p * 9 + l] - alpha_hat * q.kernels[p].mask[l]);
                    if (err > alpha / 2 + std::abs(alpha - alpha_hat) * L + 1e-12) ++violations;
                }
            }
        }
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        KernelValues w;
        for (double& v : w) v = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
        const KernelApprox a = quantize_kernel_1bit(w, QuantPolicy::XnorAbsMean);
        double obj = 0.0;
        for (std::size_t l = 0; l < 9; ++l) obj += (w[l] - a.alpha * a.mask[l]) * (w[l] - a.alpha * a.mask[l]);
        worst = std::max(worst, std::abs(obj - oracle::best_binary_objective(w)));
    }
    return {kernels >= 1000 && violations == 0 && worst <= 1e-9,
            std::to_string(kernels) + " kernels, " + std::to_string(violations) +
                " bound violations, 1-bit objective gap " + sci(worst)};
}

Verdict rotation_invariance() {
    const NetworkDefinition net = load_network(kFixtures + "/toy3.cfg");
    const Engine e(net, init_weights(net, 6), InferenceMode::Float);
    std::mt19937_64 rng(6);
    std::size_t equal = 0;
    for (int i = 0; i < 20; ++i) {
        const Tensor img = oracle::random_tensor({3, 32, 32}, rng, 0.0, 1.0);
        const Descriptor d = extract_nip(e, img);
        for (int k = 1; k < 4; ++k) equal += extract_nip(e, rotate90(img, k)) == d;
    }
    return {equal == 60, std::to_string(equal) + "/60 rotated descriptors bit-equal"};
}

Verdict rnip_degeneracy() {
    const NetworkDefinition net = load_network(kFixtures + "/toy3.cfg");
    const Engine e(net, init_weights(net, 7), InferenceMode::Float);
    std::mt19937_64 rng(7);
    bool same = true;
    for (int i = 0; i < 5; ++i) {
        const Tensor img = oracle::random_tensor({3, 48, 48}, rng, 0.0, 1.0);
        same = same && extract_rnip(e, img, RoiGrid{{1}}) == extract_nip(e, img, RoiGrid{{1}});
    }
    std::string counts;
    bool counts_ok = true;
    const Tensor img = oracle::random_tensor({3, 64, 64}, rng, 0.0, 1.0);
    for (auto [levels, want] : std::vector<std::pair<std::vector<std::size_t>, std::size_t>>{
             {{1, 2}, 5}, {{1, 2, 3}, 14}, {{3}, 9}}) {
        ExtractStats s;
        (void)extract_rnip(e, img, RoiGrid{levels}, true, &s);
        counts_ok = counts_ok && s.crops == want && s.forward_passes == 4 * want;
        counts += (counts.empty() ? "" : "/") + std::to_string(s.crops);
    }
    return {same && counts_ok, std::string("levels {1} ") + (same ? "equals" : "differs from") + " NIP, crops " + counts};
}

Verdict gradient_correctness() {
    double worst = 0.0;
    std::size_t checked = 0;
    const std::vector<std::string> nets{"input 1 3 3\nconv 1 norelu\nflatten\nfc 4\n",
                                        "input 2 8 8\nconv 3\npool\nconv 4 stride=2\nflatten\nfc 5 relu\nfc 3\n",
                                        "input 3 12 12\nconv 4\npool\nconv 4\npool\nflatten\nfc 6\n"};
    std::mt19937_64 rng(8);
    for (std::size_t n = 0; n < nets.size(); ++n) {
        const NetworkDefinition net = parse_network(nets[n]);
        for (std::uint64_t trial = 0; trial < 3; ++trial) {
            FloatWeights w = init_weights(net, 10 * n + trial);
            for (auto& c : w.conv)
                for (auto& b : c.bias) b = 0.05;
            const Shape3& in = net.input();
            const LabeledImage s{oracle::random_tensor({in.channels, in.height, in.width}, rng, 0.0, 1.0),
                                 trial % net.class_count()};
            const GradientCheckResult r = gradient_check(net, w, s, 60, trial);
            worst = std::max(worst, r.max_relative_error);
            checked += r.checked;
        }
    }
    return {worst < 1e-3 && checked > 0,
            std::to_string(checked) + " coordinates, max relative error " + sci(worst)};
}

// Criteria 9 to 11 share one float model and one retrained quantized model.
struct DeskRun {
    NetworkDefinition net;
    FloatWeights float_weights;
    QuantizedWeights posthoc;
    RetrainResult retrained;
    std::vector<LabeledImage> held_out;
    Dataset corpus;
};

constexpr const char* kDeskProfile = "3,3,1";

const DeskRun& desk_run() {
    static const DeskRun run = [] {
        DeskRun r{load_network(kFixtures + "/toy3.cfg"), {}, {}, {}, synth::shapes_dataset(1000, 2),
                  ingest_dataset(kFixtures + "/holidays_desk")};
        const auto train = synth::shapes_dataset(1000, 1);
        TrainConfig cfg;
        cfg.seed = 1;
        cfg.epochs = 8;
        cfg.jobs = default_jobs();
        r.float_weights = train_float(r.net, train, cfg).weights;
        cfg.profile = parse_profile(kDeskProfile);
        r.posthoc = quantize_weights(r.net, r.float_weights, cfg.profile, cfg.policy);
        cfg.epochs = 4;
        cfg.learning_rate = 0.02;
        r.retrained = retrain_quantized(r.net, r.float_weights, train, cfg);
        return r;
    }();
    return run;
}

Verdict retraining_efficacy() {
    const DeskRun& d = desk_run();
    const double f = accuracy(Engine(d.net, d.float_weights, InferenceMode::Float), d.held_out).top1;
    const double p = accuracy(Engine(d.net, d.posthoc, InferenceMode::Dequantized), d.held_out).top1;
    if (!d.retrained.model) return {false, "retraining emitted no quantized model"};
    const double q = accuracy(Engine(d.net, *d.retrained.model, InferenceMode::Dequantized), d.held_out).top1;
    return {p < f && q >= f - 0.05, "profile " + std::string(kDeskProfile) + ": float top1 " + num(f, 3) +
                                         ", post-hoc " + num(p, 3) + ", retrained " + num(q, 3)};
}

double desk_map(const Engine& e, const Dataset& ds, Precision p) {
    RetrievalIndex idx;
    for (const auto& im : ds.images) idx.add(im.id, convert(extract_nip(e, im.image), p));
    return mean_average_precision(idx, ds.ground_truth);
}

Verdict descriptor_fidelity() {
    const DeskRun& d = desk_run();
    const Engine e(d.net, d.float_weights, InferenceMode::Float);
    const double real = desk_map(e, d.corpus, Precision::Real);
    const double byte = desk_map(e, d.corpus, Precision::Byte);
    const double bit = desk_map(e, d.corpus, Precision::Bit);
    return {std::abs(byte - real) <= 0.01 && bit >= real - 0.06,
            "mAP real " + num(real) + ", byte " + num(byte) + ", bit " + num(bit)};
}

Verdict retrieval_parity() {
    const DeskRun& d = desk_run();
    if (!d.retrained.model) return {false, "retraining emitted no quantized model"};
    const double f = desk_map(Engine(d.net, d.float_weights, InferenceMode::Float), d.corpus, Precision::Real);
    const double q = desk_map(Engine(d.net, *d.retrained.model, InferenceMode::Dequantized), d.corpus, Precision::Real);
    return {std::abs(q - f) <= 0.05, "mAP float " + num(f) + ", retrained quantized " + num(q)};
}

// Runs a CLI pipeline into `dir`; returns false if any step exits nonzero.
bool run_pipeline(const fs::path& dir, const std::string& jobs) {
    const std::string cli = QCNN_CLI_PATH;
    const std::string toy = kFixtures + "/toy3.cfg", images = kFixtures + "/holidays_desk";
    auto p = [&](const char* name) { return "'" + (dir / name).string() + "'"; };
    const std::string g = "'" + cli + "' --seed 3 --jobs " + jobs + " ";
    const std::vector<std::string> steps{
        g + "train --net " + toy + " --out " + p("w.qfw") + " --samples 40 --eval-samples 10 --epochs 1 --batch 8 --metrics " +
            p("train.csv"),
        g + "retrain --net " + toy + " --weights " + p("w.qfw") + " --profile 3,3,1 --out " + p("m.qcm") + " --shadow " +
            p("shadow.qfw") + " --samples 40 --eval-samples 10 --epochs 1 --batch 8",
        g + "extract --net " + toy + " --weights " + p("shadow.qfw") + " --model " + p("m.qcm") +
            " --mode dequantized --images " + images + " --method rnip --precision bit --out " + p("d.qds"),
        g + "index " + p("d.qds") + " --out " + p("d.idx"),
        g + "eval --index " + p("d.idx") + " --gt " + images + "/gt.txt --results " + p("res.csv") + " --out " +
            p("rnip5_bit.eval"),
    };
    for (const auto& s : steps)
        if (std::system((s + " >/dev/null 2>&1").c_str()) != 0) {
            std::cerr << "pipeline step failed: " << s << "\n";
            return false;
        }
    return true;
}

Verdict determinism() {
    const fs::path root = fs::temp_directory_path() / "qcnn_acceptance_determinism";
    fs::remove_all(root);
    const fs::path a = root / "a", b = root / "b";
    fs::create_directories(a);
    fs::create_directories(b);
    if (!run_pipeline(a, "1") || !run_pipeline(b, "2")) return {false, "pipeline did not complete"};
    std::size_t files = 0, identical = 0;
    for (const auto& entry : fs::directory_iterator(a)) {
        ++files;
        const fs::path other = b / entry.path().filename();
        identical += fs::exists(other) && read_file(entry.path()) == read_file(other);
    }
    fs::remove_all(root);
    return {files == 8 && identical == files,
            std::to_string(identical) + "/" + std::to_string(files) + " artifacts byte-identical across reruns"};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"ratio reproduction", ratio_reproduction},
        {"overall VGG-16 ratio", vgg_ratio},
        {"size accounting", size_accounting},
        {"codec round trip", codec_round_trip},
        {"quantizer bounds", quantizer_bounds},
        {"rotation invariance", rotation_invariance},
        {"RNIP degeneracy and crop counts", rnip_degeneracy},
        {"gradient correctness", gradient_correctness},
        {"retraining efficacy", retraining_efficacy},
        {"quantized descriptor fidelity", descriptor_fidelity},
        {"quantized model retrieval parity", retrieval_parity},
        {"determinism", determinism},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto start = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& ex) {
            v = {false, std::string("exception: ") + ex.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        failures += !v.pass;
        std::cout << (v.pass ? "PASS" : "FAIL") << " " << i + 1 << " " << criteria[i].first << ": " << v.detail << " ("
                  << num(secs, 1) << "s)" << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
