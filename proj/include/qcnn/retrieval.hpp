#pragma once

// Descriptor index, ranked search, average precision, and the on-disk formats for
// images, descriptors, ground truth and ranked results.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qcnn/bytes.hpp"
#include "qcnn/descriptor.hpp"
#include "qcnn/error.hpp"
#include "qcnn/synthetic.hpp"
#include "qcnn/tensor.hpp"

namespace qcnn {

struct SearchHit {
    std::string id;
    double score = 0.0;  // cosine similarity, or Hamming distance for bit descriptors
    friend bool operator==(const SearchHit&, const SearchHit&) = default;
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline std::size_t hamming(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    std::size_t d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] != 0) != (b[i] != 0);
    return d;
}

/// id -> descriptor store. All entries share one precision; ids are unique.
class RetrievalIndex {
public:
    void add(std::string id, Descriptor d) {
        if (!entries_.empty()) {
            if (d.precision != precision_) {
                throw DomainError("index holds " + std::string(to_string(precision_)) + " descriptors, got " +
                                  std::string(to_string(d.precision)));
            }
            if (d.dim() != dim_) throw ShapeError("descriptor dimension differs from the index");
        } else {
            precision_ = d.precision;
            dim_ = d.dim();
        }
        if (entries_.contains(id)) throw DomainError("duplicate id '" + id + "'");
        std::vector<double> v = precision_ == Precision::Bit ? std::vector<double>{} : dense(d);
        entries_.emplace(std::move(id), Entry{std::move(d), std::move(v)});
    }

    [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }
    [[nodiscard]] Precision precision() const noexcept { return precision_; }
    [[nodiscard]] bool contains(const std::string& id) const { return entries_.contains(id); }
    [[nodiscard]] const Descriptor& at(const std::string& id) const {
        auto it = entries_.find(id);
        if (it == entries_.end()) throw DomainError("unknown id '" + id + "'");
        return it->second.descriptor;
    }
    /// Ids in ascending order.
    [[nodiscard]] std::vector<std::string> ids() const {
        std::vector<std::string> r;
        for (const auto& [id, e] : entries_) r.push_back(id);
        return r;
    }

    /// Best-first ranking; ties broken by ascending id. k larger than the index clamps.
    [[nodiscard]] std::vector<SearchHit> search(const Descriptor& query, std::size_t k) const {
        if (entries_.empty()) return {};
        if (query.precision != precision_) {
            throw DomainError("query precision " + std::string(to_string(query.precision)) + " does not match index (" +
                              std::string(to_string(precision_)) + ")");
        }
        if (query.dim() != dim_) throw ShapeError("query dimension does not match the index");
        std::vector<SearchHit> hits;
        hits.reserve(entries_.size());
        if (precision_ == Precision::Bit) {
            for (const auto& [id, e] : entries_)
                hits.push_back({id, static_cast<double>(hamming(query.codes, e.descriptor.codes))});
            std::stable_sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
                return a.score < b.score || (a.score == b.score && a.id < b.id);
            });
        } else {
            const std::vector<double> q = dense(query);
            for (const auto& [id, e] : entries_) hits.push_back({id, cosine(q, e.dense)});
            std::stable_sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
                return a.score > b.score || (a.score == b.score && a.id < b.id);
            });
        }
        hits.resize(std::min(k, hits.size()));
        return hits;
    }

    /// Real-valued view used for cosine scoring (bytes dequantized through their scale).
    static std::vector<double> dense(const Descriptor& d) {
        switch (d.precision) {
            case Precision::Real: return d.values;
            case Precision::Byte: return dequantize_descriptor(d);
            case Precision::Bit: break;
        }
        std::vector<double> v(d.codes.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = d.codes[i] ? 1.0 : -1.0;
        return v;
    }

private:
    struct Entry {
        Descriptor descriptor;
        std::vector<double> dense;
    };

    std::map<std::string, Entry> entries_;
    Precision precision_ = Precision::Real;
    std::size_t dim_ = 0;
};

/// query id -> relevant database ids.
using GroundTruth = std::map<std::string, std::set<std::string>>;

/// Mean of precision@k over the ranks k that hold a relevant id, divided by |relevant|.
inline double average_precision(std::span<const std::string> ranked, const std::set<std::string>& relevant) {
    if (relevant.empty()) throw DomainError("average_precision: empty relevant set");
    std::size_t hits = 0;
    double sum = 0.0;
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        if (relevant.contains(ranked[k])) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
    }
    return sum / static_cast<double>(relevant.size());
}

struct QueryResult {
    std::string query;
    double ap = 0.0;
    std::vector<SearchHit> ranking;  // query excluded
};

struct Evaluation {
    double map = 0.0;
    std::vector<QueryResult> queries;
};

/// Every ground-truth query is looked up in the index itself and ranked against the
/// rest of the index (the query is removed from its own ranking).
inline Evaluation evaluate(const RetrievalIndex& index, const GroundTruth& gt) {
    if (gt.empty()) throw DomainError("evaluate: empty ground truth");
    Evaluation ev;
    double sum = 0.0;
    for (const auto& [q, relevant] : gt) {
        if (!index.contains(q)) throw DomainError("ground-truth query '" + q + "' is not in the index");
        for (const auto& r : relevant)
            if (!index.contains(r)) throw DomainError("relevant id '" + r + "' is not in the index");
        QueryResult res;
        res.query = q;
        for (auto& h : index.search(index.at(q), index.size()))
            if (h.id != q) res.ranking.push_back(std::move(h));
        std::vector<std::string> ids;
        for (const auto& h : res.ranking) ids.push_back(h.id);
        res.ap = average_precision(ids, relevant);
        sum += res.ap;
        ev.queries.push_back(std::move(res));
    }
    ev.map = sum / static_cast<double>(gt.size());
    return ev;
}

inline double mean_average_precision(const RetrievalIndex& index, const GroundTruth& gt) { return evaluate(index, gt).map; }

// ---- image rasters: "IMG1" | u16 C | u16 H | u16 W (LE) | C*H*W bytes, CHW order ----

inline constexpr std::string_view kImageMagic = "IMG1";

inline Bytes encode_image(const Tensor& image) {
    check_chw(image, "encode_image");
    ByteWriter w;
    w.raw(kImageMagic);
    w.u16(static_cast<std::uint16_t>(image.channels()));
    w.u16(static_cast<std::uint16_t>(image.height()));
    w.u16(static_cast<std::uint16_t>(image.width()));
    for (double v : image.data()) w.u8(static_cast<std::uint8_t>(std::clamp(std::round(v * 255.0), 0.0, 255.0)));
    return std::move(w).take();
}

inline Tensor decode_image(std::span<const std::uint8_t> bytes, const std::string& source = "image") {
    ByteReader r(bytes, source);
    if (bytes.size() < 4 || r.str(4) != kImageMagic) throw FormatError(source + ": bad magic (expected IMG1)");
    const std::size_t c = r.u16(), h = r.u16(), w = r.u16();
    if (c == 0 || h == 0 || w == 0) throw CorruptionError(source + ": zero image dimension");
    const auto px = r.raw(c * h * w);
    if (!r.at_end()) throw FormatError(source + ": trailing bytes");
    Tensor t({c, h, w});
    for (std::size_t i = 0; i < px.size(); ++i) t[i] = px[i] / 255.0;
    return t;
}

inline Tensor load_image(const std::filesystem::path& p) { return decode_image(read_file(p), p.string()); }
inline void save_image(const std::filesystem::path& p, const Tensor& t) { write_file(p, encode_image(t)); }

// ---- descriptor files ----
// "QDS1" | u16 dim | u32 count | records: u16 id length, id bytes, u8 precision,
// payload (dim f32 LE / dim bytes / ceil(dim/8) bytes MSB-first), f32 meta.

inline constexpr std::string_view kDescriptorMagic = "QDS1";

struct DescriptorRecord {
    std::string id;
    Descriptor descriptor;
};

inline Bytes encode_descriptors(std::span<const DescriptorRecord> records) {
    ByteWriter w;
    w.raw(kDescriptorMagic);
    const std::size_t dim = records.empty() ? 0 : records.front().descriptor.dim();
    w.u16(static_cast<std::uint16_t>(dim));
    w.u32(static_cast<std::uint32_t>(records.size()));
    Bytes out = std::move(w).take();
    for (const auto& rec : records) {
        const Descriptor& d = rec.descriptor;
        if (d.dim() != dim) throw ShapeError("descriptor file: mixed dimensions");
        ByteWriter r;
        r.u16(static_cast<std::uint16_t>(rec.id.size()));
        r.raw(rec.id);
        r.u8(static_cast<std::uint8_t>(d.precision));
        switch (d.precision) {
            case Precision::Real:
                for (double v : d.values) r.f32(static_cast<float>(v));
                break;
            case Precision::Byte: r.raw(d.codes); break;
            case Precision::Bit: break;
        }
        out.insert(out.end(), r.bytes().begin(), r.bytes().end());
        if (d.precision == Precision::Bit) {
            BitWriter bits(out);
            for (auto b : d.codes) bits.put(b ? 1u : 0u, 1);
        }
        ByteWriter m;
        m.f32(static_cast<float>(d.meta));
        out.insert(out.end(), m.bytes().begin(), m.bytes().end());
    }
    return out;
}

inline std::vector<DescriptorRecord> decode_descriptors(std::span<const std::uint8_t> bytes,
                                                        const std::string& source = "descriptors") {
    ByteReader r(bytes, source);
    if (bytes.size() < 4 || r.str(4) != kDescriptorMagic) throw FormatError(source + ": bad magic (expected QDS1)");
    const std::size_t dim = r.u16();
    const std::uint32_t count = r.u32();
    std::vector<DescriptorRecord> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        DescriptorRecord rec;
        rec.id = r.str(r.u16());
        const std::uint8_t tag = r.u8();
        if (tag > 2) throw CorruptionError(source + ": unknown precision tag " + std::to_string(tag));
        Descriptor& d = rec.descriptor;
        d.precision = static_cast<Precision>(tag);
        switch (d.precision) {
            case Precision::Real:
                d.values.resize(dim);
                for (auto& v : d.values) v = r.f32();
                break;
            case Precision::Byte: {
                const auto raw = r.raw(dim);
                d.codes.assign(raw.begin(), raw.end());
                break;
            }
            case Precision::Bit: {
                BitReader bits(r.raw(bytes_for_bits(dim)));
                d.codes.resize(dim);
                for (auto& b : d.codes) b = static_cast<std::uint8_t>(bits.get(1));
                break;
            }
        }
        d.meta = r.f32();
        out.push_back(std::move(rec));
    }
    if (!r.at_end()) throw FormatError(source + ": trailing bytes");
    return out;
}

inline RetrievalIndex build_index(std::span<const DescriptorRecord> records) {
    RetrievalIndex idx;
    for (const auto& r : records) idx.add(r.id, r.descriptor);
    return idx;
}

// ---- ground truth: one line per query, "query: id1 id2 ..." ----

inline std::string format_ground_truth(const GroundTruth& gt) {
    std::string s;
    for (const auto& [q, rel] : gt) {
        s += q + ":";
        for (const auto& r : rel) s += " " + r;
        s += "\n";
    }
    return s;
}

inline GroundTruth parse_ground_truth(std::string_view text, const std::string& source = "ground truth") {
    GroundTruth gt;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto colon = line.find(':');
        if (colon == std::string::npos) throw FormatError(source + ":" + std::to_string(line_no) + ": missing ':'");
        std::istringstream head(line.substr(0, colon));
        std::string q;
        head >> q;
        if (q.empty()) throw FormatError(source + ":" + std::to_string(line_no) + ": empty query id");
        std::istringstream rest(line.substr(colon + 1));
        std::set<std::string> rel;
        for (std::string id; rest >> id;) rel.insert(id);
        if (rel.empty()) throw FormatError(source + ":" + std::to_string(line_no) + ": query '" + q + "' has no relevant ids");
        if (!gt.emplace(q, std::move(rel)).second) throw FormatError(source + ": duplicate query '" + q + "'");
    }
    return gt;
}

// ---- ranked results: CSV "query_id,rank,id,score" ----

inline std::string format_results(const Evaluation& ev, std::size_t top = 0) {
    std::ostringstream s;
    s << "query_id,rank,id,score\n";
    s << std::setprecision(9);
    for (const auto& q : ev.queries) {
        const std::size_t n = top == 0 ? q.ranking.size() : std::min(top, q.ranking.size());
        for (std::size_t k = 0; k < n; ++k) s << q.query << ',' << k + 1 << ',' << q.ranking[k].id << ',' << q.ranking[k].score << '\n';
    }
    return s.str();
}

// ---- dataset ingestion ----

struct Dataset {
    std::vector<synth::NamedImage> images;  // ordered by numeric id
    GroundTruth ground_truth;
    std::vector<std::string> warnings;
};

/// Loads every *.img file in `dir`. Files whose numeric stem shares `stem / group_divisor`
/// form a group; the lowest id of each group is its query and the rest are relevant.
inline Dataset ingest_dataset(const std::filesystem::path& dir, std::uint64_t group_divisor = 100) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw FormatError("'" + dir.string() + "' is not a directory");
    if (group_divisor == 0) throw DomainError("group divisor must be positive");
    std::vector<std::pair<std::uint64_t, fs::path>> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".img") continue;
        const std::string stem = entry.path().stem().string();
        std::uint64_t n = 0;
        const auto [ptr, ec] = std::from_chars(stem.data(), stem.data() + stem.size(), n);
        if (ec != std::errc{} || ptr != stem.data() + stem.size()) {
            throw FormatError("'" + entry.path().string() + "': image names must be numeric ids");
        }
        files.emplace_back(n, entry.path());
    }
    if (files.empty()) throw FormatError("'" + dir.string() + "' contains no .img files");
    std::sort(files.begin(), files.end());

    Dataset ds;
    std::map<std::uint64_t, std::vector<std::string>> groups;
    for (const auto& [n, path] : files) {
        ds.images.push_back({path.stem().string(), load_image(path)});
        groups[n / group_divisor].push_back(path.stem().string());
    }
    for (const auto& [g, ids] : groups) {
        if (ids.size() < 2) {
            ds.warnings.push_back("group " + std::to_string(g) + " has a single image (" + ids.front() + "); skipped");
            continue;
        }
        ds.ground_truth[ids.front()] = std::set<std::string>(ids.begin() + 1, ids.end());
    }
    return ds;
}

}  // namespace qcnn
