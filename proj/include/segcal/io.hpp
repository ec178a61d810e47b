#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "segcal/calibrators.hpp"
#include "segcal/errors.hpp"
#include "segcal/grid.hpp"
#include "segcal/net.hpp"
#include "segcal/rng.hpp"

namespace segcal {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------------------------
// Little-endian byte helpers

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(const char* p, std::size_t n) { buf_.append(p, n); }

    void write_to(const fs::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw IoError("write failed for '" + path.string() + "'");
    }

private:
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}

    static ByteReader from_file(const fs::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open '" + path.string() + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        return ByteReader(ss.str(), path.string());
    }

    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    const std::string& origin() const noexcept { return origin_; }

    void need(std::size_t n) const {
        if (remaining() < n) throw FormatError(origin_ + ": truncated file");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(data_[pos_++]);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string fixed(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::string data_;
    std::string origin_;
    std::size_t pos_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Subject files ("SCV1")
//
//   "SCV1" | version u8 = 1 | height u32 | width u32 | presence u8
//   then for each present grid, in bit order, height*width f64 values (row-major).
//
// Presence bits: 0 image, 1 labels, 2 eval_mask (all three required), 3 reference_posterior,
// 4 logits, 5 probabilities. The subject id is the file stem.

inline constexpr char kSubjectMagic[4] = {'S', 'C', 'V', '1'};
inline constexpr std::uint8_t kSubjectVersion = 1;
inline constexpr const char* kSubjectExtension = ".scv";

enum SubjectGridBit : std::uint8_t {
    kBitImage = 1u << 0,
    kBitLabels = 1u << 1,
    kBitEvalMask = 1u << 2,
    kBitPosterior = 1u << 3,
    kBitLogits = 1u << 4,
    kBitProbabilities = 1u << 5,
};

inline void save_subject(const fs::path& path, const Subject& s) {
    s.validate();
    detail::ByteWriter w;
    w.bytes(kSubjectMagic, 4);
    w.u8(kSubjectVersion);
    w.u32(static_cast<std::uint32_t>(s.height()));
    w.u32(static_cast<std::uint32_t>(s.width()));
    std::uint8_t bits = kBitImage | kBitLabels | kBitEvalMask;
    if (s.reference_posterior) bits |= kBitPosterior;
    if (s.logits) bits |= kBitLogits;
    if (s.probabilities) bits |= kBitProbabilities;
    w.u8(bits);
    auto put = [&](const Grid2D& g) {
        for (double v : g.values()) w.f64(v);
    };
    put(s.image);
    put(s.labels);
    put(s.eval_mask);
    if (s.reference_posterior) put(*s.reference_posterior);
    if (s.logits) put(*s.logits);
    if (s.probabilities) put(*s.probabilities);
    w.write_to(path);
}

inline Subject load_subject(const fs::path& path) {
    auto r = detail::ByteReader::from_file(path);
    const std::string name = path.string();
    if (r.remaining() < 4 || r.fixed(4) != std::string(kSubjectMagic, 4)) {
        throw FormatError(name + ": bad magic (expected SCV1)");
    }
    const auto version = r.u8();
    if (version != kSubjectVersion) {
        throw FormatError(name + ": unsupported version " + std::to_string(version));
    }
    const std::size_t h = r.u32();
    const std::size_t w = r.u32();
    const std::uint8_t bits = r.u8();
    if (h == 0 || w == 0) throw FormatError(name + ": zero grid dimension");
    constexpr std::uint8_t required = kBitImage | kBitLabels | kBitEvalMask;
    if ((bits & required) != required) {
        throw FormatError(name + ": image, labels and eval_mask grids are required");
    }
    if (bits & ~0x3Fu) throw FormatError(name + ": unknown grid bits set");
    const std::size_t n_grids = static_cast<std::size_t>(std::popcount(bits));
    const std::size_t payload = n_grids * h * w * 8;
    if (r.remaining() != payload) {
        throw FormatError(name + ": payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                          std::to_string(payload) + (r.remaining() < payload ? " (truncated)" : ""));
    }
    auto get = [&] {
        std::vector<double> v(h * w);
        for (double& x : v) x = r.f64();
        return Grid2D(h, w, std::move(v));
    };
    Subject s;
    s.id = path.stem().string();
    s.image = get();
    s.labels = get();
    s.eval_mask = get();
    if (bits & kBitPosterior) s.reference_posterior = get();
    if (bits & kBitLogits) s.logits = get();
    if (bits & kBitProbabilities) s.probabilities = get();
    try {
        s.validate();
    } catch (const Error& e) {
        throw FormatError(name + ": " + e.what());
    }
    return s;
}

inline void save_dataset(const fs::path& dir, const std::vector<Subject>& subjects) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
    for (const auto& s : subjects) {
        save_subject(dir / (s.id + kSubjectExtension), s);
    }
}

/// All *.scv files of a directory, sorted by id. Any bad file aborts the whole load.
inline std::vector<Subject> load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        throw IoError("dataset directory '" + dir.string() + "' does not exist");
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == kSubjectExtension) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<Subject> out;
    out.reserve(files.size());
    for (const auto& f : files) out.push_back(load_subject(f));
    return out;
}

// ---------------------------------------------------------------------------------------------
// Checkpoints ("SCW1")
//
//   "SCW1" | version u8 = 1 | kind u8 | fingerprint u64 | extra u32 | count u64 | count x f64
//
// kind 1 = network (extra = frozen-layer bitmap, payload = per layer weights then biases),
// kind 2 = Platt (payload a, b), kind 3 = aux conv (extra = k, payload = kernel then bias).

inline constexpr char kCheckpointMagic[4] = {'S', 'C', 'W', '1'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint8_t { Network = 1, Platt = 2, AuxConv = 3 };

inline const char* to_string(CheckpointKind k) {
    switch (k) {
        case CheckpointKind::Network: return "network";
        case CheckpointKind::Platt: return "platt";
        case CheckpointKind::AuxConv: return "aux-conv";
    }
    return "unknown";
}

inline std::uint64_t network_fingerprint() { return fnv1a(kArchitectureSignature); }
inline std::uint64_t platt_fingerprint() { return fnv1a("platt:sigmoid(a*z+b)"); }
inline std::uint64_t aux_fingerprint(std::size_t k) {
    return fnv1a("auxconv:k=" + std::to_string(k) + ",in=1,out=1,zero-pad");
}

namespace detail {

struct CheckpointBlob {
    CheckpointKind kind;
    std::uint64_t fingerprint;
    std::uint32_t extra;
    std::vector<double> values;
};

inline void write_checkpoint(const fs::path& path, const CheckpointBlob& b) {
    ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.u8(kCheckpointVersion);
    w.u8(static_cast<std::uint8_t>(b.kind));
    w.u64(b.fingerprint);
    w.u32(b.extra);
    w.u64(b.values.size());
    for (double v : b.values) w.f64(v);
    w.write_to(path);
}

inline CheckpointBlob read_checkpoint(const fs::path& path, CheckpointKind expected) {
    auto r = ByteReader::from_file(path);
    const std::string name = path.string();
    if (r.remaining() < 4 || r.fixed(4) != std::string(kCheckpointMagic, 4)) {
        throw FormatError(name + ": bad magic (expected SCW1)");
    }
    const auto version = r.u8();
    if (version != kCheckpointVersion) {
        throw FormatError(name + ": unsupported version " + std::to_string(version));
    }
    CheckpointBlob b;
    const auto kind = r.u8();
    if (kind < 1 || kind > 3) throw FormatError(name + ": unknown checkpoint kind");
    b.kind = static_cast<CheckpointKind>(kind);
    b.fingerprint = r.u64();
    b.extra = r.u32();
    const std::uint64_t count = r.u64();
    if (r.remaining() != count * 8) {
        throw FormatError(name + ": payload length does not match its declared count");
    }
    if (b.kind != expected) {
        throw CompatibilityError(name + ": holds " + to_string(b.kind) + " parameters, not " +
                                 to_string(expected) + " (convert explicitly after loading)");
    }
    b.values.resize(count);
    for (double& v : b.values) v = r.f64();
    return b;
}

}  // namespace detail

inline void save_checkpoint(const fs::path& path, const NetParams& p) {
    detail::CheckpointBlob b{CheckpointKind::Network, network_fingerprint(), 0, {}};
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        if (p.layers[l].frozen) b.extra |= 1u << l;
        b.values.insert(b.values.end(), p.layers[l].weights.begin(), p.layers[l].weights.end());
        b.values.insert(b.values.end(), p.layers[l].biases.begin(), p.layers[l].biases.end());
    }
    detail::write_checkpoint(path, b);
}

inline void save_checkpoint(const fs::path& path, const PlattParams& p) {
    detail::write_checkpoint(path, {CheckpointKind::Platt, platt_fingerprint(), 0, {p.a, p.b}});
}

inline void save_checkpoint(const fs::path& path, const AuxConvParams& p) {
    p.validate();
    detail::CheckpointBlob b{CheckpointKind::AuxConv, aux_fingerprint(p.k),
                             static_cast<std::uint32_t>(p.k), p.kernel};
    b.values.push_back(p.bias);
    detail::write_checkpoint(path, b);
}

inline NetParams load_network_checkpoint(const fs::path& path) {
    const auto b = detail::read_checkpoint(path, CheckpointKind::Network);
    if (b.fingerprint != network_fingerprint()) {
        throw CompatibilityError(path.string() + ": architecture fingerprint mismatch");
    }
    NetParams p;
    std::size_t expected = 0;
    for (const auto& l : p.layers) expected += l.parameter_count();
    if (b.values.size() != expected) {
        throw FormatError(path.string() + ": network payload has " + std::to_string(b.values.size()) +
                          " values, expected " + std::to_string(expected));
    }
    std::size_t pos = 0;
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        auto& layer = p.layers[l];
        for (double& v : layer.weights) v = b.values[pos++];
        for (double& v : layer.biases) v = b.values[pos++];
        layer.frozen = (b.extra >> l) & 1u;
    }
    return p;
}

inline PlattParams load_platt_checkpoint(const fs::path& path) {
    const auto b = detail::read_checkpoint(path, CheckpointKind::Platt);
    if (b.fingerprint != platt_fingerprint()) {
        throw CompatibilityError(path.string() + ": Platt fingerprint mismatch");
    }
    if (b.values.size() != 2) throw FormatError(path.string() + ": Platt payload must hold 2 values");
    return {b.values[0], b.values[1]};
}

inline AuxConvParams load_aux_checkpoint(const fs::path& path) {
    const auto b = detail::read_checkpoint(path, CheckpointKind::AuxConv);
    const std::size_t k = b.extra;
    if (k == 0 || k % 2 == 0 || b.fingerprint != aux_fingerprint(k)) {
        throw CompatibilityError(path.string() + ": aux-conv fingerprint mismatch");
    }
    if (b.values.size() != k * k + 1) {
        throw FormatError(path.string() + ": aux-conv payload does not match k");
    }
    AuxConvParams p;
    p.k = k;
    p.kernel.assign(b.values.begin(), b.values.end() - 1);
    p.bias = b.values.back();
    return p;
}

/// Kind stored in a checkpoint file, without loading its payload.
inline CheckpointKind peek_checkpoint_kind(const fs::path& path) {
    auto r = detail::ByteReader::from_file(path);
    if (r.remaining() < 6 || r.fixed(4) != std::string(kCheckpointMagic, 4)) {
        throw FormatError(path.string() + ": bad magic (expected SCW1)");
    }
    r.u8();
    const auto kind = r.u8();
    if (kind < 1 || kind > 3) throw FormatError(path.string() + ": unknown checkpoint kind");
    return static_cast<CheckpointKind>(kind);
}

// ---------------------------------------------------------------------------------------------
// CSV

/// 17 significant digits: doubles survive a text round-trip unchanged.
inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline double parse_real(const std::string& s) {
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0' || errno == ERANGE) {
        throw FormatError("not a number: '" + s + "'");
    }
    return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline void write_csv(const fs::path& path, const CsvTable& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
        out << '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline CsvTable read_csv(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    CsvTable t;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (first) {
            t.header = std::move(cells);
            first = false;
        } else {
            if (cells.size() != t.header.size()) {
                throw FormatError(path.string() + ": row width does not match header");
            }
            t.rows.push_back(std::move(cells));
        }
    }
    if (first) throw FormatError(path.string() + ": empty CSV");
    return t;
}

}  // namespace segcal
