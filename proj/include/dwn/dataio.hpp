#pragma once

/// @file dataio.hpp
/// 8-bit PGM/PPM image I/O, the synthetic shape dataset, checkpoint
/// serialization (magic "DWN1", JSON header, little-endian payload with CRC32)
/// and metrics CSV emission.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <variant>
#include <vector>

#include <zlib.h>

#include "dwn/models.hpp"
#include "dwn/rng.hpp"
#include "json.hpp"

namespace dwn {

// ---------------------------------------------------------------------------
// Images: binary PGM (P5) and PPM (P6), 8-bit only
// ---------------------------------------------------------------------------

namespace detail {
inline int pnm_token(std::istream& in, const std::string& path) {
    // whitespace- and comment-tolerant integer scan
    int c = in.get();
    while (c == '#' || std::isspace(c)) {
        if (c == '#')
            while (c != '\n' && c != EOF) c = in.get();
        c = in.get();
    }
    if (c == EOF)
        throw io_error(path + ": truncated header at byte offset " + std::to_string(in.tellg()));
    int value = 0;
    bool any = false;
    while (std::isdigit(c)) {
        value = value * 10 + (c - '0');
        any = true;
        c = in.get();
    }
    if (!any)
        throw io_error(path + ": expected integer in header near byte offset " +
                       std::to_string(static_cast<long long>(in.tellg()) - 1));
    return value;
}
} // namespace detail

/// Reads an 8-bit binary PGM (one channel) or PPM (three channels); pixel
/// values map to [0,1] by /255.
inline Field load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error(path + ": cannot open for reading");
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    int channels;
    if (m0 == 'P' && m1 == '5') channels = 1;
    else if (m0 == 'P' && m1 == '6') channels = 3;
    else throw io_error(path + ": unsupported magic at byte offset 0 (want P5 or P6)");
    const int width = detail::pnm_token(in, path);
    const int height = detail::pnm_token(in, path);
    const int maxval = detail::pnm_token(in, path);
    if (maxval != 255)
        throw io_error(path + ": unsupported maxval " + std::to_string(maxval) +
                       " at byte offset " + std::to_string(static_cast<long long>(in.tellg()) - 1));
    if (width < 1 || height < 1) throw io_error(path + ": non-positive dimensions");

    const std::size_t n = static_cast<std::size_t>(width) * height * channels;
    std::vector<unsigned char> bytes(n);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw io_error(path + ": truncated payload at byte offset " +
                       std::to_string(static_cast<long long>(in.tellg())));

    Field f(height, width, channels);
    double* p = f.data();
    for (std::size_t k = 0; k < n; ++k) p[k] = bytes[k] / 255.0;
    return f;
}

/// Writes a 1-channel field as PGM or a 3-channel field as PPM; values are
/// clamped to [0,1] and quantized round-half-up to 8 bits.
inline void save_image(const Field& f, const std::string& path) {
    if (f.channels() != 1 && f.channels() != 3)
        throw io_error(path + ": only 1- or 3-channel fields can be written");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error(path + ": cannot open for writing");
    out << (f.channels() == 1 ? "P5" : "P6") << "\n"
        << f.width() << " " << f.height() << "\n255\n";
    std::vector<unsigned char> bytes(f.size());
    const double* p = f.data();
    for (std::size_t k = 0; k < f.size(); ++k) {
        double v = std::floor(p[k] * 255.0 + 0.5);
        bytes[k] = static_cast<unsigned char>(v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error(path + ": write failed");
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

struct Dataset {
    std::vector<Field> images; // values in [0,1]
    std::vector<Field> masks;  // binary
    std::vector<std::string> names;

    std::size_t size() const { return images.size(); }
};

namespace detail {
/// Foreground test for one randomly drawn shape.
struct Shape {
    int kind; // 0 disk, 1 axis-aligned rectangle, 2 harmonic blob
    double cx, cy, r;
    double x0, y0, x1, y1;
    double amp[3], phase[3];

    bool contains(double x, double y) const {
        if (kind == 1) return x >= x0 && x < x1 && y >= y0 && y < y1;
        const double dx = x - cx, dy = y - cy;
        const double d = std::sqrt(dx * dx + dy * dy);
        if (kind == 0) return d <= r;
        const double th = std::atan2(dy, dx);
        double rr = r;
        for (int k = 0; k < 3; ++k) rr += r * amp[k] * std::cos((k + 2) * th + phase[k]);
        return d <= rr;
    }
};

inline Shape draw_shape(Rng& rng, double size) {
    Shape s{};
    s.kind = static_cast<int>(rng.below(3));
    if (s.kind == 1) {
        s.x0 = rng.uniform(0.10, 0.55) * size;
        s.y0 = rng.uniform(0.10, 0.55) * size;
        s.x1 = s.x0 + rng.uniform(0.15, 0.35) * size;
        s.y1 = s.y0 + rng.uniform(0.15, 0.35) * size;
    } else {
        s.cx = rng.uniform(0.25, 0.75) * size;
        s.cy = rng.uniform(0.25, 0.75) * size;
        s.r = rng.uniform(s.kind == 0 ? 0.12 : 0.10, s.kind == 0 ? 0.30 : 0.26) * size;
        for (int k = 0; k < 3; ++k) {
            s.amp[k] = rng.uniform(-0.3, 0.3) / (k + 2);
            s.phase[k] = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        }
    }
    return s;
}
} // namespace detail

/// Deterministically generates n image/mask pairs. Sample i is a pure function
/// of (seed, i): 1-3 random shapes union into the mask, the image is
/// low + (high-low)*mask plus Gaussian noise, clamped to [0,1].
inline Dataset synth_dataset(std::uint64_t seed, int n, int size, double noise_sd,
                             std::pair<double, double> contrast) {
    if (n < 1) throw config_error("synth_dataset: sample count must be positive");
    if (size < 16 || size % 16 != 0)
        throw config_error("synth_dataset: size must be a positive multiple of 16, got " +
                           std::to_string(size));
    const auto [lo, hi] = contrast;
    if (!(0.0 <= lo && lo < hi && hi <= 1.0))
        throw config_error("synth_dataset: contrast must satisfy 0 <= low < high <= 1");
    if (noise_sd < 0.0) throw config_error("synth_dataset: noise_sd must be >= 0");

    Dataset ds;
    ds.images.reserve(n);
    ds.masks.reserve(n);
    ds.names.reserve(n);
    for (int idx = 0; idx < n; ++idx) {
        Rng rng(substream(seed, static_cast<std::uint64_t>(idx)));
        const int count = 1 + static_cast<int>(rng.below(3));
        std::vector<detail::Shape> shapes;
        for (int k = 0; k < count; ++k) shapes.push_back(detail::draw_shape(rng, size));

        Field mask(size, size, 1);
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j) {
                const double y = i + 0.5, x = j + 0.5;
                for (const auto& s : shapes)
                    if (s.contains(x, y)) {
                        mask.at(i, j, 0) = 1.0;
                        break;
                    }
            }
        Field img(size, size, 1);
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j) {
                double v = lo + (hi - lo) * mask.at(i, j, 0);
                if (noise_sd > 0.0) v += noise_sd * rng.gaussian();
                img.at(i, j, 0) = proj01(v);
            }
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04d", idx);
        ds.images.push_back(std::move(img));
        ds.masks.push_back(std::move(mask));
        ds.names.emplace_back(name);
    }
    return ds;
}

/// Writes image/mask PGM pairs plus a manifest JSON naming every pair.
inline void save_dataset(const Dataset& ds, const std::string& dir,
                         const nlohmann::json& generation_params = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    if (!generation_params.is_null() && !generation_params.empty())
        manifest["generation"] = generation_params;
    manifest["items"] = nlohmann::json::array();
    for (std::size_t k = 0; k < ds.size(); ++k) {
        const std::string img = ds.names[k] + "_img.pgm";
        const std::string msk = ds.names[k] + "_mask.pgm";
        save_image(ds.images[k], (fs::path(dir) / img).string());
        save_image(ds.masks[k], (fs::path(dir) / msk).string());
        manifest["items"].push_back({{"name", ds.names[k]}, {"image", img}, {"mask", msk}});
    }
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw io_error(dir + ": cannot write manifest.json");
    out << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw io_error(dir + ": missing manifest.json");
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw io_error(dir + ": malformed manifest.json: " + e.what());
    }
    if (!manifest.contains("items") || !manifest["items"].is_array())
        throw io_error(dir + ": manifest.json has no items array");
    Dataset ds;
    for (const auto& item : manifest["items"]) {
        ds.names.push_back(item.at("name").get<std::string>());
        ds.images.push_back(load_image((fs::path(dir) / item.at("image").get<std::string>()).string()));
        Field mask = load_image((fs::path(dir) / item.at("mask").get<std::string>()).string());
        if (mask.height() != ds.images.back().height() || mask.width() != ds.images.back().width())
            throw io_error(dir + ": image/mask spatial dims differ for " + ds.names.back());
        ds.masks.push_back(threshold(mask));
    }
    if (ds.images.empty()) throw io_error(dir + ": dataset is empty");
    return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'D', 'W', 'N', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}
inline std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int b = 3; b >= 0; --b) v = (v << 8) | p[b];
    return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int b = 7; b >= 0; --b) v = (v << 8) | p[b];
    return v;
}
inline void put_f64_le(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}
inline double get_f64_le(const unsigned char* p) {
    const std::uint64_t bits = get_u64(p);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

inline const char* activation_name(Activation a) {
    return a == Activation::QgammaSig ? "qgamma_sig" : "qgamma_proj";
}
inline Activation activation_from(const std::string& s) {
    if (s == "qgamma_sig") return Activation::QgammaSig;
    if (s == "qgamma_proj") return Activation::QgammaProj;
    throw config_error("unknown activation '" + s + "' (want qgamma_sig or qgamma_proj)");
}

inline nlohmann::json scheme_json(const DoubleWellParams& p) {
    return {{"tau", p.tau},
            {"lambda_eps", p.lambda_eps},
            {"alpha", p.alpha},
            {"gamma", p.gamma},
            {"activation", activation_name(p.activation)}};
}
inline DoubleWellParams scheme_from_json(const nlohmann::json& j) {
    DoubleWellParams p;
    p.tau = j.at("tau").get<double>();
    p.lambda_eps = j.at("lambda_eps").get<double>();
    p.alpha = j.at("alpha").get<double>();
    p.gamma = j.at("gamma").get<int>();
    p.activation = activation_from(j.at("activation").get<std::string>());
    p.validate();
    return p;
}

template <class Model>
inline std::string checkpoint_bytes(Model& model, const nlohmann::json& config,
                                    const std::string& kind) {
    auto views = model.manifest();
    std::string payload;
    nlohmann::json tensors = nlohmann::json::array();
    for (const TensorView& t : views) {
        tensors.push_back({{"name", t.name},
                           {"shape", t.shape},
                           {"dtype", "f64"},
                           {"offset", payload.size()}});
        for (std::size_t k = 0; k < t.size; ++k) put_f64_le(payload, t.data[k]);
    }
    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(crc32(0L, Z_NULL, 0),
              reinterpret_cast<const Bytef*>(payload.data()),
              static_cast<uInt>(payload.size())));
    nlohmann::json header = {{"model", kind},
                             {"config", config},
                             {"tensors", tensors},
                             {"payload_bytes", payload.size()},
                             {"payload_crc32", crc}};
    const std::string header_text = header.dump();

    std::string bytes;
    bytes.append(kCheckpointMagic, 4);
    put_u32(bytes, kCheckpointVersion);
    put_u64(bytes, header_text.size());
    bytes += header_text;
    bytes += payload;
    return bytes;
}
} // namespace detail

inline void save_checkpoint(DNIParams& model, const std::string& path) {
    nlohmann::json cfg = {{"image_channels", model.image_channels()},
                          {"channels", model.region_net.config.channels},
                          {"blocks", model.block_count()},
                          {"kernel_size", model.input_layer.k_h},
                          {"scheme", detail::scheme_json(model.scheme)}};
    const std::string bytes = detail::checkpoint_bytes(model, cfg, "dn1");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error(path + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error(path + ": write failed");
}

inline void save_checkpoint(DNIIParams& model, const std::string& path) {
    nlohmann::json cfg = {{"image_channels", model.image_channels()},
                          {"channels", model.blocks.front().config.channels},
                          {"blocks", model.block_count()},
                          {"kernel_size", model.input_layer.k_h},
                          {"scheme", detail::scheme_json(model.scheme)}};
    const std::string bytes = detail::checkpoint_bytes(model, cfg, "dn2");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error(path + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error(path + ": write failed");
}

using LoadedModel = std::variant<DNIParams, DNIIParams>;

inline LoadedModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error(path + ": cannot open for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16) throw io_error(path + ": file too short for a checkpoint");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw io_error(path + ": bad magic (not a DWN1 checkpoint)");
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t version = detail::get_u32(raw + 4);
    if (version != kCheckpointVersion)
        throw io_error(path + ": unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t header_len = detail::get_u64(raw + 8);
    if (16 + header_len > bytes.size()) throw io_error(path + ": truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw io_error(path + ": malformed header JSON: " + e.what());
    }
    const std::string payload = bytes.substr(16 + header_len);
    const std::uint64_t expect_bytes = header.at("payload_bytes").get<std::uint64_t>();
    if (payload.size() != expect_bytes)
        throw io_error(path + ": payload is " + std::to_string(payload.size()) +
                       " bytes, header declares " + std::to_string(expect_bytes));
    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(payload.data()),
              static_cast<uInt>(payload.size())));
    if (crc != header.at("payload_crc32").get<std::uint32_t>())
        throw io_error(path + ": payload CRC32 mismatch (corrupt checkpoint)");

    const std::string kind = header.at("model").get<std::string>();
    const nlohmann::json& cfg = header.at("config");
    LoadedModel model = [&]() -> LoadedModel {
        if (kind == "dn1") {
            DN1Config c;
            c.image_channels = cfg.at("image_channels").get<int>();
            c.channels = cfg.at("channels").get<std::vector<int>>();
            c.blocks = cfg.at("blocks").get<int>();
            c.kernel_size = cfg.at("kernel_size").get<int>();
            c.scheme = detail::scheme_from_json(cfg.at("scheme"));
            return build_dn1(c, 0);
        }
        if (kind == "dn2") {
            DN2Config c;
            c.image_channels = cfg.at("image_channels").get<int>();
            c.channels = cfg.at("channels").get<std::vector<int>>();
            c.blocks = cfg.at("blocks").get<int>();
            c.kernel_size = cfg.at("kernel_size").get<int>();
            c.scheme = detail::scheme_from_json(cfg.at("scheme"));
            return build_dn2(c, 0);
        }
        throw io_error(path + ": unknown model kind '" + kind + "'");
    }();

    auto views = std::visit([](auto& m) { return m.manifest(); }, model);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != views.size())
        throw io_error(path + ": header lists " + std::to_string(tensors.size()) +
                       " tensors, model needs " + std::to_string(views.size()));
    const auto* pl = reinterpret_cast<const unsigned char*>(payload.data());
    for (std::size_t k = 0; k < views.size(); ++k) {
        const auto& t = tensors[k];
        if (t.at("name").get<std::string>() != views[k].name)
            throw io_error(path + ": tensor " + std::to_string(k) + " is '" +
                           t.at("name").get<std::string>() + "', expected '" + views[k].name + "'");
        if (t.at("dtype").get<std::string>() != "f64")
            throw io_error(path + ": unsupported dtype for " + views[k].name);
        const std::uint64_t offset = t.at("offset").get<std::uint64_t>();
        if (offset + 8 * views[k].size > payload.size())
            throw io_error(path + ": tensor " + views[k].name + " overruns the payload");
        for (std::size_t e = 0; e < views[k].size; ++e)
            views[k].data[e] = detail::get_f64_le(pl + offset + 8 * e);
    }
    return model;
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

struct MetricsRecord {
    int epoch = 0;
    double mean_loss = 0.0;
    double accuracy_pct = 0.0; // [0, 100]
    double dice = 0.0;         // [0, 1]
    double wall_seconds = 0.0;
};

/// Fixed header, one row per record, 6 significant digits, C locale.
inline void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error(path + ": cannot open for writing");
    out << "epoch,mean_loss,accuracy_pct,dice,wall_seconds\n";
    char line[160];
    for (const MetricsRecord& r : records) {
        std::snprintf(line, sizeof(line), "%d,%.6g,%.6g,%.6g,%.6g\n", r.epoch, r.mean_loss,
                      r.accuracy_pct, r.dice, r.wall_seconds);
        out << line;
    }
    if (!out) throw io_error(path + ": write failed");
}

} // namespace dwn
