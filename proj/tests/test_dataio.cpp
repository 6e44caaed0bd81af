#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "dwn/dataio.hpp"
#include "support.hpp"

using dwn::Field;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    return (fs::path(::testing::TempDir()) / name).string();
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

TEST(Pgm, EightBitRoundTripIsExact) {
    Field f(5, 7, 1);
    dwn::Rng rng(1);
    for (double& v : f.raw()) v = static_cast<double>(rng.below(256)) / 255.0;
    const std::string path = tmp_path("roundtrip.pgm");
    dwn::save_image(f, path);
    Field g = dwn::load_image(path);
    ASSERT_TRUE(g.same_shape(f));
    for (std::size_t k = 0; k < f.size(); ++k) EXPECT_EQ(g.data()[k], f.data()[k]);
}

TEST(Pgm, ParsesMinimalHeader) {
    std::string bytes = "P5 4 4 255\n";
    for (int k = 0; k < 16; ++k) bytes.push_back(static_cast<char>(k * 16));
    const std::string path = tmp_path("minimal.pgm");
    write_bytes(path, bytes);
    Field f = dwn::load_image(path);
    EXPECT_EQ(f.height(), 4);
    EXPECT_EQ(f.width(), 4);
    EXPECT_EQ(f.channels(), 1);
    EXPECT_DOUBLE_EQ(f.at(0, 1, 0), 16.0 / 255.0);
}

TEST(Pgm, QuantizesRoundHalfUp) {
    Field f(1, 1, 1, 0.5004); // 0.5004*255 = 127.602 -> byte 128
    const std::string path = tmp_path("quant.pgm");
    dwn::save_image(f, path);
    const std::string bytes = read_bytes(path);
    EXPECT_EQ(static_cast<unsigned char>(bytes.back()), 128);
    EXPECT_DOUBLE_EQ(dwn::load_image(path).at(0, 0, 0), 128.0 / 255.0);
}

TEST(Pgm, ThreeChannelPpm) {
    Field f(3, 2, 3);
    dwn::Rng rng(2);
    for (double& v : f.raw()) v = static_cast<double>(rng.below(256)) / 255.0;
    const std::string path = tmp_path("color.ppm");
    dwn::save_image(f, path);
    Field g = dwn::load_image(path);
    ASSERT_EQ(g.channels(), 3);
    for (std::size_t k = 0; k < f.size(); ++k) EXPECT_EQ(g.data()[k], f.data()[k]);
}

TEST(Pgm, RejectsMalformedFiles) {
    const std::string magic = tmp_path("bad_magic.pgm");
    write_bytes(magic, "P3 2 2 255\n0000");
    EXPECT_THROW(dwn::load_image(magic), dwn::io_error);

    const std::string truncated = tmp_path("truncated.pgm");
    write_bytes(truncated, "P5 4 4 255\nab");
    try {
        dwn::load_image(truncated);
        FAIL() << "expected io_error";
    } catch (const dwn::io_error& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos) << e.what();
    }

    const std::string maxval = tmp_path("wide.pgm");
    write_bytes(maxval, "P5 2 2 65535\n00000000");
    EXPECT_THROW(dwn::load_image(maxval), dwn::io_error);

    EXPECT_THROW(dwn::load_image(tmp_path("missing.pgm")), dwn::io_error);
    EXPECT_THROW(dwn::save_image(Field(2, 2, 2), tmp_path("twochan.pgm")), dwn::io_error);
}

TEST(Synth, NoiselessImagesAreTwoLevel) {
    dwn::Dataset ds = dwn::synth_dataset(3, 8, 32, 0.0, {0.25, 0.75});
    for (std::size_t k = 0; k < ds.size(); ++k) {
        for (int i = 0; i < 32; ++i)
            for (int j = 0; j < 32; ++j) {
                const double v = ds.images[k].at(i, j, 0);
                EXPECT_TRUE(v == 0.25 || v == 0.75);
                // thresholding at mid-contrast reproduces the mask
                EXPECT_EQ(v >= 0.5 ? 1.0 : 0.0, ds.masks[k].at(i, j, 0));
            }
    }
}

TEST(Synth, DeterministicPerSeed) {
    dwn::Dataset a = dwn::synth_dataset(7, 5, 32, 0.1, {0.25, 0.75});
    dwn::Dataset b = dwn::synth_dataset(7, 5, 32, 0.1, {0.25, 0.75});
    for (std::size_t k = 0; k < a.size(); ++k) {
        for (std::size_t e = 0; e < a.images[k].size(); ++e)
            ASSERT_EQ(a.images[k].data()[e], b.images[k].data()[e]);
        for (std::size_t e = 0; e < a.masks[k].size(); ++e)
            ASSERT_EQ(a.masks[k].data()[e], b.masks[k].data()[e]);
    }
    dwn::Dataset c = dwn::synth_dataset(8, 5, 32, 0.1, {0.25, 0.75});
    bool differs = false;
    for (std::size_t e = 0; e < a.images[0].size() && !differs; ++e)
        differs = a.images[0].data()[e] != c.images[0].data()[e];
    EXPECT_TRUE(differs);
}

TEST(Synth, ForegroundFractionStaysInBand) {
    dwn::Dataset ds = dwn::synth_dataset(123, 1000, 32, 0.0, {0.25, 0.75});
    double fraction = 0.0;
    for (std::size_t k = 0; k < ds.size(); ++k) {
        double fg = 0.0;
        for (std::size_t e = 0; e < ds.masks[k].size(); ++e) fg += ds.masks[k].data()[e];
        fraction += fg / static_cast<double>(ds.masks[k].size());
    }
    fraction /= static_cast<double>(ds.size());
    EXPECT_GE(fraction, 0.1);
    EXPECT_LE(fraction, 0.6);
}

TEST(Synth, RejectsInvalidParameters) {
    EXPECT_THROW(dwn::synth_dataset(0, 4, 60, 0.1, {0.25, 0.75}), dwn::config_error);
    EXPECT_THROW(dwn::synth_dataset(0, 4, 32, 0.1, {0.75, 0.25}), dwn::config_error);
    EXPECT_THROW(dwn::synth_dataset(0, 4, 32, 0.1, {0.25, 1.25}), dwn::config_error);
    EXPECT_THROW(dwn::synth_dataset(0, 0, 32, 0.1, {0.25, 0.75}), dwn::config_error);
}

TEST(DatasetDir, SaveLoadRoundTrip) {
    dwn::Dataset ds = dwn::synth_dataset(11, 4, 32, 0.1, {0.25, 0.75});
    const std::string dir = tmp_path("dataset_roundtrip");
    dwn::save_dataset(ds, dir, {{"seed", 11}});
    dwn::Dataset back = dwn::load_dataset(dir);
    ASSERT_EQ(back.size(), ds.size());
    for (std::size_t k = 0; k < ds.size(); ++k) {
        EXPECT_EQ(back.names[k], ds.names[k]);
        // images went through 8-bit quantization; masks are exact
        for (std::size_t e = 0; e < ds.masks[k].size(); ++e)
            ASSERT_EQ(back.masks[k].data()[e], ds.masks[k].data()[e]);
        for (std::size_t e = 0; e < ds.images[k].size(); ++e)
            ASSERT_NEAR(back.images[k].data()[e], ds.images[k].data()[e], 0.5 / 255.0);
    }
    EXPECT_THROW(dwn::load_dataset(tmp_path("no_such_dir")), dwn::io_error);
}

namespace {

dwn::DNIParams small_dn1() {
    dwn::DN1Config cfg{1, {2, 4}, 3, 3, dwn::DoubleWellParams{}};
    return dwn::build_dn1(cfg, 5);
}

} // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    dwn::DNIParams model = small_dn1();
    const std::string p1 = tmp_path("ck1.dwn"), p2 = tmp_path("ck2.dwn");
    dwn::save_checkpoint(model, p1);
    dwn::LoadedModel loaded = dwn::load_checkpoint(p1);
    ASSERT_TRUE(std::holds_alternative<dwn::DNIParams>(loaded));
    dwn::save_checkpoint(std::get<dwn::DNIParams>(loaded), p2);
    EXPECT_EQ(read_bytes(p1), read_bytes(p2));

    // tensors round-trip bit-exactly
    auto mv = model.manifest();
    auto lv = std::get<dwn::DNIParams>(loaded).manifest();
    for (std::size_t t = 0; t < mv.size(); ++t)
        for (std::size_t e = 0; e < mv[t].size; ++e) ASSERT_EQ(mv[t].data[e], lv[t].data[e]);
}

TEST(Checkpoint, Dn2RoundTrip) {
    dwn::DN2Config cfg{1, {2}, 2, 3, dwn::DoubleWellParams{0.5, 1.0, 15.0, 3,
                                                           dwn::Activation::QgammaProj}};
    dwn::DNIIParams model = dwn::build_dn2(cfg, 6);
    const std::string path = tmp_path("ck_dn2.dwn");
    dwn::save_checkpoint(model, path);
    dwn::LoadedModel loaded = dwn::load_checkpoint(path);
    ASSERT_TRUE(std::holds_alternative<dwn::DNIIParams>(loaded));
    auto& back = std::get<dwn::DNIIParams>(loaded);
    EXPECT_EQ(back.scheme.activation, dwn::Activation::QgammaProj);
    EXPECT_DOUBLE_EQ(back.scheme.tau, 0.5);
    auto mv = model.manifest(), lv = back.manifest();
    for (std::size_t t = 0; t < mv.size(); ++t)
        for (std::size_t e = 0; e < mv[t].size; ++e) ASSERT_EQ(mv[t].data[e], lv[t].data[e]);
}

TEST(Checkpoint, CorruptPayloadIsRejected) {
    dwn::DNIParams model = small_dn1();
    const std::string path = tmp_path("ck_corrupt.dwn");
    dwn::save_checkpoint(model, path);
    std::string bytes = read_bytes(path);
    bytes[bytes.size() - 5] ^= 0x01;
    write_bytes(path, bytes);
    EXPECT_THROW(dwn::load_checkpoint(path), dwn::io_error);
}

TEST(Checkpoint, RejectsBadMagicAndVersion) {
    const std::string path = tmp_path("ck_bad.dwn");
    write_bytes(path, "NOPE0123456789abcdef");
    EXPECT_THROW(dwn::load_checkpoint(path), dwn::io_error);

    dwn::DNIParams model = small_dn1();
    dwn::save_checkpoint(model, path);
    std::string bytes = read_bytes(path);
    bytes[4] = 9; // version field
    write_bytes(path, bytes);
    EXPECT_THROW(dwn::load_checkpoint(path), dwn::io_error);
}

TEST(Checkpoint, HeaderJsonIsStandaloneAndComplete) {
    dwn::DNIParams model = small_dn1();
    const std::string path = tmp_path("ck_header.dwn");
    dwn::save_checkpoint(model, path);
    const std::string bytes = read_bytes(path);
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    std::uint64_t header_len = 0;
    for (int b = 7; b >= 0; --b) header_len = (header_len << 8) | raw[8 + b];
    nlohmann::json header = nlohmann::json::parse(bytes.substr(16, header_len));

    auto views = model.manifest();
    ASSERT_EQ(header.at("tensors").size(), views.size());
    std::set<std::string> names;
    for (const auto& t : header.at("tensors")) names.insert(t.at("name").get<std::string>());
    EXPECT_EQ(names.size(), views.size()); // every tensor listed exactly once
    EXPECT_EQ(header.at("model"), "dn1");
}

TEST(MetricsCsv, HeaderOnlyAndSingleRecord) {
    const std::string path = tmp_path("metrics_empty.csv");
    dwn::write_metrics_csv({}, path);
    EXPECT_EQ(read_bytes(path), "epoch,mean_loss,accuracy_pct,dice,wall_seconds\n");

    const std::string one = tmp_path("metrics_one.csv");
    dwn::write_metrics_csv({{1, 0.5, 75.0, 0.8, 1.25}}, one);
    EXPECT_EQ(read_bytes(one),
              "epoch,mean_loss,accuracy_pct,dice,wall_seconds\n1,0.5,75,0.8,1.25\n");
}

TEST(MetricsCsv, ParseBackReproducesValues) {
    std::vector<dwn::MetricsRecord> records = {
        {1, 0.69314718, 51.5625, 0.423567891, 0.731},
        {2, 0.00012345678, 99.21875, 0.987654321, 1.462},
    };
    const std::string path = tmp_path("metrics_parse.csv");
    dwn::write_metrics_csv(records, path);

    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "epoch,mean_loss,accuracy_pct,dice,wall_seconds");
    for (const auto& r : records) {
        ASSERT_TRUE(static_cast<bool>(std::getline(in, line)));
        int epoch;
        double loss, acc, dc, wall;
        ASSERT_EQ(std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf", &epoch, &loss, &acc, &dc, &wall),
                  5);
        // 6 significant digits: half an ulp of the sixth digit is at most
        // 5e-6 relative when the leading digit is 1
        EXPECT_EQ(epoch, r.epoch);
        EXPECT_NEAR(loss, r.mean_loss, 5e-6 * std::abs(r.mean_loss) + 1e-15);
        EXPECT_NEAR(acc, r.accuracy_pct, 5e-6 * r.accuracy_pct);
        EXPECT_NEAR(dc, r.dice, 5e-6 * r.dice);
        EXPECT_NEAR(wall, r.wall_seconds, 5e-6 * r.wall_seconds);
    }
}
