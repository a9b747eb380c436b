#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "ddjscc/dataset.hpp"

using namespace ddjscc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("ddjscc_ds_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("load_pnm: P6 3x2 of 255 bytes maps to a ones tensor of shape [3,2,3]") {
    TempDir d;
    std::string data = "P6\n3 2\n255\n";
    data.append(18, static_cast<char>(0xFF));
    write_file(d.path / "white.ppm", data);
    Tensor t = load_pnm((d.path / "white.ppm").string());
    CHECK(t.shape() == std::vector<std::size_t>{3, 2, 3});
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == 1.0);
}

TEST_CASE("load_pnm: P5 loads grayscale with one channel; 128 -> 128/255") {
    TempDir d;
    std::string data = "P5\n2 2\n255\n";
    data.push_back(static_cast<char>(128));
    data.append(3, static_cast<char>(0));
    write_file(d.path / "g.pgm", data);
    Tensor t = load_pnm((d.path / "g.pgm").string());
    CHECK(t.shape() == std::vector<std::size_t>{1, 2, 2});
    CHECK(t[0] == doctest::Approx(128.0 / 255.0).epsilon(1e-12));
    CHECK(t[1] == 0.0);
}

TEST_CASE("load_pnm: comments in headers are skipped") {
    TempDir d;
    std::string data = "P5\n# a comment line\n2 1\n# another\n255\n";
    data.append(2, static_cast<char>(10));
    write_file(d.path / "c.pgm", data);
    Tensor t = load_pnm((d.path / "c.pgm").string());
    CHECK(t.shape() == std::vector<std::size_t>{1, 1, 2});
}

TEST_CASE("load_pnm: malformed inputs raise parse errors naming the file") {
    TempDir d;
    write_file(d.path / "bad_magic.ppm", "P3\n1 1\n255\n   ");
    write_file(d.path / "bad_maxval.ppm", "P6\n1 1\n65535\n......");
    write_file(d.path / "truncated.ppm", "P6\n4 4\n255\nxx");
    write_file(d.path / "garbage.ppm", "P6\nabc 2\n255\n...");
    for (const char* name : {"bad_magic.ppm", "bad_maxval.ppm", "truncated.ppm", "garbage.ppm"}) {
        try {
            load_pnm((d.path / name).string());
            FAIL_CHECK("expected ParseError for ", name);
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find(name) != std::string::npos);
        }
    }
}

TEST_CASE("save_pnm / load_image_dir round trip in lexicographic order") {
    TempDir d;
    ImageSet synth = synth_dataset(3, 32, 404);
    save_pnm((d.path / "b.ppm").string(), synth.images[1]);
    save_pnm((d.path / "a.ppm").string(), synth.images[0]);
    save_pnm((d.path / "c.ppm").string(), synth.images[2]);
    ImageSet loaded = load_image_dir(d.path.string(), "*.ppm");
    REQUIRE(loaded.size() == 3);
    // 8-bit quantization: round-trip error at most 1/(2*255)
    for (int i = 0; i < 3; ++i) {
        CHECK(loaded.images[i].shape() == synth.images[i].shape());
        CHECK(max_abs_diff(loaded.images[i], synth.images[i]) <= 0.5 / 255.0 + 1e-12);
    }
    CHECK_THROWS_AS(load_image_dir(d.path.string(), "*.png"), UsageError);
    CHECK_THROWS_AS(load_image_dir((d.path / "missing").string(), "*"), UsageError);
}

TEST_CASE("extract_patches: counts follow the closed-form formula") {
    ImageSet set;
    set.images.push_back(Tensor::full({3, 64, 64}, 0.5));
    ImageSet p1 = extract_patches(set, 32, 32);
    CHECK(p1.size() == 4);

    // non-overlapping tiling partitions the pixels exactly once
    ImageSet src;
    Tensor img({1, 64, 64});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i) / img.size();
    src.images.push_back(img);
    ImageSet tiles = extract_patches(src, 32, 32);
    double sum_tiles = 0.0, sum_src = 0.0;
    for (const auto& t : tiles.images)
        for (std::size_t i = 0; i < t.size(); ++i) sum_tiles += t[i];
    for (std::size_t i = 0; i < img.size(); ++i) sum_src += img[i];
    CHECK(sum_tiles == doctest::Approx(sum_src).epsilon(1e-12));

    ImageSet odd;
    odd.images.push_back(Tensor::full({1, 33, 33}, 0.1));
    CHECK(extract_patches(odd, 32, 1).size() == 4);
    CHECK_THROWS_AS(extract_patches(odd, 64, 1), UsageError);
}

TEST_CASE("synth_dataset: deterministic, seed-sensitive, range-preserving") {
    ImageSet a = synth_dataset(4, 32, 11);
    ImageSet b = synth_dataset(4, 32, 11);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.images[i] == b.images[i]);

    ImageSet c = synth_dataset(4, 32, 12);
    CHECK(max_abs_diff(a.images[0], c.images[0]) > 0.0);

    for (const auto& img : a.images) {
        for (std::size_t i = 0; i < img.size(); ++i) {
            CHECK(img[i] >= 0.0);
            CHECK(img[i] <= 1.0);
        }
    }
    // image i depends only on (seed, i), not on count
    ImageSet prefix = synth_dataset(2, 32, 11);
    CHECK(prefix.images[1] == a.images[1]);

    CHECK_THROWS_AS(synth_dataset(0, 32, 1), UsageError);
    CHECK_THROWS_AS(synth_dataset(1, 16, 1), UsageError);
}

TEST_CASE("batch_iter: drop-last arithmetic and determinism") {
    ImageSet set = synth_dataset(10, 32, 31);
    set.split = "train";
    CHECK(batch_iter(set, 5, 1, 0).size() == 2);
    CHECK(batch_iter(set, 4, 1, 0).size() == 2);  // 2 samples dropped
    CHECK_THROWS_AS(batch_iter(set, 11, 1, 0), UsageError);

    auto b1 = batch_iter(set, 4, 7, 3);
    auto b2 = batch_iter(set, 4, 7, 3);
    REQUIRE(b1.size() == b2.size());
    for (std::size_t i = 0; i < b1.size(); ++i) CHECK(b1[i] == b2[i]);

    auto b3 = batch_iter(set, 4, 7, 4);  // different epoch shuffles differently
    bool any_diff = false;
    for (std::size_t i = 0; i < b1.size() && !any_diff; ++i) {
        any_diff = !(b1[i] == b3[i]);
    }
    CHECK(any_diff);

    CHECK(b1[0].shape() == std::vector<std::size_t>{4, 3, 32, 32});
}
