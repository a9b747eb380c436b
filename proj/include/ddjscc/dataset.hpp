#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ddjscc/error.hpp"
#include "ddjscc/rng.hpp"
#include "ddjscc/tensor.hpp"

namespace ddjscc {

// Images as [C,H,W] tensors with values in [0,1]. Source images must be at
// least 32x32; patching may produce smaller crops.
struct ImageSet {
    std::vector<Tensor> images;
    std::string split;        // train / test / ...
    std::string provenance;   // directory path or generator seed

    std::size_t size() const { return images.size(); }
};

namespace detail {

inline void check_source_image(const Tensor& t, const std::string& what) {
    if (t.ndim() != 3) throw DimensionError(what + ": image must be [C,H,W]");
    if (t.dim(1) < 32 || t.dim(2) < 32) {
        throw UsageError(what + ": source images must be at least 32x32, got " + t.shape_str());
    }
}

// glob-lite: '*' matches any run, '?' one char
inline bool glob_match(const std::string& pat, const std::string& s, std::size_t pi = 0,
                       std::size_t si = 0) {
    while (pi < pat.size() && pat[pi] != '*') {
        if (si >= s.size() || (pat[pi] != '?' && pat[pi] != s[si])) return false;
        ++pi;
        ++si;
    }
    if (pi == pat.size()) return si == s.size();
    for (std::size_t k = si; k <= s.size(); ++k) {
        if (glob_match(pat, s, pi + 1, k)) return true;
    }
    return false;
}

inline int next_pnm_token(std::istream& is, const std::string& file, std::string& tok) {
    tok.clear();
    int c;
    while ((c = is.get()) != EOF) {
        if (c == '#') {
            while ((c = is.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (!std::isspace(c)) break;
    }
    if (c == EOF) throw ParseError(file + ": truncated PNM header");
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = is.get();
    }
    return c;  // the whitespace byte that ended the token (or EOF)
}

inline std::size_t parse_pnm_number(const std::string& tok, const std::string& file,
                                    const char* what) {
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
        throw ParseError(file + ": bad " + what + " '" + tok + "' in PNM header");
    }
    return static_cast<std::size_t>(std::stoull(tok));
}

}  // namespace detail

// Binary PPM (P6, RGB) or PGM (P5, grayscale), maxval 255 only. Bytes map to
// [0,1] via v/255.
inline Tensor load_pnm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string tok;
    detail::next_pnm_token(is, path, tok);
    std::size_t channels;
    if (tok == "P6") {
        channels = 3;
    } else if (tok == "P5") {
        channels = 1;
    } else {
        throw ParseError(path + ": unsupported PNM magic '" + tok + "' (want P5 or P6)");
    }
    detail::next_pnm_token(is, path, tok);
    const std::size_t w = detail::parse_pnm_number(tok, path, "width");
    detail::next_pnm_token(is, path, tok);
    const std::size_t h = detail::parse_pnm_number(tok, path, "height");
    detail::next_pnm_token(is, path, tok);
    const std::size_t maxval = detail::parse_pnm_number(tok, path, "maxval");
    if (maxval != 255) throw ParseError(path + ": maxval must be 255, got " + tok);
    if (w == 0 || h == 0) throw ParseError(path + ": zero image dimension");

    std::vector<unsigned char> buf(w * h * channels);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(is.gcount()) != buf.size()) {
        throw ParseError(path + ": truncated pixel data");
    }
    Tensor t({channels, h, w});
    // interleaved bytes -> channel-first planes
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < channels; ++c) {
                t[(c * h + y) * w + x] = buf[(y * w + x) * channels + c] / 255.0;
            }
        }
    }
    return t;
}

inline void save_pnm(const std::string& path, const Tensor& img) {
    if (img.ndim() != 3 || (img.dim(0) != 1 && img.dim(0) != 3)) {
        throw DimensionError("save_pnm: image must be [1,H,W] or [3,H,W]");
    }
    const std::size_t c_n = img.dim(0), h = img.dim(1), w = img.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << (c_n == 3 ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> buf(w * h * c_n);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < c_n; ++c) {
                double v = img[(c * h + y) * w + x];
                v = std::min(1.0, std::max(0.0, v));
                buf[(y * w + x) * c_n + c] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
        }
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw IoError("write failed for '" + path + "'");
}

// Loads every matching PNM in lexicographic filename order.
inline ImageSet load_image_dir(const std::string& dir, const std::string& pattern = "*") {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw UsageError("load_image_dir: '" + dir + "' is not a directory");
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        if (detail::glob_match(pattern, name)) names.push_back(name);
    }
    if (names.empty()) {
        throw UsageError("load_image_dir: no file in '" + dir + "' matches '" + pattern + "'");
    }
    std::sort(names.begin(), names.end());
    ImageSet set;
    set.provenance = dir;
    std::size_t channels = 0;
    for (const std::string& name : names) {
        Tensor img = load_pnm((fs::path(dir) / name).string());
        detail::check_source_image(img, name);
        if (channels == 0) channels = img.dim(0);
        if (img.dim(0) != channels) {
            throw UsageError("load_image_dir: mixed channel counts (" + name + ")");
        }
        set.images.push_back(std::move(img));
    }
    return set;
}

// All aligned size x size crops at the given stride, row-major per image.
inline ImageSet extract_patches(const ImageSet& set, std::size_t size, std::size_t stride) {
    if (size < 1 || stride < 1) throw UsageError("extract_patches: size/stride must be >= 1");
    ImageSet out;
    out.split = set.split;
    out.provenance = set.provenance;
    for (const Tensor& img : set.images) {
        const std::size_t c_n = img.dim(0), h = img.dim(1), w = img.dim(2);
        if (size > h || size > w) {
            throw UsageError("extract_patches: patch size " + std::to_string(size) +
                             " exceeds image " + img.shape_str());
        }
        for (std::size_t y = 0; y + size <= h; y += stride) {
            for (std::size_t x = 0; x + size <= w; x += stride) {
                Tensor p({c_n, size, size});
                for (std::size_t c = 0; c < c_n; ++c) {
                    for (std::size_t py = 0; py < size; ++py) {
                        for (std::size_t px = 0; px < size; ++px) {
                            p[(c * size + py) * size + px] = img[(c * h + y + py) * w + x + px];
                        }
                    }
                }
                out.images.push_back(std::move(p));
            }
        }
    }
    return out;
}

namespace detail {

inline void add_gradient(Tensor& img, Rng& rng) {
    const std::size_t h = img.dim(1), w = img.dim(2);
    const double th = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double cx = std::cos(th), sx = std::sin(th);
    double c0[3], c1[3];
    for (int c = 0; c < 3; ++c) {
        c0[c] = rng.uniform(0.0, 1.0);
        c1[c] = rng.uniform(0.0, 1.0);
    }
    const double diag = std::sqrt(static_cast<double>(h * h + w * w));
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double t = 0.5 + (cx * (static_cast<double>(x) - w / 2.0) +
                                    sx * (static_cast<double>(y) - h / 2.0)) /
                                       diag;
            for (std::size_t c = 0; c < 3; ++c) {
                img[(c * h + y) * w + x] = c0[c] + (c1[c] - c0[c]) * t;
            }
        }
    }
}

inline void add_grating(Tensor& img, Rng& rng) {
    const std::size_t h = img.dim(1), w = img.dim(2);
    const double kPi = 3.14159265358979323846;
    const double th = rng.uniform(0.0, kPi);
    const double freq = rng.uniform(1.0, 5.0) * 2.0 * kPi / static_cast<double>(w);
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    const double cx = std::cos(th), sx = std::sin(th);
    double amp[3];
    for (int c = 0; c < 3; ++c) amp[c] = rng.uniform(0.05, 0.25);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double s = std::sin(freq * (cx * x + sx * y) + phase);
            for (std::size_t c = 0; c < 3; ++c) img[(c * h + y) * w + x] += amp[c] * s;
        }
    }
}

inline void add_triangle(Tensor& img, Rng& rng) {
    const std::size_t h = img.dim(1), w = img.dim(2);
    double vx[3], vy[3], col[3];
    for (int i = 0; i < 3; ++i) {
        vx[i] = rng.uniform(0.0, static_cast<double>(w));
        vy[i] = rng.uniform(0.0, static_cast<double>(h));
        col[i] = rng.uniform(0.0, 1.0);
    }
    const double alpha = rng.uniform(0.5, 1.0);
    auto edge = [](double ax, double ay, double bx, double by, double px, double py) {
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    };
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const double e0 = edge(vx[0], vy[0], vx[1], vy[1], px, py);
            const double e1 = edge(vx[1], vy[1], vx[2], vy[2], px, py);
            const double e2 = edge(vx[2], vy[2], vx[0], vy[0], px, py);
            const bool inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
            if (!inside) continue;
            for (std::size_t c = 0; c < 3; ++c) {
                double& p = img[(c * h + y) * w + x];
                p = (1.0 - alpha) * p + alpha * col[c];
            }
        }
    }
}

}  // namespace detail

// Deterministic procedural RGB corpus: smooth gradient base, a couple of
// oriented sinusoidal gratings, and one to three filled triangles. Image i
// depends only on (seed, i).
inline ImageSet synth_dataset(std::size_t count, std::size_t size, std::uint64_t seed) {
    if (count < 1) throw UsageError("synth_dataset: count must be >= 1");
    if (size < 32) throw UsageError("synth_dataset: size must be >= 32");
    ImageSet set;
    set.provenance = "synth(seed=" + std::to_string(seed) + ")";
    set.images.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, i));
        Tensor img({3, size, size});
        detail::add_gradient(img, rng);
        const int gratings = static_cast<int>(rng.uniform_int(1, 2));
        for (int g = 0; g < gratings; ++g) detail::add_grating(img, rng);
        const int tris = static_cast<int>(rng.uniform_int(1, 3));
        for (int t = 0; t < tris; ++t) detail::add_triangle(img, rng);
        for (std::size_t j = 0; j < img.size(); ++j) {
            img[j] = std::min(1.0, std::max(0.0, img[j]));
        }
        set.images.push_back(std::move(img));
    }
    return set;
}

// Shuffled, stacked mini-batches; the permutation depends only on
// (seed, epoch) and the final partial batch is dropped.
inline std::vector<Tensor> batch_iter(const ImageSet& set, std::size_t batch_size,
                                      std::uint64_t seed, std::uint64_t epoch) {
    if (batch_size < 1) throw UsageError("batch_iter: batch_size must be >= 1");
    if (batch_size > set.size()) {
        throw UsageError("batch_iter: batch_size " + std::to_string(batch_size) +
                         " exceeds dataset size " + std::to_string(set.size()));
    }
    std::vector<std::size_t> order(set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(derive_seed(seed, 0xba7c4), epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }
    const std::size_t nbatches = set.size() / batch_size;
    std::vector<Tensor> batches;
    batches.reserve(nbatches);
    const Tensor& first = set.images.front();
    const std::size_t c_n = first.dim(0), h = first.dim(1), w = first.dim(2);
    const std::size_t img_len = c_n * h * w;
    for (std::size_t b = 0; b < nbatches; ++b) {
        Tensor batch({batch_size, c_n, h, w});
        for (std::size_t e = 0; e < batch_size; ++e) {
            const Tensor& img = set.images[order[b * batch_size + e]];
            if (img.dim(0) != c_n || img.dim(1) != h || img.dim(2) != w) {
                throw DimensionError("batch_iter: ragged image shapes in set");
            }
            for (std::size_t j = 0; j < img_len; ++j) batch[e * img_len + j] = img[j];
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace ddjscc
