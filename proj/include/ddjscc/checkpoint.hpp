#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddjscc/codec.hpp"
#include "ddjscc/error.hpp"

namespace ddjscc {

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::int64_t epoch = 0;
    double snr_min = 0.0, snr_max = 0.0;  // training SNR range, dB
    double cr_min = 0.0, cr_max = 0.0;    // training CR range
    std::string mode = "dynamic";         // dynamic | fixed
    std::size_t fixed_n = 0;              // trained depth when mode == fixed
};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw ParseError("checkpoint: truncated stream");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

// Single-file archive: an 8-byte little-endian header length, a JSON header
// describing the architecture and training provenance, then raw little-endian
// 64-bit floats per parameter in header-declared order. Round-trips
// bit-exactly.
inline void save_checkpoint(const std::string& path, const DynamicCodec& codec,
                            const CheckpointMeta& meta) {
    const CodecSpec& s = codec.spec();
    nlohmann::json hdr;
    hdr["format"] = "ddjscc-checkpoint";
    hdr["version"] = 1;
    hdr["layers"] = s.layers;
    hdr["image"] = {{"channels", s.img_channels}, {"height", s.img_h}, {"width", s.img_w}};
    hdr["width1"] = s.width1;
    hdr["width2"] = s.width2;
    hdr["r_max"] = s.r_max;
    hdr["snr_cond"] = {s.snr_cond_min, s.snr_cond_max};
    hdr["train"] = {{"seed", meta.seed},
                    {"epoch", meta.epoch},
                    {"snr_range", {meta.snr_min, meta.snr_max}},
                    {"cr_range", {meta.cr_min, meta.cr_max}},
                    {"mode", meta.mode},
                    {"fixed_n", meta.fixed_n}};
    nlohmann::json plist = nlohmann::json::array();
    const ParamStore& ps = codec.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& e = ps.entry(static_cast<int>(i));
        plist.push_back({{"name", e.name}, {"shape", e.value.shape()}});
    }
    hdr["params"] = plist;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    const std::string htext = hdr.dump();
    detail::put_u64(os, htext.size());
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const Tensor& t = ps.entry(static_cast<int>(i)).value;
        for (std::size_t j = 0; j < t.size(); ++j) {
            detail::put_u64(os, std::bit_cast<std::uint64_t>(t[j]));
        }
    }
    if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

struct Checkpoint {
    CodecSpec spec;
    CheckpointMeta meta;
    ParamStore params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
    is.seekg(0, std::ios::end);
    const std::uint64_t file_size = static_cast<std::uint64_t>(is.tellg());
    is.seekg(0, std::ios::beg);
    const std::uint64_t hlen = detail::get_u64(is);
    if (hlen + 8 > file_size) {
        throw ParseError("checkpoint: '" + path + "' is not a ddjscc checkpoint");
    }
    std::string htext(hlen, '\0');
    is.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw ParseError("checkpoint: truncated header in '" + path + "'");
    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(htext);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint: bad header in '" + path + "': " + e.what());
    }
    if (hdr.value("format", "") != "ddjscc-checkpoint") {
        throw ParseError("checkpoint: '" + path + "' is not a ddjscc checkpoint");
    }

    Checkpoint out;
    CodecSpec& s = out.spec;
    s.layers = hdr.at("layers").get<std::size_t>();
    s.img_channels = hdr.at("image").at("channels").get<std::size_t>();
    s.img_h = hdr.at("image").at("height").get<std::size_t>();
    s.img_w = hdr.at("image").at("width").get<std::size_t>();
    s.width1 = hdr.at("width1").get<std::size_t>();
    s.width2 = hdr.at("width2").get<std::size_t>();
    s.r_max = hdr.at("r_max").get<double>();
    s.snr_cond_min = hdr.at("snr_cond").at(0).get<double>();
    s.snr_cond_max = hdr.at("snr_cond").at(1).get<double>();
    const auto& tr = hdr.at("train");
    out.meta.seed = tr.at("seed").get<std::uint64_t>();
    out.meta.epoch = tr.at("epoch").get<std::int64_t>();
    out.meta.snr_min = tr.at("snr_range").at(0).get<double>();
    out.meta.snr_max = tr.at("snr_range").at(1).get<double>();
    out.meta.cr_min = tr.at("cr_range").at(0).get<double>();
    out.meta.cr_max = tr.at("cr_range").at(1).get<double>();
    out.meta.mode = tr.value("mode", "dynamic");
    out.meta.fixed_n = tr.value("fixed_n", std::size_t{0});

    for (const auto& p : hdr.at("params")) {
        std::vector<std::size_t> shape = p.at("shape").get<std::vector<std::size_t>>();
        Tensor t(shape);
        for (std::size_t j = 0; j < t.size(); ++j) {
            t[j] = std::bit_cast<double>(detail::get_u64(is));
        }
        out.params.add(p.at("name").get<std::string>(), std::move(t));
    }
    return out;
}

inline DynamicCodec load_codec(const std::string& path, CheckpointMeta* meta = nullptr) {
    Checkpoint ck = load_checkpoint(path);
    if (meta) *meta = ck.meta;
    return DynamicCodec(ck.spec, std::move(ck.params));
}

}  // namespace ddjscc
