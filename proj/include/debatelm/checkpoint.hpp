#pragma once

// Self-describing checkpoint container:
//   8-byte magic "DLMCKPT1" | u64 LE header length | JSON header | f64 LE payload
// The header records the encoder config, the vocabulary hash, the step count, and per
// tensor name/shape/decay/offset; optimizer moments follow the parameters in the payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "debatelm/encoder.hpp"
#include "debatelm/error.hpp"
#include "debatelm/hash.hpp"
#include "debatelm/optim.hpp"

namespace debatelm {

inline constexpr char kCheckpointMagic[8] = {'D', 'L', 'M', 'C', 'K', 'P', 'T', '1'};

template <class T>
struct Checkpoint {
    EncoderParams<T> params;
    std::optional<OptimizerState<T>> optimizer;
    std::uint64_t step = 0;
    std::string vocab_hash;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t pos) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    return v;
}

inline void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }
inline double get_f64(const std::string& in, std::size_t pos) { return std::bit_cast<double>(get_u64(in, pos)); }

}  // namespace detail

template <class T>
std::string serialize_checkpoint(const Checkpoint<T>& ck) {
    nlohmann::json header;
    header["format"] = "debatelm-checkpoint";
    header["version"] = 1;
    header["config"] = ck.params.config;
    header["vocab_hash"] = ck.vocab_hash;
    header["step"] = ck.step;
    std::string payload;
    std::uint64_t offset = 0;
    auto append = [&](const std::vector<T>& v) {
        const std::uint64_t at = offset;
        for (T x : v) detail::put_f64(payload, static_cast<double>(x));
        offset += v.size();
        return at;
    };
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : ck.params.tensors)
        tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"decay", t.decay}, {"offset", append(t.value)}});
    header["tensors"] = tensors;
    if (ck.optimizer) {
        const auto& o = *ck.optimizer;
        nlohmann::json opt = {{"t", o.t},
                              {"beta1", o.adam.beta1},
                              {"beta2", o.adam.beta2},
                              {"eps", o.adam.eps},
                              {"weight_decay", o.adam.weight_decay},
                              {"peak_lr", o.schedule.peak_lr},
                              {"warmup_steps", o.schedule.warmup_steps},
                              {"total_steps", o.schedule.total_steps}};
        nlohmann::json m = nlohmann::json::array(), v = nlohmann::json::array();
        for (const auto& x : o.m) m.push_back(append(x));
        for (const auto& x : o.v) v.push_back(append(x));
        opt["m_offsets"] = m;
        opt["v_offsets"] = v;
        header["optimizer"] = opt;
    } else {
        header["optimizer"] = nullptr;
    }
    const std::string h = header.dump();
    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_u64(out, h.size());
    out += h;
    out += payload;
    return out;
}

template <class T>
Checkpoint<T> deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw DataError("not a debatelm checkpoint");
    const std::uint64_t hlen = detail::get_u64(bytes, 8);
    if (16 + hlen > bytes.size()) throw DataError("truncated checkpoint header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("corrupt checkpoint header: ") + e.what());
    }
    const std::size_t base = 16 + hlen;
    const std::size_t payload_count = (bytes.size() - base) / 8;
    auto read = [&](std::uint64_t offset, std::size_t n) {
        if (offset + n > payload_count) throw DataError("truncated checkpoint payload");
        std::vector<T> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<T>(detail::get_f64(bytes, base + 8 * (offset + i)));
        return v;
    };
    Checkpoint<T> ck;
    const auto config = header.at("config").get<EncoderConfig>();
    std::vector<Tensor<T>> tensors;
    for (const auto& tj : header.at("tensors")) {
        Tensor<T> t;
        t.name = tj.at("name").get<std::string>();
        t.shape = tj.at("shape").get<std::vector<std::size_t>>();
        t.decay = tj.at("decay").get<bool>();
        std::size_t n = 1;
        for (auto s : t.shape) n *= s;
        t.value = read(tj.at("offset").get<std::uint64_t>(), n);
        tensors.push_back(std::move(t));
    }
    ck.params = EncoderParams<T>::from_tensors(config, std::move(tensors));
    ck.step = header.at("step").get<std::uint64_t>();
    ck.vocab_hash = header.at("vocab_hash").get<std::string>();
    if (!header.at("optimizer").is_null()) {
        const auto& oj = header.at("optimizer");
        OptimizerState<T> o;
        o.t = oj.at("t").get<std::uint64_t>();
        o.adam = {oj.at("beta1").get<double>(), oj.at("beta2").get<double>(), oj.at("eps").get<double>(),
                  oj.at("weight_decay").get<double>()};
        o.schedule = {oj.at("peak_lr").get<double>(), oj.at("warmup_steps").get<std::size_t>(),
                      oj.at("total_steps").get<std::size_t>()};
        const auto mo = oj.at("m_offsets").get<std::vector<std::uint64_t>>();
        const auto vo = oj.at("v_offsets").get<std::vector<std::uint64_t>>();
        if (mo.size() != ck.params.tensors.size() || vo.size() != ck.params.tensors.size())
            throw DataError("optimizer state does not match tensors");
        for (std::size_t i = 0; i < mo.size(); ++i) {
            o.m.push_back(read(mo[i], ck.params.tensors[i].size()));
            o.v.push_back(read(vo[i], ck.params.tensors[i].size()));
        }
        ck.optimizer = std::move(o);
    }
    return ck;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ck) {
    write_file_atomic(path, serialize_checkpoint(ck));
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint<T>(read_file(path));
}

}  // namespace debatelm
