#pragma once

#include "mdflow/io.hpp"
#include "mdflow/model.hpp"
#include "mdflow/rng.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

namespace mdflow {

// Versioned binary container. Layout:
//   magic "MDFLOWCK" | u32 version | u32 config_len | config text
//   | u64 step | 4 x u64 rng state
//   | u32 tensor count | per tensor: u32 name_len, name, u8 dtype,
//     u64 rows, u64 cols, payload (LE)
//   | u32 crc32 of everything after the magic
// Self-describing: loading needs no external config.

inline constexpr char kCkptMagic[8] = {'M', 'D', 'F', 'L', 'O', 'W', 'C', 'K'};
inline constexpr uint32_t kCkptVersion = 1;

template <typename T>
struct Checkpoint {
    ModelConfig config;
    uint64_t step = 0;
    std::array<uint64_t, 4> rng_state{};
    Params<T> params;
    Params<T> adam_m, adam_v;  // optional; empty (no tensors) when absent
    bool has_optimizer = false;
};

namespace detail {

template <typename T>
constexpr uint8_t dtype_tag() {
    return sizeof(T) == 4 ? 0 : 1;
}

template <typename T>
void append_tensor(std::string& buf, const std::string& name, const Mat<T>& m) {
    const uint32_t nl = uint32_t(name.size());
    buf.append(reinterpret_cast<const char*>(&nl), 4);
    buf.append(name);
    const uint8_t tag = dtype_tag<T>();
    buf.push_back(char(tag));
    const uint64_t rows = uint64_t(m.rows()), cols = uint64_t(m.cols());
    buf.append(reinterpret_cast<const char*>(&rows), 8);
    buf.append(reinterpret_cast<const char*>(&cols), 8);
    buf.append(reinterpret_cast<const char*>(m.data()), size_t(m.size()) * sizeof(T));
}

struct BufReader {
    const char* p;
    const char* end;
    void need(size_t n) const {
        if (size_t(end - p) < n) throw IoError("checkpoint: truncated tensor section");
    }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, p, 4);
        p += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v;
        std::memcpy(&v, p, 8);
        p += 8;
        return v;
    }
    uint8_t u8() {
        need(1);
        return uint8_t(*p++);
    }
    std::string str(size_t n) {
        need(n);
        std::string s(p, n);
        p += n;
        return s;
    }
};

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
    check_little_endian();
    std::string body;
    const uint32_t version = kCkptVersion;
    body.append(reinterpret_cast<const char*>(&version), 4);
    const std::string cfg = ck.config.to_text();
    const uint32_t cfg_len = uint32_t(cfg.size());
    body.append(reinterpret_cast<const char*>(&cfg_len), 4);
    body.append(cfg);
    body.append(reinterpret_cast<const char*>(&ck.step), 8);
    for (uint64_t w : ck.rng_state) body.append(reinterpret_cast<const char*>(&w), 8);

    auto& self = const_cast<Checkpoint<T>&>(ck);
    auto refs = tensor_refs(self.params);
    std::vector<std::pair<std::string, Mat<T>*>> named;
    for (auto& r : refs) named.emplace_back(r.name, r.mat);
    if (ck.has_optimizer) {
        for (auto& r : tensor_refs(self.adam_m)) named.emplace_back("opt.m." + r.name, r.mat);
        for (auto& r : tensor_refs(self.adam_v)) named.emplace_back("opt.v." + r.name, r.mat);
    }
    const uint32_t count = uint32_t(named.size());
    body.append(reinterpret_cast<const char*>(&count), 4);
    for (auto& [name, mat] : named) detail::append_tensor(body, name, *mat);

    const uint32_t crc = crc32_bytes(body.data(), body.size());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint: " + path);
    write_bytes(os, kCkptMagic, 8);
    write_bytes(os, body.data(), body.size());
    os.write(reinterpret_cast<const char*>(&crc), 4);
    os.flush();
    if (!os) throw IoError("short checkpoint write: " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    check_little_endian();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    std::string all((std::istreambuf_iterator<char>(is)), {});
    if (all.size() < 12 || std::memcmp(all.data(), kCkptMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + path);

    const std::string body = all.substr(8, all.size() - 12);
    uint32_t stored;
    std::memcpy(&stored, all.data() + all.size() - 4, 4);
    if (stored != crc32_bytes(body.data(), body.size()))
        throw IoError("checkpoint checksum mismatch: " + path);

    detail::BufReader r{body.data(), body.data() + body.size()};
    const uint32_t version = r.u32();
    if (version != kCkptVersion) throw IoError("unsupported checkpoint version");
    const uint32_t cfg_len = r.u32();
    const std::string cfg_text = r.str(cfg_len);

    Checkpoint<T> ck;
    ck.config = ModelConfig::from_text(cfg_text);
    ck.step = r.u64();
    for (auto& w : ck.rng_state) w = r.u64();

    ck.params = init_params<T>(ck.config, 0);
    ck.adam_m = zeros_like(ck.params);
    ck.adam_v = zeros_like(ck.params);

    std::map<std::string, Mat<T>*> dst;
    for (auto& t : tensor_refs(ck.params)) dst[t.name] = t.mat;
    for (auto& t : tensor_refs(ck.adam_m)) dst["opt.m." + t.name] = t.mat;
    for (auto& t : tensor_refs(ck.adam_v)) dst["opt.v." + t.name] = t.mat;

    const uint32_t count = r.u32();
    size_t params_seen = 0, opt_seen = 0;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t nl = r.u32();
        const std::string name = r.str(nl);
        const uint8_t tag = r.u8();
        if (tag != detail::dtype_tag<T>())
            throw IoError("checkpoint dtype does not match this build: " + name);
        const uint64_t rows = r.u64(), cols = r.u64();
        auto it = dst.find(name);
        if (it == dst.end()) throw IoError("unknown tensor in checkpoint: " + name);
        if (uint64_t(it->second->rows()) != rows || uint64_t(it->second->cols()) != cols)
            throw IoError("tensor shape mismatch in checkpoint: " + name);
        r.need(size_t(rows * cols) * sizeof(T));
        std::memcpy(it->second->data(), r.p, size_t(rows * cols) * sizeof(T));
        r.p += size_t(rows * cols) * sizeof(T);
        (name.rfind("opt.", 0) == 0 ? opt_seen : params_seen) += 1;
    }
    const size_t expected = tensor_refs(ck.params).size();
    if (params_seen != expected) throw IoError("checkpoint is missing parameter tensors");
    ck.has_optimizer = opt_seen > 0;
    return ck;
}

}  // namespace mdflow
