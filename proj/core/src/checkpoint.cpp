#include "cpl/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "cpl/error.hpp"

namespace cpl {

namespace fs = std::filesystem;

uint64_t fnv1a(const void* data, size_t n, uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

constexpr char kMagic[8] = {'C', 'P', 'L', 'B', 'C', '1', '\0', '\0'};

void put_u16(std::string& buf, uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const unsigned char* p;
    size_t n;
    size_t pos = 0;
    std::string file;

    void need(size_t k, const char* what) {
        if (pos + k > n) fail("checkpoint: truncated file (" + std::string(what) + ") in " + file);
    }
    uint16_t u16() {
        need(2, "u16");
        uint16_t v = static_cast<uint16_t>(p[pos]) | (static_cast<uint16_t>(p[pos + 1]) << 8);
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4, "u32");
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8, "u64");
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(size_t k) {
        need(k, "string");
        std::string s(reinterpret_cast<const char*>(p + pos), k);
        pos += k;
        return s;
    }
};

std::vector<float> text_to_floats(const std::string& s) {
    std::vector<float> out;
    out.reserve(s.size());
    for (unsigned char c : s) out.push_back(static_cast<float>(c));
    return out;
}

std::string floats_to_text(const std::vector<float>& v) {
    std::string s;
    for (float f : v) s.push_back(static_cast<char>(static_cast<int>(f)));
    return s;
}

} // namespace

void save_tensors(const fs::path& path, const std::vector<NamedTensor>& tensors) {
    std::string payload;
    for (const NamedTensor& t : tensors) {
        require(t.name.size() < 65536, "checkpoint: tensor name too long");
        require(t.shape.size() < 256, "checkpoint: too many dimensions");
        require(shape_numel(t.shape) == static_cast<int64_t>(t.data.size()),
                "checkpoint: tensor '" + t.name + "' shape/data mismatch");
        put_u16(payload, static_cast<uint16_t>(t.name.size()));
        payload += t.name;
        payload.push_back(static_cast<char>(t.shape.size()));
        for (int d : t.shape) put_u32(payload, static_cast<uint32_t>(d));
        static_assert(sizeof(float) == 4);
        size_t off = payload.size();
        payload.resize(off + t.data.size() * 4);
        std::memcpy(payload.data() + off, t.data.data(), t.data.size() * 4);
    }

    std::string out;
    out.append(kMagic, 8);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<uint32_t>(tensors.size()));
    out += payload;
    put_u64(out, fnv1a(payload.data(), payload.size()));

    std::ofstream os(path, std::ios::binary);
    require(bool(os), "checkpoint: cannot write " + path.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    require(bool(os), "checkpoint: short write to " + path.string());
}

std::vector<NamedTensor> load_tensors(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(bool(is), "checkpoint: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

    Reader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), 0, path.string()};
    r.need(8, "magic");
    require(std::memcmp(bytes.data(), kMagic, 8) == 0, "checkpoint: bad magic in " + path.string());
    r.pos = 8;
    uint32_t version = r.u32();
    require(version == kCheckpointVersion,
            "checkpoint: unsupported version " + std::to_string(version) + " in " + path.string());
    uint32_t count = r.u32();
    require(bytes.size() >= 24, "checkpoint: truncated file (no checksum) in " + path.string());

    size_t payload_begin = r.pos;
    size_t payload_end = bytes.size() - 8;
    Reader tail{r.p, bytes.size(), payload_end, path.string()};
    uint64_t stored = tail.u64();
    uint64_t actual = fnv1a(bytes.data() + payload_begin, payload_end - payload_begin);
    require(stored == actual, "checkpoint: payload checksum mismatch in " + path.string());

    std::vector<NamedTensor> out;
    for (uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        uint16_t name_len = r.u16();
        t.name = r.str(name_len);
        r.need(1, "ndim");
        uint8_t ndim = r.p[r.pos++];
        int64_t numel = 1;
        for (int d = 0; d < ndim; ++d) {
            uint32_t dim = r.u32();
            require(dim > 0 && dim < (1u << 28), "checkpoint: implausible dimension");
            t.shape.push_back(static_cast<int>(dim));
            numel *= dim;
        }
        r.need(static_cast<size_t>(numel) * 4, "tensor payload");
        t.data.resize(static_cast<size_t>(numel));
        std::memcpy(t.data.data(), r.p + r.pos, static_cast<size_t>(numel) * 4);
        r.pos += static_cast<size_t>(numel) * 4;
        out.push_back(std::move(t));
    }
    require(r.pos == payload_end, "checkpoint: trailing bytes in " + path.string());
    return out;
}

void save_checkpoint(const fs::path& path, const DetectorWeights& weights, const AdamState& opt,
                     const CheckpointMeta& meta) {
    std::vector<NamedTensor> ts;
    auto named = weights.named();
    for (const auto& [name, tensor] : named)
        ts.push_back({name, tensor.shape(),
                      std::vector<float>(tensor.data(), tensor.data() + tensor.numel())});
    if (!opt.m.empty()) {
        require(opt.m.size() == named.size(), "checkpoint: optimizer state size mismatch");
        for (size_t i = 0; i < named.size(); ++i) {
            ts.push_back({"adam.m." + named[i].first, named[i].second.shape(), opt.m[i]});
            ts.push_back({"adam.v." + named[i].first, named[i].second.shape(), opt.v[i]});
        }
        ts.push_back({"adam.step", {1}, {static_cast<float>(opt.step)}});
    }
    ts.push_back({"meta.epoch", {1}, {static_cast<float>(meta.epoch)}});
    if (!meta.strategy.empty())
        ts.push_back({"meta.strategy", {static_cast<int>(meta.strategy.size())},
                      text_to_floats(meta.strategy)});
    save_tensors(path, ts);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
    std::vector<NamedTensor> ts = load_tensors(path);
    std::map<std::string, NamedTensor*> by_name;
    for (NamedTensor& t : ts) by_name[t.name] = &t;

    require(by_name.count("conv1.weight"), "checkpoint: missing conv1.weight in " + path.string());
    int in_channels = by_name["conv1.weight"]->shape.at(1);

    LoadedCheckpoint out;
    out.weights = DetectorWeights::init(in_channels, 0);
    auto named = out.weights.named();
    auto params = out.weights.params();
    for (size_t i = 0; i < named.size(); ++i) {
        auto it = by_name.find(named[i].first);
        require(it != by_name.end(),
                "checkpoint: missing tensor '" + named[i].first + "' in " + path.string());
        require(it->second->shape == params[i]->shape(),
                "checkpoint: shape mismatch for '" + named[i].first + "': file has " +
                    shape_str(it->second->shape) + ", architecture expects " +
                    shape_str(params[i]->shape()));
        std::copy(it->second->data.begin(), it->second->data.end(), params[i]->data());
    }

    if (by_name.count("adam.step")) {
        out.opt.step = static_cast<int64_t>(by_name["adam.step"]->data.at(0));
        for (size_t i = 0; i < named.size(); ++i) {
            auto m = by_name.find("adam.m." + named[i].first);
            auto v = by_name.find("adam.v." + named[i].first);
            require(m != by_name.end() && v != by_name.end(),
                    "checkpoint: incomplete optimizer state in " + path.string());
            out.opt.m.push_back(m->second->data);
            out.opt.v.push_back(v->second->data);
        }
    }
    if (by_name.count("meta.epoch"))
        out.meta.epoch = static_cast<int>(by_name["meta.epoch"]->data.at(0));
    if (by_name.count("meta.strategy"))
        out.meta.strategy = floats_to_text(by_name["meta.strategy"]->data);
    return out;
}

} // namespace cpl
