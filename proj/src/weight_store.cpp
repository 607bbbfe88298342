// SPDX-License-Identifier: Apache-2.0

#include "broadnas/weight_store.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "broadnas/bytes.hpp"

namespace broadnas {

namespace {

constexpr char kMagic[8] = {'B', 'N', 'A', 'S', 'C', 'K', 'P', 'T'};

std::string_view position_name(PositionClass p) {
    switch (p) {
        case PositionClass::NormalStride: return "normal";
        case PositionClass::ReduceStride: return "reduce";
        case PositionClass::Enhancement: return "enh";
    }
    return "?";
}

std::string_view double_bytes(std::span<const double> values) {
    return {reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double)};
}

}  // namespace

std::string CellSite::location() const {
    if (role == CellRole::Enh) return "e" + std::to_string(block);
    return "b" + std::to_string(block) + ".c" + std::to_string(index) + "." + std::string(position_name(position));
}

std::string OpEdgeKey::prefix() const {
    std::ostringstream os;
    os << (site.role == CellRole::Conv ? "conv" : "enh") << '/' << site.location() << "/n" << node << '.' << slot
       << "/s" << source << '/' << op_name(op);
    return os.str();
}

std::string OpEdgeKey::key(std::string_view part) const { return prefix() + "/" + std::string(part); }

Tensor WeightStore::initial_value(std::uint64_t seed, const std::string& key, const Shape& shape,
                                  const InitSpec& init) {
    Tensor t(shape);
    switch (init.kind) {
        case InitKind::Zeros: break;
        case InitKind::Ones:
            for (double& v : t.data_mut()) v = 1.0;
            break;
        case InitKind::KaimingNormal: {
            std::mt19937_64 rng(splitmix64(seed ^ fnv1a(key)));
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(init.fan_in, 1))));
            for (double& v : t.data_mut()) v = dist(rng);
            break;
        }
    }
    return t;
}

Tensor WeightStore::get_or_init(const std::string& key, const Shape& shape, const InitSpec& init) {
    auto it = entries_.find(key);
    if (it != entries_.end()) {
        if (it->second.value.shape() != shape) {
            throw Error("weight key '" + key + "' is bound with shape " + shape_str(it->second.value.shape()) +
                        ", requested " + shape_str(shape));
        }
        return it->second.value;
    }
    ParamEntry entry;
    entry.value = initial_value(seed_, key, shape, init);
    entry.value.set_requires_grad(init.trainable);
    entry.trainable = init.trainable;
    auto [pos, _] = entries_.emplace(key, std::move(entry));
    return pos->second.value;
}

ParamEntry* WeightStore::find(const std::string& key) {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
}

const ParamEntry* WeightStore::find(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
}

const std::string* WeightStore::section(const std::string& name) const {
    auto it = sections_.find(name);
    return it == sections_.end() ? nullptr : &it->second;
}

std::uint64_t entry_digest(const ParamEntry& entry) {
    std::uint64_t h = fnv1a(double_bytes(entry.value.data()));
    h = fnv1a(double_bytes(entry.momentum), h);
    h = fnv1a(entry.trainable ? "T" : "F", h);
    return h;
}

std::uint64_t WeightStore::digest() const {
    std::uint64_t h = fnv1a(std::to_string(seed_));
    for (const auto& [key, entry] : entries_) {
        h = fnv1a(key, h);
        const std::uint64_t e = entry_digest(entry);
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(&e), sizeof(e)), h);
    }
    return h;
}

std::map<std::string, std::uint64_t> WeightStore::key_digests() const {
    std::map<std::string, std::uint64_t> out;
    for (const auto& [key, entry] : entries_) out.emplace(key, entry_digest(entry));
    return out;
}

WeightStore WeightStore::clone() const {
    WeightStore copy(seed_);
    for (const auto& [key, entry] : entries_) {
        ParamEntry e;
        e.value = entry.value.clone();
        e.value.set_requires_grad(entry.trainable);
        e.momentum = entry.momentum;
        e.trainable = entry.trainable;
        copy.entries_.emplace(key, std::move(e));
    }
    copy.sections_ = sections_;
    return copy;
}

void WeightStore::insert(const std::string& key, ParamEntry entry) { entries_[key] = std::move(entry); }

std::string checkpoint_bytes(const WeightStore& store) {
    ByteWriter w;
    for (char c : kMagic) w.put(c);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint64_t>(store.seed());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
    for (const auto& [key, entry] : store.entries()) {
        w.put_string(key);
        std::uint8_t flags = 0;
        if (entry.trainable) flags |= 1u;
        if (!entry.momentum.empty()) flags |= 2u;
        w.put(flags);
        const auto& shape = entry.value.shape();
        w.put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
        for (auto d : shape) w.put<std::uint64_t>(d);
    }
    for (const auto& [key, entry] : store.entries()) {
        w.put_doubles(entry.value.data());
        if (!entry.momentum.empty()) w.put_doubles(entry.momentum);
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(store.sections().size()));
    for (const auto& [name, bytes] : store.sections()) {
        w.put_string(name);
        w.put_blob(bytes);
    }
    const std::uint64_t checksum = fnv1a(w.bytes());
    w.put(checksum);
    return w.take();
}

WeightStore checkpoint_from_bytes(std::string_view bytes) {
    ByteReader r(bytes);
    for (char expected : kMagic) {
        if (r.get<char>() != expected) throw CheckpointError("checkpoint: bad magic (not a broadnas checkpoint)");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
    const auto seed = r.get<std::uint64_t>();
    const auto count = r.get<std::uint32_t>();
    struct Header {
        std::string key;
        std::uint8_t flags;
        Shape shape;
    };
    std::vector<Header> headers;
    headers.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Header h;
        h.key = r.get_string();
        h.flags = r.get<std::uint8_t>();
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw CheckpointError("checkpoint: implausible rank for key '" + h.key + "'");
        for (std::uint32_t a = 0; a < rank; ++a) h.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
        headers.push_back(std::move(h));
    }
    WeightStore store(seed);
    for (const auto& h : headers) {
        const std::size_t n = shape_numel(h.shape);
        if (n > r.remaining() / sizeof(double)) {
            throw CheckpointError("checkpoint: truncated in buffer of key '" + h.key + "'");
        }
        std::vector<double> values(n);
        r.get_doubles(values);
        ParamEntry e;
        e.trainable = (h.flags & 1u) != 0;
        e.value = Tensor(h.shape, std::move(values));
        e.value.set_requires_grad(e.trainable);
        if (h.flags & 2u) {
            e.momentum.resize(n);
            r.get_doubles(e.momentum);
        }
        store.insert(h.key, std::move(e));
    }
    const auto sections = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < sections; ++i) {
        auto name = r.get_string();
        store.set_section(name, r.get_blob());
    }
    const std::size_t body = r.position();
    const auto checksum = r.get<std::uint64_t>();
    if (checksum != fnv1a(bytes.substr(0, body))) throw CheckpointError("checkpoint: checksum mismatch");
    if (r.remaining() != 0) throw CheckpointError("checkpoint: trailing bytes after checksum");
    return store;
}

void save_checkpoint(const WeightStore& store, const std::filesystem::path& path) {
    const std::string bytes = checkpoint_bytes(store);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("checkpoint: write to '" + path.string() + "' failed");
}

WeightStore load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return checkpoint_from_bytes(ss.str());
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

}  // namespace broadnas
