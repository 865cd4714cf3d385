#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "d2t/errors.hpp"
#include "d2t/tensor.hpp"

namespace d2t {

/// One named trainable tensor with its accumulated gradient and Adam state.
/// Entries are shared between ensemble members via shared_ptr when a sharing
/// mode is active, so an update through one member is visible to all sharers.
template <typename T>
struct ParamEntry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> adam_m;
    Tensor<T> adam_v;
    std::int64_t adam_t = 0;

    ParamEntry(std::string n, std::vector<std::size_t> shape)
        : name(std::move(n)),
          value(shape),
          grad(shape),
          adam_m(shape),
          adam_v(std::move(shape)) {}
};

template <typename T>
class ParamStore {
  public:
    using EntryPtr = std::shared_ptr<ParamEntry<T>>;

    ParamEntry<T>& create(const std::string& name, std::vector<std::size_t> shape) {
        if (entries_.count(name) != 0) {
            throw ConfigError("duplicate parameter name: " + name);
        }
        auto entry = std::make_shared<ParamEntry<T>>(name, std::move(shape));
        entries_.emplace(name, entry);
        return *entry;
    }

    // Install an entry owned elsewhere (parameter sharing).
    void adopt(const EntryPtr& entry) {
        if (entries_.count(entry->name) != 0) {
            throw ConfigError("duplicate parameter name: " + entry->name);
        }
        entries_.emplace(entry->name, entry);
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    ParamEntry<T>& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
        return *it->second;
    }
    const ParamEntry<T>& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
        return *it->second;
    }

    EntryPtr share(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    void zero_grads() {
        for (auto& [name, entry] : entries_) entry->grad.fill(T(0));
    }

    std::size_t size() const { return entries_.size(); }

    // std::map keeps iteration in sorted name order, which the training loop
    // relies on for determinism.
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

  private:
    std::map<std::string, EntryPtr> entries_;
};

template <typename T>
void fill_uniform(ParamEntry<T>& entry, double limit, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (T& v : entry.value.data) v = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------------------
// Checkpoint format (versioned binary, native little-endian):
//   magic "D2TCKP01" | u32 precision bits | u32 entry count |
//   per entry: u32 name length, name bytes, u32 ndim, u64 dims..., raw data.
// Round-trips bit-exactly at both precisions.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'D', '2', 'T', 'C', 'K', 'P', '0', '1'};

namespace detail {

template <typename U>
void write_pod(std::ostream& os, const U& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_pod(std::istream& is) {
    U v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(U));
    if (!is) throw IoError("checkpoint: unexpected end of file");
    return v;
}

} // namespace detail

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_pod<std::uint32_t>(os, sizeof(T) * 8);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(store.size()));
    for (const auto& [name, entry] : store) {
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(entry->value.ndim()));
        for (std::size_t d : entry->value.shape) {
            detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
        }
        os.write(reinterpret_cast<const char*>(entry->value.data.data()),
                 static_cast<std::streamsize>(entry->value.numel() * sizeof(T)));
    }
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

/// Loads values into an already-constructed store; names and shapes must
/// match exactly.
template <typename T>
void load_checkpoint(ParamStore<T>& store, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw CheckpointMismatch("bad checkpoint magic: " + path);
    }
    const auto bits = detail::read_pod<std::uint32_t>(is);
    if (bits != sizeof(T) * 8) {
        throw CheckpointMismatch("checkpoint precision " + std::to_string(bits) +
                                 "-bit does not match configured " +
                                 std::to_string(sizeof(T) * 8) + "-bit");
    }
    const auto count = detail::read_pod<std::uint32_t>(is);
    if (count != store.size()) {
        throw CheckpointMismatch("checkpoint has " + std::to_string(count) +
                                 " tensors, model expects " + std::to_string(store.size()));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw IoError("checkpoint: unexpected end of file");
        if (!store.has(name)) {
            throw CheckpointMismatch("checkpoint tensor not in model: " + name);
        }
        ParamEntry<T>& entry = store.at(name);
        const auto ndim = detail::read_pod<std::uint32_t>(is);
        std::vector<std::size_t> shape(ndim);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is));
        if (shape != entry.value.shape) {
            throw CheckpointMismatch("shape mismatch for " + name);
        }
        is.read(reinterpret_cast<char*>(entry.value.data.data()),
                static_cast<std::streamsize>(entry.value.numel() * sizeof(T)));
        if (!is) throw IoError("checkpoint: unexpected end of file");
    }
}

} // namespace d2t
