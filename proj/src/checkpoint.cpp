#include "sketch3d/checkpoint.hpp"

#include "sketch3d/digest.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace sketch3d {

namespace {

constexpr char kMagic[4] = {'S', 'K', 'F', '1'};
constexpr std::uint64_t kMaxJson = std::uint64_t{1} << 30;
constexpr std::uint32_t kMaxName = 4096;
constexpr std::uint32_t kMaxRank = 8;

class Writer {
public:
    void bytes(const void* data, std::size_t n)
    {
        const auto* p = static_cast<const std::uint8_t*>(data);
        out_.insert(out_.end(), p, p + n);
    }
    template <class U>
    void uint(U v)
    {
        for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
    void string64(const std::string& s)
    {
        uint<std::uint64_t>(s.size());
        bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t>& data() { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    std::span<const std::uint8_t> take(std::size_t n, const char* what)
    {
        if (n > in_.size() - pos_) {
            throw CheckpointError(std::string("SKF1 truncated while reading ") + what + " at byte " + std::to_string(pos_));
        }
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    template <class U>
    U uint(const char* what)
    {
        const auto s = take(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(s[i]) << (8 * i);
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
    std::string string(std::size_t n, const char* what)
    {
        const auto s = take(n, what);
        return {reinterpret_cast<const char*>(s.data()), s.size()};
    }
    std::size_t remaining() const { return in_.size() - pos_; }

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

nlohmann::json parse_json(const std::string& text, const char* what)
{
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointError(std::string("SKF1 ") + what + " is not valid JSON: " + e.what());
    }
}

}  // namespace

const TensorBlock* Checkpoint::find(const std::string& name) const
{
    for (const auto& b : blocks)
        if (b.name == name) return &b;
    return nullptr;
}

const TensorBlock& Checkpoint::at(const std::string& name) const
{
    if (const auto* b = find(name)) return *b;
    throw CheckpointError("SKF1 checkpoint has no tensor block " + name);
}

void Checkpoint::add_parameters(const ParameterStore& store)
{
    for (const auto& [name, t] : store.items()) {
        if (find(name)) throw CheckpointError("duplicate tensor block " + name);
        blocks.push_back({name, t.shape(), {t.values().begin(), t.values().end()}});
    }
}

void Checkpoint::restore_parameters(ParameterStore& store) const
{
    for (const auto& [name, t] : store.items()) {
        const auto& block = at(name);
        if (block.shape != t.shape()) {
            throw CheckpointError("SKF1 block " + name + " has shape " + shape_str(block.shape) + ", model expects " +
                                  shape_str(t.shape()));
        }
        store.assign(name, Tensor(block.shape, block.values));
    }
}

void Checkpoint::add_adam_state(const std::string& prefix, const ParameterStore& store, const AdamState& state)
{
    metadata[prefix] = {{"step", state.step}};
    if (state.first_moment.empty()) return;
    const auto& items = store.items();
    if (state.first_moment.size() != items.size()) throw CheckpointError("optimizer state does not match " + prefix);
    for (std::size_t i = 0; i < items.size(); ++i) {
        const Shape& shape = items[i].second.shape();
        blocks.push_back({prefix + ".m." + items[i].first, shape, state.first_moment[i]});
        blocks.push_back({prefix + ".v." + items[i].first, shape, state.second_moment[i]});
    }
}

AdamState Checkpoint::restore_adam_state(const std::string& prefix, const ParameterStore& store) const
{
    AdamState state;
    if (!metadata.contains(prefix)) throw CheckpointError("SKF1 metadata lacks optimizer state " + prefix);
    state.step = metadata.at(prefix).at("step").get<std::int64_t>();
    const auto& items = store.items();
    if (items.empty() || !find(prefix + ".m." + items.front().first)) return state;
    for (const auto& [name, t] : items) {
        const auto& m = at(prefix + ".m." + name);
        const auto& v = at(prefix + ".v." + name);
        if (m.values.size() != t.numel() || v.values.size() != t.numel()) {
            throw CheckpointError("SKF1 optimizer block size mismatch for " + name);
        }
        state.first_moment.push_back(m.values);
        state.second_moment.push_back(v.values);
    }
    return state;
}

std::string config_digest(const nlohmann::json& config) { return sha256_hex(config.dump()); }

std::vector<std::uint8_t> serialize(const Checkpoint& checkpoint)
{
    Writer w;
    const std::string config = checkpoint.config.dump();
    w.bytes(kMagic, sizeof kMagic);
    const Sha256 digest = sha256(config);
    w.bytes(digest.data(), digest.size());
    w.string64(config);
    w.string64(checkpoint.metadata.dump());
    w.uint<std::uint64_t>(checkpoint.blocks.size());
    for (const auto& b : checkpoint.blocks) {
        if (b.name.size() > kMaxName) throw CheckpointError("tensor name too long: " + b.name);
        if (b.shape.size() > kMaxRank) throw CheckpointError("tensor rank too large: " + b.name);
        if (shape_numel(b.shape) != b.values.size()) throw CheckpointError("block " + b.name + " shape/value mismatch");
        w.uint<std::uint32_t>(static_cast<std::uint32_t>(b.name.size()));
        w.bytes(b.name.data(), b.name.size());
        w.uint<std::uint32_t>(static_cast<std::uint32_t>(b.shape.size()));
        for (auto e : b.shape) w.uint<std::uint64_t>(e);
        for (double v : b.values) w.f64(v);
    }
    const Sha256 trailer = sha256(std::span<const std::uint8_t>(w.data()));
    w.bytes(trailer.data(), trailer.size());
    return std::move(w.data());
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < sizeof kMagic + 64 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw CheckpointError("not an SKF1 checkpoint (bad magic)");
    }
    const auto body = bytes.first(bytes.size() - 32);
    const Sha256 expected = sha256(body);
    if (std::memcmp(expected.data(), bytes.data() + body.size(), 32) != 0) {
        throw CheckpointError("SKF1 integrity check failed: content digest mismatch");
    }

    Reader r(body);
    r.take(sizeof kMagic, "magic");
    const auto stored = r.take(32, "config digest");
    Checkpoint ckpt;
    const auto config_len = r.uint<std::uint64_t>("config length");
    if (config_len > kMaxJson) throw CheckpointError("SKF1 config length out of range");
    const std::string config = r.string(config_len, "config");
    const Sha256 actual = sha256(config);
    if (std::memcmp(actual.data(), stored.data(), 32) != 0) throw CheckpointError("SKF1 config digest mismatch");
    ckpt.config = parse_json(config, "config");
    const auto meta_len = r.uint<std::uint64_t>("metadata length");
    if (meta_len > kMaxJson) throw CheckpointError("SKF1 metadata length out of range");
    ckpt.metadata = parse_json(r.string(meta_len, "metadata"), "metadata");

    const auto count = r.uint<std::uint64_t>("block count");
    for (std::uint64_t i = 0; i < count; ++i) {
        TensorBlock b;
        const auto name_len = r.uint<std::uint32_t>("name length");
        if (name_len > kMaxName) throw CheckpointError("SKF1 tensor name length out of range");
        b.name = r.string(name_len, "tensor name");
        const auto rank = r.uint<std::uint32_t>("rank");
        if (rank > kMaxRank) throw CheckpointError("SKF1 rank out of range for " + b.name);
        std::uint64_t numel = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const auto e = r.uint<std::uint64_t>("extent");
            if (e != 0 && numel > r.remaining() / 8 / e) throw CheckpointError("SKF1 extents exceed file size for " + b.name);
            numel *= e;
            b.shape.push_back(e);
        }
        b.values.resize(numel);
        for (auto& v : b.values) v = r.f64("tensor values");
        ckpt.blocks.push_back(std::move(b));
    }
    if (r.remaining() != 0) throw CheckpointError("SKF1 has trailing bytes after the last block");
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint)
{
    const auto bytes = serialize(checkpoint);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path);
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace sketch3d
