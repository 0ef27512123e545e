#include "tame/io/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tame::io {

namespace {

constexpr char kMagic[8] = {'T', 'A', 'M', 'E', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.append(buf, 8);
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
    std::uint64_t v = 0;
    std::memcpy(&v, in.data() + pos, 8);
    return v;
}

}  // namespace

const ad::Matrix& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return m;
    throw std::out_of_range("checkpoint has no tensor named '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.first == name) return true;
    return false;
}

std::string serialize(const Checkpoint& ckpt) {
    nlohmann::json header;
    header["format_version"] = kCheckpointFormatVersion;
    header["kind"] = ckpt.kind;
    header["seed"] = ckpt.seed;
    header["meta"] = ckpt.meta;
    nlohmann::json list = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : ckpt.tensors) {
        list.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(m.size());
    }
    header["tensors"] = list;
    const std::string text = header.dump();

    std::string out(kMagic, 8);
    put_u64(out, text.size());
    out += text;
    out.reserve(out.size() + offset * 8);
    for (const auto& t : ckpt.tensors) {
        out.append(reinterpret_cast<const char*>(t.second.data()), static_cast<std::size_t>(t.second.size()) * 8);
    }
    return out;
}

Checkpoint deserialize(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw std::runtime_error("not a checkpoint file (bad magic)");
    }
    const std::uint64_t hlen = get_u64(bytes, 8);
    if (16 + hlen > bytes.size()) throw std::runtime_error("truncated checkpoint header");
    const auto header = nlohmann::json::parse(bytes.substr(16, hlen));
    if (header.at("format_version").get<int>() != kCheckpointFormatVersion) {
        throw std::runtime_error("unsupported checkpoint format version");
    }
    Checkpoint ckpt;
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.meta = header.at("meta");
    const std::size_t base = 16 + hlen;
    for (const auto& t : header.at("tensors")) {
        const auto rows = t.at("shape")[0].get<ad::Index>();
        const auto cols = t.at("shape")[1].get<ad::Index>();
        const auto offset = t.at("offset").get<std::uint64_t>();
        const std::size_t start = base + offset * 8;
        const std::size_t len = static_cast<std::size_t>(rows * cols) * 8;
        if (start + len > bytes.size()) throw std::runtime_error("truncated checkpoint payload");
        ad::Matrix m(rows, cols);
        std::memcpy(m.data(), bytes.data() + start, len);
        ckpt.add(t.at("name").get<std::string>(), std::move(m));
    }
    return ckpt;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    // Write-then-rename so readers never see a partial file.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) { write_file(path, serialize(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return deserialize(read_file(path)); }

}  // namespace tame::io
