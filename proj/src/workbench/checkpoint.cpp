#include "sar/workbench/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "sar/errors.hpp"
#include "sar/workbench/config.hpp"

namespace sar::workbench {

namespace {

struct TensorEntry {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::size_t offset = 0;  // bytes into the payload
};

void put_f32(std::string& out, float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

float get_f32(const char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<float>(bits);
}

std::uint32_t crc32_of(const std::string& data) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size()));
    return static_cast<std::uint32_t>(crc);
}

std::string hex8(std::uint32_t v) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return buf;
}

template <typename T>
T number(const std::map<std::string, std::string>& kv, const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw IntegrityError("checkpoint header lacks '" + key + "'");
    T v{};
    const auto [ptr, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    if (ec != std::errc() || ptr != it->second.data() + it->second.size()) {
        throw IntegrityError("checkpoint header: bad value for '" + key + "'");
    }
    return v;
}

std::vector<int> int_list(const std::string& text) {
    std::vector<int> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        int v = 0;
        const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (ec != std::errc() || ptr != item.data() + item.size()) throw IntegrityError("checkpoint: bad integer list");
        out.push_back(v);
    }
    return out;
}

}  // namespace

std::vector<double> round_to_float(std::vector<double> values) {
    for (double& v : values) v = static_cast<double>(static_cast<float>(v));
    return values;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    const GeneratorConfig& g = ckpt.state.config;
    if (ckpt.state.params.size() != ckpt.state.layout.total) throw UsageError("checkpoint: parameter count mismatch");
    if (ckpt.adam.m.size() != ckpt.state.params.size() || ckpt.adam.v.size() != ckpt.state.params.size()) {
        throw UsageError("checkpoint: optimizer moments do not match the parameters");
    }
    if (g.discrete() != ckpt.codebook.has_value()) throw UsageError("checkpoint: codebook presence must match the mode");

    std::string payload;
    std::vector<TensorEntry> index;
    auto add = [&](const std::string& name, int rows, int cols, auto&& values) {
        if (values.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
            throw UsageError("checkpoint: tensor '" + name + "' has the wrong size");
        }
        index.push_back({name, rows, cols, payload.size()});
        for (auto v : values) put_f32(payload, static_cast<float>(v));
    };
    const int P = static_cast<int>(ckpt.state.params.size());
    add("params", 1, P, ckpt.state.params);
    add("adam.m", 1, P, ckpt.adam.m);
    add("adam.v", 1, P, ckpt.adam.v);
    if (ckpt.codebook) add("codebook", ckpt.codebook->size(), ckpt.codebook->dim(), ckpt.codebook->entries());
    add("embed", ckpt.embed.dim(), ckpt.embed.patch_size(), ckpt.embed.weights());

    std::string s = std::string(kCheckpointMagic) + "\n";
    auto kv = [&](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
    kv("version", std::to_string(kCheckpointVersion));
    kv("step", std::to_string(ckpt.step));
    kv("rng.seed", std::to_string(ckpt.rng_seed));
    kv("adam.step", std::to_string(ckpt.adam.step));
    std::string sched;
    for (int i = 0; i < g.schedule.size(); ++i) sched += (i ? "," : "") + std::to_string(g.schedule.side(i));
    kv("generator.schedule", sched);
    kv("generator.depth", std::to_string(g.depth));
    kv("generator.width", std::to_string(g.width));
    kv("generator.heads", std::to_string(g.heads));
    kv("generator.mlp_ratio", std::to_string(g.mlp_ratio));
    kv("generator.vocab", std::to_string(g.vocab));
    kv("generator.latent_dim", std::to_string(g.latent_dim));
    kv("generator.classes", std::to_string(g.classes));
    kv("generator.label_drop_prob", format_double(g.label_drop_prob));
    kv("generator.seed", std::to_string(g.seed));
    kv("embed.patch", std::to_string(ckpt.embed.patch()));
    kv("embed.channels", std::to_string(ckpt.embed.channels()));
    kv("embed.dim", std::to_string(ckpt.embed.dim()));
    // The experiment config travels line by line under the "experiment." prefix.
    for (const auto& [k, v] : parse_key_values(ckpt.config_text)) kv("experiment." + k, v);
    kv("tensors", std::to_string(index.size()));
    for (const TensorEntry& t : index) {
        kv("tensor." + t.name, std::to_string(t.rows) + "x" + std::to_string(t.cols) + "@" + std::to_string(t.offset));
    }
    kv("payload.bytes", std::to_string(payload.size()));
    kv("payload.crc32", hex8(crc32_of(payload)));
    s += "end\n";
    s += payload;
    return s;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const auto nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw IntegrityError("checkpoint: truncated header");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    if (next_line() != kCheckpointMagic) throw IntegrityError("checkpoint: bad magic");
    std::map<std::string, std::string> kv;
    std::vector<std::string> tensor_order;
    std::string experiment;
    for (;;) {
        const std::string line = next_line();
        if (line == "end") break;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw IntegrityError("checkpoint: malformed header line");
        const std::string k = line.substr(0, eq);
        const std::string v = line.substr(eq + 1);
        if (k.rfind("experiment.", 0) == 0) experiment += k.substr(11) + " = " + v + "\n";
        if (k.rfind("tensor.", 0) == 0) tensor_order.push_back(k.substr(7));
        if (!kv.emplace(k, v).second) throw IntegrityError("checkpoint: repeated header key '" + k + "'");
    }
    const int version = number<int>(kv, "version");
    if (version != kCheckpointVersion) {
        throw IntegrityError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto payload_bytes = number<std::size_t>(kv, "payload.bytes");
    if (bytes.size() - pos != payload_bytes) {
        throw IntegrityError("checkpoint: payload length " + std::to_string(bytes.size() - pos) + " != " +
                             std::to_string(payload_bytes));
    }
    const std::string payload = bytes.substr(pos);
    const auto crc = kv.find("payload.crc32");
    if (crc == kv.end() || hex8(crc32_of(payload)) != crc->second) throw IntegrityError("checkpoint: checksum mismatch");

    std::map<std::string, TensorEntry> tensors;
    for (const std::string& name : tensor_order) {
        const std::string& spec = kv.at("tensor." + name);
        const auto x = spec.find('x');
        const auto at = spec.find('@');
        if (x == std::string::npos || at == std::string::npos || at < x) throw IntegrityError("checkpoint: bad tensor entry");
        TensorEntry t;
        t.name = name;
        t.rows = int_list(spec.substr(0, x)).at(0);
        t.cols = int_list(spec.substr(x + 1, at - x - 1)).at(0);
        std::map<std::string, std::string> one{{"o", spec.substr(at + 1)}};
        t.offset = number<std::size_t>(one, "o");
        if (t.rows < 0 || t.cols < 0 ||
            t.offset + 4 * static_cast<std::size_t>(t.rows) * static_cast<std::size_t>(t.cols) > payload.size()) {
            throw IntegrityError("checkpoint: tensor '" + name + "' exceeds the payload");
        }
        tensors.emplace(name, t);
    }
    if (number<std::size_t>(kv, "tensors") != tensors.size()) throw IntegrityError("checkpoint: tensor count mismatch");
    auto read = [&](const std::string& name, int rows, int cols) {
        const auto it = tensors.find(name);
        if (it == tensors.end()) throw IntegrityError("checkpoint: missing tensor '" + name + "'");
        if (it->second.rows != rows || it->second.cols != cols) {
            throw IntegrityError("checkpoint: tensor '" + name + "' has shape " + std::to_string(it->second.rows) + "x" +
                                 std::to_string(it->second.cols) + ", expected " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
        }
        std::vector<float> out(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = get_f32(payload.data() + it->second.offset + 4 * i);
        return out;
    };

    Checkpoint c;
    GeneratorConfig g;
    try {
        g.schedule = ScaleSchedule(int_list(kv.at("generator.schedule")));
    } catch (const std::out_of_range&) {
        throw IntegrityError("checkpoint header lacks 'generator.schedule'");
    } catch (const ConfigError& e) {
        throw IntegrityError(std::string("checkpoint: ") + e.what());
    }
    g.depth = number<int>(kv, "generator.depth");
    g.width = number<int>(kv, "generator.width");
    g.heads = number<int>(kv, "generator.heads");
    g.mlp_ratio = number<int>(kv, "generator.mlp_ratio");
    g.vocab = number<int>(kv, "generator.vocab");
    g.latent_dim = number<int>(kv, "generator.latent_dim");
    g.classes = number<int>(kv, "generator.classes");
    g.label_drop_prob = number<double>(kv, "generator.label_drop_prob");
    g.seed = number<std::uint64_t>(kv, "generator.seed");
    try {
        g.validate();
    } catch (const ConfigError& e) {
        throw IntegrityError(std::string("checkpoint: ") + e.what());
    }
    c.state.config = g;
    c.state.layout = param_layout(g);
    const int P = static_cast<int>(c.state.layout.total);
    c.state.params = read("params", 1, P);
    c.adam.m = read("adam.m", 1, P);
    c.adam.v = read("adam.v", 1, P);
    c.adam.step = number<std::int64_t>(kv, "adam.step");
    c.step = number<std::int64_t>(kv, "step");
    c.rng_seed = number<std::uint64_t>(kv, "rng.seed");
    const int D = number<int>(kv, "embed.dim");
    const int patch = number<int>(kv, "embed.patch");
    const int channels = number<int>(kv, "embed.channels");
    try {
        if (g.discrete()) {
            const auto cb = read("codebook", g.vocab, g.latent_dim);
            c.codebook = Codebook(g.vocab, g.latent_dim, std::vector<double>(cb.begin(), cb.end()));
        } else if (tensors.count("codebook") != 0) {
            throw IntegrityError("checkpoint: continuous model with a codebook");
        }
        const auto w = read("embed", D, patch * patch * channels);
        c.embed = PatchEmbed(patch, channels, D, std::vector<double>(w.begin(), w.end()));
    } catch (const ConfigError& e) {
        throw IntegrityError(std::string("checkpoint: ") + e.what());
    }
    c.config_text = experiment;
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const std::string bytes = serialize_checkpoint(ckpt);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw UsageError("cannot write checkpoint '" + path + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw UsageError("failed writing checkpoint '" + path + "'");
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open checkpoint '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

}  // namespace sar::workbench
