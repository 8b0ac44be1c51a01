#include "leirstd/params.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "leirstd/snapshot.hpp"

namespace leirstd {

Tensor ParamStore::add(const std::string& name, Shape shape, Init init, bool decay) {
    for (const auto& p : params_) {
        if (p.name == name) throw ConfigError("duplicate parameter name " + name);
    }
    std::vector<double> values(shape.size(), 0.0);
    switch (init) {
        case Init::zeros: break;
        case Init::ones: std::fill(values.begin(), values.end(), 1.0); break;
        case Init::fan_in_uniform: {
            // Unit-variance preserving bound for a weight with fan_in = c * h * w.
            const double bound = std::sqrt(3.0 / static_cast<double>(shape.c * shape.h * shape.w));
            Rng rng(derive_seed(seed_, params_.size()));
            for (auto& v : values) v = rng.uniform(-bound, bound);
            break;
        }
    }
    ParamTensor p;
    p.name = name;
    p.value = Tensor::from(shape, std::move(values), true);
    p.moment1.assign(shape.size(), 0.0);
    p.moment2.assign(shape.size(), 0.0);
    p.decay = decay;
    params_.push_back(std::move(p));
    return params_.back().value;
}

std::shared_ptr<ops::BatchNormState> ParamStore::add_batch_norm_state(const std::string& name, std::size_t channels) {
    auto state = std::make_shared<ops::BatchNormState>(channels);
    buffers_.push_back({name, state});
    return state;
}

ParamTensor& ParamStore::get(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return p;
    }
    throw ConfigError("no parameter named " + name);
}

std::size_t ParamStore::scalar_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value.size();
    return total;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
}

void write_tensor_bundle(const std::filesystem::path& stem,
                         const std::vector<std::pair<std::string, Tensor>>& entries) {
    auto bin_path = stem;
    bin_path += ".bin";
    auto manifest_path = stem;
    manifest_path += ".manifest";
    std::ofstream bin(bin_path, std::ios::binary);
    std::ofstream manifest(manifest_path);
    if (!bin || !manifest) throw IoError("cannot write checkpoint at " + stem.string());
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : entries) {
        const Shape& s = tensor.shape();
        manifest << name << ' ' << s.n << ' ' << s.c << ' ' << s.h << ' ' << s.w << ' ' << offset << '\n';
        const auto bytes = encode_snapshot(s, tensor.to_vector());
        bin.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        offset += bytes.size();
    }
    if (!bin || !manifest) throw IoError("failed writing checkpoint at " + stem.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    std::vector<ManifestEntry> entries;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream fields(line);
        ManifestEntry e;
        if (!(fields >> e.name >> e.shape.n >> e.shape.c >> e.shape.h >> e.shape.w >> e.offset)) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed manifest line");
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

std::vector<std::pair<std::string, Tensor>> read_tensor_bundle(const std::filesystem::path& stem) {
    auto bin_path = stem;
    bin_path += ".bin";
    auto manifest_path = stem;
    manifest_path += ".manifest";
    const auto entries = read_manifest(manifest_path);
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw IoError("cannot open " + bin_path.string());
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& e : entries) {
        bin.seekg(static_cast<std::streamoff>(e.offset));
        Tensor t = read_snapshot(bin);
        if (t.shape() != e.shape) throw DataError("checkpoint entry " + e.name + " shape disagrees with manifest");
        out.emplace_back(e.name, std::move(t));
    }
    return out;
}

void save_checkpoint(const ParamStore& store, const std::filesystem::path& stem) {
    std::vector<std::pair<std::string, Tensor>> entries;
    for (const auto& p : store.params()) entries.emplace_back(p.name, p.value);
    for (const auto& b : store.buffers()) {
        const std::size_t c = b.state->running_mean.size();
        entries.emplace_back(b.name + ".running_mean", Tensor::from({1, c, 1, 1}, b.state->running_mean));
        entries.emplace_back(b.name + ".running_var", Tensor::from({1, c, 1, 1}, b.state->running_var));
    }
    write_tensor_bundle(stem, entries);
}

void load_checkpoint(ParamStore& store, const std::filesystem::path& stem) {
    std::map<std::string, Tensor> loaded;
    for (auto& [name, t] : read_tensor_bundle(stem)) loaded.emplace(name, std::move(t));
    auto take = [&](const std::string& name, const Shape& shape) -> const Tensor& {
        auto it = loaded.find(name);
        if (it == loaded.end()) throw DataError("checkpoint is missing entry " + name);
        if (it->second.shape() != shape) {
            throw DataError("checkpoint entry " + name + " has shape " + it->second.shape().str() + ", expected " +
                            shape.str());
        }
        return it->second;
    };
    for (auto& p : store.params()) {
        const Tensor& t = take(p.name, p.value.shape());
        std::copy(t.data().begin(), t.data().end(), p.value.mutable_data().begin());
    }
    for (const auto& b : store.buffers()) {
        const Shape s{1, b.state->running_mean.size(), 1, 1};
        const Tensor& m = take(b.name + ".running_mean", s);
        const Tensor& v = take(b.name + ".running_var", s);
        b.state->running_mean.assign(m.data().begin(), m.data().end());
        b.state->running_var.assign(v.data().begin(), v.data().end());
    }
}

}  // namespace leirstd
