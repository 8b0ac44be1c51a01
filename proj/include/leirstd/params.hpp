#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "leirstd/ops.hpp"
#include "leirstd/rng.hpp"
#include "leirstd/tensor.hpp"

namespace leirstd {

/// A trainable tensor plus its adaptive-moment optimizer state.
struct ParamTensor {
    std::string name;
    Tensor value;
    std::vector<double> moment1;
    std::vector<double> moment2;
    std::uint64_t step_count = 0;
    bool decay = true;
};

enum class Init { zeros, ones, fan_in_uniform };

/// Owns every parameter and batch-norm buffer of a model, in creation order.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

    Tensor add(const std::string& name, Shape shape, Init init, bool decay = true);
    std::shared_ptr<ops::BatchNormState> add_batch_norm_state(const std::string& name, std::size_t channels);

    std::vector<ParamTensor>& params() { return params_; }
    const std::vector<ParamTensor>& params() const { return params_; }
    ParamTensor& get(const std::string& name);

    struct Buffer {
        std::string name;
        std::shared_ptr<ops::BatchNormState> state;
    };
    const std::vector<Buffer>& buffers() const { return buffers_; }

    /// Number of trainable scalars.
    std::size_t scalar_count() const;
    void zero_grad();

private:
    std::uint64_t seed_;
    std::vector<ParamTensor> params_;
    std::vector<Buffer> buffers_;
};

struct ManifestEntry {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;
};

/// Writes `<stem>.bin` (concatenated tensor snapshots) and `<stem>.manifest`
/// (one "name n c h w byte_offset" line per entry).
void write_tensor_bundle(const std::filesystem::path& stem, const std::vector<std::pair<std::string, Tensor>>& entries);
std::vector<std::pair<std::string, Tensor>> read_tensor_bundle(const std::filesystem::path& stem);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Parameters followed by batch-norm running statistics
/// (`<name>.running_mean`, `<name>.running_var`).
void save_checkpoint(const ParamStore& store, const std::filesystem::path& stem);
void load_checkpoint(ParamStore& store, const std::filesystem::path& stem);

}  // namespace leirstd
