#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "leirstd/box.hpp"
#include "leirstd/image.hpp"

namespace leirstd {

/// One annotation in normalized center form.
struct GroundTruth {
    std::size_t class_id = 0;
    double cx = 0, cy = 0, w = 0, h = 0;

    Box to_box(std::size_t width, std::size_t height) const;
    static GroundTruth from_box(const Box& box, std::size_t width, std::size_t height, std::size_t class_id = 0);
};

/// Values may overshoot [0, 1] by 1e-6 and are clamped; larger excursions
/// raise RangeError. Malformed lines raise ParseError naming the line.
std::vector<GroundTruth> parse_yolo_labels(std::string_view text);
/// Six decimals per value, one record per line.
std::string serialize_yolo_labels(const std::vector<GroundTruth>& labels);

struct Split {
    std::vector<std::size_t> train, val, test;
};

/// Seeded shuffle, then 60/20/20 with rounding remainders going to train.
Split split_dataset(const std::vector<std::size_t>& ids, std::uint64_t seed);

struct SceneSpec {
    std::size_t width = 96;
    std::size_t height = 96;
    std::size_t min_targets = 1;
    std::size_t max_targets = 3;
    double min_intensity = 0.35;  // peak height above background
    double max_intensity = 0.6;
    double min_sigma = 0.75;  // boxes of 4 sigma span about 3 to 9 px
    double max_sigma = 2.25;
    double background_level = 0.15;
    double gradient_amplitude = 0.15;
    double clutter_per_kpx = 0.4;  // clutter blobs per 1000 pixels
    double clutter_amplitude = 0.08;
    double clutter_min_sigma = 3.0;
    double clutter_max_sigma = 7.0;
    double noise_std = 0.01;
    double box_sigmas = 2.0;   // label half-extent in units of sigma
    double min_gap = 3.0;      // pixels between label boxes
    std::uint64_t seed = 0;

    void validate() const;
};

struct Scene {
    Image image;  // quantized to the 8-bit grid
    std::vector<GroundTruth> labels;
    std::vector<std::array<double, 2>> centers;  // true Gaussian centers, pixels
};

/// Deterministic per seed. Throws GenerationError when a target cannot be
/// placed within 100 attempts.
Scene generate_scene(const SceneSpec& spec);

/// Binary 8-bit PGM. Values are clamped to [0, 1] and rounded to k / 255.
void write_pgm(const std::filesystem::path& path, const Image& image);
Image read_pgm(const std::filesystem::path& path);

struct DatasetEntry {
    std::string image;  // paths relative to the manifest directory
    std::string label;
    std::string split;  // train, val or test
};

struct Sample {
    std::string name;
    Image image;
    std::vector<GroundTruth> labels;
};

void write_dataset_manifest(const std::filesystem::path& path, const std::vector<DatasetEntry>& entries);
std::vector<DatasetEntry> read_dataset_manifest(const std::filesystem::path& path);

/// Loads every sample of a split ("all" selects everything). Throws DataError
/// when the split is empty.
std::vector<Sample> load_split(const std::filesystem::path& manifest, const std::string& split);

/// Writes `count` scenes as scene_NNNN.pgm / .txt plus manifest.txt under
/// out_dir. Scene i uses a seed derived from (spec.seed, i).
std::vector<DatasetEntry> generate_dataset(const SceneSpec& spec, std::size_t count,
                                           const std::filesystem::path& out_dir, std::size_t jobs = 1);

}  // namespace leirstd
