#include "leirstd/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "leirstd/error.hpp"
#include "leirstd/parallel.hpp"
#include "leirstd/rng.hpp"

namespace leirstd {

Box GroundTruth::to_box(std::size_t width, std::size_t height) const {
    const auto W = static_cast<double>(width), H = static_cast<double>(height);
    return Box::from_center(cx * W, cy * H, w * W, h * H);
}

GroundTruth GroundTruth::from_box(const Box& box, std::size_t width, std::size_t height, std::size_t class_id) {
    const auto W = static_cast<double>(width), H = static_cast<double>(height);
    return {class_id, box.cx() / W, box.cy() / H, box.w() / W, box.h() / H};
}

namespace {

constexpr double kClampTolerance = 1e-6;

std::vector<std::string_view> tokens(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        const std::size_t start = i;
        while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        if (i > start) out.push_back(line.substr(start, i - start));
    }
    return out;
}

double in_unit(double v, const char* what, std::size_t line_no) {
    if (v < -kClampTolerance || v > 1.0 + kClampTolerance || !std::isfinite(v)) {
        throw RangeError("line " + std::to_string(line_no) + ": " + what + " outside [0, 1]");
    }
    return std::clamp(v, 0.0, 1.0);
}

}  // namespace

std::vector<GroundTruth> parse_yolo_labels(std::string_view text) {
    std::vector<GroundTruth> out;
    std::size_t line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const std::size_t end = text.find('\n');
        std::string_view line = text.substr(0, end);
        text = end == std::string_view::npos ? std::string_view{} : text.substr(end + 1);
        const auto fields = tokens(line);
        if (fields.empty()) continue;
        const std::string where = "line " + std::to_string(line_no) + ": ";
        if (fields.size() != 5) throw ParseError(where + "expected 5 fields, got " + std::to_string(fields.size()));
        GroundTruth g;
        {
            const auto f = fields[0];
            auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), g.class_id);
            if (ec != std::errc() || ptr != f.data() + f.size()) throw ParseError(where + "bad class id '" + std::string(f) + "'");
        }
        double v[4];
        for (int k = 0; k < 4; ++k) {
            const auto f = fields[static_cast<std::size_t>(k + 1)];
            auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v[k]);
            if (ec != std::errc() || ptr != f.data() + f.size()) throw ParseError(where + "bad number '" + std::string(f) + "'");
        }
        const double cx = in_unit(v[0], "cx", line_no), cy = in_unit(v[1], "cy", line_no);
        const double w = in_unit(v[2], "w", line_no), h = in_unit(v[3], "h", line_no);
        if (w <= 0.0 || h <= 0.0) throw RangeError(where + "box has no extent");
        const double x1 = in_unit(cx - w / 2, "left edge", line_no), x2 = in_unit(cx + w / 2, "right edge", line_no);
        const double y1 = in_unit(cy - h / 2, "top edge", line_no), y2 = in_unit(cy + h / 2, "bottom edge", line_no);
        g.cx = (x1 + x2) / 2;
        g.cy = (y1 + y2) / 2;
        g.w = x2 - x1;
        g.h = y2 - y1;
        out.push_back(g);
    }
    return out;
}

std::string serialize_yolo_labels(const std::vector<GroundTruth>& labels) {
    std::string out;
    char buf[128];
    for (const auto& g : labels) {
        std::snprintf(buf, sizeof buf, "%zu %.6f %.6f %.6f %.6f\n", g.class_id, g.cx, g.cy, g.w, g.h);
        out += buf;
    }
    return out;
}

Split split_dataset(const std::vector<std::size_t>& ids, std::uint64_t seed) {
    if (ids.size() < 5) throw SplitError("need at least 5 items to split, got " + std::to_string(ids.size()));
    std::vector<std::size_t> order = ids;
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const std::size_t n_val = order.size() / 5, n_test = order.size() / 5;
    const std::size_t n_train = order.size() - n_val - n_test;
    Split s;
    s.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
    s.val.assign(order.begin() + static_cast<long>(n_train), order.begin() + static_cast<long>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<long>(n_train + n_val), order.end());
    return s;
}

void SceneSpec::validate() const {
    auto need = [](bool ok, const char* what) {
        if (!ok) throw ConfigError(std::string("scene spec: ") + what);
    };
    need(width >= 8 && height >= 8, "image must be at least 8x8");
    need(min_targets <= max_targets, "min_targets > max_targets");
    need(0 <= min_intensity && min_intensity <= max_intensity && max_intensity <= 1, "intensities must lie in [0, 1]");
    need(0 < min_sigma && min_sigma <= max_sigma, "target sigma range must be positive");
    need(0 <= background_level && background_level + gradient_amplitude <= 1, "background outside [0, 1]");
    need(clutter_per_kpx >= 0 && clutter_amplitude >= 0, "clutter must be non-negative");
    need(0 < clutter_min_sigma && clutter_min_sigma <= clutter_max_sigma, "clutter sigma range must be positive");
    need(noise_std >= 0, "noise must be non-negative");
    need(box_sigmas > 0, "box_sigmas must be positive");
    need(min_gap >= 0, "min_gap must be non-negative");
}

namespace {

void add_gaussian(Image& img, double cx, double cy, double sigma, double amplitude) {
    const double reach = 4.0 * sigma;
    const auto x0 = static_cast<long>(std::max(0.0, std::floor(cx - reach)));
    const auto x1 = static_cast<long>(std::min<double>(static_cast<double>(img.width) - 1, std::ceil(cx + reach)));
    const auto y0 = static_cast<long>(std::max(0.0, std::floor(cy - reach)));
    const auto y1 = static_cast<long>(std::min<double>(static_cast<double>(img.height) - 1, std::ceil(cy + reach)));
    for (long y = y0; y <= y1; ++y)
        for (long x = x0; x <= x1; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
            img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) +=
                amplitude * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        }
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

Scene generate_scene(const SceneSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const auto W = static_cast<double>(spec.width), H = static_cast<double>(spec.height);
    Scene scene;
    scene.image = Image(spec.width, spec.height);

    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x) {
            const double u = 2.0 * (static_cast<double>(x) + 0.5) / W - 1.0;
            const double v = 2.0 * (static_cast<double>(y) + 0.5) / H - 1.0;
            const double ramp = (std::cos(angle) * u + std::sin(angle) * v) / std::numbers::sqrt2;
            scene.image.at(x, y) = spec.background_level + spec.gradient_amplitude * 0.5 * (1.0 + ramp);
        }

    const auto blobs = static_cast<std::size_t>(std::llround(spec.clutter_per_kpx * W * H / 1000.0));
    for (std::size_t b = 0; b < blobs; ++b) {
        const double cx = rng.uniform(0, W), cy = rng.uniform(0, H);
        const double sigma = rng.uniform(spec.clutter_min_sigma, spec.clutter_max_sigma);
        const double amp = rng.uniform(-spec.clutter_amplitude, spec.clutter_amplitude);
        add_gaussian(scene.image, cx, cy, sigma, amp);
    }

    const std::size_t targets = spec.min_targets + rng.below(spec.max_targets - spec.min_targets + 1);
    std::vector<Box> placed;
    for (std::size_t t = 0; t < targets; ++t) {
        bool ok = false;
        for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
            const double sigma = rng.uniform(spec.min_sigma, spec.max_sigma);
            const double cx = rng.uniform(1.0, W - 1.0), cy = rng.uniform(1.0, H - 1.0);
            const double amp = rng.uniform(spec.min_intensity, spec.max_intensity);
            const double half = spec.box_sigmas * sigma;
            const Box box{std::max(0.0, cx - half), std::max(0.0, cy - half), std::min(W, cx + half),
                          std::min(H, cy + half)};
            const Box grown{box.x1 - spec.min_gap, box.y1 - spec.min_gap, box.x2 + spec.min_gap, box.y2 + spec.min_gap};
            ok = std::none_of(placed.begin(), placed.end(), [&](const Box& p) {
                return p.x1 < grown.x2 && grown.x1 < p.x2 && p.y1 < grown.y2 && grown.y1 < p.y2;
            });
            if (!ok) continue;
            placed.push_back(box);
            add_gaussian(scene.image, cx, cy, sigma, amp);
            scene.labels.push_back(GroundTruth::from_box(box, spec.width, spec.height));
            scene.centers.push_back({cx, cy});
        }
        if (!ok) throw GenerationError("could not place target " + std::to_string(t) + " after 100 attempts");
    }

    for (auto& p : scene.image.pixels) p = quantize(p + spec.noise_std * rng.normal());
    return scene;
}

void write_pgm(const std::filesystem::path& path, const Image& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    std::vector<unsigned char> bytes(image.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

Image read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    auto header_token = [&]() {
        std::string tok;
        while (in >> tok) {
            if (tok[0] != '#') return tok;
            std::string rest;
            std::getline(in, rest);
        }
        throw DataError(path.string() + ": truncated PGM header");
    };
    if (header_token() != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(header_token());
        h = std::stoul(header_token());
        maxval = std::stoul(header_token());
    } catch (const std::logic_error&) {
        throw DataError(path.string() + ": malformed PGM header");
    }
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw DataError(path.string() + ": unsupported PGM geometry");
    in.get();  // single whitespace before the raster
    std::vector<unsigned char> bytes(w * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw IoError(path.string() + ": truncated raster");
    Image img(w, h);
    for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<double>(bytes[i]) / static_cast<double>(maxval);
    return img;
}

void write_dataset_manifest(const std::filesystem::path& path, const std::vector<DatasetEntry>& entries) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& e : entries) out << e.image << ' ' << e.label << ' ' << e.split << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

std::vector<DatasetEntry> read_dataset_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    std::vector<DatasetEntry> entries;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream fields(line);
        DatasetEntry e;
        if (!(fields >> e.image)) continue;
        std::string extra;
        if (!(fields >> e.label >> e.split) || (fields >> extra)) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 'image label split'");
        }
        if (e.split != "train" && e.split != "val" && e.split != "test") {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": unknown split '" + e.split + "'");
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

std::vector<Sample> load_split(const std::filesystem::path& manifest, const std::string& split) {
    const auto dir = manifest.parent_path();
    std::vector<Sample> out;
    for (const auto& e : read_dataset_manifest(manifest)) {
        if (split != "all" && e.split != split) continue;
        Sample s;
        s.name = std::filesystem::path(e.image).stem().string();
        s.image = read_pgm(dir / e.image);
        std::ifstream in(dir / e.label);
        if (!in) throw IoError("cannot open " + (dir / e.label).string());
        std::stringstream text;
        text << in.rdbuf();
        try {
            s.labels = parse_yolo_labels(text.str());
        } catch (const Error& err) {
            throw ParseError((dir / e.label).string() + ": " + err.what());
        }
        out.push_back(std::move(s));
    }
    if (out.empty()) throw DataError("split '" + split + "' of " + manifest.string() + " is empty");
    return out;
}

std::vector<DatasetEntry> generate_dataset(const SceneSpec& spec, std::size_t count,
                                           const std::filesystem::path& out_dir, std::size_t jobs) {
    spec.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    std::vector<std::size_t> ids(count);
    for (std::size_t i = 0; i < count; ++i) ids[i] = i;
    const Split split = split_dataset(ids, derive_seed(spec.seed, std::numeric_limits<std::uint64_t>::max()));

    std::vector<DatasetEntry> entries(count);
    for (auto [part, name] : {std::pair{&split.train, "train"}, {&split.val, "val"}, {&split.test, "test"}})
        for (std::size_t i : *part) entries[i].split = name;

    parallel_for(count, jobs, [&](std::size_t i) {
        SceneSpec s = spec;
        s.seed = derive_seed(spec.seed, i);
        const Scene scene = generate_scene(s);
        char stem[32];
        std::snprintf(stem, sizeof stem, "scene_%04zu", i);
        entries[i].image = std::string(stem) + ".pgm";
        entries[i].label = std::string(stem) + ".txt";
        write_pgm(out_dir / entries[i].image, scene.image);
        std::ofstream label(out_dir / entries[i].label);
        if (!label) throw IoError("cannot write " + (out_dir / entries[i].label).string());
        label << serialize_yolo_labels(scene.labels);
    });
    write_dataset_manifest(out_dir / "manifest.txt", entries);
    return entries;
}

}  // namespace leirstd
