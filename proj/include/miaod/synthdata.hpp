#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "miaod/box.hpp"
#include "miaod/common.hpp"

namespace miaod::synth {

/// Shape kinds cycle through class indices: class c renders as kind c % 3.
enum class ShapeKind { Square = 0, Disc = 1, Cross = 2 };

struct SceneSpec {
    int image_size = 64;
    std::vector<std::string> classes = {"square", "disc", "cross"};
    int objects_min = 1;
    int objects_max = 3;
    int object_size_min = 8;
    int object_size_max = 16;
    double fg_min = 0.55;
    double fg_max = 1.0;
    double bg_mean = 0.10;
    double bg_noise_std = 0.05;
    int min_center_separation = 10;

    int num_classes() const { return static_cast<int>(classes.size()); }
    /// Throws contract_error on out-of-range fields.
    void validate() const;
};

struct SceneObject {
    int class_index = 0;
    int x0 = 0, y0 = 0;  // top-left corner of the shape extent
    int size = 0;        // side length of the extent
    double intensity = 1.0;

    double cx() const { return x0 + size / 2.0; }
    double cy() const { return y0 + size / 2.0; }
    Box box() const {
        return Box{static_cast<double>(x0), static_cast<double>(y0),
                   static_cast<double>(x0 + size), static_cast<double>(y0 + size)};
    }
};

struct ImageSample {
    std::string id;
    int width = 0, height = 0;
    std::vector<double> pixels;  // row-major, [0,1], quantized to 8-bit levels
    std::vector<Box> gt_boxes;
    std::vector<int> gt_classes;
    std::vector<int> image_labels;  // per-class presence indicator

    bool operator==(const ImageSample&) const = default;
};

/// Per-class presence indicator derived from instance classes.
std::vector<int> derive_image_labels(const std::vector<int>& gt_classes,
                                     int num_classes);

/// Rasterize objects over a noisy background; continuous values clamped to
/// [0,1], not yet quantized.
std::vector<double> render_scene(const std::vector<SceneObject>& objects,
                                 const SceneSpec& spec, Rng& rng);

/// Deterministic dataset: sample i is generated from the stream keyed by
/// (seed, i), so any subset regenerates identically and generation may be
/// parallelized across indices. Pixels are quantized to 8-bit levels.
std::vector<ImageSample> generate_dataset(const SceneSpec& spec, int count,
                                          std::uint64_t seed);

struct Dataset {
    SceneSpec spec;
    std::uint64_t seed = 0;
    std::vector<ImageSample> samples;
};

/// On-disk layout: manifest.txt + img_<id>.pgm (P5) + lab_<id>.txt.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Combined FNV-1a checksum over a dataset's sample files, as printed by the
/// generate command.
std::uint64_t dataset_checksum(const Dataset& ds);

std::string encode_pgm(const std::vector<double>& pixels, int width, int height);

}  // namespace miaod::synth
