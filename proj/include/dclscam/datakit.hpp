// datakit.hpp: image/heatmap file I/O, dataset manifests, and the synthetic
// "shapes" generator that stands in for human attention data at desk scale:
// each image holds one target shape on a cluttered background, and the
// reference heatmap is the blurred shape mask.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dclscam/cam.hpp"
#include "dclscam/image.hpp"
#include "dclscam/zoo.hpp"

namespace dclscam {

struct Sample {
    ImageU8 image;
    int label = 0;
    Heatmap heatmap;  // reference attention map, same size as the image
};

struct Dataset {
    std::vector<Sample> samples;
    int classes = 0;
};

// JSON-lines manifest. An optional first line {"classes": K} declares the
// class count; every other line is {"image": path, "heatmap": path,
// "label": int} with paths relative to the manifest. Samples load eagerly and
// every invariant is validated; errors cite the offending line.
Dataset load_dataset(const std::string& manifest_path);

TrainSet to_trainset(const Dataset& dataset);

struct GenerateOptions {
    int count = 0;
    int size = 32;     // square images, >= 16
    int classes = 3;   // 2..5: circle, square, triangle, cross, ring
    std::uint32_t seed = 7;
};

// Writes img_XXXXX.ppm / hm_XXXXX.pgm pairs plus manifest.jsonl into out_dir.
// Deterministic under the seed, byte for byte. Returns the manifest path.
std::string generate_shapes(const GenerateOptions& options, const std::string& out_dir);

// ---- pixel formats -------------------------------------------------------------
// PGM16 (P5, maxval 65535, big-endian samples) carries heatmaps losslessly to
// 1/65535; PPM (P6) carries 8-bit RGB; PNG is read-only (8-bit RGB/RGBA) plus
// a minimal writer used for overlays.

void write_pgm16(const std::string& path, const Heatmap& hm);
Heatmap read_pgm16(const std::string& path);

void write_ppm(const std::string& path, const ImageU8& img);
ImageU8 read_ppm(const std::string& path);

void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

// Dispatch on file extension (.ppm or .png).
ImageU8 read_image(const std::string& path);

}  // namespace dclscam
