#include "dclscam/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <zlib.h>

#include <json.hpp>

namespace fs = std::filesystem;

namespace dclscam {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

void write_file(const std::string& path, const void* data, std::size_t size) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open file for writing: " + path);
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!os) throw std::runtime_error("failed writing file: " + path);
}

// Netpbm header tokens: whitespace separated, '#' starts a comment.
struct PnmParser {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;
    const std::string& path;

    int next_int() {
        while (pos < bytes.size()) {
            const char c = static_cast<char>(bytes[pos]);
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos;
            } else {
                break;
            }
        }
        if (pos >= bytes.size() || !std::isdigit(bytes[pos]))
            throw std::runtime_error(path + ": malformed header");
        int v = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos] - '0');
            ++pos;
        }
        return v;
    }

    // One whitespace byte separates the header from the payload.
    void skip_single_space() {
        if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
            throw std::runtime_error(path + ": malformed header");
        ++pos;
    }

    void need_payload(std::size_t n) {
        if (bytes.size() - pos < n)
            throw std::runtime_error(path + ": truncated payload, expected " + std::to_string(n) +
                                     " bytes, got " + std::to_string(bytes.size() - pos));
    }
};

}  // namespace

// ---- PGM16 ----------------------------------------------------------------------

void write_pgm16(const std::string& path, const Heatmap& hm) {
    if (hm.height < 1 || hm.width < 1 ||
        hm.values.size() != static_cast<std::size_t>(hm.height) * hm.width)
        throw std::invalid_argument("write_pgm16: malformed heatmap");
    std::string header = "P5\n" + std::to_string(hm.width) + " " + std::to_string(hm.height) +
                         "\n65535\n";
    std::vector<std::uint8_t> out(header.size() + hm.values.size() * 2);
    std::memcpy(out.data(), header.data(), header.size());
    std::uint8_t* p = out.data() + header.size();
    for (float v : hm.values) {
        const float c = std::clamp(v, 0.0f, 1.0f);
        const auto q = static_cast<std::uint16_t>(std::lround(c * 65535.0f));
        *p++ = static_cast<std::uint8_t>(q >> 8);  // big-endian per Netpbm
        *p++ = static_cast<std::uint8_t>(q & 0xff);
    }
    write_file(path, out.data(), out.size());
}

Heatmap read_pgm16(const std::string& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
        throw std::runtime_error(path + ": not a binary PGM (P5) file");
    PnmParser p{bytes, 2, path};
    const int w = p.next_int();
    const int h = p.next_int();
    const int maxval = p.next_int();
    if (w < 1 || h < 1 || maxval < 1 || maxval > 65535)
        throw std::runtime_error(path + ": malformed header");
    p.skip_single_space();
    Heatmap hm;
    hm.width = w;
    hm.height = h;
    hm.values.resize(static_cast<std::size_t>(w) * h);
    if (maxval > 255) {
        p.need_payload(hm.values.size() * 2);
        for (auto& v : hm.values) {
            const std::uint16_t q = static_cast<std::uint16_t>(
                (static_cast<std::uint16_t>(bytes[p.pos]) << 8) | bytes[p.pos + 1]);
            p.pos += 2;
            v = static_cast<float>(q) / static_cast<float>(maxval);
        }
    } else {
        p.need_payload(hm.values.size());
        for (auto& v : hm.values) v = static_cast<float>(bytes[p.pos++]) / static_cast<float>(maxval);
    }
    return hm;
}

// ---- PPM ------------------------------------------------------------------------

void write_ppm(const std::string& path, const ImageU8& img) {
    if (!img.valid()) throw std::invalid_argument("write_ppm: malformed image");
    std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                         "\n255\n";
    std::vector<std::uint8_t> out(header.size() + img.rgb.size());
    std::memcpy(out.data(), header.data(), header.size());
    std::memcpy(out.data() + header.size(), img.rgb.data(), img.rgb.size());
    write_file(path, out.data(), out.size());
}

ImageU8 read_ppm(const std::string& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
        throw std::runtime_error(path + ": not a binary PPM (P6) file");
    PnmParser p{bytes, 2, path};
    const int w = p.next_int();
    const int h = p.next_int();
    const int maxval = p.next_int();
    if (w < 1 || h < 1 || maxval != 255)
        throw std::runtime_error(path + ": malformed header (only maxval 255 supported)");
    p.skip_single_space();
    ImageU8 img;
    img.width = w;
    img.height = h;
    img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
    p.need_payload(img.rgb.size());
    std::memcpy(img.rgb.data(), bytes.data() + p.pos, img.rgb.size());
    return img;
}

// ---- PNG ------------------------------------------------------------------------

namespace {

constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

std::uint32_t be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& payload) {
    put_be32(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const auto crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

inline std::uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
    if (pb <= pc) return static_cast<std::uint8_t>(b);
    return static_cast<std::uint8_t>(c);
}

}  // namespace

void write_png(const std::string& path, const ImageU8& img) {
    if (!img.valid()) throw std::invalid_argument("write_png: malformed image");
    const int w = img.width, h = img.height;
    // Filter 0 on every row; zlib does the entropy coding.
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (1 + static_cast<std::size_t>(w) * 3));
    for (int y = 0; y < h; ++y) {
        std::uint8_t* row = raw.data() + static_cast<std::size_t>(y) * (1 + static_cast<std::size_t>(w) * 3);
        row[0] = 0;
        std::memcpy(row + 1, img.rgb.data() + static_cast<std::size_t>(y) * w * 3,
                    static_cast<std::size_t>(w) * 3);
    }
    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_size);
    if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("write_png: deflate failed");
    comp.resize(comp_size);

    std::vector<std::uint8_t> out(kPngSig, kPngSig + 8);
    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(w));
    put_be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: RGB
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter
    ihdr.push_back(0);   // no interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", comp);
    put_chunk(out, "IEND", {});
    write_file(path, out.data(), out.size());
}

ImageU8 read_png(const std::string& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0)
        throw std::runtime_error(path + ": not a PNG file");
    std::size_t pos = 8;
    int w = 0, h = 0, bit_depth = 0, color_type = 0;
    std::vector<std::uint8_t> idat;
    bool saw_ihdr = false, saw_iend = false;
    while (pos + 8 <= bytes.size() && !saw_iend) {
        const std::uint32_t len = be32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size())
            throw std::runtime_error(path + ": truncated chunk, expected " + std::to_string(len) +
                                     " bytes, got " + std::to_string(bytes.size() - pos - 12));
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* payload = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw std::runtime_error(path + ": malformed IHDR");
            w = static_cast<int>(be32(payload));
            h = static_cast<int>(be32(payload + 4));
            bit_depth = payload[8];
            color_type = payload[9];
            if (payload[12] != 0) throw std::runtime_error(path + ": interlaced PNG unsupported");
            if (bit_depth != 8 || (color_type != 2 && color_type != 6))
                throw std::runtime_error(path + ": only 8-bit RGB/RGBA PNGs supported");
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || w < 1 || h < 1) throw std::runtime_error(path + ": missing IHDR");
    if (idat.empty()) throw std::runtime_error(path + ": missing IDAT");

    const int bpp = color_type == 6 ? 4 : 3;
    const std::size_t stride = static_cast<std::size_t>(w) * bpp;
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (stride + 1));
    uLongf raw_size = static_cast<uLongf>(raw.size());
    const int zrc = uncompress(raw.data(), &raw_size, idat.data(), static_cast<uLong>(idat.size()));
    if (zrc != Z_OK || raw_size != raw.size())
        throw std::runtime_error(path + ": corrupt PNG stream (inflate rc " + std::to_string(zrc) +
                                 ")");

    // Undo per-row filters.
    std::vector<std::uint8_t> pix(static_cast<std::size_t>(h) * stride);
    for (int y = 0; y < h; ++y) {
        const std::uint8_t filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
        const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
        std::uint8_t* dst = pix.data() + static_cast<std::size_t>(y) * stride;
        const std::uint8_t* up = y > 0 ? dst - stride : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            const int left = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
            const int above = up ? up[x] : 0;
            const int ul = (up && x >= static_cast<std::size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += above; break;
                case 3: v += (left + above) / 2; break;
                case 4: v += paeth(left, above, ul); break;
                default: throw std::runtime_error(path + ": unknown PNG filter");
            }
            dst[x] = static_cast<std::uint8_t>(v & 0xff);
        }
    }

    ImageU8 img;
    img.width = w;
    img.height = h;
    img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
    for (std::size_t i = 0; i < static_cast<std::size_t>(w) * h; ++i)
        for (int c = 0; c < 3; ++c) img.rgb[i * 3 + c] = pix[i * bpp + c];
    return img;
}

ImageU8 read_image(const std::string& path) {
    if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".png") == 0) return read_png(path);
    if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".ppm") == 0) return read_ppm(path);
    throw std::runtime_error(path + ": unsupported image extension (expected .ppm or .png)");
}

// ---- manifests --------------------------------------------------------------------

Dataset load_dataset(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw std::runtime_error("cannot open manifest: " + manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();

    Dataset ds;
    bool have_header = false;
    std::string line;
    int line_no = 0;
    int max_label = -1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = manifest_path + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(where + ": bad JSON: " + e.what());
        }
        if (!have_header && ds.samples.empty() && j.contains("classes") && !j.contains("image")) {
            ds.classes = j.at("classes").get<int>();
            if (ds.classes < 2) throw std::runtime_error(where + ": classes must be >= 2");
            have_header = true;
            continue;
        }
        if (!j.contains("image") || !j.contains("heatmap") || !j.contains("label"))
            throw std::runtime_error(where + ": sample line needs image, heatmap and label");
        Sample s;
        s.label = j.at("label").get<int>();
        const std::string img_path = (base / j.at("image").get<std::string>()).string();
        const std::string hm_path = (base / j.at("heatmap").get<std::string>()).string();
        try {
            s.image = read_image(img_path);
            s.heatmap = read_pgm16(hm_path);
        } catch (const std::exception& e) {
            throw std::runtime_error(where + ": " + e.what());
        }
        if (s.heatmap.height != s.image.height || s.heatmap.width != s.image.width)
            throw std::runtime_error(where + ": heatmap size " + std::to_string(s.heatmap.width) +
                                     "x" + std::to_string(s.heatmap.height) +
                                     " does not match image size " + std::to_string(s.image.width) +
                                     "x" + std::to_string(s.image.height));
        if (s.label < 0 || (have_header && s.label >= ds.classes))
            throw std::runtime_error(where + ": label " + std::to_string(s.label) +
                                     " out of range [0," + std::to_string(ds.classes) + ")");
        max_label = std::max(max_label, s.label);
        ds.samples.push_back(std::move(s));
    }
    if (!have_header) ds.classes = max_label + 1;
    return ds;
}

TrainSet to_trainset(const Dataset& dataset) {
    TrainSet set;
    set.count = static_cast<int>(dataset.samples.size());
    if (set.count == 0) return set;
    set.height = dataset.samples[0].image.height;
    set.width = dataset.samples[0].image.width;
    const std::int64_t plane = static_cast<std::int64_t>(3) * set.height * set.width;
    set.pixels.resize(static_cast<std::size_t>(set.count) * plane);
    set.labels.resize(static_cast<std::size_t>(set.count));
    for (int i = 0; i < set.count; ++i) {
        const Sample& s = dataset.samples[static_cast<std::size_t>(i)];
        if (s.image.height != set.height || s.image.width != set.width)
            throw std::invalid_argument("to_trainset: mixed image sizes in dataset");
        const Tensor t = image_to_tensor(s.image);
        std::copy(t.data().begin(), t.data().end(), set.pixels.begin() + i * plane);
        set.labels[static_cast<std::size_t>(i)] = s.label;
    }
    return set;
}

// ---- shapes generator ---------------------------------------------------------------

namespace {

enum ShapeClass { kCircle = 0, kSquare, kTriangle, kCross, kRing };

// Filled mask of one shape instance; geometry is the only class signal.
std::vector<std::uint8_t> shape_mask(int size, int cls, float cy, float cx, float r) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(size) * size, 0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const float dy = static_cast<float>(y) - cy;
            const float dx = static_cast<float>(x) - cx;
            bool in = false;
            switch (cls) {
                case kCircle:
                    in = dy * dy + dx * dx <= r * r;
                    break;
                case kSquare:
                    in = std::fabs(dy) <= 0.85f * r && std::fabs(dx) <= 0.85f * r;
                    break;
                case kTriangle: {
                    // Upward triangle: apex at cy-r, base at cy+0.8r.
                    const float top = cy - r, bottom = cy + 0.8f * r;
                    if (y >= top && y <= bottom) {
                        const float frac = (static_cast<float>(y) - top) / (bottom - top);
                        in = std::fabs(dx) <= frac * r;
                    }
                    break;
                }
                case kCross:
                    in = (std::fabs(dx) <= 0.35f * r && std::fabs(dy) <= r) ||
                         (std::fabs(dy) <= 0.35f * r && std::fabs(dx) <= r);
                    break;
                case kRing: {
                    const float d2 = dy * dy + dx * dx;
                    in = d2 <= r * r && d2 >= 0.5f * r * 0.5f * r;
                    break;
                }
                default: break;
            }
            if (in) mask[static_cast<std::size_t>(y) * size + x] = 1;
        }
    return mask;
}

}  // namespace

std::string generate_shapes(const GenerateOptions& opt, const std::string& out_dir) {
    if (opt.size < 16) throw std::invalid_argument("generate_shapes: size must be >= 16");
    if (opt.classes < 2 || opt.classes > 5)
        throw std::invalid_argument("generate_shapes: classes must be in [2,5], got " +
                                    std::to_string(opt.classes));
    if (opt.count < 0) throw std::invalid_argument("generate_shapes: negative count");
    fs::create_directories(out_dir);

    std::mt19937 rng(opt.seed);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    const int size = opt.size;
    std::ostringstream manifest;
    manifest << "{\"classes\": " << opt.classes << ", \"size\": " << size << "}\n";

    for (int i = 0; i < opt.count; ++i) {
        const int label = i % opt.classes;

        // Background: a coarse random color grid upsampled bilinearly, plus a
        // few distractor line segments and per-pixel jitter.
        const int grid = 4;
        std::vector<float> coarse(static_cast<std::size_t>(grid) * grid * 3);
        for (auto& v : coarse) v = 40.0f + 100.0f * unit(rng);
        ImageU8 img;
        img.height = size;
        img.width = size;
        img.rgb.resize(static_cast<std::size_t>(size) * size * 3);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const float gy = (static_cast<float>(y) + 0.5f) * grid / size - 0.5f;
                const float gx = (static_cast<float>(x) + 0.5f) * grid / size - 0.5f;
                const float cy = std::clamp(gy, 0.0f, static_cast<float>(grid - 1));
                const float cx = std::clamp(gx, 0.0f, static_cast<float>(grid - 1));
                const int y0 = static_cast<int>(cy), x0 = static_cast<int>(cx);
                const int y1 = std::min(y0 + 1, grid - 1), x1 = std::min(x0 + 1, grid - 1);
                const float ty = cy - static_cast<float>(y0), tx = cx - static_cast<float>(x0);
                for (int c = 0; c < 3; ++c) {
                    const float v00 = coarse[(static_cast<std::size_t>(y0) * grid + x0) * 3 + c];
                    const float v01 = coarse[(static_cast<std::size_t>(y0) * grid + x1) * 3 + c];
                    const float v10 = coarse[(static_cast<std::size_t>(y1) * grid + x0) * 3 + c];
                    const float v11 = coarse[(static_cast<std::size_t>(y1) * grid + x1) * 3 + c];
                    const float v = (1 - ty) * ((1 - tx) * v00 + tx * v01) +
                                    ty * ((1 - tx) * v10 + tx * v11);
                    img.rgb[(static_cast<std::size_t>(y) * size + x) * 3 + c] =
                        static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
                }
            }
        const int n_lines = 2 + static_cast<int>(unit(rng) * 3.0f);
        for (int l = 0; l < n_lines; ++l) {
            const float x0 = unit(rng) * (size - 1), y0 = unit(rng) * (size - 1);
            const float x1 = unit(rng) * (size - 1), y1 = unit(rng) * (size - 1);
            const std::uint8_t lr = static_cast<std::uint8_t>(30 + 170 * unit(rng));
            const std::uint8_t lg = static_cast<std::uint8_t>(30 + 170 * unit(rng));
            const std::uint8_t lb = static_cast<std::uint8_t>(30 + 170 * unit(rng));
            const int steps = 2 * size;
            for (int s = 0; s <= steps; ++s) {
                const float t = static_cast<float>(s) / steps;
                const int px = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
                const int py = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
                if (px < 0 || px >= size || py < 0 || py >= size) continue;
                std::uint8_t* q = &img.rgb[(static_cast<std::size_t>(py) * size + px) * 3];
                q[0] = lr; q[1] = lg; q[2] = lb;
            }
        }

        // Target shape, drawn last so clutter never occludes it.
        const float radius = size / 6.0f + unit(rng) * (size / 4.0f - size / 6.0f);
        const float margin = radius + 1.0f;
        const float cy = margin + unit(rng) * (size - 2.0f * margin);
        const float cx = margin + unit(rng) * (size - 2.0f * margin);
        const std::uint8_t sr = static_cast<std::uint8_t>(160 + 95 * unit(rng));
        const std::uint8_t sg = static_cast<std::uint8_t>(160 + 95 * unit(rng));
        const std::uint8_t sb = static_cast<std::uint8_t>(160 + 95 * unit(rng));
        const auto mask = shape_mask(size, label, cy, cx, radius);
        int bb_y0 = size, bb_y1 = -1, bb_x0 = size, bb_x1 = -1;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                if (mask[static_cast<std::size_t>(y) * size + x]) {
                    std::uint8_t* q = &img.rgb[(static_cast<std::size_t>(y) * size + x) * 3];
                    q[0] = sr; q[1] = sg; q[2] = sb;
                    bb_y0 = std::min(bb_y0, y); bb_y1 = std::max(bb_y1, y);
                    bb_x0 = std::min(bb_x0, x); bb_x1 = std::max(bb_x1, x);
                }
        if (bb_y1 < 0) throw std::logic_error("generate_shapes: empty shape mask");

        // Reference attention: blurred mask, renormalized so max is exactly 1.
        Heatmap hm;
        hm.height = size;
        hm.width = size;
        hm.values.resize(mask.size());
        for (std::size_t k = 0; k < mask.size(); ++k) hm.values[k] = mask[k] ? 1.0f : 0.0f;
        gaussian_blur(hm.values, size, size, static_cast<float>(size) / 32.0f);
        const float peak = *std::max_element(hm.values.begin(), hm.values.end());
        for (auto& v : hm.values) v /= peak;

        const auto argmax = static_cast<std::size_t>(
            std::max_element(hm.values.begin(), hm.values.end()) - hm.values.begin());
        const int ay = static_cast<int>(argmax) / size, ax = static_cast<int>(argmax) % size;
        if (ay < bb_y0 || ay > bb_y1 || ax < bb_x0 || ax > bb_x1)
            throw std::logic_error("generate_shapes: heatmap argmax escaped the shape bounding box");

        char img_name[32], hm_name[32];
        std::snprintf(img_name, sizeof img_name, "img_%05d.ppm", i);
        std::snprintf(hm_name, sizeof hm_name, "hm_%05d.pgm", i);
        write_ppm((fs::path(out_dir) / img_name).string(), img);
        write_pgm16((fs::path(out_dir) / hm_name).string(), hm);
        manifest << "{\"image\": \"" << img_name << "\", \"heatmap\": \"" << hm_name
                 << "\", \"label\": " << label << "}\n";
    }

    const std::string manifest_path = (fs::path(out_dir) / "manifest.jsonl").string();
    const std::string text = manifest.str();
    write_file(manifest_path, text.data(), text.size());
    return manifest_path;
}

}  // namespace dclscam
