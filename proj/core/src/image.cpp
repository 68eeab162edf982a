#include "worldkit/image.hpp"

#include "worldkit/binary_io.hpp"
#include "worldkit/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace worldkit {

int SemanticImage::argmax(std::size_t pixel) const {
    const double *row = logits.data() + pixel * classes;
    return static_cast<int>(std::max_element(row, row + classes) - row);
}

Rgb palette_color(int class_id) {
    static constexpr std::array<Rgb, 8> kTable{{
        {0, 0, 0},
        {128, 64, 128},
        {70, 130, 180},
        {220, 20, 60},
        {250, 170, 30},
        {107, 142, 35},
        {152, 251, 152},
        {255, 255, 255},
    }};
    return kTable[static_cast<std::size_t>(std::abs(class_id)) % kTable.size()];
}

void write_palette(const std::filesystem::path &path, int class_count) {
    std::ofstream out(path);
    out << "# class r g b\n";
    for (int c = 0; c < class_count; ++c) {
        const Rgb rgb = palette_color(c);
        out << c << ' ' << int(rgb[0]) << ' ' << int(rgb[1]) << ' ' << int(rgb[2]) << '\n';
    }
}

void write_depth_pgm(const std::filesystem::path &path, const DepthImage &image, double max_depth) {
    if (!(max_depth > 0.0)) {
        throw InvalidParameter("PGM max depth must be positive");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string());
    out << "P5\n" << image.width << ' ' << image.height << "\n65535\n";
    for (std::size_t i = 0; i < image.pixels(); ++i) {
        std::uint16_t v = 0;
        if (image.valid[i]) {
            const double scaled = std::clamp(image.depth[i] / max_depth, 0.0, 1.0) * 65535.0;
            v = static_cast<std::uint16_t>(std::lround(scaled));
        }
        // PGM stores 16-bit samples most-significant byte first.
        const char bytes[2] = {static_cast<char>(v >> 8), static_cast<char>(v & 0xff)};
        out.write(bytes, 2);
    }
}

void write_label_ppm(const std::filesystem::path &path, int width, int height, const std::vector<int> &labels,
                     const Mask &valid) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string());
    out << "P6\n" << width << ' ' << height << "\n255\n";
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const Rgb rgb = valid[i] ? palette_color(labels[i]) : Rgb{0, 0, 0};
        out.write(reinterpret_cast<const char *>(rgb.data()), 3);
    }
}

void write_raw_grid(std::ostream &out, int width, int height, int channels, const std::vector<double> &values) {
    if (values.size() != std::size_t(width) * height * channels) {
        throw InvalidParameter("raw grid value count does not match its dimensions");
    }
    io::write_magic(out, "IMGF");
    io::write_u32(out, 1);
    io::write_u32(out, static_cast<std::uint32_t>(width));
    io::write_u32(out, static_cast<std::uint32_t>(height));
    io::write_u32(out, static_cast<std::uint32_t>(channels));
    for (double v : values) io::write_f32(out, v);
}

RawGrid read_raw_grid(std::istream &in) {
    io::expect_magic(in, "IMGF");
    if (io::read_u32(in) != 1) throw FormatError("unsupported IMGF version");
    RawGrid g;
    g.width = static_cast<int>(io::read_u32(in));
    g.height = static_cast<int>(io::read_u32(in));
    g.channels = static_cast<int>(io::read_u32(in));
    g.values.resize(std::size_t(g.width) * g.height * g.channels);
    for (double &v : g.values) v = io::read_f32(in);
    return g;
}

void save_depth_raw(const std::filesystem::path &path, const DepthImage &image) {
    std::vector<double> values(image.pixels() * 2);
    for (std::size_t i = 0; i < image.pixels(); ++i) {
        values[2 * i] = image.depth[i];
        values[2 * i + 1] = image.valid[i] ? 1.0 : 0.0;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string());
    write_raw_grid(out, image.width, image.height, 2, values);
}

DepthImage load_depth_raw(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    const RawGrid g = read_raw_grid(in);
    if (g.channels != 2) throw FormatError("depth grid must have 2 channels");
    DepthImage image(g.width, g.height);
    for (std::size_t i = 0; i < image.pixels(); ++i) {
        image.depth[i] = g.values[2 * i];
        image.valid[i] = g.values[2 * i + 1] != 0.0;
    }
    return image;
}

} // namespace worldkit
