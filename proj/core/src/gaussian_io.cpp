#include "worldkit/gaussian_io.hpp"

#include "worldkit/binary_io.hpp"
#include "worldkit/error.hpp"

#include <json.hpp>

#include <fstream>

namespace worldkit {

using nlohmann::json;

void write_gaussian_set(std::ostream &out, const GaussianSet &set) {
    io::write_magic(out, "GSET");
    io::write_u32(out, kGaussianSetVersion);
    io::write_u32(out, static_cast<std::uint32_t>(set.size()));
    io::write_u32(out, static_cast<std::uint32_t>(set.class_count()));
    io::write_u32(out, static_cast<std::uint32_t>(set.feature_dim()));
    for (const Gaussian &g : set) {
        for (int i = 0; i < 3; ++i) io::write_f32(out, g.mean[i]);
        const Vec3 s = g.scale();
        for (int i = 0; i < 3; ++i) io::write_f32(out, s[i]);
        const Vec4 q = g.rotation.coeffs();
        for (int i = 0; i < 4; ++i) io::write_f32(out, q[i]);
        io::write_f32(out, g.opacity());
        for (Eigen::Index i = 0; i < g.logits.size(); ++i) io::write_f32(out, g.logits[i]);
        for (Eigen::Index i = 0; i < g.feature.size(); ++i) io::write_f32(out, g.feature[i]);
    }
}

GaussianSet read_gaussian_set(std::istream &in) {
    io::expect_magic(in, "GSET");
    const std::uint32_t version = io::read_u32(in);
    if (version != kGaussianSetVersion) {
        throw FormatError("unsupported GSET version " + std::to_string(version));
    }
    const std::uint32_t k = io::read_u32(in);
    const std::uint32_t c = io::read_u32(in);
    const std::uint32_t d = io::read_u32(in);
    if (c == 0 || d == 0) {
        throw FormatError("GSET header has zero class count or feature width");
    }
    GaussianSet set(static_cast<int>(c), static_cast<int>(d));
    set.reserve(k);
    for (std::uint32_t n = 0; n < k; ++n) {
        Vec3 mean, scale;
        for (int i = 0; i < 3; ++i) mean[i] = io::read_f32(in);
        for (int i = 0; i < 3; ++i) scale[i] = io::read_f32(in);
        double q[4];
        for (double &v : q) v = io::read_f32(in);
        const double opacity = io::read_f32(in);
        VecX logits(c), feature(d);
        for (std::uint32_t i = 0; i < c; ++i) logits[i] = io::read_f32(in);
        for (std::uint32_t i = 0; i < d; ++i) feature[i] = io::read_f32(in);
        set.add(Gaussian::make(mean, scale, Quaternion(q[0], q[1], q[2], q[3]), opacity, std::move(logits),
                               std::move(feature)));
    }
    return set;
}

void save_gaussian_set(const std::filesystem::path &path, const GaussianSet &set) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot open " + path.string() + " for writing");
    }
    write_gaussian_set(out, set);
}

GaussianSet load_gaussian_set(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    return read_gaussian_set(in);
}

namespace {

json vec_to_json(const Eigen::Ref<const VecX> &v) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

VecX vec_from_json(const json &arr, Eigen::Index expected, const char *field) {
    if (!arr.is_array() || static_cast<Eigen::Index>(arr.size()) != expected) {
        throw FormatError(std::string("field \"") + field + "\" has the wrong length");
    }
    VecX v(expected);
    for (Eigen::Index i = 0; i < expected; ++i) v[i] = arr[static_cast<std::size_t>(i)].get<double>();
    return v;
}

} // namespace

std::string gaussian_set_to_json(const GaussianSet &set) {
    json doc;
    doc["format"] = "GSET";
    doc["version"] = kGaussianSetVersion;
    doc["class_count"] = set.class_count();
    doc["feature_dim"] = set.feature_dim();
    json list = json::array();
    for (const Gaussian &g : set) {
        json item;
        item["mean"] = vec_to_json(g.mean);
        item["scale"] = vec_to_json(g.scale());
        item["rotation"] = vec_to_json(g.rotation.coeffs());
        item["opacity"] = g.opacity();
        item["logits"] = vec_to_json(g.logits);
        item["feature"] = vec_to_json(g.feature);
        // Unconstrained storage, kept so the mirror is bit-exact.
        item["log_scale"] = vec_to_json(g.log_scale);
        item["opacity_logit"] = g.opacity_logit;
        list.push_back(std::move(item));
    }
    doc["gaussians"] = std::move(list);
    return doc.dump(2);
}

GaussianSet gaussian_set_from_json(const std::string &text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error &e) {
        throw FormatError(std::string("GSET json: ") + e.what());
    }
    if (doc.value("format", "") != "GSET" || doc.value("version", 0u) != kGaussianSetVersion) {
        throw FormatError("not a GSET v1 json document");
    }
    const int c = doc.at("class_count").get<int>();
    const int d = doc.at("feature_dim").get<int>();
    GaussianSet set(c, d);
    for (const json &item : doc.at("gaussians")) {
        Gaussian g;
        g.mean = vec_from_json(item.at("mean"), 3, "mean");
        g.log_scale = vec_from_json(item.at("log_scale"), 3, "log_scale");
        const VecX q = vec_from_json(item.at("rotation"), 4, "rotation");
        g.rotation = Quaternion(q[0], q[1], q[2], q[3]);
        g.opacity_logit = item.at("opacity_logit").get<double>();
        g.logits = vec_from_json(item.at("logits"), c, "logits");
        g.feature = vec_from_json(item.at("feature"), d, "feature");
        set.add(std::move(g));
    }
    return set;
}

} // namespace worldkit
