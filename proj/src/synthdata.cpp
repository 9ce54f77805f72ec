#include "miaod/synthdata.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace miaod::synth {

namespace {

double quantize8(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return std::round(v * 255.0) / 255.0;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string label_text(const ImageSample& s) {
    std::string out;
    for (std::size_t i = 0; i < s.gt_boxes.size(); ++i) {
        const Box& b = s.gt_boxes[i];
        out += std::to_string(s.gt_classes[i]) + ' ' + fmt_double(b.x_min) + ' ' +
               fmt_double(b.y_min) + ' ' + fmt_double(b.x_max) + ' ' +
               fmt_double(b.y_max) + '\n';
    }
    return out;
}

std::uint64_t sample_checksum(const ImageSample& s) {
    std::uint64_t h = fnv1a64(encode_pgm(s.pixels, s.width, s.height));
    return fnv1a64(label_text(s), h);
}

std::string read_file(const std::filesystem::path& p, const std::string& what) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw io_error("missing " + what + ": " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

void SceneSpec::validate() const {
    auto fail = [](const std::string& m) { throw contract_error("scene spec: " + m); };
    if (image_size < 8) fail("image_size too small");
    if (classes.empty()) fail("at least one class required");
    if (objects_min < 0 || objects_max < objects_min) fail("bad objects_per_image range");
    if (object_size_min < 2 || object_size_max < object_size_min ||
        object_size_max > image_size)
        fail("bad object_size range");
    if (fg_min < 0.0 || fg_max > 1.0 || fg_max < fg_min)
        fail("foreground intensity outside [0,1]");
    if (bg_mean < 0.0 || bg_mean > 1.0 || bg_noise_std < 0.0) fail("bad background");
    if (min_center_separation < 0) fail("negative min_center_separation");
}

std::vector<int> derive_image_labels(const std::vector<int>& gt_classes,
                                     int num_classes) {
    std::vector<int> labels(static_cast<std::size_t>(num_classes), 0);
    for (int c : gt_classes) labels.at(static_cast<std::size_t>(c)) = 1;
    return labels;
}

std::vector<double> render_scene(const std::vector<SceneObject>& objects,
                                 const SceneSpec& spec, Rng& rng) {
    const int W = spec.image_size;
    std::vector<double> img(static_cast<std::size_t>(W) * W, spec.bg_mean);
    auto fill_rect = [&](int x0, int y0, int x1, int y1, double v) {
        for (int y = std::max(0, y0); y < std::min(W, y1); ++y)
            for (int x = std::max(0, x0); x < std::min(W, x1); ++x)
                img[static_cast<std::size_t>(y) * W + x] = v;
    };
    for (const SceneObject& o : objects) {
        switch (static_cast<ShapeKind>(o.class_index % 3)) {
        case ShapeKind::Square:
            fill_rect(o.x0, o.y0, o.x0 + o.size, o.y0 + o.size, o.intensity);
            break;
        case ShapeKind::Disc: {
            const double r = o.size / 2.0, cx = o.cx(), cy = o.cy();
            for (int y = o.y0; y < o.y0 + o.size; ++y)
                for (int x = o.x0; x < o.x0 + o.size; ++x) {
                    const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                    if (dx * dx + dy * dy <= r * r && y >= 0 && y < W && x >= 0 && x < W)
                        img[static_cast<std::size_t>(y) * W + x] = o.intensity;
                }
            break;
        }
        case ShapeKind::Cross: {
            const int w = std::max(2, o.size / 4);
            const int off = (o.size - w) / 2;
            fill_rect(o.x0, o.y0 + off, o.x0 + o.size, o.y0 + off + w, o.intensity);
            fill_rect(o.x0 + off, o.y0, o.x0 + off + w, o.y0 + o.size, o.intensity);
            break;
        }
        }
    }
    for (double& p : img)
        p = std::clamp(p + spec.bg_noise_std * rng.normal(), 0.0, 1.0);
    return img;
}

std::vector<ImageSample> generate_dataset(const SceneSpec& spec, int count,
                                          std::uint64_t seed) {
    spec.validate();
    if (count <= 0) throw contract_error("generate_dataset: count must be positive");
    const int C = spec.num_classes();
    std::vector<ImageSample> out(static_cast<std::size_t>(count));
    for (int idx = 0; idx < count; ++idx) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(idx)));
        const int n_obj = rng.uniform_int(spec.objects_min, spec.objects_max);
        std::vector<SceneObject> objects;
        for (int k = 0; k < n_obj; ++k) {
            SceneObject o;
            o.class_index = rng.uniform_int(0, C - 1);
            o.intensity = rng.uniform(spec.fg_min, spec.fg_max);
            bool placed = false;
            for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                o.size = rng.uniform_int(spec.object_size_min, spec.object_size_max);
                o.x0 = rng.uniform_int(0, spec.image_size - o.size);
                o.y0 = rng.uniform_int(0, spec.image_size - o.size);
                placed = true;
                for (const SceneObject& prev : objects) {
                    const double dx = o.cx() - prev.cx(), dy = o.cy() - prev.cy();
                    if (dx * dx + dy * dy <
                        static_cast<double>(spec.min_center_separation) *
                            spec.min_center_separation) {
                        placed = false;
                        break;
                    }
                }
            }
            if (!placed)
                throw contract_error("generate_dataset: cannot place object in sample " +
                                     std::to_string(idx));
            objects.push_back(o);
        }

        ImageSample& s = out[static_cast<std::size_t>(idx)];
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "%06d", idx);
        s.id = idbuf;
        s.width = s.height = spec.image_size;
        s.pixels = render_scene(objects, spec, rng);
        for (double& p : s.pixels) p = quantize8(p);
        for (const SceneObject& o : objects) {
            s.gt_boxes.push_back(o.box());
            s.gt_classes.push_back(o.class_index);
        }
        s.image_labels = derive_image_labels(s.gt_classes, C);
    }
    return out;
}

std::string encode_pgm(const std::vector<double>& pixels, int width, int height) {
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) +
                      "\n255\n";
    out.reserve(out.size() + pixels.size());
    for (double p : pixels)
        out.push_back(static_cast<char>(
            static_cast<unsigned char>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0))));
    return out;
}

std::uint64_t dataset_checksum(const Dataset& ds) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const ImageSample& s : ds.samples) {
        h = fnv1a64(encode_pgm(s.pixels, s.width, s.height), h);
        h = fnv1a64(label_text(s), h);
    }
    return h;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ostringstream man;
    const SceneSpec& sp = ds.spec;
    man << "# miaod-dataset v1\n";
    man << "image_size " << sp.image_size << '\n';
    man << "classes ";
    for (std::size_t i = 0; i < sp.classes.size(); ++i)
        man << (i ? "," : "") << sp.classes[i];
    man << '\n';
    man << "objects_per_image " << sp.objects_min << ' ' << sp.objects_max << '\n';
    man << "object_size " << sp.object_size_min << ' ' << sp.object_size_max << '\n';
    man << "foreground_intensity " << fmt_double(sp.fg_min) << ' '
        << fmt_double(sp.fg_max) << '\n';
    man << "background " << fmt_double(sp.bg_mean) << ' '
        << fmt_double(sp.bg_noise_std) << '\n';
    man << "min_center_separation " << sp.min_center_separation << '\n';
    man << "seed " << ds.seed << '\n';
    man << "count " << ds.samples.size() << '\n';

    for (const ImageSample& s : ds.samples) {
        char hex[24];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(sample_checksum(s)));
        man << "sample " << s.id << ' ' << hex << '\n';
        std::ofstream img(dir / ("img_" + s.id + ".pgm"), std::ios::binary);
        img << encode_pgm(s.pixels, s.width, s.height);
        if (!img) throw io_error("failed writing image " + s.id);
        std::ofstream lab(dir / ("lab_" + s.id + ".txt"), std::ios::binary);
        lab << label_text(s);
        if (!lab) throw io_error("failed writing labels " + s.id);
    }
    std::ofstream mf(dir / "manifest.txt", std::ios::binary);
    mf << man.str();
    if (!mf) throw io_error("failed writing manifest");
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::istringstream man(read_file(dir / "manifest.txt", "manifest"));
    Dataset ds;
    std::vector<std::pair<std::string, std::uint64_t>> entries;
    std::size_t declared_count = 0;
    std::string line;
    while (std::getline(man, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        SceneSpec& sp = ds.spec;
        if (key == "image_size") ls >> sp.image_size;
        else if (key == "classes") {
            std::string list;
            ls >> list;
            sp.classes.clear();
            std::istringstream cs(list);
            std::string c;
            while (std::getline(cs, c, ',')) sp.classes.push_back(c);
        } else if (key == "objects_per_image") ls >> sp.objects_min >> sp.objects_max;
        else if (key == "object_size") ls >> sp.object_size_min >> sp.object_size_max;
        else if (key == "foreground_intensity") ls >> sp.fg_min >> sp.fg_max;
        else if (key == "background") ls >> sp.bg_mean >> sp.bg_noise_std;
        else if (key == "min_center_separation") ls >> sp.min_center_separation;
        else if (key == "seed") ls >> ds.seed;
        else if (key == "count") ls >> declared_count;
        else if (key == "sample") {
            std::string id, hex;
            ls >> id >> hex;
            entries.emplace_back(id, std::stoull(hex, nullptr, 16));
        } else throw io_error("manifest: unknown key '" + key + "'");
        if (!ls) throw io_error("manifest: malformed line '" + line + "'");
    }
    if (entries.size() != declared_count)
        throw io_error("manifest: count " + std::to_string(declared_count) +
                       " does not match " + std::to_string(entries.size()) +
                       " sample records");
    ds.spec.validate();
    const int C = ds.spec.num_classes();

    for (const auto& [id, checksum] : entries) {
        const std::string pgm = read_file(dir / ("img_" + id + ".pgm"), "image " + id);
        const std::string lab = read_file(dir / ("lab_" + id + ".txt"), "labels " + id);
        if (fnv1a64(lab, fnv1a64(pgm)) != checksum)
            throw io_error("checksum mismatch for sample " + id);

        ImageSample s;
        s.id = id;
        std::istringstream ps(pgm);
        std::string magic;
        int maxval = 0;
        ps >> magic >> s.width >> s.height >> maxval;
        if (magic != "P5" || maxval != 255 || s.width <= 0 || s.height <= 0)
            throw io_error("bad PGM header for sample " + id);
        ps.get();  // single whitespace after header
        std::vector<char> raw(static_cast<std::size_t>(s.width) * s.height);
        ps.read(raw.data(), static_cast<std::streamsize>(raw.size()));
        if (ps.gcount() != static_cast<std::streamsize>(raw.size()))
            throw io_error("truncated PGM for sample " + id);
        s.pixels.resize(raw.size());
        for (std::size_t i = 0; i < raw.size(); ++i)
            s.pixels[i] = static_cast<unsigned char>(raw[i]) / 255.0;

        std::istringstream lst(lab);
        std::string lline;
        while (std::getline(lst, lline)) {
            if (lline.empty()) continue;
            std::istringstream fs(lline);
            int cls;
            Box b;
            fs >> cls >> b.x_min >> b.y_min >> b.x_max >> b.y_max;
            if (!fs) throw io_error("bad label line in sample " + id);
            s.gt_classes.push_back(cls);
            s.gt_boxes.push_back(b);
        }
        s.image_labels = derive_image_labels(s.gt_classes, C);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace miaod::synth
