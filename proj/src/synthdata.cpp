#include "pmtl/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "pmtl/rng.hpp"

namespace fs = std::filesystem;

namespace pmtl {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t h = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ull;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebull;
    h ^= h >> 31;
    return h;
}

std::string sample_dir(const std::string& root, Split split, int idx) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", idx);
    return root + "/" + (split == Split::Train ? "train" : "test") + "/" + buf;
}

void write_bytes(const std::string& path, const void* data, std::size_t bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!f) throw IoError("write failed: " + path);
}

void write_f32(const std::string& path, const std::vector<float>& v) {
    write_bytes(path, v.data(), v.size() * sizeof(float));
}

void write_i32(const std::string& path, const std::vector<std::int32_t>& v) {
    write_bytes(path, v.data(), v.size() * sizeof(std::int32_t));
}

std::vector<char> read_exact(const std::string& path, std::size_t bytes, int sample_idx) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("sample " + std::to_string(sample_idx) + ": missing file " + path);
    std::vector<char> buf(bytes);
    f.read(buf.data(), static_cast<std::streamsize>(bytes));
    if (f.gcount() != static_cast<std::streamsize>(bytes)) {
        throw IoError("sample " + std::to_string(sample_idx) + ": truncated file " + path +
                      " (expected " + std::to_string(bytes) + " bytes, got " +
                      std::to_string(f.gcount()) + ")");
    }
    char extra;
    f.read(&extra, 1);
    if (f.gcount() != 0) {
        throw IoError("sample " + std::to_string(sample_idx) + ": oversized file " + path);
    }
    return buf;
}

std::vector<TaskDescriptor> build_task_list(int n_tasks, int seg_classes) {
    check(n_tasks >= 2 && n_tasks <= 5, "task count must be in [2,5], got " +
                                            std::to_string(n_tasks));
    check(seg_classes >= 2 && seg_classes <= 4,
          "segmentation classes must be in [2,4], got " + std::to_string(seg_classes));
    std::vector<TaskDescriptor> all = {
        {0, TaskKind::Categorical, 1, seg_classes, "segmentation"},
        {1, TaskKind::Regression, 1, 0, "depth"},
        {2, TaskKind::Regression, 3, 0, "normal"},
        {3, TaskKind::Categorical, 1, 2, "saliency"},
        {4, TaskKind::Categorical, 1, 2, "boundary"},
    };
    all.resize(static_cast<std::size_t>(n_tasks));
    return all;
}

// A primitive is a planar patch: class id from its kind, depth from a tilted
// plane confined to a private depth band, normal from the plane orientation.
struct Primitive {
    int kind = 1;  // 1 rect, 2 ellipse, 3 triangle
    Scalar cx = 0, cy = 0;
    Scalar rx = 0, ry = 0;
    Scalar base_depth = 0;
    Scalar slope_x = 0, slope_y = 0;  // physical gradient, drives the normal
    Scalar px_scale = 0;              // shrinks the gradient into the depth band
    Scalar nx = 0, ny = 0, nz = 1;
    Scalar color[3] = {0, 0, 0};
    int tri_orient = 0;

    bool contains(Scalar x, Scalar y) const {
        const Scalar dx = x - cx, dy = y - cy;
        switch (kind) {
            case 1:
                return std::abs(dx) <= rx && std::abs(dy) <= ry;
            case 2:
                return (dx * dx) / (rx * rx) + (dy * dy) / (ry * ry) <= 1;
            default: {
                // Right isoceles triangle in one of four orientations.
                if (std::abs(dx) > rx || std::abs(dy) > ry) return false;
                const Scalar u = dx / rx, v = dy / ry;
                switch (tri_orient) {
                    case 0: return v >= u;
                    case 1: return v >= -u;
                    case 2: return v <= u;
                    default: return v <= -u;
                }
            }
        }
    }

    Scalar depth_at(Scalar x, Scalar y) const {
        return base_depth + (slope_x * (x - cx) + slope_y * (y - cy)) * px_scale;
    }
};

struct Scene {
    std::vector<Primitive> shapes;
    Scalar bg_depth = 1.0;
};

Scene make_scene(const GenConfig& cfg, Rng& rng) {
    Scene scene;
    const int n = cfg.n_shapes;
    if (n == 0) return scene;
    const Scalar band = Scalar(1) / (n + 1);
    const int n_kinds = cfg.seg_classes - 1;

    // Distinct kinds while they last, so class boundaries and shape
    // boundaries coincide in scenes with few shapes.
    std::vector<int> kinds(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) kinds[static_cast<std::size_t>(j)] = j % n_kinds + 1;
    rng.shuffle(kinds);
    std::vector<int> bands(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) bands[static_cast<std::size_t>(j)] = j;
    rng.shuffle(bands);

    const Scalar extent = static_cast<Scalar>(std::min(cfg.height, cfg.width));
    for (int j = 0; j < n; ++j) {
        Primitive p;
        p.kind = kinds[static_cast<std::size_t>(j)];
        p.cx = rng.uniform(0.2, 0.8) * cfg.width;
        p.cy = rng.uniform(0.2, 0.8) * cfg.height;
        p.rx = rng.uniform(0.16, 0.30) * extent;
        p.ry = rng.uniform(0.16, 0.30) * extent;
        p.tri_orient = static_cast<int>(rng.uniform_int(4));
        p.base_depth = (bands[static_cast<std::size_t>(j)] + 1) * band;

        const Scalar tilt = rng.uniform(0.0, 1.1);  // tan of the tilt angle
        const Scalar theta = rng.uniform(0.0, 2 * M_PI);
        p.slope_x = tilt * std::cos(theta);
        p.slope_y = tilt * std::sin(theta);
        const Scalar inv_len = Scalar(1) / std::sqrt(1 + tilt * tilt);
        p.nx = -p.slope_x * inv_len;
        p.ny = -p.slope_y * inv_len;
        p.nz = inv_len;
        // Keep the plane inside a quarter of its band across the shape extent.
        const Scalar radius = std::max(p.rx, p.ry) * Scalar(1.5);
        p.px_scale = Scalar(0.25) * band / (radius * std::max(Scalar(1), tilt));

        for (int c = 0; c < 3; ++c) p.color[c] = rng.uniform(0.15, 0.95);
        scene.shapes.push_back(p);
    }
    return scene;
}

struct RenderedSample {
    std::vector<float> image;    // [3,H,W]
    std::vector<std::int32_t> seg;
    std::vector<float> depth;    // [1,H,W]
    std::vector<float> normal;   // [3,H,W]
    std::vector<std::int32_t> saliency;
    std::vector<std::int32_t> boundary;
};

RenderedSample render(const GenConfig& cfg, const Scene& scene, Rng& rng) {
    const int H = cfg.height, W = cfg.width;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    RenderedSample out;
    out.image.assign(3 * hw, 0.f);
    out.seg.assign(hw, 0);
    out.depth.assign(hw, 0.f);
    out.normal.assign(3 * hw, 0.f);

    const Scalar lx = 0.42, ly = -0.3, lz = 0.855;  // unit-ish light direction
    const Scalar lnorm = std::sqrt(lx * lx + ly * ly + lz * lz);

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * W + x;
            const Primitive* hit = nullptr;
            Scalar depth = scene.bg_depth;
            for (const Primitive& s : scene.shapes) {
                if (!s.contains(x + Scalar(0.5), y + Scalar(0.5))) continue;
                const Scalar d = s.depth_at(x + Scalar(0.5), y + Scalar(0.5));
                if (d < depth) {
                    depth = d;
                    hit = &s;
                }
            }
            Scalar nx = 0, ny = 0, nz = 1;
            Scalar color[3] = {0.55, 0.55, 0.55};
            int cls = 0;
            if (hit != nullptr) {
                nx = hit->nx;
                ny = hit->ny;
                nz = hit->nz;
                for (int c = 0; c < 3; ++c) color[c] = hit->color[c];
                cls = hit->kind;
            }
            const Scalar lambert = (nx * lx + ny * ly + nz * lz) / lnorm;
            const Scalar shade = std::clamp(lambert, Scalar(0.25), Scalar(1.0));
            const Scalar atten = Scalar(1) - Scalar(0.45) * depth;
            for (int c = 0; c < 3; ++c) {
                Scalar v = color[c] * shade * atten + rng.uniform(-0.02, 0.02);
                out.image[static_cast<std::size_t>(c) * hw + p] =
                    static_cast<float>(std::clamp(v, Scalar(0), Scalar(1)));
            }
            out.seg[p] = cls;
            out.depth[p] = static_cast<float>(depth);
            // Renormalize after the float32 round-trip stays within 1e-5 of 1.
            out.normal[p] = static_cast<float>(nx);
            out.normal[hw + p] = static_cast<float>(ny);
            out.normal[2 * hw + p] = static_cast<float>(nz);
        }
    }
    if (cfg.n_tasks >= 4) {
        out.saliency.assign(hw, 0);
        for (std::size_t p = 0; p < hw; ++p) out.saliency[p] = out.seg[p] > 0 ? 1 : 0;
    }
    if (cfg.n_tasks >= 5) {
        out.boundary.assign(hw, 0);
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * W + x;
                const std::int32_t c = out.seg[p];
                const bool edge =
                    (x + 1 < W && out.seg[p + 1] != c) || (x > 0 && out.seg[p - 1] != c) ||
                    (y + 1 < H && out.seg[p + static_cast<std::size_t>(W)] != c) ||
                    (y > 0 && out.seg[p - static_cast<std::size_t>(W)] != c);
                out.boundary[p] = edge ? 1 : 0;
            }
        }
    }
    return out;
}

void write_sample(const std::string& dir, const GenConfig& cfg,
                  const std::vector<TaskDescriptor>& tasks, const RenderedSample& s) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create sample directory " + dir + ": " + ec.message());

    std::ostringstream header;
    header << "image = f32 3 " << cfg.height << ' ' << cfg.width << '\n';
    write_f32(dir + "/image.bin", s.image);
    for (const TaskDescriptor& t : tasks) {
        const std::string path = dir + "/task" + std::to_string(t.id) + ".bin";
        if (t.kind == TaskKind::Categorical) {
            header << "task" << t.id << " = i32 " << cfg.height << ' ' << cfg.width << '\n';
            if (t.name == "segmentation") write_i32(path, s.seg);
            else if (t.name == "saliency") write_i32(path, s.saliency);
            else write_i32(path, s.boundary);
        } else {
            header << "task" << t.id << " = f32 " << t.channels << ' ' << cfg.height << ' '
                   << cfg.width << '\n';
            if (t.name == "depth") write_f32(path, s.depth);
            else write_f32(path, s.normal);
        }
    }
    std::ofstream hf(dir + "/header.txt", std::ios::trunc);
    if (!hf) throw IoError("cannot write header in " + dir);
    hf << header.str();
}

std::vector<std::vector<std::uint8_t>> make_masks(int n_samples, int n_tasks,
                                                  LabelProtocol protocol, int max_labels,
                                                  std::uint64_t seed) {
    check(n_tasks >= 2, "label protocols need at least 2 tasks");
    if (protocol == LabelProtocol::RandomLabel) {
        check(max_labels >= 1 && max_labels <= n_tasks,
              "max_labels must be in [1,T], got " + std::to_string(max_labels));
    }
    Rng rng(mix_seed(seed, 0x6d61736bull));  // dedicated mask stream
    std::vector<std::vector<std::uint8_t>> masks(
        static_cast<std::size_t>(n_samples),
        std::vector<std::uint8_t>(static_cast<std::size_t>(n_tasks), 0));
    for (auto& mask : masks) {
        switch (protocol) {
            case LabelProtocol::OneLabel:
                mask[rng.uniform_int(static_cast<std::uint64_t>(n_tasks))] = 1;
                break;
            case LabelProtocol::RandomLabel: {
                // Uniform cardinality in [1, max_labels], then a uniform
                // subset of that size via partial Fisher-Yates.
                const int k =
                    1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_labels)));
                std::vector<int> ids(static_cast<std::size_t>(n_tasks));
                for (int t = 0; t < n_tasks; ++t) ids[static_cast<std::size_t>(t)] = t;
                for (int i = 0; i < k; ++i) {
                    const int j = i + static_cast<int>(rng.uniform_int(
                                          static_cast<std::uint64_t>(n_tasks - i)));
                    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
                    mask[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])] = 1;
                }
                break;
            }
            case LabelProtocol::Full:
                std::fill(mask.begin(), mask.end(), std::uint8_t(1));
                break;
        }
    }
    return masks;
}

}  // namespace

std::string protocol_name(LabelProtocol p) {
    switch (p) {
        case LabelProtocol::OneLabel: return "one-label";
        case LabelProtocol::RandomLabel: return "random-label";
        default: return "full";
    }
}

LabelProtocol protocol_from_name(const std::string& s) {
    if (s == "one-label") return LabelProtocol::OneLabel;
    if (s == "random-label") return LabelProtocol::RandomLabel;
    if (s == "full") return LabelProtocol::Full;
    throw ValidationError("unknown label protocol: " + s);
}

void DatasetManifest::save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write manifest: " + path);
    f << "format_version = 1\n";
    f << "train_count = " << train_count << '\n';
    f << "test_count = " << test_count << '\n';
    f << "height = " << height << '\n';
    f << "width = " << width << '\n';
    f << "n_tasks = " << tasks.size() << '\n';
    f << "protocol = " << protocol_name(protocol) << '\n';
    f << "max_labels = " << max_labels << '\n';
    f << "seed = " << seed << '\n';
    for (const TaskDescriptor& t : tasks) {
        f << "task" << t.id << " = "
          << (t.kind == TaskKind::Categorical ? "categorical" : "regression") << ' ' << t.channels
          << ' ' << t.class_count << ' ' << t.name << '\n';
    }
    auto dump_masks = [&f](const char* prefix, const std::vector<std::vector<std::uint8_t>>& ms) {
        for (std::size_t i = 0; i < ms.size(); ++i) {
            f << prefix << i << " = ";
            for (std::uint8_t b : ms[i]) f << (b ? '1' : '0');
            f << '\n';
        }
    };
    dump_masks("train_mask_", train_masks);
    dump_masks("test_mask_", test_masks);
    if (!f) throw IoError("write failed: " + path);
}

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ValidationError("manifest: malformed line: " + line);
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        auto trim = [](std::string& s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t\r");
            s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
        };
        trim(key);
        trim(val);
        kv[key] = val;
    }
    auto need = [&kv, &path](const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw ValidationError("manifest " + path + ": missing key " + key);
        return it->second;
    };
    DatasetManifest m;
    m.root = fs::path(path).parent_path().string();
    if (m.root.empty()) m.root = ".";
    check(need("format_version") == "1", "manifest: unsupported format_version");
    m.train_count = std::stoi(need("train_count"));
    m.test_count = std::stoi(need("test_count"));
    m.height = std::stoi(need("height"));
    m.width = std::stoi(need("width"));
    m.protocol = protocol_from_name(need("protocol"));
    m.max_labels = std::stoi(need("max_labels"));
    m.seed = std::stoull(need("seed"));
    const int n_tasks = std::stoi(need("n_tasks"));
    for (int t = 0; t < n_tasks; ++t) {
        std::istringstream is(need("task" + std::to_string(t)));
        std::string kind;
        TaskDescriptor d;
        d.id = t;
        is >> kind >> d.channels >> d.class_count >> d.name;
        if (!is) throw ValidationError("manifest: malformed task descriptor " + std::to_string(t));
        d.kind = kind == "categorical" ? TaskKind::Categorical : TaskKind::Regression;
        m.tasks.push_back(d);
    }
    auto read_masks = [&](const char* prefix, int count) {
        std::vector<std::vector<std::uint8_t>> ms;
        for (int i = 0; i < count; ++i) {
            const std::string s = need(prefix + std::to_string(i));
            check(static_cast<int>(s.size()) == n_tasks, "manifest: bad mask width");
            std::vector<std::uint8_t> mask;
            for (char c : s) mask.push_back(c == '1');
            ms.push_back(std::move(mask));
        }
        return ms;
    };
    m.train_masks = read_masks("train_mask_", m.train_count);
    m.test_masks = read_masks("test_mask_", m.test_count);
    return m;
}

DatasetManifest generate_dataset(const GenConfig& cfg) {
    check(cfg.height >= 16 && cfg.width >= 16,
          "image size must be at least 16x16, got " + std::to_string(cfg.height) + "x" +
              std::to_string(cfg.width));
    check(cfg.n_train >= 1, "need at least one training sample");
    check(cfg.n_test >= 0, "negative test count");
    check(cfg.n_shapes >= 0, "negative shape count");
    check(!cfg.out_dir.empty(), "output directory not set");

    DatasetManifest m;
    m.root = cfg.out_dir;
    m.train_count = cfg.n_train;
    m.test_count = cfg.n_test;
    m.height = cfg.height;
    m.width = cfg.width;
    m.tasks = build_task_list(cfg.n_tasks, cfg.seg_classes);
    m.protocol = cfg.protocol;
    m.max_labels = cfg.protocol == LabelProtocol::RandomLabel ? cfg.max_labels : 1;
    m.seed = cfg.seed;

    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + cfg.out_dir + ": " + ec.message());

    for (int split_id = 0; split_id < 2; ++split_id) {
        const Split split = split_id == 0 ? Split::Train : Split::Test;
        const int count = split == Split::Train ? cfg.n_train : cfg.n_test;
        for (int i = 0; i < count; ++i) {
            Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(split_id) * 0x10000000ull +
                                           static_cast<std::uint64_t>(i)));
            const Scene scene = make_scene(cfg, rng);
            const RenderedSample s = render(cfg, scene, rng);
            write_sample(sample_dir(cfg.out_dir, split, i), cfg, m.tasks, s);
        }
    }

    m.train_masks = make_masks(cfg.n_train, m.task_count(), cfg.protocol, m.max_labels, cfg.seed);
    m.test_masks = make_masks(cfg.n_test, m.task_count(), LabelProtocol::Full, 1, cfg.seed);
    m.save(cfg.out_dir + "/manifest.txt");
    return m;
}

DatasetManifest assign_labels(const DatasetManifest& manifest, LabelProtocol protocol,
                              int max_labels, std::uint64_t seed, bool persist) {
    check(manifest.task_count() >= 2, "assign_labels: need at least 2 tasks");
    DatasetManifest m = manifest;
    m.protocol = protocol;
    m.max_labels = protocol == LabelProtocol::RandomLabel ? max_labels : 1;
    m.seed = seed;
    m.train_masks = make_masks(m.train_count, m.task_count(), protocol, m.max_labels, seed);
    if (persist) m.save(m.root + "/manifest.txt");
    return m;
}

PartialLabelBatch load_batch(const DatasetManifest& manifest, const std::vector<int>& indices,
                             Split split) {
    const int B = static_cast<int>(indices.size());
    check(B >= 1, "load_batch: empty index list");
    const int H = manifest.height, W = manifest.width;
    const int limit = manifest.count(split);
    const std::size_t hw = static_cast<std::size_t>(H) * W;

    PartialLabelBatch batch;
    batch.indices = indices;
    batch.images = Tensor({B, 3, H, W});
    for (const TaskDescriptor& t : manifest.tasks) {
        TaskLabels tl;
        tl.task = t;
        if (t.kind == TaskKind::Categorical) {
            tl.class_map = IntTensor({B, H, W});
        } else {
            tl.values = Tensor({B, t.channels, H, W});
        }
        tl.present.assign(static_cast<std::size_t>(B), 0);
        batch.labels.push_back(std::move(tl));
    }

    const auto& masks = manifest.masks(split);
    for (int bi = 0; bi < B; ++bi) {
        const int idx = indices[static_cast<std::size_t>(bi)];
        check(idx >= 0 && idx < limit,
              "load_batch: index " + std::to_string(idx) + " out of range [0," +
                  std::to_string(limit) + ")");
        const std::string dir = sample_dir(manifest.root, split, idx);

        const auto img = read_exact(dir + "/image.bin", 3 * hw * sizeof(float), idx);
        const float* fp = reinterpret_cast<const float*>(img.data());
        Scalar* dst = batch.images.data() + static_cast<std::int64_t>(bi) * 3 * hw;
        for (std::size_t i = 0; i < 3 * hw; ++i) dst[i] = static_cast<Scalar>(fp[i]);

        for (std::size_t ti = 0; ti < manifest.tasks.size(); ++ti) {
            if (!masks[static_cast<std::size_t>(idx)][ti]) continue;
            const TaskDescriptor& t = manifest.tasks[ti];
            TaskLabels& tl = batch.labels[ti];
            tl.present[static_cast<std::size_t>(bi)] = 1;
            const std::string path = dir + "/task" + std::to_string(t.id) + ".bin";
            if (t.kind == TaskKind::Categorical) {
                const auto raw = read_exact(path, hw * sizeof(std::int32_t), idx);
                const std::int32_t* ip = reinterpret_cast<const std::int32_t*>(raw.data());
                std::copy_n(ip, hw, tl.class_map.data.begin() +
                                        static_cast<std::int64_t>(bi) * static_cast<std::int64_t>(hw));
            } else {
                const std::size_t n = static_cast<std::size_t>(t.channels) * hw;
                const auto raw = read_exact(path, n * sizeof(float), idx);
                const float* vp = reinterpret_cast<const float*>(raw.data());
                Scalar* vdst = tl.values.data() + static_cast<std::int64_t>(bi) * static_cast<std::int64_t>(n);
                for (std::size_t i = 0; i < n; ++i) vdst[i] = static_cast<Scalar>(vp[i]);
            }
        }
    }
    return batch;
}

}  // namespace pmtl
