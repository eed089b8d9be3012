#include "segcomp/synthgrid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "segcomp/error.hpp"
#include "segcomp/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "dataset and checkpoint formats are little-endian");

namespace segcomp {

namespace {

constexpr uint64_t kProtoStream = 0x70726f746f;   // prototype construction
constexpr uint64_t kSceneStream = 0x7363656e65;   // per-image region growth + noise
constexpr uint64_t kAssignStream = 0x61737369;    // superior/inferior sampling

constexpr double kForeignCosineCap = 0.3;

double round_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace

void SceneConfig::validate() const {
    if (num_classes < 2 || num_classes > 255)
        throw ConfigError("num_classes must be in [2, 255], got " + std::to_string(num_classes));
    if (height < 1 || width < 1) throw ConfigError("scene height/width must be >= 1");
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (num_regions < 1) throw ConfigError("num_regions must be >= 1");
    if (static_cast<long long>(num_regions) > static_cast<long long>(height) * width)
        throw ConfigError("num_regions exceeds pixel count");
    if (!std::isfinite(noise_std) || noise_std < 0.0)
        throw ConfigError("noise_std must be finite and >= 0");
    if (boundary_mix_width < 0) throw ConfigError("boundary_mix_width must be >= 0");
    // Prototype construction places one orthonormal basis vector per class.
    if (feature_dim < num_classes)
        throw ConfigError("feature_dim must be >= num_classes for prototype construction");
    std::vector<int> pair_use(num_classes, 0);
    for (const auto& ap : ambiguous_pairs) {
        const auto [a, b] = ap.classes;
        if (a < 0 || a >= num_classes || b < 0 || b >= num_classes)
            throw ConfigError("ambiguous pair class out of range");
        if (a == b) throw ConfigError("ambiguous pair must name two distinct classes");
        if (!std::isfinite(ap.similarity) || ap.similarity < 0.0 || ap.similarity > 1.0)
            throw ConfigError("pair similarity must lie in [0, 1]");
        if (++pair_use[a] > 1 || ++pair_use[b] > 1)
            throw ConfigError("ambiguous pairs must be disjoint");
    }
    if (!class_names.empty() && static_cast<int>(class_names.size()) != num_classes)
        throw ConfigError("class_names size must equal num_classes");
}

std::vector<std::string> SceneConfig::resolved_class_names() const {
    return class_names.empty() ? default_class_names(num_classes) : class_names;
}

std::vector<std::vector<double>> class_prototypes(const SceneConfig& cfg) {
    cfg.validate();
    const int k = cfg.num_classes;
    const int d = cfg.feature_dim;
    Rng rng(derive_seed(cfg.seed, kProtoStream));

    // Orthonormal basis, one vector per class, via Gram-Schmidt on Gaussians.
    std::vector<std::vector<double>> basis;
    basis.reserve(k);
    while (static_cast<int>(basis.size()) < k) {
        std::vector<double> q(d);
        for (double& x : q) x = rng.next_gaussian();
        for (const auto& b : basis) {
            const double dot = std::inner_product(q.begin(), q.end(), b.begin(), 0.0);
            for (int i = 0; i < d; ++i) q[i] -= dot * b[i];
        }
        const double norm = std::sqrt(std::inner_product(q.begin(), q.end(), q.begin(), 0.0));
        if (norm < 1e-8) continue;  // degenerate draw; redo
        for (double& x : q) x /= norm;
        basis.push_back(std::move(q));
    }

    std::vector<std::vector<double>> protos(k);
    std::vector<int> partner(k, -1), owner_of_pair(k, -1);
    std::vector<double> pair_sim(k, 0.0);
    for (const auto& ap : cfg.ambiguous_pairs) {
        const int lo = std::min(ap.classes.class_a, ap.classes.class_b);
        const int hi = std::max(ap.classes.class_a, ap.classes.class_b);
        partner[lo] = hi;
        owner_of_pair[hi] = lo;
        pair_sim[lo] = ap.similarity;
    }

    int next_basis = 0;
    for (int c = 0; c < k; ++c) {
        if (owner_of_pair[c] >= 0) continue;  // built together with its pair owner
        protos[c] = basis[next_basis++];
        if (partner[c] >= 0) {
            // Partner = s * proto_c + sqrt(1 - s^2) * orthogonal direction.
            // A hair of margin keeps the measured cosine >= s after the
            // float32 rounding below.
            const double s_raw = pair_sim[c];
            const double s = std::min(1.0, s_raw + (1.0 - s_raw) * 1e-3);
            const int p = partner[c];
            if (s >= 1.0) {
                protos[p] = protos[c];
            } else {
                const auto& u = protos[c];
                const auto& v = basis[next_basis++];
                std::vector<double> q(d);
                const double t = std::sqrt(1.0 - s * s);
                for (int i = 0; i < d; ++i) q[i] = s * u[i] + t * v[i];
                protos[p] = std::move(q);
            }
        }
    }

    for (auto& p : protos)
        for (double& x : p) x = round_f32(x);
    return protos;
}

namespace {

// Seeded multi-source random region growth over the 4-connected grid.
std::vector<int> grow_regions(const SceneConfig& cfg, Rng& rng, std::vector<int>& region_class) {
    const int h = cfg.height, w = cfg.width, n = h * w;
    const int regions = cfg.num_regions;

    region_class.resize(regions);
    for (int r = 0; r < regions; ++r) region_class[r] = r % cfg.num_classes;
    rng.shuffle(region_class.data(), region_class.size());

    std::vector<int> region_of(n, -1);
    std::set<int> taken;
    std::vector<std::pair<int, int>> frontier;  // (cell, region)
    for (int r = 0; r < regions; ++r) {
        int cell;
        do {
            cell = rng.next_int(n);
        } while (!taken.insert(cell).second);
        region_of[cell] = r;
        frontier.emplace_back(cell, r);
    }

    // Each frontier entry proposes growing `region` into `cell`'s neighbours.
    auto push_neighbors = [&](int cell, int region) {
        const int y = cell / w, x = cell % w;
        const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int i = 0; i < 4; ++i) {
            const int ny = y + dy[i], nx = x + dx[i];
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const int nc = ny * w + nx;
            if (region_of[nc] < 0) frontier.emplace_back(nc, region);
        }
    };
    std::vector<std::pair<int, int>> seeds = frontier;
    frontier.clear();
    for (const auto& [cell, region] : seeds) push_neighbors(cell, region);

    while (!frontier.empty()) {
        const size_t pick = rng.next_below(frontier.size());
        const auto [cell, region] = frontier[pick];
        frontier[pick] = frontier.back();
        frontier.pop_back();
        if (region_of[cell] >= 0) continue;
        region_of[cell] = region;
        push_neighbors(cell, region);
    }
    return region_of;
}

}  // namespace

std::pair<FeatureGrid, LabelGrid> generate_scene(const SceneConfig& cfg, int image_index) {
    cfg.validate();
    if (image_index < 0) throw ConfigError("image_index must be >= 0");
    const int h = cfg.height, w = cfg.width, d = cfg.feature_dim;

    const auto protos = class_prototypes(cfg);
    Rng rng(derive_seed(cfg.seed, kSceneStream, static_cast<uint64_t>(image_index)));

    std::vector<int> region_class;
    const std::vector<int> region_of = grow_regions(cfg, rng, region_class);

    LabelGrid labels(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) labels.at(y, x) = region_class[region_of[y * w + x]];

    FeatureGrid features(h, w, d);
    const int mixw = cfg.boundary_mix_width;
    std::vector<double> base(d);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int own = labels.at(y, x);
            std::copy(protos[own].begin(), protos[own].end(), base.begin());

            if (mixw > 0) {
                // Nearest differently-labeled pixel within the mix band,
                // scanned ring by ring (Chebyshev), raster order within a ring.
                int other = -1, dist = 0;
                for (int t = 1; t <= mixw && other < 0; ++t) {
                    for (int dy = -t; dy <= t && other < 0; ++dy) {
                        for (int dx = -t; dx <= t; ++dx) {
                            if (std::max(std::abs(dy), std::abs(dx)) != t) continue;
                            const int ny = y + dy, nx = x + dx;
                            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                            if (labels.at(ny, nx) != own) {
                                other = labels.at(ny, nx);
                                dist = t;
                                break;
                            }
                        }
                    }
                }
                if (other >= 0) {
                    const double lam = 0.5 * (1.0 - static_cast<double>(dist) / (mixw + 1));
                    for (int i = 0; i < d; ++i)
                        base[i] = (1.0 - lam) * base[i] + lam * protos[other][i];
                }
            }

            double* out = features.px(y, x);
            if (cfg.noise_std > 0.0) {
                for (int i = 0; i < d; ++i)
                    out[i] = round_f32(base[i] + cfg.noise_std * rng.next_gaussian());
            } else {
                for (int i = 0; i < d; ++i) out[i] = round_f32(base[i]);
            }
        }
    }
    return {std::move(features), std::move(labels)};
}

Dataset generate_dataset(const SceneConfig& cfg, int image_count, int first_index) {
    if (image_count < 0) throw ConfigError("image_count must be >= 0");
    Dataset ds;
    ds.num_classes = cfg.num_classes;
    ds.seed = cfg.seed;
    ds.class_names = cfg.resolved_class_names();
    ds.features.reserve(image_count);
    ds.labels.reserve(image_count);
    for (int i = 0; i < image_count; ++i) {
        auto [f, l] = generate_scene(cfg, first_index + i);
        ds.features.push_back(std::move(f));
        ds.labels.push_back(std::move(l));
    }
    return ds;
}

std::vector<OrientedPair> PairAssignment::for_image(int image) const {
    std::vector<OrientedPair> out;
    out.reserve(pairs.size());
    for (size_t p = 0; p < pairs.size(); ++p) out.push_back(at(image, static_cast<int>(p)));
    return out;
}

PairAssignment sample_pair_assignments(const std::vector<ClassPair>& pairs, int num_images,
                                       uint64_t seed) {
    if (pairs.empty()) throw ConfigError("pair list must be non-empty");
    if (num_images < 0) throw ConfigError("num_images must be >= 0");
    for (const auto& p : pairs)
        if (p.class_a == p.class_b)
            throw ConfigError("class pair must name two distinct classes");

    PairAssignment a;
    a.pairs = pairs;
    a.num_images = num_images;
    a.table.reserve(static_cast<size_t>(num_images) * pairs.size());
    Rng rng(derive_seed(seed, kAssignStream));
    for (int img = 0; img < num_images; ++img) {
        for (const auto& p : pairs) {
            const bool flip = rng.next_bool();
            a.table.push_back(flip ? OrientedPair{p.class_b, p.class_a}
                                   : OrientedPair{p.class_a, p.class_b});
        }
    }
    return a;
}

LabelGrid corrupt_labels(const LabelGrid& labels, const std::vector<OrientedPair>& pairs,
                         int radius, int num_classes) {
    if (radius < 0) throw ConfigError("radius must be >= 0");
    const int h = labels.h, w = labels.w;
    for (int lab : labels.v)
        if (lab < 0 || lab >= num_classes)
            throw DataError("label out of range [0, " + std::to_string(num_classes) + ")");
    for (const auto& p : pairs) {
        if (p.superior < 0 || p.superior >= num_classes || p.inferior < 0 ||
            p.inferior >= num_classes)
            throw DataError("oriented pair class out of range");
        if (p.superior == p.inferior) throw DataError("oriented pair classes must differ");
    }

    LabelGrid out = labels;
    std::vector<uint8_t> claimed(labels.size(), 0);
    std::vector<int> dist(labels.size());
    std::deque<int> queue;

    for (const auto& pair : pairs) {
        // Chebyshev distance to the nearest superior pixel of the original
        // grid: multi-source BFS over the 8-connected graph.
        std::fill(dist.begin(), dist.end(), std::numeric_limits<int>::max());
        queue.clear();
        for (size_t i = 0; i < labels.size(); ++i) {
            if (labels.v[i] == pair.superior) {
                dist[i] = 0;
                queue.push_back(static_cast<int>(i));
            }
        }
        while (!queue.empty()) {
            const int cell = queue.front();
            queue.pop_front();
            const int y = cell / w, x = cell % w;
            if (dist[cell] >= radius) continue;  // no need to expand further
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    const int nc = ny * w + nx;
                    if (dist[nc] > dist[cell] + 1) {
                        dist[nc] = dist[cell] + 1;
                        queue.push_back(nc);
                    }
                }
            }
        }
        for (size_t i = 0; i < labels.size(); ++i) {
            if (labels.v[i] == pair.inferior && dist[i] <= radius && !claimed[i]) {
                out.v[i] = pair.superior;
                claimed[i] = 1;
            }
        }
    }
    return out;
}

// --- dataset directory IO ---------------------------------------------------

namespace {

void check_grid_shapes(const Dataset& ds) {
    if (ds.empty()) throw DataError("dataset has no images");
    if (ds.features.size() != ds.labels.size())
        throw DataError("feature/label image counts differ");
    const int h = ds.features[0].h, w = ds.features[0].w, d = ds.features[0].c;
    for (size_t i = 0; i < ds.size(); ++i) {
        if (ds.features[i].h != h || ds.features[i].w != w || ds.features[i].c != d)
            throw DataError("all images in a dataset directory must share one shape");
        if (ds.labels[i].h != h || ds.labels[i].w != w)
            throw DataError("label grid shape mismatch");
        for (int lab : ds.labels[i].v)
            if (lab < 0 || lab >= ds.num_classes) throw DataError("label out of range");
    }
}

std::vector<char> read_file_bytes(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open " + file.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    return bytes;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    check_grid_shapes(ds);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir))
        throw DataError("cannot create dataset directory " + dir.string());

    const int h = ds.features[0].h, w = ds.features[0].w, d = ds.features[0].c;
    {
        std::ofstream out(dir / "features.bin", std::ios::binary);
        if (!out) throw DataError("cannot write features.bin under " + dir.string());
        std::vector<float> buf;
        for (const auto& img : ds.features) {
            buf.assign(img.v.begin(), img.v.end());
            out.write(reinterpret_cast<const char*>(buf.data()),
                      static_cast<std::streamsize>(buf.size() * sizeof(float)));
        }
        if (!out) throw DataError("short write to features.bin");
    }
    {
        std::ofstream out(dir / "labels.bin", std::ios::binary);
        if (!out) throw DataError("cannot write labels.bin under " + dir.string());
        std::vector<uint8_t> buf;
        for (const auto& img : ds.labels) {
            buf.assign(img.v.begin(), img.v.end());
            out.write(reinterpret_cast<const char*>(buf.data()),
                      static_cast<std::streamsize>(buf.size()));
        }
        if (!out) throw DataError("short write to labels.bin");
    }
    // Manifest last: a directory without one is visibly incomplete.
    nlohmann::ordered_json m;
    m["height"] = h;
    m["width"] = w;
    m["feature_dim"] = d;
    m["num_classes"] = ds.num_classes;
    m["image_count"] = ds.size();
    m["seed"] = ds.seed;
    m["class_names"] = ds.class_names.empty() ? default_class_names(ds.num_classes)
                                              : ds.class_names;
    std::ofstream out(dir / "manifest.json");
    if (!out) throw DataError("cannot write manifest.json under " + dir.string());
    out << m.dump(2) << "\n";
}

Dataset read_dataset(const std::filesystem::path& dir) {
    nlohmann::json m;
    {
        std::ifstream in(dir / "manifest.json");
        if (!in) throw DataError("cannot open manifest.json under " + dir.string());
        try {
            in >> m;
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("malformed manifest: ") + e.what());
        }
    }
    Dataset ds;
    int h, w, d;
    size_t count;
    try {
        h = m.at("height").get<int>();
        w = m.at("width").get<int>();
        d = m.at("feature_dim").get<int>();
        ds.num_classes = m.at("num_classes").get<int>();
        count = m.at("image_count").get<size_t>();
        ds.seed = m.at("seed").get<uint64_t>();
        ds.class_names = m.at("class_names").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    }
    if (h < 1 || w < 1 || d < 1 || ds.num_classes < 2)
        throw DataError("manifest declares an invalid shape");

    const size_t px = static_cast<size_t>(h) * w;
    const auto fbytes = read_file_bytes(dir / "features.bin");
    if (fbytes.size() != count * px * d * sizeof(float))
        throw DataError("features.bin size does not match manifest");
    const auto lbytes = read_file_bytes(dir / "labels.bin");
    if (lbytes.size() != count * px)
        throw DataError("labels.bin size does not match manifest");

    const float* f = reinterpret_cast<const float*>(fbytes.data());
    const uint8_t* l = reinterpret_cast<const uint8_t*>(lbytes.data());
    for (size_t i = 0; i < count; ++i) {
        FeatureGrid fg(h, w, d);
        for (size_t j = 0; j < px * d; ++j) fg.v[j] = static_cast<double>(f[i * px * d + j]);
        LabelGrid lg(h, w);
        for (size_t j = 0; j < px; ++j) {
            const uint8_t byte = l[i * px + j];
            if (byte >= ds.num_classes)
                throw DataError("label byte " + std::to_string(byte) + " >= num_classes");
            lg.v[j] = byte;
        }
        ds.features.push_back(std::move(fg));
        ds.labels.push_back(std::move(lg));
    }
    return ds;
}

}  // namespace segcomp
