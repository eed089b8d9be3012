#include "segcomp/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "segcomp/error.hpp"

namespace segcomp {

std::vector<int> top_k_classes(std::span<const double> probs, int k) {
    const int n = static_cast<int>(probs.size());
    if (k < 1 || k > n) throw ConfigError("top-k k must lie in [1, K]");
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs[a] > probs[b]; });
    order.resize(k);
    return order;
}

double sigma_sq(std::span<const double> logits, std::span<const double> B, int num_classes,
                double beta, int k) {
    const std::vector<double> p = plain_probabilities(logits);
    const std::vector<int> top = top_k_classes(p, k);
    const int o = top[0];
    std::vector<double> pc(num_classes);
    double acc = 0.0;
    for (int c : top) {
        compensated_probabilities(logits, B, num_classes, beta, c, pc);
        const double d = pc[o] - p[o];
        acc += d * d;
    }
    return acc / k;
}

double error_likelihood(std::span<const double> logits, std::span<const double> B,
                        int num_classes, double beta, int k, double phi) {
    if (!(phi > 0.0)) throw ConfigError("phi must be > 0");
    const std::vector<double> p = plain_probabilities(logits);
    const double u = 1.0 - *std::max_element(p.begin(), p.end());
    const double s2 = sigma_sq(logits, B, num_classes, beta, k);
    return std::pow(s2 * u, phi);
}

UncertaintyMapSet uncertainty_maps(SegModel& model, const CompensationMatrix& comp,
                                   const FeatureGrid& features, int k, double phi) {
    if (!(phi > 0.0)) throw ConfigError("phi must be > 0");
    const int kk = model.dims.num_classes;
    if (k < 1 || k > kk) throw ConfigError("top-k k must lie in [1, K]");
    const auto b_mat = comp.materialize();

    ForwardResult fr = forward(model, features, Mode::eval);
    const size_t n = fr.logits.pixels();

    UncertaintyMapSet maps;
    maps.beta = {MapKind::beta, phi, Grid2(features.h, features.w)};
    maps.sigma2 = {MapKind::sigma2, phi, Grid2(features.h, features.w)};
    maps.u = {MapKind::u, phi, Grid2(features.h, features.w)};
    maps.e = {MapKind::e, phi, Grid2(features.h, features.w)};

    std::vector<double> p(kk), pc(kk);
    for (size_t px = 0; px < n; ++px) {
        const std::span<const double> l(fr.logits.v.data() + px * kk, kk);
        const double beta = fr.beta.v[px];
        plain_probabilities(l, p);
        const double u = 1.0 - *std::max_element(p.begin(), p.end());
        const double s2 = sigma_sq(l, b_mat, kk, beta, k);
        maps.beta.values.v[px] = beta;
        maps.sigma2.values.v[px] = s2;
        maps.u.values.v[px] = u;
        maps.e.values.v[px] = std::pow(s2 * u, phi);
    }
    return maps;
}

std::vector<std::pair<int, double>> k_sensitivity(SegModel& model,
                                                  const CompensationMatrix& comp,
                                                  const Dataset& ds,
                                                  const std::vector<int>& ks) {
    const int kk = model.dims.num_classes;
    for (int k : ks)
        if (k < 1 || k > kk) throw ConfigError("k values must lie in [1, K]");
    if (ds.empty()) throw DataError("dataset is empty");
    const auto b_mat = comp.materialize();

    std::vector<double> abs_sum(ks.size(), 0.0);
    size_t count = 0;
    std::vector<double> p(kk), pc(kk), d2_prefix(kk + 1);
    for (const auto& feats : ds.features) {
        ForwardResult fr = forward(model, feats, Mode::eval);
        const size_t n = fr.logits.pixels();
        for (size_t px = 0; px < n; ++px) {
            const std::span<const double> l(fr.logits.v.data() + px * kk, kk);
            const double beta = fr.beta.v[px];
            plain_probabilities(l, p);
            const double u = 1.0 - *std::max_element(p.begin(), p.end());
            const std::vector<int> order = top_k_classes(p, kk);
            const int o = order[0];
            // prefix sums of squared deviations in rank order give every
            // sigma^2(k) at once
            d2_prefix[0] = 0.0;
            for (int i = 0; i < kk; ++i) {
                compensated_probabilities(l, b_mat, kk, beta, order[i], pc);
                const double d = pc[o] - p[o];
                d2_prefix[i + 1] = d2_prefix[i] + d * d;
            }
            const double e_full = (d2_prefix[kk] / kk) * u;
            for (size_t i = 0; i < ks.size(); ++i) {
                const double e_k = (d2_prefix[ks[i]] / ks[i]) * u;
                abs_sum[i] += std::abs(e_k - e_full);
            }
        }
        count += n;
    }
    std::vector<std::pair<int, double>> out;
    out.reserve(ks.size());
    for (size_t i = 0; i < ks.size(); ++i)
        out.emplace_back(ks[i], abs_sum[i] / static_cast<double>(count));
    return out;
}

std::string map_filename(std::string_view base, const UncertaintyMap& map) {
    std::string name(base);
    name += "_";
    name += map_kind_name(map.kind);
    if (map.kind == MapKind::e) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "_phi%g", map.phi);
        name += buf;
    }
    return name + ".pgm";
}

void write_pgm(const std::filesystem::path& file, const UncertaintyMap& map) {
    const Grid2& g = map.values;
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError("cannot write " + file.string());
    out << "P5\n" << g.w << " " << g.h << "\n255\n";
    std::vector<uint8_t> row(g.w);
    for (int y = 0; y < g.h; ++y) {
        for (int x = 0; x < g.w; ++x) {
            const double v = std::clamp(g.at(y, x), 0.0, 1.0);
            row[x] = static_cast<uint8_t>(std::lround(255.0 * v));
        }
        out.write(reinterpret_cast<const char*>(row.data()), g.w);
    }
}

}  // namespace segcomp
